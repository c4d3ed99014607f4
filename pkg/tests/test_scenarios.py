"""Full multi-process flows, each checked against its frozen transcript."""

from __future__ import annotations

import pytest

from psvc.scenario import SCENARIOS, run_scenario


@pytest.mark.parametrize("name", sorted(SCENARIOS))
def test_scenario(name):
    result = run_scenario(name)
    if not result.passed:
        report = "\n".join(result.failures)
        transcript = "\n".join(result.lines)
        pytest.fail(f"{name}:\n{report}\n\ntranscript:\n{transcript}")
