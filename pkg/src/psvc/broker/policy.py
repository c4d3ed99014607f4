"""Which SPs may see or use which services.

``policy.json`` next to the descriptors:

    {"mode": "blacklist",
     "hosts": ["ads.example:*"],
     "services": {"cc-personal-service": {"mode": "whitelist",
                                          "hosts": ["bank.example:443"]}}}

Modes: ``allow_all`` (default when the file is absent), ``whitelist``
(only listed hosts may see the service), ``blacklist`` (listed hosts
may not).  Patterns are shell-style globs matched against the SP's
``host:port`` and bare host.  A ``services`` entry overrides the global
rule for one descriptor id.
"""

from __future__ import annotations

import fnmatch
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

log = logging.getLogger(__name__)

POLICY_FILE = "policy.json"

MODE_ALLOW_ALL = "allow_all"
MODE_WHITELIST = "whitelist"
MODE_BLACKLIST = "blacklist"
_MODES = (MODE_ALLOW_ALL, MODE_WHITELIST, MODE_BLACKLIST)


class PolicyError(ValueError):
    """policy.json present but unusable."""


def _host_matches(sp_host: str, patterns: tuple[str, ...]) -> bool:
    bare = sp_host.rsplit(":", 1)[0] if ":" in sp_host else sp_host
    return any(
        fnmatch.fnmatchcase(sp_host, pat) or fnmatch.fnmatchcase(bare, pat)
        for pat in patterns
    )


@dataclass(frozen=True)
class _Rule:
    mode: str
    hosts: tuple[str, ...] = ()

    def allows(self, sp_host: str) -> bool:
        if self.mode == MODE_ALLOW_ALL:
            return True
        hit = _host_matches(sp_host, self.hosts)
        return hit if self.mode == MODE_WHITELIST else not hit


@dataclass(frozen=True)
class AccessPolicy:
    """Per-SP visibility rules with per-service overrides."""

    default: _Rule = field(default_factory=lambda: _Rule(MODE_ALLOW_ALL))
    overrides: dict[str, _Rule] = field(default_factory=dict)

    def allows(self, sp_host: str, descriptor_id: str) -> bool:
        """May this SP see and use this service?"""
        rule = self.overrides.get(descriptor_id, self.default)
        return rule.allows(sp_host)


def _parse_rule(doc: dict, where: str) -> _Rule:
    mode = doc.get("mode", MODE_ALLOW_ALL)
    if mode not in _MODES:
        raise PolicyError(f"{where}: unknown mode {mode!r}")
    hosts = doc.get("hosts", [])
    if not isinstance(hosts, list) or not all(isinstance(h, str) for h in hosts):
        raise PolicyError(f"{where}: hosts must be a list of patterns")
    return _Rule(mode, tuple(hosts))


def load_policy(ps_dir: Path | str) -> AccessPolicy:
    """Read policy.json from the descriptor directory; absent means allow all."""
    path = Path(ps_dir) / POLICY_FILE
    if not path.exists():
        return AccessPolicy()
    try:
        doc = json.loads(path.read_text("utf-8"))
    except (OSError, ValueError) as exc:
        raise PolicyError(f"cannot read {path.name}: {exc}") from None
    if not isinstance(doc, dict):
        raise PolicyError(f"{path.name}: top level must be an object")
    default = _parse_rule(doc, path.name)
    overrides: dict[str, _Rule] = {}
    services = doc.get("services", {})
    if not isinstance(services, dict):
        raise PolicyError(f"{path.name}: services must be an object")
    for sid, sub in services.items():
        if not isinstance(sub, dict):
            raise PolicyError(f"{path.name}: override for {sid!r} must be an object")
        overrides[sid] = _parse_rule(sub, f"{path.name}:{sid}")
    return AccessPolicy(default, overrides)
