"""Shared event log for multi-process demo runs.

Every party (broker, proxy, SP, personal service) appends one JSON line
per salient step to the file named by the PSVC_TRANSCRIPT environment
variable.  Lines are small and written with a single append, so
concurrent writers do not interleave.  Ordering uses the system-wide
monotonic clock, which all local processes share.

Event directions:

    >   sent a request            (method, url)
    <   received a response       (status, origin)
    =   served a request          (method, path -> status)
    +   spawned a child process

The detail mapping holds salient header fields only: loc= Location,
svc= a short tag for PSvc-Service, err=/in_err= PSvc-Error on the
response/request, setcookie=1, spawn fields, and the like.
"""

from __future__ import annotations

import json
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable

ENV_VAR = "PSVC_TRANSCRIPT"

SEND = ">"
RECV = "<"
SERVE = "="
SPAWN = "+"


@dataclass(frozen=True)
class Event:
    ts: int
    actor: str
    direction: str
    method: str
    path: str
    status: int | None = None
    detail: dict[str, Any] = field(default_factory=dict)

    def render(self) -> str:
        """One readable line, stable given stable inputs."""
        parts = [f"{self.actor:<7} {self.direction} {self.method} {self.path}".rstrip()]
        if self.status is not None:
            parts.append(f"-> {self.status}")
        for key in sorted(self.detail):
            parts.append(f"{key}={self.detail[key]}")
        return " ".join(parts)


class Transcript:
    """Appends events to one JSONL file; a None path makes it a no-op."""

    def __init__(self, path: str | os.PathLike | None, actor: str):
        self.path = Path(path) if path else None
        self.actor = actor

    @classmethod
    def from_env(cls, actor: str) -> "Transcript":
        return cls(os.environ.get(ENV_VAR), actor)

    def emit(
        self,
        direction: str,
        method: str,
        path: str,
        status: int | None = None,
        **detail: Any,
    ) -> None:
        if self.path is None:
            return
        event = {
            "ts": time.monotonic_ns(),
            "actor": self.actor,
            "direction": direction,
            "method": method,
            "path": path,
            "status": status,
            "detail": {k: v for k, v in detail.items() if v is not None},
        }
        line = json.dumps(event, ensure_ascii=True) + "\n"
        # One small append per event keeps concurrent writers whole.
        with open(self.path, "a", encoding="ascii") as fh:
            fh.write(line)


def read_events(path: str | os.PathLike) -> list[Event]:
    """Load a transcript file ordered by the shared monotonic clock."""
    events: list[Event] = []
    text = Path(path).read_text("ascii") if Path(path).exists() else ""
    for line in text.splitlines():
        if not line.strip():
            continue
        raw = json.loads(line)
        events.append(
            Event(
                ts=raw["ts"],
                actor=raw["actor"],
                direction=raw["direction"],
                method=raw["method"],
                path=raw["path"],
                status=raw["status"],
                detail=raw.get("detail", {}),
            )
        )
    events.sort(key=lambda e: e.ts)
    return events


def render_events(events: Iterable[Event]) -> list[str]:
    return [e.render() for e in events]
