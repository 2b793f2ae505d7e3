"""Operation counters proving which code paths a command exercised.

The student-only inference path must never touch the prior provider or
the attention machinery; `semfuse fuse` snapshots these counters around
its work and fails loudly if either moved.
"""
from __future__ import annotations

COUNTERS: dict[str, int] = {"provider": 0, "attention": 0}


def bump(name: str) -> None:
    COUNTERS[name] = COUNTERS.get(name, 0) + 1


def snapshot() -> dict[str, int]:
    return dict(COUNTERS)


def delta(before: dict[str, int]) -> dict[str, int]:
    return {k: COUNTERS.get(k, 0) - before.get(k, 0) for k in set(COUNTERS) | set(before)}
