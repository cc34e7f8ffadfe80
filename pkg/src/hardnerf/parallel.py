"""Deterministic / fast switch for gradient scatter, and the worker cap."""

from __future__ import annotations

import os

_deterministic = True


def set_deterministic(flag: bool) -> None:
    global _deterministic
    _deterministic = bool(flag)


def is_deterministic() -> bool:
    return _deterministic


def num_threads() -> int:
    env = os.environ.get("HARDMINE_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1
