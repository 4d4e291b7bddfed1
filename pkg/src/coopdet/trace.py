"""Lightweight op-invocation tracing for debug and flag-orthogonality checks."""

from __future__ import annotations

from contextlib import contextmanager
from contextvars import ContextVar

_trace: ContextVar[list | None] = ContextVar("coopdet_trace", default=None)


def record(name: str) -> None:
    buf = _trace.get()
    if buf is not None:
        buf.append(name)


@contextmanager
def capture():
    """Collect the names of pipeline mechanisms invoked inside the block."""
    buf: list[str] = []
    token = _trace.set(buf)
    try:
        yield buf
    finally:
        _trace.reset(token)
