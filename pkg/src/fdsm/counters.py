"""Evaluation accounting: forward evals, derivative passes, tape depth, live bytes.

Counter frames form a thread-local stack. Every event is added to *all*
active frames, so an outer scope (e.g. a benchmark) sees the aggregate of
everything that happened inside it while an inner scope (one objective
evaluation) sees only its own share.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from dataclasses import dataclass, field


@dataclass
class EvalCounters:
    """Deterministic cost counters for one evaluation scope.

    forward_evals counts scalar function / model evaluations at the row
    level (a batched call on P points counts P). Derivative passes are
    split into first-order (backward over a plain forward graph) and
    nested (backward through the result of a previous backward pass).
    peak_live_bytes tracks tape-recorded tensor storage.
    """

    forward_evals: int = 0
    first_order_passes: int = 0
    nested_passes: int = 0
    max_tape_depth: int = 0
    live_bytes: int = 0
    peak_live_bytes: int = 0

    @property
    def derivative_passes(self) -> int:
        return self.first_order_passes + self.nested_passes


_local = threading.local()


def _frames() -> list[EvalCounters]:
    frames = getattr(_local, "frames", None)
    if frames is None:
        frames = []
        _local.frames = frames
    return frames


@contextmanager
def counters_scope(existing: EvalCounters | None = None):
    """Push a counter frame; yields the frame. Pass an existing frame to
    resume accumulating into it (used when the parameter-gradient pass of
    an objective happens after its evaluation scope closed)."""
    frame = existing if existing is not None else EvalCounters()
    frames = _frames()
    frames.append(frame)
    try:
        yield frame
    finally:
        frames.pop()


def count_forward(n: int) -> None:
    for frame in _frames():
        frame.forward_evals += n


def count_derivative_pass(nested: bool) -> None:
    for frame in _frames():
        if nested:
            frame.nested_passes += 1
        else:
            frame.first_order_passes += 1


def note_tape_depth(depth: int) -> None:
    for frame in _frames():
        if depth > frame.max_tape_depth:
            frame.max_tape_depth = depth


def count_bytes(nbytes: int) -> None:
    for frame in _frames():
        frame.live_bytes += nbytes
        if frame.live_bytes > frame.peak_live_bytes:
            frame.peak_live_bytes = frame.live_bytes


def release_bytes(nbytes: int) -> None:
    for frame in _frames():
        frame.live_bytes = max(0, frame.live_bytes - nbytes)
