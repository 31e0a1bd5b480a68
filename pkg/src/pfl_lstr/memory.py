"""Two-stage FIFO memory: frames enter work memory and overflow into long memory."""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

BLOCKS = ("front", "rear", "cabin")


@dataclass(frozen=True)
class MemoryConfig:
    fps: int = 4
    work_seconds: float = 3
    long_seconds: float = 12

    def __post_init__(self):
        if self.fps <= 0 or self.work_seconds <= 0 or self.long_seconds <= 0:
            raise ValueError(f"memory lengths and fps must be positive: {self}")
        if self.work_slots < 1 or self.long_slots < 1:
            raise ValueError(f"memory config yields an empty queue: {self}")

    @property
    def work_slots(self) -> int:
        return int(round(self.fps * self.work_seconds))

    @property
    def long_slots(self) -> int:
        return int(round(self.fps * self.long_seconds))


@dataclass(frozen=True)
class FeatureFrame:
    """One time step: front | rear | cabin feature blocks concatenated."""

    values: np.ndarray
    t: int = 0

    @property
    def width(self) -> int:
        return self.values.shape[0]


@dataclass(frozen=True)
class MemoryView:
    """Fixed-size slot array, newest frame in slot 0, invalid slots zeroed."""

    slots: np.ndarray  # (n_slots, width)
    mask: np.ndarray  # (n_slots,) bool


@dataclass
class MemoryState:
    config: MemoryConfig
    width: int
    work: deque = field(default_factory=deque)
    long: deque = field(default_factory=deque)

    def __len__(self):
        return len(self.work) + len(self.long)


def empty_state(config: MemoryConfig, width: int) -> MemoryState:
    return MemoryState(config, width)


def push_frame(state: MemoryState, frame: FeatureFrame | np.ndarray) -> MemoryState:
    """Append ``frame``; the oldest work frame spills into long memory, the oldest long frame is dropped.

    Mutates and returns ``state``.
    """
    values = frame.values if isinstance(frame, FeatureFrame) else np.asarray(frame, dtype=np.float64)
    if values.shape != (state.width,):
        raise ValueError(f"frame width {values.shape} does not match memory width {state.width}")
    state.work.append(values)
    if len(state.work) > state.config.work_slots:
        state.long.append(state.work.popleft())
        if len(state.long) > state.config.long_slots:
            state.long.popleft()
    return state


def reset(state: MemoryState) -> MemoryState:
    state.work.clear()
    state.long.clear()
    return state


def _view(frames: deque, n_slots: int, width: int) -> MemoryView:
    slots = np.zeros((n_slots, width))
    mask = np.zeros(n_slots, dtype=bool)
    for i, v in enumerate(reversed(frames)):
        slots[i] = v
        mask[i] = True
    return MemoryView(slots, mask)


def snapshot(state: MemoryState) -> tuple[MemoryView, MemoryView]:
    """Return ``(long_view, work_view)``."""
    cfg = state.config
    return (
        _view(state.long, cfg.long_slots, state.width),
        _view(state.work, cfg.work_slots, state.width),
    )


def stream(frames, config: MemoryConfig, width: int | None = None) -> MemoryState:
    """Push every frame of an episode into a fresh memory."""
    frames = list(frames)
    if width is None:
        width = np.asarray(frames[0]).shape[-1]
    state = empty_state(config, width)
    for f in frames:
        push_frame(state, f)
    return state
