"""Transition tuples and a seeded uniform ring replay buffer."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .agents import HighAction, HighState, LowState


@dataclass
class Transition:
    """High-level tuple (s, a, r, s', [a']); a' is required in offline mode.

    low_state0 carries the edge state at step 0 so offline training can build
    policy proposals for the conservative penalty.
    """

    s: HighState
    a: HighAction
    r: float
    s_next: HighState
    a_next: HighAction | None = None
    terminal: bool = False
    low_state0: LowState | None = None

    def __post_init__(self):
        if not 0.0 <= self.r <= 1.0:
            raise ValueError(f"session reward must be in [0, 1], got {self.r}")


class ReplayBuffer:
    """FIFO ring buffer with seeded uniform sampling (no replacement in a batch)."""

    def __init__(self, capacity: int, rng: np.random.Generator):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self.rng = rng
        self._items: list = []
        self._write = 0

    def __len__(self) -> int:
        return len(self._items)

    def push(self, item) -> None:
        if len(self._items) < self.capacity:
            self._items.append(item)
        else:
            self._items[self._write] = item
        self._write = (self._write + 1) % self.capacity

    def sample(self, n: int) -> list:
        if n < 1:
            raise ValueError("sample size must be >= 1")
        if n > len(self._items):
            raise ValueError(f"cannot sample {n} from buffer of {len(self._items)}")
        idx = self.rng.choice(len(self._items), size=n, replace=False)
        return [self._items[i] for i in idx]

    def items(self) -> list:
        return list(self._items)
