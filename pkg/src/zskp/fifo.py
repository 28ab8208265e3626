"""Bounded FIFO queues and a cooperative unit scheduler.

The accelerator's compute units communicate exclusively through bounded
FIFO queues. Failed pushes (queue full) and failed pops (queue empty) are
backpressure events; the queue counts them so stall accounting can be
surfaced when enabled. The scheduler steps a set of units round-robin, one
simulated cycle at a time, and reports a deadlock (with a queue occupancy
snapshot) if no unit can make progress while work remains.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field


class QueueFull(RuntimeError):
    pass


class QueueEmpty(RuntimeError):
    pass


class DeadlockError(RuntimeError):
    def __init__(self, snapshot: dict[str, int]):
        super().__init__(f"no unit can progress; queue occupancy: {snapshot}")
        self.snapshot = snapshot


@dataclass
class BoundedFifo:
    """FIFO-order queue with a hard depth bound and stall counters."""

    depth: int
    name: str = ""
    _items: deque = field(default_factory=deque, repr=False)
    push_stalls: int = 0
    pop_stalls: int = 0
    max_occupancy: int = 0

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError(f"queue depth must be >= 1, got {self.depth}")

    def __len__(self) -> int:
        return len(self._items)

    @property
    def full(self) -> bool:
        return len(self._items) >= self.depth

    @property
    def empty(self) -> bool:
        return not self._items

    def try_push(self, item) -> bool:
        if self.full:
            self.push_stalls += 1
            return False
        self._items.append(item)
        self.max_occupancy = max(self.max_occupancy, len(self._items))
        return True

    def try_pop(self):
        if not self._items:
            self.pop_stalls += 1
            return False, None
        return True, self._items.popleft()

    def push(self, item) -> None:
        if not self.try_push(item):
            raise QueueFull(f"push to full queue {self.name!r} (depth {self.depth})")

    def pop(self):
        ok, item = self.try_pop()
        if not ok:
            raise QueueEmpty(f"pop from empty queue {self.name!r}")
        return item


def run_units(units, queues, max_cycles: int = 1_000_000) -> int:
    """Step generator units round-robin until all finish; returns cycles.

    Each unit is a generator that yields True after a productive cycle and
    False after a stalled one. A full sweep with no progress while units
    remain is a deadlock.
    """
    live = list(units)
    cycles = 0
    while live:
        if cycles >= max_cycles:
            raise RuntimeError(f"scheduler exceeded {max_cycles} cycles")
        progressed = False
        still = []
        for u in live:
            try:
                progressed = bool(next(u)) or progressed
                still.append(u)
            except StopIteration:
                progressed = True
        live = still
        cycles += 1
        if live and not progressed:
            raise DeadlockError({q.name or f"q{i}": len(q) for i, q in enumerate(queues)})
    return cycles
