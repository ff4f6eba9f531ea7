"""Deterministic byte accounting that stands in for device memory.

Every registered tensor costs 4 bytes per element for as long as it is
registered. Kernel workspaces (im2col buffers and the like) are not
registered; only logical tensors are.
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

BYTES_PER_ELEMENT = 4


def tensor_bytes(arr) -> int:
    return BYTES_PER_ELEMENT * int(np.size(arr))


@dataclass
class ScopeStats:
    start_bytes: int
    peak_bytes: int


class MemoryMeter:
    """Tracks live and peak accounted bytes.

    Tensors are registered by identity. A registration holds a reference to
    the array so that its ``id`` cannot be recycled while it is counted.
    """

    def __init__(self) -> None:
        self.live_bytes = 0
        self.peak_bytes = 0
        self._live: dict[int, tuple[np.ndarray, int]] = {}
        self._scopes: list[tuple[ScopeStats, set[int]]] = []

    def allocate(self, *arrays) -> None:
        for arr in arrays:
            if arr is None or id(arr) in self._live:
                continue
            nbytes = tensor_bytes(arr)
            self._live[id(arr)] = (arr, nbytes)
            self.live_bytes += nbytes
            for _, owned in self._scopes:
                owned.add(id(arr))
        self._update_peaks()

    def release(self, *arrays) -> None:
        for arr in arrays:
            if arr is None:
                continue
            entry = self._live.pop(id(arr), None)
            if entry is not None:
                self.live_bytes -= entry[1]

    def is_live(self, arr) -> bool:
        return id(arr) in self._live

    def _update_peaks(self) -> None:
        if self.live_bytes > self.peak_bytes:
            self.peak_bytes = self.live_bytes
        for stats, _ in self._scopes:
            if self.live_bytes > stats.peak_bytes:
                stats.peak_bytes = self.live_bytes

    @contextmanager
    def scope(self):
        """Yield a ScopeStats whose ``peak_bytes`` is the scope's maximum.

        Anything registered inside the scope and still live at exit is
        released, so ``live_bytes`` returns to its value at entry.
        """
        stats = ScopeStats(self.live_bytes, self.live_bytes)
        owned: set[int] = set()
        self._scopes.append((stats, owned))
        try:
            yield stats
        finally:
            self._scopes.pop()
            for key in owned:
                entry = self._live.pop(key, None)
                if entry is not None:
                    self.live_bytes -= entry[1]


class NullMeter(MemoryMeter):
    """Meter that accounts nothing; used when memory is not being measured."""

    def allocate(self, *arrays) -> None:
        pass

    def release(self, *arrays) -> None:
        pass


def meter_scope(meter: MemoryMeter, computation, *args, **kwargs):
    """Run ``computation`` inside a meter scope; return (result, scope peak)."""
    with meter.scope() as stats:
        result = computation(*args, **kwargs)
    return result, stats.peak_bytes


@dataclass
class StepTensors:
    """Registers tensors with a meter and releases them together."""

    meter: MemoryMeter
    held: list = field(default_factory=list)

    def add(self, *arrays):
        self.meter.allocate(*arrays)
        self.held.extend(a for a in arrays if a is not None)
        return arrays[0] if len(arrays) == 1 else arrays

    def keep(self, arr) -> None:
        """Stop managing ``arr``; it stays registered after release_all."""
        self.held = [t for t in self.held if t is not arr]

    def release_all(self) -> None:
        self.meter.release(*self.held)
        self.held.clear()
