"""Live-byte accounting for tensor payloads.

Peak memory is proxied by the maximum sum of concurrently allocated tensor
payload bytes, which is deterministic across machines (unlike process RSS).
Tensors register on creation and deregister when garbage collected.
"""

from __future__ import annotations

import weakref


class MemoryTracker:
    """Running total and peak of live tensor payload bytes."""

    def __init__(self) -> None:
        self.current_bytes = 0
        self.peak_bytes = 0

    def alloc(self, nbytes: int) -> None:
        self.current_bytes += nbytes
        if self.current_bytes > self.peak_bytes:
            self.peak_bytes = self.current_bytes

    def free(self, nbytes: int) -> None:
        self.current_bytes -= nbytes

    def reset_peak(self) -> None:
        """Restart peak tracking from the current live total."""
        self.peak_bytes = self.current_bytes


_tracker = MemoryTracker()


def track(obj: object, nbytes: int) -> None:
    """Register a payload; it is freed when `obj` is collected."""
    _tracker.alloc(nbytes)
    weakref.finalize(obj, _tracker.free, nbytes)


def memory_probe() -> int:
    """Peak live tensor payload bytes observed since the last reset."""
    return _tracker.peak_bytes


def live_bytes() -> int:
    return _tracker.current_bytes


def reset_peak() -> None:
    _tracker.reset_peak()
