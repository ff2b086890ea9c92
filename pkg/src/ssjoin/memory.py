"""Byte accountant used to enforce memory budgets."""
from __future__ import annotations

import threading

from .errors import BudgetExceeded


class MemoryAccountant:
    """Tracks reserved bytes against a hard limit and records the peak."""

    def __init__(self, limit: int, name: str = "memory"):
        self.limit = int(limit)
        self.name = name
        self.used = 0
        self.peak = 0
        self._lock = threading.Lock()

    def reserve(self, nbytes: int, what: str = "") -> None:
        nbytes = int(nbytes)
        with self._lock:
            self._reserve(nbytes, what)

    def _reserve(self, nbytes: int, what: str) -> None:
        if self.used + nbytes > self.limit:
            raise BudgetExceeded(
                f"{self.name}: reserving {nbytes} B for {what or 'allocation'} "
                f"would use {self.used + nbytes} B of {self.limit} B"
            )
        self.used += nbytes
        self.peak = max(self.peak, self.used)

    def release(self, nbytes: int) -> None:
        with self._lock:
            self.used -= int(nbytes)
            if self.used < 0:
                raise RuntimeError(f"{self.name}: released more than reserved")

    @property
    def available(self) -> int:
        return self.limit - self.used
