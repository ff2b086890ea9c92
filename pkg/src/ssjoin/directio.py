"""Page-aligned extent reads that bypass the page cache when the OS allows."""
from __future__ import annotations

import errno
import mmap
import os
import logging

from .errors import IoFailure

PAGE_SIZE = 4096

log = logging.getLogger(__name__)


def round_up(n: int, page: int = PAGE_SIZE) -> int:
    return -(-int(n) // page) * page


class ExtentReader:
    """Reads whole page-aligned extents with ``O_DIRECT``.

    Falls back to buffered reads plus ``POSIX_FADV_DONTNEED`` on filesystems
    that reject direct I/O (tmpfs, some overlays).  ``direct`` tells which
    path is active.  Every byte requested from the device is added to
    ``bytes_read``.
    """

    def __init__(self, path, direct: bool = True):
        self.path = os.fspath(path)
        self.direct = False
        self.bytes_read = 0
        self.reads = 0
        flags = os.O_RDONLY
        if direct and hasattr(os, "O_DIRECT"):
            try:
                self.fd = os.open(self.path, flags | os.O_DIRECT)
                self.direct = True
            except OSError as exc:
                if exc.errno != errno.EINVAL:
                    raise IoFailure(str(exc)) from exc
                log.warning("O_DIRECT unsupported for %s; using buffered reads", self.path)
        if not self.direct:
            try:
                self.fd = os.open(self.path, flags)
            except OSError as exc:
                raise IoFailure(str(exc)) from exc

    def read(self, offset: int, length: int) -> memoryview:
        """One sequential read of ``length`` bytes at ``offset`` (both page multiples)."""
        if offset % PAGE_SIZE or length % PAGE_SIZE:
            raise ValueError(f"unaligned extent ({offset}, {length})")
        if length == 0:
            return memoryview(b"")
        buf = mmap.mmap(-1, length)  # anonymous maps are page-aligned
        got = 0
        try:
            while got < length:
                try:
                    n = os.preadv(self.fd, [memoryview(buf)[got:]], offset + got)
                except OSError as exc:
                    if self.direct and exc.errno == errno.EINVAL:
                        self._drop_direct()
                        continue
                    raise IoFailure(str(exc)) from exc
                if n == 0:
                    raise IoFailure(f"{self.path}: short read at {offset + got}")
                got += n
        except BaseException:
            buf.close()
            raise
        if not self.direct and hasattr(os, "posix_fadvise"):
            os.posix_fadvise(self.fd, offset, length, os.POSIX_FADV_DONTNEED)
        self.bytes_read += length
        self.reads += 1
        return memoryview(buf)

    def _drop_direct(self) -> None:
        log.warning("direct read rejected for %s; using buffered reads", self.path)
        os.close(self.fd)
        self.fd = os.open(self.path, os.O_RDONLY)
        self.direct = False

    def close(self) -> None:
        if self.fd is not None:
            os.close(self.fd)
            self.fd = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
