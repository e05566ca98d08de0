"""Process-level tuning for the many short-lived arrays of hybrid training."""

import ctypes
import ctypes.util
import logging

log = logging.getLogger(__name__)

_M_TRIM_THRESHOLD = -1
_M_MMAP_THRESHOLD = -3


def tune_allocator(threshold: int = 1 << 30) -> bool:
    """Keep large temporaries on the glibc heap instead of fresh mmaps.

    Each training step allocates and frees the same multi-megabyte buffers;
    served by mmap every time, they page-fault on first touch.  No-op (returns
    False) off glibc.
    """
    name = ctypes.util.find_library("c")
    if not name:
        return False
    try:
        libc = ctypes.CDLL(name)
        ok = libc.mallopt(_M_MMAP_THRESHOLD, threshold) and libc.mallopt(_M_TRIM_THRESHOLD, 2 * threshold)
    except (OSError, AttributeError):
        return False
    if not ok:
        log.debug("mallopt rejected allocator tuning")
    return bool(ok)
