"""Process-level tuning for long training runs."""

import ctypes
import ctypes.util
import logging

log = logging.getLogger(__name__)

# glibc mallopt parameter ids
_M_TRIM_THRESHOLD = -1
_M_TOP_PAD = -2
_M_MMAP_THRESHOLD = -3


def tune_allocator() -> bool:
    """Keep freed activation buffers on the heap instead of returning them to the OS.

    Every training step allocates and frees the same few megabyte-sized
    arrays; with glibc defaults each one is a fresh mmap and pays page faults
    on first touch.  Returns False (and changes nothing) off glibc.
    """
    name = ctypes.util.find_library("c")
    if not name:
        return False
    try:
        libc = ctypes.CDLL(name)
        ok = libc.mallopt(_M_MMAP_THRESHOLD, 32 << 20)
        ok &= libc.mallopt(_M_TRIM_THRESHOLD, 256 << 20)
        ok &= libc.mallopt(_M_TOP_PAD, 64 << 20)
    except (OSError, AttributeError):
        return False
    log.debug("allocator tuned: %s", bool(ok))
    return bool(ok)
