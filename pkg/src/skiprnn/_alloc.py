"""Allocator tuning for the training loop.

Per-step temporaries are a few hundred KB each; with glibc's default mmap
threshold every one of them is a fresh mapping and page-faults on first
touch, which costs more than the arithmetic.
"""
import ctypes
import ctypes.util

_M_TRIM_THRESHOLD = -1
_M_MMAP_THRESHOLD = -3


def tune_allocator(mmap_threshold: int = 64 << 20, trim_threshold: int = 256 << 20) -> bool:
    name = ctypes.util.find_library("c")
    if not name:
        return False
    try:
        libc = ctypes.CDLL(name)
        ok = libc.mallopt(_M_MMAP_THRESHOLD, mmap_threshold)
        ok &= libc.mallopt(_M_TRIM_THRESHOLD, trim_threshold)
        return bool(ok)
    except (OSError, AttributeError):
        return False
