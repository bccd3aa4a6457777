"""Process-level allocator tuning for the hot numpy loops.

Training and estimation churn through ~0.5 MB temporaries; glibc hands
allocations above its mmap threshold straight back to the kernel on free,
so every batch pays fresh page faults. Raising the threshold keeps those
buffers on the heap and speeds the dense-stack loops up several-fold.
No-op on non-glibc platforms; set DIFFDENS_NO_MALLOC_TUNING=1 to skip.
"""

import ctypes
import os

_M_MMAP_THRESHOLD = -3
_M_TRIM_THRESHOLD = -1


def apply() -> None:
    if os.environ.get("DIFFDENS_NO_MALLOC_TUNING"):
        return
    try:
        libc = ctypes.CDLL("libc.so.6", use_errno=True)
        libc.mallopt(_M_MMAP_THRESHOLD, 1 << 30)
        libc.mallopt(_M_TRIM_THRESHOLD, 1 << 30)
    except (OSError, AttributeError):
        pass
