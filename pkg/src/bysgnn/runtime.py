"""Process-level runtime switches: allocator tuning and thread pinning."""

from __future__ import annotations

import ctypes
import os

_M_TRIM_THRESHOLD = -1
_M_MMAP_THRESHOLD = -3

_tuned = [False]


def enable_fast_allocator() -> bool:
    """Keep large numpy temporaries in the heap arena instead of mmap.

    glibc returns mmap'd blocks to the OS on free, so workloads that churn
    multi-megabyte temporaries pay page faults on every reallocation.
    Raising the thresholds roughly halves elementwise-op cost on this
    workload.  No-op on non-glibc platforms.
    """
    if _tuned[0]:
        return True
    try:
        libc = ctypes.CDLL("libc.so.6", use_errno=True)
        ok = bool(libc.mallopt(_M_MMAP_THRESHOLD, 1 << 30)) \
            and bool(libc.mallopt(_M_TRIM_THRESHOLD, 1 << 30))
    except OSError:
        return False
    _tuned[0] = ok
    return ok


THREAD_ENV_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                   "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS")


def set_thread_env(threads: int) -> None:
    """Pin BLAS/OpenMP pools; effective only before numpy is first imported."""
    for var in THREAD_ENV_VARS:
        os.environ[var] = str(threads)
