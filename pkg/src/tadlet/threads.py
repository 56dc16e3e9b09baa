"""BLAS thread pinning for deterministic runs.

Pools read these variables once, when numpy is first imported, so pinning runs
from the package `__init__` ahead of any numpy import.
"""

from __future__ import annotations

import os
import sys

from typing import MutableMapping, Sequence


THREAD_ENV = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")
DETERMINISTIC_ENV = "TAD_DETERMINISTIC"
DETERMINISTIC_FLAG = "--deterministic"

pinned_at_import = False


def wants_single_thread(argv: Sequence[str], environ: MutableMapping[str, str]) -> bool:
    return DETERMINISTIC_FLAG in argv or environ.get(DETERMINISTIC_ENV, "").strip() not in ("", "0")


def pin_threads(argv: Sequence[str], environ: MutableMapping[str, str]) -> bool:
    """Set every BLAS thread variable the user left unset to 1; True if pinning applies."""
    if not wants_single_thread(argv, environ):
        return False
    for name in THREAD_ENV:
        environ.setdefault(name, "1")
    return True


def pin_process_threads() -> bool:
    global pinned_at_import
    pinned_at_import = pin_threads(sys.argv, os.environ)
    return pinned_at_import
