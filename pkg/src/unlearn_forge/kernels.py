"""Kernel dispatch: compiled Cython core when built, pure Python otherwise.

Set ``UNLEARN_FORGE_PURE_PYTHON=1`` to force the fallback.
"""
import os

import numpy as np

from . import _pykernels

BACKEND = "python"
_impl = _pykernels

if not os.environ.get("UNLEARN_FORGE_PURE_PYTHON"):
    try:
        from . import _ckernels as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:
        _impl = _pykernels


def _as_tokens(seq):
    return np.ascontiguousarray(np.asarray(seq, dtype=np.int64).reshape(-1))


def lcs_length(a, b) -> int:
    """Length of the longest common subsequence of two token sequences."""
    if BACKEND == "cython":
        return _impl.lcs_length(_as_tokens(a), _as_tokens(b))
    return _impl.lcs_length(list(a), list(b))


def ks_statistic(a, b) -> float:
    """Two-sample KS statistic ``sup |F_a - F_b|`` (inputs in any order)."""
    a = np.sort(np.asarray(a, dtype=np.float64).reshape(-1))
    b = np.sort(np.asarray(b, dtype=np.float64).reshape(-1))
    if BACKEND == "cython":
        return float(_impl.ks_statistic(a, b))
    return float(_impl.ks_statistic(a.tolist(), b.tolist()))
