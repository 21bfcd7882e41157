"""Kernel backend selection.

The compiled extension is used when it imports; set ``MMAE_PURE_PYTHON=1``
to force the numpy fallback.  ``BACKEND`` names the active one.
"""
import os

import numpy as np

from . import _fallback

_compiled = None
if os.environ.get("MMAE_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _compiled
    except ImportError:  # extension not built
        _compiled = None

BACKEND = "cython" if _compiled is not None else "python"


def nn_lasso_cd(gram, wtv, h0, lam, max_sweeps=100, tol=1e-10, backend=None):
    impl = _pick(backend)
    return impl.nn_lasso_cd(np.ascontiguousarray(gram, dtype=np.float64),
                            np.ascontiguousarray(wtv, dtype=np.float64),
                            np.ascontiguousarray(h0, dtype=np.float64),
                            float(lam), int(max_sweeps), float(tol))


def scatter_add_rows(g, idx, n, backend=None):
    """``out[idx[i]] += g[i]`` into a zero ``[n, d]`` array."""
    impl = _pick(backend)
    return impl.scatter_add_rows(np.ascontiguousarray(g, dtype=np.float64),
                                 np.ascontiguousarray(idx, dtype=np.intp), int(n))


def _pick(backend):
    if backend is None:
        return _compiled if _compiled is not None else _fallback
    if backend == "python":
        return _fallback
    if backend == "cython":
        if _compiled is None:
            raise RuntimeError("compiled kernels are not available")
        return _compiled
    raise ValueError(f"unknown backend {backend!r}")
