"""Pure numpy versions of the compiled kernels in ``_kernels.pyx``.

The float operations are ordered exactly as in the compiled loops, so both
backends return bit-identical results.
"""
import numpy as np


def nn_lasso_cd(gram, wtv, h0, lam, max_sweeps, tol):
    """Per-column nonnegative lasso by cyclic coordinate descent.

    Minimises ``0.5 h^T G h - b^T h + lam * sum(h)`` subject to ``h >= 0`` for
    every column ``b`` of ``wtv``.  Each column stops on its own once a full
    sweep moves no coordinate by more than ``tol``.
    """
    gram = np.asarray(gram, dtype=np.float64)
    h = np.array(h0, dtype=np.float64, copy=True)
    r, n = h.shape
    active = np.arange(n)
    for _ in range(max_sweeps):
        if active.size == 0:
            break
        sub = h[:, active]
        b = wtv[:, active]
        diff = np.zeros(active.size)
        for j in range(r):
            old = sub[j].copy()
            if gram[j, j] <= 0.0:
                new = np.zeros_like(old)
            else:
                c = b[j].copy()
                for i in range(r):
                    if i != j:
                        c = c - gram[j, i] * sub[i]
                new = np.maximum((c - lam) / gram[j, j], 0.0)
            sub[j] = new
            diff = np.maximum(diff, np.abs(new - old))
        h[:, active] = sub
        active = active[diff > tol]
    return h


def scatter_add_rows(g, idx, n):
    out = np.zeros((n, g.shape[1]), dtype=np.float64)
    np.add.at(out, idx, g)
    return out
