"""H&E stain separation by sparse nonnegative matrix factorisation.

Optical density ``V = log(I0 / I)`` is factorised as ``V ~ W H`` with a
nonnegative, unit-norm stain colour matrix ``W`` (3 x 2: hematoxylin, eosin)
and a nonnegative, L1-sparse concentration matrix ``H``, by minimising::

    0.5 * ||V - W H||_F^2 + lam * sum_j ||H[j, :]||_1

The H and E channel images are rendered as ``I0 * exp(-H[k, :])``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import kernels

log = logging.getLogger(__name__)

# Solver initialisation only; not ground truth.
HEMATOXYLIN_INIT = np.array([0.65, 0.70, 0.29])
EOSIN_INIT = np.array([0.07, 0.99, 0.11])


class DegenerateInputError(ValueError):
    """The image carries no absorbance to factorise."""


@dataclass
class OpticalDensity:
    V: np.ndarray  # (3, n_pixels)
    I0: float = 255.0
    shape: tuple[int, int] | None = None  # (height, width) of the source image


@dataclass
class StainModel:
    W: np.ndarray
    H: np.ndarray
    lam: float
    I0: float = 255.0
    converged: bool = False
    n_iter: int = 0
    objective: list[float] = field(default_factory=list)


@dataclass
class StainTriplet:
    rgb: np.ndarray
    h_channel: np.ndarray
    e_channel: np.ndarray

    def __post_init__(self):
        if not (self.rgb.shape == self.h_channel.shape == self.e_channel.shape):
            raise ValueError("rgb, h_channel and e_channel must share a shape")


def to_optical_density(image: np.ndarray, I0: float = 255.0) -> OpticalDensity:
    if I0 <= 0:
        raise ValueError("I0 must be positive")
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected an (H, W, 3) RGB image, got {img.shape}")
    clamped = np.clip(img, 1.0, I0)
    V = np.log(I0 / clamped).reshape(-1, 3).T
    return OpticalDensity(V=np.ascontiguousarray(V), I0=float(I0), shape=img.shape[:2])


def objective(V: np.ndarray, W: np.ndarray, H: np.ndarray, lam: float) -> float:
    R = V - W @ H
    return 0.5 * float(np.sum(R * R)) + lam * float(np.sum(np.abs(H)))


def sparse_encode(V, W: np.ndarray, lam: float = 0.1, H0: np.ndarray | None = None,
                  max_sweeps: int = 1000, tol: float = 1e-12) -> np.ndarray:
    """Solve the per-pixel nonnegative lasso for ``H`` with ``W`` held fixed.

    With ``lam = 0`` this is nonnegative least squares.
    """
    V = V.V if isinstance(V, OpticalDensity) else np.asarray(V, dtype=np.float64)
    W = np.asarray(W, dtype=np.float64)
    if np.any(W < 0):
        raise ValueError("stain matrix must be nonnegative")
    if H0 is None:
        H0 = np.zeros((W.shape[1], V.shape[1]))
    return kernels.nn_lasso_cd(W.T @ W, W.T @ V, H0, lam, max_sweeps, tol)


def _normalize_columns(W: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(W, axis=0)
    return W / np.where(norms > 0, norms, 1.0)


def _initial_W(Vf: np.ndarray, r: int, rng: np.random.Generator) -> np.ndarray:
    m = Vf.shape[0]
    if m == 3 and r == 2:
        W = np.stack([HEMATOXYLIN_INIT, EOSIN_INIT], axis=1)
        W = np.abs(W + rng.normal(0.0, 0.01, size=W.shape))
        return _normalize_columns(W)
    # generic case: seed columns from distinct, well-spread data columns
    norms = np.linalg.norm(Vf, axis=0)
    nz = np.flatnonzero(norms > 0)
    pick = rng.choice(nz, size=min(r, nz.size), replace=False)
    W = Vf[:, pick] / norms[pick]
    if W.shape[1] < r:
        W = np.concatenate([W, np.abs(rng.normal(size=(m, r - W.shape[1])))], axis=1)
    return _normalize_columns(np.maximum(W, 0.0))


def _w_step(Vf, W, H, n_steps: int = 5):
    """Projected gradient on W with backtracking; never increases the residual."""
    HHt = H @ H.T
    VHt = Vf @ H.T
    lipschitz = np.linalg.norm(HHt, 2)
    if lipschitz <= 0:
        return W

    def resid(Wc):
        R = Vf - Wc @ H
        return float(np.sum(R * R))

    cur = resid(W)
    for _ in range(n_steps):
        grad = W @ HHt - VHt
        step = 1.0 / lipschitz
        accepted = False
        for _ in range(30):
            cand = np.maximum(W - step * grad, 0.0)
            norms = np.linalg.norm(cand, axis=0)
            # a column driven to zero keeps its previous direction
            cand = np.where(norms > 0, cand / np.where(norms > 0, norms, 1.0), W)
            val = resid(cand)
            if val <= cur:
                W, cur, accepted = cand, val, True
                break
            step *= 0.5
        if not accepted:
            break
    return W


def canonical_order(W: np.ndarray) -> np.ndarray:
    """Column permutation placing hematoxylin (highest red/green OD ratio) first."""
    ratio = W[0] / np.maximum(W[1], 1e-12)
    keys = [(-ratio[j], tuple(-W[:, j])) for j in range(W.shape[1])]
    return np.array(sorted(range(W.shape[1]), key=lambda j: keys[j]))


def snmf_fit(V, r: int = 2, lam: float = 0.1, max_iters: int = 200, tol: float = 1e-6,
             seed: int = 0, od_threshold: float = 0.15, W_init: np.ndarray | None = None,
             check_monotone: bool = False) -> StainModel:
    """Alternating sparse NMF fit of the stain matrix.

    Parameters
    ----------
    V : OpticalDensity or ndarray, shape (m, n)
    r : number of stains.
    lam : L1 weight on the concentrations.
    max_iters, tol : stop after ``max_iters`` alternations or when the relative
        objective decrease falls below ``tol``.
    od_threshold : pixels whose summed OD is below this are left out of the
        fit (they are still encoded in the returned ``H``).
    check_monotone : raise if the objective ever increases.

    Returns
    -------
    StainModel with ``W`` (m x r, unit-norm nonnegative columns, canonical
    order) and ``H`` (r x n over *all* pixels).
    """
    od = V if isinstance(V, OpticalDensity) else None
    V = od.V if od is not None else np.asarray(V, dtype=np.float64)
    I0 = od.I0 if od is not None else 255.0
    if r < 1:
        raise ValueError("r must be >= 1")
    if lam < 0:
        raise ValueError("lam must be >= 0")
    if V.shape[1] < r:
        raise ValueError("need at least r pixels")
    if not np.any(V > 0):
        raise DegenerateInputError("optical density is zero everywhere (blank image)")

    keep = V.sum(axis=0) >= od_threshold
    if keep.sum() < r:
        keep = V.sum(axis=0) > 0
    Vf = np.ascontiguousarray(V[:, keep])

    rng = np.random.default_rng(seed)
    W = _normalize_columns(np.asarray(W_init, dtype=np.float64)) if W_init is not None \
        else _initial_W(Vf, r, rng)
    H = sparse_encode(Vf, W, lam)
    history = [objective(Vf, W, H, lam)]
    converged = False
    it = 0
    for it in range(1, max_iters + 1):
        W = _w_step(Vf, W, H)
        H = sparse_encode(Vf, W, lam, H0=H)
        cur = objective(Vf, W, H, lam)
        prev = history[-1]
        if check_monotone and cur > prev * (1 + 1e-12) + 1e-15:
            raise AssertionError(f"objective increased at iteration {it}: {prev} -> {cur}")
        history.append(cur)
        if prev - cur <= tol * max(abs(prev), 1e-300):
            converged = True
            break

    order = canonical_order(W)
    W = W[:, order]
    H_all = sparse_encode(V, W, lam)
    if not converged:
        log.info("snmf_fit stopped at max_iters=%d without meeting tol", max_iters)
    return StainModel(W=W, H=H_all, lam=lam, I0=I0, converged=converged,
                      n_iter=it, objective=history)


def round_half_up(x: np.ndarray) -> np.ndarray:
    return np.floor(np.asarray(x) + 0.5)


def render_concentration(h_row: np.ndarray, shape: tuple[int, int], I0: float = 255.0) -> np.ndarray:
    """Grayscale ``I0 * exp(-h)`` replicated to an 8-bit RGB image."""
    inten = np.clip(round_half_up(I0 * np.exp(-np.asarray(h_row))), 0, 255).astype(np.uint8)
    gray = inten.reshape(shape)
    return np.repeat(gray[:, :, None], 3, axis=2)


def recover_stain_channels(model, shape: tuple[int, int], I0: float | None = None):
    """Return ``(h_channel, e_channel)`` 8-bit RGB images from a 2-stain model."""
    H = model.H if isinstance(model, StainModel) else np.asarray(model)
    if I0 is None:
        I0 = model.I0 if isinstance(model, StainModel) else 255.0
    if H.shape[0] != 2:
        raise ValueError(f"stain channel recovery needs exactly 2 stains, got {H.shape[0]}")
    return render_concentration(H[0], shape, I0), render_concentration(H[1], shape, I0)


def separate(image: np.ndarray, lam: float = 0.1, I0: float = 255.0, seed: int = 0,
             W: np.ndarray | None = None, **fit_kw) -> tuple[StainTriplet, StainModel]:
    """Fit (or reuse a shared ``W``) and render the H/E triplet for one image."""
    od = to_optical_density(image, I0)
    if W is None:
        model = snmf_fit(od, r=2, lam=lam, seed=seed, **fit_kw)
    else:
        W = _normalize_columns(np.asarray(W, dtype=np.float64))
        model = StainModel(W=W, H=sparse_encode(od, W, lam), lam=lam, I0=I0, converged=True)
    h_img, e_img = recover_stain_channels(model, od.shape, I0)
    return StainTriplet(np.asarray(image, dtype=np.uint8), h_img, e_img), model


def angle_deg(a: np.ndarray, b: np.ndarray) -> float:
    c = float(np.dot(a, b) / (np.linalg.norm(a) * np.linalg.norm(b)))
    return float(np.degrees(np.arccos(np.clip(c, -1.0, 1.0))))
