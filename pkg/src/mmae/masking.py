"""Patch grids and token masking for single- and multi-modal MAE.

All randomness comes from :func:`make_rng`, a Philox4x64 counter-based
generator keyed by ``(seed, *counters)``.  The same key always yields the same
stream, independent of whatever was drawn before, which is what makes mask
plans and training runs reproducible and resumable.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

MODALITIES = ("rgb", "h", "e")


class CapacityError(ValueError):
    """Requested more visible tokens than patch positions."""


def make_rng(seed: int, *counters: int) -> np.random.Generator:
    """Counter-based generator (Philox) for ``seed`` and a tuple of counters."""
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, *[int(c) for c in counters]])
    return np.random.Generator(np.random.Philox(ss))


def _as_rng(rng) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    return make_rng(int(rng))


@dataclass(frozen=True)
class PatchGrid:
    image_size: int
    patch_size: int

    def __post_init__(self):
        if self.patch_size <= 0 or self.image_size % self.patch_size:
            raise ValueError(f"image size {self.image_size} is not divisible by patch size {self.patch_size}")

    @property
    def stride(self) -> int:
        return self.patch_size

    @property
    def grid_side(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_positions(self) -> int:
        return self.grid_side ** 2

    def token_dim(self, channels: int = 3) -> int:
        return self.patch_size ** 2 * channels


@dataclass
class MaskPlan:
    visible: dict[str, list[int]]
    num_positions: int
    seed: int | None = None
    budget: int = field(init=False)

    def __post_init__(self):
        self.visible = {k: sorted(int(i) for i in v) for k, v in self.visible.items()}
        self.budget = sum(len(v) for v in self.visible.values())

    @property
    def modalities(self) -> tuple[str, ...]:
        return tuple(self.visible)

    def counts(self) -> tuple[int, ...]:
        return tuple(len(v) for v in self.visible.values())

    def masked(self, modality: str = "rgb") -> list[int]:
        vis = set(self.visible[modality])
        return [i for i in range(self.num_positions) if i not in vis]

    def to_text(self) -> str:
        lines = [f"# M={self.num_positions} budget={self.budget} seed={self.seed}"]
        for mod, idx in self.visible.items():
            lines.append(f"{mod}: " + " ".join(str(i) for i in idx))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "MaskPlan":
        header, *rows = [ln for ln in text.strip().splitlines() if ln.strip()]
        meta = dict(part.split("=") for part in header.lstrip("# ").split())
        visible = {}
        for row in rows:
            mod, _, rest = row.partition(":")
            visible[mod.strip()] = [int(t) for t in rest.split()]
        seed = None if meta["seed"] == "None" else int(meta["seed"])
        return cls(visible, int(meta["M"]), seed)


def patchify(image: np.ndarray, grid: PatchGrid) -> np.ndarray:
    """``(C, H, W)`` or ``(B, C, H, W)`` -> ``(M, P*P*C)`` or ``(B, M, P*P*C)``.

    Tokens follow row-major grid order; inside a token pixels run row, column,
    channel.
    """
    x = np.asarray(image)
    batched = x.ndim == 4
    if not batched:
        x = x[None]
    b, c, h, w = x.shape
    if h != grid.image_size or w != grid.image_size:
        raise ValueError(f"image is {h}x{w}, grid expects {grid.image_size}x{grid.image_size}")
    p, g = grid.patch_size, grid.grid_side
    t = x.reshape(b, c, g, p, g, p).transpose(0, 2, 4, 3, 5, 1).reshape(b, g * g, p * p * c)
    return t if batched else t[0]


def unpatchify(tokens: np.ndarray, grid: PatchGrid, channels: int = 3) -> np.ndarray:
    t = np.asarray(tokens)
    batched = t.ndim == 3
    if not batched:
        t = t[None]
    b = t.shape[0]
    p, g = grid.patch_size, grid.grid_side
    x = t.reshape(b, g, g, p, p, channels).transpose(0, 5, 1, 3, 2, 4)
    x = x.reshape(b, channels, g * p, g * p)
    return x if batched else x[0]


def visible_count(num_positions: int, mask_ratio: float) -> int:
    return int(math.floor((1.0 - mask_ratio) * num_positions + 0.5))


def mae_mask_plan(grid: PatchGrid, mask_ratio: float, seed) -> MaskPlan:
    """Uniform random masking with a fixed visible count ``round((1-ratio) M)``."""
    if not 0.0 < mask_ratio < 1.0:
        raise ValueError("mask_ratio must lie in (0, 1)")
    M = grid.num_positions
    n_vis = visible_count(M, mask_ratio)
    if n_vis <= 0 or n_vis >= M:
        raise ValueError(f"mask ratio {mask_ratio} leaves {n_vis} of {M} patches visible")
    rng = _as_rng(seed)
    pos = rng.permutation(M)[:n_vis]
    return MaskPlan({"rgb": pos.tolist()}, M, seed if isinstance(seed, int) else None)


def largest_remainder(fractions: Sequence[float], total: int) -> tuple[int, ...]:
    raw = np.asarray(fractions, dtype=np.float64) * total
    base = np.floor(raw).astype(np.int64)
    short = int(total - base.sum())
    if short > 0:
        rem = raw - base
        # stable sort: equal remainders go to the earlier modality
        order = np.argsort(-rem, kind="stable")
        base[order[:short]] += 1
    return tuple(int(c) for c in base)


def dirichlet_counts(alphas: Sequence[float], budget: int, rng,
                     num_positions: int | None = None) -> tuple[int, ...]:
    alphas = np.asarray(alphas, dtype=np.float64)
    if np.any(alphas <= 0):
        raise ValueError("Dirichlet concentrations must be positive")
    if num_positions is not None and budget > num_positions:
        raise CapacityError(f"budget {budget} exceeds {num_positions} patch positions")
    if budget < 0:
        raise ValueError("budget must be nonnegative")
    p = _as_rng(rng).dirichlet(alphas)
    return largest_remainder(p, budget)


def mask_one_plan(grid: PatchGrid, counts: Sequence[int], rng,
                  modalities: Sequence[str] = MODALITIES) -> MaskPlan:
    """Each patch position is visible in at most one modality."""
    M = grid.num_positions
    if sum(counts) > M:
        raise CapacityError(f"counts {tuple(counts)} exceed {M} positions")
    perm = _as_rng(rng).permutation(M)
    bounds = np.cumsum([0, *counts])
    visible = {mod: perm[bounds[i]:bounds[i + 1]].tolist() for i, mod in enumerate(modalities)}
    return MaskPlan(visible, M, rng if isinstance(rng, int) else None)


def mask_all_plan(grid: PatchGrid, counts: Sequence[int], rng,
                  modalities: Sequence[str] = MODALITIES) -> MaskPlan:
    """Each modality samples its positions independently (overlaps allowed)."""
    M = grid.num_positions
    if any(c > M for c in counts):
        raise CapacityError(f"a count in {tuple(counts)} exceeds {M} positions")
    g = _as_rng(rng)
    visible = {mod: g.choice(M, size=c, replace=False).tolist() for mod, c in zip(modalities, counts)}
    return MaskPlan(visible, M, rng if isinstance(rng, int) else None)


def mmae_mask_plan(grid: PatchGrid, budget: int, alphas: Sequence[float], rng,
                   strategy: str = "mask_one") -> MaskPlan:
    g = _as_rng(rng)
    counts = dirichlet_counts(alphas, budget, g, grid.num_positions if strategy == "mask_one" else None)
    if strategy == "mask_one":
        return mask_one_plan(grid, counts, g)
    if strategy == "mask_all":
        return mask_all_plan(grid, counts, g)
    raise ValueError(f"unknown sampling strategy {strategy!r}")


def duplicate_positions(plan: MaskPlan) -> int:
    """Number of positions that appear in more than one modality."""
    seen = np.zeros(plan.num_positions, dtype=np.int64)
    for idx in plan.visible.values():
        seen[idx] += 1
    return int(np.sum(seen > 1))


def plan_statistics(alphas: Sequence[float], budget: int, grid_side: int, trials: int,
                    seed: int, strategy: str = "mask_one") -> dict:
    """Monte-Carlo summary over many MMAE plans (used by the ``maskplan`` command)."""
    grid = PatchGrid(grid_side, 1)
    rng = make_rng(seed)
    counts = np.zeros((trials, len(alphas)), dtype=np.int64)
    dup_total = 0
    bad_sums = 0
    for t in range(trials):
        plan = mmae_mask_plan(grid, budget, alphas, rng, strategy)
        c = plan.counts()
        counts[t] = c
        bad_sums += int(sum(c) != budget)
        dup_total += duplicate_positions(plan)
    frac = counts.mean(axis=0) / budget if budget else np.zeros(len(alphas))
    return {
        "trials": trials,
        "budget": budget,
        "num_positions": grid.num_positions,
        "alphas": list(map(float, alphas)),
        "strategy": strategy,
        "duplicate_positions": dup_total,
        "count_sum_violations": bad_sums,
        "mean_fraction": [float(f) for f in frac],
        "mean_counts": [float(c) for c in counts.mean(axis=0)],
    }
