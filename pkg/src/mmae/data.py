"""Synthetic H&E-like tiles with known stains, dataset splits and PNG IO."""
from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .masking import make_rng
from .stain import StainTriplet, render_concentration, round_half_up, separate


class StratificationError(ValueError):
    pass


@dataclass
class ClassParams:
    name: str
    nucleus_density: float  # expected nuclei per 1024 px^2
    radius: tuple[float, float]
    hematoxylin: tuple[float, float]  # nucleus concentration range
    eosin: tuple[float, float]  # background wash concentration range
    texture: float = 0.15  # relative amplitude of the low-frequency wash pattern


def default_classes() -> list[ClassParams]:
    return [
        ClassParams("dense_small", 40.0, (1.0, 1.8), (1.0, 1.6), (0.15, 0.30)),
        ClassParams("sparse_large", 1.5, (3.5, 5.5), (0.5, 0.9), (0.40, 0.60)),
        ClassParams("stroma", 1.0, (1.5, 2.5), (0.5, 0.9), (0.90, 1.30), texture=0.35),
        ClassParams("mucus", 0.6, (1.5, 2.5), (0.2, 0.5), (0.06, 0.16), texture=0.1),
    ]


def default_stain_matrix() -> np.ndarray:
    W = np.array([[0.60, 0.12], [0.75, 0.95], [0.28, 0.28]])
    return W / np.linalg.norm(W, axis=0)


@dataclass
class SynthSpec:
    num_classes: int = 4
    image_size: int = 32
    count: int = 400
    classes: list[ClassParams] = field(default_factory=default_classes)
    W: np.ndarray = field(default_factory=default_stain_matrix)
    noise: float = 2.0
    seed: int = 0
    I0: float = 255.0

    def __post_init__(self):
        self.W = np.asarray(self.W, dtype=np.float64)
        if self.W.shape != (3, 2) or np.any(self.W < 0):
            raise ValueError("W must be a nonnegative 3x2 matrix")
        if not np.allclose(np.linalg.norm(self.W, axis=0), 1.0):
            raise ValueError("W columns must have unit norm")
        if self.num_classes > len(self.classes):
            raise ValueError(f"only {len(self.classes)} class definitions for {self.num_classes} classes")
        self.classes = list(self.classes[: self.num_classes])
        if any(c.nucleus_density < 0 for c in self.classes):
            raise ValueError("nucleus densities must be nonnegative")


@dataclass
class Dataset:
    items: list[tuple[StainTriplet, int]]
    class_names: list[str]
    split: str = "all"
    concentrations: list[np.ndarray] | None = None  # ground truth (2, n) per item, synthetic only

    def __len__(self) -> int:
        return len(self.items)

    @property
    def labels(self) -> np.ndarray:
        return np.array([lab for _, lab in self.items], dtype=np.int64)

    def stack(self, modality: str = "rgb") -> np.ndarray:
        attr = {"rgb": "rgb", "h": "h_channel", "e": "e_channel"}[modality]
        return np.stack([getattr(t, attr) for t, _ in self.items])

    def subset(self, indices, split: str | None = None) -> "Dataset":
        idx = list(indices)
        conc = None if self.concentrations is None else [self.concentrations[i] for i in idx]
        return Dataset([self.items[i] for i in idx], self.class_names, split or self.split, conc)


def synth_concentrations(cp: ClassParams, size: int, rng: np.random.Generator) -> np.ndarray:
    """Ground-truth concentration maps ``(2, size, size)`` for one tile."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    eosin = rng.uniform(*cp.eosin)
    if cp.texture > 0:
        kx, ky = rng.uniform(0.5, 2.0, 2) * 2 * np.pi / size
        phase = rng.uniform(0, 2 * np.pi, 2)
        wave = 0.5 * (np.sin(kx * xx + phase[0]) + np.sin(ky * yy + phase[1]))
        wash = eosin * (1.0 + cp.texture * wave)
    else:
        wash = np.full((size, size), eosin)
    hema = np.zeros((size, size))
    n_nuc = rng.poisson(cp.nucleus_density * size * size / 1024.0)
    for _ in range(n_nuc):
        cy, cx = rng.uniform(0, size, 2)
        rad = rng.uniform(*cp.radius)
        conc = rng.uniform(*cp.hematoxylin)
        inside = (yy - cy) ** 2 + (xx - cx) ** 2 <= rad ** 2
        hema = np.where(inside, np.maximum(hema, conc), hema)
    eos = np.where(hema > 0, 0.0, np.maximum(wash, 0.0))
    return np.stack([hema, eos])


def render_rgb(W: np.ndarray, conc: np.ndarray, I0: float, noise: float,
               rng: np.random.Generator) -> np.ndarray:
    size = conc.shape[1]
    od = (W @ conc.reshape(2, -1)).T.reshape(size, size, 3)
    inten = I0 * np.exp(-od)
    if noise > 0:
        inten = inten + rng.normal(0.0, noise, size=inten.shape)
    return np.clip(round_half_up(inten), 0, 255).astype(np.uint8)


def synth_generate(spec: SynthSpec) -> Dataset:
    """Balanced, deterministic synthetic dataset (item ``i`` has label ``i % C``)."""
    items, concs = [], []
    size = spec.image_size
    for i in range(spec.count):
        label = i % spec.num_classes
        rng = make_rng(spec.seed, 7, i)
        conc = synth_concentrations(spec.classes[label], size, rng)
        rgb = render_rgb(spec.W, conc, spec.I0, spec.noise, rng)
        flat = conc.reshape(2, -1)
        h_img = render_concentration(flat[0], (size, size), spec.I0)
        e_img = render_concentration(flat[1], (size, size), spec.I0)
        items.append((StainTriplet(rgb, h_img, e_img), label))
        concs.append(flat)
    return Dataset(items, [c.name for c in spec.classes], "all", concs)


def split(dataset: Dataset, train_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Stratified, disjoint, seed-deterministic train/test split."""
    if not 0.0 < train_fraction < 1.0:
        raise ValueError("train_fraction must lie in (0, 1)")
    labels = dataset.labels
    train_idx, test_idx = [], []
    for c in np.unique(labels):
        members = np.flatnonzero(labels == c)
        if members.size < 2:
            raise StratificationError(f"class {c} has fewer than 2 items")
        perm = make_rng(seed, 11, int(c)).permutation(members)
        n_train = int(np.floor(train_fraction * members.size + 0.5))
        n_train = min(max(n_train, 1), members.size - 1)
        train_idx += perm[:n_train].tolist()
        test_idx += perm[n_train:].tolist()
    return dataset.subset(sorted(train_idx), "train"), dataset.subset(sorted(test_idx), "test")


def stratified_sample(labels: np.ndarray, n: int, seed: int) -> np.ndarray:
    """``n`` indices spread as evenly as possible over the classes."""
    labels = np.asarray(labels)
    classes = np.unique(labels)
    pools = {c: make_rng(seed, 13, int(c)).permutation(np.flatnonzero(labels == c)).tolist() for c in classes}
    out = []
    while len(out) < n and any(pools.values()):
        for c in classes:
            if pools[c] and len(out) < n:
                out.append(pools[c].pop(0))
    return np.array(sorted(out), dtype=np.int64)


# -- PNG IO ------------------------------------------------------------------------
def save_png(path, image: np.ndarray) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.asarray(image, dtype=np.uint8)).save(path, format="PNG")


def load_png(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8)


def stain_paths(path: Path) -> tuple[Path, Path]:
    path = Path(path)
    return path.with_name(path.stem + "_H.png"), path.with_name(path.stem + "_E.png")


def write_dataset(datasets: list[Dataset], root) -> Path:
    """Write ``<root>/<class>/<id>.png`` (+ ``_H``/``_E``) and ``manifest.csv``."""
    root = Path(root)
    rows = []
    n = 0
    for ds in datasets:
        for trip, label in ds.items:
            rel = Path(ds.class_names[label]) / f"{n:06d}.png"
            hp, ep = stain_paths(root / rel)
            save_png(root / rel, trip.rgb)
            save_png(hp, trip.h_channel)
            save_png(ep, trip.e_channel)
            rows.append((rel.as_posix(), label, ds.split))
            n += 1
    manifest = root / "manifest.csv"
    with open(manifest, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["path", "label", "split"])
        w.writerows(rows)
    names = datasets[0].class_names if datasets else []
    (root / "classes.txt").write_text("\n".join(names) + "\n")
    return manifest


def read_manifest(root) -> list[tuple[str, int, str]]:
    with open(Path(root) / "manifest.csv", newline="") as fh:
        return [(r["path"], int(r["label"]), r["split"]) for r in csv.DictReader(fh)]


def load_dataset(root, split_tag: str | None = None, lam: float = 0.1) -> Dataset:
    """Load a manifest directory.  Missing ``_H``/``_E`` siblings are computed on the fly."""
    root = Path(root)
    rows = read_manifest(root)
    names_file = root / "classes.txt"
    if names_file.exists():
        names = [ln for ln in names_file.read_text().splitlines() if ln]
    else:
        names = [str(i) for i in range(max(r[1] for r in rows) + 1)]
    items = []
    for rel, label, tag in rows:
        if split_tag is not None and tag != split_tag:
            continue
        rgb = load_png(root / rel)
        hp, ep = stain_paths(root / rel)
        if hp.exists() and ep.exists():
            trip = StainTriplet(rgb, load_png(hp), load_png(ep))
        else:
            trip, _ = separate(rgb, lam=lam)
        items.append((trip, label))
    return Dataset(items, names, split_tag or "all")


def atomic_write_bytes(path, payload: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(payload)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)
