"""Optimiser, schedule, augmentation, pretraining, fine-tuning and kNN evaluation."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import tensor as T
from .data import Dataset, stratified_sample
from .masking import MODALITIES, make_rng, mae_mask_plan, mmae_mask_plan, visible_count
from .model import (DecoderConfig, EncoderConfig, ModelParams, add_head, decoder_forward,
                    embed, encoder_forward, encoder_indices, finetune_forward, image_to_tokens,
                    init_params, reconstruction_loss, rgb_slots)
from .stain import StainTriplet, round_half_up
from .tensor import NumericalFault, Tensor

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    mode: str = "pretrain"
    base_lr: float = 1e-4
    weight_decay: float = 0.05
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    epochs: int = 1600
    warmup_epochs: int = 40
    warmup_start_lr: float = 1e-6
    batch_size: int = 312
    seed: int = 0
    mask_ratio: float = 0.75  # MAE; MMAE uses budget, or (1 - ratio) * M without one
    budget: int | None = None
    alphas: tuple[float, float, float] = (8.0, 1.0, 1.0)
    sampling: str = "mask_one"
    norm_pix: bool = True
    crop_scale: tuple[float, float] = (0.8, 1.0)
    crop_ratio: tuple[float, float] = (3 / 4, 4 / 3)
    flip_prob: float = 0.5
    grad_clip: float = 5.0
    folds: int = 5
    freeze_encoder: bool = False

    def __post_init__(self):
        self.betas = tuple(self.betas)
        self.alphas = tuple(float(a) for a in self.alphas)
        self.crop_scale = tuple(self.crop_scale)
        self.crop_ratio = tuple(self.crop_ratio)
        if self.mode not in ("pretrain", "finetune"):
            raise ConfigError(f"mode must be pretrain or finetune, got {self.mode!r}")
        if self.epochs < 1 or not 0 <= self.warmup_epochs < self.epochs:
            raise ConfigError("need epochs >= 1 and 0 <= warmup_epochs < epochs")
        if self.base_lr <= 0 or self.warmup_start_lr <= 0:
            raise ConfigError("learning rates must be positive")
        if self.weight_decay < 0:
            raise ConfigError("weight decay must be nonnegative")
        if not all(0 <= b < 1 for b in self.betas):
            raise ConfigError("betas must lie in [0, 1)")
        lo, hi = self.crop_scale
        if not 0 < lo <= hi <= 1:
            raise ConfigError("crop scale range must sit inside (0, 1]")
        if not 0 <= self.flip_prob <= 1:
            raise ConfigError("flip probability must lie in [0, 1]")
        if any(a <= 0 for a in self.alphas):
            raise ConfigError("alphas must be positive")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.folds < 2:
            raise ConfigError("need at least 2 folds")


def full_pretrain_config(**kw) -> TrainConfig:
    return TrainConfig(**{"mode": "pretrain", **kw})


def full_finetune_config(**kw) -> TrainConfig:
    base = dict(mode="finetune", base_lr=3e-3, weight_decay=6e-5, batch_size=96, epochs=100,
                warmup_epochs=5)
    return TrainConfig(**{**base, **kw})


# -- optimiser -----------------------------------------------------------------
@dataclass
class AdamWState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adamw_step(params: ModelParams, grads: dict[str, np.ndarray] | None, state: AdamWState,
               lr: float, weight_decay: float, betas=(0.9, 0.999), eps: float = 1e-8,
               names: list[str] | None = None) -> None:
    """Decoupled weight decay followed by a bias-corrected Adam update, in place."""
    if lr <= 0:
        raise ValueError("lr must be positive")
    b1, b2 = betas
    state.step += 1
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name in names if names is not None else list(params):
        p = params[name]
        g = (grads or {}).get(name) if grads is not None else p.grad
        if g is None:
            continue
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {name} {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        p.data -= lr * weight_decay * p.data
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


def clip_grad_norm(params: ModelParams, max_norm: float) -> float:
    grads = [t.grad for t in params.values() if t.grad is not None]
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-6)
        for g in grads:
            g *= scale
    return total


def lr_at(step: int, total_steps: int, cfg: TrainConfig) -> float:
    """Linear warmup from ``warmup_start_lr`` to ``base_lr``, then half-cosine to 0."""
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    warm = warmup_steps(total_steps, cfg)
    if step < warm:
        return cfg.warmup_start_lr + (cfg.base_lr - cfg.warmup_start_lr) * step / warm
    span = total_steps - warm
    if span <= 0:
        return cfg.base_lr
    return cfg.base_lr * 0.5 * (1.0 + math.cos(math.pi * (step - warm) / span))


def warmup_steps(total_steps: int, cfg: TrainConfig) -> int:
    return int(round(total_steps * cfg.warmup_epochs / cfg.epochs))


# -- augmentation ----------------------------------------------------------------
@dataclass(frozen=True)
class CropTrace:
    top: int
    left: int
    height: int
    width: int
    flip: bool


def sample_crop(height: int, width: int, cfg: TrainConfig, rng: np.random.Generator) -> CropTrace:
    """Random resized crop box (area scale and aspect ratio drawn from ``cfg``) plus a flip bit."""
    area = height * width
    lo, hi = cfg.crop_scale
    log_r = (math.log(cfg.crop_ratio[0]), math.log(cfg.crop_ratio[1]))
    box = None
    for _ in range(10):
        target = area * rng.uniform(lo, hi)
        ratio = math.exp(rng.uniform(*log_r))
        w = int(round(math.sqrt(target * ratio)))
        h = int(round(math.sqrt(target / ratio)))
        if 0 < w <= width and 0 < h <= height:
            top = int(rng.integers(0, height - h + 1))
            left = int(rng.integers(0, width - w + 1))
            box = (top, left, h, w)
            break
    if box is None:  # whole image, clipped to the ratio range
        in_ratio = width / height
        if in_ratio < cfg.crop_ratio[0]:
            w, h = width, int(round(width / cfg.crop_ratio[0]))
        elif in_ratio > cfg.crop_ratio[1]:
            h, w = height, int(round(height * cfg.crop_ratio[1]))
        else:
            w, h = width, height
        box = ((height - h) // 2, (width - w) // 2, h, w)
    flip = bool(rng.random() < cfg.flip_prob)
    return CropTrace(*box, flip)


def resized_crop(image: np.ndarray, trace: CropTrace, size: int, mode: str = "bilinear") -> np.ndarray:
    """Crop ``trace``'s box, resize to ``size`` x ``size`` (pixel-centre aligned), maybe flip."""
    img = np.asarray(image)
    crop = img[trace.top:trace.top + trace.height, trace.left:trace.left + trace.width].astype(np.float64)
    h, w = crop.shape[:2]
    ys = (np.arange(size) + 0.5) * (h / size) - 0.5
    xs = (np.arange(size) + 0.5) * (w / size) - 0.5
    if mode == "nearest":
        yi = np.clip(np.floor(ys + 0.5).astype(int), 0, h - 1)
        xi = np.clip(np.floor(xs + 0.5).astype(int), 0, w - 1)
        out = crop[yi][:, xi]
    else:
        ys = np.clip(ys, 0, h - 1)
        xs = np.clip(xs, 0, w - 1)
        y0 = np.floor(ys).astype(int)
        x0 = np.floor(xs).astype(int)
        y1 = np.minimum(y0 + 1, h - 1)
        x1 = np.minimum(x0 + 1, w - 1)
        wy = (ys - y0)[:, None, None]
        wx = (xs - x0)[None, :, None]
        top = crop[y0][:, x0] * (1 - wx) + crop[y0][:, x1] * wx
        bot = crop[y1][:, x0] * (1 - wx) + crop[y1][:, x1] * wx
        out = top * (1 - wy) + bot * wy
    if trace.flip:
        out = out[:, ::-1]
    if img.dtype == np.uint8:
        return np.clip(round_half_up(out), 0, 255).astype(np.uint8)
    return np.ascontiguousarray(out)


def augment(triplet: StainTriplet, cfg: TrainConfig, rng: np.random.Generator, size: int | None = None,
            mode: str = "bilinear", return_trace: bool = False):
    """One crop box and flip bit, applied identically to RGB, H and E."""
    h, w = triplet.rgb.shape[:2]
    size = size or h
    trace = sample_crop(h, w, cfg, rng)
    out = StainTriplet(*(resized_crop(im, trace, size, mode)
                         for im in (triplet.rgb, triplet.h_channel, triplet.e_channel)))
    return (out, trace) if return_trace else out


# -- pretraining ------------------------------------------------------------------
@dataclass
class PretrainResult:
    params: ModelParams
    state: AdamWState
    epoch_losses: list[float]
    step_losses: list[float]
    epochs_done: int


def steps_per_epoch(n: int, batch_size: int) -> int:
    return max(1, math.ceil(n / batch_size))


def _plans_for(batch_ids, step: int, enc: EncoderConfig, cfg: TrainConfig):
    grid = enc.grid
    plans = []
    for j in range(len(batch_ids)):
        rng = make_rng(cfg.seed, 3, step, j)
        if enc.modalities == 1:
            plans.append(mae_mask_plan(grid, cfg.mask_ratio, rng))
        else:
            budget = cfg.budget if cfg.budget is not None else visible_count(grid.num_positions, cfg.mask_ratio)
            plans.append(mmae_mask_plan(grid, budget, cfg.alphas, rng, cfg.sampling))
    return plans


def pretrain_loss(params: ModelParams, enc: EncoderConfig, dec: DecoderConfig, tokens: dict,
                  plans, norm_pix: bool) -> Tensor:
    mods = enc.modality_names
    idx = encoder_indices(plans, mods)
    z = encoder_forward(params, enc, tokens, idx, mods)
    slots = rgb_slots(plans, enc.num_global_tokens)
    pred = decoder_forward(params, enc, dec, z, slots)
    return reconstruction_loss(pred, tokens["rgb"], norm_pix, weights=(slots < 0))


def pretrain(dataset: Dataset, enc: EncoderConfig, dec: DecoderConfig, cfg: TrainConfig,
             params: ModelParams | None = None, state: AdamWState | None = None,
             start_epoch: int = 0, epoch_losses: list[float] | None = None,
             stop_epoch: int | None = None,
             on_epoch: Callable[[int, ModelParams, AdamWState, list[float]], None] | None = None
             ) -> PretrainResult:
    """Masked-reconstruction pretraining (MAE for 1 modality, MMAE for 3).

    All randomness is keyed on ``(cfg.seed, step, item)``, so resuming from a
    checkpoint taken at an epoch boundary reproduces the uninterrupted run.
    """
    if enc.modalities == 3 and not dec.has_cross_attention:
        raise ConfigError("MMAE pretraining needs a cross-attention decoder")
    params = params if params is not None else init_params(enc, dec, seed=cfg.seed)
    state = state if state is not None else AdamWState()
    epoch_losses = list(epoch_losses or [])
    n = len(dataset)
    spe = steps_per_epoch(n, cfg.batch_size)
    total = cfg.epochs * spe
    size = enc.image_size
    step_losses: list[float] = []
    last_good = {k: v.data.copy() for k, v in params.items()}
    end = cfg.epochs if stop_epoch is None else min(stop_epoch, cfg.epochs)
    for epoch in range(start_epoch, end):
        order = make_rng(cfg.seed, 1, epoch).permutation(n)
        losses = []
        for b in range(spe):
            step = epoch * spe + b
            ids = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            trips = [augment(dataset.items[i][0], cfg, make_rng(cfg.seed, 2, step, j), size)
                     for j, i in enumerate(ids)]
            tokens = {"rgb": image_to_tokens(np.stack([t.rgb for t in trips]), enc.grid)}
            if enc.modalities == 3:
                tokens["h"] = image_to_tokens(np.stack([t.h_channel for t in trips]), enc.grid)
                tokens["e"] = image_to_tokens(np.stack([t.e_channel for t in trips]), enc.grid)
            plans = _plans_for(ids, step, enc, cfg)
            params.zero_grad()
            try:
                loss = pretrain_loss(params, enc, dec, tokens, plans, cfg.norm_pix)
            except NumericalFault as exc:
                raise TrainingFault(str(exc), last_good, epoch, step) from exc
            if not math.isfinite(loss.item()):
                raise TrainingFault("loss is not finite", last_good, epoch, step)
            loss.backward()
            clip_grad_norm(params, cfg.grad_clip)
            adamw_step(params, None, state, lr_at(step, total, cfg), cfg.weight_decay,
                       cfg.betas, cfg.adam_eps)
            losses.append(loss.item())
            step_losses.append(loss.item())
        epoch_losses.append(float(np.mean(losses)))
        last_good = {k: v.data.copy() for k, v in params.items()}
        log.info("epoch %d loss %.5f", epoch, epoch_losses[-1])
        if on_epoch is not None:
            on_epoch(epoch + 1, params, state, epoch_losses)
    return PretrainResult(params, state, epoch_losses, step_losses, end)


class TrainingFault(NumericalFault):
    """Training hit NaN/Inf; carries the last parameters that were finite."""

    def __init__(self, msg, last_good: dict, epoch: int, step: int):
        super().__init__(f"{msg} (epoch {epoch}, step {step})")
        self.last_good = last_good
        self.epoch = epoch
        self.step = step


# -- fine-tuning ------------------------------------------------------------------
@dataclass
class EvalReport:
    accuracy: float
    fold_accuracies: list[float] = field(default_factory=list)
    val_accuracies: list[float] = field(default_factory=list)
    k: int | None = None
    num_labeled: int = 0

    def write_csv(self, path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["fold", "accuracy"])
            if self.fold_accuracies:
                for i, a in enumerate(self.fold_accuracies):
                    w.writerow([i, repr(float(a))])
            else:
                w.writerow(["all", repr(float(self.accuracy))])


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    onehot = np.zeros(logits.shape)
    onehot[np.arange(len(labels)), labels] = 1.0
    return T.sum(T.log_softmax(logits, axis=-1) * onehot) * (-1.0 / len(labels))


def predict(params: ModelParams, enc: EncoderConfig, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
    out = []
    for s in range(0, len(images), batch_size):
        out.append(np.argmax(finetune_forward(images[s:s + batch_size], params, enc).data, axis=1))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def train_classifier(params: ModelParams, enc: EncoderConfig, images: np.ndarray, labels: np.ndarray,
                     cfg: TrainConfig, num_classes: int, seed: int) -> ModelParams:
    """Fine-tune encoder + fresh head with cross-entropy; returns new params."""
    if np.any((labels < 0) | (labels >= num_classes)):
        raise ConfigError("labels must lie in [0, num_classes)")
    p = ModelParams((k, Tensor(v.data.copy(), requires_grad=True))
                    for k, v in params.items() if k.startswith("enc."))
    add_head(p, enc, num_classes)
    trainable = [k for k in p if k.startswith("head.")] if cfg.freeze_encoder else list(p)
    state = AdamWState()
    n = len(images)
    spe = steps_per_epoch(n, cfg.batch_size)
    total = cfg.epochs * spe
    for epoch in range(cfg.epochs):
        order = make_rng(seed, 21, epoch).permutation(n)
        for b in range(spe):
            step = epoch * spe + b
            ids = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            batch = np.stack([
                augment(StainTriplet(images[i], images[i], images[i]), cfg,
                        make_rng(seed, 22, step, j), enc.image_size).rgb
                for j, i in enumerate(ids)])
            p.zero_grad()
            loss = cross_entropy(finetune_forward(batch, p, enc), labels[ids])
            loss.backward()
            clip_grad_norm(p, cfg.grad_clip)
            adamw_step(p, None, state, lr_at(step, total, cfg), cfg.weight_decay, cfg.betas,
                       cfg.adam_eps, names=trainable)
    return p


def kfold_indices(labels: np.ndarray, folds: int, seed: int) -> list[np.ndarray]:
    """Stratified fold assignment: each class is dealt round-robin over the folds."""
    labels = np.asarray(labels)
    assign = np.empty(len(labels), dtype=np.int64)
    offset = 0
    for c in np.unique(labels):
        members = make_rng(seed, 23, int(c)).permutation(np.flatnonzero(labels == c))
        assign[members] = (np.arange(members.size) + offset) % folds
        offset += members.size
    return [np.flatnonzero(assign == f) for f in range(folds)]


def finetune(pretrained: ModelParams, enc: EncoderConfig, labeled_images: np.ndarray,
             labeled_labels: np.ndarray, test_images: np.ndarray, test_labels: np.ndarray,
             cfg: TrainConfig, num_classes: int) -> EvalReport:
    """k-fold fine-tuning on a labeled subset; reports mean accuracy on the test split."""
    n = len(labeled_images)
    if n < cfg.folds:
        raise ConfigError(f"{n} labeled samples cannot fill {cfg.folds} folds")
    folds = kfold_indices(labeled_labels, cfg.folds, cfg.seed)
    test_acc, val_acc = [], []
    for f, val_idx in enumerate(folds):
        train_idx = np.setdiff1d(np.arange(n), val_idx)
        p = train_classifier(pretrained, enc, labeled_images[train_idx], labeled_labels[train_idx],
                             cfg, num_classes, seed=cfg.seed * 1000 + f)
        val_acc.append(float(np.mean(predict(p, enc, labeled_images[val_idx]) == labeled_labels[val_idx])))
        test_acc.append(float(np.mean(predict(p, enc, test_images) == test_labels)))
        log.info("fold %d val %.3f test %.3f", f, val_acc[-1], test_acc[-1])
    return EvalReport(float(np.mean(test_acc)), test_acc, val_acc, None, n)


def labeled_subset(dataset: Dataset, n: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    idx = stratified_sample(dataset.labels, n, seed)
    return dataset.stack("rgb")[idx], dataset.labels[idx]


# -- kNN ----------------------------------------------------------------------------
def knn_classify(train_emb: np.ndarray, train_labels: np.ndarray, test_emb: np.ndarray,
                 k: int) -> np.ndarray:
    """Cosine-similarity kNN majority vote; ties go to the larger summed similarity.

    Neighbour ranking is by descending similarity, then ascending train index.
    """
    if k < 1 or k > len(train_emb):
        raise ValueError(f"k={k} must lie in [1, {len(train_emb)}]")
    a = train_emb / np.maximum(np.linalg.norm(train_emb, axis=1, keepdims=True), 1e-12)
    b = test_emb / np.maximum(np.linalg.norm(test_emb, axis=1, keepdims=True), 1e-12)
    sim = b @ a.T
    order = np.argsort(-sim, axis=1, kind="stable")[:, :k]
    classes = int(train_labels.max()) + 1
    out = np.empty(len(test_emb), dtype=np.int64)
    for i in range(len(test_emb)):
        nb = order[i]
        votes = np.bincount(train_labels[nb], minlength=classes)
        sims = np.bincount(train_labels[nb], weights=sim[i, nb], minlength=classes)
        best = np.flatnonzero(votes == votes.max())
        out[i] = best[np.argmax(sims[best])]
    return out


def embed_images(params: ModelParams, enc: EncoderConfig, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
    return np.concatenate([embed(images[s:s + batch_size], params, enc)
                           for s in range(0, len(images), batch_size)])


def knn_eval(params: ModelParams, enc: EncoderConfig, train_images, train_labels, test_images,
             test_labels, k: int) -> EvalReport:
    tr = embed_images(params, enc, train_images)
    te = embed_images(params, enc, test_images)
    pred = knn_classify(tr, np.asarray(train_labels), te, k)
    return EvalReport(float(np.mean(pred == np.asarray(test_labels))), k=k, num_labeled=len(train_images))


def config_dict(cfg) -> dict:
    return {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(cfg).items()}
