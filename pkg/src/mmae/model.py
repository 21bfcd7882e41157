"""ViT encoder, MAE / MMAE decoders, fine-tuning head and attention maps.

Everything is written functionally against a :class:`ModelParams` mapping of
dotted names to leaf tensors, e.g. ``enc.block3.attn.q.w``.  Batched entry
points take ``(B, M, P*P*C)`` token arrays plus per-sample index arrays; the
single-image helpers (:func:`encode`, :func:`decode_mae`, ...) wrap them.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .masking import MODALITIES, MaskPlan, PatchGrid, patchify
from .tensor import Tensor

PIXEL_MEAN = 0.5
PIXEL_STD = 0.25


@dataclass
class EncoderConfig:
    image_size: int = 224
    patch_size: int = 16
    depth: int = 12
    heads: int = 6
    head_dim: int = 64
    mlp_ratio: int = 4
    num_global_tokens: int = 1
    modalities: int = 1
    channels: int = 3

    def __post_init__(self):
        if self.num_global_tokens < 0:
            raise ValueError("num_global_tokens must be >= 0")
        if self.modalities not in (1, 3):
            raise ValueError("modalities must be 1 (MAE) or 3 (MMAE)")
        if self.embed_dim % 4:
            raise ValueError("embed_dim must be divisible by 4 for 2-D sin-cos embeddings")
        PatchGrid(self.image_size, self.patch_size)

    @property
    def embed_dim(self) -> int:
        return self.heads * self.head_dim

    @property
    def grid(self) -> PatchGrid:
        return PatchGrid(self.image_size, self.patch_size)

    @property
    def modality_names(self) -> tuple[str, ...]:
        return MODALITIES[: self.modalities]

    @property
    def token_dim(self) -> int:
        return self.patch_size ** 2 * self.channels


@dataclass
class DecoderConfig:
    depth: int = 2
    heads: int = 3
    embed_dim: int = 192
    mlp_ratio: int = 4
    has_cross_attention: bool = False

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError("decoder depth must be >= 1")
        if self.embed_dim % self.heads or self.embed_dim % 4:
            raise ValueError("decoder embed_dim must divide by heads and by 4")


class ModelParams(dict):
    """Ordered mapping of dotted parameter names to leaf tensors."""

    def zero_grad(self) -> None:
        for t in self.values():
            t.grad = None

    def copy(self) -> "ModelParams":
        return ModelParams((k, Tensor(v.data.copy(), requires_grad=True)) for k, v in self.items())

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.items()}

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray]) -> "ModelParams":
        return cls((k, Tensor(np.asarray(v, dtype=np.float64), requires_grad=True)) for k, v in arrays.items())

    def num_values(self) -> int:
        return sum(t.size for t in self.values())


# -- initialisation ----------------------------------------------------------
def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out


def _block_params(rng, prefix: str, dim: int, mlp_ratio: int, out: dict, cross: bool = False):
    hidden = dim * mlp_ratio
    norms = ("normq", "normkv") if cross else ("norm1", "norm2")
    for nm in norms:
        out[f"{prefix}.{nm}.g"] = np.ones(dim)
        out[f"{prefix}.{nm}.b"] = np.zeros(dim)
    for nm in ("q", "k", "v", "proj"):
        out[f"{prefix}.attn.{nm}.w"] = trunc_normal(rng, (dim, dim))
        out[f"{prefix}.attn.{nm}.b"] = np.zeros(dim)
    if not cross:
        out[f"{prefix}.mlp.fc1.w"] = trunc_normal(rng, (dim, hidden))
        out[f"{prefix}.mlp.fc1.b"] = np.zeros(hidden)
        out[f"{prefix}.mlp.fc2.w"] = trunc_normal(rng, (hidden, dim))
        out[f"{prefix}.mlp.fc2.b"] = np.zeros(dim)


def init_params(enc: EncoderConfig, dec: DecoderConfig | None = None, num_classes: int = 0,
                seed: int = 0) -> ModelParams:
    """Fresh parameters: truncated normal (std 0.02) weights, zero biases and head."""
    rng = np.random.default_rng(seed)
    D, L = enc.embed_dim, enc.token_dim
    p: dict[str, np.ndarray] = {}
    for mod in enc.modality_names:
        p[f"enc.patch.{mod}.w"] = trunc_normal(rng, (L, D))
        p[f"enc.patch.{mod}.b"] = np.zeros(D)
    if enc.num_global_tokens:
        p["enc.global"] = trunc_normal(rng, (enc.num_global_tokens, D))
    for i in range(enc.depth):
        _block_params(rng, f"enc.block{i}", D, enc.mlp_ratio, p)
    p["enc.norm.g"] = np.ones(D)
    p["enc.norm.b"] = np.zeros(D)
    if dec is not None:
        Dd = dec.embed_dim
        p["dec.embed.w"] = trunc_normal(rng, (D, Dd))
        p["dec.embed.b"] = np.zeros(Dd)
        p["dec.mask_token"] = trunc_normal(rng, (1, 1, Dd))
        if dec.has_cross_attention:
            _block_params(rng, "dec.cross", Dd, dec.mlp_ratio, p, cross=True)
        for i in range(dec.depth):
            _block_params(rng, f"dec.block{i}", Dd, dec.mlp_ratio, p)
        p["dec.norm.g"] = np.ones(Dd)
        p["dec.norm.b"] = np.zeros(Dd)
        p["dec.pred.w"] = trunc_normal(rng, (Dd, L))
        p["dec.pred.b"] = np.zeros(L)
    if num_classes:
        add_head(p, enc, num_classes)
    return ModelParams.from_arrays(p)


def add_head(params: dict, enc: EncoderConfig, num_classes: int) -> None:
    """Attach a zero-initialised layer-norm + linear classifier head in place."""
    D = enc.embed_dim
    arrays = {
        "head.norm.g": np.ones(D),
        "head.norm.b": np.zeros(D),
        "head.fc.w": np.zeros((D, num_classes)),
        "head.fc.b": np.zeros(num_classes),
    }
    for k, v in arrays.items():
        params[k] = Tensor(v, requires_grad=True) if isinstance(params, ModelParams) else v


# -- position embeddings ------------------------------------------------------
def sincos_1d(dim: int, positions: np.ndarray) -> np.ndarray:
    omega = 1.0 / 10000 ** (np.arange(dim // 2, dtype=np.float64) / (dim / 2.0))
    out = np.outer(positions.reshape(-1).astype(np.float64), omega)
    return np.concatenate([np.sin(out), np.cos(out)], axis=1)


def sincos_2d(dim: int, grid_side: int, num_global: int = 0) -> np.ndarray:
    """Fixed ``(num_global + side**2, dim)`` table; rows first, then columns.

    Global tokens get all-zero rows.
    """
    rows, cols = np.meshgrid(np.arange(grid_side), np.arange(grid_side), indexing="ij")
    emb = np.concatenate([sincos_1d(dim // 2, rows), sincos_1d(dim // 2, cols)], axis=1)
    if num_global:
        emb = np.concatenate([np.zeros((num_global, dim)), emb], axis=0)
    return emb


# -- building blocks ----------------------------------------------------------
def _ln(x: Tensor, p: ModelParams, prefix: str) -> Tensor:
    return T.layer_norm(x, p[prefix + ".g"], p[prefix + ".b"])


def _lin(x: Tensor, p: ModelParams, prefix: str) -> Tensor:
    return T.linear(x, p[prefix + ".w"], p[prefix + ".b"])


def attention(xq: Tensor, xkv: Tensor, p: ModelParams, prefix: str, heads: int,
              record: list | None = None) -> Tensor:
    B, Nq, D = xq.shape
    Nk = xkv.shape[1]
    hd = D // heads

    def split(t: Tensor, n: int) -> Tensor:
        return t.reshape(B, n, heads, hd).transpose(0, 2, 1, 3)

    q = split(_lin(xq, p, prefix + ".q"), Nq)
    k = split(_lin(xkv, p, prefix + ".k"), Nk)
    v = split(_lin(xkv, p, prefix + ".v"), Nk)
    scores = T.matmul(q, k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(hd))
    attn = T.softmax(scores, axis=-1)
    if record is not None:
        record.append(attn.data.copy())
    out = T.matmul(attn, v).transpose(0, 2, 1, 3).reshape(B, Nq, D)
    return _lin(out, p, prefix + ".proj")


def block(x: Tensor, p: ModelParams, prefix: str, heads: int, record: list | None = None) -> Tensor:
    """Pre-norm transformer block: self-attention then GELU MLP, both residual."""
    h = _ln(x, p, prefix + ".norm1")
    x = x + attention(h, h, p, prefix + ".attn", heads, record)
    h = _ln(x, p, prefix + ".norm2")
    h = _lin(T.gelu(_lin(h, p, prefix + ".mlp.fc1")), p, prefix + ".mlp.fc2")
    return x + h


# -- index helpers -------------------------------------------------------------
def encoder_indices(plans: Sequence[MaskPlan], modalities: Sequence[str]) -> np.ndarray:
    """``[B, budget]`` rows into the modality-major table of all patch tokens."""
    M = plans[0].num_positions
    rows = []
    for plan in plans:
        if tuple(plan.modalities) != tuple(modalities):
            raise ValueError(f"plan modalities {plan.modalities} do not match model {tuple(modalities)}")
        rows.append(np.concatenate([np.asarray(plan.visible[m], dtype=np.intp) + i * M
                                    for i, m in enumerate(modalities)]))
    lengths = {len(r) for r in rows}
    if len(lengths) != 1:
        raise ValueError("all plans in a batch need the same budget")
    return np.stack(rows)


def rgb_slots(plans: Sequence[MaskPlan], num_global: int) -> np.ndarray:
    """``[B, M]``: latent row holding each RGB-visible position, or -1."""
    M = plans[0].num_positions
    out = np.full((len(plans), M), -1, dtype=np.intp)
    for b, plan in enumerate(plans):
        out[b, plan.visible["rgb"]] = num_global + np.arange(len(plan.visible["rgb"]))
    return out


def full_plan(num_positions: int) -> MaskPlan:
    return MaskPlan({"rgb": list(range(num_positions))}, num_positions)


# -- encoder / decoder -----------------------------------------------------------
def embed_tokens(p: ModelParams, cfg: EncoderConfig, tokens: dict[str, np.ndarray],
                 idx: np.ndarray, modalities: Sequence[str] | None = None) -> Tensor:
    """Project, position-embed and select visible tokens; prepend global tokens.

    ``tokens[mod]`` is ``[B, M, L]``; ``idx`` is ``[B, K]`` into the
    modality-major concatenation of the listed ``modalities``.
    """
    modalities = tuple(modalities or cfg.modality_names)
    G, D = cfg.num_global_tokens, cfg.embed_dim
    M = cfg.grid.num_positions
    pos = sincos_2d(D, cfg.grid.grid_side)
    parts = []
    for mod in modalities:
        if f"enc.patch.{mod}.w" not in p:
            raise ValueError(f"model has no projection for modality {mod!r}")
        parts.append(_lin(Tensor(tokens[mod]), p, f"enc.patch.{mod}") + pos)
    table = parts[0] if len(parts) == 1 else T.concat(parts, axis=1)
    if table.shape[1] != M * len(modalities):
        raise ValueError("token arrays do not match the patch grid")
    x = T.gather_rows(table, idx)
    if G:
        B = x.shape[0]
        glob = T.broadcast_to(T.reshape(p["enc.global"], (1, G, D)), (B, G, D))
        x = T.concat([glob, x], axis=1)
    return x


def encoder_forward(p: ModelParams, cfg: EncoderConfig, tokens: dict[str, np.ndarray],
                    idx: np.ndarray, modalities: Sequence[str] | None = None,
                    record: list | None = None) -> Tensor:
    """Encode visible tokens: ``[B, G + K, D]`` after the final layer norm."""
    x = embed_tokens(p, cfg, tokens, idx, modalities)
    for i in range(cfg.depth):
        x = block(x, p, f"enc.block{i}", cfg.heads, record)
    return _ln(x, p, "enc.norm")


def decoder_forward(p: ModelParams, enc: EncoderConfig, dec: DecoderConfig, latents: Tensor,
                    slots: np.ndarray) -> Tensor:
    """Predict pixels at every position: ``[B, M, L]``.

    The decoder stream holds the projected global latents followed by one row
    per patch position (the RGB latent where visible, the mask token
    elsewhere).  With cross-attention, one layer lets the stream attend to the
    whole projected encoder output before the self-attention blocks.
    """
    B, n_lat, _ = latents.shape
    G, M, Dd = enc.num_global_tokens, enc.grid.num_positions, dec.embed_dim
    y = _lin(latents, p, "dec.embed")
    mask_tok = T.broadcast_to(p["dec.mask_token"], (B, 1, Dd))
    ext = T.concat([y, mask_tok], axis=1)
    src = np.where(slots >= 0, slots, n_lat)
    gidx = np.concatenate([np.broadcast_to(np.arange(G), (B, G)), src], axis=1)
    x = T.gather_rows(ext, gidx) + sincos_2d(Dd, enc.grid.grid_side, G)
    if dec.has_cross_attention:
        x = x + attention(_ln(x, p, "dec.cross.normq"), _ln(y, p, "dec.cross.normkv"),
                          p, "dec.cross.attn", dec.heads)
    for i in range(dec.depth):
        x = block(x, p, f"dec.block{i}", dec.heads)
    x = _lin(_ln(x, p, "dec.norm"), p, "dec.pred")
    if G:
        x = T.gather_rows(x, np.broadcast_to(np.arange(G, G + M), (B, M)))
    return x


def patch_targets(target: np.ndarray, norm_pix: bool, eps: float = 1e-6) -> np.ndarray:
    t = np.asarray(target, dtype=np.float64)
    if not norm_pix:
        return t
    mu = t.mean(axis=-1, keepdims=True)
    var = t.var(axis=-1, keepdims=True)
    return (t - mu) / np.sqrt(var + eps)


def reconstruction_loss(pred: Tensor, target: np.ndarray, norm_pix: bool = True,
                        weights: np.ndarray | None = None) -> Tensor:
    """Mean squared error over patch pixels.

    ``weights`` (same shape as ``pred`` minus the last axis, 0/1) selects the
    patches that count; without it every row of ``pred`` is a target patch.
    """
    if tuple(pred.shape) != tuple(np.shape(target)):
        raise ValueError(f"prediction {pred.shape} and target {np.shape(target)} differ")
    tgt = patch_targets(target, norm_pix)
    diff = pred - tgt
    per_patch = T.mean(diff * diff, axis=-1)
    if weights is None:
        return T.mean(per_patch)
    w = np.asarray(weights, dtype=np.float64)
    return T.sum(per_patch * w) * (1.0 / max(float(w.sum()), 1.0))


# -- input conversion -------------------------------------------------------------
def image_to_tokens(images: np.ndarray, grid: PatchGrid) -> np.ndarray:
    """8-bit ``(H, W, 3)`` or ``(B, H, W, 3)`` -> normalised patch tokens."""
    x = np.asarray(images, dtype=np.float64)
    if x.ndim == 3:
        x = x[None]
    x = (x / 255.0 - PIXEL_MEAN) / PIXEL_STD
    return patchify(np.ascontiguousarray(x.transpose(0, 3, 1, 2)), grid)


# -- single-sample API ----------------------------------------------------------
def _tokens_from(images: dict, cfg: EncoderConfig) -> dict[str, np.ndarray]:
    out = {}
    for mod, img in images.items():
        a = np.asarray(img)
        if a.ndim == 2:  # already tokens
            out[mod] = a[None].astype(np.float64)
        elif a.ndim == 3 and a.shape[0] == cfg.channels and a.shape[-1] != cfg.channels:
            out[mod] = patchify(a.astype(np.float64), cfg.grid)[None]
        else:
            out[mod] = image_to_tokens(a, cfg.grid)
    return out


def encode(images_per_modality: dict, plan: MaskPlan, params: ModelParams, cfg: EncoderConfig) -> Tensor:
    """Latent tokens ``[G + budget, D]`` for one sample.

    ``images_per_modality`` maps modality name to an 8-bit ``(H, W, 3)`` image,
    a float ``(C, H, W)`` image or ready ``(M, L)`` tokens.
    """
    if tuple(plan.modalities) != cfg.modality_names:
        raise ValueError(f"plan modalities {plan.modalities} do not match config {cfg.modality_names}")
    tokens = _tokens_from(images_per_modality, cfg)
    idx = encoder_indices([plan], cfg.modality_names)
    z = encoder_forward(params, cfg, tokens, idx)
    return T.reshape(z, z.shape[1:])


def decode_mae(latents: Tensor, plan: MaskPlan, params: ModelParams, enc: EncoderConfig,
               dec: DecoderConfig) -> Tensor:
    """Pixel predictions ``[num_masked, L]`` at the masked positions, sorted."""
    if tuple(plan.modalities) != ("rgb",):
        raise ValueError("decode_mae needs a single-modality plan")
    return _decode_masked(latents, plan, params, enc, dec)


def decode_mmae(latents: Tensor, plan: MaskPlan, params: ModelParams, enc: EncoderConfig,
                dec: DecoderConfig) -> Tensor:
    """RGB predictions at every position without a visible RGB token."""
    if tuple(plan.modalities) != MODALITIES:
        raise ValueError(f"decode_mmae needs modalities {MODALITIES}, got {plan.modalities}")
    if not dec.has_cross_attention:
        raise ValueError("MMAE decoding needs a cross-attention decoder")
    return _decode_masked(latents, plan, params, enc, dec)


def _decode_masked(latents, plan, params, enc, dec) -> Tensor:
    lat = latents if latents.ndim == 3 else T.reshape(latents, (1,) + latents.shape)
    pred = decoder_forward(params, enc, dec, lat, rgb_slots([plan], enc.num_global_tokens))
    pred = T.reshape(pred, pred.shape[1:])
    return T.gather_rows(pred, np.asarray(plan.masked("rgb"), dtype=np.intp))


def pool_head(z: Tensor, p: ModelParams) -> Tensor:
    pooled = T.mean(z, axis=1)
    return _lin(_ln(pooled, p, "head.norm"), p, "head.fc")


def finetune_forward(images_rgb, params: ModelParams, cfg: EncoderConfig) -> Tensor:
    """Class logits ``[B, C]`` from the unmasked RGB stream.

    Mean pool over all encoded tokens (global included), layer norm, linear.
    """
    tokens = images_rgb if (np.ndim(images_rgb) == 3 and np.shape(images_rgb)[-1] == cfg.token_dim) \
        else image_to_tokens(images_rgb, cfg.grid)
    B, M = tokens.shape[:2]
    idx = np.broadcast_to(np.arange(M), (B, M))
    z = encoder_forward(params, cfg, {"rgb": tokens}, idx, modalities=("rgb",))
    return pool_head(z, params)


def embed(images_rgb, params: ModelParams, cfg: EncoderConfig) -> np.ndarray:
    """Global-token embeddings ``[B, D]`` of the unmasked RGB stream (pooled if no global token)."""
    tokens = image_to_tokens(images_rgb, cfg.grid) if np.shape(images_rgb)[-1] != cfg.token_dim \
        else np.asarray(images_rgb)
    B, M = tokens.shape[:2]
    idx = np.broadcast_to(np.arange(M), (B, M))
    z = encoder_forward(params, cfg, {"rgb": tokens}, idx, modalities=("rgb",)).data
    return z[:, 0] if cfg.num_global_tokens else z.mean(axis=1)


def attention_maps(image, params: ModelParams, cfg: EncoderConfig, layer: int,
                   threshold: float | None = None) -> np.ndarray:
    """Per-head maps ``[heads, H, W]`` of global-token attention to patches.

    Each map is the global token's softmax row restricted to patch tokens,
    nearest-upsampled to image size.  With ``threshold = q``, values not above
    the q-quantile of that map are zeroed (q = 1 gives all-zero maps).
    """
    if cfg.num_global_tokens < 1:
        raise ValueError("attention maps need a global token")
    if not 0 <= layer < cfg.depth:
        raise IndexError(f"layer {layer} out of range for depth {cfg.depth}")
    tokens = image_to_tokens(image, cfg.grid)
    M = tokens.shape[1]
    rec: list[np.ndarray] = []
    encoder_forward(params, cfg, {"rgb": tokens}, np.arange(M)[None], modalities=("rgb",), record=rec)
    G, side, P = cfg.num_global_tokens, cfg.grid.grid_side, cfg.patch_size
    rows = rec[layer][0, :, 0, G:]  # [heads, M]
    maps = rows.reshape(-1, side, side).repeat(P, axis=1).repeat(P, axis=2)
    if threshold is not None:
        for hmap in maps:
            cut = np.quantile(hmap, threshold)
            hmap[hmap <= cut] = 0.0
    return maps


def attention_map_images(maps: np.ndarray) -> list[np.ndarray]:
    """8-bit grayscale renderings, each map scaled by its own maximum."""
    out = []
    for m in maps:
        top = m.max()
        scaled = m / top if top > 0 else np.zeros_like(m)
        out.append(np.floor(scaled * 255.0 + 0.5).astype(np.uint8))
    return out
