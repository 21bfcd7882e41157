"""Acceptance suite: one PASS/FAIL line per criterion, printed in the pytest summary.

Run alone with ``pytest tests/test_acceptance.py -v`` (about 20 minutes on one core)
or ``python3 tests/test_acceptance.py``.
"""
import math
import sys
import time
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))
from helpers import desk_decoder, desk_encoder, jitter, random_images  # noqa: E402

from mmae import config as config_mod  # noqa: E402
from mmae import tensor as T  # noqa: E402
from mmae.checkpoint import decode, encode, load_checkpoint, save_checkpoint  # noqa: E402
from mmae.cli import run as cli_run  # noqa: E402
from mmae.data import SynthSpec, save_png, split, synth_generate  # noqa: E402
from mmae.gradcheck import directional, elementwise  # noqa: E402
from mmae.masking import (PatchGrid, duplicate_positions, mae_mask_plan, make_rng, mmae_mask_plan,  # noqa: E402
                          plan_statistics)
from mmae.model import ModelParams, attention_maps, image_to_tokens, init_params  # noqa: E402
from mmae.stain import angle_deg, snmf_fit  # noqa: E402
from mmae.tensor import Tensor  # noqa: E402
from mmae.training import (AdamWState, TrainConfig, adamw_step, finetune, knn_classify, knn_eval,  # noqa: E402
                           labeled_subset, lr_at, pretrain, pretrain_loss, warmup_steps)

RESULTS: list[str] = []
SEEDS = (0, 1, 2)
_CACHE: dict = {}


def _report(num, title, ok, detail, seconds, limit=None):
    within = limit is None or seconds < limit
    budget = f" (limit {limit:.0f} s)" if limit is not None else ""
    line = f"{'PASS' if ok and within else 'FAIL'} [{num}] {title}: {detail}; {seconds:.1f} s{budget}"
    RESULTS.append(line)
    print(line)
    return ok and within


# -- shared desk-scale runs ---------------------------------------------------------
def _desk(seed):
    if ("data", seed) not in _CACHE:
        cfg = config_mod.load(overrides=[f"run.seed={seed}"]).seeded()
        train, test = split(synth_generate(cfg.synth), cfg.data.train_fraction, seed)
        _CACHE["data", seed] = (cfg, train, test)
    return _CACHE["data", seed]


def _pretrained(kind, seed):
    """Desk-preset pretraining (MAE: RGB only; MMAE: RGB+H+E, mask-one, cross-attention)."""
    if (kind, seed) not in _CACHE:
        cfg, train, _ = _desk(seed)
        enc = _encoder(3 if kind == "mmae" else 1)
        dec = config_mod.load().decoder
        dec.has_cross_attention = kind == "mmae"
        t0 = time.perf_counter()
        res = pretrain(train, enc, dec, cfg.pretrain)
        _CACHE[kind, seed] = (enc, res, time.perf_counter() - t0)
    return _CACHE[kind, seed]


def _encoder(modalities):
    enc = config_mod.load().encoder
    enc.modalities = modalities
    return enc


# -- 1 ------------------------------------------------------------------------------
def test_criterion_1_gradient_integrity():
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)

    def leaf(a):
        return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)

    a, b = leaf(rng.uniform(0.5, 2.0, (3, 4))), leaf(rng.uniform(0.5, 2.0, (1, 4)))
    m, g, beta = leaf(rng.standard_normal((4, 3))), leaf(rng.standard_normal(4)), leaf(rng.standard_normal(4))
    w = rng.standard_normal((3, 4))
    ops = {
        "add": lambda: T.sum((a + b) * w), "sub": lambda: T.sum((a - b) * w),
        "mul": lambda: T.sum(a * b * w), "div": lambda: T.sum(a / b * w),
        "matmul": lambda: T.sum(T.matmul(a, m) * w[:, :3]), "exp": lambda: T.sum(T.exp(a) * w),
        "log": lambda: T.sum(T.log(a) * w), "sum": lambda: T.sum(a * w),
        "mean": lambda: T.sum(T.mean(a * w, axis=0) * b), "transpose": lambda: T.sum(T.transpose(a) * w.T),
        "reshape": lambda: T.sum(T.reshape(a, (4, 3)) * w.reshape(4, 3)),
        "broadcast": lambda: T.sum(T.broadcast_to(b, (3, 4)) * w),
        "concat": lambda: T.sum(T.concat([a, b], axis=0) * np.vstack([w, w[:1]])),
        "gather": lambda: T.sum(T.gather_rows(a, [2, 0, 2]) * w),
        "softmax": lambda: T.sum(T.softmax(a, axis=1) * w), "log_softmax": lambda: T.sum(T.log_softmax(a) * w),
        "layer_norm": lambda: T.sum(T.layer_norm(a, g, beta) * w), "gelu": lambda: T.sum(T.gelu(a - 1.2) * w),
    }
    worst = {}
    for name, f in ops.items():
        worst[name] = max(elementwise(f, {"a": a, "b": b, "m": m, "g": g, "beta": beta}).values())

    def model_check(modalities):
        enc, dec = desk_encoder(modalities), desk_decoder(cross=modalities == 3)
        p = jitter(init_params(enc, dec, seed=0))
        imgs = random_images(2 * modalities)
        mods = ("rgb", "h", "e")[:modalities]
        tokens = {mname: image_to_tokens(imgs[2 * i:2 * i + 2], enc.grid) for i, mname in enumerate(mods)}
        if modalities == 1:
            plans = [mae_mask_plan(enc.grid, 0.75, make_rng(1, i)) for i in range(2)]
        else:
            plans = [mmae_mask_plan(enc.grid, 8, (2, 1, 1), make_rng(2, i)) for i in range(2)]
        errs = directional(lambda: pretrain_loss(p, enc, dec, tokens, plans, True), p, h=1e-4, directions=2)
        return max(errs.values())

    worst["MAE full model"] = model_check(1)
    worst["MMAE full model"] = model_check(3)
    top = max(worst, key=worst.get)
    ok = worst[top] < 1e-4
    assert _report(1, "gradient integrity", ok,
                   f"{len(ops)} ops + MAE/MMAE (M=16, depth 2, width 32), max rel err {worst[top]:.2e} ({top})",
                   time.perf_counter() - t0, 60)


# -- 2 ------------------------------------------------------------------------------
def test_criterion_2_snmf_oracle():
    t0 = time.perf_counter()
    spec = SynthSpec(num_classes=3, count=100, seed=5, noise=0.0)
    ds = synth_generate(spec)
    W = spec.W
    worst_angle, worst_rec, monotone = 0.0, 0.0, True
    for conc in ds.concentrations:
        V = W @ conc
        try:
            model = snmf_fit(V, lam=0.01, check_monotone=True)
        except AssertionError:
            monotone = False
            continue
        worst_angle = max(worst_angle, angle_deg(model.W[:, 0], W[:, 0]), angle_deg(model.W[:, 1], W[:, 1]))
        worst_rec = max(worst_rec, np.linalg.norm(V - model.W @ model.H) / np.linalg.norm(V))
    ok = monotone and worst_angle < 5.0 and worst_rec < 0.05
    assert _report(2, "SNMF oracle", ok,
                   f"100 images, worst angle {worst_angle:.3f} deg, worst rel. recon {worst_rec:.4f}, "
                   f"objective monotone {monotone}", time.perf_counter() - t0, 60)


# -- 3 ------------------------------------------------------------------------------
def test_criterion_3_mask_one():
    t0 = time.perf_counter()
    stats = plan_statistics((8, 1, 1), 190, 14, 10_000, seed=0)
    # a second batch with varied alphas and budgets
    rng = make_rng(1)
    grid = PatchGrid(14, 1)
    dup, bad = 0, 0
    for _ in range(2_000):
        alphas = tuple(rng.uniform(0.1, 10.0, 3))
        budget = int(rng.integers(0, 197))
        plan = mmae_mask_plan(grid, budget, alphas, rng)
        dup += duplicate_positions(plan)
        bad += int(sum(plan.counts()) != budget)
    frac = stats["mean_fraction"][0]
    ok = (stats["duplicate_positions"] == 0 and stats["count_sum_violations"] == 0 and dup == 0 and bad == 0
          and abs(frac - 0.80) <= 0.01)
    assert _report(3, "mask-one correctness", ok,
                   f"10000 plans: {stats['duplicate_positions']} duplicates, {stats['count_sum_violations']} "
                   f"bad sums, mean RGB fraction {frac:.4f}; 2000 varied plans: {dup} duplicates",
                   time.perf_counter() - t0, 10)


# -- 4 ------------------------------------------------------------------------------
def test_criterion_4_optimization_progress():
    t0 = time.perf_counter()
    cfg, train, _ = _desk(0)
    pcfg = TrainConfig(**{**cfg.pretrain.__dict__, "epochs": 10, "warmup_epochs": 1, "batch_size": 20})
    enc, dec = _encoder(1), config_mod.load().decoder
    a = pretrain(train, enc, dec, pcfg)
    b = pretrain(train, enc, dec, pcfg)
    steps = len(a.step_losses)
    drop = 1 - a.epoch_losses[-1] / a.epoch_losses[0]
    same = a.step_losses == b.step_losses and a.epoch_losses == b.epoch_losses
    ok = steps == 200 and drop >= 0.5 and same
    assert _report(4, "optimization progress", ok,
                   f"{steps} steps, epoch loss {a.epoch_losses[0]:.4f} -> {a.epoch_losses[-1]:.4f} "
                   f"({100 * drop:.1f}% drop), rerun bitwise identical {same}", time.perf_counter() - t0, 300)


# -- 5 ------------------------------------------------------------------------------
def test_criterion_5_orderings():
    t0 = time.perf_counter()
    acc = {"random": [], "mae": [], "mmae": []}
    for seed in SEEDS:
        cfg, train, test = _desk(seed)
        X, y = labeled_subset(train, 100, seed)
        Xt, yt = test.stack("rgb"), test.labels
        enc1 = _encoder(1)
        acc["random"].append(finetune(init_params(enc1, seed=seed), enc1, X, y, Xt, yt, cfg.finetune, 4).accuracy)
        for kind in ("mae", "mmae"):
            enc, res, _ = _pretrained(kind, seed)
            acc[kind].append(finetune(res.params, enc, X, y, Xt, yt, cfg.finetune, 4).accuracy)
    beats = all(acc["mae"][i] > acc["random"][i] and acc["mmae"][i] > acc["random"][i] for i in range(len(SEEDS)))
    mean = {k: float(np.mean(v)) for k, v in acc.items()}
    order_b = mean["mmae"] >= mean["mae"]
    fmt = lambda v: "/".join(f"{x:.3f}" for x in v)  # noqa: E731
    ok = beats and order_b
    assert _report(5, "ordering claims", ok,
                   f"(a) pretrained > random on every seed {beats} [random {fmt(acc['random'])}, MAE {fmt(acc['mae'])}, "
                   f"MMAE {fmt(acc['mmae'])}]; (b) mean MMAE {mean['mmae']:.3f} vs MAE {mean['mae']:.3f}",
                   time.perf_counter() - t0, 1800)


# -- 6 ------------------------------------------------------------------------------
def _brute_force_knn(train, labels, test, k):
    out = []
    for q in test:
        sims = sorted(((float(q @ t / (np.linalg.norm(q) * np.linalg.norm(t))), -i) for i, t in enumerate(train)),
                      reverse=True)[:k]
        votes, total = {}, {}
        for s, neg in sims:
            c = int(labels[-neg])
            votes[c] = votes.get(c, 0) + 1
            total[c] = total.get(c, 0.0) + s
        out.append(max(votes, key=lambda c: (votes[c], total[c])))
    return np.array(out)


def test_criterion_6_knn():
    pre = _pretrained("mae", 0)  # pretraining time is reported under criterion 5
    t0 = time.perf_counter()
    rng = np.random.default_rng(6)
    emb = rng.standard_normal((200, 16))
    labels = rng.integers(0, 4, 200)
    exact = all(np.array_equal(knn_classify(emb[:150], labels[:150], emb[150:], k),
                               _brute_force_knn(emb[:150], labels[:150], emb[150:], k)) for k in (10, 20))
    cfg, train, test = _desk(0)
    enc, res, _ = pre
    accs = {k: knn_eval(res.params, enc, train.stack("rgb"), train.labels, test.stack("rgb"), test.labels, k).accuracy
            for k in (10, 20)}
    ok = exact and min(accs.values()) >= 0.95
    assert _report(6, "kNN evaluator", ok,
                   f"brute-force agreement (k=10, 20) {exact}; accuracy after MAE pretraining "
                   f"k=10 {accs[10]:.3f}, k=20 {accs[20]:.3f}", time.perf_counter() - t0, 120)


# -- 7 ------------------------------------------------------------------------------
def _reference_adamw(p, grads, lr, wd, b1=0.9, b2=0.999, eps=1e-8):
    m, v = np.zeros_like(p), np.zeros_like(p)
    for t, g in enumerate(grads, start=1):
        p = p * (1 - lr * wd)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        p = p - lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)
    return p


def test_criterion_7_schedule_optimizer():
    t0 = time.perf_counter()
    cfg = TrainConfig()  # 1600 epochs, 40 warmup, 1e-4 base, 1e-6 start
    total = 1600 * 932  # 89,434 training tiles at batch 96
    warm = warmup_steps(total, cfg)
    errs = [abs(lr_at(0, total, cfg) - 1e-6), abs(lr_at(warm, total, cfg) - cfg.base_lr),
            abs(lr_at(total, total, cfg) - 0.0)]
    rng = np.random.default_rng(7)
    adam = []
    for wd in (0.0, 0.05):
        p0 = rng.standard_normal((6, 5))
        grads = [rng.standard_normal((6, 5)) for _ in range(50)]
        params = ModelParams(w=Tensor(p0.copy(), requires_grad=True))
        state = AdamWState()
        for gr in grads:
            adamw_step(params, {"w": gr}, state, 3e-3, wd)
        adam.append(float(np.max(np.abs(params["w"].data - _reference_adamw(p0, grads, 3e-3, wd)))))
    ok = max(errs) <= 1e-12 and max(adam) <= 1e-12
    assert _report(7, "schedule/optimizer", ok,
                   f"lr boundary errors {max(errs):.1e}; AdamW max deviation {max(adam):.1e} (wd 0 and 0.05)",
                   time.perf_counter() - t0)


# -- 8 ------------------------------------------------------------------------------
def test_criterion_8_checkpoint(tmp_path):
    t0 = time.perf_counter()
    data = synth_generate(SynthSpec(count=24, seed=8))
    details, ok = [], True
    for label, enc, dec in (("MAE", desk_encoder(), desk_decoder()), ("MMAE", desk_encoder(3), desk_decoder(True))):
        cfg = TrainConfig(base_lr=1e-3, epochs=4, warmup_epochs=1, batch_size=8, seed=8, budget=8)
        full = pretrain(data, enc, dec, cfg)
        half = pretrain(data, enc, dec, cfg, stop_epoch=2)
        path = tmp_path / f"{label}.ckpt"
        save_checkpoint(path, half.params, half.state, {"epoch_losses": half.epoch_losses}, cfg.seed)
        params, state, snap, _ = load_checkpoint(path)
        exact = all(params[k].data.tobytes() == half.params[k].data.tobytes() for k in half.params)
        exact &= all(state.m[k].tobytes() == half.state.m[k].tobytes() for k in half.state.m)
        exact &= encode(decode(path.read_bytes())) == path.read_bytes()
        rest = pretrain(data, enc, dec, cfg, params=params, state=state, start_epoch=2,
                        epoch_losses=snap["epoch_losses"])
        same = rest.epoch_losses == full.epoch_losses and rest.step_losses == full.step_losses[len(half.step_losses):]
        ok &= exact and same
        details.append(f"{label} bit-exact {exact}, resumed curve identical {same}")
    assert _report(8, "checkpoint roundtrip", ok, "; ".join(details), time.perf_counter() - t0)


# -- 9 ------------------------------------------------------------------------------
def test_criterion_9_attention_maps(tmp_path):
    enc, res, _ = _pretrained("mae", 0)
    t0 = time.perf_counter()
    cfg, _, test = _desk(0)
    ck = tmp_path / "mae.ckpt"
    save_checkpoint(ck, res.params, None, {"ini": config_mod.dump(cfg), "modalities": 1}, cfg.seed)
    images = []
    for i in range(4):
        images.append(tmp_path / f"tile{i}.png")
        save_png(images[-1], test.items[i][0].rgb)
    P = enc.patch_size
    low, high = math.inf, -math.inf
    for i in range(4):
        for layer in range(enc.depth):
            per_patch = attention_maps(test.items[i][0].rgb, res.params, enc, layer)[:, ::P, ::P]
            low = min(low, float(per_patch.min()))
            high = max(high, float(per_patch.sum(axis=(1, 2)).max()))
    codes = [cli_run(["attnmap", "--ckpt", str(ck), "--layer", str(L), "--out", str(tmp_path / d), *map(str, images)])
             for d in ("a", "b") for L in range(enc.depth)]
    pngs = sorted((tmp_path / "a").glob("*.png"))
    same = all(p.read_bytes() == (tmp_path / "b" / p.name).read_bytes() for p in pngs)
    expected = 4 * enc.depth * enc.heads
    ok = low >= 0 and high <= 1 and codes == [0] * len(codes) and len(pngs) == expected and same
    assert _report(9, "attention maps", ok,
                   f"min value {low:.2e}, max per-head sum {high:.6f}, {len(pngs)} PNGs via the attnmap command, "
                   f"byte-identical on rerun {same}", time.perf_counter() - t0)


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q"]))
