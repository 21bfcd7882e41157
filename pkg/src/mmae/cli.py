"""Command-line entry point: ``mmae <subcommand> [options]``.

Every run directory receives ``config.ini`` with the fully resolved settings
(including the seed); passing it back with ``--config`` replays the run.
Exit status is 0 on success, 2 for configuration/usage errors and 1 for
runtime faults.
"""
from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

from . import config as config_mod
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .data import (Dataset, StratificationError, load_dataset, load_png, read_manifest, save_png,
                   split, stain_paths, synth_generate, write_dataset)
from .masking import plan_statistics
from .model import attention_map_images, attention_maps, init_params
from .stain import DegenerateInputError, separate
from .tensor import NumericalFault
from .training import ConfigError, embed_images, finetune, knn_eval, labeled_subset, pretrain

log = logging.getLogger("mmae")


class UsageError(Exception):
    pass


# -- shared plumbing --------------------------------------------------------------
def _common(p: argparse.ArgumentParser, out_required: bool = True) -> None:
    p.add_argument("--out", required=out_required, help="output directory")
    p.add_argument("--seed", type=int, default=None, help="single source of all randomness")
    p.add_argument("--config", default=None, help="INI file (e.g. a previous run's config.ini)")
    p.add_argument("--preset", default="desk", choices=sorted(config_mod.PRESETS))
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE")
    p.add_argument("-v", "--verbose", action="store_true")


def _resolve(args, extra: list[str] | None = None, base: str | None = None) -> config_mod.RunConfig:
    overrides = list(extra or []) + list(args.overrides)
    if args.seed is not None:
        overrides.append(f"run.seed={args.seed}")
    if base is not None and args.config is None:
        cfg = config_mod.loads(base, overrides, args.preset)
    else:
        cfg = config_mod.load(args.config, overrides, args.preset)
    return cfg.seeded()


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _datasets(cfg: config_mod.RunConfig) -> tuple[Dataset, Dataset]:
    """Train/test datasets from ``data.root``, or regenerated from ``[synth]``."""
    if cfg.data.root:
        root = Path(cfg.data.root)
        if not (root / "manifest.csv").exists():
            raise UsageError(f"no manifest.csv under {root}")
        tags = {r[2] for r in read_manifest(root)}
        if {"train", "test"} <= tags:
            return load_dataset(root, "train", cfg.data.lam), load_dataset(root, "test", cfg.data.lam)
        return split(load_dataset(root, None, cfg.data.lam), cfg.data.train_fraction, cfg.seed)
    return split(synth_generate(cfg.synth), cfg.data.train_fraction, cfg.seed)


def _with_data(args) -> list[str]:
    return [f"data.root={args.data}"] if getattr(args, "data", None) else []


def _from_checkpoint(args, extra: list[str] | None = None):
    """Load a checkpoint; its embedded config is the base the flags refine."""
    params, _, snap, _ = load_checkpoint(args.ckpt)
    base = snap.get("ini") if isinstance(snap, dict) else None
    cfg = _resolve(args, extra, base=base)
    if isinstance(snap, dict) and "modalities" in snap:
        cfg.encoder.modalities = int(snap["modalities"])
    return params, cfg


def _snapshot(cfg: config_mod.RunConfig) -> dict:
    return {"ini": config_mod.dump(cfg), "modalities": cfg.encoder.modalities}


# -- subcommands --------------------------------------------------------------------
def cmd_synth(args) -> None:
    extra = []
    for flag, key in (("classes", "num_classes"), ("size", "image_size"), ("count", "count")):
        if getattr(args, flag) is not None:
            extra.append(f"synth.{key}={getattr(args, flag)}")
    if args.size is not None:
        extra.append(f"encoder.image_size={args.size}")
    cfg = _resolve(args, extra)
    out = _out(args)
    ds = synth_generate(cfg.synth)
    train, test = split(ds, cfg.data.train_fraction, cfg.seed)
    write_dataset([train, test], out)
    config_mod.write(cfg, out / "config.ini")
    print(f"wrote {len(ds)} images to {out}")


def cmd_stainsep(args) -> None:
    cfg = _resolve(args)
    lam = args.lam if args.lam is not None else cfg.data.lam
    inputs: list[Path] = []
    for item in args.inputs:
        path = Path(item)
        if path.is_dir():
            inputs += sorted(q for q in path.rglob("*.png") if not q.stem.endswith(("_H", "_E")))
        elif path.exists():
            inputs.append(path)
        else:
            raise UsageError(f"no such input {path}")
    rows = []
    for path in inputs:
        triplet, model = separate(load_png(path), lam=lam, seed=cfg.seed)
        hp, ep = stain_paths(path)
        save_png(hp, triplet.h_channel)
        save_png(ep, triplet.e_channel)
        rows.append([str(path), *(repr(float(v)) for v in model.W.T.ravel()),
                     model.n_iter, repr(model.objective[-1] if model.objective else float("nan"))])
    if args.out:
        out = _out(args)
        with open(out / "stains.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["path", "h_r", "h_g", "h_b", "e_r", "e_g", "e_b", "iterations", "objective"])
            w.writerows(rows)
        config_mod.write(cfg, out / "config.ini")
    print(f"separated {len(rows)} images")


def cmd_maskplan(args) -> None:
    cfg = _resolve(args)
    try:
        alphas = tuple(float(a) for a in args.alphas.split(","))
    except ValueError as exc:
        raise UsageError(f"bad --alphas {args.alphas!r}") from exc
    if len(alphas) != 3 or min(alphas) <= 0:
        raise UsageError("--alphas needs three positive values")
    if args.budget < 0 or args.budget > args.grid ** 2 or args.trials < 1:
        raise UsageError("need 0 <= budget <= grid^2 and trials >= 1")
    stats = plan_statistics(alphas, args.budget, args.grid, args.trials, cfg.seed, args.strategy)
    out = _out(args)
    lines = [f"{k} = {v}" for k, v in stats.items()]
    for mod, frac in zip(("rgb", "h", "e"), stats["mean_fraction"]):
        lines.append(f"mean_fraction_{mod} = {frac:.6f}")
    (out / "maskplan_stats.txt").write_text("\n".join(lines) + "\n")
    config_mod.write(cfg, out / "config.ini")
    print("\n".join(lines[-3:]))


def cmd_pretrain(args) -> None:
    extra = _with_data(args)
    if args.mmae:
        extra += ["encoder.modalities=3", "decoder.has_cross_attention=true"]
    state = None
    start = 0
    losses: list[float] = []
    params = None
    if args.resume:
        params, state, snap, _ = load_checkpoint(args.resume)
        cfg = _resolve(args, extra, base=snap.get("ini"))
        start = int(snap.get("epochs_done", 0))
        losses = list(snap.get("epoch_losses", []))
    else:
        cfg = _resolve(args, extra)
    enc, dec, pcfg = cfg.encoder, cfg.decoder, cfg.pretrain
    if enc.modalities == 3 and not dec.has_cross_attention:
        raise ConfigError("MMAE pretraining (encoder.modalities=3) needs decoder.has_cross_attention=true")
    if params is not None:
        expected = init_params(enc, dec, seed=0)
        bad = {k for k in expected if k not in params or params[k].shape != expected[k].shape}
        if bad:
            raise ConfigError(f"checkpoint does not match the model config ({len(bad)} tensors differ)")
    out = _out(args)
    config_mod.write(cfg, out / "config.ini")
    train, _ = _datasets(cfg)

    def on_epoch(done, p, st, ep_losses):
        snap = {**_snapshot(cfg), "epochs_done": done, "epoch_losses": ep_losses}
        if args.save_every and done % args.save_every == 0:
            save_checkpoint(out / f"epoch_{done:04d}.ckpt", p, st, snap, cfg.seed)
        _write_losses(out / "loss.csv", ep_losses)

    res = pretrain(train, enc, dec, pcfg, params, state, start, losses, on_epoch=on_epoch)
    snap = {**_snapshot(cfg), "epochs_done": res.epochs_done, "epoch_losses": res.epoch_losses}
    save_checkpoint(out / "final.ckpt", res.params, res.state, snap, cfg.seed)
    _write_losses(out / "loss.csv", res.epoch_losses)
    print(f"pretrained {res.epochs_done} epochs, final loss {res.epoch_losses[-1]:.6f}")


def _write_losses(path: Path, losses: list[float]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "loss"])
        w.writerows([i + 1, repr(float(v))] for i, v in enumerate(losses))


def cmd_finetune(args) -> None:
    extra = _with_data(args)
    if args.n_labeled is not None:
        extra.append(f"data.n_labeled={args.n_labeled}")
    if args.ckpt:
        params, cfg = _from_checkpoint(args, extra)
    else:
        cfg = _resolve(args, extra)
        params = init_params(cfg.encoder, seed=cfg.seed)
    out = _out(args)
    config_mod.write(cfg, out / "config.ini")
    train, test = _datasets(cfg)
    X, y = labeled_subset(train, cfg.data.n_labeled, cfg.seed)
    report = finetune(params, cfg.encoder, X, y, test.stack("rgb"), test.labels, cfg.finetune,
                      len(train.class_names))
    report.write_csv(out / "finetune.csv")
    print(f"fine-tune accuracy {report.accuracy:.4f} over {len(report.fold_accuracies)} folds")


def cmd_knn(args) -> None:
    extra = _with_data(args)
    if args.k is not None:
        extra.append(f"data.k={args.k}")
    params, cfg = _from_checkpoint(args, extra)
    out = _out(args)
    config_mod.write(cfg, out / "config.ini")
    train, test = _datasets(cfg)
    report = knn_eval(params, cfg.encoder, train.stack("rgb"), train.labels, test.stack("rgb"),
                      test.labels, cfg.data.k)
    report.write_csv(out / "knn.csv")
    print(f"kNN (k={cfg.data.k}) accuracy {report.accuracy:.4f}")


def cmd_attnmap(args) -> None:
    params, cfg = _from_checkpoint(args)
    out = _out(args)
    config_mod.write(cfg, out / "config.ini")
    size = cfg.encoder.image_size
    layer = cfg.encoder.depth - 1 if args.layer is None else args.layer
    for item in args.images:
        path = Path(item)
        image = load_png(path)
        if image.shape[:2] != (size, size):
            raise UsageError(f"{path} is {image.shape[1]}x{image.shape[0]}, model expects {size}x{size}")
        maps = attention_maps(image, params, cfg.encoder, layer, args.threshold)
        for h, img in enumerate(attention_map_images(maps)):
            save_png(out / f"{path.stem}_L{layer}H{h}.png", img)
    print(f"wrote attention maps for {len(args.images)} images")


def cmd_embed(args) -> None:
    params, cfg = _from_checkpoint(args, _with_data(args))
    out = _out(args)
    config_mod.write(cfg, out / "config.ini")
    train, test = _datasets(cfg)
    rows = []
    for ds in (train, test):
        emb = embed_images(params, cfg.encoder, ds.stack("rgb"))
        for i, (vec, label) in enumerate(zip(emb, ds.labels)):
            rows.append([ds.split, i, int(label), *map(repr, vec.tolist())])
    with open(out / "embeddings.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["split", "index", "label"] + [f"z{j}" for j in range(cfg.encoder.embed_dim)])
        w.writerows(rows)
    print(f"wrote {len(rows)} embeddings")


# -- parser -------------------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mmae", description="Stain-aware masked autoencoder toolkit")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic H&E-like dataset")
    _common(p)
    p.add_argument("--classes", type=int)
    p.add_argument("--size", type=int)
    p.add_argument("--count", type=int)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("stainsep", help="write _H/_E stain channels beside each input PNG")
    _common(p, out_required=False)
    p.add_argument("inputs", nargs="+", help="PNG files or directories")
    p.add_argument("--lam", type=float)
    p.set_defaults(func=cmd_stainsep)

    p = sub.add_parser("maskplan", help="Monte-Carlo statistics of MMAE mask plans")
    _common(p)
    p.add_argument("--alphas", default="8,1,1")
    p.add_argument("--budget", type=int, required=True)
    p.add_argument("--grid", type=int, required=True, help="grid side (positions = grid^2)")
    p.add_argument("--trials", type=int, default=10000)
    p.add_argument("--strategy", default="mask_one", choices=["mask_one", "mask_all"])
    p.set_defaults(func=cmd_maskplan)

    p = sub.add_parser("pretrain", help="MAE / MMAE pretraining")
    _common(p)
    p.add_argument("--data", help="dataset directory (default: regenerate from [synth])")
    p.add_argument("--mmae", action="store_true", help="pretrain on RGB+H+E with cross-attention")
    p.add_argument("--resume", help="checkpoint to resume from")
    p.add_argument("--save-every", type=int, default=1, help="epoch checkpoint interval (0 disables)")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", help="k-fold fine-tuning on a labeled subset")
    _common(p)
    p.add_argument("--ckpt", help="pretrained checkpoint (omit for random initialisation)")
    p.add_argument("--data")
    p.add_argument("--n-labeled", type=int)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("knn", help="kNN evaluation on global-token embeddings")
    _common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data")
    p.add_argument("--k", type=int)
    p.set_defaults(func=cmd_knn)

    p = sub.add_parser("attnmap", help="per-head global-token attention maps as PNG")
    _common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--layer", type=int, help="encoder block (default: last)")
    p.add_argument("--threshold", type=float)
    p.add_argument("images", nargs="+")
    p.set_defaults(func=cmd_attnmap)

    p = sub.add_parser("embed", help="dump global-token embeddings as CSV")
    _common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data")
    p.set_defaults(func=cmd_embed)
    return ap


def run(argv: list[str] | None = None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (ConfigError, UsageError, StratificationError) as exc:
        print(f"mmae {args.command}: config error: {exc}", file=sys.stderr)
        return 2
    except CheckpointError as exc:
        print(f"mmae {args.command}: checkpoint error: {exc}", file=sys.stderr)
        return 1
    except (NumericalFault, DegenerateInputError) as exc:
        print(f"mmae {args.command}: numerical fault: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError, IndexError) as exc:
        print(f"mmae {args.command}: runtime error: {exc}", file=sys.stderr)
        return 1
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
