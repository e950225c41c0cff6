"""Command-line entry point: ``awnet <command> [options]``.

Commands: prepare-data, train, infer, evaluate, ablate, significance.
Every command writes its artifacts under ``--run-dir`` and snapshots the
resolved configuration there.
"""
import argparse
import csv
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np
import yaml
from PIL import Image

from . import __version__
from .checkpoint import CheckpointError, load_checkpoint
from .config import SMOKE_OVERRIDES, deep_merge, load_config
from .data import (
    DATASET_IDS,
    PREPROCESS_VERSION,
    DataIngestionError,
    DataValidationError,
    canonical_name,
    dataset_dir,
    load_dataset,
    pad_to_grid,
    patch_origins,
    preprocess_dataset,
)
from .evaluate import (
    ABLATION_ROWS,
    MetricError,
    ablation_key,
    ablation_report,
    evaluate_maps,
    paired_t_test,
)
from .infer import binarize, predict_image
from .train import train

log = logging.getLogger("awnet")


class CLIError(RuntimeError):
    pass


# --------------------------------------------------------------------------
# config plumbing
# --------------------------------------------------------------------------


def _overrides(args):
    o = {}
    if getattr(args, "smoke", False):
        o = deep_merge(o, SMOKE_OVERRIDES)
    if getattr(args, "data_root", None):
        o["data_root"] = args.data_root
    if getattr(args, "dataset", None):
        o["dataset"] = canonical_name(args.dataset)
        o.setdefault("train", {})["dataset"] = o["dataset"]
    if getattr(args, "seed", None) is not None:
        o.setdefault("train", {})["seed"] = args.seed
        o.setdefault("augment", {})["seed"] = args.seed
    if getattr(args, "epochs", None) is not None:
        o.setdefault("train", {})["epochs_total"] = args.epochs
    if getattr(args, "stride", None) is not None:
        o["stride"] = args.stride
    if getattr(args, "threshold", None) is not None:
        o["thresholds"] = [args.threshold]
    if getattr(args, "ab_type", None) is not None:
        o.setdefault("model", {})["attention_type"] = {"none": "none", "1": "type1", "2": "type2"}[args.ab_type]
    if getattr(args, "no_augment", False):
        o.setdefault("train", {})["augmentation"] = False
    if getattr(args, "resblock", None) is not None:
        o.setdefault("model", {})["resblock"] = args.resblock
    return o


def resolve_config(args):
    return load_config(getattr(args, "config", None), _overrides(args))


def _ids(cfg, split):
    ids = DATASET_IDS[(canonical_name(cfg.dataset), split)]
    n = cfg.n_train_images if split == "train" else cfg.n_test_images
    return ids if n is None else ids[:n]


def _load(cfg, split):
    return load_dataset(cfg.data_root, cfg.dataset, split, ids=_ids(cfg, split))


def _run_dir(args):
    d = Path(args.run_dir)
    d.mkdir(parents=True, exist_ok=True)
    return d


# --------------------------------------------------------------------------
# prepare-data
# --------------------------------------------------------------------------


def _source_digest(cfg):
    base = dataset_dir(cfg.data_root, cfg.dataset, "train")
    h = hashlib.sha256()
    for sub in ("images", "labels", "masks"):
        d = base / sub
        if not d.is_dir():
            continue
        for p in sorted(d.iterdir()):
            if p.stem in _ids(cfg, "train"):
                h.update(f"{sub}/{p.name}".encode())
                h.update(p.read_bytes())
    return h.hexdigest()


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def cmd_prepare_data(args):
    cfg = resolve_config(args)
    out = _run_dir(args)
    name = canonical_name(cfg.dataset)
    archive = out / f"patches_{name.lower()}.npz"
    manifest_path = out / f"patches_{name.lower()}.manifest.json"
    stride, size = cfg.train.train_stride, cfg.train.patch_size
    key = {
        "dataset": name,
        "ids": _ids(cfg, "train"),
        "patch_size": size,
        "stride": stride,
        "pad_mode": "reflect",
        "seed": cfg.train.seed,
        "preprocess_version": hashlib.sha256(PREPROCESS_VERSION.encode()).hexdigest()[:16],
        "source_digest": _source_digest(cfg),
    }
    if manifest_path.exists() and archive.exists():
        manifest = json.loads(manifest_path.read_text())
        if {k: manifest.get(k) for k in key} == key:
            if manifest.get("archive_sha256") == _sha256(archive):
                log.info("cache hit: %s", archive)
                print(f"cache hit: {archive}")
                return 0
            log.warning("patch archive %s failed its integrity check; rebuilding", archive)
    samples = _load(cfg, "train")
    images, stats = preprocess_dataset(samples)
    arrays = {}
    counts = {}
    for s, img in zip(samples, images):
        padded = pad_to_grid(img[None], size, stride)[0]
        org = patch_origins(padded.shape[0], padded.shape[1], size, stride)
        arrays[f"{s.id}/image"] = padded
        arrays[f"{s.id}/label"] = pad_to_grid(s.vessel_mask[None], size, stride)[0]
        arrays[f"{s.id}/fov"] = pad_to_grid(s.fov_mask[None], size, stride)[0]
        arrays[f"{s.id}/origins"] = org
        counts[s.id] = int(len(org))
    np.savez_compressed(archive, **arrays)
    manifest = dict(key)
    manifest.update({
        "format": "awnet-patch-archive/1",
        "sources": [s.id for s in samples],
        "patch_counts": counts,
        "preprocess_stats": list(stats),
        "archive": archive.name,
        "archive_sha256": _sha256(archive),
    })
    manifest_path.write_text(json.dumps(manifest, indent=2))
    print(f"wrote {archive} ({sum(counts.values())} patches from {len(samples)} images)")
    return 0


# --------------------------------------------------------------------------
# train / infer / evaluate
# --------------------------------------------------------------------------


def _train_into(cfg, run_dir):
    samples = _load(cfg, "train")
    cfg.dump(run_dir / "experiment.yaml")

    def progress(rec):
        print(f"epoch {rec.epoch + 1}/{cfg.train.epochs_total}  train {rec.train_loss:.5f}  "
              f"val {rec.val_loss:.5f}  lr {rec.lr:g}  ({rec.wall_time:.1f}s)", flush=True)

    ckpt, history = train(cfg.model, cfg.train, samples, run_dir, cfg.augment,
                          snapshot=cfg.to_dict(), progress=progress)
    return ckpt, history


def cmd_train(args):
    cfg = resolve_config(args)
    run_dir = _run_dir(args)
    ckpt, history = _train_into(cfg, run_dir)
    print(f"best checkpoint {ckpt} (epoch {history.best_epoch + 1}), history in {run_dir / 'history.jsonl'}")
    return 0


def _save_prob_png(path, values):
    Image.fromarray(np.round(np.clip(values, 0, 1) * 65535).astype(np.uint16)).save(path)


def _load_prob_png(path):
    return np.asarray(Image.open(path)).astype(np.float64) / 65535.0


def _infer_into(cfg, checkpoint, out_dir):
    model, payload = load_checkpoint(checkpoint)
    stats = payload.get("extra", {}).get("preprocess_stats")
    samples = _load(cfg, "test")
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    threshold = cfg.thresholds[0]
    for s in samples:
        pm = predict_image(model, s, stride=cfg.stride, batch_size=cfg.infer_batch_size, stats=stats)
        _save_prob_png(out_dir / f"{s.id}_prob.png", pm.values)
        Image.fromarray(binarize(pm, threshold).astype(bool)).convert("1").save(out_dir / f"{s.id}_mask.png")
        entries.append({"id": s.id, "prob": f"{s.id}_prob.png", "mask": f"{s.id}_mask.png"})
        print(f"predicted {s.id}", flush=True)
    manifest = {"checkpoint": str(checkpoint), "stride": cfg.stride, "threshold": threshold,
                "prob_encoding": "uint16 PNG, value/65535", "images": entries}
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return out_dir


def cmd_infer(args):
    cfg = resolve_config(args)
    run_dir = _run_dir(args)
    ckpt = Path(args.checkpoint) if args.checkpoint else run_dir / "best.pt"
    out = _infer_into(cfg, ckpt, Path(args.out) if args.out else run_dir / "predictions")
    print(f"predictions in {out}")
    return 0


def _evaluate_dir(cfg, pred_dir, out_dir, plot=False):
    samples = _load(cfg, "test")
    probs = []
    for s in samples:
        p = pred_dir / f"{s.id}_prob.png"
        if not p.exists():
            raise CLIError(f"missing prediction for image id {s.id}: {p}")
        probs.append(_load_prob_png(p))
    reports = {}
    for thr in cfg.thresholds:
        reports[thr] = evaluate_maps(probs, [s.vessel_mask for s in samples], [s.fov_mask for s in samples],
                                     [s.id for s in samples], threshold=thr, roc_bins=cfg.roc_bins)
    main = reports[cfg.thresholds[0]]
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "eval.json").write_text(json.dumps(
        {"thresholds": {str(t): r.summary() for t, r in reports.items()}}, indent=2))
    (out_dir / "eval.txt").write_text("\n\n".join(f"threshold {t}\n{r.table()}" for t, r in reports.items()) + "\n")
    fpr, tpr = main.roc
    with open(out_dir / "roc.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["fpr", "tpr"])
        w.writerows(zip(fpr.tolist(), tpr.tolist()))
    if plot:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        fig, ax = plt.subplots(figsize=(4, 4))
        ax.plot(fpr, tpr, label=f"AUC {main.auc:.4f}")
        ax.plot([0, 1], [0, 1], "k:", lw=0.8)
        ax.set_xlabel("false positive rate")
        ax.set_ylabel("true positive rate")
        ax.legend(loc="lower right")
        fig.tight_layout()
        fig.savefig(out_dir / "roc.png", dpi=120)
        plt.close(fig)
    return main


def cmd_evaluate(args):
    cfg = resolve_config(args)
    run_dir = _run_dir(args)
    pred_dir = Path(args.pred_dir) if args.pred_dir else run_dir / "predictions"
    report = _evaluate_dir(cfg, pred_dir, run_dir, plot=args.plot)
    print(report.table())
    return 0


# --------------------------------------------------------------------------
# ablate / significance
# --------------------------------------------------------------------------


def _with_variant(cfg, resblock, aug, ab, seed=None):
    tree = cfg.to_dict()
    tree["model"]["resblock"] = resblock
    tree["model"]["attention_type"] = ab
    tree["train"]["augmentation"] = aug
    if seed is not None:
        tree["train"]["seed"] = seed
        tree["augment"]["seed"] = seed
    return load_config(None, tree)


def _full_run(cfg, run_dir, plot=False):
    run_dir.mkdir(parents=True, exist_ok=True)
    ckpt, _ = _train_into(cfg, run_dir)
    _infer_into(cfg, ckpt, run_dir / "predictions")
    return _evaluate_dir(cfg, run_dir / "predictions", run_dir, plot=plot)


def cmd_ablate(args):
    cfg = resolve_config(args)
    root = _run_dir(args)
    results = {}
    for resblock, aug, ab in ABLATION_ROWS:
        key = ablation_key(resblock, aug, ab)
        sub = root / key.replace(",", "__").replace("=", "-")
        print(f"== {key} -> {sub}", flush=True)
        variant = _with_variant(cfg, resblock, aug, ab)
        if args.train_only:
            sub.mkdir(parents=True, exist_ok=True)
            _train_into(variant, sub)
            continue
        report = _full_run(variant, sub)
        results[key] = {"f1": report.f1, "auc": report.auc, "run_dir": str(sub)}
    table = ablation_report(results)
    (root / "ablation.json").write_text(json.dumps(table["rows"], indent=2))
    (root / "ablation.txt").write_text(table["text"] + "\n")
    print(table["text"])
    return 0


def _read_values(path):
    """Paired samples from JSON ({"a": {"f1": [...], ...}, "b": {...}}) or CSV.

    CSV columns are named ``a_<metric>`` and ``b_<metric>``.
    """
    path = Path(path)
    if path.suffix.lower() == ".csv":
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        data = {"a": {}, "b": {}}
        for col in rows[0]:
            side, _, metric = col.partition("_")
            data[side][metric] = [float(r[col]) for r in rows]
        return data
    return json.loads(path.read_text())


def cmd_significance(args):
    cfg = resolve_config(args)
    out = _run_dir(args)
    if args.values:
        data = _read_values(args.values)
    else:
        data = {"a": {"f1": [], "auc": []}, "b": {"f1": [], "auc": []}}
        for seed in cfg.seeds:
            for side, (resblock, aug, ab) in (("a", ABLATION_ROWS[0]), ("b", ABLATION_ROWS[-1])):
                sub = out / f"{side}_seed{seed}"
                report = _full_run(_with_variant(cfg, resblock, aug, ab, seed), sub)
                data[side]["f1"].append(report.f1)
                data[side]["auc"].append(report.auc)
        (out / "values.json").write_text(json.dumps(data, indent=2))
    results = {}
    lines = []
    for metric in sorted(set(data["a"]) & set(data["b"])):
        r = paired_t_test(data["a"][metric], data["b"][metric], alpha=args.alpha)
        results[metric] = r.__dict__
        lines.append(f"{metric:<5} t={r.t_statistic:.4f} dof={r.degrees_of_freedom} "
                     f"p={r.p_value:.3e} reject@{r.alpha:g}={r.reject}")
    (out / "significance.json").write_text(json.dumps(results, indent=2))
    print("\n".join(lines))
    return 0


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="awnet", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"awnet {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="YAML experiment config")
        sp.add_argument("--run-dir", required=True, help="directory receiving all artifacts")
        sp.add_argument("--data-root", help="dataset root (contains DRIVE/ and CHASE/)")
        sp.add_argument("--dataset", type=str.lower, choices=["drive", "chase"])
        sp.add_argument("--seed", type=int)
        sp.add_argument("--stride", type=int, help="inference stride")
        sp.add_argument("--threshold", type=float)
        sp.add_argument("--ab-type", choices=["none", "1", "2"])
        sp.add_argument("--no-augment", action="store_true")
        sp.add_argument("--resblock", choices=["plain", "shared", "unshared"])
        sp.add_argument("--epochs", type=int)
        sp.add_argument("--smoke", action="store_true", help="tiny budget for a quick end-to-end check")
        return sp

    common(sub.add_parser("prepare-data", help="preprocess and cache the training patch grid")).set_defaults(
        func=cmd_prepare_data)
    common(sub.add_parser("train", help="train one model")).set_defaults(func=cmd_train)
    sp = common(sub.add_parser("infer", help="predict probability maps for the test split"))
    sp.add_argument("--checkpoint")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_infer)
    sp = common(sub.add_parser("evaluate", help="score a prediction directory"))
    sp.add_argument("--pred-dir")
    sp.add_argument("--plot", action="store_true", help="also write roc.png")
    sp.set_defaults(func=cmd_evaluate)
    sp = common(sub.add_parser("ablate", help="train/evaluate the five ablation configurations"))
    sp.add_argument("--train-only", action="store_true")
    sp.set_defaults(func=cmd_ablate)
    sp = common(sub.add_parser("significance", help="paired one-tailed t-test over seeded runs"))
    sp.add_argument("--values", help="JSON/CSV with precomputed per-seed metrics (skips training)")
    sp.add_argument("--alpha", type=float, default=0.005)
    sp.set_defaults(func=cmd_significance)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (CLIError, DataIngestionError, DataValidationError, CheckpointError, MetricError,
            ValueError, RuntimeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
