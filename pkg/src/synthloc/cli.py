"""Command-line front end: toygen, splice, train, localize, evaluate, sweep, calibrate.

Exit codes: 0 success, 2 configuration/validation error, 3 runtime/data error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np
from PIL import Image

from . import metrics
from .augment import AugmentConfig
from .config import (REFERENCE_CORRECT_RATE, REFERENCE_TAU, ConfigError, ExperimentConfig,
                     load_config, merge_dict)
from .heatmap import threshold, visualize
from .micronet import (CheckpointError, LabeledPatches, NonFiniteError, TrainConfig,
                       TrainingDataError, patch_max_ba, save_checkpoint, train)
from .patch_grid import ImageTooSmallError, PatchSpec
from .pipeline import localize
from .raster import (BinaryMask, RasterError, read_image, read_mask, write_floatmap, write_mask)
from .scoring import ScorerConfig, ScoringError
from .splicer import (SpliceError, build_dataset, is_writable_dir, list_images, read_manifest,
                      write_toy_dataset)

log = logging.getLogger("synthloc")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3
RUNTIME_ERRORS = (RasterError, ScoringError, metrics.MetricError, SpliceError, TrainingDataError,
                  CheckpointError, NonFiniteError, ImageTooSmallError, OSError)


# ---------------------------------------------------------------- helpers


def _resolve(args) -> ExperimentConfig:
    """defaults < --config file < explicit flags."""
    cfg = ExperimentConfig()
    if getattr(args, "config", None):
        merge_dict(cfg, load_config(args.config))
    for flag, attr in (("seed", "seed"), ("workers", "workers"), ("patch_size", "patch_size"),
                       ("stride", "stride"), ("out", "output"), ("tau", "tau"),
                       ("patch_side", "splice_side")):
        val = getattr(args, flag, None)
        if val is not None:
            setattr(cfg, attr, val)
    scorer = getattr(args, "scorer", None)
    if scorer is not None:
        cfg.scorer = {"kind": scorer}
    for flag in ("checkpoint", "command", "workdir"):
        val = getattr(args, flag, None)
        if val is not None:
            cfg.scorer[flag] = val
    if cfg.workers < 1:
        raise ConfigError("workers must be >= 1")
    if cfg.tau is not None and not 0.0 <= cfg.tau <= 1.0:
        raise ConfigError("tau must lie in [0, 1]")
    return cfg


def _need_dir(path, what: str) -> Path:
    if path is None:
        raise ConfigError(f"missing {what}")
    p = Path(path)
    if not p.is_dir():
        raise ConfigError(f"{what} not found: {p}")
    return p


def _need_out(cfg: ExperimentConfig) -> Path:
    if not cfg.output:
        raise ConfigError("missing output directory (--out)")
    if not is_writable_dir(cfg.output):
        raise ConfigError(f"output directory is not writable: {cfg.output}")
    return Path(cfg.output)


def _patch_spec(cfg: ExperimentConfig, patch_size=None, stride=None) -> PatchSpec:
    try:
        return PatchSpec(patch_size or cfg.patch_size, stride or cfg.stride)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _validate_scorer(cfg: ExperimentConfig) -> None:
    kind = cfg.scorer.get("kind")
    if kind == "oracle":
        return
    if kind == "micronet":
        ckpt = cfg.scorer.get("checkpoint")
        if not ckpt:
            raise ConfigError("micronet scorer needs --checkpoint")
        if "{P}" not in ckpt and not Path(ckpt).is_file():
            raise ConfigError(f"checkpoint not found: {ckpt}")
        return
    if kind == "external":
        if not cfg.scorer.get("command"):
            raise ConfigError("external scorer needs --command")
        return
    raise ConfigError(f"unknown scorer kind {kind!r}")


def _scorer_for(cfg: ExperimentConfig, mask: BinaryMask | None, patch_size: int) -> ScorerConfig:
    kind = cfg.scorer["kind"]
    if kind == "oracle":
        if mask is None:
            raise ConfigError("oracle scorer needs a ground-truth mask")
        return ScorerConfig("oracle", mask=mask)
    if kind == "micronet":
        return ScorerConfig("micronet", checkpoint=cfg.scorer["checkpoint"].replace("{P}", str(patch_size)))
    return ScorerConfig("external", command=cfg.scorer["command"], workdir=cfg.scorer.get("workdir"))


def _write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _dataset_records(dataset: Path) -> list[dict]:
    manifest_path = dataset / "manifest.json"
    if not manifest_path.is_file():
        raise ConfigError(f"dataset has no manifest.json: {dataset}")
    try:
        manifest = read_manifest(manifest_path)
    except (SpliceError, KeyError, TypeError, json.JSONDecodeError) as exc:
        raise ConfigError(f"invalid manifest {manifest_path}: {exc}") from exc
    if not manifest.records:
        raise ConfigError(f"dataset is empty: {dataset}")
    rows = []
    for rec in manifest.records:
        img = dataset / "images" / f"{rec.output_id}.png"
        msk = dataset / "masks" / f"{rec.output_id}.png"
        if not img.is_file() or not msk.is_file():
            raise ConfigError(f"dataset entry {rec.output_id} is missing its image or mask")
        rows.append({"id": rec.output_id, "image": img, "mask": msk, "group": rec.group})
    return rows


def _localize_rows(rows, cfg: ExperimentConfig, spec: PatchSpec, workers: int):
    """Heatmaps and masks for every dataset row, in row order."""
    def run(row):
        img = read_image(row["image"])
        mask = read_mask(row["mask"]) if row.get("mask") else BinaryMask(np.zeros((img.height, img.width), np.uint8))
        heat = localize(img, spec, _scorer_for(cfg, mask, spec.patch_size))
        return heat, mask

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(run, rows))
    return [run(r) for r in rows]


def _evaluate(rows, cfg, spec, workers):
    pairs = _localize_rows(rows, cfg, spec, workers)
    per_image = [metrics.evaluate_pair(h, m, r["group"]) for (h, m), r in zip(pairs, rows)]
    groups, overall = metrics.aggregate(per_image)
    return pairs, per_image, groups, overall


def _table(title_col: str, rows: list[tuple[str, int, float, float]]) -> str:
    lines = [f"{title_col:<16} {'Images':>7} {'AUC':>7} {'Max BA':>8}",
             "-" * 41]
    for label, n, auc, ba in rows:
        lines.append(f"{label:<16} {n:>7d} {auc:>7.3f} {100 * ba:>7.1f}%")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------- commands


def cmd_toygen(args) -> int:
    cfg = _resolve(args)
    if args.n < 1:
        raise ConfigError("--n must be >= 1")
    if args.size < 4 or args.size % 4:
        raise ConfigError("--size must be a positive multiple of 4")
    out = _need_out(cfg)
    write_toy_dataset(args.n, cfg.seed, out, size=args.size)
    _write_json(out / "toygen.json", {"n": args.n, "seed": cfg.seed, "size": args.size})
    log.info("wrote %d toy pairs to %s", args.n, out)
    return EXIT_OK


def _parse_donors(specs: list[str]) -> dict[str, str]:
    donors = {}
    for spec in specs:
        tag, sep, path = spec.partition("=")
        if not sep:
            path, tag = spec, Path(spec.rstrip("/")).name
        if tag in donors:
            raise ConfigError(f"duplicate donor group tag {tag!r}")
        donors[tag] = path
    return donors


def cmd_splice(args) -> int:
    cfg = _resolve(args)
    hosts = _need_dir(args.hosts or cfg.paths.get("hosts"), "host directory")
    donor_specs = args.donors or [f"{k}={v}" for k, v in sorted(cfg.paths.get("donors", {}).items())]
    if not donor_specs:
        raise ConfigError("missing donor directories (--donors)")
    donors = _parse_donors(donor_specs)
    for tag, d in donors.items():
        _need_dir(d, f"donor directory for group {tag!r}")
        if not list_images(d):
            raise ConfigError(f"donor directory for group {tag!r} has no images: {d}")
    if not list_images(hosts):
        raise ConfigError(f"host directory has no images: {hosts}")
    if args.n < 1 or args.n % len(donors):
        raise ConfigError(f"--n {args.n} must be a positive multiple of {len(donors)} donor groups")
    if cfg.splice_side < 1:
        raise ConfigError("--patch-side must be positive")
    out = _need_out(cfg)
    cfg.paths.update({"hosts": str(hosts), "donors": donors})
    manifest = build_dataset(hosts, donors, args.n, cfg.seed, out, side=cfg.splice_side)
    cfg.dump(out / "config.json")
    log.info("wrote %d spliced images (%s) to %s", len(manifest.records),
             ", ".join(f"{g}: {c}" for g, c in sorted(manifest.group_counts.items())), out)
    return EXIT_OK


def load_patch_dataset(data_dir: Path, patch_size: int, per_image: int, seed: int) -> LabeledPatches:
    """Cut ``per_image`` aligned patches from each real/synthetic pair (matched by file name)."""
    real = {p.name: p for p in list_images(data_dir / "real")}
    synth = {p.name: p for p in list_images(data_dir / "synthetic")}
    names = sorted(set(real) & set(synth))
    if not names:
        raise TrainingDataError(f"no matching real/synthetic pairs under {data_dir}")
    xs, ys, srcs = [], [], []
    for k, name in enumerate(names):
        r, s = read_image(real[name]), read_image(synth[name])
        if (r.height, r.width) != (s.height, s.width):
            raise TrainingDataError(f"pair {name} has mismatched sizes")
        if min(r.height, r.width) < patch_size:
            raise TrainingDataError(f"pair {name} is smaller than the patch size")
        rng = np.random.default_rng(np.random.SeedSequence([seed, 3, k]))
        for _ in range(per_image):
            i = int(rng.integers(0, r.height - patch_size + 1))
            j = int(rng.integers(0, r.width - patch_size + 1))
            for label, img in ((0, r), (1, s)):
                xs.append(img.pixels[i:i + patch_size, j:j + patch_size])
                ys.append(label)
                srcs.append(Path(name).stem)
    return LabeledPatches(np.stack(xs), np.array(ys), np.array(srcs))


def cmd_train(args) -> int:
    cfg = _resolve(args)
    data_dir = _need_dir(args.data or cfg.paths.get("train_data"), "training data directory")
    for sub in ("real", "synthetic"):
        _need_dir(data_dir / sub, f"{sub}/ subdirectory of the training data")
    overrides = {k: v for k, v in (("batch_size", args.batch_size), ("learning_rate", args.lr),
                                   ("max_epochs", args.max_epochs),
                                   ("early_stop_patience", args.early_stop_patience)) if v is not None}
    try:
        cfg.train = TrainConfig.from_dict({**cfg.train.to_dict(), **overrides, "seed": cfg.seed})
        cfg.augment = AugmentConfig.from_dict({**cfg.augment.to_dict(), "seed": cfg.seed})
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    if cfg.patch_size % 4 or cfg.patch_size < 8:
        raise ConfigError("micronet patch size must be >= 8 and divisible by 4")
    if args.patches_per_image < 1:
        raise ConfigError("--patches-per-image must be >= 1")
    out = _need_out(cfg)
    cfg.paths["train_data"] = str(data_dir)

    split_path = out / "split.json"
    split = None
    if split_path.is_file():
        split = json.loads(split_path.read_text())
        log.info("re-using split listing %s", split_path)

    data = load_patch_dataset(data_dir, cfg.patch_size, args.patches_per_image, cfg.seed)
    result = train(data, cfg.train, None if args.no_augment else cfg.augment, split=split)
    out.mkdir(parents=True, exist_ok=True)
    test = data.subset(np.flatnonzero(np.isin(data.sources, result.split["test"])))
    test_report = {}
    if len(test.labels) and len(set(test.labels.tolist())) == 2:
        ba, tau = patch_max_ba(result.checkpoint.params, test)
        test_report = {"patch_max_ba": ba, "tau": tau, "n_patches": int(len(test.labels))}
        log.info("held-out patch max BA %.4f", ba)
    result.checkpoint.summary["test"] = test_report
    result.checkpoint.summary["augment"] = None if args.no_augment else cfg.augment.to_dict()
    save_checkpoint(result.checkpoint, out / "model.mnet")
    _write_json(out / "history.json", {"epochs": result.history, "best_epoch": result.best_epoch,
                                       "stopped_early": result.stopped_early, "test": test_report})
    if split is None:
        _write_json(split_path, result.split)
    cfg.scorer = {"kind": "micronet", "checkpoint": str(out / "model.mnet")}
    cfg.dump(out / "config.json")
    return EXIT_OK


def cmd_localize(args) -> int:
    cfg = _resolve(args)
    image_path = Path(args.image)
    if not image_path.is_file():
        raise ConfigError(f"image not found: {image_path}")
    _validate_scorer(cfg)
    if cfg.scorer["kind"] == "oracle" and not args.mask:
        raise ConfigError("oracle scorer needs --mask")
    if args.mask and not Path(args.mask).is_file():
        raise ConfigError(f"mask not found: {args.mask}")
    spec = _patch_spec(cfg)
    out = _need_out(cfg)

    img = read_image(image_path)
    mask = read_mask(args.mask) if args.mask else None
    heat = localize(img, spec, _scorer_for(cfg, mask, spec.patch_size), workers=cfg.workers)
    out.mkdir(parents=True, exist_ok=True)
    stem = image_path.stem
    write_floatmap(heat, out / f"{stem}.hmap")
    Image.fromarray(visualize(heat)).save(out / f"{stem}_heatmap.png", format="PNG")
    if cfg.tau is not None:
        write_mask(threshold(heat, cfg.tau), out / f"{stem}_mask.png")
    cfg.dump(out / "config.json")
    return EXIT_OK


def _report(rows, per_image, groups, overall) -> dict:
    return {
        "images": [{"id": r["id"], **res.to_dict()} for r, res in zip(rows, per_image)],
        "groups": {g: res.to_dict() for g, res in groups.items()},
        "overall": overall.to_dict(),
    }


def cmd_evaluate(args) -> int:
    cfg = _resolve(args)
    dataset = _need_dir(args.dataset or cfg.paths.get("dataset"), "dataset directory")
    rows = _dataset_records(dataset)
    _validate_scorer(cfg)
    spec = _patch_spec(cfg)
    out = _need_out(cfg)
    cfg.paths["dataset"] = str(dataset)

    _, per_image, groups, overall = _evaluate(rows, cfg, spec, cfg.workers)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "report.json", _report(rows, per_image, groups, overall))
    table = [(g, r.n_images, r.auc, r.max_ba) for g, r in groups.items()]
    table.append(("overall", overall.n_images, overall.auc, overall.max_ba))
    (out / "report.txt").write_text(
        f"P = {spec.patch_size}, S = {spec.stride}, scorer = {cfg.scorer['kind']}\n"
        + _table("Group", table))
    cfg.dump(out / "config.json")
    log.info("overall AUC %.4f, max BA %.4f", overall.auc, overall.max_ba)
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = _resolve(args)
    dataset = _need_dir(args.dataset or cfg.paths.get("dataset"), "dataset directory")
    rows = _dataset_records(dataset)
    _validate_scorer(cfg)
    first = read_image(rows[0]["image"])
    side = min(first.height, first.width)
    specs = []
    for v in args.values:
        if args.axis == "patch_size":
            if v > side:
                raise ConfigError(f"patch size {v} exceeds the image side {side}")
            specs.append(_patch_spec(cfg, patch_size=v, stride=min(cfg.stride, v)))
        else:
            specs.append(_patch_spec(cfg, stride=v))
    out = _need_out(cfg)
    cfg.paths["dataset"] = str(dataset)

    results = []
    for v, spec in zip(args.values, specs):
        _, per_image, groups, overall = _evaluate(rows, cfg, spec, cfg.workers)
        results.append({"value": v, "patch_size": spec.patch_size, "stride": spec.stride,
                        "overall": overall.to_dict(),
                        "groups": {g: r.to_dict() for g, r in groups.items()}})
        log.info("%s=%d: AUC %.4f, max BA %.4f", args.axis, v, overall.auc, overall.max_ba)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "sweep.json", {"axis": args.axis, "results": results})
    label = "Stride S x S" if args.axis == "stride" else "Patch P x P"
    table = [(f"{r['value']} x {r['value']}", r["overall"]["n_images"], r["overall"]["auc"],
              r["overall"]["max_ba"]) for r in results]
    (out / "sweep.txt").write_text(_table(label, table))
    cfg.dump(out / "config.json")
    return EXIT_OK


def cmd_calibrate(args) -> int:
    cfg = _resolve(args)
    dataset = _need_dir(args.dataset or cfg.paths.get("dataset"), "dataset directory")
    rows = _dataset_records(dataset)
    pristine_dir = _need_dir(args.pristine or cfg.paths.get("pristine"), "pristine image directory")
    pristine = list_images(pristine_dir)
    if not pristine:
        raise ConfigError(f"pristine directory has no images: {pristine_dir}")
    _validate_scorer(cfg)
    spec = _patch_spec(cfg)
    out = _need_out(cfg)
    cfg.paths.update({"dataset": str(dataset), "pristine": str(pristine_dir)})

    pairs = _localize_rows(rows, cfg, spec, cfg.workers)
    pooled_ba, tau_star = metrics.pooled_max_ba(pairs)
    prows = [{"id": p.stem, "image": p, "mask": None, "group": "pristine"} for p in pristine]
    heats = [h for h, _ in _localize_rows(prows, cfg, spec, cfg.workers)]
    rate = metrics.correct_detection_rate(heats, tau_star)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "calibration.json", {
        "tau_star": tau_star,
        "pooled_max_ba": pooled_ba,
        "n_tampered": len(rows),
        "n_pristine": len(pristine),
        "correct_detection_rate": rate,
        "false_alarm_rate": 1.0 - rate,
        "reference": {"tau": REFERENCE_TAU, "correct_detection_rate": REFERENCE_CORRECT_RATE,
                      "note": "reported for the original detector on real blots; not comparable"},
    })
    _write_json(out / "tau.json", {"version": 1, "tau": tau_star})
    cfg.tau = tau_star
    cfg.dump(out / "config.json")
    log.info("tau* = %.6f, correct detection rate %.4f on %d pristine images",
             tau_star, rate, len(pristine))
    return EXIT_OK


# ---------------------------------------------------------------- parser


def _add_common(p: argparse.ArgumentParser, scorer: bool = False, patches: bool = False) -> None:
    p.add_argument("--config", help="JSON experiment config (flags override it)")
    p.add_argument("--seed", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--out", help="output directory")
    if patches:
        p.add_argument("--patch-size", dest="patch_size", type=int)
        p.add_argument("--stride", type=int)
    if scorer:
        p.add_argument("--scorer", choices=("oracle", "micronet", "external"))
        p.add_argument("--checkpoint", help="MNET v1 checkpoint ({P} expands to the patch size)")
        p.add_argument("--command", help="external scorer command with {in}/{out} placeholders")
        p.add_argument("--workdir", help="working directory for the external scorer")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="synthloc", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command_name", required=True)

    p = sub.add_parser("toygen", help="generate real-like / synthetic-like toy blot pairs")
    _add_common(p)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--size", type=int, default=256)
    p.set_defaults(func=cmd_toygen)

    p = sub.add_parser("splice", help="build an automatically spliced dataset")
    _add_common(p)
    p.add_argument("--hosts")
    p.add_argument("--donors", nargs="+", help="donor dirs, optionally TAG=DIR")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--patch-side", dest="patch_side", type=int)
    p.set_defaults(func=cmd_splice)

    p = sub.add_parser("train", help="train the micro-net patch detector")
    _add_common(p, patches=True)
    p.add_argument("--data", help="directory with real/ and synthetic/ images")
    p.add_argument("--patches-per-image", dest="patches_per_image", type=int, default=2)
    p.add_argument("--no-augment", dest="no_augment", action="store_true")
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--max-epochs", dest="max_epochs", type=int)
    p.add_argument("--early-stop-patience", dest="early_stop_patience", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("localize", help="estimate the tampering heatmap of one image")
    _add_common(p, scorer=True, patches=True)
    p.add_argument("image")
    p.add_argument("--mask", help="ground-truth mask (oracle scorer)")
    p.add_argument("--tau", type=float, help="also write the thresholded mask")
    p.set_defaults(func=cmd_localize)

    p = sub.add_parser("evaluate", help="pixel AUC / max BA over a spliced dataset")
    _add_common(p, scorer=True, patches=True)
    p.add_argument("dataset", nargs="?")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("sweep", help="evaluate over several patch sizes or strides")
    _add_common(p, scorer=True, patches=True)
    p.add_argument("dataset", nargs="?")
    p.add_argument("--axis", choices=("patch_size", "stride"), required=True)
    p.add_argument("--values", type=int, nargs="+", required=True)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("calibrate", help="calibrate tau* and measure false alarms on pristine images")
    _add_common(p, scorer=True, patches=True)
    p.add_argument("dataset", nargs="?")
    p.add_argument("--pristine", help="directory of pristine images")
    p.set_defaults(func=cmd_calibrate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        log.error("configuration error: %s", exc)
        return EXIT_CONFIG
    except RUNTIME_ERRORS as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
