"""Command-line entry points.

Subcommands: train, eval, ablate, sweep-lambda, dump-views. All take JSON
configs and write their artifacts (CSV metrics, JSON reports, SVG plots,
PPM contact sheets, binary checkpoints) under --out, each stamped with the
config hash so results stay traceable to the exact settings that produced
them.

Exit codes: 0 on success, 1 for runtime failures (divergence, I/O during
a run), 2 for configuration and usage errors.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import os
import sys
from dataclasses import dataclass

import numpy as np

from .augment import LambdaMixPolicy, make_triplet, resize_bilinear
from .errors import ConfigError, ParseError, TrainingAborted
from .eval import (
    ProbeConfig,
    eval_datasets,
    evaluate,
    write_per_class_csv,
)
from .loss import AggregationStrategy
from .train import (
    TrainConfig,
    config_from_dict,
    config_hash,
    load_checkpoint,
    run,
)

AGGREGATION_VARIANTS = ("maximum", "average", "none")
MIXTURE_VARIANTS = ("mixture", "no_mixture")

# Reported accuracies from the original CIFAR-10 experiments, carried in
# output metadata for orientation only — nothing here asserts them.
REFERENCE_TABLE = {"maximum": 93.35, "average": 92.71, "none": 92.86,
                   "no_mixture": 90.71}
REFERENCE_LAMBDA_ZERO = 23.76


@dataclass(frozen=True)
class AblationGrid:
    base: TrainConfig
    aggregations: tuple = AGGREGATION_VARIANTS
    mixtures: tuple = MIXTURE_VARIANTS
    repeats: int = 1

    def __post_init__(self):
        if not self.aggregations:
            raise ConfigError("ablation grid needs at least one aggregation")
        bad = [a for a in self.aggregations if a not in AGGREGATION_VARIANTS]
        if bad:
            raise ConfigError(
                f"unknown aggregation variant(s) {bad}; choose from {AGGREGATION_VARIANTS}")
        if not self.mixtures:
            raise ConfigError("ablation grid needs at least one mixture variant")
        bad = [m for m in self.mixtures if m not in MIXTURE_VARIANTS]
        if bad:
            raise ConfigError(
                f"unknown mixture variant(s) {bad}; choose from {MIXTURE_VARIANTS}")
        if self.repeats < 1:
            raise ConfigError(f"repeats must be >= 1, got {self.repeats}")


@dataclass(frozen=True)
class SweepSpec:
    base: TrainConfig
    lambda_values: tuple
    repeats: int = 1

    def __post_init__(self):
        if not self.lambda_values:
            raise ConfigError("sweep needs at least one lambda value")
        for v in self.lambda_values:
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"sweep lambda {v} outside [0, 1]")
        if len(set(self.lambda_values)) != len(self.lambda_values):
            raise ConfigError("sweep lambda values must be unique")
        if tuple(sorted(self.lambda_values)) != tuple(self.lambda_values):
            raise ConfigError("sweep lambda values must be sorted ascending")
        if self.repeats < 1:
            raise ConfigError(f"repeats must be >= 1, got {self.repeats}")


def _load_json(path, what):
    if not os.path.exists(path):
        raise ConfigError(f"{what} file not found: {path}")
    with open(path) as f:
        try:
            return json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{what} file {path} is not valid JSON: {e}") from None


def _reject_unknown(payload, known, context):
    if not isinstance(payload, dict):
        raise ConfigError(f"{context}: expected a JSON object")
    unknown = set(payload) - set(known)
    if unknown:
        raise ConfigError(f"{context}: unknown field(s) {sorted(unknown)}")


def ablation_grid_from_dict(payload) -> AblationGrid:
    _reject_unknown(payload, ("base", "aggregations", "mixtures", "repeats"), "ablation grid")
    kwargs = {"base": config_from_dict(payload.get("base", {}))}
    if "aggregations" in payload:
        kwargs["aggregations"] = tuple(payload["aggregations"])
    if "mixtures" in payload:
        kwargs["mixtures"] = tuple(payload["mixtures"])
    if "repeats" in payload:
        kwargs["repeats"] = payload["repeats"]
    return AblationGrid(**kwargs)


def sweep_spec_from_dict(payload) -> SweepSpec:
    _reject_unknown(payload, ("base", "lambda_values", "repeats"), "sweep spec")
    if "lambda_values" not in payload:
        raise ConfigError("sweep spec: missing lambda_values")
    return SweepSpec(
        base=config_from_dict(payload.get("base", {})),
        lambda_values=tuple(payload["lambda_values"]),
        repeats=payload.get("repeats", 1),
    )


def derive_seed(base_seed: int, cell_id: str, repeat: int) -> int:
    """Distinct, stable seed per (base seed, grid cell, repeat)."""
    digest = hashlib.sha256(f"{base_seed}:{cell_id}:{repeat}".encode()).digest()
    return int.from_bytes(digest[:4], "little")


def _with_seed(cfg: TrainConfig, seed: int) -> TrainConfig:
    return dataclasses.replace(
        cfg, seed=seed, augment=dataclasses.replace(cfg.augment, seed=seed))


def cell_config(base: TrainConfig, aggregation: str, mixture: str, seed: int) -> TrainConfig:
    """One ablation cell: swap the aggregation rule and, for no_mixture,
    replace the mixed view with a per-sample coin flip between the two
    plain views (lambda drawn from {0, 1})."""
    cfg = dataclasses.replace(
        base,
        aggregation=AggregationStrategy(
            kind=aggregation,
            none_branch_policy=base.aggregation.none_branch_policy))
    if mixture == "no_mixture":
        cfg = dataclasses.replace(cfg, lambda_mix=LambdaMixPolicy(kind="pick_view"))
    return _with_seed(cfg, seed)


# -- artifact writers --------------------------------------------------------


def _write_json(payload: dict, path):
    with open(path, "w") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")


def write_ppm(pixels: np.ndarray, path, comment: str = ""):
    """Binary PPM (P6, maxval 255) from [H, W, 3] floats in [0, 1]."""
    if pixels.ndim != 3 or pixels.shape[2] != 3:
        raise ConfigError(f"ppm: expected [H, W, 3], got shape {pixels.shape}")
    h, w = pixels.shape[:2]
    body = np.round(np.clip(pixels, 0.0, 1.0) * 255.0).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(b"P6\n")
        if comment:
            f.write(f"# {comment}\n".encode())
        f.write(f"{w} {h}\n255\n".encode())
        f.write(body.tobytes())


def write_accuracy_svg(points, path, digest, xlabel="lambda",
                       ylabel="knn top-1", title="accuracy vs lambda"):
    """Small self-contained line plot: one marker per (x, accuracy) pair."""
    width, height = 640, 400
    ml, mr, mt, mb = 70, 25, 45, 55
    xs = [p[0] for p in points]
    lo, hi = min(xs), max(xs)
    span = (hi - lo) or 1.0

    def px(x):
        return ml + (x - lo) / span * (width - ml - mr)

    def py(acc):
        return height - mb - acc * (height - mt - mb)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" viewBox="0 0 {width} {height}" '
        f'font-family="monospace" font-size="13">',
        f"<!-- config_hash={digest} -->",
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width/2:.1f}" y="24" text-anchor="middle" font-size="16">{title}</text>',
        # axes
        f'<line x1="{ml}" y1="{py(0)}" x2="{width-mr}" y2="{py(0)}" stroke="black"/>',
        f'<line x1="{ml}" y1="{py(0)}" x2="{ml}" y2="{py(1)}" stroke="black"/>',
        f'<text x="{(ml+width-mr)/2:.1f}" y="{height-12}" text-anchor="middle">{xlabel}</text>',
        f'<text x="18" y="{(py(0)+py(1))/2:.1f}" text-anchor="middle" '
        f'transform="rotate(-90 18 {(py(0)+py(1))/2:.1f})">{ylabel}</text>',
    ]
    for frac in (0.0, 0.25, 0.5, 0.75, 1.0):
        y = py(frac)
        parts.append(f'<line x1="{ml-4}" y1="{y:.1f}" x2="{ml}" y2="{y:.1f}" stroke="black"/>')
        parts.append(f'<text x="{ml-8}" y="{y+4:.1f}" text-anchor="end">{frac:.2f}</text>')
        if frac:
            parts.append(f'<line x1="{ml}" y1="{y:.1f}" x2="{width-mr}" y2="{y:.1f}" '
                         f'stroke="lightgray" stroke-dasharray="3,4"/>')
    for x in xs:
        parts.append(f'<line x1="{px(x):.1f}" y1="{py(0)}" x2="{px(x):.1f}" '
                     f'y2="{py(0)+4}" stroke="black"/>')
        parts.append(f'<text x="{px(x):.1f}" y="{py(0)+20:.1f}" '
                     f'text-anchor="middle">{x:g}</text>')
    coords = " ".join(f"{px(x):.1f},{py(a):.1f}" for x, a in points)
    parts.append(f'<polyline points="{coords}" fill="none" stroke="steelblue" '
                 f'stroke-width="2"/>')
    for x, a in points:
        parts.append(f'<circle cx="{px(x):.1f}" cy="{py(a):.1f}" r="4" fill="steelblue">'
                     f'<title>{xlabel}={x:g}: {a:.4f}</title></circle>')
    parts.append("</svg>")
    with open(path, "w") as f:
        f.write("\n".join(parts) + "\n")


def view_strip(record, cfg: TrainConfig, epoch=0) -> np.ndarray:
    """[S, 4*S, 3] panel row for one image: original | view 1 | view 2 | mixed."""
    size = cfg.augment.output_size
    trip = make_triplet(record, cfg.augment, cfg.lambda_mix, epoch)
    original = record.pixels
    if original.shape[1:] != (size, size):
        original = resize_bilinear(original, size, size)
    tiles = [original, trip.x1, trip.x2, trip.xm]
    return np.concatenate([np.transpose(t, (1, 2, 0)) for t in tiles], axis=1)


def _stats(values):
    arr = np.asarray(values, dtype=np.float64)
    return float(arr.mean()), float(arr.std())


# -- subcommands -------------------------------------------------------------


def _prepare_out(out_dir):
    os.makedirs(out_dir, exist_ok=True)
    return out_dir


def _load_train_config(args) -> TrainConfig:
    if not args.config:
        raise ConfigError("this command requires --config PATH")
    cfg = config_from_dict(_load_json(args.config, "config"))
    if args.seed is not None:
        cfg = _with_seed(cfg, args.seed)
    if args.strict_deterministic:
        cfg = dataclasses.replace(cfg, strict_deterministic=True)
    return cfg


def _train_and_evaluate(cfg, out_dir, resume=None):
    train_ds, test_ds = eval_datasets(cfg.dataset)
    state = run(cfg, train_ds, out_dir, resume=resume)
    report = evaluate(state.params, cfg, train_ds, test_ds, ProbeConfig())
    payload = report.to_json()
    payload["config_hash"] = config_hash(cfg)
    _write_json(payload, os.path.join(out_dir, "report.json"))
    write_per_class_csv(report, os.path.join(out_dir, "per_class.csv"))
    return report


def cmd_train(args) -> int:
    cfg = _load_train_config(args)
    out = _prepare_out(args.out)
    if args.resume and not os.path.exists(args.resume):
        raise ConfigError(f"resume checkpoint not found: {args.resume}")
    report = _train_and_evaluate(cfg, out, resume=args.resume)
    print(f"train done: knn_top1={report.knn_top1:.4f} "
          f"linear_top1={report.linear_top1:.4f} "
          f"embedding_std={report.embedding_std:.4f} -> {out}")
    return 0


def cmd_eval(args) -> int:
    if not args.resume:
        raise ConfigError("eval requires --resume CHECKPOINT")
    if not os.path.exists(args.resume):
        raise ConfigError(f"checkpoint not found: {args.resume}")
    out = _prepare_out(args.out)
    state, cfg = load_checkpoint(args.resume)
    train_ds, test_ds = eval_datasets(cfg.dataset)
    report = evaluate(state.params, cfg, train_ds, test_ds, ProbeConfig())
    payload = report.to_json()
    payload["config_hash"] = config_hash(cfg)
    payload["checkpoint"] = os.path.abspath(args.resume)
    _write_json(payload, os.path.join(out, "report.json"))
    write_per_class_csv(report, os.path.join(out, "per_class.csv"))
    print(f"eval done: knn_top1={report.knn_top1:.4f} "
          f"linear_top1={report.linear_top1:.4f} -> {out}")
    return 0


def _run_cells(base, cells, out_dir, repeats):
    """Train/evaluate every (cell_id, config-builder) pair; never let one
    failed cell abort the rest. Returns {cell_id: {"knn": [...], "linear":
    [...], "errors": [...]}}."""
    results = {}
    for cell_id, make_cfg in cells:
        entry = {"knn": [], "linear": [], "errors": []}
        results[cell_id] = entry
        for rep in range(repeats):
            seed = derive_seed(base.seed, cell_id, rep)
            cfg = make_cfg(seed)
            cell_dir = os.path.join(out_dir, "cells", f"{cell_id}_rep{rep}")
            os.makedirs(cell_dir, exist_ok=True)
            try:
                report = _train_and_evaluate(cfg, cell_dir)
            except Exception as e:  # noqa: BLE001 - cell isolation is the point
                entry["errors"].append(f"rep{rep}: {e}")
                print(f"cell {cell_id} rep {rep} failed: {e}", file=sys.stderr)
                continue
            entry["knn"].append(report.knn_top1)
            entry["linear"].append(report.linear_top1)
    return results


def _validate_runnable(cfg: TrainConfig):
    """Catch systemic misconfiguration before launching a whole grid."""
    train_ds, _ = eval_datasets(cfg.dataset)
    if len(train_ds) // cfg.batch_size < 1:
        raise ConfigError(
            f"batch_size {cfg.batch_size} exceeds dataset size {len(train_ds)}")


def cmd_ablate(args) -> int:
    grid = ablation_grid_from_dict(_load_json(args.config, "ablation grid")
                                   if args.config else {})
    base = grid.base
    if args.seed is not None:
        base = _with_seed(base, args.seed)
    _validate_runnable(base)
    out = _prepare_out(args.out)
    digest = config_hash(base)

    cells = []
    for agg in grid.aggregations:
        for mixture in grid.mixtures:
            cell_id = f"{agg}-{mixture}"
            cells.append((cell_id, lambda s, a=agg, m=mixture:
                          cell_config(base, a, m, s)))
    results = _run_cells(base, cells, out, grid.repeats)

    csv_path = os.path.join(out, "ablation.csv")
    with open(csv_path, "w") as f:
        f.write(f"# config_hash={digest}\n")
        ref = " ".join(f"{k}={v}" for k, v in REFERENCE_TABLE.items())
        f.write(f"# reference top-1 % from the original CIFAR-10 experiments:"
                f" {ref} (metadata only, not asserted)\n")
        f.write("aggregation,mixture,repeats_ok,knn_mean,knn_std,"
                "linear_mean,linear_std,status\n")
        for agg in grid.aggregations:
            for mixture in grid.mixtures:
                entry = results[f"{agg}-{mixture}"]
                ok = len(entry["knn"])
                if ok:
                    km, ks = _stats(entry["knn"])
                    lm, ls = _stats(entry["linear"])
                    status = "ok" if not entry["errors"] else f"partial({ok}/{grid.repeats})"
                    f.write(f"{agg},{mixture},{ok},{km!r},{ks!r},{lm!r},{ls!r},{status}\n")
                else:
                    f.write(f"{agg},{mixture},0,,,,,failed\n")

    table_path = os.path.join(out, "ablation.txt")
    lines = [f"ablation over aggregation x mixture (knn top-1, {grid.repeats} repeat(s))",
             f"config_hash={digest}", ""]
    header = f"{'aggregation':<12} {'mixture':<12} {'knn top-1':<20} {'linear top-1':<20}"
    lines += [header, "-" * len(header)]
    for agg in grid.aggregations:
        for mixture in grid.mixtures:
            entry = results[f"{agg}-{mixture}"]
            if entry["knn"]:
                km, ks = _stats(entry["knn"])
                lm, ls = _stats(entry["linear"])
                knn_txt = f"{km:.4f} +/- {ks:.4f}"
                lin_txt = f"{lm:.4f} +/- {ls:.4f}"
            else:
                knn_txt = lin_txt = "failed"
            lines.append(f"{agg:<12} {mixture:<12} {knn_txt:<20} {lin_txt:<20}")
    lines += ["", "reference top-1 % from the original CIFAR-10 experiments "
              "(metadata only): " + " ".join(f"{k}={v}" for k, v in REFERENCE_TABLE.items())]
    with open(table_path, "w") as f:
        f.write("\n".join(lines) + "\n")
    print("\n".join(lines))

    any_ok = any(results[c]["knn"] for c, _ in cells)
    return 0 if any_ok else 1


def cmd_sweep_lambda(args) -> int:
    spec = sweep_spec_from_dict(_load_json(args.config, "sweep spec")
                                if args.config else {"lambda_values": [0.0, 0.5, 1.0]})
    base = spec.base
    if args.seed is not None:
        base = _with_seed(base, args.seed)
    _validate_runnable(base)
    out = _prepare_out(args.out)
    digest = config_hash(base)

    cells = []
    for lam in spec.lambda_values:
        cell_id = f"lambda-{lam:g}"
        cells.append((cell_id, lambda s, l=lam:
                      _with_seed(dataclasses.replace(base, lam=l), s)))
    results = _run_cells(base, cells, out, spec.repeats)

    csv_path = os.path.join(out, "sweep.csv")
    points = []
    with open(csv_path, "w") as f:
        f.write(f"# config_hash={digest}\n")
        f.write(f"# reference: lambda=0 reached {REFERENCE_LAMBDA_ZERO}% top-1 in the"
                f" original CIFAR-10 experiments (metadata only, not asserted)\n")
        f.write("lambda,repeats_ok,knn_mean,knn_std,linear_mean,linear_std,status\n")
        for lam in spec.lambda_values:
            entry = results[f"lambda-{lam:g}"]
            ok = len(entry["knn"])
            if ok:
                km, ks = _stats(entry["knn"])
                lm, ls = _stats(entry["linear"])
                status = "ok" if not entry["errors"] else f"partial({ok}/{spec.repeats})"
                f.write(f"{lam!r},{ok},{km!r},{ks!r},{lm!r},{ls!r},{status}\n")
                points.append((lam, km, lm))
            else:
                f.write(f"{lam!r},0,,,,,failed\n")

    if points:
        # plot the linear-probe accuracy: it separates the blend settings
        # long before the k-NN numbers move off their ceiling
        write_accuracy_svg([(lam, lm) for lam, _, lm in points],
                           os.path.join(out, "sweep.svg"), digest)
    for lam, km, lm in points:
        print(f"lambda={lam:g}: knn_top1={km:.4f} linear_top1={lm:.4f}")
    return 0 if points else 1


def cmd_dump_views(args) -> int:
    cfg = _load_train_config(args)
    out = _prepare_out(args.out)
    dataset = cfg.dataset.build()
    if args.count < 1:
        raise ConfigError(f"--count must be positive, got {args.count}")
    count = min(args.count, len(dataset))
    comment = f"config_hash={config_hash(cfg)}"
    for i, record in enumerate(dataset.records[:count]):
        strip = view_strip(record, cfg)
        write_ppm(strip, os.path.join(out, f"views_{i:03d}.ppm"), comment=comment)
    print(f"wrote {count} sheet(s) to {out}: "
          "panels are original | view 1 | view 2 | mixed")
    return 0


# -- argument plumbing -------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mixsiam",
        description="Siamese representation learning with mixed hard views.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config path")
    common.add_argument("--out", required=True, help="output directory")
    common.add_argument("--seed", type=int, default=None,
                        help="override the config seed (training and augmentation)")
    common.add_argument("--resume", default=None, help="checkpoint to resume from")
    common.add_argument("--strict-deterministic", action="store_true",
                        help="force strict determinism regardless of the config")

    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("train", parents=[common],
                   help="train and write a final evaluation report").set_defaults(func=cmd_train)
    sub.add_parser("eval", parents=[common],
                   help="evaluate a checkpoint (--resume)").set_defaults(func=cmd_eval)
    sub.add_parser("ablate", parents=[common],
                   help="run the aggregation x mixture grid").set_defaults(func=cmd_ablate)
    sub.add_parser("sweep-lambda", parents=[common],
                   help="accuracy versus loss-blend lambda").set_defaults(func=cmd_sweep_lambda)
    dump = sub.add_parser("dump-views", parents=[common],
                          help="write one original/view1/view2/mixed sheet per image")
    dump.add_argument("--count", type=int, default=8,
                      help="number of images to render (default 8)")
    dump.set_defaults(func=cmd_dump_views)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if e.code else 0
    try:
        return args.func(args)
    except (ConfigError, ParseError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except TrainingAborted as e:
        print(f"training aborted: {e}", file=sys.stderr)
        return 1
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
