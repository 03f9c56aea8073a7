"""Command-line experiment harness.

Subcommands: gen-data, train, stats, eval, sweep, report. All artifacts land
under --workdir; outputs are byte-stable for identical inputs and seeds, and
wall-clock timings go to a sidecar .log next to each primary output.
Exit codes: 0 success, 2 configuration error, 3 runtime error.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import domain_data as dd
from . import micro_net as mn
from . import test_time_shift as tts
from .errors import ConfigError, StyleShiftError
from .experiment import (
    DataConfig,
    ExperimentConfig,
    _build,
    assign_pseudo_domains,
    generate_data,
    load_experiment_config,
    load_split,
    method_label,
    run_seed,
    shift_mode_from_name,
)

EVAL_COLUMNS = ("method", "target", "seed", "accuracy", "shift_rate")


def _fmt(value) -> str:
    return repr(float(value)) if isinstance(value, float) else str(value)


def write_csv(path: Path, columns, rows) -> None:
    lines = [",".join(columns)]
    for row in rows:
        lines.append(",".join(_fmt(row[c]) for c in columns))
    path.write_text("\n".join(lines) + "\n")


def append_sidecar(path: Path, message: str) -> None:
    stamp = time.strftime("%Y-%m-%dT%H:%M:%S")
    with open(str(path) + ".log", "a") as fh:
        fh.write(f"{stamp} {message}\n")


def _read_json(path: Path) -> dict:
    try:
        return json.loads(path.read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path} is not valid JSON: {exc}") from exc


def _load_dataset(workdir: Path, dataset: str) -> tuple[dd.DatasetManifest, Path]:
    root = workdir / dataset
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise ConfigError(f"no manifest at {manifest_path}")
    return dd.load_manifest(manifest_path), root


# -- commands -------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    workdir = Path(args.workdir)
    cfg = DataConfig.from_dict(_read_json(workdir / args.config))
    out = workdir / args.out
    t0 = time.perf_counter()
    manifest = generate_data(cfg, out, args.seed)
    append_sidecar(out / "manifest.json",
                   f"gen-data seed={args.seed} samples={len(manifest.samples)} "
                   f"wall={time.perf_counter() - t0:.2f}s")
    print(f"wrote {len(manifest.samples)} samples to {out}")
    return 0


def _train_from_config(workdir: Path, doc: dict):
    manifest, root = _load_dataset(workdir, doc.get("dataset", "data"))
    protocol = doc.get("protocol", "leave_one_out")
    if protocol not in ("leave_one_out", "single_domain"):
        raise ConfigError(f"unknown protocol {protocol!r}")
    domains = manifest.source_domains
    if protocol == "single_domain":
        domains = domains[:1]
    images, classes, doms = load_split(manifest, root, "train", domains)

    pseudo = doc.get("pseudo_labels")
    train_doc = dict(doc.get("train", {}))
    for key in ("sb_hooks", "aug_hooks"):
        if train_doc.get(key) is not None:
            train_doc[key] = tuple(train_doc[key])
    train_cfg = _build(mn.TrainConfig, train_doc)
    if pseudo is not None:
        doms = assign_pseudo_domains(images, int(pseudo), train_cfg.seed)
        n_domains = int(pseudo)
    else:
        doms = np.searchsorted(np.unique(doms), doms)
        n_domains = len(domains)

    net_cfg = mn.NetConfig.from_dict(doc["net"]) if "net" in doc else mn.NetConfig(
        in_channels=1, image_size=manifest.image_size, n_classes=manifest.n_classes)
    net = mn.MicroNet.init(net_cfg, seed=doc.get("init_seed", train_cfg.seed))
    metrics = mn.train(net, images, classes, doms, train_cfg, n_domains=n_domains)
    return net, metrics, train_cfg


def cmd_train(args) -> int:
    workdir = Path(args.workdir)
    doc = _read_json(workdir / args.config)
    t0 = time.perf_counter()
    net, metrics, train_cfg = _train_from_config(workdir, doc)

    ckpt = workdir / args.out_checkpoint
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    payload = net.to_dict()
    payload["tags"] = {"sb": train_cfg.sb, "aug": train_cfg.aug, "seed": train_cfg.seed}
    ckpt.write_text(json.dumps(payload, indent=1, sort_keys=True))

    audit = workdir / args.audit_log
    audit.parent.mkdir(parents=True, exist_ok=True)
    with open(audit, "w") as fh:
        for rec in metrics.audit:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")

    metrics_csv = workdir / (args.metrics_csv or (str(args.out_checkpoint) + ".epochs.csv"))
    write_csv(metrics_csv, ("epoch", "loss", "accuracy"), metrics.epochs)
    append_sidecar(ckpt, f"train wall={time.perf_counter() - t0:.2f}s "
                         f"final_acc={metrics.epochs[-1]['accuracy']:.4f}")
    print(f"checkpoint {ckpt} | final train accuracy "
          f"{metrics.epochs[-1]['accuracy']:.4f} | {len(metrics.audit)} balancing records")
    return 0


def cmd_stats(args) -> int:
    workdir = Path(args.workdir)
    net = mn.MicroNet.load(workdir / args.checkpoint)
    manifest, root = _load_dataset(workdir, args.dataset)
    domains = manifest.source_domains
    if args.single_domain:
        domains = domains[:1]
    images, _, doms = load_split(manifest, root, "train", domains)
    if args.pseudo_labels is not None:
        doms = assign_pseudo_domains(images, args.pseudo_labels, args.seed)
        names = tuple(f"cluster{j}" for j in range(args.pseudo_labels))
        alpha = args.alpha if args.alpha is not None else tts.PSEUDO_LABEL_ALPHA
    else:
        doms = np.searchsorted(np.unique(doms), doms)
        names = tuple(manifest.styles[d].name for d in domains)
        alpha = args.alpha if args.alpha is not None else tts.DEFAULT_ALPHA
    registry = tts.build_registry(net, images, doms, args.layer, alpha=alpha, names=names)
    out = workdir / args.out_registry
    out.parent.mkdir(parents=True, exist_ok=True)
    tts.save_registry(registry, out)
    print(f"registry {out}: layer={registry.layer} alpha={registry.alpha_default} "
          f"spread={registry.spread!r}")
    for i, name in enumerate(registry.names):
        print(f"  {name}: |centroid| = {float(np.linalg.norm(registry.centroids[i]))!r}")
    return 0


def cmd_eval(args) -> int:
    workdir = Path(args.workdir)
    net = mn.MicroNet.load(workdir / args.checkpoint)
    tags = _read_json(workdir / args.checkpoint).get("tags", {})
    registry = tts.load_registry(workdir / args.registry)
    manifest, root = _load_dataset(workdir, args.dataset)
    images, classes, doms = load_split(manifest, root, "test")
    mode = shift_mode_from_name(args.mode, args.pool_size)
    pool = None
    rng = None
    if mode.kind == "nearest_sample":
        tr_images, _, tr_doms = load_split(manifest, root, "train", manifest.source_domains)
        pool = net.style_vectors_at(tr_images, registry.layer)
        rng = np.random.Generator(np.random.PCG64(args.seed))
    t0 = time.perf_counter()
    result = mn.evaluate(net, images, classes, doms, registry=registry, mode=mode,
                         alpha=args.alpha, sample_pool=pool, rng=rng)
    label = args.method_label or method_label(bool(tags.get("sb")), mode.kind,
                                              tags.get("aug", "none"))
    rows = [{"method": label, "target": manifest.styles[dom].name,
             "seed": tags.get("seed", 0), "accuracy": result.accuracy(dom),
             "shift_rate": result.shift_rate(dom)}
            for dom in sorted(result.domains)]
    out = workdir / args.out_csv
    out.parent.mkdir(parents=True, exist_ok=True)
    write_csv(out, EVAL_COLUMNS, rows)
    append_sidecar(out, f"eval mode={args.mode} pool_seed={args.seed} "
                        f"wall={time.perf_counter() - t0:.2f}s")
    for row in rows:
        print(f"{row['target']}: accuracy {row['accuracy']:.4f} "
              f"shift_rate {row['shift_rate']:.4f}")
    return 0


# -- sweep ---------------------------------------------------------------------

def apply_sweep_param(cfg: ExperimentConfig, param: str, value: float) -> ExperimentConfig:
    if param == "alpha":
        new_eval = type(cfg.eval)(mode=cfg.eval.mode, alpha=value, layer=cfg.eval.layer,
                                  pool_size=cfg.eval.pool_size)
        return ExperimentConfig(data=cfg.data, net=cfg.net, train=cfg.train,
                                eval=new_eval, protocol=cfg.protocol, seeds=cfg.seeds,
                                pseudo_labels=cfg.pseudo_labels)
    if param == "keep_fraction":
        new_data = DataConfig(
            n_classes=cfg.data.n_classes, n_sources=cfg.data.n_sources,
            per_cell_train=cfg.data.per_cell_train, per_cell_test=cfg.data.per_cell_test,
            image_size=cfg.data.image_size, target_preset=cfg.data.target_preset,
            imbalance=dd.ImbalanceSpec(kind="data", keep_fraction=value))
        return ExperimentConfig(data=new_data, net=cfg.net, train=cfg.train,
                                eval=cfg.eval, protocol=cfg.protocol, seeds=cfg.seeds,
                                pseudo_labels=cfg.pseudo_labels)
    raise ConfigError(f"unknown sweep parameter {param!r}")


def _sweep_point(task) -> list[dict]:
    cfg_doc, param, value, seed, workdir = task
    cfg = apply_sweep_param(ExperimentConfig.from_dict(cfg_doc), param, value)
    point_dir = Path(workdir) / f"{param}_{value:g}"
    outcome = run_seed(cfg, seed, point_dir)
    return [{"param": param, "value": value, **row} for row in outcome.rows]


def cmd_sweep(args) -> int:
    workdir = Path(args.workdir)
    cfg = load_experiment_config(workdir / args.config)
    cfg_doc = _read_json(workdir / args.config)
    try:
        values = [float(v) for v in args.values.split(",") if v]
    except ValueError as exc:
        raise ConfigError(f"--values must be comma-separated numbers: {exc}") from exc
    if not values:
        raise ConfigError("--values is empty")
    sweep_dir = workdir / args.out_dir
    tasks = [(cfg_doc, args.param, value, seed, sweep_dir)
             for value in values for seed in cfg.seeds]
    workers = int(os.environ.get("STYLESHIFT_THREADS", "1"))
    t0 = time.perf_counter()
    if workers > 1:
        import multiprocessing

        with multiprocessing.Pool(min(workers, len(tasks))) as pool:
            chunks = pool.map(_sweep_point, tasks)
    else:
        chunks = [_sweep_point(t) for t in tasks]
    rows = [row for chunk in chunks for row in chunk]
    rows.sort(key=lambda r: (r["param"], r["value"], r["seed"], r["target"]))
    out = workdir / args.out_csv
    out.parent.mkdir(parents=True, exist_ok=True)
    write_csv(out, ("param", "value") + EVAL_COLUMNS, rows)
    append_sidecar(out, f"sweep {args.param} x{len(values)} seeds x{len(cfg.seeds)} "
                        f"wall={time.perf_counter() - t0:.2f}s")
    print(f"swept {args.param} over {values}: {len(rows)} rows -> {out}")
    return 0


# -- report ---------------------------------------------------------------------

SVG_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


def _svg_chart(series: dict[str, list[tuple[float, float]]], x_label: str,
               y_label: str) -> str:
    width, height, margin = 640, 420, 60
    xs = [p[0] for pts in series.values() for p in pts]
    ys = [p[1] for pts in series.values() for p in pts]
    x_lo, x_hi = min(xs), max(xs)
    y_lo, y_hi = min(ys + [0.0]), max(ys + [1e-9])
    if x_hi == x_lo:
        x_hi = x_lo + 1.0
    if y_hi == y_lo:
        y_hi = y_lo + 1.0

    def px(x):
        return margin + (x - x_lo) / (x_hi - x_lo) * (width - 2 * margin)

    def py(y):
        return height - margin - (y - y_lo) / (y_hi - y_lo) * (height - 2 * margin)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<line x1="{margin}" y1="{height - margin}" x2="{width - margin}" '
        f'y2="{height - margin}" stroke="black"/>',
        f'<line x1="{margin}" y1="{margin}" x2="{margin}" y2="{height - margin}" '
        f'stroke="black"/>',
        f'<text x="{width / 2:.1f}" y="{height - 15}" text-anchor="middle" '
        f'font-size="14">{x_label}</text>',
        f'<text x="18" y="{height / 2:.1f}" text-anchor="middle" font-size="14" '
        f'transform="rotate(-90 18 {height / 2:.1f})">{y_label}</text>',
    ]
    for tick in (x_lo, (x_lo + x_hi) / 2, x_hi):
        parts.append(f'<text x="{px(tick):.1f}" y="{height - margin + 18}" '
                     f'text-anchor="middle" font-size="11">{tick:g}</text>')
    for tick in (y_lo, (y_lo + y_hi) / 2, y_hi):
        parts.append(f'<text x="{margin - 6}" y="{py(tick) + 4:.1f}" '
                     f'text-anchor="end" font-size="11">{tick:.3g}</text>')
    for i, (name, pts) in enumerate(sorted(series.items())):
        color = SVG_COLORS[i % len(SVG_COLORS)]
        coords = " ".join(f"{px(x):.2f},{py(y):.2f}" for x, y in sorted(pts))
        parts.append(f'<polyline points="{coords}" fill="none" stroke="{color}" '
                     f'stroke-width="2"/>')
        for x, y in pts:
            parts.append(f'<circle cx="{px(x):.2f}" cy="{py(y):.2f}" r="3" '
                         f'fill="{color}"/>')
        parts.append(f'<text x="{width - margin + 4}" y="{margin + 16 * i + 4}" '
                     f'font-size="11" fill="{color}">{name}</text>')
    parts.append("</svg>")
    return "\n".join(parts)


def cmd_report(args) -> int:
    workdir = Path(args.workdir)
    in_path = workdir / args.in_csv
    try:
        with open(in_path, newline="") as fh:
            rows = list(csv.DictReader(fh))
    except OSError as exc:
        raise ConfigError(f"cannot read {in_path}: {exc}") from exc
    if not rows:
        raise StyleShiftError(f"input CSV {in_path} has no data rows")
    for col in (args.x_col, args.y_col):
        if col not in rows[0]:
            raise ConfigError(f"column {col!r} not in {sorted(rows[0])}")
    groups: dict[tuple[str, float], list[float]] = {}
    for row in rows:
        series = row.get(args.series_col, "all") if args.series_col else "all"
        key = (series, float(row[args.x_col]))
        groups.setdefault(key, []).append(float(row[args.y_col]))
    means = [{"series": s, args.x_col: x,
              f"mean_{args.y_col}": float(np.mean(vals)), "n": len(vals)}
             for (s, x), vals in sorted(groups.items())]
    out_csv = workdir / (args.out_csv or (str(args.in_csv) + ".means.csv"))
    write_csv(out_csv, ("series", args.x_col, f"mean_{args.y_col}", "n"), means)
    series: dict[str, list[tuple[float, float]]] = {}
    for rec in means:
        series.setdefault(rec["series"], []).append(
            (rec[args.x_col], rec[f"mean_{args.y_col}"]))
    out_svg = workdir / args.out_svg
    out_svg.write_text(_svg_chart(series, args.x_col, f"mean {args.y_col}"))
    print(f"report: {len(means)} grouped rows -> {out_csv}, chart -> {out_svg}")
    return 0


# -- entry point -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="styleshift",
        description="Synthetic domain-generalization experiments with style "
                    "balancing and test-time style shifting.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic multi-domain dataset")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train", help="train a classifier per a train-config JSON")
    p.add_argument("--config", required=True)
    p.add_argument("--out-checkpoint", required=True)
    p.add_argument("--audit-log", required=True)
    p.add_argument("--metrics-csv", default=None)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("stats", help="build a style registry from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--layer", default="block2")
    p.add_argument("--alpha", type=float, default=None)
    p.add_argument("--out-registry", required=True)
    p.add_argument("--pseudo-labels", type=int, default=None)
    p.add_argument("--single-domain", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_stats)

    p = sub.add_parser("eval", help="evaluate a checkpoint under a shift mode")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--registry", required=True)
    p.add_argument("--mode", default="proposed")
    p.add_argument("--alpha", type=float, default=None)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out-csv", required=True)
    p.add_argument("--pool-size", type=int, default=tts.DEFAULT_NEAREST_POOL)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--method-label", default=None)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("sweep", help="run an experiment grid over one parameter")
    p.add_argument("--config", required=True)
    p.add_argument("--param", required=True, choices=("alpha", "keep_fraction"))
    p.add_argument("--values", required=True)
    p.add_argument("--out-csv", required=True)
    p.add_argument("--out-dir", default="sweep")
    p.set_defaults(fn=cmd_sweep)

    p = sub.add_parser("report", help="grouped means and an SVG line chart")
    p.add_argument("--in-csv", required=True)
    p.add_argument("--out-svg", required=True)
    p.add_argument("--out-csv", default=None)
    p.add_argument("--x-col", default="value")
    p.add_argument("--y-col", default="accuracy")
    p.add_argument("--series-col", default="method")
    p.set_defaults(fn=cmd_report)

    for sp in sub.choices.values():
        sp.add_argument("--workdir", default=".")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (StyleShiftError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
