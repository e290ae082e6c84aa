"""Command-line harness: single runs, the experiment grid and figure CSVs.

Usage::

    ssplab run --config FILE [--key value ...]
    ssplab grid --labels Original,1a,3d --seeds 1,2,3 [--config FILE] [--out DIR] [--jobs N]
    ssplab figures --grid DIR
    ssplab dump-default-config
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import os
import statistics
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from ssplab.config import (
    EXPERIMENTS,
    ConfigError,
    ExperimentConfig,
    dump_config,
    engine_config,
    experiment_label,
    load_config,
    make_space,
)
from ssplab.checkpoint import save_records
from ssplab.datasets import DataError, DataSplits, SyntheticSpec, load_cifar10, make_synthetic
from ssplab.engine import METRICS_HEADER, EpochMetrics, derive_final, init_state, moving_average, run_epoch

log = logging.getLogger("ssplab")

DATA_ROOT_ENV = "SSPLAB_DATA_ROOT"
DESK_SYNTHETIC = SyntheticSpec(n_per_class=625, num_classes=4, image_size=16, noise_sigma=0.5, seed=0)
SUMMARY_HEADER = "label,poison_set,q,seed,num_slots,final_valid_error,final_test_error"
GRID_HEADER = "label,poison_set,q,n_seeds,median_valid_error,median_test_error"

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


def load_data(cfg: ExperimentConfig) -> DataSplits:
    if cfg.dataset == "synthetic":
        return make_synthetic(DESK_SYNTHETIC)
    root = os.environ.get(DATA_ROOT_ENV)
    if not root:
        raise DataError(f"set {DATA_ROOT_ENV} to the directory holding the CIFAR-10 binary batches")
    return load_cifar10(root, split_seed=cfg.seed)


def _summary_row(label, cfg, num_slots, valid_err, test_err) -> str:
    return f"{label},{cfg.poison_set},{cfg.instance_factor},{cfg.seed},{num_slots},{valid_err:.6f},{test_err:.6f}"


def run(cfg: ExperimentConfig, run_dir: str | Path, data: DataSplits | None = None, resume: bool = True) -> Path:
    """Search once and write ``config.txt``, ``snapshot.json``, ``metrics.csv``, checkpoints and ``summary.csv``.

    ``elapsed.txt`` records the wall-clock seconds spent training.
    """
    run_dir = Path(run_dir)
    snapshot = dump_config(cfg)
    if resume and (run_dir / "summary.csv").is_file() and (run_dir / "config.txt").is_file():
        if (run_dir / "config.txt").read_text(encoding="utf-8") == snapshot:
            log.info("%s: already complete, skipping", run_dir)
            return run_dir
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "summary.csv").unlink(missing_ok=True)
    space = make_space(cfg)
    label = experiment_label(cfg)
    (run_dir / "config.txt").write_text(snapshot, encoding="utf-8")
    info = {"label": label, "num_slots": space.num_slots, "space": space.describe(), "config": dataclasses.asdict(cfg)}
    (run_dir / "snapshot.json").write_text(json.dumps(info, indent=2, sort_keys=True) + "\n", encoding="utf-8")

    data = data if data is not None else load_data(cfg)
    ecfg = engine_config(cfg)
    state = init_state(space, ecfg, data.train.num_classes, data.train.images.shape[1], cfg.seed)
    started = time.time()
    with open(run_dir / "metrics.csv", "w", encoding="utf-8", newline="\n") as fh:
        fh.write(METRICS_HEADER + "\n")
        for epoch in range(cfg.epochs):
            try:
                m = run_epoch(state, space, data.train, data.valid, ecfg)
            except FloatingPointError as exc:
                (run_dir / "abort.txt").write_text(f"epoch {epoch}: {exc}\n", encoding="utf-8")
                raise
            if epoch == cfg.epochs - 1:
                decision, valid_err, test_err = derive_final(state, space, data.valid, data.test, ecfg.derive_candidates)
                m = EpochMetrics(m.epoch, m.train_loss, m.valid_error_pct, test_err, m.controller_entropy,
                                 m.baseline, m.sampled_poison_fraction)
            fh.write(m.csv_row() + "\n")
            fh.flush()
            log.info("%s seed %d epoch %d: loss %.4f valid %.2f%% (%.0fs)", label, cfg.seed, epoch,
                     m.train_loss, m.valid_error_pct, time.time() - started)
    (run_dir / "elapsed.txt").write_text(f"{time.time() - started:.3f}\n", encoding="utf-8")
    save_records(run_dir / "shared.ckpt", state.store.records())
    save_records(run_dir / "controller.ckpt", state.theta.records())
    (run_dir / "architecture.txt").write_text(decision.describe() + "\n", encoding="utf-8")
    (run_dir / "summary.csv").write_text(
        SUMMARY_HEADER + "\n" + _summary_row(label, cfg, space.num_slots, valid_err, test_err) + "\n",
        encoding="utf-8",
    )
    return run_dir


def _grid_job(args) -> str:
    cfg, run_dir, data = args
    return str(run(cfg, run_dir, data=data))


def run_grid(
    base: ExperimentConfig,
    labels: list[str],
    seeds: list[int],
    grid_dir: str | Path,
    jobs: int = 1,
    data: DataSplits | None = None,
) -> Path:
    """One run per (label, seed) plus ``grid_summary.csv`` with per-label medians.

    ``data`` replaces the configured dataset for in-process runs.
    """
    if not labels:
        raise ConfigError("the label list is empty")
    unknown = [l for l in labels if l not in EXPERIMENTS]
    if unknown:
        raise ConfigError(f"unknown experiment labels: {', '.join(unknown)}")
    if not seeds:
        raise ConfigError("the seed list is empty")
    grid_dir = Path(grid_dir)
    grid_dir.mkdir(parents=True, exist_ok=True)
    tasks = []
    for label in labels:
        pset, q = EXPERIMENTS[label]
        for seed in seeds:
            cfg = base.with_overrides(poison_set=pset, instance_factor=q, seed=seed)
            tasks.append((cfg, grid_dir / f"{label}_seed{seed}"))
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            list(pool.map(_grid_job, [(cfg, run_dir, data) for cfg, run_dir in tasks]))
    else:
        if data is None and base.dataset == "synthetic":
            data = load_data(base)
        for cfg, run_dir in tasks:
            run(cfg, run_dir, data=data)
    rows = collect_summaries(grid_dir)
    with open(grid_dir / "grid_summary.csv", "w", encoding="utf-8", newline="\n") as fh:
        fh.write(GRID_HEADER + "\n")
        for label in labels:
            mine = [r for r in rows if r["label"] == label]
            pset, q = EXPERIMENTS[label]
            fh.write(
                f"{label},{pset},{q},{len(mine)},"
                f"{statistics.median(r['valid'] for r in mine):.6f},{statistics.median(r['test'] for r in mine):.6f}\n"
            )
    return grid_dir


def collect_summaries(grid_dir: str | Path) -> list[dict]:
    rows = []
    for path in sorted(Path(grid_dir).glob("*/summary.csv")):
        with open(path, encoding="utf-8") as fh:
            for r in csv.DictReader(fh):
                rows.append({
                    "label": r["label"], "poison_set": r["poison_set"], "q": int(r["q"]), "seed": int(r["seed"]),
                    "valid": float(r["final_valid_error"]), "test": float(r["final_test_error"]),
                    "run_dir": path.parent,
                })
    return rows


def emit_figure_data(grid_dir: str | Path) -> tuple[Path, Path, list[str]]:
    """Write ``figure4.csv`` and ``figure5.csv``; returns their paths and the incomplete runs."""
    grid_dir = Path(grid_dir)
    run_dirs = sorted(p for p in grid_dir.iterdir() if p.is_dir() and (p / "config.txt").is_file())
    incomplete = [p.name for p in run_dirs if not (p / "summary.csv").is_file()]
    rows = collect_summaries(grid_dir)
    if not rows:
        raise DataError(f"{grid_dir}: no completed runs")

    by_label: dict[str, list[dict]] = {}
    for r in rows:
        by_label.setdefault(r["label"], []).append(r)
    order = [l for l in EXPERIMENTS if l in by_label] + sorted(l for l in by_label if l not in EXPERIMENTS)

    fig4 = grid_dir / "figure4.csv"
    with open(fig4, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("experiment,epoch,ma20_valid_error\n")
        for label in order:
            series = []
            for r in by_label[label]:
                with open(r["run_dir"] / "metrics.csv", encoding="utf-8") as mf:
                    series.append([float(m["valid_error"]) for m in csv.DictReader(mf)])
            length = min(len(s) for s in series)
            median = [statistics.median(s[e] for s in series) for e in range(length)]
            for epoch, value in enumerate(moving_average(median, 20)):
                fh.write(f"{label},{epoch},{value:.6f}\n")

    fig5 = grid_dir / "figure5.csv"
    with open(fig5, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("poison_set,q,final_valid_error,final_test_error\n")
        keyed = sorted(by_label.values(), key=lambda rs: (rs[0]["poison_set"], rs[0]["q"]))
        for rs in keyed:
            fh.write(
                f"{rs[0]['poison_set']},{rs[0]['q']},"
                f"{statistics.median(r['valid'] for r in rs):.6f},{statistics.median(r['test'] for r in rs):.6f}\n"
            )
    if incomplete:
        (grid_dir / "figures_incomplete.txt").write_text("\n".join(incomplete) + "\n", encoding="utf-8")
    return fig4, fig5, incomplete


def _parse_overrides(extra: list[str]) -> dict[str, str]:
    out: dict[str, str] = {}
    i = 0
    while i < len(extra):
        token = extra[i]
        if not token.startswith("--"):
            raise ConfigError(f"unexpected argument {token!r}")
        key = token[2:].replace("-", "_")
        if "=" in key:
            key, value = key.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(extra):
                raise ConfigError(f"missing value for {token}")
            value = extra[i + 1]
            i += 2
        out[key] = value
    return out


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ssplab", description="Search-space poisoning experiments on ENAS.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run one search; extra --key value pairs override the config")
    p_run.add_argument("--config", help="flat key = value config file")
    p_run.add_argument("--out", default="runs/run", help="run directory")
    p_run.add_argument("--force", action="store_true", help="rerun even if the directory holds a finished run")

    p_grid = sub.add_parser("grid", help="run labelled experiments over several seeds")
    p_grid.add_argument("--labels", required=True, help="comma-separated labels, e.g. Original,1a,3d")
    p_grid.add_argument("--seeds", default="1,2,3", help="comma-separated integer seeds")
    p_grid.add_argument("--config", help="base config file")
    p_grid.add_argument("--out", default="runs/grid", help="grid directory")
    p_grid.add_argument("--jobs", type=int, default=1, help="parallel worker processes")

    p_fig = sub.add_parser("figures", help="write figure4.csv and figure5.csv for a grid")
    p_fig.add_argument("--grid", required=True, help="grid directory")

    sub.add_parser("dump-default-config", help="print the default configuration")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        if args.command == "dump-default-config":
            if extra:
                raise ConfigError(f"unexpected arguments {extra}")
            sys.stdout.write(dump_config(ExperimentConfig()))
        elif args.command == "run":
            cfg = load_config(args.config, _parse_overrides(extra))
            run_dir = run(cfg, args.out, resume=not args.force)
            sys.stdout.write((run_dir / "summary.csv").read_text(encoding="utf-8"))
        elif args.command == "grid":
            base = load_config(args.config, _parse_overrides(extra))
            labels = [l.strip() for l in args.labels.split(",") if l.strip()]
            try:
                seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
            except ValueError:
                raise ConfigError(f"seeds must be integers, got {args.seeds!r}") from None
            grid_dir = run_grid(base, labels, seeds, args.out, args.jobs)
            sys.stdout.write((grid_dir / "grid_summary.csv").read_text(encoding="utf-8"))
        elif args.command == "figures":
            if extra:
                raise ConfigError(f"unexpected arguments {extra}")
            fig4, fig5, incomplete = emit_figure_data(args.grid)
            print(f"wrote {fig4} and {fig5}")
            if incomplete:
                print(f"partial output: incomplete runs {', '.join(incomplete)}", file=sys.stderr)
                return EXIT_DATA
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except FloatingPointError as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    raise SystemExit(main())
