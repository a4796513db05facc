"""Command-line entry point: gen, run, sweep, analyze.

Configs are flat key-value INI files with sections and no nesting. Every run
writes a manifest that re-parses into the exact same resolved configuration.
Exit codes: 0 success, 1 config/user error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import logging
import os
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

from .errors import ConfigError, DataError, NumericError
from .model import GuardConfig, TrainConfig, save_checkpoint
from .pipeline import (
    ModelConfig,
    PolicyConfig,
    RunResult,
    run_incremental,
    sweep,
)
from .stream import SyntheticSpec, generate_synthetic, windowed_schedule

logger = logging.getLogger(__name__)

_LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}

METRICS_COLUMNS = (
    "span",
    "policy",
    "auc",
    "logloss",
    "reservoir_size",
    "covered_weight",
    "drop_ratio",
    "sample_ms",
    "train_ms",
)
BUCKET_COLUMNS = ("span", "bucket", "auc", "count")


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


# ---------------------------------------------------------------------------
# config parsing
# ---------------------------------------------------------------------------


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("true", "1", "yes"):
        return True
    if low in ("false", "0", "no"):
        return False
    raise ConfigError(f"expected a boolean, got {text!r}")


def _parse_hidden(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(part) for part in text.split(",") if part.strip())
    except ValueError as exc:
        raise ConfigError(f"bad hidden sizes {text!r}") from exc


def _parse_capacity(text: str):
    text = text.strip()
    if text in ("match", "inf"):
        return text
    try:
        return int(text)
    except ValueError as exc:
        raise ConfigError(f"capacity must be 'match', 'inf' or an integer, got {text!r}") from exc


_REQUIRED = object()

# section -> key -> (parser, default); _REQUIRED marks mandatory keys
RUN_SCHEMA: dict[str, dict[str, tuple[Callable, object]]] = {
    "data": {"spans": (str, _REQUIRED)},
    "model": {
        "embedding_size": (int, 16),
        "hidden": (_parse_hidden, (64,)),
    },
    "policy": {
        "name": (str, "FeSAIL"),
        "capacity": (_parse_capacity, "match"),
        "func": (str, "inverse_proportional"),
        "bias": (float, 1.0),
        "iu_supplement": (_parse_bool, False),
    },
    "guard": {
        "eta": (int, 5),
        "lambda": (float, 0.1),
        "epsilon": (float, 1e-8),
    },
    "train": {
        "learning_rate": (float, 1e-3),
        "batch_size": (int, 256),
        "max_epochs": (int, 10),
        "patience": (int, 2),
        "val_fraction": (float, 0.1),
    },
    "run": {
        "seed": (int, 0),
        "out": (str, ""),
        "bucket_cap": (int, 10),
        "selection_log": (_parse_bool, False),
    },
}

GEN_SCHEMA: dict[str, dict[str, tuple[Callable, object]]] = {
    "synthetic": {
        "num_spans": (int, _REQUIRED),
        "samples_per_span": (int, _REQUIRED),
        "fields": (int, _REQUIRED),
        "features_per_field": (int, _REQUIRED),
        "click_noise": (float, 0.5),
        "seed": (int, 0),
        "schedule": (str, "none"),
        "churn_fraction": (float, 0.5),
        "start_prob": (float, 0.2),
        "max_staleness": (int, 8),
    },
}

SWEEP_SCHEMA: dict[str, dict[str, tuple[Callable, object]]] = {
    "sweep": {
        "funcs": (str, _REQUIRED),
        "biases": (str, _REQUIRED),
        "control_func": (str, ""),
        "control_bias": (str, ""),
    },
}


def _read_ini(path: str | Path) -> configparser.ConfigParser:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str  # keep keys as written
    try:
        parser.read(path, encoding="utf-8")
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return parser


def _parse_with_schema(
    parser: configparser.ConfigParser,
    schema: dict[str, dict[str, tuple[Callable, object]]],
    path,
    free_sections: Sequence[str] = (),
) -> dict[str, dict]:
    for section in parser.sections():
        if section not in schema and section not in free_sections:
            raise ConfigError(f"{path}: unknown section [{section}]")
        if section in schema:
            for key in parser[section]:
                if key not in schema[section]:
                    raise ConfigError(f"{path}: unknown key {key!r} in [{section}]")
    out: dict[str, dict] = {}
    for section, keys in schema.items():
        out[section] = {}
        for key, (fn, default) in keys.items():
            if parser.has_option(section, key):
                raw = parser.get(section, key)
                try:
                    out[section][key] = fn(raw)
                except ConfigError:
                    raise
                except ValueError as exc:
                    raise ConfigError(
                        f"{path}: bad value for {key!r} in [{section}]: {raw!r}"
                    ) from exc
            elif default is _REQUIRED:
                raise ConfigError(f"{path}: missing required key {key!r} in [{section}]")
            else:
                out[section][key] = default
    return out


@dataclass
class RunConfig:
    spans_dir: Path
    out_dir: Path | None
    policy: PolicyConfig
    selection_log: bool


def load_run_config(path: str | Path, seed_override: int | None = None,
                    out_override: str | None = None) -> RunConfig:
    parser = _read_ini(path)
    vals = _parse_with_schema(parser, RUN_SCHEMA, path)
    policy = PolicyConfig(
        policy=vals["policy"]["name"],
        capacity=vals["policy"]["capacity"],
        func=vals["policy"]["func"],
        bias=vals["policy"]["bias"],
        guard=GuardConfig(
            eta=vals["guard"]["eta"],
            lam=vals["guard"]["lambda"],
            eps=vals["guard"]["epsilon"],
        ),
        train=TrainConfig(
            learning_rate=vals["train"]["learning_rate"],
            batch_size=vals["train"]["batch_size"],
            max_epochs=vals["train"]["max_epochs"],
            patience=vals["train"]["patience"],
            val_fraction=vals["train"]["val_fraction"],
        ),
        model=ModelConfig(
            embedding_size=vals["model"]["embedding_size"],
            hidden=vals["model"]["hidden"],
        ),
        seed=vals["run"]["seed"] if seed_override is None else seed_override,
        iu_supplement=vals["policy"]["iu_supplement"],
        bucket_cap=vals["run"]["bucket_cap"],
    )
    policy.validate()
    out = out_override if out_override is not None else vals["run"]["out"]
    return RunConfig(
        spans_dir=Path(vals["data"]["spans"]),
        out_dir=Path(out) if out else None,
        policy=policy,
        selection_log=vals["run"]["selection_log"],
    )


def run_config_manifest(cfg: RunConfig) -> str:
    p = cfg.policy
    lines = [
        "[data]",
        f"spans = {cfg.spans_dir}",
        "",
        "[model]",
        f"embedding_size = {p.model.embedding_size}",
        f"hidden = {','.join(str(h) for h in p.model.hidden)}",
        "",
        "[policy]",
        f"name = {p.policy}",
        f"capacity = {p.capacity}",
        f"func = {p.func}",
        f"bias = {_fmt(p.bias)}",
        f"iu_supplement = {str(p.iu_supplement).lower()}",
        "",
        "[guard]",
        f"eta = {p.guard.eta}",
        f"lambda = {_fmt(p.guard.lam)}",
        f"epsilon = {_fmt(p.guard.eps)}",
        "",
        "[train]",
        f"learning_rate = {_fmt(p.train.learning_rate)}",
        f"batch_size = {p.train.batch_size}",
        f"max_epochs = {p.train.max_epochs}",
        f"patience = {p.train.patience}",
        f"val_fraction = {_fmt(p.train.val_fraction)}",
        "",
        "[run]",
        f"seed = {p.seed}",
        f"out = {cfg.out_dir if cfg.out_dir is not None else ''}",
        f"bucket_cap = {p.bucket_cap}",
        f"selection_log = {str(cfg.selection_log).lower()}",
        "",
    ]
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def _span_paths(spans_dir: Path) -> list[Path]:
    if not spans_dir.is_dir():
        raise ConfigError(f"span directory not found: {spans_dir}")
    paths = sorted(spans_dir.glob("span_*.csv"))
    if not paths:
        raise DataError(f"no span_*.csv files in {spans_dir}")
    return paths


def cmd_gen(args) -> int:
    parser = _read_ini(args.config)
    vals = _parse_with_schema(parser, GEN_SCHEMA, args.config, free_sections=("schedule",))
    syn = vals["synthetic"]
    seed = args.seed if args.seed is not None else syn["seed"]
    mode = syn["schedule"]
    if mode == "windows":
        schedule = windowed_schedule(
            num_spans=syn["num_spans"],
            num_fields=syn["fields"],
            features_per_field=syn["features_per_field"],
            churn_fraction=syn["churn_fraction"],
            start_prob=syn["start_prob"],
            max_staleness=syn["max_staleness"],
            seed=seed,
        )
    elif mode == "none":
        schedule = {}
    else:
        raise ConfigError(f"unknown schedule mode {mode!r}; use 'none' or 'windows'")
    if parser.has_section("schedule"):
        for token, spans_text in parser["schedule"].items():
            schedule[token] = tuple(
                int(s) for s in spans_text.split(",") if s.strip()
            )
    spec = SyntheticSpec(
        num_spans=syn["num_spans"],
        samples_per_span=syn["samples_per_span"],
        num_fields=syn["fields"],
        features_per_field=syn["features_per_field"],
        absence_schedule=schedule,
        click_noise=syn["click_noise"],
        seed=seed,
    )
    out_dir = Path(args.out)
    paths = generate_synthetic(spec, out_dir)
    manifest = out_dir / "gen_manifest.ini"
    with open(manifest, "w", encoding="utf-8") as fh:
        fh.write("[synthetic]\n")
        fh.write(f"num_spans = {spec.num_spans}\n")
        fh.write(f"samples_per_span = {spec.samples_per_span}\n")
        fh.write(f"fields = {spec.num_fields}\n")
        fh.write(f"features_per_field = {spec.features_per_field}\n")
        fh.write(f"click_noise = {_fmt(spec.click_noise)}\n")
        fh.write(f"seed = {spec.seed}\n")
        fh.write(f"schedule = {mode}\n")
        fh.write(f"churn_fraction = {_fmt(syn['churn_fraction'])}\n")
        fh.write(f"start_prob = {_fmt(syn['start_prob'])}\n")
        fh.write(f"max_staleness = {syn['max_staleness']}\n")
        if spec.absence_schedule:
            fh.write("\n[schedule]\n")
            for token in sorted(spec.absence_schedule):
                spans_text = ",".join(str(s) for s in spec.absence_schedule[token])
                fh.write(f"{token} = {spans_text}\n")
    print(f"wrote {len(paths)} span files to {out_dir}")
    return 0


def write_metrics_csv(result: RunResult, out_dir: Path) -> None:
    with open(out_dir / "metrics.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRICS_COLUMNS)
        for row in result.metrics:
            writer.writerow(
                [
                    row.span,
                    row.policy,
                    _fmt(row.auc),
                    _fmt(row.logloss),
                    row.reservoir_size,
                    _fmt(row.covered_weight),
                    _fmt(row.drop_ratio),
                    _fmt(row.sample_ms),
                    _fmt(row.train_ms),
                ]
            )
    with open(out_dir / "buckets.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(BUCKET_COLUMNS)
        for row in result.metrics:
            for b in row.buckets:
                writer.writerow([row.span, b.bucket, _fmt(b.auc), b.count])


def cmd_run(args) -> int:
    cfg = load_run_config(args.config, seed_override=args.seed, out_override=args.out)
    if cfg.out_dir is None:
        raise ConfigError("no output directory: set [run] out or pass --out")
    paths = _span_paths(cfg.spans_dir)
    if args.dry_run:
        print("dry run: configuration is valid")
        print(run_config_manifest(cfg), end="")
        print(f"resolved_spans = {len(paths)}")
        return 0
    out_dir = cfg.out_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    result = run_incremental(cfg.policy, paths)
    write_metrics_csv(result, out_dir)
    with open(out_dir / "manifest.ini", "w", encoding="utf-8") as fh:
        fh.write(run_config_manifest(cfg))
    save_checkpoint(result.model, out_dir / "checkpoint.npz")
    if cfg.selection_log:
        for t, log in result.selection_logs.items():
            with open(out_dir / f"sas_selection_{t:03d}.csv", "w", newline="",
                      encoding="utf-8") as fh:
                writer = csv.writer(fh)
                writer.writerow(("iteration", "candidate_index", "marginal_weight"))
                for it, idx, w in log:
                    writer.writerow([it, idx, _fmt(w)])
    print(f"run complete: policy={cfg.policy.policy} spans={len(result.metrics)} "
          f"mean_auc={result.mean_auc:.4f} out={out_dir}")
    return 0


def cmd_sweep(args) -> int:
    cfg = load_run_config(args.config, seed_override=args.seed, out_override=args.out)
    if cfg.out_dir is None:
        raise ConfigError("no output directory: set [run] out or pass --out")
    grid_parser = _read_ini(args.grid)
    grid_vals = _parse_with_schema(grid_parser, SWEEP_SCHEMA, args.grid)
    funcs = [f.strip() for f in grid_vals["sweep"]["funcs"].split(",") if f.strip()]
    biases = [float(b) for b in grid_vals["sweep"]["biases"].split(",") if b.strip()]
    if not funcs or not biases:
        raise ConfigError("sweep grid is empty")
    grid = [(f, b) for f in funcs for b in biases]
    control = None
    if grid_vals["sweep"]["control_func"]:
        control = (
            grid_vals["sweep"]["control_func"],
            float(grid_vals["sweep"]["control_bias"] or "1.0"),
        )
    paths = _span_paths(cfg.spans_dir)
    result = sweep(cfg.policy, grid, paths, control=control)
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    out_csv = cfg.out_dir / "sweep.csv"
    with open(out_csv, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(("func", "bias", "mean_auc", "jaccard_vs_control", "control"))
        for cell in result.cells:
            writer.writerow(
                [
                    cell.func,
                    _fmt(cell.bias),
                    _fmt(cell.mean_auc),
                    _fmt(cell.jaccard_vs_control),
                    "control" if cell.is_control else "",
                ]
            )
    for cell in result.cells:
        marker = "  <- control" if cell.is_control else ""
        print(
            f"{cell.func:24s} b={cell.bias:<6g} mean_auc={cell.mean_auc:.4f} "
            f"js={cell.jaccard_vs_control:.3f}{marker}"
        )
    print(f"sweep complete: {len(result.cells)} cells, wrote {out_csv}")
    return 0


def _read_csv(path: Path) -> list[dict[str, str]]:
    if not path.exists():
        raise ConfigError(f"missing file: {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def _print_table(headers: Sequence[str], rows: Sequence[Sequence[str]]) -> None:
    widths = [len(h) for h in headers]
    for row in rows:
        for i, cell in enumerate(row):
            widths[i] = max(widths[i], len(cell))
    line = "  ".join(h.ljust(w) for h, w in zip(headers, widths))
    print(line)
    print("  ".join("-" * w for w in widths))
    for row in rows:
        print("  ".join(str(c).ljust(w) for c, w in zip(row, widths)))


def _analyze_one(run_dir: Path, long_format: bool) -> None:
    metrics = _read_csv(run_dir / "metrics.csv")
    buckets = _read_csv(run_dir / "buckets.csv")
    if not metrics:
        raise DataError(f"{run_dir}/metrics.csv has no rows")
    policy = metrics[0]["policy"]
    print(f"run: {run_dir}  policy: {policy}")
    print()
    print("per-span metrics:")
    _print_table(
        ("span", "auc", "logloss", "reservoir", "covered_w", "drop"),
        [
            (
                r["span"],
                f"{float(r['auc']):.4f}",
                f"{float(r['logloss']):.4f}",
                r["reservoir_size"],
                f"{float(r['covered_weight']):.2f}",
                f"{float(r['drop_ratio']):.3f}",
            )
            for r in metrics
        ],
    )
    aucs = [float(r["auc"]) for r in metrics]
    lls = [float(r["logloss"]) for r in metrics]
    print()
    print(
        f"overall: mean_auc={sum(aucs) / len(aucs):.4f} "
        f"mean_logloss={sum(lls) / len(lls):.4f} over {len(aucs)} incremental spans"
    )
    print()
    print("bucket AUC (mean over spans):")
    stale_rows = [b for b in buckets if int(b["bucket"]) > 0]
    if not stale_rows:
        print("  no stale samples")
    else:
        by_bucket: dict[int, list[tuple[float, int]]] = {}
        for b in buckets:
            by_bucket.setdefault(int(b["bucket"]), []).append(
                (float(b["auc"]), int(b["count"]))
            )
        rows = []
        for v in sorted(by_bucket):
            entries = by_bucket[v]
            mean_auc = sum(a for a, _ in entries) / len(entries)
            total = sum(c for _, c in entries)
            rows.append((str(v), f"{mean_auc:.4f}", str(total)))
        _print_table(("bucket", "auc", "samples"), rows)
    print()
    print("drop ratio by span:")
    _print_table(
        ("span", "drop_ratio"),
        [(r["span"], f"{float(r['drop_ratio']):.3f}") for r in metrics],
    )
    if long_format:
        long_path = run_dir / "long.csv"
        with open(long_path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(("span", "metric", "value"))
            for r in metrics:
                for key in ("auc", "logloss", "reservoir_size", "covered_weight",
                            "drop_ratio", "sample_ms", "train_ms"):
                    writer.writerow([r["span"], key, r[key]])
            for b in buckets:
                writer.writerow([b["span"], f"bucket_{b['bucket']}_auc", b["auc"]])
        print(f"\nwrote long-format data to {long_path}")


def cmd_analyze(args) -> int:
    run_dir = Path(args.run_dir)
    _analyze_one(run_dir, args.long)
    if args.other is not None:
        other = Path(args.other)
        print()
        print("=" * 60)
        _analyze_one(other, args.long)
        print()
        a = {r["span"]: r for r in _read_csv(run_dir / "metrics.csv")}
        b = {r["span"]: r for r in _read_csv(other / "metrics.csv")}
        common = sorted(set(a) & set(b), key=int)
        print(f"delta ({run_dir.name} - {other.name}):")
        rows = []
        for span in common:
            d_auc = float(a[span]["auc"]) - float(b[span]["auc"])
            d_ll = float(a[span]["logloss"]) - float(b[span]["logloss"])
            rows.append((span, f"{d_auc:+.4f}", f"{d_ll:+.4f}"))
        _print_table(("span", "d_auc", "d_logloss"), rows)
        if common:
            mean_d = sum(
                float(a[s]["auc"]) - float(b[s]["auc"]) for s in common
            ) / len(common)
            print(f"mean auc delta: {mean_d:+.4f}")
    return 0


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fesail",
        description="Staleness-aware incremental training for CTR models",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_gen = sub.add_parser("gen", help="generate a synthetic span stream")
    p_gen.add_argument("--config", required=True, help="synthetic spec INI file")
    p_gen.add_argument("--out", required=True, help="output directory for span files")
    p_gen.add_argument("--seed", type=int, default=None, help="override spec seed")
    p_gen.set_defaults(func=cmd_gen)

    p_run = sub.add_parser("run", help="run one incremental experiment")
    p_run.add_argument("--config", required=True, help="run config INI file")
    p_run.add_argument("--out", default=None, help="override output directory")
    p_run.add_argument("--seed", type=int, default=None, help="override config seed")
    p_run.add_argument("--dry-run", action="store_true",
                       help="validate config and print resolved settings")
    p_run.set_defaults(func=cmd_run)

    p_sweep = sub.add_parser("sweep", help="sweep weight funcs and biases")
    p_sweep.add_argument("--config", required=True, help="base run config INI file")
    p_sweep.add_argument("--grid", required=True, help="grid INI file")
    p_sweep.add_argument("--out", default=None, help="override output directory")
    p_sweep.add_argument("--seed", type=int, default=None, help="override config seed")
    p_sweep.set_defaults(func=cmd_sweep)

    p_an = sub.add_parser("analyze", help="summarize a finished run")
    p_an.add_argument("run_dir", help="run output directory")
    p_an.add_argument("other", nargs="?", default=None,
                      help="second run directory for a side-by-side delta")
    p_an.add_argument("--long", action="store_true",
                      help="also emit plot-ready long-format CSV")
    p_an.set_defaults(func=cmd_analyze)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    level = os.environ.get("FESAIL_LOG", "error").lower()
    if level not in _LOG_LEVELS:
        print(f"warning: unknown FESAIL_LOG level {level!r}, using 'error'", file=sys.stderr)
        level = "error"
    logging.basicConfig(level=_LOG_LEVELS[level], format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
