"""Command line: ``smartkge train | grid | eval | report``.

Settings come from an optional flat ``key = value`` config file; command
line flags override it. Grid axes are written ``grid.<key> = v1, v2, ...``
in the file or ``--grid key=v1,v2`` on the command line.
"""

from __future__ import annotations

import argparse
import dataclasses
import itertools
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from smartkge.analysis import (
    adherence_report,
    analyze_patterns,
    compute_adherence,
    load_adherence,
    save_adherence,
)
from smartkge.errors import ConfigError, DataError, SmartError
from smartkge.evaluation import HITS_AT, METRIC_COLUMNS, evaluate, metrics_rows_tsv
from smartkge.geometry import format_order
from smartkge.kgdata import KnowledgeGraph, load_dataset
from smartkge.model import ModelConfig, load_checkpoint, read_checkpoint_header, save_checkpoint
from smartkge.training import PHASES, run_smart

log = logging.getLogger("smartkge")

MODEL_KEYS = {f.name for f in dataclasses.fields(ModelConfig)}
PATH_KEYS = ("train", "valid", "test", "adherence_in", "adherence_out", "out_dir")
SUMMARY_METRICS = ("mrr_x1000", "h1", "h3", "h10")


@dataclass
class ExperimentConfig:
    train: str | None = None
    valid: str | None = None
    test: str | None = None
    model: ModelConfig = field(default_factory=ModelConfig)
    runs: int = 1
    adherence_in: str | None = None
    adherence_out: str | None = None
    grid: dict[str, list] = field(default_factory=dict)
    out_dir: str = "smart_out"

    def dataset(self) -> KnowledgeGraph:
        missing = [k for k in ("train", "valid", "test") if getattr(self, k) is None]
        if missing:
            raise ConfigError(f"missing dataset path(s): {', '.join('--' + k for k in missing)}")
        try:
            return load_dataset(self.train, self.valid, self.test)
        except OSError as exc:
            raise DataError(str(exc)) from None


def _norm_key(key: str) -> str:
    return key.strip().replace("-", "_")


def _coerce(key: str, value: str):
    """Convert a text value to the type of the matching ModelConfig field."""
    value = value.strip()
    if key == "egt_order" or key == "variant":
        return value
    if key == "cross_phase_stop":
        lowered = value.lower()
        if lowered in ("on", "true", "yes", "1"):
            return True
        if lowered in ("off", "false", "no", "0"):
            return False
        raise ConfigError(f"cross-phase-stop must be on or off, got {value!r}")
    if key == "epsilon":
        return None if value.lower() in ("", "none") else float(value)
    kind = {f.name: f.type for f in dataclasses.fields(ModelConfig)}.get(key)
    try:
        if kind == "int" or key in ("runs",):
            return int(value)
        return float(value)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {value!r}") from None


def read_config_file(path) -> dict[str, str]:
    values: dict[str, str] = {}
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise ConfigError(f"cannot read config file: {exc}") from None
    for lineno, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, value = line.split("=", 1)
        values[key.strip()] = value.strip()
    return values


def build_config(file_values: dict[str, str], overrides: dict[str, object], grid_args=()) -> ExperimentConfig:
    merged = {_norm_key(k): v for k, v in file_values.items()}
    merged.update({k: v for k, v in overrides.items() if v is not None})
    grid: dict[str, list] = {}
    for spec in grid_args:
        if "=" not in spec:
            raise ConfigError(f"--grid expects key=v1,v2,... got {spec!r}")
        key, values = spec.split("=", 1)
        merged["grid." + _norm_key(key)] = values

    model_kwargs, exp_kwargs = {}, {}
    for key, value in merged.items():
        if key.startswith("grid."):
            name = _norm_key(key[5:])
            if name not in MODEL_KEYS:
                raise ConfigError(f"cannot grid over {name!r}")
            items = [v for v in str(value).split(",") if v.strip()]
            if not items:
                raise ConfigError(f"grid axis {name} is empty")
            grid[name] = [_coerce(name, v) for v in items]
        elif key in MODEL_KEYS:
            model_kwargs[key] = _coerce(key, value) if isinstance(value, str) else value
        elif key in PATH_KEYS:
            exp_kwargs[key] = str(value)
        elif key == "runs":
            exp_kwargs["runs"] = int(value)
        else:
            raise ConfigError(f"unknown setting {key!r}")
    try:
        model = ModelConfig(**model_kwargs)
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from None
    config = ExperimentConfig(model=model, grid=grid, **exp_kwargs)
    if config.runs < 1:
        raise ConfigError("runs must be >= 1")
    return config


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")


def _log_tsv(report) -> str:
    lines = ["step\tloss\tvalid_mrr"]
    for step, loss, mrr in report.log:
        lines.append(f"{step}\t{loss!r}\t{mrr!r}")
    return "\n".join(lines) + "\n"


def read_metrics_tsv(path) -> list[dict[str, str]]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    header = lines[0].split("\t")
    return [dict(zip(header, line.split("\t"))) for line in lines[1:] if line]


def summarize(metric_files: list[Path], variant: str, dim: int) -> tuple[str, str]:
    """Mean and population std of the ``final`` rows; returns (tsv, markdown)."""
    values = {m: [] for m in SUMMARY_METRICS}
    for path in metric_files:
        final = [row for row in read_metrics_tsv(path) if row["phase"] == "final"]
        if len(final) != 1:
            raise DataError(f"{path}: expected exactly one 'final' row")
        for m in SUMMARY_METRICS:
            values[m].append(float(final[0][m]))
    n = len(metric_files)
    tsv = ["variant\tdim\tn_runs\tmetric\tmean\tstd"]
    md = [f"# {variant} (d={dim}, {n} run{'s' if n != 1 else ''})", "", "| metric | mean | std |", "|---|---|---|"]
    for m in SUMMARY_METRICS:
        arr = np.array(values[m])
        mean, std = float(arr.mean()), float(arr.std())
        tsv.append(f"{variant}\t{dim}\t{n}\t{m}\t{mean!r}\t{std!r}")
        md.append(f"| {m} | {mean:.2f} | {std:.2f} |")
    return "\n".join(tsv) + "\n", "\n".join(md) + "\n"


def cmd_train(config: ExperimentConfig) -> int:
    kg = config.dataset()
    if not kg.test:
        raise DataError("test split is empty")
    model = config.model
    out = Path(config.out_dir)
    adherence = load_adherence(config.adherence_in, kg) if config.adherence_in else None
    metric_files, selections = [], []
    for run in range(config.runs):
        cfg = model.replace(seed=model.seed + run)
        log.info("run %d/%d (seed %d)", run + 1, config.runs, cfg.seed)
        result = run_smart(kg, cfg, np.random.default_rng(cfg.seed), adherence, evaluate_phases=True)
        run_dir = out / f"run_{run}"
        run_dir.mkdir(parents=True, exist_ok=True)
        save_checkpoint(run_dir / "checkpoint.bin", result.state, result.att)
        for report in result.reports:
            _write(run_dir / f"log_{report.phase}.tsv", _log_tsv(report))
        rows = [
            (cfg.variant.value, label, cfg.dim, result.phase_test_metrics[label])
            for label in (c.label for c in result.candidates)
        ]
        rows.append((cfg.variant.value, "final", cfg.dim, result.test_metrics))
        _write(run_dir / "metrics.tsv", metrics_rows_tsv(rows))
        _write(run_dir / "returned_phase.txt", result.returned_phase + "\n")
        metric_files.append(run_dir / "metrics.tsv")
        selections.append((run, result.selections))
        log.info("run %d test: %s (returned %s)", run, result.test_metrics, result.returned_phase)

    table = compute_adherence(selections)
    save_adherence(table, out / "adherence.tsv", kg, model.egt_order)
    if config.adherence_out:
        save_adherence(table, config.adherence_out, kg, model.egt_order)
    profiles = analyze_patterns(kg)
    _write(out / "adherence_report.tsv", adherence_report(table, profiles, kg, model.egt_order, "tsv"))
    _write(out / "adherence_report.md", adherence_report(table, profiles, kg, model.egt_order, "markdown"))
    tsv, md = summarize(metric_files, model.variant.value, model.dim)
    _write(out / "summary.tsv", tsv)
    _write(out / "summary.md", md)
    print(md, end="")
    return 0


def grid_cells(grid: dict[str, list]) -> list[dict[str, object]]:
    keys = list(grid)
    return [dict(zip(keys, combo)) for combo in itertools.product(*(grid[k] for k in keys))]


def cmd_grid(config: ExperimentConfig) -> int:
    if not config.grid:
        raise ConfigError("grid is empty; give --grid key=v1,v2 or grid.<key> lines")
    kg = config.dataset()
    adherence = load_adherence(config.adherence_in, kg) if config.adherence_in else None
    cells = grid_cells(config.grid)
    keys = list(config.grid)
    header = ["cell"] + keys + ["valid_mrr", "returned_phase"] + list(METRIC_COLUMNS[3:])
    lines = ["\t".join(header)]
    best_idx, best_mrr = None, -np.inf
    for idx, cell in enumerate(cells):
        try:
            cfg = config.model.replace(**cell)
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"grid cell {cell}: {exc}") from None
        result = run_smart(kg, cfg, np.random.default_rng(cfg.seed), adherence, evaluate_test=bool(kg.test))
        chosen = next(c for c in result.candidates if c.label == result.returned_phase)
        valid = chosen.valid_mrr
        metrics = result.test_metrics.row() if result.test_metrics else {}
        cells_out = [str(idx)] + [_fmt_value(cell[k]) for k in keys] + [repr(valid), result.returned_phase]
        cells_out += [repr(float(metrics[m])) if m in metrics else "" for m in ("mrr_x1000", "h1", "h3", "h10")]
        cells_out.append(str(metrics.get("n_queries", "")))
        lines.append("\t".join(cells_out))
        if best_idx is None or valid > best_mrr:
            best_idx, best_mrr = idx, valid
        log.info("cell %d %s valid MRR %.4f", idx, cell, valid)
    out = Path(config.out_dir)
    _write(out / "grid.tsv", "\n".join(lines) + "\n")
    best = cells[best_idx]
    best_text = f"best cell {best_idx}: " + ", ".join(f"{k}={_fmt_value(v)}" for k, v in best.items())
    best_text += f" (valid MRR {best_mrr:.4f})\n"
    _write(out / "grid_best.txt", best_text)
    print(best_text, end="")
    return 0


def _fmt_value(value) -> str:
    if isinstance(value, bool):
        return "on" if value else "off"
    return str(value)


def cmd_eval(checkpoint, kg: KnowledgeGraph, split: str = "test", norm: int = 2) -> int:
    n_ent, n_rel, d, _, _ = read_checkpoint_header(checkpoint)
    if (n_ent, n_rel) != (kg.n_entities, kg.n_relations):
        raise DataError(
            f"vocabulary mismatch: checkpoint expects {n_ent} entities / {n_rel} relations, "
            f"dataset has {kg.n_entities} entities / {kg.n_relations} relations"
        )
    if not kg.split(split):
        raise DataError(f"{split} split is empty")
    state, att = load_checkpoint(checkpoint)
    report = evaluate(state, att, kg, split, norm)
    print(f"{split}: {report}")
    return 0


def cmd_report(kg: KnowledgeGraph, adherence_path, out_dir, order) -> int:
    table = load_adherence(adherence_path, kg)
    profiles = analyze_patterns(kg)
    out = Path(out_dir)
    tsv = adherence_report(table, profiles, kg, order, "tsv")
    _write(out / "adherence_report.tsv", tsv)
    _write(out / "adherence_report.md", adherence_report(table, profiles, kg, order, "markdown"))
    print(tsv, end="")
    return 0


def _add_data_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--train")
    p.add_argument("--valid")
    p.add_argument("--test")


def _add_model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key = value settings file")
    _add_data_flags(p)
    p.add_argument("--dim", type=int)
    p.add_argument("--gamma", type=float)
    p.add_argument("--alpha", type=float)
    p.add_argument("--eta", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--rho", type=float)
    p.add_argument("--norm", type=int, choices=(1, 2))
    p.add_argument("--variant", choices=("smart", "smart-m", "smart-gt"))
    p.add_argument("--epsilon", type=float)
    p.add_argument("--steps-t", dest="steps_t", type=int)
    p.add_argument("--steps-ta", dest="steps_ta", type=int)
    p.add_argument("--steps-f", dest="steps_f", type=int)
    p.add_argument("--valid-every", dest="valid_every", type=int)
    p.add_argument("--patience", type=int)
    p.add_argument("--cross-phase-stop", dest="cross_phase_stop", choices=("on", "off"))
    p.add_argument("--runs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--egt-order", dest="egt_order", help="comma list, e.g. Trans,Rot,Ref,Scal")
    p.add_argument("--adherence-in", dest="adherence_in")
    p.add_argument("--adherence-out", dest="adherence_out")
    p.add_argument("--out-dir", dest="out_dir")


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="smartkge", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    train = sub.add_parser("train", help="multi-run training with adherence and summary")
    _add_model_flags(train)

    grid = sub.add_parser("grid", help="grid search, one seed per cell")
    _add_model_flags(grid)
    grid.add_argument("--grid", action="append", default=[], metavar="KEY=V1,V2")

    ev = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    ev.add_argument("checkpoint")
    _add_data_flags(ev)
    ev.add_argument("--split", default="test", choices=("train", "valid", "test"))
    ev.add_argument("--norm", type=int, choices=(1, 2), default=2)

    rep = sub.add_parser("report", help="adherence report with relational pattern checks")
    _add_data_flags(rep)
    rep.add_argument("--adherence-in", dest="adherence_in", required=True)
    rep.add_argument("--egt-order", dest="egt_order", default="Trans,Rot,Ref,Scal")
    rep.add_argument("--out-dir", dest="out_dir", default="smart_out")
    return parser


def _experiment_from_args(args) -> ExperimentConfig:
    file_values = read_config_file(args.config) if args.config else {}
    skip = {"config", "command", "verbose", "grid"}
    overrides = {k: v for k, v in vars(args).items() if k not in skip}
    return build_config(file_values, overrides, getattr(args, "grid", ()))


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "train":
            return cmd_train(_experiment_from_args(args))
        if args.command == "grid":
            return cmd_grid(_experiment_from_args(args))
        config = build_config({}, {"train": args.train, "valid": args.valid, "test": args.test})
        kg = config.dataset()
        if args.command == "eval":
            return cmd_eval(args.checkpoint, kg, args.split, args.norm)
        from smartkge.geometry import parse_order

        return cmd_report(kg, args.adherence_in, args.out_dir, parse_order(args.egt_order))
    except SmartError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return DataError.exit_code


if __name__ == "__main__":
    sys.exit(main())
