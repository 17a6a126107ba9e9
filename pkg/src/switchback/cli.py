"""Command line front end.

Subcommands::

    switchback calibrate PANEL.csv -o params.json
    switchback generate params.json --regime baseline -o panel.csv
    switchback design PANEL.csv --design weekly --horizon-weeks 4 -o schedule.csv
    switchback simulate CONFIG.yaml
    switchback analyze PANEL.csv SCHEDULE.csv

PANEL.csv may be a panel export (``unit,date,outcome``) or raw directional
records (``route,direction,date,value``).  ``default`` in place of
params.json selects the shipped default parameters.

Exit codes: 0 success, 1 unexpected error, 2 usage error, 3 configuration
schema error, 4 input data error, 5 design error, 6 calibration error,
7 estimation error.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import platform
import sys
from collections.abc import Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import yaml

from . import __version__
from .calibrate import DEFAULT_HARMONICS, DEFAULT_PERIOD, GeneratorParams, calibrate
from .design import default_k, fixed_assignment, read_schedule_csv, stratified_pods, switchback_assignment, write_pods_csv, write_schedule_csv
from .errors import DimensionMismatch, InputError, SchemaError, SwitchbackError
from .estimate import twfe_fit
from .evaluate import Design, ExperimentPlan, FixedSource, SyntheticSource, parse_design, pod_features, run_aa_suite, run_ab_suite, write_reports
from .generate import Perturbations, Regime, default_params, generate_panel, make_regime
from .panel import Aggregation, PanelDataset, build_panel, read_panel_csv, read_records_csv, write_panel_csv

REGIMES = [r.value for r in Regime]


# configuration ------------------------------------------------------------


@dataclass(frozen=True)
class GeneratorSettings:
    n_units: int = 80
    n_days: int = 366
    harmonics: int = DEFAULT_HARMONICS
    period: float = DEFAULT_PERIOD


@dataclass(frozen=True)
class RunConfig:
    seed: int
    input: str | None = None
    mode: str = "synthetic"
    suites: tuple[str, ...] = ("aa", "ab")
    designs: tuple[str, ...] = ("FixedPods", "WeeklySB", "DailySB")
    horizons_weeks: tuple[int, ...] = (2, 4, 6, 8, 10, 12, 14, 16)
    n_dataset_reps: int = 20
    n_splits_per_dataset: int = 10
    uplift_delta: float = 0.03
    alpha: float = 0.05
    regime: str = "baseline"
    n_strata: int | None = None
    generator: GeneratorSettings = GeneratorSettings()
    perturbations: dict[str, float] = field(default_factory=dict)
    jobs: int | None = None
    out_dir: str = "."

    def plan(self) -> ExperimentPlan:
        return ExperimentPlan(
            designs=tuple(parse_design(d) for d in self.designs),
            horizons_weeks=self.horizons_weeks,
            n_dataset_reps=self.n_dataset_reps if self.mode == "synthetic" else 1,
            n_splits_per_dataset=self.n_splits_per_dataset,
            uplift_delta=self.uplift_delta,
            alpha=self.alpha,
            regime=Regime(self.regime),
            master_seed=self.seed,
            n_strata=self.n_strata,
        )

    def perturb(self) -> Perturbations:
        base = make_regime(None, self.regime)
        return dataclasses.replace(base, **self.perturbations)

    def to_dict(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        for key in ("suites", "designs", "horizons_weeks"):
            d[key] = list(d[key])
        return d

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True)


_FIELDS: dict[str, tuple[type | tuple[type, ...], bool]] = {
    "seed": (int, True),
    "input": (str, False),
    "mode": (str, False),
    "suites": (list, False),
    "designs": (list, False),
    "horizons_weeks": (list, False),
    "n_dataset_reps": (int, False),
    "n_splits_per_dataset": (int, False),
    "uplift_delta": ((int, float), False),
    "alpha": ((int, float), False),
    "regime": (str, False),
    "n_strata": (int, False),
    "generator": (dict, False),
    "perturbations": (dict, False),
    "jobs": (int, False),
    "out_dir": (str, False),
}
_GEN_FIELDS = {"n_units": int, "n_days": int, "harmonics": int, "period": (int, float)}
_PERTURB_FIELDS = ("c_seas", "c_shock", "c_ar")


def _key_lines(text: str) -> dict[str, int]:
    """1-based line of every top-level and nested mapping key, as ``a.b`` paths."""
    try:
        root = yaml.compose(text)
    except yaml.YAMLError:
        return {}
    lines: dict[str, int] = {}

    def walk(node: Any, prefix: str) -> None:
        if isinstance(node, yaml.MappingNode):
            for k, v in node.value:
                path = f"{prefix}{k.value}"
                lines[path] = k.start_mark.line + 1
                walk(v, path + ".")

    walk(root, "")
    return lines


def _type_ok(value: Any, kind: type | tuple[type, ...]) -> bool:
    if isinstance(value, bool):
        return kind is bool
    return isinstance(value, kind)


def parse_config(text: str, *, base_dir: str | Path | None = None, check_paths: bool = True) -> RunConfig:
    """Parse and validate a YAML run configuration; raises :class:`SchemaError`."""
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise SchemaError(f"config is not valid YAML: {exc}") from exc
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise SchemaError("config must be a mapping of keys to values")
    lines = _key_lines(text)

    def fail(key: str, msg: str) -> SchemaError:
        where = f" (line {lines[key]})" if key in lines else ""
        return SchemaError(f"field '{key}'{where}: {msg}")

    for key, value in raw.items():
        if key not in _FIELDS:
            raise fail(key, "unknown key")
        kind, _ = _FIELDS[key]
        if value is None and key in ("input", "n_strata", "jobs"):
            continue
        if not _type_ok(value, kind):
            raise fail(key, f"expected {getattr(kind, '__name__', kind)}, got {type(value).__name__}")
    for key, (_, required) in _FIELDS.items():
        if required and key not in raw:
            raise SchemaError(f"missing required field '{key}'")

    kw: dict[str, Any] = {k: v for k, v in raw.items() if k not in ("generator", "perturbations")}
    seed = kw["seed"]
    if not 0 <= seed < 2**64:
        raise fail("seed", "must be a 64-bit unsigned integer")
    if "alpha" in kw and not 0 <= kw["alpha"] < 1:
        raise fail("alpha", f"must lie in [0, 1), got {kw['alpha']}")
    if "uplift_delta" in kw:
        kw["uplift_delta"] = float(kw["uplift_delta"])
    if "alpha" in kw:
        kw["alpha"] = float(kw["alpha"])
    if kw.get("mode", "synthetic") not in ("synthetic", "real"):
        raise fail("mode", "must be 'synthetic' or 'real'")
    if kw.get("regime", "baseline") not in REGIMES:
        raise fail("regime", f"must be one of {REGIMES}")
    if "suites" in kw:
        if not kw["suites"] or any(s not in ("aa", "ab") for s in kw["suites"]):
            raise fail("suites", "must be a non-empty list drawn from 'aa', 'ab'")
        kw["suites"] = tuple(kw["suites"])
    if "designs" in kw:
        try:
            kw["designs"] = tuple(parse_design(d).value for d in kw["designs"])
        except (SwitchbackError, AttributeError) as exc:
            raise fail("designs", str(exc)) from exc
        if not kw["designs"]:
            raise fail("designs", "must not be empty")
    if "horizons_weeks" in kw:
        h = kw["horizons_weeks"]
        if not h or any(not _type_ok(x, int) or x < 2 or x % 2 for x in h):
            raise fail("horizons_weeks", "must be a non-empty list of even integers >= 2")
        kw["horizons_weeks"] = tuple(h)
    for key in ("n_dataset_reps", "n_splits_per_dataset", "n_strata", "jobs"):
        if kw.get(key) is not None and kw[key] < 1:
            raise fail(key, "must be at least 1")
    if kw.get("mode") == "real" and kw.get("input") is None:
        raise fail("mode", "real-data mode requires 'input'")

    gen_raw = raw.get("generator") or {}
    for key, value in gen_raw.items():
        if key not in _GEN_FIELDS:
            raise fail(f"generator.{key}", "unknown key")
        if not _type_ok(value, _GEN_FIELDS[key]) or value <= 0:
            raise fail(f"generator.{key}", "must be a positive number")
    if "period" in gen_raw:
        gen_raw = {**gen_raw, "period": float(gen_raw["period"])}
    kw["generator"] = GeneratorSettings(**gen_raw)

    pert = raw.get("perturbations") or {}
    for key, value in pert.items():
        if key not in _PERTURB_FIELDS:
            raise fail(f"perturbations.{key}", "unknown key")
        if not _type_ok(value, (int, float)) or value < 0:
            raise fail(f"perturbations.{key}", "must be a non-negative number")
    kw["perturbations"] = {k: float(v) for k, v in sorted(pert.items())}

    cfg = RunConfig(**kw)
    if check_paths and cfg.input is not None and cfg.input != "default":
        path = Path(cfg.input) if base_dir is None else Path(base_dir) / cfg.input
        if not path.exists():
            raise fail("input", f"file not found: {path}")
    return cfg


# helpers ------------------------------------------------------------------


def _log(msg: str) -> None:
    print(msg, file=sys.stderr)


def load_panel(path: str | Path, aggregation: str = "sum") -> PanelDataset:
    with open(path, newline="") as fh:
        header = next(csv.reader(fh), [])
    if header == ["route", "direction", "date", "value"]:
        return build_panel(read_records_csv(path), Aggregation(aggregation))
    return read_panel_csv(path)


def load_params(path: str) -> GeneratorParams:
    if path == "default":
        return default_params()
    try:
        return GeneratorParams.load(path)
    except (OSError, json.JSONDecodeError, KeyError) as exc:
        raise InputError(f"cannot read generator parameters from {path}: {exc}") from exc


def manifest(command: str, config: dict[str, Any]) -> dict[str, Any]:
    return {
        "command": command,
        "config": config,
        "versions": {
            "switchback": __version__,
            "numpy": np.__version__,
            "python": platform.python_version(),
        },
    }


def _write_manifest(path: Path, command: str, config: dict[str, Any]) -> None:
    path.write_text(json.dumps(manifest(command, config), indent=2, sort_keys=True) + "\n")


# subcommands --------------------------------------------------------------


def cmd_calibrate(args: argparse.Namespace) -> int:
    panel = load_panel(args.panel, args.aggregation)
    params = calibrate(panel, args.harmonics, args.period, seed=args.seed)
    out = Path(args.output)
    params.save(out)
    for d in params.diagnostics:
        _log(f"calibrate: {d}")
    _write_manifest(
        out.with_suffix(out.suffix + ".manifest.json"),
        "calibrate",
        {"panel": str(args.panel), "harmonics": args.harmonics, "period": args.period, "seed": args.seed, "aggregation": args.aggregation},
    )
    _log(f"calibrate: wrote {out} ({panel.n_units} units, {panel.n_days} days)")
    return 0


def cmd_generate(args: argparse.Namespace) -> int:
    params = load_params(args.params)
    perturb = make_regime(params, args.regime)
    panel = generate_panel(params, args.n_units, args.n_days, perturb, args.seed)
    out = Path(args.output)
    write_panel_csv(panel, out)
    _write_manifest(
        out.with_suffix(out.suffix + ".manifest.json"),
        "generate",
        {"params": args.params, "regime": args.regime, "perturbations": dataclasses.asdict(perturb),
         "n_units": args.n_units, "n_days": args.n_days, "seed": args.seed},
    )
    _log(f"generate: wrote {out}")
    return 0


def cmd_design(args: argparse.Namespace) -> int:
    panel = load_panel(args.panel, args.aggregation)
    feats, names = pod_features(panel)
    pods = stratified_pods(feats, args.k or default_k(panel.n_units), args.seed, unit_ids=panel.unit_ids, feature_names=names)
    design = parse_design(args.design)
    h = 7 * args.horizon_weeks
    window = 2 * h if design is Design.FIXED else h
    if args.start < 0 or args.start + window > panel.n_days:
        raise InputError(f"window of {window} days from offset {args.start} exceeds the panel")
    start = panel.dates[args.start]
    if design is Design.FIXED:
        sched = fixed_assignment(pods, window, args.seed, start_date=start)
    else:
        sched = switchback_assignment(pods, h, 7 if design is Design.WEEKLY else 1, args.seed, start_date=start)
    write_schedule_csv(sched, args.output)
    if args.pods_out:
        write_pods_csv(pods, args.pods_out)
    _log(f"design: wrote {args.output}")
    return 0


def cmd_analyze(args: argparse.Namespace) -> int:
    panel = load_panel(args.panel, args.aggregation)
    sched = read_schedule_csv(args.schedule)
    try:
        rows = [panel.unit_ids.index(u) for u in sched.unit_ids]
        start = panel.dates.index(sched.dates[0])
    except ValueError as exc:
        raise DimensionMismatch(f"schedule does not fit the panel: {exc}") from exc
    if start + len(sched.dates) > panel.n_days:
        raise DimensionMismatch("schedule extends beyond the panel calendar")
    sub = PanelDataset(
        tuple(panel.unit_ids[i] for i in rows),
        sched.dates,
        panel.outcomes[rows, start : start + len(sched.dates)],
    )
    fit = twfe_fit(sub, sched)
    text = fit.to_json() + "\n"
    if args.output:
        Path(args.output).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def cmd_simulate(args: argparse.Namespace) -> int:
    config_path = Path(args.config)
    try:
        text = config_path.read_text()
    except OSError as exc:
        raise InputError(f"cannot read config: {exc}") from exc
    cfg = parse_config(text, base_dir=config_path.parent)
    overrides: dict[str, Any] = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.jobs is not None:
        overrides["jobs"] = args.jobs
    if args.out_dir is not None:
        overrides["out_dir"] = args.out_dir
    if args.regime is not None:
        overrides["regime"] = args.regime
    if args.horizons is not None:
        overrides["horizons_weeks"] = tuple(int(h) for h in args.horizons.split(","))
    if args.delta is not None:
        overrides["uplift_delta"] = args.delta
    if args.alpha is not None:
        overrides["alpha"] = args.alpha
    if overrides:
        merged = {**cfg.to_dict(), **{k: list(v) if isinstance(v, tuple) else v for k, v in overrides.items()}}
        cfg = parse_config(yaml.safe_dump(merged), base_dir=config_path.parent)

    plan = cfg.plan()
    input_path = None if cfg.input in (None, "default") else str(config_path.parent / cfg.input)
    if cfg.mode == "real":
        source = FixedSource(load_panel(input_path))
        suites = ("aa",)
    else:
        if input_path is None:
            params = default_params()
        elif input_path.endswith(".json"):
            params = load_params(input_path)
        else:
            _log("simulate: calibrating generator to input panel")
            params = calibrate(load_panel(input_path), cfg.generator.harmonics, cfg.generator.period, seed=cfg.seed)
        source = SyntheticSource(params, cfg.generator.n_units, cfg.generator.n_days, cfg.perturb())
        suites = cfg.suites

    out_dir = Path(cfg.out_dir)
    reports = []
    for suite in suites:
        _log(f"simulate: running {suite.upper()} suite ({cfg.mode}, regime={cfg.regime})")
        run = run_aa_suite if suite == "aa" else run_ab_suite
        reports.append(run(source, plan, jobs=cfg.jobs))
    written = write_reports(reports, out_dir)
    resolved = cfg.to_dict()
    resolved["jobs"] = None  # worker count never changes results
    _write_manifest(out_dir / "manifest.json", "simulate", resolved)
    for p in written:
        _log(f"simulate: wrote {p}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="switchback",
        description="Design, simulate and analyze switchback experiments on unit-day panels.",
        epilog="exit codes: 0 ok, 1 unexpected, 2 usage, 3 config schema, 4 input data, 5 design, 6 calibration, 7 estimation",
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("calibrate", help="fit generator parameters to a panel")
    p.add_argument("panel")
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--harmonics", type=int, default=DEFAULT_HARMONICS)
    p.add_argument("--period", type=float, default=DEFAULT_PERIOD)
    p.add_argument("--aggregation", choices=["sum", "mean"], default="sum")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("generate", help="simulate a panel from generator parameters")
    p.add_argument("params", help="params JSON, or 'default' for the shipped parameters")
    p.add_argument("--regime", choices=REGIMES, default="baseline")
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--n-units", type=int, default=80)
    p.add_argument("--n-days", type=int, default=366)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("design", help="build stratified pods and a schedule for a panel")
    p.add_argument("panel")
    p.add_argument("--design", choices=["fixed", "weekly", "daily"], required=True)
    p.add_argument("--horizon-weeks", type=int, required=True)
    p.add_argument("--start", type=int, default=0, help="start offset in days from the first panel date")
    p.add_argument("-k", type=int, default=None, help="number of strata (default max(2, N/10))")
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--pods-out")
    p.add_argument("--aggregation", choices=["sum", "mean"], default="sum")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_design)

    p = sub.add_parser("simulate", help="run the Monte Carlo design comparison from a YAML config")
    p.add_argument("config")
    p.add_argument("--seed", type=int)
    p.add_argument("--jobs", type=int)
    p.add_argument("--out-dir")
    p.add_argument("--regime", choices=REGIMES)
    p.add_argument("--horizons", help="comma-separated even week counts, e.g. 2,8,16")
    p.add_argument("--delta", type=float)
    p.add_argument("--alpha", type=float)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("analyze", help="fit the TWFE model for one panel and schedule")
    p.add_argument("panel")
    p.add_argument("schedule")
    p.add_argument("-o", "--output")
    p.add_argument("--aggregation", choices=["sum", "mean"], default="sum")
    p.set_defaults(func=cmd_analyze)
    return parser


def run_command(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except SwitchbackError as exc:
        _log(f"error: {exc}")
        return exc.exit_code
    except (OSError, ValueError) as exc:
        _log(f"error: {exc}")
        return 1


def main() -> None:
    sys.exit(run_command())


if __name__ == "__main__":
    main()
