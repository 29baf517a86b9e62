"""Command-line entry point: ``caql run | selftest | report``."""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import math
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np

from .errors import CaqlError, ConfigError
from .stream import StreamConfig, generate_synthetic_stream, load_feature_csv
from .trainer import METHODS, TrainConfig, run_experiment

log = logging.getLogger("caql")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2
METRIC_COLUMNS = ("rho_avg", "rho_aft", "rho_fwt", "rmse")
SUMMARY_COLUMNS = ("run_id", "method", "seed", *METRIC_COLUMNS,
                   "deviation_mse", "stale_deviation_mse")


@dataclasses.dataclass
class RunSection:
    seeds: list[int] = dataclasses.field(default_factory=lambda: [0, 1, 2, 3, 4])
    methods: list[str] = dataclasses.field(default_factory=lambda: list(METHODS))
    stream_seed: int | None = None  # None: the stream follows each run's seed
    features_csv: str | None = None
    grades: int | None = None
    score_range: list[float] | None = None

    def validate(self) -> None:
        if not self.seeds:
            raise ConfigError("run.seeds", "at least one seed is required")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError("run.seeds", "seeds must be distinct")
        if not self.methods:
            raise ConfigError("run.methods", "at least one method is required")
        for m in self.methods:
            if m not in METHODS:
                raise ConfigError("run.methods", f"unknown method {m!r}; choose from {METHODS}")
        if self.score_range is not None and len(self.score_range) != 2:
            raise ConfigError("run.score_range", "expected [low, high]")


# fields owned by the run section rather than the per-module configs
_RESERVED = {"stream": {"seed"}, "train": {"method", "seed"}}
_SECTIONS: dict[str, type] = {"stream": StreamConfig, "train": TrainConfig, "run": RunSection}


@dataclasses.dataclass
class Manifest:
    stream: dict
    train: dict
    run: RunSection

    def stream_config(self, seed: int) -> StreamConfig:
        s = self.run.stream_seed if self.run.stream_seed is not None else seed
        return StreamConfig(seed=s, **self.stream)

    def train_config(self, method: str, seed: int) -> TrainConfig:
        return TrainConfig(method=method, seed=seed, **self.train)


def _check_type(path: str, value: Any, default: Any) -> Any:
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(path, f"expected true/false, got {value!r}")
    elif isinstance(default, (int, float)) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(path, f"expected a number, got {value!r}")
        if isinstance(default, int) and isinstance(value, float) and not value.is_integer():
            raise ConfigError(path, f"expected an integer, got {value!r}")
        return type(default)(value)
    elif isinstance(default, str) and not isinstance(value, str):
        raise ConfigError(path, f"expected a string, got {value!r}")
    elif isinstance(default, (tuple, list)):
        if not isinstance(value, list):
            raise ConfigError(path, f"expected a list, got {value!r}")
        return tuple(value) if isinstance(default, tuple) else value
    return value


def _section(name: str, raw: Any) -> dict:
    if raw is None:
        return {}
    if not isinstance(raw, dict):
        raise ConfigError(name, "section must be a JSON object")
    cls = _SECTIONS[name]
    fields = {f.name: f for f in dataclasses.fields(cls)}
    out = {}
    for key, value in raw.items():
        path = f"{name}.{key}"
        if key in _RESERVED.get(name, ()):
            raise ConfigError(path, f"set via run.{'methods' if key == 'method' else 'seeds'}")
        if key not in fields:
            raise ConfigError(path, "unknown field")
        f = fields[key]
        if f.default is not dataclasses.MISSING:
            default = f.default
        elif f.default_factory is not dataclasses.MISSING:
            default = f.default_factory()
        else:
            default = None
        out[key] = value if default is None else _check_type(path, value, default)
    return out


def parse_override(text: str) -> tuple[list[str], Any]:
    if "=" not in text:
        raise ConfigError(text, "override must look like section.field=value")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    parts = key.strip().split(".")
    if len(parts) != 2 or parts[0] not in _SECTIONS:
        raise ConfigError(key, "override path must be stream.<field>, train.<field> or run.<field>")
    return parts, value


def parse_seed_env(text: str) -> list[int]:
    try:
        return [int(tok) for tok in text.replace(" ", "").split(",") if tok]
    except ValueError:
        raise ConfigError("CAQL_SEED", f"expected comma-separated integers, got {text!r}") from None


def load_manifest(config_path=None, overrides: Sequence[str] = (), env=None) -> Manifest:
    """Read a config document, apply ``--set`` overrides and ``CAQL_SEED``, validate."""
    env = os.environ if env is None else env
    doc: dict = {}
    if config_path is not None:
        try:
            doc = json.loads(Path(config_path).read_text(encoding="utf-8"))
        except OSError as exc:
            raise ConfigError("--config", f"cannot read {config_path}: {exc.strerror}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError("--config", f"invalid JSON ({exc.msg}, line {exc.lineno})") from None
        if not isinstance(doc, dict):
            raise ConfigError("--config", "top level must be a JSON object")
        for key in doc:
            if key not in _SECTIONS:
                raise ConfigError(key, "unknown section (expected stream, train, run)")
    for text in overrides:
        (section, field), value = parse_override(text)
        doc.setdefault(section, {})[field] = value
    stream = _section("stream", doc.get("stream"))
    train = _section("train", doc.get("train"))
    run = RunSection(**_section("run", doc.get("run")))
    if env.get("CAQL_SEED"):
        run.seeds = parse_seed_env(env["CAQL_SEED"])
    run.validate()
    manifest = Manifest(stream, train, run)
    # surface schema violations before any run starts
    manifest.stream_config(run.seeds[0]).validate()
    for m in run.methods:
        manifest.train_config(m, run.seeds[0]).validate()
    return manifest


def _jsonable(obj):
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, tuple):
        return list(obj)
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")


def _clean(value):
    # JSON has no NaN/inf
    if isinstance(value, float) and not math.isfinite(value):
        return None
    if isinstance(value, dict):
        return {k: _clean(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_clean(v) for v in value]
    return value


def dumps_report(report: dict) -> str:
    return json.dumps(_clean(report), sort_keys=True, indent=2, default=_jsonable) + "\n"


def execute_run(manifest: Manifest, method: str, seed: int) -> tuple[str, dict, float]:
    """One (method, seed) experiment; returns its id, report and wall time."""
    run_id = f"{method}_seed{seed}"
    t0 = time.perf_counter()
    if manifest.run.features_csv:
        stream = load_feature_csv(manifest.run.features_csv, manifest.run.grades,
                                  tuple(manifest.run.score_range) if manifest.run.score_range else None)
        stream_cfg = None
    else:
        stream_cfg = manifest.stream_config(seed)
        stream = generate_synthetic_stream(stream_cfg)
    cfg = manifest.train_config(method, seed)
    score_range = tuple(manifest.run.score_range) if manifest.run.score_range else None
    result = run_experiment(cfg, stream, score_range)
    report = {
        "run_id": run_id,
        "config": {
            "stream": None if stream_cfg is None else dataclasses.asdict(stream_cfg),
            "train": dataclasses.asdict(cfg),
            "run": {**dataclasses.asdict(manifest.run), "seeds": [seed], "methods": [method]},
        },
        "result": result.to_dict(),
    }
    return run_id, report, time.perf_counter() - t0


def _run_job(args):
    manifest, method, seed = args
    try:
        return execute_run(manifest, method, seed), None
    except Exception as exc:  # reported with the run id by the caller
        return None, f"{type(exc).__name__}: {exc}"


def _summary_row(run_id: str, report: dict) -> dict:
    metrics = report["result"]["metrics"]
    run = report["config"]["run"]
    row = {"run_id": run_id, "method": run["methods"][0], "seed": run["seeds"][0]}
    for key in SUMMARY_COLUMNS[3:]:
        v = metrics.get(key)
        row[key] = "" if v is None else repr(float(v))
    return row


def cmd_run(args, env=None) -> int:
    try:
        manifest = load_manifest(args.config, args.set or (), env)
    except ConfigError as exc:
        print(f"config error at {exc.path}: {exc.message}", file=sys.stderr)
        return EXIT_USAGE
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    jobs = [(manifest, m, s) for m in manifest.run.methods for s in manifest.run.seeds]
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            outcomes = list(pool.map(_run_job, jobs))
    else:
        outcomes = [_run_job(j) for j in jobs]

    rows, timing, failed = [], {}, []
    for (_, method, seed), (done, error) in zip(jobs, outcomes):
        if error is not None:
            failed.append(f"{method}_seed{seed}")
            print(f"run {method}_seed{seed} failed: {error}", file=sys.stderr)
            continue
        run_id, report, seconds = done
        (out / f"{run_id}.json").write_text(dumps_report(report), encoding="utf-8")
        rows.append(_summary_row(run_id, report))
        timing[run_id] = seconds
        m = report["result"]["metrics"]
        print(f"{run_id}: rho_avg={m['rho_avg']:.4f}")
    with (out / "summary.csv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=SUMMARY_COLUMNS)
        w.writeheader()
        w.writerows(rows)
    # wall-clock numbers vary run to run, so they live outside the reports
    (out / "timing.json").write_text(json.dumps(timing, sort_keys=True, indent=2) + "\n")
    return EXIT_RUNTIME if failed else EXIT_OK


def cmd_selftest(args=None, srcc_impl: Callable | None = None) -> int:
    from .metrics import srcc
    from .selftest import run_all

    results = run_all(srcc_impl or srcc)
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        print(f"[{status}] {r.name} ({r.seconds:.2f}s)")
        for f in r.failures:
            print(f"    {f}")
    failing = [r.name for r in results if not r.passed]
    if failing:
        print(f"failing suites: {', '.join(failing)}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def _fmt(values: list[float]) -> str:
    if not values:
        return "—"
    arr = np.asarray(values, dtype=float)
    std = float(arr.std(ddof=1)) if arr.size > 1 else 0.0
    return f"{arr.mean():.4f} ± {std:.4f}"


def load_reports(run_dir) -> list[dict]:
    reports = []
    for path in sorted(Path(run_dir).glob("*.json")):
        try:
            doc = json.loads(path.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError):
            log.warning("skipping unreadable file %s", path.name)
            continue
        if isinstance(doc, dict) and "result" in doc and "config" in doc:
            reports.append(doc)
    return reports


def render_report(reports: list[dict]) -> str:
    by_method: dict[str, list[dict]] = {}
    for r in reports:
        by_method.setdefault(r["config"]["run"]["methods"][0], []).append(r)
    order = [m for m in METHODS if m in by_method] + sorted(set(by_method) - set(METHODS))

    def column(method, key):
        vals = []
        for r in by_method[method]:
            metrics = r["result"].get("metrics", {})
            if key not in metrics:
                log.warning("%s: metric %s missing", r.get("run_id", "?"), key)
                continue
            if metrics[key] is not None:
                vals.append(metrics[key])
        return vals

    lines = [
        "| method | seeds | ρ_avg | ρ_aft | ρ_fwt | rMSE |",
        "|---|---|---|---|---|---|",
    ]
    for m in order:
        cells = [_fmt(column(m, k)) for k in METRIC_COLUMNS]
        lines.append(f"| {m} | {len(by_method[m])} | " + " | ".join(cells) + " |")

    lines += ["", "| setting | method | value |", "|---|---|---|"]
    for m in order:
        stale = column(m, "stale_deviation_mse")
        if stale:
            lines.append(f"| deviation strength (stale MSE) | {m} | {_fmt(stale)} |")
            lines.append(f"| deviation after refresh (MSE) | {m} | {_fmt(column(m, 'deviation_mse'))} |")
    if "sequential_ft" in by_method:
        base = np.mean(column("sequential_ft", "rho_avg") or [np.nan])
        for m in order:
            if m == "sequential_ft":
                continue
            vals = column(m, "rho_avg")
            gain = "—" if not vals or math.isnan(base) else f"{np.mean(vals) - base:+.4f}"
            lines.append(f"| Δρ_avg vs sequential_ft | {m} | {gain} |")
    return "\n".join(lines) + "\n"


def cmd_report(args) -> int:
    run_dir = Path(args.dir)
    if not run_dir.is_dir():
        print(f"{run_dir}: not a directory", file=sys.stderr)
        return EXIT_RUNTIME
    reports = load_reports(run_dir)
    if not reports:
        print(f"{run_dir}: no run reports found", file=sys.stderr)
        return EXIT_RUNTIME
    sys.stdout.write(render_report(reports))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="caql", description="Continual AQA experiments at feature scale.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run experiments for every (method, seed)")
    run.add_argument("--config", help="JSON document with stream/train/run sections")
    run.add_argument("--set", action="append", metavar="SECTION.FIELD=VALUE",
                     help="override one config field; repeatable")
    run.add_argument("--jobs", type=int, default=1, help="parallel runs (default 1)")
    run.add_argument("--out", default="caql_runs", help="output directory")
    run.set_defaults(func=cmd_run)

    st = sub.add_parser("selftest", help="run the oracle suites")
    st.set_defaults(func=cmd_selftest)

    rep = sub.add_parser("report", help="aggregate run reports into markdown tables")
    rep.add_argument("dir")
    rep.set_defaults(func=cmd_report)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "jobs", 1) < 1:
        parser.error("--jobs must be >= 1")
    try:
        return args.func(args)
    except CaqlError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
