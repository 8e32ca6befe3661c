"""Command line entry point: ``coarsened-slm {simulate,fit,impacts,benchmark,report}``.

Exit codes: 0 success, 2 usage or validation error, 3 too many skipped
replications in a benchmark.
"""

from __future__ import annotations

import argparse
import glob
import json
import os
import sys
from dataclasses import asdict, replace
from pathlib import Path

import jsonschema
import numpy as np

from . import io as cio
from .estimators import METHODS, CoarsenedDataset, DmeConfig, coarsened_intensity, fit_method
from .geometry import GeometryError, Partition
from .impacts import impacts_exact, impacts_mc
from .simulation import (
    SCALES,
    SkipRateError,
    get_scenario,
    make_shared,
    run_scenario,
    scenario_catalog,
    simulate_replication,
)
from .slm import KappaSpec, build_weight_matrix

EXIT_OK, EXIT_USAGE, EXIT_QUALITY = 0, 2, 3

_NUM = {"type": "number"}
_POS = {"type": "number", "exclusiveMinimum": 0}
_INT1 = {"type": "integer", "minimum": 1}
_POINT = {"type": "array", "items": _NUM, "minItems": 2, "maxItems": 2}

CONFIG_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "scenario": {"type": "string"},
        "methods": {"type": "array", "items": {"enum": list(METHODS)}, "minItems": 1},
        "seed": {"type": "integer", "minimum": 0},
        "scale": {"enum": list(SCALES)},
        "workers": _INT1,
        "replications": _INT1,
        "overrides": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "n": {"type": "integer", "minimum": 2},
                "rho": {"type": "number", "exclusiveMinimum": -1, "exclusiveMaximum": 1},
                "beta": {"type": "array", "items": _NUM, "minItems": 2},
                "sigma2": _POS,
                "side": _POS,
                "kappa_threshold": _POS,
                "coarsening": {
                    "type": "object",
                    "additionalProperties": False,
                    "properties": {
                        "kind": {"enum": ["constant", "intensity"]},
                        "prob": {"type": "number", "minimum": 0, "maximum": 1},
                        "sign": {"enum": [-1, 1]},
                        "low": {"type": "number", "minimum": 0, "maximum": 1},
                        "high": {"type": "number", "minimum": 0, "maximum": 1},
                        "mean": {"type": "number", "minimum": 0, "maximum": 1},
                    },
                },
                "intensity": {
                    "type": "object",
                    "additionalProperties": False,
                    "required": ["base"],
                    "properties": {
                        "kind": {"enum": ["bumps", "constant"]},
                        "base": {"type": "number", "minimum": 0},
                        "bumps": {
                            "type": "array",
                            "items": {"type": "array", "items": _NUM, "minItems": 4, "maxItems": 4},
                        },
                    },
                },
                "window": {"type": "array", "items": _POINT, "minItems": 3},
            },
        },
        "dme": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "draws": _INT1,
                "population": {"type": "integer", "minimum": 2},
                "elite_fraction": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                "smoothing": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
                "max_iters": _INT1,
                "variance_tolerance": _POS,
                "init_sd": _POS,
                "bandwidth": _POS,
                "grid": {"type": "array", "items": _INT1, "minItems": 2, "maxItems": 2},
            },
        },
        "impacts": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "draws": _INT1,
                "truncation": {"type": "integer", "minimum": 0},
                "mode": {"enum": ["conditional", "unconditional"]},
            },
        },
    },
}


class UsageError(Exception):
    pass


def load_config(path) -> dict:
    if path is None:
        return {}
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from None
    try:
        jsonschema.validate(doc, CONFIG_SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise UsageError(f"invalid config {path} at {where}: {exc.message}") from None
    return doc


def _settings(args) -> dict:
    """Merge the config file with command-line flags (flags win)."""
    cfg = load_config(getattr(args, "config", None))
    for key in ("scenario", "seed", "scale", "workers"):
        value = getattr(args, key, None)
        if value is not None:
            cfg[key] = value
    if getattr(args, "methods", None):
        cfg["methods"] = _parse_methods(args.methods)
    cfg.setdefault("scale", "desk")
    cfg.setdefault("workers", os.cpu_count() or 1)
    return cfg


def _parse_methods(text):
    methods = [m.strip().upper() for m in str(text).split(",") if m.strip()]
    bad = [m for m in methods if m not in METHODS]
    if bad or not methods:
        raise UsageError(f"unknown method(s) {', '.join(bad) or '<none>'}; choose from {', '.join(METHODS)}")
    return methods


def _scenario(cfg, scenario_id=None):
    sid = scenario_id or cfg.get("scenario", "A")
    try:
        sc = get_scenario(sid)
    except KeyError as exc:
        raise UsageError(str(exc.args[0])) from None
    sc = sc.at_scale(cfg["scale"])
    over = dict(cfg.get("overrides", {}))
    if "coarsening" in over:
        over["coarsening"] = replace(sc.coarsening, **over["coarsening"])
    if "beta" in over:
        over["beta"] = tuple(over["beta"])
    if "window" in over:
        over["window"] = tuple(tuple(v) for v in over["window"])
    if "intensity" in over:
        over["intensity"] = {"kind": "bumps", **over["intensity"]}
    if "seed" in cfg:
        over["seed"] = cfg["seed"]
    if "replications" in cfg:
        over["replications"] = cfg["replications"]
    try:
        return replace(sc, **over)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _dme_config(cfg) -> DmeConfig:
    scale = SCALES[cfg["scale"]]
    base = {"draws": scale["draws"], "population": scale["population"]}
    base.update(cfg.get("dme", {}))
    if "grid" in base:
        base["grid"] = tuple(base["grid"])
    try:
        return DmeConfig(**base)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _impact_settings(cfg):
    doc = {"draws": SCALES[cfg["scale"]]["impact_draws"], "truncation": 30, "mode": "conditional"}
    doc.update(cfg.get("impacts", {}))
    return doc


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path, doc):
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")


# ----------------------------------------------------------------------------
# commands


def cmd_simulate(args) -> int:
    cfg = _settings(args)
    sc = _scenario(cfg)
    out = _out_dir(args)
    shared = make_shared(sc)
    data = simulate_replication(shared, args.replication)
    cio.write_points(out / "points.csv", data.coords, data.flags)
    cio.write_points(out / "true_points.csv", data.true_coords,
                     replace(data.flags, observed=np.ones(data.n, dtype=bool)))
    cio.write_dataset(out / "dataset.csv", data.y, data.X)
    cio._write(out / "flags.csv", ["id", "observed", "region"],
               ((i, bool(o), int(r)) for i, (o, r) in enumerate(zip(data.flags.observed, data.flags.regions))))
    dme = _dme_config(cfg)
    if data.flags.p > 0:
        coarsened_intensity(data, dme.bandwidth, dme.grid).to_csv(out / "intensity.csv")
    data.partition.to_json(out / "partition.json")
    _write_json(out / "scenario.json", {"scenario": sc.to_dict(), "replication": args.replication})
    print(f"wrote {data.n} units ({data.flags.p} observed) to {out}")
    return EXIT_OK


def _load_data(data_dir) -> tuple[CoarsenedDataset, KappaSpec]:
    d = Path(data_dir)
    try:
        coords, flags = cio.read_points(d / "points.csv")
        y, X = cio.read_dataset(d / "dataset.csv")
        partition = Partition.from_json(d / "partition.json")
        true_coords = None
        if (d / "true_points.csv").exists():
            true_coords, _ = cio.read_points(d / "true_points.csv")
    except OSError as exc:
        raise UsageError(f"cannot read dataset files: {exc}") from None
    kappa = KappaSpec.indicator(0.5)
    meta = d / "scenario.json"
    if meta.exists():
        with open(meta) as fh:
            kappa = KappaSpec.indicator(json.load(fh)["scenario"]["kappa_threshold"])
    if len(y) != flags.n:
        raise UsageError(f"dataset.csv has {len(y)} rows but points.csv has {flags.n}")
    try:
        data = CoarsenedDataset(y, X, coords, flags, partition, true_coords=true_coords)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    return data, kappa


def _impacts_for(res, data, kappa, settings, rng):
    W = res.diagnostics.get("W")
    if W is not None:
        return impacts_exact(res.rho, res.beta, W)
    field_ = res.diagnostics.get("field")
    if field_ is None:
        return impacts_exact(res.rho, res.beta, build_weight_matrix(data.coords, kappa))
    imp, _ = impacts_mc(
        res.rho, res.beta, data.observed_coords, data.observed, data.flags.regions, field_,
        data.partition, kappa, rng, n_draws=settings["draws"], truncation=settings["truncation"],
        mode=settings["mode"],
    )
    return imp


def cmd_fit(args) -> int:
    cfg = _settings(args)
    methods = cfg.get("methods", list(METHODS))
    data, kappa = _load_data(args.data)
    if "NCM" in methods and data.true_coords is None:
        raise UsageError("NCM needs true_points.csv next to the dataset")
    dme = _dme_config(cfg)
    settings = _impact_settings(cfg)
    seed = cfg.get("seed", 0)
    out = _out_dir(args)
    k = data.k
    head = ["method", "rho"] + [f"beta{j}" for j in range(k)] + ["sigma2"]
    head += [f"{t}{j}" for j in range(k) for t in ("T", "D", "M")]
    head += ["converged", "iterations", "objective"]
    lines = [",".join(head)]
    timings = {}
    for i, m in enumerate(methods):
        rng = np.random.default_rng([seed, i])
        res = fit_method(m, data, kappa, dme, rng=rng)
        imp = _impacts_for(res, data, kappa, settings, rng)
        row = [m, res.rho, *res.beta, res.sigma2]
        for j in range(k):
            row += [imp.total[j], imp.direct[j], imp.indirect[j]]
        row += [bool(res.converged), res.iterations, res.objective]
        lines.append(",".join(v if isinstance(v, str) else cio.fmt(v) for v in row))
        timings[m] = res.seconds
    (out / "estimates.csv").write_text("\n".join(lines) + "\n")
    _write_json(out / "estimates_meta.json", {"seed": seed, "seconds": timings, "dme": asdict(dme)})
    print("\n".join(lines))
    return EXIT_OK


def cmd_impacts(args) -> int:
    cfg = _settings(args)
    data, kappa = _load_data(args.data)
    settings = _impact_settings(cfg)
    beta = np.asarray(args.beta, dtype=float)
    if len(beta) != data.k:
        raise UsageError(f"--beta needs {data.k} values")
    rng = np.random.default_rng(cfg.get("seed", 0))
    if data.flags.p == data.n:
        imp = impacts_exact(args.rho, beta, build_weight_matrix(data.coords, kappa))
    else:
        field_ = coarsened_intensity(data, _dme_config(cfg).bandwidth, _dme_config(cfg).grid)
        imp, _ = impacts_mc(
            args.rho, beta, data.observed_coords, data.observed, data.flags.regions, field_,
            data.partition, kappa, rng, n_draws=settings["draws"],
            truncation=settings["truncation"], mode=settings["mode"],
        )
    lines = ["regressor,total,direct,indirect"]
    lines += [f"{j},{cio.fmt(imp.total[j])},{cio.fmt(imp.direct[j])},{cio.fmt(imp.indirect[j])}"
              for j in range(data.k)]
    out = _out_dir(args)
    (out / "impacts.csv").write_text("\n".join(lines) + "\n")
    print("\n".join(lines))
    return EXIT_OK


def cmd_benchmark(args) -> int:
    cfg = _settings(args)
    ids = cfg.get("scenario", "A")
    ids = list(scenario_catalog()) if ids.lower() == "all" else [s.strip().upper() for s in ids.split(",")]
    methods = cfg.get("methods", list(METHODS))
    dme = _dme_config(cfg)
    settings = _impact_settings(cfg)
    out = _out_dir(args)
    status = EXIT_OK
    report = {}
    for sid in ids:
        sc = _scenario(cfg, sid)
        try:
            table = run_scenario(sc, methods, dme, workers=cfg["workers"],
                                 impact_draws=settings["draws"], truncation=settings["truncation"])
        except SkipRateError as exc:
            print(f"error: {exc}", file=sys.stderr)
            table, status = exc.table, EXIT_QUALITY
        table.meta["scale"] = cfg["scale"]
        table.to_csv(out / f"table_{sid}.csv")
        table.to_json(out / f"table_{sid}.json")
        report[sid] = {"replications": table.meta["replications"], "skips": table.skips}
        print(f"scenario {sid}")
        print("\n".join(table.csv_lines()))
        if any(table.skips.values()):
            print(f"skipped replications: {table.skips}")
    _write_json(out / "benchmark.json", report)
    return status


def cmd_report(args) -> int:
    """Collect ``table_*.json`` files into one Markdown summary."""
    src = Path(args.input or args.out)
    files = sorted(glob.glob(str(src / "table_*.json")))
    if not files:
        raise UsageError(f"no table_*.json files in {src}")
    lines = []
    for path in files:
        with open(path) as fh:
            doc = json.load(fh)
        qs = doc["quantities"]
        lines.append(f"## Scenario {doc['scenario']} ({doc['meta']['replications']} replications)")
        lines.append("")
        lines.append("| method | " + " | ".join(qs) + " |")
        lines.append("|---" * (len(qs) + 1) + "|")
        for m, row in doc["cells"].items():
            cells = [f"{cio.fmt(row[q]['rrmse'])} ({cio.fmt(row[q]['rbias'])})" for q in qs]
            lines.append(f"| {m} | " + " | ".join(cells) + " |")
        lines.append("")
    out = _out_dir(args)
    (out / "report.md").write_text("\n".join(lines))
    print("\n".join(lines))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="coarsened-slm", description=__doc__.splitlines()[0])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--seed", type=int)
    common.add_argument("--scale", choices=list(SCALES))
    common.add_argument("--workers", type=int, help="parallel workers (default: all cores)")
    common.add_argument("--out", default=".", help="output directory")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", parents=[common], help="draw one dataset from a scenario")
    p.add_argument("--scenario")
    p.add_argument("--replication", type=int, default=0)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("fit", parents=[common], help="fit methods to a dataset directory")
    p.add_argument("--data", required=True, help="directory written by simulate")
    p.add_argument("--methods")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("impacts", parents=[common], help="average impacts for given parameters")
    p.add_argument("--data", required=True)
    p.add_argument("--rho", type=float, required=True)
    p.add_argument("--beta", type=float, nargs="+", required=True)
    p.set_defaults(func=cmd_impacts)

    p = sub.add_parser("benchmark", parents=[common], help="Monte Carlo bias/RMSE tables")
    p.add_argument("--scenario", help="scenario id, comma list, or 'all'")
    p.add_argument("--methods")
    p.set_defaults(func=cmd_benchmark)

    p = sub.add_parser("report", parents=[common], help="summarise benchmark tables")
    p.add_argument("--input", help="directory with table_*.json (default: --out)")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if getattr(args, "workers", None) is not None and args.workers < 1:
        print("error: --workers must be at least 1", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except (UsageError, cio.DataFormatError, GeometryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
