"""Command-line front end: ``estimate``, ``simulate`` and ``sensitivity``.

Options can come from a TOML/JSON file given with ``--config``; flags given
on the command line win. Exit codes: 0 success, 2 usage/config error, 3 data
error, 4 numerical failure. Failures print a JSON error record on stderr.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import itertools
import json
import sys
import warnings
from pathlib import Path
from typing import Any, Optional, Sequence

import numpy as np

from . import __version__
from .design import SpecError
from .estimators import (
    DEFAULT_WEIGHT_CAP,
    KINDS,
    EstimationError,
    estimate_switcher_effect,
    fit_nuisances,
)
from .inference import influence_values, write_influence_csv
from .simulation import (
    MISSPECIFICATIONS,
    SETTINGS,
    DGPSetting,
    ScenarioSpec,
    Violation,
    results_json,
    results_table,
    run_monte_carlo,
)
from .tabular import CsvSchema, DataError, load_csv, read_config

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


class UsageError(Exception):
    pass


DEFAULTS = {
    "kind": "dr_nonparametric",
    "weight_cap": DEFAULT_WEIGHT_CAP,
    "setting": "1",
    "n_per_arm": 100,
    "replicates": 5000,
    "seed": 0,
    "misspec": "none",
    "workers": 1,
    "kinds": ",".join(KINDS),
}


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="doseswitch", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="TOML or JSON file with default options")
        sp.add_argument("--out", help="output path")
        sp.add_argument("--format", choices=("csv", "json"), help="default: from --out extension")

    def data_opts(sp):
        sp.add_argument("--data", help="subject-level CSV")
        sp.add_argument("--schema", help="TOML/JSON column mapping for --data")
        sp.add_argument("--h-spec", dest="h_spec", help="outcome model on the flexible arm")
        sp.add_argument("--weight-cap", dest="weight_cap", type=float,
                        help=f"warn when a transport weight exceeds this (default {DEFAULT_WEIGHT_CAP:g})")

    est = sub.add_parser("estimate", help="estimate the switcher effect on a dataset")
    common(est)
    data_opts(est)
    est.add_argument("--m-spec", dest="m_spec", help="outcome model on the fixed-low arm")
    est.add_argument("--sel-spec", dest="sel_spec", help="logistic model for trial membership")
    est.add_argument("--kind", choices=KINDS)
    est.add_argument("--dump-influence", dest="dump_influence", help="write per-subject influence values")

    sim = sub.add_parser("simulate", help="run the Monte Carlo study")
    common(sim)
    sim.add_argument("--setting", help="1..5, 'all', a comma list, or 'custom' with --phi/--mu")
    sim.add_argument("--phi", type=float)
    sim.add_argument("--mu", type=float)
    sim.add_argument("--n-per-arm", dest="n_per_arm", type=int)
    sim.add_argument("--replicates", type=int)
    sim.add_argument("--seed", type=int)
    sim.add_argument("--misspec", help="none|outcome|selection|both|omit_x7|proxy_x11:<rho>")
    sim.add_argument("--kinds", help="comma-separated estimator kinds")
    sim.add_argument("--workers", type=int)

    sen = sub.add_parser("sensitivity", help="estimate over a grid of m/selection models")
    common(sen)
    data_opts(sen)
    sen.add_argument("--grid", help="TOML/JSON with m_specs/sel_specs lists or explicit cells")
    sen.add_argument("--kind", choices=KINDS)
    return p


def resolve(args: argparse.Namespace) -> dict:
    cfg: dict[str, Any] = {}
    if args.config:
        try:
            cfg = read_config(args.config)
        except (OSError, ValueError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from exc
    out = dict(DEFAULTS)
    out.update({k.replace("-", "_"): v for k, v in cfg.items()})
    out.update({k: v for k, v in vars(args).items() if v is not None and k != "config"})
    return out


def config_hash(opts: dict) -> str:
    keep = {k: v for k, v in opts.items() if k not in ("out", "format", "dump_influence", "workers")}
    blob = json.dumps(keep, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def _require(opts: dict, *keys: str):
    missing = [k for k in keys if opts.get(k) in (None, "")]
    if missing:
        raise UsageError(f"{opts['command']}: missing required option(s): "
                         + ", ".join("--" + k.replace("_", "-") for k in missing))


def _schema(opts) -> CsvSchema:
    s = opts["schema"]
    try:
        return CsvSchema.from_mapping(s) if isinstance(s, dict) else CsvSchema.from_file(s)
    except (OSError, DataError) as exc:
        raise UsageError(f"cannot read schema: {exc}") from exc


def _load(opts):
    _require(opts, "data", "schema", "h_spec")
    schema = _schema(opts)
    try:
        return load_csv(opts["data"], schema)
    except OSError as exc:
        raise DataError(f"cannot read data: {exc}") from exc


def _format(opts) -> str:
    if opts.get("format"):
        return opts["format"]
    out = opts.get("out")
    return "json" if out and str(out).lower().endswith(".json") else "csv"


def _emit(opts, text: str):
    out = opts.get("out")
    if out:
        Path(out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def _csv_text(header: Sequence[str], rows: Sequence[Sequence[Any]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _provenance(opts, seed=None) -> dict:
    return {"version": __version__, "config_hash": config_hash(opts), "seed": seed}


def run_estimate(opts: dict) -> dict:
    _require(opts, "data", "schema", "h_spec", "m_spec")
    kind = opts["kind"]
    if kind not in KINDS:
        raise UsageError(f"unknown --kind {kind!r}")
    if kind != "regression":
        _require(opts, "sel_spec")
    if opts.get("dump_influence") and kind != "dr_nonparametric":
        raise UsageError("--dump-influence is only available for kind dr_nonparametric")
    data = _load(opts)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        report = estimate_switcher_effect(
            data, opts["h_spec"], opts["m_spec"], opts.get("sel_spec"), kind,
            weight_cap=opts["weight_cap"],
        )
    for w in caught:
        print(f"warning: {w.message}", file=sys.stderr)

    if opts.get("dump_influence"):
        fits = fit_nuisances(data, opts["h_spec"], opts["m_spec"], opts["sel_spec"])
        write_influence_csv(data, influence_values(data, fits, report.theta), opts["dump_influence"])

    record = {**report.to_dict(), **_provenance(opts)}
    if _format(opts) == "json":
        _emit(opts, json.dumps(record, indent=2) + "\n")
    else:
        _emit(opts, _csv_text(list(record), [[_cell(v) for v in record.values()]]))
    return record


def _settings(opts) -> list[tuple[str, float, float]]:
    raw = str(opts["setting"]).strip().lower()
    if raw == "custom":
        if opts.get("phi") is None or opts.get("mu") is None:
            raise UsageError("--setting custom needs --phi and --mu")
        return [("custom", float(opts["phi"]), float(opts["mu"]))]
    keys = list(SETTINGS) if raw == "all" else raw.split(",")
    out = []
    for k in keys:
        try:
            phi, mu = SETTINGS[int(k)]
        except (ValueError, KeyError):
            raise UsageError(f"unknown setting {k!r}; use 1..5, all, or custom") from None
        out.append((str(k), phi, mu))
    return out


def _misspec(raw: str) -> tuple[str, Violation]:
    raw = str(raw)
    if raw.startswith("proxy_x11"):
        _, _, rho = raw.partition(":")
        try:
            return "proxy_x11", Violation("proxy_x11", float(rho))
        except ValueError as exc:
            raise UsageError("--misspec proxy_x11 needs a correlation in (0, 1), e.g. proxy_x11:0.8") from exc
    if raw not in MISSPECIFICATIONS:
        raise UsageError(f"unknown --misspec {raw!r}")
    return raw, Violation("omit_x7") if raw == "omit_x7" else Violation()


def run_simulate(opts: dict) -> list:
    label, violation = _misspec(opts["misspec"])
    kinds = tuple(k.strip() for k in str(opts["kinds"]).split(",") if k.strip())
    if any(k not in KINDS for k in kinds):
        raise UsageError(f"--kinds must be drawn from {KINDS}")
    if int(opts["replicates"]) < 1 or int(opts["n_per_arm"]) < 1:
        raise UsageError("--replicates and --n-per-arm must be positive")
    seed = int(opts["seed"])
    results = []
    for name, phi, mu in _settings(opts):
        setting = DGPSetting(phi, mu, int(opts["n_per_arm"]), violation)
        spec = ScenarioSpec.build(setting, label, replicates=int(opts["replicates"]), seed=seed, kinds=kinds)
        results.append(run_monte_carlo(spec, workers=int(opts["workers"])))

    prov = _provenance(opts, seed)
    names = [n for n, _, _ in _settings(opts)]
    if _format(opts) == "json":
        body = json.loads(results_json(results))
        for name, d in zip(names, body):
            d["setting"] = name
        _emit(opts, json.dumps({"provenance": prov, "results": body}, indent=2) + "\n")
    else:
        header, rows = results_table(results)
        header = ["setting", *header, "version", "config_hash"]
        rows = [[n, *r, prov["version"], prov["config_hash"]] for n, r in zip(names, rows)]
        _emit(opts, _csv_text(header, rows))
    return results


def _grid_cells(opts) -> list[dict]:
    g = opts.get("grid")
    if g is None:
        raise UsageError("sensitivity: missing required option --grid")
    if not isinstance(g, dict):
        try:
            g = read_config(g)
        except (OSError, ValueError) as exc:
            raise UsageError(f"cannot read grid {g}: {exc}") from exc
    if "cells" in g:
        cells = [dict(c) for c in g["cells"]]
    else:
        cells = [{"m_spec": m, "sel_spec": s}
                 for m, s in itertools.product(g.get("m_specs", []), g.get("sel_specs", []))]
    if not cells:
        raise UsageError("sensitivity grid is empty")
    return cells


SENSITIVITY_FIELDS = ("theta", "se", "ci_low", "ci_high", "p_value", "theta1", "theta2", "pi_S",
                      "weight_p5", "weight_p95")


def run_sensitivity(opts: dict) -> list[dict]:
    cells = _grid_cells(opts)
    kind = opts["kind"]
    if kind not in KINDS:
        raise UsageError(f"unknown --kind {kind!r}")
    data = _load(opts)
    rows = []
    for i, cell in enumerate(cells, start=1):
        row = {"cell": i, "m_spec": cell.get("m_spec"), "sel_spec": cell.get("sel_spec")}
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                rep = estimate_switcher_effect(data, opts["h_spec"], cell["m_spec"], cell.get("sel_spec"),
                                               kind, weight_cap=opts["weight_cap"])
        except (KeyError, SpecError, DataError, EstimationError, np.linalg.LinAlgError, ValueError) as exc:
            row.update(status="failed", error=f"{type(exc).__name__}: {exc}")
            row.update({k: None for k in SENSITIVITY_FIELDS})
        else:
            row.update(status="ok", error=None)
            row.update({k: getattr(rep, k) for k in SENSITIVITY_FIELDS})
        rows.append(row)

    prov = _provenance(opts)
    if _format(opts) == "json":
        _emit(opts, json.dumps({"provenance": prov, "cells": rows}, indent=2) + "\n")
    else:
        header = list(rows[0]) + ["version", "config_hash"]
        _emit(opts, _csv_text(header, [[_cell(r[k]) for k in rows[0]] + [prov["version"], prov["config_hash"]]
                                       for r in rows]))
    return rows


COMMANDS = {"estimate": run_estimate, "simulate": run_simulate, "sensitivity": run_sensitivity}


def _fail(code: int, exc: BaseException) -> int:
    record = {"status": "error", "exit_code": code, "error_type": type(exc).__name__, "message": str(exc)}
    print(json.dumps(record), file=sys.stderr)
    return code


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        opts = resolve(args)
        COMMANDS[args.command](opts)
    except (UsageError, SpecError) as exc:
        return _fail(EXIT_USAGE, exc)
    except DataError as exc:
        return _fail(EXIT_DATA, exc)
    except (EstimationError, np.linalg.LinAlgError) as exc:
        return _fail(EXIT_NUMERIC, exc)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
