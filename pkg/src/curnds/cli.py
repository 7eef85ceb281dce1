"""
Command-line interface.

Commands: fit, forecast, rolling, simulate, renumber, report. Run
``curnds <command> --help`` for the flags of each. Options may also come from
a JSON file given with ``--config``; flags override file values. Errors are
reported as a single JSON line on stderr and mapped to exit codes
0 success, 2 I/O, 3 config/argument/data, 4 numerical, 5 fit failure.
"""
from __future__ import annotations

import argparse
import csv
import datetime as dt
import json
import logging
import sys
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import __version__
from .baselines import (BASELINES, holt_progressive, holt_rolling, seir_fit, seir_forecast,
                        seir_rolling)
from .data import COLUMNS, load_csv, smooth_7day
from .errors import ArgumentError, ConfigError, CurndsError, DataError
from .fitting import SPLINE_NAMES, FitConfig, FitResult, fit
from .forecast import MetricsTable, progressive_forecast, rolling_forecast
from .model import COMPARTMENTS, CurndsParams, FullState, effective_reproduction, initial_state, simulate
from .spline import EXTRAPOLATIONS, HOLD_LAST

log = logging.getLogger("curnds")

IO_EXIT = 2
RUN_KEYS = ("population", "fit", "window", "horizon", "baselines", "start", "end", "workers",
            "extrapolation")


class IOFailure(CurndsError):
    code = "E_IO"
    exit_code = IO_EXIT


@dataclass(frozen=True)
class RunConfig:
    """Validated options of one CLI invocation, echoed into every output."""

    command: str
    population: int | None = None
    fit: FitConfig = field(default_factory=FitConfig)
    window: int = 30
    horizon: int = 5
    baselines: tuple = ()
    start: str | None = None
    end: str | None = None
    workers: int = 1
    extrapolation: str = HOLD_LAST

    def __post_init__(self):
        for name in ("window", "horizon", "workers"):
            v = getattr(self, name)
            if not isinstance(v, int) or isinstance(v, bool) or v < 1:
                raise ConfigError(f"{name} must be a positive integer, got {v!r}")
        if self.population is not None:
            if not isinstance(self.population, int) or isinstance(self.population, bool) \
                    or self.population <= 0:
                raise ConfigError("population must be a positive integer")
        unknown = set(self.baselines) - set(BASELINES)
        if unknown:
            raise ConfigError(f"unknown baseline(s): {', '.join(sorted(unknown))}")
        for name in ("start", "end"):
            v = getattr(self, name)
            if v is not None:
                try:
                    dt.date.fromisoformat(v)
                except (TypeError, ValueError):
                    raise ConfigError(f"{name} must be an ISO date, got {v!r}") from None
        if self.extrapolation not in EXTRAPOLATIONS:
            raise ConfigError(f"extrapolation must be one of {', '.join(EXTRAPOLATIONS)}")

    @property
    def seed(self):
        return self.fit.seed

    def to_dict(self):
        d = asdict(self)
        d["fit"] = self.fit.to_dict()
        d["baselines"] = list(self.baselines)
        return d


def _read_json(path, what):
    try:
        with open(path) as fh:
            return json.load(fh)
    except OSError as exc:
        raise IOFailure(f"cannot read {what} {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        err = ConfigError if what == "config" else DataError
        raise err(f"{what} {path} is not valid JSON: {exc.msg} at line {exc.lineno}") from None


def _parse_baselines(value):
    if value is None:
        return None
    if isinstance(value, str):
        value = [v for v in value.split(",") if v.strip()]
    if not isinstance(value, (list, tuple)):
        raise ConfigError("baselines must be a list or a comma-separated string")
    return tuple(v.strip().lower() for v in value)


def build_run_config(args):
    """Merge the JSON config file (if any) with command-line flags."""
    file_cfg = {}
    if getattr(args, "config", None):
        file_cfg = _read_json(args.config, "config")
        if not isinstance(file_cfg, dict):
            raise ConfigError("config file must hold a JSON object")
        unknown = set(file_cfg) - set(RUN_KEYS)
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(sorted(unknown))}")
    fit_dict = file_cfg.get("fit", {})
    if not isinstance(fit_dict, dict):
        raise ConfigError("config key 'fit' must be an object")
    fit_dict = dict(fit_dict)
    if getattr(args, "seed", None) is not None:
        fit_dict["seed"] = args.seed
    values = {k: file_cfg[k] for k in RUN_KEYS if k in file_cfg and k != "fit"}
    for key in ("population", "window", "horizon", "start", "end", "workers", "extrapolation"):
        v = getattr(args, key, None)
        if v is not None:
            values[key] = v
    if "baselines" in values:
        values["baselines"] = _parse_baselines(values["baselines"])
    flag_baselines = _parse_baselines(getattr(args, "baselines", None))
    if flag_baselines is not None:
        values["baselines"] = flag_baselines
    try:
        return RunConfig(command=args.command, fit=FitConfig.from_dict(fit_dict), **values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def provenance(run, timestamp=True):
    out = {"artifact": "curnds", "version": __version__, "command": run.command,
           "seed": run.seed, "config": run.to_dict()}
    if timestamp:
        out["timestamp"] = dt.datetime.now(dt.timezone.utc).isoformat(timespec="seconds")
    return out


def csv_header(run):
    # CSVs carry no timestamp so reruns are byte-identical
    return [f"curnds {__version__} command={run.command} seed={run.seed}",
            "config " + json.dumps(run.to_dict(), sort_keys=True)]


def _ensure_parent(path):
    path = Path(path)
    if not path.parent.exists():
        raise IOFailure(f"output directory {path.parent} does not exist")
    return path


def write_json(path, payload):
    path = _ensure_parent(path)
    try:
        with open(path, "w") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True, allow_nan=True)
            fh.write("\n")
    except OSError as exc:
        raise IOFailure(f"cannot write {path}: {exc.strerror}") from None


def _write_rows(path, header, rows, run):
    path = _ensure_parent(path)
    try:
        with open(path, "w", newline="") as fh:
            for line in csv_header(run):
                fh.write(f"# {line}\n")
            w = csv.writer(fh)
            w.writerow(header)
            w.writerows(rows)
    except OSError as exc:
        raise IOFailure(f"cannot write {path}: {exc.strerror}") from None


def _guard_write(func, path, *args):
    _ensure_parent(path)
    try:
        func(path, *args)
    except OSError as exc:
        raise IOFailure(f"cannot write {path}: {exc.strerror}") from None


def select_dates(series, start=None, end=None):
    """Rows with ``start <= date <= end`` (inclusive, either side optional)."""
    lo = 0 if start is None else None
    hi = len(series) if end is None else None
    s0 = dt.date.fromisoformat(start) if start else None
    e0 = dt.date.fromisoformat(end) if end else None
    for i, d in enumerate(series.dates):
        if lo is None and d >= s0:
            lo = i
        if e0 is not None and d <= e0:
            hi = i + 1
    if lo is None or hi is None or hi <= lo:
        raise ArgumentError(f"no data between {start} and {end}")
    return series.window(lo, hi)


def load_series(path, run):
    """Load, smooth over the whole file, then restrict to the configured dates."""
    if run.population is None:
        raise ConfigError("population is required (flag --population or config key)")
    if not Path(path).is_file():
        raise IOFailure(f"input file {path} not found")
    try:
        raw = load_csv(path, run.population)
    except OSError as exc:
        raise IOFailure(f"cannot read {path}: {exc.strerror}") from None
    return select_dates(smooth_7day(raw), run.start, run.end)


def load_fit(path):
    d = _read_json(path, "fit file")
    try:
        return FitResult.from_dict(d)
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, CurndsError):
            raise
        raise DataError(f"{path} is not a fit result: {exc!r}") from None


def cmd_fit(args, run):
    series = load_series(args.input, run)
    result = fit(series, run.fit, workers=run.workers, extrapolation=run.extrapolation)
    payload = result.to_dict()
    payload["run"] = provenance(run)
    write_json(args.output, payload)
    log.info("objective %.6g, %d free parameters", result.objective, result.free_parameter_count)


def _metrics_outputs(path, table, run):
    _guard_write(table.write_csv, path, csv_header(run))
    payload = {"metrics": table.to_dict(), "run": provenance(run)}
    write_json(Path(path).with_suffix(".json"), payload)


def _load_actual(path, population, run):
    if path is None:
        return None
    return load_series(path, replace(run, population=run.population or population,
                                     start=None, end=None))


def cmd_forecast(args, run):
    result = load_fit(args.input)
    actual = _load_actual(args.actual, result.series.population, run)
    forecasts = [progressive_forecast(result, result.series, run.horizon, actual, run.extrapolation)]
    if "seir" in run.baselines:
        forecasts.append(seir_forecast(seir_fit(result.series, run.fit, run.workers), run.horizon, actual))
    if "es" in run.baselines:
        forecasts.append(holt_progressive(result.series, run.horizon, actual))
    rows = []
    for fc in forecasts:
        for day, date, name, pred, act in fc.rows():
            rows.append((day, date, fc.method, name, repr(pred), "" if act is None else repr(act)))
    _write_rows(args.output, ("day", "date", "method", "series", "predicted", "actual"), rows, run)
    if args.metrics:
        if any(fc.actual is None for fc in forecasts):
            raise ArgumentError("metrics need --actual data covering every forecast day")
        table = MetricsTable()
        for fc in forecasts:
            table.add_forecast(fc)
        _metrics_outputs(args.metrics, table, run)


def cmd_rolling(args, run):
    series = load_series(args.input, run)
    results = [rolling_forecast(series, run.window, run.fit, workers=run.workers)]
    if "seir" in run.baselines:
        results.append(seir_rolling(series, run.window, run.fit, run.workers))
    if "es" in run.baselines:
        results.append(holt_rolling(series, run.window))
    table = MetricsTable()
    for r in results:
        table.add_forecast(r)
    _metrics_outputs(args.output, table, run)
    if args.predictions:
        rows = []
        for r in results:
            for day, date, name, pred, act in r.rows():
                rows.append((day, date, r.method, name, repr(pred), repr(act)))
        _write_rows(args.predictions, ("day", "date", "method", "series", "predicted", "actual"),
                    rows, run)


def _scenario(d):
    """(params, initial state, start date) from a fit result or a scenario object."""
    if "series" in d:
        res = FitResult.from_dict(d)
        return res.params, initial_state(res.series, res.params), res.series.dates[0], \
            res.series.population
    try:
        params = CurndsParams.from_dict(d["params"])
        P0 = int(d["population"])
        ini = d["initial"]
        R0, C0, D0, T0 = (float(ini[k]) for k in ("R", "C", "D_C", "T"))
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"scenario is missing or has a bad field: {exc}") from None
    N0 = P0 - (params.u0 + params.s0 + params.du0 + R0 + C0 + D0)
    state = FullState(N0, params.s0, params.u0, params.du0, R0, C0, D0, T0)
    start = dt.date.fromisoformat(d.get("start", "2020-09-01"))
    return params, state, start, P0


def cmd_simulate(args, run):
    params, state, start, P0 = _scenario(_read_json(args.input, "scenario"))
    params = params.with_extrapolation(run.extrapolation)
    traj = simulate(state, params, run.horizon)
    dates = [(start + dt.timedelta(days=int(k))).isoformat() for k in traj.days]
    rows = [(int(k), date, *(repr(float(v)) for v in traj.values[i]))
            for i, (k, date) in enumerate(zip(traj.days, dates))]
    _write_rows(args.output, ("day", "date") + COMPARTMENTS, rows, run)
    if args.series_output:
        path = _ensure_parent(args.series_output)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(COLUMNS)
            for i, date in enumerate(dates):
                w.writerow((date, *(repr(float(traj.column(c)[i])) for c in ("R", "C", "D_C", "T"))))


def _renumber_rows(result):
    re = effective_reproduction(result.params, result.latent, result.series)
    return [(k, d.isoformat(), repr(float(v))) for k, (d, v) in enumerate(zip(result.series.dates, re))]


def cmd_renumber(args, run):
    result = load_fit(args.input)
    _write_rows(args.output, ("day", "date", "R_e"), _renumber_rows(result), run)


def cmd_report(args, run):
    """Latent path, rates, residuals, R_e and a summary; forecasts when --actual is given."""
    result = load_fit(args.input)
    out = Path(args.output)
    if out.exists() and not out.is_dir():
        raise IOFailure(f"{out} exists and is not a directory")
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IOFailure(f"cannot create {out}: {exc.strerror}") from None
    s, lat, p = result.series, result.latent, result.params
    dates = [d.isoformat() for d in s.dates]
    n = s.n
    rates = p.rates(np.arange(len(s)))
    rows = []
    for k in range(len(s)):
        new_du = lat.D_U[k + 1] - lat.D_U[k] if k < n else float("nan")
        new_dc = s.deceased_confirmed[k + 1] - s.deceased_confirmed[k] if k < n else float("nan")
        rows.append((k, dates[k], *(repr(float(v)) for v in (lat.N[k], lat.S[k], lat.U[k], lat.D_U[k],
                                                             s.recovered[k], s.confirmed_active[k],
                                                             s.deceased_confirmed[k], s.tests[k],
                                                             new_du, new_dc))))
    _write_rows(out / "latent.csv", ("day", "date") + COMPARTMENTS + ("new_D_U", "new_D_C"), rows, run)
    _write_rows(out / "rates.csv", ("day", "date") + SPLINE_NAMES,
                [(k, dates[k], *(repr(float(v)) for v in rates[:, k])) for k in range(len(s))], run)
    _write_rows(out / "residuals.csv", ("day", "date", "R", "C", "D_C", "T"),
                [(k + 1, dates[k + 1], *(repr(float(v)) for v in result.residuals[:, k]))
                 for k in range(n)], run)
    _write_rows(out / "renumber.csv", ("day", "date", "R_e"), _renumber_rows(result), run)
    summary = {
        "objective": result.objective,
        "free_parameter_count": result.free_parameter_count,
        "powers": asdict(p.powers),
        "peak_unaware": {"day": int(np.argmax(lat.U)), "value": float(np.max(lat.U))},
        "uncertified_deaths_total": float(lat.D_U[-1]),
        "confirmed_deaths_increase": float(s.deceased_confirmed[-1] - s.deceased_confirmed[0]),
        "residuals": result.residual_summary(),
        "run": provenance(run),
    }
    if args.actual:
        fargs = argparse.Namespace(input=args.input, actual=args.actual, output=str(out / "forecast.csv"),
                                   metrics=str(out / "metrics.csv"))
        cmd_forecast(fargs, run)
    write_json(out / "summary.json", summary)


def _add_common(p, csv_input=False):
    p.add_argument("--input", required=True, help="input CSV" if csv_input else "input JSON")
    p.add_argument("--output", required=True)
    p.add_argument("--config", help="JSON options file; flags override it")
    p.add_argument("--seed", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--extrapolation", choices=EXTRAPOLATIONS)
    if csv_input:
        p.add_argument("--population", type=int)
        p.add_argument("--start", help="first training date (ISO)")
        p.add_argument("--end", help="last training date (ISO)")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        # usage errors go through the same JSON error channel
        raise ArgumentError(f"{self.prog}: {message}")


def make_parser():
    parser = _Parser(prog="curnds", description=__doc__.strip().splitlines()[0])
    parser.add_argument("--version", action="version", version=f"curnds {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="smooth a CSV series and fit the model")
    _add_common(p, csv_input=True)

    p = sub.add_parser("forecast", help="progressive forecast from a fit result")
    _add_common(p)
    p.add_argument("--horizon", type=int)
    p.add_argument("--actual", help="CSV with observations covering the forecast days")
    p.add_argument("--population", type=int, help="population for --actual (default: the fit's)")
    p.add_argument("--baselines", help="comma-separated subset of: seir,es")
    p.add_argument("--metrics", help="write an error table (CSV, plus JSON alongside)")

    p = sub.add_parser("rolling", help="rolling one-step forecasts with refits")
    _add_common(p, csv_input=True)
    p.add_argument("--window", type=int)
    p.add_argument("--baselines", help="comma-separated subset of: seir,es")
    p.add_argument("--predictions", help="also write the one-step predictions (CSV)")

    p = sub.add_parser("simulate", help="simulate from a fit result or scenario JSON")
    _add_common(p)
    p.add_argument("--horizon", type=int)
    p.add_argument("--series-output", help="also write observables in the input CSV schema")

    p = sub.add_parser("renumber", help="effective reproduction number per day")
    _add_common(p)

    p = sub.add_parser("report", help="latent path, rates, residuals and R_e as CSV data")
    _add_common(p)
    p.add_argument("--actual", help="CSV with observations past the training window")
    p.add_argument("--population", type=int)
    p.add_argument("--horizon", type=int)
    p.add_argument("--baselines")
    return parser


COMMANDS = {"fit": cmd_fit, "forecast": cmd_forecast, "rolling": cmd_rolling,
            "simulate": cmd_simulate, "renumber": cmd_renumber, "report": cmd_report}


def _fail(exc):
    code = getattr(exc, "code", "E_INTERNAL")
    exit_code = getattr(exc, "exit_code", 1)
    sys.stderr.write(json.dumps({"error": code, "exit_code": exit_code, "message": str(exc)}) + "\n")
    return exit_code


def main(argv=None):
    parser = make_parser()
    try:
        args = parser.parse_args(argv)
    except ArgumentError as exc:
        return _fail(exc)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        run = build_run_config(args)
        COMMANDS[args.command](args, run)
    except CurndsError as exc:
        return _fail(exc)
    except FileNotFoundError as exc:
        return _fail(IOFailure(str(exc)))
    return 0


if __name__ == "__main__":
    sys.exit(main())
