"""Command-line front end: ``sivphot <command> [options]``.

Outputs go to ``-o/--output`` or, by default, into the directory named by
``$SIVPHOT_OUTPUT_DIR`` (current directory if unset).  ``--format text``
writes tab-delimited files with ``#`` headers, ``--format structured`` the
same content as JSON.  Every output carries the resolved configuration and
seed.  ``--config FILE`` supplies option defaults as a JSON object whose
keys are option names; flags given on the command line win.

Exit status: 0 success, 2 invalid input, 3 convergence failure, 4 I/O error.
"""

from __future__ import annotations

import argparse
import datetime
import json
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import dipole as dp
from . import errors
from . import io as sio
from .correlation import bin_timetrace, correlate, detect_intermittence, suggest_binning
from .emitter_sim import SimConfig, duration_for_counts, simulate
from .inference import (PowerSeries, constant_rate_counterpart, estimate_quantum_efficiency,
                        fit_g2, fit_power_dependence, fit_saturation, power_curves,
                        signal_fraction)
from .rate_model import LimitingValues, RateCoefficients, steady_state
from .reference import DESHELVING_FITS, ETA_DET_INT, IR_EPSILON, POPULATION_SUMMARY, ZPL_WAVELENGTH_NM

EXIT_OK, EXIT_INPUT, EXIT_CONVERGENCE, EXIT_IO = 0, 2, 3, 4
OUTPUT_ENV = "SIVPHOT_OUTPUT_DIR"

_INPUT_ERRORS = (ValueError, errors.InvalidLimits, errors.UnknownCalibration,
                 errors.FileFormatError, errors.OutOfRange, errors.EmptyChannel,
                 errors.DegenerateTrace, errors.ComplexEigenvalue)
_CONVERGENCE_ERRORS = (errors.NoConvergence, errors.StageDivergence, errors.QuadratureFailure)


class InputError(Exception):
    pass


# --- helpers ---------------------------------------------------------------

def _output_path(args, default_name: str) -> Path:
    if args.output:
        path = Path(args.output)
    else:
        path = Path(os.environ.get(OUTPUT_ENV, ".")) / default_name
    if not path.parent.is_dir():
        raise OSError(f"output directory {path.parent} does not exist")
    return path


def _with_suffix(path: Path, fmt: str) -> Path:
    want = ".json" if fmt == "structured" else ".tsv"
    return path if path.suffix in (".json", ".tsv", ".txt", ".dat") else path.with_suffix(want)


def _meta(args) -> dict:
    cfg = {k: v for k, v in vars(args).items() if k not in ("func", "config")}
    meta = {"command": args.command, "config": cfg, "seed": getattr(args, "seed", None)}
    if getattr(args, "stamp", False):
        meta["created"] = datetime.datetime.now(datetime.timezone.utc).isoformat()
    return meta


def _emit(args, path: Path, columns: dict | None, result: dict | None, units=None):
    """Write a table (text) or a JSON document (structured)."""
    meta = _meta(args)
    if args.format == "structured":
        doc = {"meta": meta}
        if result is not None:
            doc["result"] = result
        if columns is not None:
            doc["columns"] = {k: np.asarray(v) for k, v in columns.items()}
            doc["units"] = units or {}
        sio.write_json(path, doc)
    else:
        if columns is None:
            columns = {}
        if result is not None:
            meta["result"] = result
        sio.write_table(path, columns, units, meta)
    return path


def _rates_from_args(args) -> RateCoefficients:
    if args.emitter:
        if args.emitter in DESHELVING_FITS:
            rc = DESHELVING_FITS[args.emitter].rates
        elif args.emitter in POPULATION_SUMMARY:
            rc = POPULATION_SUMMARY[args.emitter].rates
        else:
            raise InputError(f"unknown emitter {args.emitter!r}")
    elif args.rates:
        vals = [float(v) for v in args.rates.split(",")]
        if len(vals) not in (4, 6):
            raise InputError("--rates takes k21,k23,k31_0,d[,sigma,c]")
        rc = RateCoefficients(*vals[:4], c=vals[5] if len(vals) == 6 else math.nan,
                              sigma=vals[4] if len(vals) == 6 else math.nan)
    else:
        raise InputError("give --emitter NAME or --rates k21,k23,k31_0,d[,sigma,c]")
    return rc


def _complex(text: str) -> complex:
    try:
        return complex(str(text).replace(" ", "").replace("i", "j"))
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"not a complex number: {text!r}") from exc


def _require_file(path):
    if not Path(path).is_file():
        raise OSError(f"input file {path} not found")


def _say(args, text: str):
    if not args.quiet:
        print(text)


# --- commands ----------------------------------------------------------------

def cmd_simulate(args):
    rc = _rates_from_args(args)
    if args.power is None:
        raise InputError("--power is required")
    base = dict(eta_detect=args.eta_detect, background_rate=args.background,
                irf_sigma=args.irf, dead_time=args.dead_time,
                splitter_ratio=args.splitter, seed=args.seed)
    duration = args.duration
    if args.photons is not None:
        duration = duration_for_counts(SimConfig(rc, args.power, 1.0, **base), args.photons)
    if duration is None:
        raise InputError("give --duration or --photons")
    path = _output_path(args, f"stream_P{args.power:g}_seed{args.seed}.sivt")
    cfg = SimConfig(rc, args.power, duration, **base)
    stream = simulate(cfg)
    stream.metadata.update({"cli": _meta(args)})
    sio.write_timestamps(path, stream)
    _say(args, f"{path}: {stream.channel_a.size} + {stream.channel_b.size} events "
               f"in {stream.duration_s:.6g} s")


def _histogram_from_stream(stream, max_tau, bin_width):
    if max_tau is None or bin_width is None:
        span, width, _, _ = suggest_binning(stream)
        max_tau = max_tau if max_tau is not None else span
        bin_width = bin_width if bin_width is not None else width
    return correlate(stream, max_tau, bin_width)


def cmd_correlate(args):
    _require_file(args.input)
    path = _with_suffix(_output_path(args, Path(args.input).stem + "_g2"), args.format)
    stream = sio.read_timestamps(args.input)
    hist = _histogram_from_stream(stream, args.max_tau, args.bin_width)
    cols = {"tau_lo": hist.bin_edges[:-1], "tau_hi": hist.bin_edges[1:],
            "counts": hist.counts, "g2": hist.normalized}
    result = {"norm_constant": hist.norm_constant, "bin_width_ns": hist.bin_width,
              "max_tau_ns": hist.max_tau, "input_metadata": stream.metadata}
    if args.format == "text":
        meta = _meta(args)
        meta.update(result)
        sio.write_table(path, cols, {"tau_lo": "ns", "tau_hi": "ns"}, meta)
    else:
        _emit(args, path, cols, result, {"tau_lo": "ns", "tau_hi": "ns"})
    _say(args, f"{path}: {hist.counts.size} bins of {hist.bin_width:g} ns")


def cmd_trace(args):
    _require_file(args.input)
    path = _with_suffix(_output_path(args, Path(args.input).stem + "_trace"), args.format)
    stream = sio.read_timestamps(args.input)
    trace = bin_timetrace(stream, args.window)
    result = {"window_ms": trace.window}
    try:
        rep = detect_intermittence(trace, args.threshold_fraction, args.min_dark)
        result.update({"classification": rep.classification, "threshold_cps": rep.threshold,
                       "bright_level_cps": rep.bright_level,
                       "dark_intervals_ms": [list(iv) for iv in rep.dark_intervals]})
    except errors.DegenerateTrace as exc:
        result.update({"classification": None, "error": str(exc)})
    _emit(args, path, {"t": trace.times, "rate": trace.rates, "counts": trace.counts}, result,
          {"t": "ms", "rate": "cps"})
    _say(args, f"{path}: {trace.rates.size} windows, {result.get('classification')}")


def _load_histogram(path, args):
    try:
        return sio.read_histogram(path)
    except errors.FileFormatError:
        doc = None
        try:
            doc = sio.read_json(path)
        except errors.FileFormatError:
            pass
        if doc and "columns" in doc:
            c = doc["columns"]
            edges = np.append(c["tau_lo"], c["tau_hi"][-1:])
            from .correlation import G2Histogram
            return G2Histogram(np.asarray(edges, float), np.asarray(c["counts"], float),
                               float(doc["result"]["norm_constant"]))
        # a timestamp file: correlate on the fly
        stream = sio.read_timestamps(path)
        return _histogram_from_stream(stream, args.max_tau, args.bin_width)


def cmd_fit_g2(args):
    _require_file(args.input)
    path = _with_suffix(_output_path(args, Path(args.input).stem + "_fit"), args.format)
    hist = _load_histogram(args.input, args)
    fit = fit_g2(hist, pe=args.pe, irf_sigma=args.irf, weights=args.weights)
    _emit(args, path, None, fit.to_dict())
    p, u = fit.parameters, fit.uncertainties
    _say(args, "  ".join(f"{k} = {p[k]:.6g} +- {u[k]:.2g}" for k in p)
         + (f"  [{', '.join(fit.flags)}]" if fit.flags else ""))


def _read_series_columns(path):
    if str(path).endswith(".json"):
        doc = sio.read_json(path)
        cols = {k: np.asarray(v, dtype=float) for k, v in doc.get("columns", doc).items()}
        return cols
    cols, _, _ = sio.read_table(path)
    return cols


def _series(cols, name, aliases=()):
    for key in (name, *aliases):
        if key in cols:
            err = None
            for ekey in (f"{key}_err", f"{name}_err"):
                if ekey in cols:
                    err = cols[ekey]
            return cols[key], err
    raise InputError(f"series file lacks column {name!r}")


def cmd_fit_sat(args):
    _require_file(args.input)
    path = _with_suffix(_output_path(args, Path(args.input).stem + "_sat"), args.format)
    cols = _read_series_columns(args.input)
    P, _ = _series(cols, "power", ("power_uW",))
    I, err = _series(cols, "rate", ("rate_cps", "count_rate"))
    fit = fit_saturation(PowerSeries(P, I, err, "rate"))
    grid = np.geomspace(P.min() / 3, P.max() * 3, 200)
    from .rate_model import saturation_curve
    curve = {"power": grid,
             "rate": saturation_curve(fit["I_inf"], fit["Psat"], fit["c_backgr"], grid),
             "pe": signal_fraction(fit, grid)}
    result = fit.to_dict()
    result["pe_at_data"] = signal_fraction(fit, P)
    _emit(args, path, curve, result, {"power": "uW", "rate": "cps"})
    _say(args, f"I_inf = {fit['I_inf']:.6g} cps  Psat = {fit['Psat']:.6g} uW  "
               f"c_backgr = {fit['c_backgr']:.6g} cps/uW")


def _power_fit_from_series(args, cols):
    P, _ = _series(cols, "power", ("power_uW",))
    a, ea = _series(cols, "a")
    t1, e1 = _series(cols, "tau1", ("tau1_ns",))
    t2, e2 = _series(cols, "tau2", ("tau2_ns",))
    lv = None
    if args.limits:
        vals = [float(v) for v in args.limits.split(",")]
        if len(vals) != 4:
            raise InputError("--limits takes tau1_0,tau2_0,tau2_inf,a_inf")
        lv = LimitingValues(*vals)
    series = [PowerSeries(P, v, e if args.weighted else None, n)
              for v, e, n in ((a, ea, "a"), (t1, e1, "tau1"), (t2, e2, "tau2"))]
    return fit_power_dependence(*series, lv=lv, refine=not args.no_refine,
                                n_low=args.n_low, n_high=args.n_high), P


def _power_outputs(args, fit, P, stem, extra=None):
    Psat = args.psat
    curves = power_curves(fit.rates, P.min() / 3, P.max() * 3, Psat=Psat)
    result = fit.to_dict()
    result["saturated_population_n2"] = steady_state(fit.rates, math.inf).n2
    if Psat is not None:
        k21, k23, k31, sigma = constant_rate_counterpart(fit.rates, Psat)
        result["constant_rate_model"] = {"k21": k21, "k23": k23, "k31": k31, "sigma": sigma}
    if extra:
        result.update(extra)
    path = _with_suffix(_output_path(args, stem + "_power"), args.format)
    units = {"power": "uW", "tau1": "ns", "tau2": "ns", "tau1_const": "ns", "tau2_const": "ns"}
    _emit(args, path, curves, result, units)
    r = fit.rates
    _say(args, f"k21 = {r.k21:.4g}  k23 = {r.k23:.4g}  k31_0 = {r.k31_0:.4g}  d = {r.d:.4g} MHz  "
               f"sigma = {r.sigma:.4g} MHz/uW  c = {r.c:.4g} uW"
               + (f"  [{', '.join(fit.flags)}]" if fit.flags else ""))
    return path, result


def cmd_fit_power(args):
    _require_file(args.input)
    cols = _read_series_columns(args.input)
    fit, P = _power_fit_from_series(args, cols)
    _power_outputs(args, fit, P, Path(args.input).stem)


def cmd_analyze(args):
    """Timestamp files (one per power) or one series file -> rates, N2, eta_qe."""
    for f in args.inputs:
        _require_file(f)
    if len(args.inputs) == 1 and not _is_timestamp_file(args.inputs[0]):
        cols = _read_series_columns(args.inputs[0])
        points = None
    else:
        cols, points = _series_from_streams(args)
    if len(cols["power"]) < 4:
        raise InputError("analysis needs at least 4 powers")
    extra = {}
    if points is not None:
        extra["g2_fits"] = points
        extra["g2_flags"] = sorted({f for p in points for f in p["flags"]})
    try:
        fit, P = _power_fit_from_series(args, cols)
    except _CONVERGENCE_ERRORS + (errors.InvalidLimits,) as exc:
        # degraded report: per-power g2 fits (tau1 survives) plus the failing stage
        extra["error"] = f"{type(exc).__name__}: {exc}"
        extra["failed_stage"] = getattr(exc, "stage", None)
        path = _with_suffix(_output_path(args, "analysis"), args.format)
        _emit(args, path, cols, extra, {"power": "uW", "tau1": "ns", "tau2": "ns"})
        _say(args, f"power-dependence fit failed ({extra['error']}); g2 fits in {path}")
        raise
    if args.I_inf is not None:
        extra["eta_qe"] = estimate_quantum_efficiency(args.I_inf, fit.rates, args.eta_det_int,
                                                      args.eta_coll)
    _, result = _power_outputs(args, fit, P, "analysis", extra)
    series_path = _with_suffix(_output_path(args, "analysis_series"), args.format)
    _emit(args, series_path, cols, None, {"power": "uW", "tau1": "ns", "tau2": "ns"})
    if "eta_qe" in extra:
        _say(args, f"eta_qe = {100 * extra['eta_qe']:.3g} %  "
                   f"N2(P->inf) = {result['saturated_population_n2']:.3g}")


def _is_timestamp_file(path) -> bool:
    with open(path, "rb") as fh:
        return fh.read(len(sio.MAGIC)) == sio.MAGIC


def _series_from_streams(args):
    rows, points = [], []
    for i, f in enumerate(args.inputs):
        stream = sio.read_timestamps(f)
        power = stream.metadata.get("power_uW")
        if args.powers:
            power = [float(v) for v in args.powers.split(",")][i]
        if power is None:
            raise InputError(f"{f}: no power in metadata; give --powers")
        hist = _histogram_from_stream(stream, args.max_tau, args.bin_width)
        fit = fit_g2(hist, pe=args.pe, irf_sigma=args.irf)
        rows.append((power, fit))
        points.append({"file": str(f), "power": power, **fit.to_dict()})
    rows.sort(key=lambda r: r[0])
    cols = {"power": np.array([r[0] for r in rows])}
    for name in ("a", "tau1", "tau2"):
        cols[name] = np.array([r[1][name] for r in rows])
        cols[f"{name}_err"] = np.array([r[1].uncertainties[name] for r in rows])
    return cols, points


def cmd_qe(args):
    rc = _rates_from_args(args)
    I_inf = args.I_inf
    if I_inf is None:
        if args.emitter in POPULATION_SUMMARY:
            I_inf = POPULATION_SUMMARY[args.emitter].I_inf_mcps * 1e6
        else:
            raise InputError("--I-inf is required for this emitter")
    qe = estimate_quantum_efficiency(I_inf, rc, args.eta_det_int, args.eta_coll)
    n2 = steady_state(rc, math.inf).n2
    result = {"eta_qe": qe, "n2_inf": n2, "I_inf_cps": I_inf}
    path = _with_suffix(_output_path(args, "qe"), args.format)
    _emit(args, path, None, result)
    _say(args, f"N2(P->inf) = {n2:.4g}  eta_qe = {100 * qe:.4g} %")


def cmd_dipole(args):
    eps = args.epsilon
    heights = np.linspace(args.z_min, args.z_max, args.n_z)
    stem = _output_path(args, "dipole")
    for o in ("parallel", "perpendicular"):
        sw = dp.height_sweep(heights, args.wavelength, eps, o, args.NA, eta0=args.eta0)
        path = _with_suffix(stem.with_name(f"{stem.name}_{o}"), args.format)
        _emit(args, path, sw, {"orientation": o, "epsilon": eps},
              {"z": "nm", "gamma_r_rel": "gamma0", "gamma_nr_rel": "gamma0",
               "gamma_tot_rel": "gamma0"})
        cols = {}
        for z in args.pattern_z:
            pat = dp.radiation_pattern(dp.DipoleEnvironment(z, args.wavelength, eps, o, args.NA))
            cols.setdefault("theta", pat.theta)
            cols[f"z{z:g}nm"] = pat.intensity
        ppath = _with_suffix(stem.with_name(f"{stem.name}_{o}_pattern"), args.format)
        _emit(args, ppath, cols, {"orientation": o}, {"theta": "rad"})
        i75 = int(np.argmin(np.abs(heights - 75.0)))
        _say(args, f"{o}: eta_coll(z = {heights[i75]:g} nm) = {sw['eta_coll'][i75]:.4f}  -> {path}")


def cmd_reproduce(args):
    from . import reproduce
    out = {"population": reproduce.population_table(),
           "model_contrast": reproduce.model_contrast(),
           "calibration": reproduce.calibration(),
           "dipole": reproduce.dipole_summary()}
    lines = ["emitter  N2inf(model/pub)  qe_par%(model/pub)  qe_perp%(model/pub)"]
    for r in out["population"]:
        lines.append(f"{r['name']:6s}  {r['n2_inf']:.3f}/{r['n2_inf_published']:.2f}"
                     f"  {r['qe_parallel_pct']:.2f}/{r['qe_parallel_pct_published']:.1f}"
                     f"  {r['qe_perpendicular_pct']:.2f}/{r['qe_perpendicular_pct_published']:.1f}")
    for r in out["model_contrast"]:
        lines.append(f"{r['name']:6s}  tau2 ratio (de-shelving/constant) at 0.01 Psat: {r['ratio']:.3g}")
    for o, d in out["dipole"].items():
        lines.append(f"{o}: eta_coll(75 nm) = {d['eta_coll_75nm']:.4f} (published "
                     f"{d['eta_coll_published']}), 40-100 nm half-spread "
                     f"{100 * d['range_rel_halfwidth']:.1f} %, max gamma_r/gamma0 = "
                     f"{d['gamma_r_max']:.3f}")
    if args.battery:
        from .battery import BATTERY_EMITTERS, run_emitter
        out["battery"] = []
        for name in BATTERY_EMITTERS:
            r = run_emitter(name, seed=args.seed, jobs=args.jobs)
            out["battery"].append(r.to_dict())
            lines.append(f"battery {name}: " + ", ".join(
                f"{k} {100 * v:+.1f}%" for k, v in r.relative_errors.items())
                + ("  PASS" if r.ok else f"  FAIL {r.error}"))
    path = _output_path(args, "reproduction.json")
    sio.write_json(path, {"meta": _meta(args), "result": out})
    _say(args, "\n".join(lines))
    _say(args, f"-> {path}")


# --- parser ----------------------------------------------------------------

def _add_common(p):
    p.add_argument("-o", "--output", help="output file (default: $%s/<name>)" % OUTPUT_ENV)
    p.add_argument("--format", choices=("text", "structured"), default="text")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", help="JSON file of option defaults")
    p.add_argument("--jobs", type=int, default=1, help="parallel workers for batteries")
    p.add_argument("--stamp", action="store_true", help="record creation time in outputs")
    p.add_argument("-q", "--quiet", action="store_true")


def _add_rates(p):
    p.add_argument("--emitter", help="reference emitter name, e.g. ND3")
    p.add_argument("--rates", help="k21,k23,k31_0,d[,sigma,c] in MHz, MHz/uW, uW")


def _add_binning(p):
    p.add_argument("--max-tau", type=float, help="histogram half-span (ns)")
    p.add_argument("--bin-width", type=float, help="bin width (ns)")


def _add_power_fit(p):
    p.add_argument("--limits", help="tau1_0,tau2_0,tau2_inf,a_inf override (ns, ns, ns, -)")
    p.add_argument("--no-refine", action="store_true", help="use raw plateau limits")
    p.add_argument("--n-low", type=int, default=2)
    p.add_argument("--n-high", type=int, default=3)
    p.add_argument("--psat", type=float, help="saturation power for the constant-rate overlay")
    p.add_argument("--unweighted", dest="weighted", action="store_false")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sivphot", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="synthetic two-channel timestamp stream")
    _add_common(p)
    _add_rates(p)
    p.add_argument("--power", type=float, help="excitation power (uW)")
    p.add_argument("--duration", type=float, help="seconds")
    p.add_argument("--photons", type=float, help="expected detections (sets the duration)")
    p.add_argument("--eta-detect", type=float, default=1.0)
    p.add_argument("--background", type=float, default=0.0, help="background rate (cps)")
    p.add_argument("--irf", type=float, default=0.35, help="IRF std (ns)")
    p.add_argument("--dead-time", type=float, default=0.0, help="ns")
    p.add_argument("--splitter", type=float, default=0.5)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("correlate", help="coincidence histogram of a timestamp file")
    _add_common(p)
    _add_binning(p)
    p.add_argument("input")
    p.set_defaults(func=cmd_correlate)

    p = sub.add_parser("trace", help="binned count-rate trace and intermittence")
    _add_common(p)
    p.add_argument("input")
    p.add_argument("--window", type=float, default=100.0, help="ms")
    p.add_argument("--threshold-fraction", type=float, default=0.3)
    p.add_argument("--min-dark", type=float, default=200.0, help="ms")
    p.set_defaults(func=cmd_trace)

    p = sub.add_parser("fit-g2", help="fit a, tau1, tau2 to a histogram")
    _add_common(p)
    _add_binning(p)
    p.add_argument("input", help="histogram file (or timestamp file)")
    p.add_argument("--pe", type=float, default=1.0)
    p.add_argument("--irf", type=float, default=0.35, help="IRF std (ns)")
    p.add_argument("--weights", choices=("model", "counts"), default="model")
    p.set_defaults(func=cmd_fit_g2)

    p = sub.add_parser("fit-sat", help="saturation fit of count rate versus power")
    _add_common(p)
    p.add_argument("input", help="table with columns power, rate[, rate_err]")
    p.set_defaults(func=cmd_fit_sat)

    p = sub.add_parser("fit-power", help="staged de-shelving fit of a, tau1, tau2 series")
    _add_common(p)
    _add_power_fit(p)
    p.add_argument("input", help="table with power, a, tau1, tau2 (and *_err) columns")
    p.set_defaults(func=cmd_fit_power)

    p = sub.add_parser("analyze", help="timestamp files or series -> rates and eta_qe")
    _add_common(p)
    _add_binning(p)
    _add_power_fit(p)
    p.add_argument("inputs", nargs="+")
    p.add_argument("--powers", help="comma-separated powers if not in file metadata")
    p.add_argument("--pe", type=float, default=1.0)
    p.add_argument("--irf", type=float, default=0.35)
    p.add_argument("--I-inf", dest="I_inf", type=float, help="saturated count rate (cps)")
    p.add_argument("--eta-det-int", type=float, default=ETA_DET_INT)
    p.add_argument("--eta-coll", type=float, default=0.78)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("qe", help="quantum efficiency from I_inf and rates")
    _add_common(p)
    _add_rates(p)
    p.add_argument("--I-inf", dest="I_inf", type=float, help="cps")
    p.add_argument("--eta-det-int", type=float, default=ETA_DET_INT)
    p.add_argument("--eta-coll", type=float, default=0.78)
    p.set_defaults(func=cmd_qe)

    p = sub.add_parser("dipole", help="dipole above a half-space: rates, eta_coll, eta(z)")
    _add_common(p)
    p.add_argument("--epsilon", type=_complex, default=IR_EPSILON)
    p.add_argument("--wavelength", type=float, default=ZPL_WAVELENGTH_NM, help="nm")
    p.add_argument("--NA", type=float, default=0.8)
    p.add_argument("--eta0", type=float, default=0.05)
    p.add_argument("--z-min", type=float, default=5.0)
    p.add_argument("--z-max", type=float, default=300.0)
    p.add_argument("--n-z", type=int, default=296)
    p.add_argument("--pattern-z", type=float, nargs="*", default=[80.0])
    p.set_defaults(func=cmd_dipole)

    p = sub.add_parser("reproduce-tables", help="recompute published tables and figures")
    _add_common(p)
    p.add_argument("--battery", action="store_true", help="also run the round-trip battery")
    p.set_defaults(func=cmd_reproduce)
    return parser


def _apply_config(parser, argv):
    """Load --config defaults into the chosen subparser; flags still win."""
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if not known.config:
        return
    cfg = sio.read_json(known.config)
    if not isinstance(cfg, dict):
        raise InputError("config file must hold a JSON object")
    subparsers = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
    command = next((a for a in argv if a in subparsers.choices), None)
    sp = subparsers.choices.get(command)
    if sp is None:
        return
    valid = {a.dest for a in sp._actions}
    cfg = {k.replace("-", "_"): v for k, v in cfg.items()}
    unknown = set(cfg) - valid
    if unknown:
        raise InputError(f"unknown config keys: {', '.join(sorted(unknown))}")
    if "epsilon" in cfg:
        cfg["epsilon"] = _complex(cfg["epsilon"])
    sp.set_defaults(**cfg)


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        _apply_config(parser, argv)
        args = parser.parse_args(argv)
        args.func(args)
    except SystemExit as exc:
        return int(exc.code or 0)
    except (InputError, *_INPUT_ERRORS) as exc:
        print(f"sivphot: input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except _CONVERGENCE_ERRORS as exc:
        print(f"sivphot: convergence failure: {exc}", file=sys.stderr)
        return EXIT_CONVERGENCE
    except OSError as exc:
        print(f"sivphot: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
