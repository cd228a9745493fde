"""Command-line pipeline: simulate -> correlate -> fit -> extract -> report.

Exit codes: 0 ran (also when a fit did not converge), 1 usage or config error,
2 data or file-format error.
"""

from __future__ import annotations

import argparse
import logging
import re
import sys
from collections import defaultdict
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import (
    PowerSeriesPoint,
    UnderdeterminedError,
    build_report,
    ensemble_stats,
    extract_rates,
    predict_series,
)
from .correlator import (
    G2Curve,
    TcspcHistogram,
    block_correlate,
    cross_correlate,
    intensity_trace,
    log_correlate,
    tcspc_histogram,
)
from .fitting import (
    PolarizationParams,
    PolarizationScan,
    fit_double_exponential,
    fit_g2,
    fit_g2_jackknife,
    fit_polarization,
    fit_saturation,
    polarization_curve,
    saturation_curve,
)
from .io import (
    ConfigError,
    FormatError,
    ResultDocument,
    config_defaults,
    correlate_file,
    load_config,
    provenance,
    read_document,
    read_table,
    read_tags,
    write_document,
    write_table,
    write_tags,
    MAGIC,
    _UNITS,
)
from .kinetics import REFERENCE_EMITTERS, RateModel
from .photonsim import (
    DetectorModel,
    PulsedExcitation,
    apply_detector,
    make_stream,
    simulate_hbt,
    simulate_pulsed,
    spawn_seeds,
)

log = logging.getLogger("spephot")

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


_QTY = re.compile(r"^\s*([-+0-9.eE]+)\s*([^\s\d].*)?$")


def _quantity(kind: str):
    """argparse type: a bare number in the base unit (ns, uW) or 'value unit'."""
    def parse(text: str) -> float:
        m = _QTY.match(text)
        if not m:
            raise argparse.ArgumentTypeError(f"invalid quantity {text!r}")
        num, unit = m.groups()
        if unit is None:
            try:
                return float(num)
            except ValueError:
                raise argparse.ArgumentTypeError(f"invalid number {num!r}") from None
        units = _UNITS[kind]
        if unit.strip() not in units:
            raise argparse.ArgumentTypeError(f"unknown unit {unit!r} (one of {', '.join(units)})")
        return float(num) * units[unit.strip()]
    parse.__name__ = kind
    return parse


_time, _power = _quantity("time"), _quantity("power")


def _settings(args, overrides: dict) -> dict:
    cfg = config_defaults()
    if args.config:
        cfg.update(load_config(args.config))
    cfg.update({k: v for k, v in overrides.items() if v is not None})
    if args.seed is not None:
        cfg["seed"] = args.seed
    return cfg


def _model_from(cfg) -> RateModel:
    keys = ("k21", "k23", "k31_0", "alpha")
    given = [cfg.get(k) is not None for k in keys]
    if all(given):
        return RateModel(k21=cfg["k21"], k23=cfg["k23"], k31_0=cfg["k31_0"], alpha=cfg["alpha"],
                         beta=cfg.get("beta") or 0.0)
    if any(given):
        raise ConfigError("custom model needs all of k21, k23, k31_0, alpha")
    name = cfg["emitter"]
    if name not in REFERENCE_EMITTERS:
        raise ConfigError(f"unknown emitter {name!r} (choose {', '.join(REFERENCE_EMITTERS)} or give rates)")
    return REFERENCE_EMITTERS[name]


def _write_doc(doc: ResultDocument, out):
    if out:
        write_document(out, doc)
    else:
        sys.stdout.write(doc.to_json() + "\n")


# --------------------------------------------------------------------------
# simulate


def cmd_simulate(args) -> int:
    cfg = _settings(args, {"emitter": args.emitter, "power": args.power,
                           "duration": args.duration, "mode": args.mode})
    model = _model_from(cfg)
    if cfg["seed"] is None:
        cfg["seed"] = int(np.random.SeedSequence().entropy % (1 << 63))
    duration = cfg["duration"]
    if duration < 0:
        raise ConfigError("duration must be >= 0")
    det = DetectorModel(efficiency=cfg["efficiency"], jitter_sigma=cfg["jitter_sigma"],
                        dead_time=cfg["dead_time"], dark_rate=cfg["dark_rate"])
    seed = cfg["seed"]
    if cfg["mode"] == "cw":
        stream = simulate_hbt(model, cfg["power"], duration, det, seed=seed)
    elif cfg["mode"] == "pulsed":
        s_em, s_det = spawn_seeds(seed, 2)
        pulsed = PulsedExcitation(cfg["rep_period"], cfg["pulse_width"], cfg["excitation_prob"])
        em, syncs = simulate_pulsed(model, pulsed, duration, seed=s_em)
        det_t = apply_detector(em, det, duration, seed=s_det)
        stream = make_stream(det_t, syncs, duration, {"mode": "pulsed", "channel_1": "sync"})
    else:
        raise ConfigError("mode must be 'cw' or 'pulsed'")
    stream.origin.update({"mode": cfg["mode"], "model": model.as_dict(), "config": cfg,
                          "tool_version": __version__, "seed": seed})
    out = args.out or "stream." + args.format
    write_tags(out, stream, args.format)
    n0, n1 = stream.counts()
    print(f"wrote {len(stream)} tags ({n0} + {n1}) over {duration:g} ns to {out}")
    return EXIT_OK


# --------------------------------------------------------------------------
# correlate


def _is_binary(path) -> bool:
    with open(path, "rb") as f:
        return f.read(16) == MAGIC


def cmd_correlate(args) -> int:
    cfg = _settings(args, {"bin_width": args.bin_width, "max_lag": args.max_lag,
                           "lag_min": args.lag_min, "lag_max": args.lag_max,
                           "points_per_decade": args.points_per_decade, "chunks": args.chunks, "blocks": args.blocks,
                           "tcspc_window": args.window, "trace_bin": args.trace_bin})
    path = Path(args.input)
    mode = args.mode
    prov = provenance("correlate", {"input": str(path), "mode": mode, **{
        k: cfg[k] for k in ("bin_width", "max_lag", "lag_min", "lag_max", "points_per_decade",
                            "chunks", "blocks", "tcspc_window", "trace_bin")}}, cfg.get("seed"))
    if mode == "linear" and cfg["blocks"]:
        if cfg["blocks"] < 3:
            raise ConfigError("blocks must be >= 3 (or 0 to disable)")
        curve = block_correlate(read_tags(path), cfg["bin_width"], cfg["max_lag"], cfg["blocks"])
        doc = ResultDocument("g2_curve", curve, prov)
    elif mode == "linear":
        if _is_binary(path) and cfg["chunks"] <= 1:
            curve = correlate_file(path, cfg["bin_width"], cfg["max_lag"])
        else:
            curve = cross_correlate(read_tags(path), cfg["bin_width"], cfg["max_lag"],
                                    n_chunks=cfg["chunks"])
        doc = ResultDocument("g2_curve", curve, prov)
    elif mode == "log":
        curve = log_correlate(read_tags(path), (cfg["lag_min"], cfg["lag_max"]), cfg["points_per_decade"])
        doc = ResultDocument("g2_curve", curve, prov)
    elif mode == "tcspc":
        s = read_tags(path)
        hist = tcspc_histogram(s.channel(0) / 1000.0, s.channel(1) / 1000.0, cfg["bin_width"],
                               cfg["tcspc_window"])
        doc = ResultDocument("tcspc", hist, prov)
    else:  # trace
        starts, counts = intensity_trace(read_tags(path), cfg["trace_bin"])
        doc = ResultDocument("intensity_trace", {"bin_start_ns": starts, "counts": counts}, prov)
    _write_doc(doc, args.out)
    return EXIT_OK


# --------------------------------------------------------------------------
# fit


def _load_curve(path) -> G2Curve:
    if path.suffix.lower() == ".csv":
        t = read_table(path, ("lag", "value", "error"), ("bin_left", "bin_right"))
        edges = None
        norm = {}
        if "bin_left" in t and "bin_right" in t:
            norm = {"bin_left": t["bin_left"], "bin_right": t["bin_right"]}
        return G2Curve(t["lag"], t["value"], t["error"], scheme="sampled" if not norm else "linear",
                       edges=edges, norm=norm)
    doc = read_document(path)
    if doc.kind != "g2_curve":
        raise FormatError(f"{path}: expected a g2_curve document, got {doc.kind!r}")
    return doc.payload


def _load_hist(path) -> TcspcHistogram:
    if path.suffix.lower() == ".csv":
        t = read_table(path, ("bin_left", "bin_right", "count"))
        edges = np.append(t["bin_left"], t["bin_right"][-1])
        return TcspcHistogram(edges, t["count"], 0)
    doc = read_document(path)
    if doc.kind != "tcspc":
        raise FormatError(f"{path}: expected a tcspc document, got {doc.kind!r}")
    return doc.payload


def cmd_fit(args) -> int:
    path = Path(args.input)
    model = args.model
    context = {"emitter_id": args.emitter_id, "power_uW": args.power, "role": args.role}
    if model in ("g2", "g2-background"):
        curve = _load_curve(path)
        fitter = fit_g2_jackknife if curve.norm.get("n_blocks") else fit_g2
        res = fitter(curve, background=model == "g2-background")
    elif model == "saturation":
        t = read_table(path, ("power", "intensity"), ("error",))
        res = fit_saturation(t["power"], t["intensity"], t.get("error"))
        res.meta["data"] = {"power": t["power"], "intensity": t["intensity"]}
    elif model == "polarization":
        t = read_table(path, ("angle", "intensity"), ("error",))
        res = fit_polarization(PolarizationScan(t["angle"], t["intensity"], t.get("error"), role=args.role))
        res.meta["data"] = {"angle": t["angle"], "intensity": t["intensity"]}
    else:
        res = fit_double_exponential(_load_hist(path))
    res.meta["context"] = context
    res.meta["fit_model"] = model
    doc = ResultDocument("fit_result", res, provenance("fit", {"input": str(path), "model": model, **context}))
    _write_doc(doc, args.out)
    summary = ", ".join(f"{k} = {v:.6g} +/- {res.uncertainties.get(k, float('nan')):.2g}"
                        for k, v in res.params.items())
    print(f"{model}: {summary}; converged={res.converged}"
          + (f"; flags={','.join(res.flags)}" if res.flags else ""), file=sys.stderr)
    return EXIT_OK


# --------------------------------------------------------------------------
# extract


def cmd_extract(args) -> int:
    g2_fits = defaultdict(list)
    pol_fits = defaultdict(dict)
    for p in args.inputs:
        doc = read_document(p)
        if doc.kind != "fit_result":
            raise FormatError(f"{p}: expected fit_result documents, got {doc.kind!r}")
        res = doc.payload
        ctx = res.meta.get("context", {})
        eid = ctx.get("emitter_id") or "unnamed"
        kind = res.meta.get("fit_model", res.meta.get("model"))
        if kind in ("g2", "g2-background", "g2_three_level", "g2_two_level"):
            if ctx.get("power_uW") is None:
                raise FormatError(f"{p}: g2 fit lacks the excitation power (fit --power)")
            g2_fits[eid].append((float(ctx["power_uW"]), res))
        elif kind == "polarization":
            pol_fits[eid][ctx.get("role") or res.meta.get("role", "emission")] = res
        else:
            log.info("ignoring %s fit in %s", kind, p)
    reports, fits = [], {}
    for eid in sorted(set(g2_fits) | set(pol_fits)):
        model = mode = None
        series = []
        if eid in g2_fits:
            for power, res in sorted(g2_fits[eid], key=lambda x: x[0]):
                if "tau2_unidentifiable" in res.flags:
                    raise FormatError(f"{eid} at {power} uW: g2 fit has no bunching; rates not identifiable")
                series.append(PowerSeriesPoint.from_g2_fit(power, res))
            try:
                model, rres = extract_rates(series, args.shelving_mode)
            except UnderdeterminedError as e:
                raise FormatError(f"emitter {eid} is under-determined: {e}") from None
            mode = rres.meta["shelving_mode"]
            fits[eid] = rres
        pf = pol_fits.get(eid, {})
        absorption = _pol_params(pf.get("absorption"))
        emission = _pol_params(pf.get("emission"))
        rep = build_report(
            eid, model, mode,
            g2_series=[{"power": p.power, "lambda1": p.lambda1, "lambda2": p.lambda2, "a": p.a,
                        "sigma_lambda1": p.sigma_lambda1, "sigma_lambda2": p.sigma_lambda2,
                        "sigma_a": p.sigma_a} for p in series],
            zpl_energy=args.zpl, fwhm=args.fwhm, measured_lifetime=args.lifetime,
            absorption=absorption, emission=emission,
            polarization_fits={role: {**r.params, **r.meta.get("data", {})} for role, r in pf.items()},
        )
        reports.append(rep.to_dict())
    doc = ResultDocument("emitter_reports", {"reports": reports, "rate_fits": {
        k: {"params": v.params, "uncertainties": v.uncertainties, "chi2": v.chi2, "dof": v.dof,
            "converged": v.converged, "flags": v.flags, "meta": v.meta} for k, v in fits.items()}},
        provenance("extract", {"inputs": [str(p) for p in args.inputs],
                               "shelving_mode": args.shelving_mode}))
    _write_doc(doc, args.out)
    for r in reports:
        m = r["rate_model"]
        if m:
            print(f"{r['emitter_id']}: k21={m['k21']:.4g} k23={m['k23']:.4g} k31_0={m['k31_0']:.4g} "
                  f"alpha={m['alpha']:.4g} beta={m['beta']:.4g}", file=sys.stderr)
    return EXIT_OK


def _pol_params(res):
    if res is None:
        return None
    p = res.params
    return PolarizationParams(a=max(p["a"], 0.0), b=max(p["b"], 0.0), phi0=p["phi0"])


# --------------------------------------------------------------------------
# report

TABLE_COLUMNS = ("emitter_id", "zpl_eV", "k21_per_ns", "k23_per_ns", "k31_0_per_ns", "alpha_per_ns_uW",
                 "beta_per_uW", "tau_excited_ns", "tau_metastable_ns", "gamma_limit_ueV", "fwhm_meV",
                 "linewidth_ratio", "visibility_absorption", "visibility_emission", "misalignment_deg")


def _blank(v):
    return "" if v is None else v


def _table_row(r: dict) -> dict:
    m = r.get("rate_model") or {}
    ab, em = r.get("absorption") or {}, r.get("emission") or {}
    vals = [r["emitter_id"], r.get("zpl_energy"), m.get("k21"), m.get("k23"), m.get("k31_0"),
            m.get("alpha"), m.get("beta"), r.get("tau_excited"), r.get("tau_metastable"),
            r.get("gamma_limit"), r.get("fwhm"), r.get("linewidth_ratio"), ab.get("visibility"),
            em.get("visibility"), r.get("misalignment")]
    return {k: _blank(v) for k, v in zip(TABLE_COLUMNS, vals)}


def cmd_report(args) -> int:
    out = Path(args.out or "report")
    out.mkdir(parents=True, exist_ok=True)
    reports, extra = [], []
    for p in args.inputs:
        doc = read_document(p)
        if doc.kind == "emitter_reports":
            reports += doc.payload["reports"]
        elif doc.kind in ("fit_result", "g2_curve"):
            extra.append((Path(p).stem, doc))
        else:
            raise FormatError(f"{p}: cannot report on {doc.kind!r} documents")
    rows = [_table_row(r) for r in reports]
    write_table(out / "table.csv", {c: [row[c] for row in rows] for c in TABLE_COLUMNS},
                comments=["per-emitter rates (1/ns), lifetimes (ns), transform limit (ueV)"])
    written = ["table.csv"]
    # transposed lifetime table: one row per quantity, one column per emitter
    life = {"quantity": ["tau_excited_ns", "tau_metastable_ns"]}
    for r in reports:
        life[r["emitter_id"]] = [_blank(r.get("tau_excited")), _blank(r.get("tau_metastable"))]
    write_table(out / "lifetimes.csv", life)
    written.append("lifetimes.csv")
    for r in reports:
        eid = r["emitter_id"]
        if r.get("g2_series"):
            s = r["g2_series"]
            write_table(out / f"rates_{eid}.csv", {k: [x[k] for x in s] for k in
                                                     ("power", "lambda1", "lambda2", "a")},
                        comments=[f"{eid}: measured decay rates (1/ns) and bunching amplitude"])
            written.append(f"rates_{eid}.csv")
            if r.get("rate_model"):
                pw = np.geomspace(min(x["power"] for x in s), max(x["power"] for x in s), 200)
                pred = predict_series(RateModel(**r["rate_model"]), pw)
                write_table(out / f"rates_model_{eid}.csv", {k: pred[k] for k in
                                                              ("power", "lambda1", "lambda2", "a")},
                            comments=[f"{eid}: three-level model curves"])
                written.append(f"rates_model_{eid}.csv")
        for role, pf in (r.get("polarization_fits") or {}).items():
            name = f"polar_{eid}_{role}.csv"
            _write_polar(out / name, pf)
            written.append(name)
    written += _write_ensembles(out, reports)
    for stem, doc in extra:
        if doc.kind == "g2_curve":
            c = doc.payload
            write_table(out / f"g2_{stem}.csv", {"lag_ns": c.lags, "g2": c.values, "error": c.errors})
            written.append(f"g2_{stem}.csv")
        elif doc.payload.meta.get("fit_model") == "saturation":
            d, p = doc.payload.meta["data"], doc.payload.params
            pw = np.asarray(d["power"], float)
            write_table(out / f"saturation_{stem}.csv",
                        {"power_uW": pw, "intensity": d["intensity"],
                         "fit": saturation_curve(pw, p["i_inf"], p["p_sat"])})
            written.append(f"saturation_{stem}.csv")
    print("\n".join(str(out / w) for w in written))
    return EXIT_OK


def _write_polar(path, pf: dict):
    a, b, phi0 = pf["a"], pf["b"], pf["phi0"]
    if "angle" in pf:
        ang = np.mod(np.asarray(pf["angle"], float), 360.0)
        inten = np.asarray(pf["intensity"], float)
        order = np.argsort(ang, kind="stable")
        ang, inten = ang[order], inten[order]
    else:
        ang = np.arange(0.0, 360.0, 5.0)
        inten = polarization_curve(ang, a, b, phi0)
    write_table(path, {"angle_deg": ang, "intensity": inten, "fit": polarization_curve(ang, a, b, phi0)},
                comments=[f"a={a!r} b={b!r} phi0_deg={phi0!r}"])


def _write_ensembles(out: Path, reports) -> list[str]:
    written = []
    for key, width, name in (("zpl_energy", 0.02, "zpl_hist.csv"), ("fwhm", 0.5, "fwhm_hist.csv")):
        vals = [r[key] for r in reports if r.get(key) is not None]
        if len(vals) >= 2:
            st = ensemble_stats(vals, width)
            write_table(out / name, {"bin_left": st.edges[:-1], "bin_right": st.edges[1:], "count": st.counts},
                        comments=[f"mean={st.mean!r} std={st.std!r} n={st.n}"])
            written.append(name)
    for role in ("absorption", "emission"):
        vals = [r[role]["visibility"] for r in reports if r.get(role)]
        if len(vals) >= 2:
            st = ensemble_stats(vals, 0.1)
            name = f"visibility_{role}_hist.csv"
            write_table(out / name, {"bin_left": st.edges[:-1], "bin_right": st.edges[1:], "count": st.counts},
                        comments=[f"mean={st.mean!r} std={st.std!r} n={st.n}"])
            written.append(name)
    return written


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, help="RNG seed (recorded in the output)")
    common.add_argument("--config", help="flat 'key = value unit' config file")
    common.add_argument("--out", help="output path (stdout for documents when omitted)")
    common.add_argument("--format", choices=("bin", "csv"), default="bin", help="time-tag file format")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="spephot", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"spephot {__version__}")
    sub = p.add_subparsers(dest="verb", required=True, parser_class=_Parser)

    s = sub.add_parser("simulate", parents=[common], help="simulate an HBT or pulsed time-tag stream")
    s.add_argument("--emitter", help="reference emitter E1, E2 or E3")
    s.add_argument("--power", type=_power, help="excitation power (uW)")
    s.add_argument("--duration", type=_time, help="acquisition time (ns)")
    s.add_argument("--mode", choices=("cw", "pulsed"))
    s.set_defaults(func=cmd_simulate)

    c = sub.add_parser("correlate", parents=[common], help="g2, TCSPC or intensity trace from a tag file")
    c.add_argument("input")
    c.add_argument("--mode", choices=("linear", "log", "tcspc", "trace"), default="linear")
    c.add_argument("--bin-width", type=_time, help="ns")
    c.add_argument("--max-lag", type=_time, help="ns")
    c.add_argument("--lag-min", type=_time, help="ns (log mode)")
    c.add_argument("--lag-max", type=_time, help="ns (log mode)")
    c.add_argument("--points-per-decade", type=int)
    c.add_argument("--chunks", type=int, help="parallel time chunks (loads the whole file)")
    c.add_argument("--blocks", type=int,
                   help="independent time blocks kept for jackknife fit errors (linear mode)")
    c.add_argument("--window", type=_time, help="TCSPC window (ns)")
    c.add_argument("--trace-bin", type=_time, help="intensity trace bin (ns)")
    c.set_defaults(func=cmd_correlate)

    f = sub.add_parser("fit", parents=[common], help="fit a curve, scan or histogram")
    f.add_argument("input")
    f.add_argument("--model", required=True,
                   choices=("g2", "g2-background", "saturation", "polarization", "double-exp"))
    f.add_argument("--emitter-id", default=None)
    f.add_argument("--power", type=_power, help="excitation power of this measurement (uW)")
    f.add_argument("--role", choices=("absorption", "emission"), default="emission")
    f.set_defaults(func=cmd_fit)

    e = sub.add_parser("extract", parents=[common], help="rate coefficients from per-power g2 fits")
    e.add_argument("inputs", nargs="+")
    e.add_argument("--shelving-mode", choices=("power-independent", "power-dependent", "auto"),
                   default="auto")
    e.add_argument("--zpl", type=float, help="ZPL energy (eV)")
    e.add_argument("--fwhm", type=float, help="measured ZPL FWHM (meV)")
    e.add_argument("--lifetime", type=float, help="measured excited-state lifetime (ns)")
    e.set_defaults(func=cmd_extract)

    r = sub.add_parser("report", parents=[common], help="tables and plot-ready CSV")
    r.add_argument("inputs", nargs="*")
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:  # --help, --version and usage errors
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, UsageError) as e:
        print(f"spephot {args.verb}: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (FormatError, ValueError, OSError) as e:
        print(f"spephot {args.verb}: error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
