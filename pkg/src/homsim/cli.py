"""Command-line entry point: ``homsim <command> ...``.

Exit codes: 0 success, 2 invalid configuration or arguments, 3 I/O or
corrupt input, 4 fit failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__, correlate, fit, io, models, plotting, presets, scan, sim
from .params import ConfigError, ExperimentConfig, load_config

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_FIT = 0, 2, 3, 4
log = logging.getLogger("homsim")


class CliError(Exception):
    def __init__(self, msg: str, code: int):
        super().__init__(msg)
        self.code = code


# ----------------------------------------------------------------- helpers

def _parse_range(text: str) -> tuple[float, float]:
    try:
        lo, hi = (float(x) for x in text.split(":"))
    except ValueError:
        raise CliError(f"expected LO:HI, got {text!r}", EXIT_CONFIG) from None
    return lo, hi


def parse_grid(text: str) -> list[float]:
    """``a,b,c`` or ``start:stop:num`` (inclusive, like numpy.linspace)."""
    text = text.strip()
    try:
        if ":" in text:
            a, b, n = text.split(":")
            vals = np.linspace(float(a), float(b), int(n)).tolist()
        else:
            vals = [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise CliError(f"cannot parse grid {text!r}", EXIT_CONFIG) from None
    if not vals:
        raise CliError("scan grid is empty", EXIT_CONFIG)
    return vals


def _load_experiment(args) -> tuple[ExperimentConfig, dict]:
    if getattr(args, "config", None) and getattr(args, "preset", None):
        raise CliError("use either --config or --preset", EXIT_CONFIG)
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise CliError(f"config file not found: {path}", EXIT_CONFIG)
        cfg, outputs = load_config(path)
    elif getattr(args, "preset", None):
        try:
            cfg = presets.get_preset(args.preset)
        except KeyError as exc:
            raise CliError(str(exc), EXIT_CONFIG) from None
        outputs = {}
    else:
        raise CliError("one of --config or --preset is required", EXIT_CONFIG)
    if getattr(args, "mode", None):
        cfg = cfg.replace(mode=args.mode)
    if getattr(args, "seed", None) is not None:
        cfg = cfg.replace(seed=args.seed)
    return cfg, outputs


def _out_dir(path: str | Path) -> Path:
    p = Path(path)
    try:
        p.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CliError(f"cannot create output directory {p}: {exc}", EXIT_IO) from None
    return p


def _write_json(path: Path, doc) -> Path:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return path


# ----------------------------------------------------------------- simulate

def cmd_simulate(args) -> int:
    cfg, outputs = _load_experiment(args)
    fmt = args.format or outputs.get("format", "csv")
    if fmt not in io.FORMATS:
        raise CliError(f"unknown format {fmt!r}", EXIT_CONFIG)
    out = _out_dir(args.out or outputs.get("dir", "."))
    stem = outputs.get("stem", "stream")
    det = sim.run_experiment(cfg)
    files = []
    for ch in (0, 1):
        sel = det.channel == ch
        path = out / f"{stem}_ch{ch}{io.SUFFIX[fmt]}"
        io.write_stream(path, sim.Detections(det.channel[sel], det.timestamp[sel]), fmt)
        files.append(path.name)
    manifest = {
        "homsim_version": __version__,
        "config_hash": cfg.config_hash(),
        "seed": cfg.seed,
        "topology": cfg.topology,
        "mode": cfg.mode,
        "format": fmt,
        "files": files,
        "counts": det.counts,
        "config": cfg.to_dict(),
    }
    _write_json(out / f"{stem}_manifest.json", manifest)
    print(f"wrote {', '.join(files)} ({len(det)} detections) to {out}")
    return EXIT_OK


# ---------------------------------------------------------------- correlate

def _read_streams(paths: Sequence[str]) -> sim.Detections:
    chans, stamps = [], []
    for p in paths:
        if not Path(p).exists():
            raise CliError(f"input not found: {p}", EXIT_IO)
        d = io.read_stream(p)
        chans.append(d.channel)
        stamps.append(d.timestamp)
    ch = np.concatenate(chans) if chans else np.empty(0, np.uint8)
    ts = np.concatenate(stamps) if stamps else np.empty(0, np.int64)
    return sim.Detections(ch, ts)


def _sorted_channel(det: sim.Detections, ch: int) -> np.ndarray:
    t = det.timestamp[det.channel == ch]
    if len(t) > 1 and np.any(np.diff(t) < 0):
        raise CliError(f"channel {ch} timestamps are not sorted", EXIT_IO)
    return t


def build_histogram(det: sim.Detections, args) -> correlate.Histogram:
    if args.lifetime:
        if not args.period:
            raise CliError("--lifetime needs --period", EXIT_CONFIG)
        stamps = np.sort(det.timestamp)
        return correlate.lifetime_histogram(stamps, args.period * 1000.0, args.bin_width)
    a = _sorted_channel(det, args.channels[0])
    b = _sorted_channel(det, args.channels[1])
    hc = correlate.HistogramConfig.centered(int(round(args.range * 1000)), args.bin_width, args.hist_mode)
    return correlate.cross_histogram(a, b, hc, chunks=args.chunks, channels=tuple(args.channels))


def apply_normalization(h: correlate.Histogram, args) -> correlate.Histogram:
    method = args.normalize
    if method == "plateau":
        if args.plateau:
            lo, hi = _parse_range(args.plateau)
            region = [(-hi, -lo), (lo, hi)]
        else:
            span = h.bin_edges[-1] / 1000.0
            region = [(-span, -0.7 * span), (0.7 * span, span)]
        return correlate.normalize(h, "plateau", plateau=region)
    if method in ("peak_mean", "peak_amplitude"):
        if not args.period:
            raise CliError(f"--normalize {method} needs --period", EXIT_CONFIG)
        return correlate.normalize(h, method, period=args.period, window=args.window)
    return correlate.normalize(h, "none")


def cmd_correlate(args) -> int:
    det = _read_streams(args.inputs)
    h = build_histogram(det, args)
    if not args.lifetime:
        h = apply_normalization(h, args)
    out = Path(args.out)
    fmt = args.format or ("json" if out.suffix == ".json" else "csv")
    if fmt not in ("csv", "json"):
        raise CliError("histograms are written as csv or json", EXIT_CONFIG)
    if out.parent != Path(""):
        _out_dir(out.parent)
    io.write_histogram(out, h, fmt)
    if args.plot:
        plotting.plot_histogram(h, out.with_suffix(".png"), title=out.stem)
    print(f"wrote {out} ({int(h.counts.sum())} coincidences, normalization={h.normalization})")
    return EXIT_OK


# ---------------------------------------------------------------------- fit

def _read_xy(path: Path) -> fit.FitData:
    """Generic ``x,y[,sigma]`` CSV (for spectra); sigma defaults to sqrt(y)."""
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r and not r[0].startswith("#")]
    try:
        arr = np.array([[float(v) for v in r] for r in rows[1:]])
    except ValueError as exc:
        raise io.StreamFormatError(f"{path}: malformed row ({exc})") from exc
    if arr.ndim != 2 or arr.shape[1] < 2:
        raise io.StreamFormatError(f"{path}: need at least two columns")
    sig = arr[:, 2] if arr.shape[1] > 2 else np.sqrt(np.maximum(arr[:, 1], 1.0))
    return fit.FitData(arr[:, 0], arr[:, 1], sig)


def _load_fit_input(path: str, recipe: str):
    p = Path(path)
    if not p.exists():
        raise CliError(f"input not found: {p}", EXIT_IO)
    if recipe == "lorentzian":
        head = p.read_text().lstrip().split("\n", 1)[0]
        if not head.startswith("tau_ps") and not head.startswith("#") and not head.startswith("{"):
            return _read_xy(p)
    return io.read_histogram(p)


def parse_overrides(items: Sequence[str]) -> dict:
    """``name=value`` fixes a parameter; ``name=value:lo:hi`` frees it with bounds."""
    out: dict = {}
    for item in items or []:
        name, sep, val = item.partition("=")
        if not sep:
            raise CliError(f"override {item!r} is not name=value", EXIT_CONFIG)
        try:
            parts = val.split(":")
            if len(parts) == 1:
                out[name] = float(parts[0])
            elif len(parts) == 3:
                out[name] = {"value": float(parts[0]), "lo": float(parts[1]), "hi": float(parts[2]),
                             "fixed": False}
            else:
                raise ValueError
        except ValueError:
            raise CliError(f"cannot parse override {item!r}", EXIT_CONFIG) from None
    return out


def cmd_fit(args) -> int:
    data = [_load_fit_input(p, args.recipe) for p in args.inputs]
    overrides = parse_overrides(args.set)
    fr = _parse_range(args.range) if args.range else None
    try:
        res = fit.fit_recipe(args.recipe, data, overrides, fit_range=fr)
    except fit.FitError as exc:
        print(f"fit failed: {exc}", file=sys.stderr)
        return EXIT_FIT
    except (ValueError, TypeError) as exc:
        raise CliError(str(exc), EXIT_CONFIG) from None
    results = res if isinstance(res, list) else [res]
    report = {"recipe": args.recipe, "inputs": list(args.inputs), "overrides": overrides,
              "results": [r.to_dict() for r in results]}
    if len(results) > 1:
        report["repeated"] = {k: dict(zip(("mean", "std"), fit.repeated_summary(results, k)))
                              for k in results[0].free}
    for r in results:
        print(r.table())
    if args.out:
        out = Path(args.out)
        if out.parent != Path(""):
            _out_dir(out.parent)
        _write_json(out, report)
        out.with_suffix(".txt").write_text("\n\n".join(r.table() for r in results) + "\n")
        if args.plot:
            for i, (d, r) in enumerate(zip(data, results)):
                png = out.with_name(f"{out.stem}_{i}.png")
                if isinstance(d, correlate.Histogram):
                    plotting.plot_histogram(d, png, r, title=args.recipe)
                else:
                    plotting.plot_fit_data(d, r, png, title=args.recipe)
    bad = [r for r in results if not r.converged]
    if bad:
        print(f"fit did not converge: {bad[0].message} (gradient norm {bad[0].gradient_norm:.3g})",
              file=sys.stderr)
        return EXIT_FIT
    return EXIT_OK


# --------------------------------------------------------------------- scan

def cmd_scan(args) -> int:
    cfg, _ = _load_experiment(args)
    grid = parse_grid(args.grid)
    try:
        pts = scan.run_scan(args.kind, grid, cfg, seed=cfg.seed, workers=args.workers, window=args.window)
    except ValueError as exc:
        raise CliError(str(exc), EXIT_CONFIG) from None
    out = Path(args.out)
    if out.parent != Path(""):
        _out_dir(out.parent)
    scan.write_scan_csv(out, pts)
    if args.plot:
        plotting.plot_scan(pts, out.with_suffix(".png"))
    for p in pts:
        print(f"{p.kind}={p.value:.6g}  V={p.visibility:.4f}+/-{p.visibility_err:.4f}  "
              f"v={p.v_fit:.4f}+/-{p.v_err:.4f}  [{p.status}]")
    return EXIT_OK


# ------------------------------------------------------------------- report

def _hist_for(cfg: ExperimentConfig, half_ns: float, bin_ps: int) -> correlate.Histogram:
    det = sim.run_experiment(cfg)
    a, b = det.split()
    return correlate.cross_histogram(a, b, correlate.HistogramConfig.centered(int(half_ns * 1000), bin_ps))


def cmd_report(args) -> int:
    """Simulate, correlate and fit one of the standard measurements; write tables and figures."""
    out = _out_dir(args.out)
    kind = args.kind
    seed = 1 if args.seed is None else args.seed
    summary: dict = {"kind": kind, "seed": seed}
    if kind == "cw-hbt":
        cfg = presets.cw_hbt(duration=args.scale * 2e8, seed=seed)
        h = correlate.normalize(_hist_for(cfg, 100, 200), "plateau", plateau=[(-100, -50), (50, 100)])
        res = fit.fit_recipe("hbt_cw", [h], {"jitter_sigma": cfg.detectors[0].jitter_sigma})
        io.write_histogram(out / "hbt.csv", h)
        plotting.plot_histogram(h, out / "hbt.png", res, "CW HBT", xlim=(-40, 40))
        summary["fit"] = res.to_dict()
        summary["g2_zero"] = 1 - res.params["b"]
        summary["postselected_coherence"] = models.postselected_coherence(g2_hbt_0=1 - res.params["b"])
    elif kind == "cw-hom":
        hs = []
        for par, name in ((True, "parallel"), (False, "orthogonal")):
            cfg = presets.cw_hom(duration=args.scale * 5e8, parallel=par, seed=seed + (0 if par else 1))
            h = correlate.normalize(_hist_for(cfg, 150, 200), "plateau", plateau=[(-150, -100), (100, 150)])
            io.write_histogram(out / f"hom_{name}.csv", h)
            hs.append(h)
        res = fit.fit_recipe("hom_cw_joint", hs, {"jitter_sigma": cfg.detectors[0].jitter_sigma})
        plotting.plot_histogram(hs[0], out / "hom_cw.png", res, "CW HOM (parallel fit)",
                                overlay=[(hs[1], "orthogonal")], label="parallel")
        summary["fit"] = res.to_dict()
        summary["coherence"] = models.coherence_relations(tau_par=res.params["tau_par"])
    elif kind == "pulsed-hom":
        hs = []
        for par, name in ((True, "parallel"), (False, "orthogonal")):
            cfg = presets.pulsed_hom(n_pulses=int(args.scale * 2e6), parallel=par, seed=seed + (0 if par else 1),
                                     mode=args.mode or "ensemble")
            P = cfg.pump.period
            h = correlate.normalize(_hist_for(cfg, 4.5 * P, 100), "peak_mean", period=P)
            io.write_histogram(out / f"pulsed_{name}.csv", h)
            hs.append(h)
        ifo = cfg.interferometer
        res = fit.fit_recipe("hom_pulsed", [hs[0]], {"rt_ratio": ifo.R / ifo.T, "period": P,
                                                     "jitter_sigma": cfg.detectors[0].jitter_sigma})
        plotting.plot_histogram(hs[0], out / "hom_pulsed.png", res, "pulsed HOM", xlim=(-2.5 * P, 2.5 * P),
                                overlay=[(hs[1], "orthogonal")], label="parallel")
        window = min(26.0, P)
        a_par = correlate.peak_areas(hs[0], P, window, k_range=[0]).areas[0] / hs[0].divisor
        a_perp = correlate.peak_areas(hs[1], P, window, k_range=[0]).areas[0] / hs[1].divisor
        summary["fit"] = res.to_dict()
        summary["visibility_window"] = models.visibility_from_areas(a_perp, a_par)
        summary["model"] = models.visibility_report(res.params["tau1"], res.params["gamma_star"],
                                                    res.params["v"], ifo.R / ifo.T,
                                                    cfg.detectors[0].jitter_sigma, window, P)
    else:
        raise CliError(f"unknown report kind {kind!r}", EXIT_CONFIG)
    _write_json(out / "summary.json", summary)
    print(json.dumps(summary.get("fit", {}).get("params", {}), indent=1))
    print(f"report written to {out}")
    return EXIT_OK


# ------------------------------------------------------------------- misc

def cmd_preset(args) -> int:
    if args.name is None:
        for name in sorted(presets.PRESETS):
            print(name)
        return EXIT_OK
    try:
        cfg = presets.get_preset(args.name)
    except KeyError as exc:
        raise CliError(str(exc), EXIT_CONFIG) from None
    text = json.dumps(cfg.to_dict(), indent=2) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_excitation(args) -> int:
    grid = parse_grid(args.grid)
    counts = sim.simulate_excitation_scan(np.array(grid), args.fwhm, args.peak, args.background, args.seed)
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["detuning_ghz", "counts"])
        for x, c in zip(grid, counts):
            w.writerow([f"{x:.9g}", int(c)])
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_check_config(args) -> int:
    cfg, outputs = _load_experiment(args)
    print(json.dumps({"config_hash": cfg.config_hash(), "outputs": outputs}, indent=1))
    return EXIT_OK


# ------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="homsim", description="Two-photon interference simulator and analysis")
    p.add_argument("--version", action="version", version=f"homsim {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def experiment_args(sp):
        sp.add_argument("--config", help="JSON run configuration")
        sp.add_argument("--preset", help="named configuration (see 'homsim preset')")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--mode", choices=("ensemble", "trajectory"))

    s = sub.add_parser("simulate", help="generate detector timestamp streams")
    experiment_args(s)
    s.add_argument("--out", help="output directory")
    s.add_argument("--format", choices=io.FORMATS)
    s.set_defaults(func=cmd_simulate)

    c = sub.add_parser("correlate", help="histogram coincidences between two channels")
    c.add_argument("inputs", nargs="+", help="stream files (csv, json or HOMT binary)")
    c.add_argument("--out", required=True)
    c.add_argument("--format", choices=("csv", "json"))
    c.add_argument("--bin-width", type=int, default=100, help="bin width in ps (even)")
    c.add_argument("--range", type=float, default=200.0, help="half range in ns")
    c.add_argument("--hist-mode", choices=("full", "start-stop"), default="full")
    c.add_argument("--channels", type=int, nargs=2, default=(0, 1))
    c.add_argument("--chunks", type=int, default=1)
    c.add_argument("--normalize", choices=("none", "plateau", "peak_mean", "peak_amplitude"), default="none")
    c.add_argument("--plateau", help="plateau |tau| range LO:HI in ns")
    c.add_argument("--period", type=float, help="pulse period in ns")
    c.add_argument("--window", type=float, help="peak integration window in ns")
    c.add_argument("--lifetime", action="store_true", help="arrival-time histogram modulo --period")
    c.add_argument("--plot", action="store_true")
    c.set_defaults(func=cmd_correlate)

    f = sub.add_parser("fit", help="fit a model recipe to histogram(s)")
    f.add_argument("inputs", nargs="+")
    f.add_argument("--recipe", required=True, choices=fit.RECIPES)
    f.add_argument("--set", action="append", metavar="NAME=VALUE[:LO:HI]",
                   help="fix a parameter, or free it with bounds")
    f.add_argument("--range", help="fit range LO:HI (ns, or GHz for spectra)")
    f.add_argument("--out", help="JSON report path (a .txt table is written next to it)")
    f.add_argument("--plot", action="store_true")
    f.set_defaults(func=cmd_fit)

    sc = sub.add_parser("scan", help="visibility scans (repetition rate, delay, cycles)")
    experiment_args(sc)
    sc.add_argument("--kind", required=True, choices=scan.KINDS)
    sc.add_argument("--grid", required=True, help="a,b,c or start:stop:num")
    sc.add_argument("--out", required=True, help="CSV table")
    sc.add_argument("--window", type=float)
    sc.add_argument("--workers", type=int)
    sc.add_argument("--plot", action="store_true")
    sc.set_defaults(func=cmd_scan)

    r = sub.add_parser("report", help="simulate, analyse and plot a standard measurement")
    r.add_argument("kind", choices=("cw-hbt", "cw-hom", "pulsed-hom"))
    r.add_argument("--out", required=True)
    r.add_argument("--seed", type=int)
    r.add_argument("--mode", choices=("ensemble", "trajectory"))
    r.add_argument("--scale", type=float, default=1.0, help="multiply the default statistics")
    r.set_defaults(func=cmd_report)

    pr = sub.add_parser("preset", help="list presets or dump one as a JSON config")
    pr.add_argument("name", nargs="?")
    pr.add_argument("--out")
    pr.set_defaults(func=cmd_preset)

    e = sub.add_parser("excitation", help="simulate a Lorentzian excitation scan")
    e.add_argument("--grid", default="-0.3:0.3:121", help="detunings in GHz")
    e.add_argument("--fwhm", type=float, default=55.1, help="MHz")
    e.add_argument("--peak", type=float, default=2000.0)
    e.add_argument("--background", type=float, default=20.0)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_excitation)

    k = sub.add_parser("check-config", help="validate a configuration and print its hash")
    experiment_args(k)
    k.set_defaults(func=cmd_check_config)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse uses 2 for usage errors, matching EXIT_CONFIG
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (io.StreamFormatError, correlate.CorrelationError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_IO
    except fit.FitError as exc:
        print(f"fit failed: {exc}", file=sys.stderr)
        return EXIT_FIT
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
