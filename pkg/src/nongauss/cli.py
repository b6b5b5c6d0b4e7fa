"""Command-line entry point: ``nongauss {analyze,simulate,sweep,synth,convert}``.

Every command computes its full output in memory before touching the
filesystem, so a failure leaves nothing half-written.
"""

from __future__ import annotations

import argparse
import io
import json
import logging
import sys
from pathlib import Path
from typing import Callable

from .flows import (
    DEFAULT_GREEDY_THRESHOLD,
    DEFAULT_TAIL_MIN,
    DEFAULT_TAU,
    eccdf,
    fit_tail,
    flow_table,
    protocol_mix,
    write_llcd_csv,
)
from .paths import (
    DEFAULT_MIN_SHARE,
    estimate_hops,
    estimate_rtts,
    hop_histograms,
    hops_vs_rtt,
    write_hop_histogram_csv,
    write_rtt_by_hops_csv,
)
from .queuesim import (
    BUFFER_CONVENTIONS,
    DEFAULT_BUFFER,
    DEFAULT_RHO,
    SimConfig,
    performance_sweep,
    simulate,
    write_sweep_csv,
)
from .stats import (
    DEFAULT_FREQ_FRACTION,
    AnalysisError,
    hurst_periodogram,
    pearson,
    skewness,
    throughput_series,
    write_series_csv,
    write_spectrum_csv,
)
from .synth import generate, rate_tail_ensemble, read_config_file, write_ground_truth
from .trace import TraceFormatError, load_trace, write_csv, write_pcap

REPORT_VERSION = 1

log = logging.getLogger("nongauss")


class CommandError(Exception):
    """Input problem: reported on stderr, nothing written."""


def _dumps(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _render(writer: Callable, *args) -> str:
    buf = io.StringIO()
    writer(*args, buf)
    return buf.getvalue()


def _load(path: str, name: str | None = None):
    p = Path(path)
    if not p.is_file():
        raise CommandError(f"{path}: no such file")
    try:
        return load_trace(p, name=name)
    except (TraceFormatError, ValueError) as exc:
        raise CommandError(f"{path}: {exc}") from None


def _emit(files: dict[str, str | bytes], out_dir: str | None, stdout_text: str | None) -> None:
    if out_dir is not None:
        d = Path(out_dir)
        d.mkdir(parents=True, exist_ok=True)
        for name in sorted(files):
            data = files[name]
            if isinstance(data, bytes):
                (d / name).write_bytes(data)
            else:
                (d / name).write_text(data, encoding="utf-8", newline="\n")
    if stdout_text is not None:
        sys.stdout.write(stdout_text)


def _flat_csv(obj, prefix="") -> list[tuple[str, object]]:
    rows = []
    for k in sorted(obj):
        v = obj[k]
        name = f"{prefix}{k}"
        if isinstance(v, dict):
            rows.extend(_flat_csv(v, name + "."))
        elif not isinstance(v, list):
            rows.append((name, "" if v is None else v))
    return rows


def _as_csv(obj) -> str:
    return "key,value\n" + "".join(f"{k},{v}\n" for k, v in _flat_csv(obj))


# analyze


def analyze_trace(trace, *, tau, greedy_threshold, tail_min, freq_fraction, min_share=DEFAULT_MIN_SHARE):
    """Run every analysis on one trace. Returns (report, csv files, core_ok)."""
    files: dict[str, str] = {}
    failures: list[str] = []
    report: dict = {
        "format_version": REPORT_VERSION,
        "trace": {
            "id": trace.name,
            "packets": len(trace),
            "bytes": trace.total_bytes,
            "duration_s": trace.duration,
            "origin_s": trace.origin,
        },
        "parameters": {
            "tau_s": tau,
            "greedy_threshold": greedy_threshold,
            "tail_min": tail_min,
            "freq_fraction": freq_fraction,
            "min_hop_share": min_share,
        },
    }

    def section(name, fn, core=True):
        try:
            report[name] = fn()
        except (AnalysisError, ValueError) as exc:
            report[name] = {"available": False, "reason": str(exc)}
            if core:
                failures.append(f"{name}: {exc}")

    series = None

    def throughput():
        nonlocal series
        series = throughput_series(trace, tau)
        files["throughput.csv"] = _render(write_series_csv, series)
        return {"bins": len(series), "mean_bps": series.mean, "stddev_bps": series.stddev}

    section("throughput", throughput)

    def skew():
        if series is None:
            raise AnalysisError("no throughput series")
        return {"value": skewness(series)}

    def hurst():
        if series is None:
            raise AnalysisError("no throughput series")
        est = hurst_periodogram(series, freq_fraction)
        files["psd.csv"] = _render(write_spectrum_csv, est)
        return {"h": est.h, "h_clamped": min(max(est.h, 0.0), 1.0),
                "spectral_slope": est.spectral_slope, "r": est.regression_r, "points": est.n_points}

    section("skewness", skew)
    section("hurst", hurst)

    table = flow_table(trace, tau)
    counts = table.packet_count
    greedy_n = int((counts > greedy_threshold).sum())
    report["flows"] = {
        "count": len(table),
        "greedy_count": greedy_n,
        "greedy_share": greedy_n / len(table) if len(table) else None,
    }

    def tail():
        points = eccdf(counts)
        files["llcd.csv"] = _render(write_llcd_csv, points)
        fit = fit_tail(points, tail_min)
        return {"alpha": fit.alpha, "r": fit.regression_r, "n_min": fit.n_min,
                "points": len(fit.points), "heavy_tailed": fit.heavy_tailed}

    section("tail", tail)

    def mix():
        out = {"all": protocol_mix(table).as_dict()}
        try:
            out["greedy"] = protocol_mix(table, greedy_only=True, threshold=greedy_threshold).as_dict()
        except AnalysisError:
            out["greedy"] = None
        return out

    section("protocol_mix", mix)

    estimates = estimate_hops(trace)
    if not estimates:
        why = "one-way trace: no connection seen in both directions"
        report["hops"] = {"available": False, "reason": why}
        report["rtt"] = {"available": False, "reason": why}
    else:

        def hops():
            all_h, greedy_h = hop_histograms(trace, tau, greedy_threshold, estimates)
            files["hop_hist_all.csv"] = _render(write_hop_histogram_csv, all_h)
            if greedy_h is not None:
                files["hop_hist_greedy.csv"] = _render(write_hop_histogram_csv, greedy_h)
            return {
                "available": True,
                "connections": len(estimates),
                "ambiguous": sum(h.ambiguous for h in estimates),
                "mean_hops_all": all_h.mean,
                "mean_hops_greedy": None if greedy_h is None else greedy_h.mean,
            }

        def rtt():
            records = estimate_rtts(trace)
            out = {"available": True, "handshakes": len(records),
                   "clean": sum(r.clean for r in records)}
            try:
                groups, fit = hops_vs_rtt(trace, min_share)
            except AnalysisError as exc:
                out["fit"] = None
                out["fit_reason"] = str(exc)
                return out
            files["rtt_by_hops.csv"] = _render(write_rtt_by_hops_csv, groups)
            out["fit"] = {"slope_s_per_hop": fit.slope, "intercept_s": fit.intercept,
                          "r": fit.pearson_r, "groups": fit.n}
            return out

        section("hops", hops, core=False)
        section("rtt", rtt, core=False)

    report["errors"] = failures
    return report, files, not failures


def cmd_analyze(args) -> int:
    trace = _load(args.trace)
    report, files, ok = analyze_trace(
        trace,
        tau=args.tau,
        greedy_threshold=args.greedy_threshold,
        tail_min=args.tail_min,
        freq_fraction=args.freq_fraction,
    )
    files["report.json"] = _dumps(report)
    text = files["report.json"] if args.format == "json" else _as_csv(report)
    _emit(files, args.out_dir, text)
    for err in report["errors"]:
        log.error("%s", err)
    return 0 if ok else 1


# simulate / sweep


def cmd_simulate(args) -> int:
    trace = _load(args.trace)
    if args.bandwidth is not None:
        config = SimConfig(bandwidth=args.bandwidth, buffer_packets=args.buffer,
                           buffer_convention=args.buffer_convention)
    else:
        config = SimConfig(target_utilization=args.rho, buffer_packets=args.buffer,
                           buffer_convention=args.buffer_convention)
    result = simulate(trace, config)
    body = {"trace": trace.name, "rho": None if args.bandwidth is not None else args.rho,
            **result.as_dict()}
    log.info("bandwidth %.6g bit/s", result.bandwidth)
    text = _dumps(body) if args.format == "json" else _as_csv(body)
    _emit({"simulate.json": _dumps(body)}, args.out_dir, text)
    return 0


def _sweep_inputs(items: list[str]) -> list[Path]:
    paths: list[Path] = []
    for item in items:
        p = Path(item)
        if p.is_dir():
            paths.extend(sorted(q for q in p.iterdir() if q.suffix in (".csv", ".pcap")))
        elif p.is_file() and p.suffix in (".txt", ".list"):
            for line in p.read_text(encoding="utf-8").splitlines():
                line = line.strip()
                if line and not line.startswith("#"):
                    q = Path(line)
                    paths.append(q if q.is_absolute() else p.parent / q)
        else:
            paths.append(p)
    return paths


def cmd_sweep(args) -> int:
    traces = {}
    for p in _sweep_inputs(args.traces):
        if p.stem in traces:
            raise CommandError(f"duplicate trace id {p.stem!r}")
        traces[p.stem] = _load(str(p), p.stem)
    if len(traces) < 2:
        raise CommandError("sweep needs at least 2 traces")
    traces = dict(sorted(traces.items()))
    result = performance_sweep(
        traces, args.rho, args.buffer, bin_width=args.tau, freq_fraction=args.freq_fraction,
        buffer_convention=args.buffer_convention,
    )

    alpha_rows = []
    for label, trace in traces.items():
        try:
            fit = fit_tail(eccdf(flow_table(trace, args.tau).packet_count), args.tail_min)
            alpha_rows.append((label, fit.alpha, skewness(throughput_series(trace, args.tau))))
        except (AnalysisError, ValueError) as exc:
            log.warning("trace %s: no tail fit: %s", label, exc)
    summary = result.summary()
    summary["corr_alpha_skewness"] = None
    if len(alpha_rows) >= 2:
        try:
            summary["corr_alpha_skewness"] = pearson([a for _, a, _ in alpha_rows],
                                                     [s for _, _, s in alpha_rows])
        except AnalysisError as exc:
            summary["notes"].append(f"corr_alpha_skewness undefined: {exc}")
    summary["format_version"] = REPORT_VERSION
    summary["parameters"] = {"tau_s": args.tau, "freq_fraction": args.freq_fraction,
                             "tail_min": args.tail_min, "buffer_convention": args.buffer_convention}

    files = {
        "sweep.csv": _render(write_sweep_csv, result),
        "sweep_summary.json": _dumps(summary),
        "alpha_skewness.csv": "trace,alpha,skewness\n"
        + "".join(f"{t},{a!r},{s!r}\n" for t, a, s in alpha_rows),
    }
    text = files["sweep_summary.json"] if args.format == "json" else files["sweep.csv"]
    _emit(files, args.out_dir, text)
    return 0 if not summary["failed"] else 1


# synth / convert


def cmd_synth(args) -> int:
    if args.ensemble:
        seed = 2024 if args.seed is None else args.seed
        files = {}
        for model, trace in rate_tail_ensemble(args.ensemble, seed=seed):
            files[f"{trace.name}.csv"] = write_csv(trace)
        _emit(files, args.out_dir or ".", None)
        return 0
    if args.config is None:
        raise CommandError("synth needs a config file or --ensemble N")
    try:
        model, run = read_config_file(args.config)
    except OSError as exc:
        raise CommandError(str(exc)) from None
    if args.seed is not None:
        from dataclasses import replace

        model = replace(model, seed=args.seed)
    trace, truth = generate(model, run["duration"], run["tau"])
    stem = Path(args.out).stem if args.out else trace.name
    files = {f"{stem}.csv": write_csv(trace),
             f"{stem}.truth.json": _render(write_ground_truth, truth)}
    out_dir = args.out_dir or (str(Path(args.out).parent) if args.out else ".")
    _emit(files, out_dir, None)
    return 0


def cmd_convert(args) -> int:
    trace = _load(args.src)
    to = args.to or ("pcap" if Path(args.dst).suffix == ".pcap" else "csv")
    data = write_pcap(trace) if to == "pcap" else write_csv(trace)
    dst = Path(args.dst)
    _emit({dst.name: data}, str(dst.parent), None)
    return 0


# argument parsing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nongauss", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, *, analysis=False, queue=False, out=True):
        if analysis:
            p.add_argument("--tau", type=float, default=DEFAULT_TAU, help="time unit in seconds")
            p.add_argument("--greedy-threshold", type=int, default=DEFAULT_GREEDY_THRESHOLD)
            p.add_argument("--tail-min", type=float, default=DEFAULT_TAIL_MIN)
            p.add_argument("--freq-fraction", type=float, default=DEFAULT_FREQ_FRACTION)
        if queue:
            p.add_argument("--rho", type=float, default=DEFAULT_RHO)
            p.add_argument("--buffer", type=int, default=DEFAULT_BUFFER)
            p.add_argument("--buffer-convention", choices=BUFFER_CONVENTIONS,
                           default=BUFFER_CONVENTIONS[0])
        if out:
            p.add_argument("--out-dir")
            p.add_argument("--format", choices=("json", "csv"), default="json")

    p = sub.add_parser("analyze", help="statistics and figure data for one trace")
    p.add_argument("trace")
    common(p, analysis=True)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("simulate", help="replay a trace through a FIFO tail-drop queue")
    p.add_argument("trace")
    p.add_argument("--bandwidth", type=float, help="bit/s; overrides --rho")
    common(p, queue=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("sweep", help="skewness, Hurst and loss across traces")
    p.add_argument("traces", nargs="+", help="trace files, directories, or .txt manifests")
    common(p, analysis=True, queue=True)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("synth", help="generate ON/OFF traces")
    p.add_argument("config", nargs="?")
    p.add_argument("--out", help="trace path; the ground truth goes beside it")
    p.add_argument("--out-dir")
    p.add_argument("--seed", type=int)
    p.add_argument("--ensemble", type=int, metavar="N", help="write the N-trace rate-tail ensemble")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("convert", help="pcap <-> CSV")
    p.add_argument("src")
    p.add_argument("dst")
    p.add_argument("--to", choices=("csv", "pcap"))
    p.set_defaults(func=cmd_convert)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (CommandError, ValueError) as exc:
        print(f"nongauss {args.command}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
