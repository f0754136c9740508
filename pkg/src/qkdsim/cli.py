"""Command-line scenario runner.

    qkdsim run --spec paper-zero-bias --out runs/zero
    qkdsim calibrate --spec paper-high-bias --knob se_rate_per_laser --target 2.67% --out hb.ini
    qkdsim compare runs/zero runs/high
    qkdsim certify --spec paper-high-bias

Exit status: 0 success, 1 closure certification failed, 2 bad input,
3 calibration target unreachable.
"""
from __future__ import annotations

import argparse
import math
import os
import sys
import tempfile
from pathlib import Path

import numpy as np

from .engine import RngSeed, simulate_run
from .keyrate import (
    CALIBRATION_KNOBS,
    CalibrationError,
    calibrate,
    sweep_windows,
    window_key_rate,
)
from .model import ConfigError, Polarization
from .scenario import ScenarioSpec, SpecError, format_spec, load_spec, parse_quantity
from .sidechan import certify_closure
from .sifting import TimeWindow, qber_decomposition, squash_and_sift

EXIT_OK, EXIT_CERTIFY_FAILED, EXIT_USAGE, EXIT_CALIBRATION = 0, 1, 2, 3

SUMMARY_FILE = "summary.txt"
HISTOGRAM_FILE = "histogram.csv"
SWEEP_FILE = "sweep.csv"
TV_FILE = "tv_matrix.csv"


def fmt(value) -> str:
    if isinstance(value, (bool, np.bool_)):
        return str(bool(value)).lower()
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, float) and not math.isfinite(value):
        return str(value)
    if isinstance(value, (float, np.floating)):
        return f"{float(value):.6g}"
    return str(value)


def write_atomic(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_summary(path: Path) -> dict[str, str]:
    path = Path(path)
    if path.is_dir():
        path = path / SUMMARY_FILE
    out = {}
    for line in path.read_text(encoding="utf-8").splitlines():
        if line.strip():
            key, _, value = line.partition("=")
            out[key.strip()] = value.strip()
    return out


def run_scenario(spec: ScenarioSpec, seed: int, threads: int = 1) -> dict:
    """Simulate, sweep and certify one scenario; return the tables the CLI writes."""
    rng = RngSeed(seed)
    cfg = spec.config
    res = simulate_run(cfg, spec.side_channel, spec.n_slots, rng, threads)
    sweep = sweep_windows(res.record, cfg, spec.widths, rng)
    full = TimeWindow.full(cfg.bins_per_slot, cfg.bin_width)
    full_stats = squash_and_sift(res.record, rng)
    full_secure = window_key_rate(full_stats, res.record.n_unfiltered, res.record.n_slots, cfg)
    decomp = qber_decomposition(res.record, full, rng)
    closure = certify_closure(spec.side_channel, cfg, spec.closure_epsilon)
    opt = sweep.optimal
    summary = {
        "scenario": spec.name,
        "n_slots": spec.n_slots,
        "seed": seed,
        "detections": res.record.n_detections,
        "qber_full": full_stats.qber,
        "sifted_bps_full": full_stats.sifted_rate,
        "secure_bps_full": full_secure,
        "optimal_width_ns": opt.width * 1e9,
        "optimal_start_bin": opt.start_bin,
        "qber_optimal": opt.qber,
        "sifted_bps_optimal": opt.sifted_rate,
        "secure_bps_optimal": opt.secure_rate,
        "detection_sacrifice_optimal": 1.0 - opt.stats.retained_fraction,
        "filtering_gain": opt.secure_rate / full_secure - 1.0 if full_secure > 0 else 0.0,
        "qber_signal_full": decomp.signal,
        "qber_se_full": decomp.spont_emission,
        "qber_dark_full": decomp.dark,
        "lobe_fwhm_ps": res.histogram.lobe_fwhm() * 1e12,
        "closure_pass": closure.passed,
        "closure_max_tv": closure.max_tv,
        "closure_max_amplitude_deviation": closure.max_amplitude_deviation,
    }
    return {"summary": summary, "result": res, "sweep": sweep, "closure": closure}


def render(outputs: dict) -> dict[str, str]:
    summary = "".join(f"{k}={fmt(v)}\n" for k, v in outputs["summary"].items())
    hist = ["channel,bin,count"]
    counts = outputs["result"].histogram.counts
    for ch in range(counts.shape[0]):
        for b in range(counts.shape[1]):
            hist.append(f"{Polarization(ch).name},{b},{counts[ch, b]}")
    sweep = ["width_ns,start_bin,qber,sifted_bps,secure_bps"]
    for r in outputs["sweep"].rows:
        sweep.append(",".join(fmt(v) for v in (r.width * 1e9, r.start_bin, r.qber,
                                                  r.sifted_rate, r.secure_rate)))
    return {
        SUMMARY_FILE: summary,
        HISTOGRAM_FILE: "\n".join(hist) + "\n",
        SWEEP_FILE: "\n".join(sweep) + "\n",
        TV_FILE: render_tv(outputs["closure"]),
    }


def render_tv(closure) -> str:
    names = [fmt(i * 1e9) for i in closure.waveforms.intervals]
    rows = ["interval_ns," + ",".join(names)]
    for name, row in zip(names, closure.tv_matrix):
        rows.append(name + "," + ",".join(fmt(float(v)) for v in row))
    return "\n".join(rows) + "\n"


def _load(args) -> ScenarioSpec:
    spec = load_spec(args.spec)
    if getattr(args, "slots", None) is not None:
        if args.slots < 1:
            raise SpecError("n_slots must be ≥ 1", field="n_slots")
        spec = spec.with_(n_slots=args.slots)
    return spec


def cmd_run(args) -> int:
    spec = _load(args)
    seed = spec.resolve_seed(args.seed)
    outputs = run_scenario(spec, seed, args.threads)
    files = render(outputs)
    for name, text in files.items():
        write_atomic(Path(args.out) / name, text)
    print(files[SUMMARY_FILE], end="")
    return EXIT_OK


def cmd_calibrate(args) -> int:
    spec = _load(args)
    seed = spec.resolve_seed(args.seed)
    target = parse_quantity(args.target)

    def trace(p):
        print(f"probe {args.knob}={p.value:.10g} qber={p.qber:.6g} (±{p.sigma:.2g})", flush=True)

    try:
        cal = calibrate(spec.config, target, args.knob, RngSeed(seed),
                        side_channel=spec.side_channel, n_slots=spec.n_slots,
                        threads=args.threads, on_probe=trace)
    except CalibrationError as e:
        print(f"calibration failed: {e} (bracket {e.bracket})", file=sys.stderr)
        return EXIT_CALIBRATION
    new = spec.with_(config=spec.config.with_(**{args.knob: cal.value}), seed=seed)
    out = Path(args.out) if args.out else Path(f"{spec.name}-calibrated.ini")
    write_atomic(out, format_spec(new))
    print(f"{args.knob}={cal.value!r} qber={cal.qber:.6g} -> {out}")
    return EXIT_OK


def compare_summaries(a: dict[str, str], b: dict[str, str]) -> dict[str, float]:
    """Relative secure-rate changes (%) and QBER changes (pp) from run A to run B."""

    def pct(new, old):
        return (new / old - 1.0) * 100.0 if old else float("nan")

    def val(d, k):
        return float(d[k])

    return {
        "secure_full_delta_pct": pct(val(b, "secure_bps_full"), val(a, "secure_bps_full")),
        "secure_optimal_delta_pct": pct(val(b, "secure_bps_optimal"), val(a, "secure_bps_optimal")),
        "qber_full_delta_pp": (val(b, "qber_full") - val(a, "qber_full")) * 100.0,
        "qber_optimal_delta_pp": (val(b, "qber_optimal") - val(a, "qber_optimal")) * 100.0,
        "filtering_gain_a_pct": pct(val(a, "secure_bps_optimal"), val(a, "secure_bps_full")),
        "filtering_gain_b_pct": pct(val(b, "secure_bps_optimal"), val(b, "secure_bps_full")),
    }


def cmd_compare(args) -> int:
    try:
        a, b = read_summary(Path(args.run_a)), read_summary(Path(args.run_b))
        report = compare_summaries(a, b)
    except (OSError, KeyError, ValueError) as e:
        print(f"error: cannot compare runs: {e}", file=sys.stderr)
        return EXIT_USAGE
    text = "".join(f"{k}={fmt(v)}\n" for k, v in report.items())
    if args.out:
        write_atomic(Path(args.out), text)
    print(text, end="")
    return EXIT_OK


def cmd_certify(args) -> int:
    spec = _load(args)
    eps = args.epsilon if args.epsilon is not None else spec.closure_epsilon
    report = certify_closure(spec.side_channel, spec.config, eps)
    print(f"closure_pass={fmt(report.passed)}")
    print(f"max_tv={fmt(report.max_tv)}")
    print(f"max_amplitude_deviation={fmt(report.max_amplitude_deviation)}")
    print(f"epsilon={fmt(eps)}")
    if args.out:
        write_atomic(Path(args.out) / TV_FILE, render_tv(report))
    return EXIT_OK if report.passed else EXIT_CERTIFY_FAILED


def _u64(text: str) -> int:
    v = int(text, 0)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="qkdsim", description=__doc__.split("\n")[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_help):
        sp.add_argument("--spec", required=True,
                        help="scenario file, or a bundled name (paper-zero-bias, paper-high-bias)")
        sp.add_argument("--out", help=out_help)
        sp.add_argument("--seed", type=_u64, help="overrides the spec seed and $QKDSIM_SEED")
        sp.add_argument("--slots", type=int, help="override n_slots")
        sp.add_argument("--threads", type=int, default=1)

    sp = sub.add_parser("run", help="simulate a scenario and write result tables")
    common(sp, "output directory")
    sp.set_defaults(func=cmd_run)

    sp = sub.add_parser("calibrate", help="bisect one noise knob to a target full-window QBER")
    common(sp, "path of the calibrated spec file to write")
    sp.add_argument("--knob", required=True, choices=CALIBRATION_KNOBS)
    sp.add_argument("--target", required=True, help="target QBER, e.g. 0.0104 or 1.04%%")
    sp.set_defaults(func=cmd_calibrate)

    sp = sub.add_parser("compare", help="percentage deltas between two run directories")
    sp.add_argument("run_a")
    sp.add_argument("run_b")
    sp.add_argument("--out", help="also write the report to this file")
    sp.set_defaults(func=cmd_compare)

    sp = sub.add_parser("certify", help="check that the timing/intensity side channel is closed")
    common(sp, f"directory for {TV_FILE}")
    sp.add_argument("--epsilon", type=float)
    sp.set_defaults(func=cmd_certify)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    if args.command == "run" and not args.out:
        print("error: run needs --out DIR", file=sys.stderr)
        return EXIT_USAGE
    if getattr(args, "threads", 1) < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except (SpecError, ConfigError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
