"""Command-line front end.

Every subcommand is a thin adapter: parse flags, convert units at the
boundary (microkelvin and microseconds outside, SI inside), call one
library entry point, print the result.  ``--json`` switches a command
from ``key: value`` lines to a JSON document; ``--output`` redirects the
bulk of the output (curves, tables, or the JSON document) to a file.

A JSON object in the file named by the ``RRTHERM_CONFIG`` environment
variable supplies defaults for long options, keyed by destination name
(``depth_uk``, ``mean_loading``, ...).  Explicit flags always win.

Exit status: 0 on success, 1 on a runtime failure (bad data, fit did
not settle, missing file), 2 on a usage error.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
from pathlib import Path

import numpy as np

from .constants import DEFAULT_WAVELENGTH, K_B, MASS_K41
from .inference import PriorSpec, error_bar, info_gain_curve, make_prior
from .ingest import (
    DEFAULT_ATOM_CAP,
    estimate_mean_loading,
    fit_calibration_histogram,
    load_record,
    photons_to_atoms,
)
from .physics import LikelihoodModel, TrapConfig
from .protocols import (
    AdaptiveSession,
    adaptive_step,
    default_prior_bounds,
    least_squares_fit,
    replay_record,
    replay_reordered,
)
from .simulate import (
    STREAM_ADAPTIVE,
    BenchmarkConfig,
    TrajectoryConfig,
    bootstrap_ordering_confidence,
    convergence_study,
    fitting_model,
    sample_outcome,
    stream_rng,
    validity_scan,
    variability_study,
)

CONFIG_ENV = "RRTHERM_CONFIG"

RECORD_HELP = (
    "Record CSV: optional '# key: value' metadata lines, then a header "
    "'t_us,atoms' or 't_us,photons', then one shot per row.  Rows with "
    "t_us = 0 are calibration shots; photon files convert through a "
    "calibration fitted from their own t_us = 0 rows."
)


class CliError(RuntimeError):
    """Runtime failure reported on stderr with exit status 1."""


def _us(value: float) -> str:
    """Seconds rendered as microseconds for user-facing text."""
    return format(value / 1e-6, ".6g")


def _uk(value: float) -> str:
    """Kelvin rendered as microkelvin for user-facing text."""
    return format(value / 1e-6, ".6g")


def _parse_span(text: str) -> tuple[float, float]:
    """'MIN:MAX' as two floats with MIN < MAX."""
    parts = text.split(":")
    if len(parts) != 2:
        raise argparse.ArgumentTypeError(f"expected MIN:MAX, got {text!r}")
    try:
        lo, hi = float(parts[0]), float(parts[1])
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected numbers in MIN:MAX, got {text!r}") from None
    if not (math.isfinite(lo) and math.isfinite(hi) and 0 < lo < hi):
        raise argparse.ArgumentTypeError("span needs 0 < MIN < MAX")
    return lo, hi


def _parse_grid(text: str) -> tuple[float, float, float]:
    """'MIN:MAX:STEP' in microseconds."""
    parts = text.split(":")
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(f"expected MIN:MAX:STEP, got {text!r}")
    try:
        lo, hi, step = (float(p) for p in parts)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected numbers in MIN:MAX:STEP, got {text!r}") from None
    if not (step > 0 and 0 < lo <= hi):
        raise argparse.ArgumentTypeError("grid needs 0 < MIN <= MAX and STEP > 0")
    return lo, hi, step


def _parse_floats(text: str) -> tuple[float, ...]:
    """Comma-separated floats."""
    try:
        values = tuple(float(p) for p in text.split(",") if p.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None
    if not values:
        raise argparse.ArgumentTypeError("empty list")
    return values


def _time_grid(args) -> np.ndarray:
    lo, hi, step = args.time_grid_us
    return np.arange(lo, hi + step / 2, step) * 1e-6


def _build_trap(args) -> TrapConfig:
    if args.depth_uk is None or args.waist_um is None:
        raise CliError("trap geometry is required: pass --depth-uk and --waist-um")
    return TrapConfig(
        depth=args.depth_uk * 1e-6 * K_B,
        waist=args.waist_um * 1e-6,
        mass=args.mass_kg,
        wavelength=args.wavelength_nm * 1e-9,
    )


def _build_prior(args, trap: TrapConfig) -> PriorSpec:
    if args.prior_uk is None:
        lo, hi = default_prior_bounds(trap)
    else:
        lo, hi = args.prior_uk[0] * 1e-6, args.prior_uk[1] * 1e-6
    return PriorSpec(lo, hi, grid_points=args.prior_points)


def _build_model(args, trap: TrapConfig, record=None) -> LikelihoodModel:
    """Outcome model from flags, falling back to a record's calibration."""
    if args.single_atom and args.mean_loading is not None:
        raise CliError("--single-atom and --lambda are mutually exclusive")
    if args.single_atom:
        return LikelihoodModel(trap)
    lam = args.mean_loading
    if lam is None and record is not None and record.calibration:
        lam = estimate_mean_loading(record.calibration)
    if lam is None:
        raise CliError(
            "loading model needed: pass --lambda, --single-atom, "
            "or a record with calibration shots"
        )
    if not lam > 0:
        raise CliError("mean loading must be positive")
    return fitting_model(trap, lam, args.atom_cap)


def _finish(args, payload: dict, summary: list[str], table: list[str] | None = None) -> int:
    """Common output tail: JSON document, or summary lines plus a table."""
    if args.json:
        text = json.dumps(payload, indent=2) + "\n"
        if args.output:
            Path(args.output).write_text(text)
        else:
            sys.stdout.write(text)
        return 0
    for line in summary:
        print(line)
    if table is not None:
        text = "\n".join(table) + "\n"
        if args.output:
            Path(args.output).write_text(text)
        else:
            sys.stdout.write(text)
    return 0


def _trace_payload(trace) -> list[dict]:
    return [
        {
            "t_us": p.release_time / 1e-6,
            "n": p.outcome,
            "temperature_uk": p.estimate / 1e-6,
            "error_uk": p.error / 1e-6,
        }
        for p in trace
    ]


def cmd_estimate(args) -> int:
    record = load_record(args.record, atom_cap=args.atom_cap)
    if not record.shots:
        raise CliError("empty record")
    trap = _build_trap(args)
    model = _build_model(args, trap, record)
    session = replay_record(record, _build_prior(args, trap), model)
    est, err = error_bar(session.posterior)
    payload = {
        "temperature_uk": est / 1e-6,
        "error_uk": err / 1e-6,
        "shots": len(record.shots),
        "calibration_shots": len(record.calibration),
        "mean_loading": model.mean_loading,
        "trace": _trace_payload(session.trace),
    }
    summary = [
        f"temperature_uk: {_uk(est)}",
        f"error_uk: {_uk(err)}",
        f"shots: {len(record.shots)}",
    ]
    return _finish(args, payload, summary)


def cmd_fit(args) -> int:
    record = load_record(args.record, atom_cap=args.atom_cap)
    if not record.shots:
        raise CliError("empty record")
    trap = _build_trap(args)
    if args.single_atom and args.mean_loading is not None:
        raise CliError("--single-atom and --lambda are mutually exclusive")
    fix = 1.0 if args.single_atom else args.mean_loading
    result = least_squares_fit(record, trap, fix_loading=fix)
    payload = {
        "temperature_uk": result.temperature / 1e-6,
        "temperature_sigma_uk": result.temperature_sigma / 1e-6,
        "mean_loading": result.mean_loading,
        "loading_sigma": result.loading_sigma,
        "converged": result.converged,
        "iterations": result.iterations,
        "residual_norm": result.residual_norm,
    }
    summary = [
        f"temperature_uk: {_uk(result.temperature)}",
        f"temperature_sigma_uk: {_uk(result.temperature_sigma)}",
        f"mean_loading: {result.mean_loading:.6g}",
        f"converged: {str(result.converged).lower()}",
    ]
    return _finish(args, payload, summary)


def cmd_optimal_time(args) -> int:
    trap = _build_trap(args)
    model = _build_model(args, trap)
    prior = make_prior(_build_prior(args, trap))
    curve = info_gain_curve(prior, model, _time_grid(args))
    payload = {
        "t_s_us": curve.best_time / 1e-6,
        "curve": [
            {"t_us": t / 1e-6, "info_gain": float(g)}
            for t, g in zip(curve.times, curve.gains)
        ],
    }
    summary = [f"t_s_us: {_us(curve.best_time)}"]
    table = ["t_us,info_gain"] + [
        f"{_us(t)},{g:.9g}" for t, g in zip(curve.times, curve.gains)
    ]
    return _finish(args, payload, summary, table)


def cmd_adapt(args) -> int:
    trap = _build_trap(args)
    model = _build_model(args, trap)
    session = AdaptiveSession.start(
        _build_prior(args, trap), model, calibration=(), search_times=_time_grid(args)
    )
    if args.simulate is not None:
        if args.shots is None:
            raise CliError("--simulate needs --shots")
        true_temperature = args.simulate * 1e-6
        rng = stream_rng(args.seed, STREAM_ADAPTIVE)
        for _ in range(args.shots):
            t = session.next_time
            n = sample_outcome(model, true_temperature, t, rng)
            # Progress goes to stderr so --json stays parseable on stdout.
            print(f"t_us={_us(t)} n={n}", file=sys.stderr)
            session = adaptive_step(session, n)
    else:
        taken = 0
        while args.shots is None or taken < args.shots:
            sys.stdout.write(f"t_us={_us(session.next_time)} n=? ")
            sys.stdout.flush()
            line = sys.stdin.readline()
            if not line:
                sys.stdout.write("\n")
                break
            line = line.strip()
            if not line:
                continue
            try:
                n = int(line)
            except ValueError:
                raise CliError(f"expected an integer count, got {line!r}") from None
            session = adaptive_step(session, n)
            taken += 1
    est, err = error_bar(session.posterior)
    payload = {
        "temperature_uk": est / 1e-6,
        "error_uk": err / 1e-6,
        "shots": len(session.record.shots),
        "trace": _trace_payload(session.trace),
    }
    summary = [f"temperature_uk: {_uk(est)}", f"error_uk: {_uk(err)}"]
    return _finish(args, payload, summary)


def _benchmark_config(args, trap: TrapConfig) -> BenchmarkConfig:
    return BenchmarkConfig(
        trap=trap,
        prior=_build_prior(args, trap),
        true_temperature=args.true_temp_uk * 1e-6,
        mean_loading=args.mean_loading if args.mean_loading is not None else 1.65,
        atom_cap=args.atom_cap,
        schedule=tuple(t * 1e-6 for t in args.schedule_us),
        shots=args.shots,
        calibration_shots=args.calibration_shots,
        seed=args.seed,
    )


def cmd_simulate_variability(args) -> int:
    cfg = _benchmark_config(args, _build_trap(args))
    protocols = args.protocols
    results = {name: variability_study(name, cfg, args.runs) for name in protocols}
    payload = {
        "runs": args.runs,
        "protocols": {
            name: {
                "variability": r.variability,
                "mean_estimate_uk": r.mean_estimate / 1e-6,
                "estimates_uk": [e / 1e-6 for e in r.estimates],
            }
            for name, r in results.items()
        },
    }
    summary = [f"{name}_variability: {r.variability:.6g}" for name, r in results.items()]
    if "adaptive" in results and "least_squares" in results:
        confidence = bootstrap_ordering_confidence(
            results["adaptive"].estimates, results["least_squares"].estimates
        )
        payload["p_adaptive_below_least_squares"] = confidence
        summary.append(f"p_adaptive_below_least_squares: {confidence:.4g}")
    return _finish(args, payload, summary)


def cmd_simulate_convergence(args) -> int:
    cfg = _benchmark_config(args, _build_trap(args))
    grid = tuple(int(k) for k in args.shot_grid) if args.shot_grid else None
    report = convergence_study(cfg, shot_grid=grid, runs=args.runs, protocols=tuple(args.protocols))
    payload = {"runs": args.runs, "curves": {}}
    summary = []
    table = ["protocol,shots,variability"]
    for curve in report.curves:
        payload["curves"][curve.protocol] = {
            "exponent": curve.exponent,
            "onset_shots": curve.onset_shots,
            "asymptote": curve.asymptote,
            "shot_counts": list(curve.shot_counts),
            "variabilities": list(curve.variabilities),
        }
        summary += [
            f"{curve.protocol}_exponent: {curve.exponent:.6g}",
            f"{curve.protocol}_onset_shots: {curve.onset_shots}",
            f"{curve.protocol}_asymptote: {curve.asymptote:.6g}",
        ]
        table += [
            f"{curve.protocol},{k},{v:.9g}"
            for k, v in zip(curve.shot_counts, curve.variabilities)
        ]
    try:
        reduction = report.variability_reduction()
    except KeyError:
        reduction = None
    if reduction is not None:
        payload["variability_reduction"] = reduction
        summary.append(f"variability_reduction: {reduction:.6g}")
    return _finish(args, payload, summary, table)


def cmd_calibrate(args) -> int:
    try:
        raw = Path(args.counts).read_text()
    except OSError as exc:
        raise CliError(str(exc)) from None
    values = []
    for line in raw.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        for token in line.replace(",", " ").split():
            try:
                values.append(float(token))
            except ValueError:
                raise CliError(f"calibration counts must be numbers, got {token!r}") from None
    if not values:
        raise CliError("empty calibration file")
    fit = fit_calibration_histogram(values, n_peaks=args.atom_cap + 1)
    atoms = [photons_to_atoms(v, fit, atom_cap=args.atom_cap) for v in values]
    lam = estimate_mean_loading(atoms)
    payload = {
        "peak_offset": fit.peak_offset,
        "peak_spacing": fit.peak_spacing,
        "peak_width": fit.peak_widths[0],
        "amplitudes": list(fit.amplitudes),
        "residual_norm": fit.residual_norm,
        "converged": fit.converged,
        "n_peaks": fit.n_peaks,
        "mean_loading": lam,
        "samples": len(values),
    }
    summary = [
        f"peak_offset: {fit.peak_offset:.6g}",
        f"peak_spacing: {fit.peak_spacing:.6g}",
        f"peak_width: {fit.peak_widths[0]:.6g}",
        f"mean_loading: {lam:.6g}",
        f"converged: {str(fit.converged).lower()}",
    ]
    return _finish(args, payload, summary)


def cmd_validate_model(args) -> int:
    trap = _build_trap(args)
    config = TrajectoryConfig(
        trajectories=args.trajectories,
        position_spread=not args.no_position_spread,
        axial_on=not args.no_axial,
        gravity_on=not args.no_gravity,
        gravity_axis=args.gravity_axis,
    )
    cells = validity_scan(
        trap,
        [t * 1e-6 for t in args.temps_uk],
        [t * 1e-6 for t in args.times_us],
        config,
        seed=args.seed,
    )
    flagged = sum(c.flagged for c in cells)
    payload = {
        "trajectories": args.trajectories,
        "flagged_cells": flagged,
        "cells": [
            {
                "temperature_uk": c.temperature / 1e-6,
                "t_us": c.release_time / 1e-6,
                "analytic": c.analytic,
                "simulated": c.simulated,
                "stderr": c.stderr,
                "untrapped_fraction": c.untrapped_fraction,
                "flagged": c.flagged,
            }
            for c in cells
        ],
    }
    summary = [f"flagged_cells: {flagged}/{len(cells)}"]
    table = ["temp_uk,t_us,analytic,simulated,stderr,untrapped,flagged"] + [
        f"{_uk(c.temperature)},{_us(c.release_time)},{c.analytic:.6g},"
        f"{c.simulated:.6g},{c.stderr:.3g},{c.untrapped_fraction:.3g},"
        f"{str(c.flagged).lower()}"
        for c in cells
    ]
    return _finish(args, payload, summary, table)


def cmd_replay(args) -> int:
    record = load_record(args.record, atom_cap=args.atom_cap)
    if not record.shots:
        raise CliError("empty record")
    trap = _build_trap(args)
    model = _build_model(args, trap, record)
    result = replay_reordered(
        record, _build_prior(args, trap), model, args.order, search_times=_time_grid(args)
    )
    est, err = error_bar(result.posterior)
    payload = {
        "order": result.order,
        "reference_time_us": result.reference_time / 1e-6,
        "temperature_uk": est / 1e-6,
        "error_uk": err / 1e-6,
        "trace": _trace_payload(result.trace),
    }
    summary = [
        f"order: {result.order}",
        f"reference_time_us: {_us(result.reference_time)}",
        f"temperature_uk: {_uk(est)}",
        f"error_uk: {_uk(err)}",
    ]
    return _finish(args, payload, summary)


def cmd_serve(args) -> int:
    # Imported here so every other subcommand works without the web stack.
    import uvicorn

    from .service import create_app

    app = create_app(persist_path=args.persist)
    uvicorn.run(app, host=args.host, port=args.port, log_level="warning")
    return 0


def _add_trap_args(parser) -> None:
    group = parser.add_argument_group("trap")
    group.add_argument("--depth-uk", type=float, default=None, help="trap depth U0/kB in uK")
    group.add_argument("--waist-um", type=float, default=None, help="beam waist in um")
    group.add_argument("--mass-kg", type=float, default=MASS_K41, help="atomic mass in kg")
    group.add_argument(
        "--wavelength-nm",
        type=float,
        default=DEFAULT_WAVELENGTH / 1e-9,
        help="trapping wavelength in nm (sets the axial length scale)",
    )


def _add_prior_args(parser) -> None:
    group = parser.add_argument_group("prior")
    group.add_argument(
        "--prior-uk",
        type=_parse_span,
        default=None,
        metavar="MIN:MAX",
        help="temperature support in uK (default: 5%% to 43%% of the depth)",
    )
    group.add_argument("--prior-points", type=int, default=1001, help="log-grid resolution")


def _add_model_args(parser) -> None:
    group = parser.add_argument_group("loading model")
    group.add_argument(
        "--lambda",
        dest="mean_loading",
        type=float,
        default=None,
        help="mean atoms loaded per shot (Poisson)",
    )
    group.add_argument(
        "--single-atom",
        action="store_true",
        help="deterministic single-atom loading (binary outcomes)",
    )
    group.add_argument(
        "--atom-cap",
        type=int,
        default=DEFAULT_ATOM_CAP,
        help="largest resolved atom count",
    )


def _add_grid_args(parser) -> None:
    parser.add_argument(
        "--time-grid-us",
        type=_parse_grid,
        default=(2.0, 200.0, 2.0),
        metavar="MIN:MAX:STEP",
        help="candidate release times in us (default 2:200:2)",
    )


def _add_output_args(parser) -> None:
    group = parser.add_argument_group("output")
    group.add_argument("--json", action="store_true", help="emit a JSON document")
    group.add_argument("--output", default=None, help="write bulk output to this file")


def _add_benchmark_args(parser) -> None:
    group = parser.add_argument_group("benchmark")
    group.add_argument("--true-temp-uk", type=float, default=40.0, help="simulated truth in uK")
    group.add_argument(
        "--schedule-us",
        type=_parse_floats,
        default=(5.0, 10.0, 20.0, 30.0, 50.0, 70.0, 100.0),
        help="fixed measurement schedule in us (comma-separated)",
    )
    group.add_argument("--shots", type=int, default=210, help="measurement shots per run")
    group.add_argument(
        "--calibration-shots", type=int, default=60, help="zero-release shots per run"
    )
    group.add_argument("--seed", type=int, default=1, help="base seed for the run streams")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rrtherm",
        description="Release-recapture thermometry: estimate, plan, and audit.",
        epilog=f"Defaults may come from a JSON file named by ${CONFIG_ENV}. {RECORD_HELP}",
    )
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    p = sub.add_parser(
        "estimate", help="posterior temperature from a record", epilog=RECORD_HELP
    )
    p.add_argument("record", help="record CSV file")
    _add_trap_args(p), _add_prior_args(p), _add_model_args(p), _add_output_args(p)
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser(
        "fit", help="least-squares temperature fit of a record", epilog=RECORD_HELP
    )
    p.add_argument("record", help="record CSV file")
    _add_trap_args(p), _add_model_args(p), _add_output_args(p)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("optimal-time", help="most informative release time for a prior")
    _add_trap_args(p), _add_prior_args(p), _add_model_args(p), _add_grid_args(p)
    _add_output_args(p)
    p.set_defaults(func=cmd_optimal_time)

    p = sub.add_parser(
        "adapt",
        help="interactive adaptive run: prompts for each outcome",
        epilog="Prompts 't_us=<x> n=? ' and reads one integer per line; "
        "EOF ends the run and prints the final estimate.",
    )
    _add_trap_args(p), _add_prior_args(p), _add_model_args(p), _add_grid_args(p)
    _add_output_args(p)
    p.add_argument("--shots", type=int, default=None, help="stop after this many outcomes")
    p.add_argument(
        "--simulate",
        type=float,
        default=None,
        metavar="TEMP_UK",
        help="answer the prompts from a sampler at this true temperature",
    )
    p.add_argument("--seed", type=int, default=0, help="sampler seed for --simulate")
    p.set_defaults(func=cmd_adapt)

    p = sub.add_parser("simulate", help="protocol benchmark studies")
    study = p.add_subparsers(dest="study", required=True, metavar="study")

    q = study.add_parser("variability", help="relative spread of each protocol's estimates")
    _add_trap_args(q), _add_prior_args(q), _add_model_args(q), _add_benchmark_args(q)
    _add_output_args(q)
    q.add_argument("--runs", type=int, default=100, help="independent seeded runs")
    q.add_argument(
        "--protocols",
        type=lambda s: tuple(p.strip() for p in s.split(",") if p.strip()),
        default=("least_squares", "bayes", "apriori", "adaptive"),
        help="comma-separated protocol names",
    )
    q.set_defaults(func=cmd_simulate_variability)

    q = study.add_parser("convergence", help="variability against shot budget")
    _add_trap_args(q), _add_prior_args(q), _add_model_args(q), _add_benchmark_args(q)
    _add_output_args(q)
    q.add_argument("--runs", type=int, default=1000, help="independent seeded runs")
    q.add_argument(
        "--shot-grid",
        type=_parse_floats,
        default=None,
        help="shot budgets to scan (comma-separated; default multiples of the schedule)",
    )
    q.add_argument(
        "--protocols",
        type=lambda s: tuple(p.strip() for p in s.split(",") if p.strip()),
        default=("conventional", "apriori"),
        help="comma-separated protocol names",
    )
    q.set_defaults(func=cmd_simulate_convergence)

    p = sub.add_parser(
        "calibrate",
        help="fit the photon-count comb of a calibration file",
        epilog="Counts file: one photon count per line; blank lines and "
        "'#' comments are ignored.",
    )
    p.add_argument("counts", help="photon counts file")
    p.add_argument(
        "--atom-cap", type=int, default=DEFAULT_ATOM_CAP, help="largest resolved atom count"
    )
    _add_output_args(p)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser(
        "validate-model",
        help="closed formula against classical trajectories",
    )
    _add_trap_args(p), _add_output_args(p)
    p.add_argument(
        "--temps-uk", type=_parse_floats, default=(15.0, 40.0, 80.0, 125.0),
        help="temperatures to scan, in uK",
    )
    p.add_argument(
        "--times-us", type=_parse_floats, default=(10.0, 35.0, 60.0),
        help="release times to scan, in us",
    )
    p.add_argument("--trajectories", type=int, default=5000, help="samples per cell")
    p.add_argument("--no-position-spread", action="store_true", help="point-source atoms")
    p.add_argument("--no-axial", action="store_true", help="ignore axial motion")
    p.add_argument("--no-gravity", action="store_true", help="ignore gravity")
    p.add_argument(
        "--gravity-axis", choices=("axial", "radial"), default="axial",
        help="beam orientation relative to gravity",
    )
    p.add_argument("--seed", type=int, default=0, help="trajectory sampling seed")
    p.set_defaults(func=cmd_validate_model)

    p = sub.add_parser(
        "replay",
        help="replay a record with its time groups reordered by informativeness",
        epilog=RECORD_HELP,
    )
    p.add_argument("record", help="record CSV file")
    p.add_argument(
        "--order", choices=("nearest", "farthest"), required=True,
        help="group order relative to the prior's optimal time",
    )
    _add_trap_args(p), _add_prior_args(p), _add_model_args(p), _add_grid_args(p)
    _add_output_args(p)
    p.set_defaults(func=cmd_replay)

    p = sub.add_parser("serve", help="run the measurement-session HTTP service")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    p.add_argument(
        "--persist", default=None, metavar="PATH",
        help="save sessions to this JSON file on shutdown and load them on start",
    )
    _add_output_args(p)
    p.set_defaults(func=cmd_serve)

    _apply_config_defaults(parser, sub)
    return parser


def _apply_config_defaults(parser, sub) -> None:
    """Seed parser defaults from the JSON file named by RRTHERM_CONFIG.

    Keys are option destination names; unknown keys are ignored so one
    config file can serve several subcommands.  String values run through
    the option's normal type conversion at parse time.
    """
    path = os.environ.get(CONFIG_ENV)
    if not path:
        return
    try:
        config = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        parser.error(f"bad config file {path!r}: {exc}")
    if not isinstance(config, dict):
        parser.error(f"bad config file {path!r}: expected a JSON object")
    for command in sub.choices.values():
        parsers = [command]
        for action in command._actions:
            if isinstance(action, argparse._SubParsersAction):
                parsers += list(action.choices.values())
        for target in parsers:
            dests = {a.dest for a in target._actions}
            relevant = {k: v for k, v in config.items() if k in dests}
            if relevant:
                target.set_defaults(**relevant)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ValueError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
