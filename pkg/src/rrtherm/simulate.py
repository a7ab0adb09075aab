"""Synthetic experiments: outcome sampling, trajectory validation, studies.

Reproducibility contract: every stochastic entry point takes a seed (or a
generator built from one) and runs on counter-based Philox streams.  A
stream is keyed by (seed, role_base + run_index), so any run of any study
can be regenerated in isolation and parallel scheduling cannot reorder
draws.  Role bases below; protocols that share data within a run (the fixed
schedule analysed both ways) share the stream.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .constants import K_B, STANDARD_GRAVITY
from .inference import PosteriorGrid, PriorSpec, estimate, make_prior, optimal_time
from .physics import (
    MAX_TRUNCATION_TAIL,
    LikelihoodModel,
    TrapConfig,
    loading_tail,
    recapture_curve,
    recapture_fraction,
)
from .protocols import (
    MeasurementRecord,
    adaptive_protocol,
    apriori_protocol,
    fit_recapture_means,
    least_squares_fit,
    replay_record,
)

STREAM_CALIBRATION = 1 << 20
STREAM_SCHEDULE = 2 << 20
STREAM_APRIORI = 3 << 20
STREAM_ADAPTIVE = 4 << 20
STREAM_TRAJECTORY = 5 << 20
STREAM_BOOTSTRAP = 6 << 20

# Calibration means below this are unusable as Poisson rates; tiny
# calibration prefixes in the convergence study occasionally produce zeros.
MIN_FITTED_LOADING = 0.05


def stream_rng(seed: int, stream: int) -> np.random.Generator:
    """Independent generator for one (seed, stream) pair."""
    return np.random.Generator(np.random.Philox(key=[seed & (2**64 - 1), stream & (2**64 - 1)]))


def sample_outcome(
    model: LikelihoodModel, true_temperature: float, release_time: float, rng: np.random.Generator
) -> int:
    """Draw one shot from the generative process the model describes.

    Multi-atom loading is Poisson thinned by per-atom survival; counts
    beyond the model's outcome cap saturate at the cap, mirroring how the
    detection pipeline clamps converted counts.
    """
    f = recapture_fraction(model.trap, true_temperature, release_time)
    if not model.multi_atom:
        return int(rng.random() < f)
    kept = rng.binomial(rng.poisson(model.mean_loading), f)
    return int(min(kept, model.atom_cap))


def sample_outcomes(
    model: LikelihoodModel,
    true_temperature: float,
    release_time: float,
    rng: np.random.Generator,
    size: int,
) -> np.ndarray:
    """Vectorised ``sample_outcome``."""
    f = recapture_fraction(model.trap, true_temperature, release_time)
    if not model.multi_atom:
        return (rng.random(size) < f).astype(np.int64)
    kept = rng.binomial(rng.poisson(model.mean_loading, size), f)
    return np.minimum(kept, model.atom_cap)


def fitting_model(trap: TrapConfig, mean_loading: float, atom_cap: int) -> LikelihoodModel:
    """Likelihood model at an estimated loading, widening the cap if needed.

    A noisy calibration can push the loading estimate past what the
    requested cap truncates acceptably; the cap is an analysis choice, so
    it grows until the neglected tail is back in bounds.
    """
    cap = atom_cap
    while loading_tail(mean_loading, cap) >= MAX_TRUNCATION_TAIL:
        cap += 1
    return LikelihoodModel(trap, mean_loading=mean_loading, atom_cap=cap)


@dataclass(frozen=True)
class TrajectoryConfig:
    """Switches for the classical trajectory simulation.

    The full simulation samples thermal positions and velocities in three
    dimensions with gravity along the beam axis.  Turning everything off
    walks the simulation down to the closed formula's own idealisation:
    point-source atoms carrying only radial velocity.
    """

    trajectories: int = 5000
    position_spread: bool = True
    axial_on: bool = True
    gravity_on: bool = True
    gravity_axis: str = "axial"

    def __post_init__(self) -> None:
        if self.trajectories < 1:
            raise ValueError("need at least one trajectory")
        if self.gravity_axis not in ("axial", "radial"):
            raise ValueError("gravity_axis must be 'axial' or 'radial'")
        if self.gravity_on and self.gravity_axis == "axial" and not self.axial_on:
            raise ValueError("axial gravity needs axial motion enabled")


def analytic_limit_config(trajectories: int = 100_000) -> TrajectoryConfig:
    """Trajectory switches matching the closed formula's assumptions."""
    return TrajectoryConfig(
        trajectories=trajectories, position_spread=False, axial_on=False, gravity_on=False
    )


@dataclass(frozen=True)
class TrajectoryEstimate:
    """Monte-Carlo recapture fraction with its sampling error."""

    fraction: float
    stderr: float
    untrapped_fraction: float


def mc_recapture_fraction(
    trap: TrapConfig,
    temperature: float,
    release_time: float,
    config: TrajectoryConfig,
    rng: np.random.Generator,
) -> TrajectoryEstimate:
    """Recapture fraction from classical trajectories in the Gaussian beam.

    Positions and velocities are thermal in the harmonic approximation of
    the beam potential and the flight is ballistic.  An atom counts as
    recaptured when its radial kinetic energy is below the local depth of
    the restored potential: axial displacement (thermal drift plus the
    gravitational drop) weakens the well an atom returns to, but energy in
    the slow axial oscillation is not what expels it on the release
    timescale.  The recapture probability is normalised by the trapped
    share 1 - exp(-U0/(kB T)) of an ideal thermal ensemble, the same
    factor that normalises the closed formula, so both quote survival
    relative to the initially trapped population.  Sampled atoms that
    start unbound are kept, not redrawn; their share is reported as
    ``untrapped_fraction``.
    """
    n = config.trajectories
    kbt = K_B * temperature
    sigma_r = 0.5 * trap.waist * math.sqrt(kbt / trap.depth)
    sigma_v = math.sqrt(kbt / trap.mass)
    rayleigh = trap.rayleigh_range
    if config.position_spread:
        x = rng.normal(0.0, sigma_r, n)
        y = rng.normal(0.0, sigma_r, n)
    else:
        x = np.zeros(n)
        y = np.zeros(n)
    vx = rng.normal(0.0, sigma_v, n)
    vy = rng.normal(0.0, sigma_v, n)
    if config.axial_on:
        sigma_z = rayleigh * math.sqrt(kbt / (2.0 * trap.depth))
        z = rng.normal(0.0, sigma_z, n) if config.position_spread else np.zeros(n)
        vz = rng.normal(0.0, sigma_v, n)
    else:
        z = np.zeros(n)
        vz = np.zeros(n)

    def local_depth(px, py, pz):
        axial_factor = 1.0 + (pz / rayleigh) ** 2
        waist_sq = trap.waist**2 * axial_factor
        return trap.depth * np.exp(-2.0 * (px**2 + py**2) / waist_sq) / axial_factor

    t = release_time
    x1, y1, z1 = x + vx * t, y + vy * t, z + vz * t
    vx1 = vx
    if config.gravity_on:
        drop = 0.5 * STANDARD_GRAVITY * t * t
        if config.gravity_axis == "axial":
            z1 = z1 - drop
        else:
            x1 = x1 - drop
            vx1 = vx - STANDARD_GRAVITY * t

    bound0 = 0.5 * trap.mass * (vx**2 + vy**2) < local_depth(x, y, z)
    bound1 = 0.5 * trap.mass * (vx1**2 + vy**2) < local_depth(x1, y1, z1)

    trapped_share = -math.expm1(-trap.depth / kbt)
    p = float((bound1 & bound0).sum()) / n
    fraction = p / trapped_share
    stderr = math.sqrt(p * (1.0 - p) / n) / trapped_share
    return TrajectoryEstimate(fraction, stderr, 1.0 - float(bound0.sum()) / n)


@dataclass(frozen=True)
class ValidityCell:
    """One (temperature, time) comparison of formula against trajectories."""

    temperature: float
    release_time: float
    analytic: float
    simulated: float
    stderr: float
    untrapped_fraction: float
    flagged: bool


def validity_scan(
    trap: TrapConfig,
    temperatures: Iterable[float],
    release_times: Iterable[float],
    config: TrajectoryConfig = TrajectoryConfig(),
    seed: int = 0,
) -> list[ValidityCell]:
    """Grid the closed formula against the trajectory simulation.

    A cell is flagged when the disagreement exceeds three sampling sigmas
    plus an absolute 0.02 floor, which is where the point-source model has
    visibly stopped describing the geometry.
    """
    cells = []
    for i, temperature in enumerate(temperatures):
        for j, release_time in enumerate(release_times):
            rng = stream_rng(seed, STREAM_TRAJECTORY + 1000 * i + j)
            analytic = recapture_fraction(trap, temperature, release_time)
            mc = mc_recapture_fraction(trap, temperature, release_time, config, rng)
            deviation = abs(analytic - mc.fraction)
            cells.append(
                ValidityCell(
                    temperature=temperature,
                    release_time=release_time,
                    analytic=analytic,
                    simulated=mc.fraction,
                    stderr=mc.stderr,
                    untrapped_fraction=mc.untrapped_fraction,
                    flagged=deviation > 3.0 * mc.stderr + 0.02,
                )
            )
    return cells


@dataclass(frozen=True)
class BenchmarkConfig:
    """Shared setup of the protocol comparison studies."""

    trap: TrapConfig
    prior: PriorSpec
    true_temperature: float = 40e-6
    mean_loading: float = 1.65
    atom_cap: int = 7
    schedule: tuple[float, ...] = (5e-6, 10e-6, 20e-6, 30e-6, 50e-6, 70e-6, 100e-6)
    shots: int = 210
    calibration_shots: int = 60
    seed: int = 1

    def true_model(self) -> LikelihoodModel:
        return LikelihoodModel(self.trap, mean_loading=self.mean_loading, atom_cap=self.atom_cap)


@dataclass(frozen=True)
class StudyResult:
    """Per-run estimates of one protocol and their relative spread."""

    protocol: str
    estimates: tuple[float, ...]
    mean_estimate: float
    variability: float


def _relative_variance(estimates: np.ndarray) -> float:
    return float(np.var(estimates) / estimates.mean() ** 2)


def _schedule_record(cfg: BenchmarkConfig, run: int) -> MeasurementRecord:
    """Fixed-schedule record for one run; shared by both schedule analyses."""
    rng = stream_rng(cfg.seed, STREAM_SCHEDULE + run)
    per_time = cfg.shots // len(cfg.schedule)
    model = cfg.true_model()
    shots = []
    for t in cfg.schedule:
        for n in sample_outcomes(model, cfg.true_temperature, t, rng, per_time):
            shots.append((t, int(n)))
    calibration = _calibration_counts(cfg, run, cfg.calibration_shots)
    return MeasurementRecord(shots=tuple(shots), calibration=calibration)


def _calibration_counts(cfg: BenchmarkConfig, run: int, count: int) -> tuple[int, ...]:
    rng = stream_rng(cfg.seed, STREAM_CALIBRATION + run)
    return tuple(int(n) for n in rng.poisson(cfg.mean_loading, count))


def _estimated_loading(calibration: tuple[int, ...]) -> float:
    mean = sum(calibration) / len(calibration)
    return max(mean, MIN_FITTED_LOADING)


def variability_study(protocol: str, cfg: BenchmarkConfig, runs: int) -> StudyResult:
    """Repeat one protocol over seeded runs and report its relative spread.

    The loading is re-estimated from each run's own calibration shots, so
    optimised release times inherit that noise just as a live experiment
    would.  ``least_squares`` and ``bayes`` analyse identical records.
    """
    if runs < 2:
        raise ValueError("spread needs at least two runs")
    estimates = []
    for run in range(runs):
        estimates.append(_single_run_estimate(protocol, cfg, run))
    arr = np.array(estimates)
    return StudyResult(
        protocol=protocol,
        estimates=tuple(estimates),
        mean_estimate=float(arr.mean()),
        variability=_relative_variance(arr),
    )


def _single_run_estimate(protocol: str, cfg: BenchmarkConfig, run: int) -> float:
    true_model = cfg.true_model()
    if protocol == "least_squares":
        record = _schedule_record(cfg, run)
        guess = math.sqrt(cfg.prior.theta_min * cfg.prior.theta_max)
        try:
            fit = least_squares_fit(record, cfg.trap, initial_temperature=guess)
            return fit.temperature
        except ValueError:
            return guess
    if protocol == "bayes":
        record = _schedule_record(cfg, run)
        model = fitting_model(cfg.trap, _estimated_loading(record.calibration), cfg.atom_cap)
        return estimate(replay_record(record, cfg.prior, model).posterior)
    if protocol == "apriori":
        calibration = _calibration_counts(cfg, run, cfg.calibration_shots)
        model = fitting_model(cfg.trap, _estimated_loading(calibration), cfg.atom_cap)
        rng = stream_rng(cfg.seed, STREAM_APRIORI + run)
        session = apriori_protocol(
            cfg.prior,
            model,
            cfg.shots,
            lambda t: sample_outcome(true_model, cfg.true_temperature, t, rng),
            calibration=calibration,
        )
        return estimate(session.posterior)
    if protocol == "adaptive":
        calibration = _calibration_counts(cfg, run, cfg.calibration_shots)
        model = fitting_model(cfg.trap, _estimated_loading(calibration), cfg.atom_cap)
        rng = stream_rng(cfg.seed, STREAM_ADAPTIVE + run)
        session = adaptive_protocol(
            cfg.prior,
            model,
            cfg.shots,
            lambda t: sample_outcome(true_model, cfg.true_temperature, t, rng),
            calibration=calibration,
        )
        return estimate(session.posterior)
    raise ValueError(f"unknown protocol {protocol!r}")


def bootstrap_ordering_confidence(
    smaller: tuple[float, ...],
    larger: tuple[float, ...],
    draws: int = 10000,
    seed: int = 0,
) -> float:
    """Bootstrap probability that the first sample's variability is smaller.

    Resamples runs with replacement independently for both protocols and
    counts how often the relative variance of ``smaller`` stays below that
    of ``larger``.
    """
    rng = stream_rng(seed, STREAM_BOOTSTRAP)
    a = np.asarray(smaller)
    b = np.asarray(larger)
    wins = 0
    for _ in range(draws):
        ra = rng.choice(a, a.size, replace=True)
        rb = rng.choice(b, b.size, replace=True)
        if _relative_variance(ra) < _relative_variance(rb):
            wins += 1
    return wins / draws


def default_convergence_grid() -> tuple[int, ...]:
    """Shot counts for the convergence study, multiples of the schedule length."""
    factors = (1, 2, 3, 5, 7, 10, 15, 20, 25, 29, 33, 40, 50, 62, 75, 100, 125, 150)
    return tuple(7 * f for f in factors)


def fit_convergence_tail(
    shot_counts, variabilities, tolerance: float = 0.025, min_points: int = 3
) -> tuple[float, float, int]:
    """Power-law tail fit of a variability curve, walked back from large k.

    Fits log(variability) = -exponent * log(k) - log(prefactor) on suffixes
    of the curve, extending the suffix toward smaller k until the fitted
    exponent leaves the +-tolerance band around 1.  Returns (exponent,
    prefactor, onset): the fit over the widest compliant suffix and the
    smallest shot count inside it.  Falls back to the full-curve fit when
    even the smallest suffix is outside the band.
    """
    ks = np.asarray(shot_counts, dtype=float)
    vs = np.asarray(variabilities, dtype=float)
    if ks.size != vs.size or ks.size < min_points:
        raise ValueError(f"tail fit needs at least {min_points} points")
    if np.any(vs <= 0) or np.any(ks <= 0):
        raise ValueError("tail fit needs positive counts and variabilities")
    log_k = np.log(ks)
    log_v = np.log(vs)

    def suffix_fit(start: int) -> tuple[float, float]:
        design = np.column_stack([-log_k[start:], -np.ones(ks.size - start)])
        (exponent, log_pref), *_ = np.linalg.lstsq(design, log_v[start:], rcond=None)
        return float(exponent), float(math.exp(log_pref))

    best = None
    for start in range(ks.size - min_points, -1, -1):
        exponent, prefactor = suffix_fit(start)
        if abs(exponent - 1.0) > tolerance:
            break
        best = (exponent, prefactor, int(ks[start]))
    if best is None:
        exponent, prefactor = suffix_fit(ks.size - min_points)
        best = (exponent, prefactor, int(ks[ks.size - min_points]))
    return best


def pinned_tail_level(shot_counts, variabilities, onset_shots: int) -> float:
    """Level of shots * variability at and beyond the onset.

    Geometric mean over the tail, which is the least-squares level when the
    exponent is pinned to exactly 1.  A free exponent's small error tilts
    the fitted line and leaks into its prefactor, far more than the level
    actually moves, so cross-curve level ratios come from here.
    """
    ks = np.asarray(shot_counts, dtype=float)
    vs = np.asarray(variabilities, dtype=float)
    mask = ks >= onset_shots
    if not mask.any():
        raise ValueError("onset lies beyond the sampled shot counts")
    return float(np.exp(np.mean(np.log(ks[mask] * vs[mask]))))


@dataclass(frozen=True)
class ConvergenceCurve:
    """Variability against shot budget for one protocol, with its tail fit."""

    protocol: str
    shot_counts: tuple[int, ...]
    variabilities: tuple[float, ...]
    exponent: float
    prefactor: float
    onset_shots: int
    asymptote: float

    def variability_at(self, shots: float) -> float:
        """Pinned-exponent tail model evaluated at a shot count."""
        return self.asymptote / shots


@dataclass(frozen=True)
class ConvergenceReport:
    curves: tuple[ConvergenceCurve, ...]

    def curve(self, protocol: str) -> ConvergenceCurve:
        for c in self.curves:
            if c.protocol == protocol:
                return c
        raise KeyError(protocol)

    def variability_reduction(self) -> float:
        """Asymptotic variability saved by optimising the release time."""
        conventional = self.curve("conventional")
        optimised = self.curve("apriori")
        return 1.0 - optimised.asymptote / conventional.asymptote


def convergence_study(
    cfg: BenchmarkConfig,
    shot_grid: tuple[int, ...] | None = None,
    runs: int = 1000,
    protocols: tuple[str, ...] = ("conventional", "apriori"),
) -> ConvergenceReport:
    """Variability versus shot budget for schedule and optimised protocols.

    Each budget k is a separate virtual experiment per run: 2k/7
    calibration shots fix the loading estimate, then k measurements are
    taken, spread round-robin over the schedule (conventional, analysed by
    least squares) or all at the single optimised time (apriori, analysed
    by the posterior).  Outcome streams are shared across budgets within a
    run wherever the times coincide, which reuses draws without coupling
    distinct budgets' analyses.
    """
    grid = default_convergence_grid() if shot_grid is None else tuple(sorted(shot_grid))
    if any(k < len(cfg.schedule) for k in grid):
        raise ValueError("budgets below one shot per schedule time are not comparable")
    curves = []
    for protocol in protocols:
        if protocol == "conventional":
            per_run = _conventional_budget_estimates
        elif protocol == "apriori":
            per_run = _apriori_budget_estimates
        else:
            raise ValueError(f"unknown convergence protocol {protocol!r}")
        estimates = np.empty((runs, len(grid)))
        for run in range(runs):
            estimates[run] = per_run(cfg, run, grid)
        variabilities = tuple(
            _relative_variance(estimates[:, col]) for col in range(len(grid))
        )
        exponent, prefactor, onset = fit_convergence_tail(grid, variabilities)
        asymptote = pinned_tail_level(grid, variabilities, onset)
        curves.append(
            ConvergenceCurve(
                protocol, grid, variabilities, exponent, prefactor, onset, asymptote
            )
        )
    return ConvergenceReport(tuple(curves))


def _budget_calibration(cfg: BenchmarkConfig, run: int, max_shots: int) -> np.ndarray:
    """Cumulative calibration sums, one stream per run across all budgets."""
    cal_max = max(1, (2 * max_shots) // len(cfg.schedule))
    rng = stream_rng(cfg.seed, STREAM_CALIBRATION + run)
    return np.cumsum(rng.poisson(cfg.mean_loading, cal_max))


def _conventional_budget_estimates(
    cfg: BenchmarkConfig, run: int, grid: tuple[int, ...]
) -> np.ndarray:
    times = np.array(cfg.schedule)
    n_times = times.size
    k_max = grid[-1]
    model = cfg.true_model()
    rng = stream_rng(cfg.seed, STREAM_SCHEDULE + run)
    per_time_max = -(-k_max // n_times)
    outcome_cumsums = [
        np.cumsum(sample_outcomes(model, cfg.true_temperature, t, rng, per_time_max))
        for t in times
    ]
    cal_cum = _budget_calibration(cfg, run, k_max)
    guess = math.sqrt(cfg.prior.theta_min * cfg.prior.theta_max)
    estimates = np.empty(len(grid))
    for col, k in enumerate(grid):
        counts = np.array([(k - i - 1) // n_times + 1 for i in range(n_times)], dtype=float)
        sums = np.array([outcome_cumsums[i][int(c) - 1] for i, c in enumerate(counts)])
        cal_n = min(max((2 * k) // 7, 1), cal_cum.size)
        cal_mean = cal_cum[cal_n - 1] / cal_n
        fit_times = np.concatenate([[0.0], times])
        fit_means = np.concatenate([[cal_mean], sums / counts])
        fit_weights = np.concatenate([[float(cal_n)], counts])
        try:
            fit = fit_recapture_means(
                fit_times,
                fit_means,
                fit_weights,
                cfg.trap,
                initial_temperature=guess,
                initial_loading=max(cal_mean, MIN_FITTED_LOADING),
            )
            estimates[col] = fit.temperature
        except ValueError:
            estimates[col] = guess
    return estimates


# The optimised time depends on the loading estimate only through which
# 2 us grid point wins, so memoise sweeps on a rounded loading value.
_SWEEP_MEMO: dict[tuple, float] = {}


def _memo_optimal_time(prior: PosteriorGrid, cfg: BenchmarkConfig, loading: float) -> float:
    key = (cfg.trap.depth, cfg.trap.waist, cfg.prior.theta_min, cfg.prior.theta_max, round(loading, 3))
    cached = _SWEEP_MEMO.get(key)
    if cached is None:
        model = fitting_model(cfg.trap, round(loading, 3), cfg.atom_cap)
        cached = optimal_time(prior, model)
        _SWEEP_MEMO[key] = cached
    return cached


def _apriori_budget_estimates(
    cfg: BenchmarkConfig, run: int, grid: tuple[int, ...]
) -> np.ndarray:
    k_max = grid[-1]
    model = cfg.true_model()
    prior = make_prior(cfg.prior)
    log_prior = -np.log(prior.thetas)
    cal_cum = _budget_calibration(cfg, run, k_max)
    rng = stream_rng(cfg.seed, STREAM_APRIORI + run)
    outcome_cumsums: dict[float, np.ndarray] = {}
    curve_cache: dict[float, tuple[np.ndarray, np.ndarray]] = {}
    estimates = np.empty(len(grid))
    for col, k in enumerate(grid):
        cal_n = min(max((2 * k) // len(cfg.schedule), 1), cal_cum.size)
        loading = max(cal_cum[cal_n - 1] / cal_n, MIN_FITTED_LOADING)
        release = _memo_optimal_time(prior, cfg, loading)
        if release not in outcome_cumsums:
            outcome_cumsums[release] = np.cumsum(
                sample_outcomes(model, cfg.true_temperature, release, rng, k_max)
            )
            f = recapture_curve(cfg.trap, prior.thetas, release)
            with np.errstate(divide="ignore"):
                curve_cache[release] = (f, np.log(f))
        total_n = float(outcome_cumsums[release][k - 1])
        f, log_f = curve_cache[release]
        # Sum of independent Poisson log-pmfs at one time collapses to two
        # sufficient statistics; the factorial terms are theta-independent.
        logd = log_prior - k * loading * f
        if total_n:
            logd = logd + total_n * (math.log(loading) + log_f)
        posterior = PosteriorGrid.from_log_density(prior.thetas, logd, prior.unit_scale)
        estimates[col] = estimate(posterior)
    return estimates
