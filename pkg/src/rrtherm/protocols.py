"""Measurement protocols built on the posterior machinery.

A protocol decides when to release and what to do with each outcome.  The
baselines replay a fixed schedule, either through the Bayesian update or
through a weighted least-squares fit of the recapture curve; the optimised
variants pick release times by expected information gain, once up front or
adaptively after every shot.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping

import numpy as np

from .inference import (
    DEFAULT_THETA_MAX_FRACTION,
    DEFAULT_THETA_MIN_FRACTION,
    PosteriorGrid,
    PriorSpec,
    _quadrature_weights,
    bayes_update,
    default_time_grid,
    error_bar,
    make_prior,
    optimal_time,
)
from .physics import LikelihoodModel, TrapConfig, recapture_curve, recapture_fraction


@dataclass(frozen=True)
class MeasurementRecord:
    """Raw outcomes of one experimental run.

    ``shots`` holds (release_time_s, recaptured_atoms) pairs in acquisition
    order; ``calibration`` holds atom counts from zero-release reference
    shots, which carry loading information but none about temperature.
    """

    shots: tuple[tuple[float, int], ...] = ()
    calibration: tuple[int, ...] = ()
    metadata: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        shots = tuple((float(t), int(n)) for t, n in self.shots)
        for t, n in shots:
            if t < 0:
                raise ValueError("release times must be nonnegative")
            if n < 0:
                raise ValueError("atom counts must be nonnegative")
        calib = tuple(int(n) for n in self.calibration)
        if any(n < 0 for n in calib):
            raise ValueError("calibration counts must be nonnegative")
        object.__setattr__(self, "shots", shots)
        object.__setattr__(self, "calibration", calib)
        object.__setattr__(self, "metadata", dict(self.metadata))

    def with_shot(self, release_time: float, outcome: int) -> "MeasurementRecord":
        return replace(self, shots=self.shots + ((release_time, outcome),))

    def mean_calibration(self) -> float:
        """Empirical mean loading; requires at least one calibration shot."""
        if not self.calibration:
            raise ValueError("record has no calibration shots")
        return sum(self.calibration) / len(self.calibration)


@dataclass(frozen=True)
class TracePoint:
    """Estimator state right after one shot was absorbed."""

    release_time: float
    outcome: int
    estimate: float
    error: float


@dataclass(frozen=True, eq=False)
class AdaptiveSession:
    """One sequential estimation run: prior, model, data so far, posterior.

    Immutable; ``adaptive_step`` returns the successor state.  The posterior
    always equals a fresh replay of ``record`` onto the prior, bit for bit,
    which is what makes undo and audit trivially safe.
    """

    prior_spec: PriorSpec
    model: LikelihoodModel
    record: MeasurementRecord
    posterior: PosteriorGrid
    next_time: float
    trace: tuple[TracePoint, ...] = ()
    search_times: np.ndarray = field(default_factory=default_time_grid)

    @classmethod
    def start(
        cls,
        prior_spec: PriorSpec,
        model: LikelihoodModel,
        calibration: tuple[int, ...] = (),
        metadata: Mapping[str, str] | None = None,
        search_times=None,
    ) -> "AdaptiveSession":
        times = default_time_grid() if search_times is None else np.asarray(search_times, float)
        prior = make_prior(prior_spec)
        return cls(
            prior_spec=prior_spec,
            model=model,
            record=MeasurementRecord(calibration=calibration, metadata=metadata or {}),
            posterior=prior,
            next_time=optimal_time(prior, model, times),
            search_times=times,
        )


def adaptive_step(session: AdaptiveSession, outcome: int) -> AdaptiveSession:
    """Absorb one outcome taken at the session's recommended time.

    Returns the next session state with the shot recorded, the posterior
    updated and a fresh recommendation.  An outcome outside the modelled
    range raises and leaves the caller's session untouched.
    """
    t = session.next_time
    posterior = bayes_update(session.posterior, session.model, t, outcome)
    est, err = error_bar(posterior)
    return replace(
        session,
        record=session.record.with_shot(t, outcome),
        posterior=posterior,
        next_time=optimal_time(posterior, session.model, session.search_times),
        trace=session.trace + (TracePoint(t, int(outcome), est, err),),
    )


def undo_last_shot(session: AdaptiveSession) -> AdaptiveSession:
    """Rebuild the session as if the most recent shot never happened.

    Replays the shortened record from the prior, so the result is exactly
    the state the session had before that shot.
    """
    if not session.record.shots:
        raise ValueError("no shots to undo")
    shots = session.record.shots[:-1]
    posterior = make_prior(session.prior_spec)
    trace = []
    for t, n in shots:
        posterior = bayes_update(posterior, session.model, t, n)
        est, err = error_bar(posterior)
        trace.append(TracePoint(t, n, est, err))
    return replace(
        session,
        record=replace(session.record, shots=shots),
        posterior=posterior,
        next_time=optimal_time(posterior, session.model, session.search_times),
        trace=tuple(trace),
    )


class OutcomeSourceError(RuntimeError):
    """An outcome source failed mid-protocol; carries the partial session."""

    def __init__(self, session: AdaptiveSession, cause: BaseException):
        super().__init__(f"outcome source failed after {len(session.record.shots)} shots: {cause}")
        self.session = session


OutcomeSource = Callable[[float], int]


def apriori_protocol(
    prior_spec: PriorSpec,
    model: LikelihoodModel,
    shots: int,
    outcome_source: OutcomeSource,
    calibration: tuple[int, ...] = (),
    search_times=None,
) -> AdaptiveSession:
    """Optimise the release time once from the prior, then measure.

    Every shot is requested at that single time; the posterior still updates
    sequentially so the trace shows the estimate converging.
    """
    session = AdaptiveSession.start(prior_spec, model, calibration, search_times=search_times)
    fixed_time = session.next_time
    for _ in range(shots):
        try:
            outcome = outcome_source(fixed_time)
        except Exception as exc:
            raise OutcomeSourceError(session, exc) from exc
        posterior = bayes_update(session.posterior, model, fixed_time, outcome)
        est, err = error_bar(posterior)
        session = replace(
            session,
            record=session.record.with_shot(fixed_time, outcome),
            posterior=posterior,
            next_time=fixed_time,
            trace=session.trace + (TracePoint(fixed_time, int(outcome), est, err),),
        )
    return session


def adaptive_protocol(
    prior_spec: PriorSpec,
    model: LikelihoodModel,
    shots: int,
    outcome_source: OutcomeSource,
    calibration: tuple[int, ...] = (),
    search_times=None,
) -> AdaptiveSession:
    """Re-optimise the release time after every shot."""
    session = AdaptiveSession.start(prior_spec, model, calibration, search_times=search_times)
    for _ in range(shots):
        try:
            outcome = outcome_source(session.next_time)
        except Exception as exc:
            raise OutcomeSourceError(session, exc) from exc
        session = adaptive_step(session, outcome)
    return session


def replay_record(
    record: MeasurementRecord, prior_spec: PriorSpec, model: LikelihoodModel
) -> AdaptiveSession:
    """Run the Bayesian update over a recorded schedule in stored order.

    This is the unoptimised protocol when the record came from a fixed
    measurement schedule, and the audit path for anything else.
    """
    posterior = make_prior(prior_spec)
    trace = []
    for t, n in record.shots:
        posterior = bayes_update(posterior, model, t, n)
        est, err = error_bar(posterior)
        trace.append(TracePoint(t, n, est, err))
    return AdaptiveSession(
        prior_spec=prior_spec,
        model=model,
        record=record,
        posterior=posterior,
        next_time=optimal_time(posterior, model),
        trace=tuple(trace),
    )


@dataclass(frozen=True)
class ReplayResult:
    """Outcome-order experiment: one record replayed in a chosen order."""

    order: str
    reference_time: float
    record: MeasurementRecord
    trace: tuple[TracePoint, ...]
    posterior: PosteriorGrid


def replay_reordered(
    record: MeasurementRecord,
    prior_spec: PriorSpec,
    model: LikelihoodModel,
    order: str,
    search_times=None,
) -> ReplayResult:
    """Replay a record with its time groups sorted by informativeness.

    Shots are grouped by identical release time (in-group order kept), the
    groups are ranked by distance to the prior's optimal time, and the
    record is replayed nearest-first or farthest-first.  Ties in distance
    resolve toward the smaller time.
    """
    if order not in ("nearest", "farthest"):
        raise ValueError("order must be 'nearest' or 'farthest'")
    times = default_time_grid() if search_times is None else np.asarray(search_times, float)
    reference = optimal_time(make_prior(prior_spec), model, times)
    groups: dict[float, list[tuple[float, int]]] = {}
    for t, n in record.shots:
        groups.setdefault(t, []).append((t, n))
    sign = 1.0 if order == "nearest" else -1.0
    ranked = sorted(groups, key=lambda t: (sign * abs(t - reference), t))
    reordered = replace(
        record, shots=tuple(shot for t in ranked for shot in groups[t])
    )
    session = replay_record(reordered, prior_spec, model)
    return ReplayResult(order, reference, reordered, session.trace, session.posterior)


@dataclass(frozen=True)
class FitResult:
    """Weighted least-squares fit of the mean recapture curve."""

    temperature: float
    mean_loading: float
    temperature_sigma: float
    loading_sigma: float
    converged: bool
    iterations: int
    residual_norm: float


def _aggregate_record(record: MeasurementRecord):
    """Per-time outcome means and shot counts, calibration folded in at t=0."""
    sums: dict[float, list[float]] = {}
    for t, n in record.shots:
        acc = sums.setdefault(t, [0.0, 0])
        acc[0] += n
        acc[1] += 1
    if record.calibration:
        acc = sums.setdefault(0.0, [0.0, 0])
        acc[0] += sum(record.calibration)
        acc[1] += len(record.calibration)
    times = np.array(sorted(sums))
    means = np.array([sums[t][0] / sums[t][1] for t in times])
    counts = np.array([float(sums[t][1]) for t in times])
    return times, means, counts


def least_squares_fit(
    record: MeasurementRecord,
    trap: TrapConfig,
    fix_loading: float | None = None,
    initial_temperature: float | None = None,
    max_iterations: int = 200,
    step_tolerance: float = 1e-8,
) -> FitResult:
    """Fit temperature (and mean loading) to a record's per-time mean counts.

    Aggregates the record (calibration becomes the zero-time point) and
    delegates to ``fit_recapture_means`` with shot counts as weights.  Pass
    ``fix_loading=1`` for deterministically loaded single-atom data.
    """
    times, means, counts = _aggregate_record(record)
    initial_loading = None
    if fix_loading is None and record.calibration:
        initial_loading = record.mean_calibration()
    return fit_recapture_means(
        times,
        means,
        counts,
        trap,
        fix_loading=fix_loading,
        initial_temperature=initial_temperature,
        initial_loading=initial_loading,
        max_iterations=max_iterations,
        step_tolerance=step_tolerance,
    )


def fit_recapture_means(
    times,
    means,
    weights,
    trap: TrapConfig,
    fix_loading: float | None = None,
    initial_temperature: float | None = None,
    initial_loading: float | None = None,
    max_iterations: int = 200,
    step_tolerance: float = 1e-8,
) -> FitResult:
    """Weighted fit of mean_loading * f(T, t) to mean atom counts.

    Damped Gauss-Newton on log parameters, so both stay positive without
    constraints.  Steps are halved until the weighted residual norm stops
    growing; convergence is a relative step below ``step_tolerance``.
    Parameter sigmas come from the local quadratic expansion of the
    residual norm around the optimum.
    """
    times = np.asarray(times, float)
    means = np.asarray(means, float)
    counts = np.asarray(weights, float)
    free_loading = fix_loading is None
    n_params = 2 if free_loading else 1
    if times.size < n_params:
        raise ValueError(
            "fit needs at least as many distinct release times as free parameters"
        )
    if free_loading and np.all(means <= 0):
        raise ValueError("all outcome means are zero; loading cannot be fitted")

    if initial_temperature is None:
        bounds = default_prior_bounds(trap)
        initial_temperature = math.sqrt(bounds[0] * bounds[1])
    if free_loading:
        loading0 = initial_loading if initial_loading else max(means.max(), 0.1)
    else:
        loading0 = fix_loading
    if not loading0 > 0:
        raise ValueError("initial loading must be positive")

    sqrt_w = np.sqrt(counts)

    def residuals(params: np.ndarray) -> np.ndarray:
        temp = math.exp(params[0])
        load = math.exp(params[1]) if free_loading else fix_loading
        curve = np.array([load * recapture_fraction(trap, temp, t) for t in times])
        return sqrt_w * (means - curve)

    start = np.array(
        [math.log(initial_temperature)] + ([math.log(loading0)] if free_loading else [])
    )
    params, cov, converged, iterations, cost = _damped_gauss_newton(
        residuals, start, max_iterations, step_tolerance
    )

    temp = math.exp(params[0])
    load = math.exp(params[1]) if free_loading else fix_loading
    temp_sigma = temp * math.sqrt(max(cov[0, 0], 0.0))
    load_sigma = load * math.sqrt(max(cov[1, 1], 0.0)) if free_loading else 0.0
    return FitResult(
        temperature=temp,
        mean_loading=load,
        temperature_sigma=temp_sigma,
        loading_sigma=load_sigma,
        converged=converged,
        iterations=iterations,
        residual_norm=math.sqrt(cost),
    )


def _normal_step(gram: np.ndarray, rhs: np.ndarray) -> np.ndarray | None:
    """Descent step from the normal equations, None when they degenerate."""
    try:
        step = -np.linalg.solve(gram, rhs)
    except np.linalg.LinAlgError:
        return None
    return step if np.all(np.isfinite(step)) else None


def _numeric_jacobian(func, params: np.ndarray, step: float = 1e-6) -> np.ndarray:
    """Central-difference Jacobian of a residual vector."""
    cols = []
    for i in range(params.size):
        bump = np.zeros_like(params)
        bump[i] = step
        cols.append((func(params + bump) - func(params - bump)) / (2 * step))
    return np.column_stack(cols)


def _damped_gauss_newton(
    residuals: Callable[[np.ndarray], np.ndarray],
    start: np.ndarray,
    max_iterations: int = 200,
    step_tolerance: float = 1e-8,
    max_step: float = 10.0,
    cost_tolerance: float = 1e-8,
) -> tuple[np.ndarray, np.ndarray, bool, int, float]:
    """Minimise a residual norm by Gauss-Newton with step halving.

    Returns (params, covariance, converged, iterations, cost).  Steps longer
    than ``max_step`` in any coordinate are rescaled first; halving then
    continues until the cost stops growing.  Convergence means the accepted
    step fell below ``step_tolerance`` or improved the cost by less than
    ``cost_tolerance`` relative: badly constrained directions otherwise
    drift forever at sizable step length and vanishing gain.  The
    covariance is the residual variance times the inverse Gram matrix at
    the final point, NaN when that matrix is singular there.
    """
    params = np.asarray(start, float)
    resid = residuals(params)
    cost = float(resid @ resid)
    converged = False
    iterations = 0
    for iterations in range(1, max_iterations + 1):
        jac = _numeric_jacobian(residuals, params)
        gram = jac.T @ jac
        step = _normal_step(gram, jac.T @ resid)
        if step is None:
            # Rank-deficient curvature: a small ridge keeps the informative
            # directions moving and leaves unconstrained ones in place.
            ridge = np.trace(gram) / gram.shape[0]
            if ridge > 0:
                step = _normal_step(
                    gram + 1e-6 * ridge * np.eye(gram.shape[0]), jac.T @ resid
                )
            if step is None:
                raise ValueError(
                    "normal equations are singular; data cannot fix the parameters"
                )
        longest = np.max(np.abs(step))
        if longest > max_step:
            step *= max_step / longest
        scale = 1.0
        improved = False
        for _ in range(25):
            trial = params + scale * step
            trial_resid = residuals(trial)
            trial_cost = float(trial_resid @ trial_resid)
            # Strictly smaller, or an exact fit: equal cost is a plateau and
            # accepting it lets unconstrained directions drift forever.
            if trial_cost < cost:
                improved = True
                break
            scale /= 2.0
        if not improved:
            break
        previous, params, resid, cost = cost, trial, trial_resid, trial_cost
        if (
            cost == 0.0
            or np.max(np.abs(scale * step)) < step_tolerance
            or previous - cost <= cost_tolerance * previous
        ):
            converged = True
            break
    dof = resid.size - params.size
    variance = cost / dof if dof > 0 else 0.0
    jac = _numeric_jacobian(residuals, params)
    try:
        cov = variance * np.linalg.inv(jac.T @ jac)
    except np.linalg.LinAlgError:
        cov = np.full((params.size, params.size), np.nan)
    return params, cov, converged, iterations, cost


def default_prior_bounds(trap: TrapConfig) -> tuple[float, float]:
    """Default temperature support for a trap, in kelvin."""
    depth_k = trap.depth_kelvin()
    return DEFAULT_THETA_MIN_FRACTION * depth_k, DEFAULT_THETA_MAX_FRACTION * depth_k


@dataclass(frozen=True, eq=False)
class JointPosterior:
    """Posterior over (temperature, mean loading) on a log-log grid."""

    thetas: np.ndarray
    loadings: np.ndarray
    densities: np.ndarray  # shape (loadings, thetas), per kelvin per unit loading

    def __post_init__(self) -> None:
        thetas = np.asarray(self.thetas, float)
        loadings = np.asarray(self.loadings, float)
        dens = np.asarray(self.densities, float)
        if dens.shape != (loadings.size, thetas.size):
            raise ValueError("density shape must be (loadings, thetas)")
        object.__setattr__(self, "thetas", thetas)
        object.__setattr__(self, "loadings", loadings)
        object.__setattr__(self, "densities", dens)
        object.__setattr__(self, "_theta_weights", _log_axis_weights(thetas))
        object.__setattr__(self, "_loading_weights", _log_axis_weights(loadings))

    def theta_marginal(self) -> PosteriorGrid:
        marginal = self._loading_weights @ self.densities
        total = self._theta_weights @ marginal
        return PosteriorGrid(self.thetas, marginal / total)

    def loading_marginal(self) -> tuple[np.ndarray, np.ndarray]:
        marginal = self.densities @ self._theta_weights
        total = self._loading_weights @ marginal
        return self.loadings, marginal / total


def _log_axis_weights(values: np.ndarray) -> np.ndarray:
    """Quadrature weights for an integral over a log-spaced axis.

    A single-point axis acts as a point mass with unit weight, which is how
    a parameter gets pinned to a known value.
    """
    if values.size == 1:
        return np.array([1.0])
    step = (math.log(values[-1]) - math.log(values[0])) / (values.size - 1)
    return _quadrature_weights(values.size, step) * values


def two_parameter_posterior(
    record: MeasurementRecord,
    prior_spec: PriorSpec,
    trap: TrapConfig,
    loading_range: tuple[float, float],
    loading_points: int = 201,
) -> JointPosterior:
    """Joint posterior when the mean loading is estimated, not calibrated away.

    Independent scale-invariant priors on both axes; every shot contributes
    a Poisson factor at mean loading * f(theta, t), and calibration shots
    enter as release-time-zero factors that inform only the loading.
    """
    lo, hi = loading_range
    if not (0 < lo <= hi):
        raise ValueError("loading range must be positive with lo <= hi")
    if lo == hi:
        loadings = np.array([lo])
    else:
        loadings = np.exp(np.linspace(math.log(lo), math.log(hi), loading_points))
    thetas = make_prior(prior_spec).thetas

    log_density = np.zeros((loadings.size, thetas.size))
    log_density -= np.log(thetas)[None, :]
    log_density -= np.log(loadings)[:, None]

    grouped: dict[float, list[int]] = {}
    for t, n in record.shots:
        grouped.setdefault(t, []).append(n)
    if record.calibration:
        grouped.setdefault(0.0, []).extend(record.calibration)

    log_loadings = np.log(loadings)
    for t, outcomes in grouped.items():
        f = recapture_curve(trap, thetas, t)
        total_n = float(sum(outcomes))
        count = len(outcomes)
        lgamma_sum = sum(math.lgamma(n + 1) for n in outcomes)
        with np.errstate(divide="ignore"):
            log_f = np.log(f)
        # sum of Poisson log-pmfs at mean lambda*f over this time group
        log_density += total_n * (log_loadings[:, None] + log_f[None, :])
        log_density -= count * loadings[:, None] * f[None, :]
        log_density -= lgamma_sum

    log_density -= np.max(log_density)
    density = np.exp(log_density)
    tw = _log_axis_weights(thetas)
    lw = _log_axis_weights(loadings)
    total = lw @ density @ tw
    if not total > 0 or not math.isfinite(total):
        raise ValueError("joint posterior mass vanished")
    return JointPosterior(thetas, loadings, density / total)
