"""Bayesian estimation of the trap temperature as a global scale parameter.

Temperature only sets a scale, so the analysis lives on a logarithmic grid.
The prior is the scale-invariant Jeffreys density 1 / (theta * log(b/a)) on
a support [a, b], each shot multiplies in its likelihood and renormalises,
and the point estimate is the posterior geometric mean

    estimate = theta_u * exp( integral p(theta) log(theta/theta_u) dtheta ),

which minimises the mean logarithmic error.  That error doubles as the
uncertainty: the reported error bar is estimate * sqrt(mean_log_error).

Expected information gain of a candidate release time t is the predictive
average of the squared log shift the outcome would cause,

    gain(t) = sum_n p(n|t) log^2( estimate_after_n / estimate_now ),

and subtracting it from the current mean log error gives the expected error
after the shot, which is what the adaptive protocol greedily minimises.

Integrals use composite Simpson weights in log(theta).  Simpson is exact
for cubics, so the Jeffreys closed forms sqrt(ab) and log^2(b/a)/12 come
out at machine precision instead of carrying an O(h^2) trapezoid bias.
"""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from .physics import LikelihoodModel, TrapConfig, outcome_table

GRID_SPACING_RTOL = 1e-9

# Fraction of the trap depth bounding the default prior support.  The lower
# edge sits where the recapture curve stops resolving temperature at all,
# the upper edge at the point-source model's validity bound for a deep trap.
DEFAULT_THETA_MIN_FRACTION = 0.05
DEFAULT_THETA_MAX_FRACTION = 0.43


class DegeneratePosteriorError(RuntimeError):
    """Raised when an update leaves no probability mass on the grid."""


def _quadrature_weights(count: int, step: float) -> np.ndarray:
    """Composite Simpson weights on a uniform grid.

    Exact for cubic integrands.  An even point count leaves an odd number
    of panels, so the last three are closed with the 3/8 rule; two points
    fall back to the trapezoid.
    """
    if count < 2:
        raise ValueError("quadrature needs at least two points")
    if count == 2:
        return np.array([0.5, 0.5]) * step
    w = np.zeros(count)
    if count % 2 == 1:
        w[0] = w[-1] = 1.0
        w[1:-1:2] = 4.0
        w[2:-1:2] = 2.0
        w *= step / 3.0
        return w
    if count == 4:
        return np.array([1.0, 3.0, 3.0, 1.0]) * (3.0 * step / 8.0)
    head = _quadrature_weights(count - 3, step)
    w[: count - 3] = head
    w[count - 4 :] += np.array([1.0, 3.0, 3.0, 1.0]) * (3.0 * step / 8.0)
    return w


@dataclass(frozen=True)
class PriorSpec:
    """Support and resolution of the temperature grid.

    Bounds are in kelvin.  The default 1001 points keep the Simpson rule in
    pure composite form; doubling the count moves estimates by well under
    the quoted uncertainties.
    """

    theta_min: float
    theta_max: float
    grid_points: int = 1001
    unit_scale: float = 1e-6

    def __post_init__(self) -> None:
        if not (0 < self.theta_min < self.theta_max):
            raise ValueError("need 0 < theta_min < theta_max")
        if self.grid_points < 2:
            raise ValueError("grid needs at least two points")
        if not self.unit_scale > 0:
            raise ValueError("unit_scale must be positive")


def default_prior(trap: TrapConfig, grid_points: int = 1001) -> PriorSpec:
    """Prior support derived from the trap depth.

    Suits deep traps; shallow traps break the point-source model earlier
    than 43% of depth and should pass explicit bounds instead.
    """
    depth_k = trap.depth_kelvin()
    return PriorSpec(
        DEFAULT_THETA_MIN_FRACTION * depth_k,
        DEFAULT_THETA_MAX_FRACTION * depth_k,
        grid_points,
    )


@dataclass(frozen=True, eq=False)
class PosteriorGrid:
    """Normalised density over the log-spaced temperature grid.

    Treat instances as immutable values: updates return new grids and the
    arrays are marked read-only.  ``densities`` is per kelvin; the grid
    integral under the stored quadrature equals one to 1e-9.
    """

    thetas: np.ndarray
    densities: np.ndarray
    unit_scale: float = 1e-6
    _cache: dict = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self) -> None:
        thetas = np.array(self.thetas, dtype=float)
        dens = np.array(self.densities, dtype=float)
        if thetas.ndim != 1 or thetas.shape != dens.shape:
            raise ValueError("thetas and densities must be matching 1-d arrays")
        if thetas.size < 2 or np.any(thetas <= 0):
            raise ValueError("grid must hold at least two positive temperatures")
        log_thetas = np.log(thetas)
        steps = np.diff(log_thetas)
        step = (log_thetas[-1] - log_thetas[0]) / (thetas.size - 1)
        if step <= 0 or np.any(np.abs(steps - step) > GRID_SPACING_RTOL * step):
            raise ValueError("grid must be strictly increasing and log-spaced")
        if not np.all(np.isfinite(dens)) or np.any(dens < 0):
            raise ValueError("densities must be finite and nonnegative")
        weights = _quadrature_weights(thetas.size, step) * thetas
        total = weights @ dens
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"density integrates to {total!r}, not 1")
        for arr in (thetas, dens, log_thetas, weights):
            arr.setflags(write=False)
        object.__setattr__(self, "thetas", thetas)
        object.__setattr__(self, "densities", dens)
        object.__setattr__(self, "_log_thetas", log_thetas)
        object.__setattr__(self, "_mass_weights", weights)

    @classmethod
    def from_log_density(cls, thetas, log_density, unit_scale: float = 1e-6) -> "PosteriorGrid":
        """Build a normalised grid from unnormalised log densities.

        Entries of -inf mark zero likelihood; if nothing else survives the
        grid is degenerate.
        """
        logd = np.asarray(log_density, dtype=float)
        if np.any(np.isnan(logd)) or np.any(logd == np.inf):
            raise ValueError("log densities must be real or -inf")
        peak = np.max(logd)
        if peak == -np.inf:
            raise DegeneratePosteriorError("no posterior mass left on the grid")
        dens = np.exp(logd - peak)
        thetas = np.asarray(thetas, dtype=float)
        log_thetas = np.log(thetas)
        step = (log_thetas[-1] - log_thetas[0]) / (thetas.size - 1)
        weights = _quadrature_weights(thetas.size, step) * thetas
        total = weights @ dens
        if not total > 0 or not math.isfinite(total):
            raise DegeneratePosteriorError("posterior mass vanished in quadrature")
        return cls(thetas, dens / total, unit_scale)

    def signature(self) -> tuple:
        return (float(self.thetas[0]), float(self.thetas[-1]), int(self.thetas.size))


def make_prior(spec: PriorSpec) -> PosteriorGrid:
    """Jeffreys prior 1/(theta log(b/a)) on the spec's support."""
    thetas = np.exp(
        np.linspace(math.log(spec.theta_min), math.log(spec.theta_max), spec.grid_points)
    )
    return PosteriorGrid.from_log_density(thetas, -np.log(thetas), spec.unit_scale)


def bayes_update(
    posterior: PosteriorGrid, model: LikelihoodModel, release_time: float, outcome: int
) -> PosteriorGrid:
    """Condition the posterior on one shot: ``outcome`` atoms after ``release_time``.

    Multiplies in the likelihood in log space and renormalises.  Raises
    ``ValueError`` for outcomes outside the modelled range and
    ``DegeneratePosteriorError`` when the likelihood annihilates the grid
    (for instance a lost atom at zero release time).
    """
    if outcome != int(outcome) or not (0 <= int(outcome) < model.outcome_count):
        raise ValueError(
            f"outcome {outcome} outside modelled range 0..{model.outcome_count - 1}"
        )
    like = outcome_table(model, posterior.thetas, release_time)[int(outcome)]
    with np.errstate(divide="ignore"):
        logd = np.log(posterior.densities) + np.log(like)
    return PosteriorGrid.from_log_density(posterior.thetas, logd, posterior.unit_scale)


def estimate(posterior: PosteriorGrid) -> float:
    """Posterior geometric mean, the optimal estimator under log error."""
    cached = posterior._cache.get("estimate")
    if cached is None:
        shifted = posterior._log_thetas - math.log(posterior.unit_scale)
        moment = posterior._mass_weights @ (posterior.densities * shifted)
        cached = posterior.unit_scale * math.exp(moment)
        posterior._cache["estimate"] = cached
    return cached


def mean_log_error(posterior: PosteriorGrid, reference: float | None = None) -> float:
    """Expected squared log deviation of ``reference`` from the temperature.

    Defaults to the posterior's own estimate, where the value is the
    minimal achievable mean logarithmic error.
    """
    own = reference is None
    if own:
        cached = posterior._cache.get("mle")
        if cached is not None:
            return cached
        reference = estimate(posterior)
    if not reference > 0:
        raise ValueError("reference temperature must be positive")
    dev = math.log(reference) - posterior._log_thetas
    value = float(posterior._mass_weights @ (posterior.densities * dev**2))
    if own:
        posterior._cache["mle"] = value
    return value


def error_bar(posterior: PosteriorGrid) -> tuple[float, float]:
    """Estimate and its one-sigma-equivalent scale uncertainty."""
    est = estimate(posterior)
    return est, est * math.sqrt(mean_log_error(posterior))


@dataclass(frozen=True, eq=False)
class InfoGainCurve:
    """Expected information gain over a grid of candidate release times."""

    times: np.ndarray
    gains: np.ndarray

    def __post_init__(self) -> None:
        times = np.array(self.times, dtype=float)
        gains = np.array(self.gains, dtype=float)
        if times.shape != gains.shape or times.ndim != 1 or times.size == 0:
            raise ValueError("times and gains must be matching nonempty 1-d arrays")
        times.setflags(write=False)
        gains.setflags(write=False)
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "gains", gains)

    @property
    def best_time(self) -> float:
        """Gain-maximising time; exact ties resolve to the earliest."""
        return float(self.times[int(np.argmax(self.gains))])


def default_time_grid() -> np.ndarray:
    """Release times searched by default: 2 us to 200 us in 2 us steps."""
    return np.arange(1, 101) * 2e-6


# Likelihood tables are dense (times x outcomes x grid) and reused heavily
# inside adaptive sweeps, so keep the few most recent.
_TABLE_CACHE: OrderedDict[tuple, np.ndarray] = OrderedDict()
_TABLE_CACHE_SIZE = 4


def _likelihood_table(
    model: LikelihoodModel, posterior: PosteriorGrid, times: np.ndarray
) -> np.ndarray:
    key = (model.signature(), posterior.signature(), times.tobytes())
    table = _TABLE_CACHE.get(key)
    if table is None:
        table = np.stack([outcome_table(model, posterior.thetas, t) for t in times])
        table.setflags(write=False)
        _TABLE_CACHE[key] = table
        while len(_TABLE_CACHE) > _TABLE_CACHE_SIZE:
            _TABLE_CACHE.popitem(last=False)
    else:
        _TABLE_CACHE.move_to_end(key)
    return table


def info_gain_curve(
    posterior: PosteriorGrid, model: LikelihoodModel, times
) -> InfoGainCurve:
    """Expected information gain of one further shot at each candidate time.

    For every time the predictive outcome distribution is marginalised over
    the posterior, each outcome's hypothetical update is collapsed to its
    estimate, and the gains are the predictive-weighted squared log shifts.
    Always nonnegative, and exactly zero at zero release time where the
    outcome carries no temperature information.
    """
    times = np.asarray(times, dtype=float)
    if times.ndim != 1 or times.size == 0:
        raise ValueError("need a nonempty 1-d array of candidate times")
    if np.any(times < 0) or np.any(np.diff(times) <= 0):
        raise ValueError("candidate times must be nonnegative and strictly increasing")
    table = _likelihood_table(model, posterior, times)
    mass = posterior._mass_weights * posterior.densities
    predictive = table @ mass
    log_moment = table @ (mass * posterior._log_thetas)
    log_now = math.log(estimate(posterior))
    with np.errstate(invalid="ignore", divide="ignore"):
        shift = np.where(predictive > 0, log_moment / predictive - log_now, 0.0)
    gains = np.einsum("tk,tk->t", predictive, shift**2)
    return InfoGainCurve(times, gains)


def info_gain(posterior: PosteriorGrid, model: LikelihoodModel, release_time: float) -> float:
    """Pointwise expected information gain at one release time."""
    return float(info_gain_curve(posterior, model, np.array([release_time])).gains[0])


def optimal_time(
    posterior: PosteriorGrid, model: LikelihoodModel, times=None
) -> float:
    """Release time with the largest expected information gain.

    Searches ``times`` (defaulting to the 2..200 us grid) pointwise; ties
    break toward the smaller time.
    """
    if times is None:
        times = default_time_grid()
    return info_gain_curve(posterior, model, times).best_time
