"""Recapture physics for a single optical tweezer.

The model: atoms thermalised at temperature T sit at the focus of a
Gaussian-beam trap of depth U0 and waist w0.  The trap is switched off for a
release time t, the cloud expands ballistically, and the trap is switched
back on.  An atom is recaptured when its total energy in the restored
potential is negative.  Treating the initial cloud as a point source with a
two-dimensional Maxwell-Boltzmann velocity distribution gives a closed-form
recapture probability

    f(T, t) = g(eta * W(s) / s) / g(eta),   g(x) = 1 - exp(-x),

with eta = U0 / (kB T), s = 4 U0 t^2 / (m w0^2) and W the principal branch
of the Lambert function.  All quantities here are SI; callers convert to
microkelvin and microseconds at the presentation boundary.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .constants import DEFAULT_WAVELENGTH, K_B, MASS_K41

# Residual tolerance for the Lambert solver: |w e^w - x| <= LAMBERT_TOL * max(1, x)
LAMBERT_TOL = 1e-12

# Largest Poisson loading probability allowed to fall beyond the outcome cap.
# Caps the truncation bias of the multi-atom likelihood; a cap of 7 keeps the
# tail near 3e-4 for mean loading 1.65 and just over 1e-3 at 2.0.
MAX_TRUNCATION_TAIL = 2e-3


@dataclass(frozen=True)
class TrapConfig:
    """Gaussian-beam tweezer parameters, all SI.

    Parameters
    ----------
    depth : float
        Trap depth U0 in joules (use ``K_B * depth_in_kelvin`` to convert).
    waist : float
        Beam waist w0 in metres.
    mass : float
        Atomic mass in kilograms.
    wavelength : float
        Trapping-laser wavelength in metres, used only for the Rayleigh
        range of the axial potential.
    """

    depth: float
    waist: float
    mass: float = MASS_K41
    wavelength: float = DEFAULT_WAVELENGTH

    def __post_init__(self) -> None:
        for name in ("depth", "waist", "mass", "wavelength"):
            if not (getattr(self, name) > 0):
                raise ValueError(f"TrapConfig.{name} must be positive")

    @property
    def rayleigh_range(self) -> float:
        """Axial length scale z_R = pi w0^2 / wavelength in metres."""
        return math.pi * self.waist**2 / self.wavelength

    def depth_kelvin(self) -> float:
        return self.depth / K_B


def lambert_w0(x):
    """Principal branch of the Lambert W function for x >= 0.

    Solves w e^w = x by Halley iteration seeded with log(1 + x), which is
    within a factor of order one of the root everywhere on the nonnegative
    axis and converges in a handful of steps.  Accepts scalars or arrays;
    the residual satisfies |w e^w - x| <= 1e-12 * max(1, x).
    """
    arr = np.asarray(x, dtype=float)
    if np.any(arr < 0) or not np.all(np.isfinite(arr)):
        raise ValueError("lambert_w0 requires finite x >= 0")
    scalar = arr.ndim == 0
    arr = np.atleast_1d(arr)

    w = np.log1p(arr)
    # asymptotic seed keeps e^w finite for arguments far beyond the fit range
    big = arr > 1e6
    if np.any(big):
        lx = np.log(arr[big])
        w[big] = lx - np.log(lx)

    tol = LAMBERT_TOL * np.maximum(1.0, arr)
    for _ in range(32):
        ew = np.exp(w)
        resid = w * ew - arr
        if np.all(np.abs(resid) <= tol):
            break
        wp1 = w + 1.0
        w = w - resid / (ew * wp1 - (w + 2.0) * resid / (2.0 * wp1))
    return float(w[0]) if scalar else w


def _depth_ratio(trap: TrapConfig, release_time: float) -> float:
    """Dimensionless expansion parameter s = 4 U0 t^2 / (m w0^2)."""
    return 4.0 * trap.depth * release_time**2 / (trap.mass * trap.waist**2)


def _saturation(x):
    """g(x) = 1 - exp(-x), stable for small arguments."""
    return -np.expm1(-x)

def recapture_curve(trap: TrapConfig, temperatures, release_time: float) -> np.ndarray:
    """Recapture probability at one release time over an array of temperatures.

    Vectorised core shared by the likelihood evaluation on posterior grids.
    Temperatures in kelvin, release time in seconds.
    """
    temps = np.asarray(temperatures, dtype=float)
    if np.any(temps <= 0):
        raise ValueError("temperatures must be positive")
    if release_time < 0:
        raise ValueError("release time must be nonnegative")
    eta = trap.depth / (K_B * temps)
    if release_time == 0.0:
        return np.ones_like(temps)
    s = _depth_ratio(trap, release_time)
    shrink = lambert_w0(s) / s
    return _saturation(eta * shrink) / _saturation(eta)


def recapture_fraction(trap: TrapConfig, temperature: float, release_time: float) -> float:
    """Probability that one atom at ``temperature`` survives ``release_time``.

    Exactly 1 at zero release time; decreases monotonically in both the
    release time and the temperature.
    """
    return float(recapture_curve(trap, np.atleast_1d(temperature), release_time)[0])


def single_atom_likelihood(
    trap: TrapConfig, outcome: int, temperature: float, release_time: float
) -> float:
    """P(outcome | T, t) for one deterministically loaded atom.

    ``outcome`` is 1 when the atom is recaptured, 0 when it is lost.
    """
    if outcome not in (0, 1):
        raise ValueError("single-atom outcome must be 0 or 1")
    f = recapture_fraction(trap, temperature, release_time)
    return f if outcome == 1 else 1.0 - f


def _poisson_pmf(count: int, mean) -> np.ndarray:
    """Poisson probability mass, vectorised over the mean."""
    mean = np.asarray(mean, dtype=float)
    out = np.zeros_like(mean)
    if count == 0:
        return np.exp(-mean)
    pos = mean > 0
    lg = math.lgamma(count + 1)
    with np.errstate(divide="ignore"):
        out[pos] = np.exp(count * np.log(mean[pos]) - mean[pos] - lg)
    return out


def multi_atom_likelihood(
    trap: TrapConfig,
    outcome: int,
    temperature: float,
    release_time: float,
    mean_loading: float,
) -> float:
    """P(outcome | T, t) when the initial atom number is Poisson distributed.

    Thinning a Poisson(lambda) load by the per-atom survival f leaves the
    recaptured number Poisson with mean lambda * f, so the marginal
    likelihood needs no sum over the unobserved initial number.
    """
    if outcome < 0 or outcome != int(outcome):
        raise ValueError("recaptured atom count must be a nonnegative integer")
    if not mean_loading > 0:
        raise ValueError("mean loading must be positive")
    f = recapture_fraction(trap, temperature, release_time)
    return float(_poisson_pmf(int(outcome), np.atleast_1d(mean_loading * f))[0])


def loading_tail(mean_loading: float, atom_cap: int) -> float:
    """Poisson probability of loading more than ``atom_cap`` atoms."""
    term = math.exp(-mean_loading)
    total = term
    for k in range(1, atom_cap + 1):
        term *= mean_loading / k
        total += term
    return max(0.0, 1.0 - total)


@dataclass(frozen=True)
class LikelihoodModel:
    """Measurement model tying a trap to an outcome distribution.

    Two variants share one type.  With ``mean_loading`` unset the trap holds
    exactly one atom and outcomes are binary.  With it set, loading is
    Poisson and outcomes are recaptured-atom counts truncated at
    ``atom_cap``; the truncated tail is capped so the neglected loading
    probability stays below ``MAX_TRUNCATION_TAIL``.
    """

    trap: TrapConfig
    mean_loading: float | None = None
    atom_cap: int | None = None

    def __post_init__(self) -> None:
        if self.mean_loading is None:
            if self.atom_cap is not None:
                raise ValueError("atom_cap applies only to Poisson loading")
            return
        if not self.mean_loading > 0:
            raise ValueError("mean loading must be positive")
        cap = 7 if self.atom_cap is None else self.atom_cap
        if cap < 1:
            raise ValueError("atom_cap must be at least 1")
        tail = loading_tail(self.mean_loading, cap)
        if tail >= MAX_TRUNCATION_TAIL:
            raise ValueError(
                f"outcome cap {cap} leaves loading tail {tail:.2e}; "
                f"raise atom_cap or lower the mean loading"
            )
        object.__setattr__(self, "atom_cap", cap)

    @property
    def multi_atom(self) -> bool:
        return self.mean_loading is not None

    @property
    def outcome_count(self) -> int:
        """Number of modelled outcomes, indexed 0..outcome_count-1."""
        return (self.atom_cap + 1) if self.multi_atom else 2

    def signature(self) -> tuple:
        """Hashable identity used as a cache key by the inference layer."""
        t = self.trap
        return (t.depth, t.waist, t.mass, t.wavelength, self.mean_loading, self.atom_cap)


def outcome_table(model: LikelihoodModel, temperatures, release_time: float) -> np.ndarray:
    """Likelihood of every modelled outcome over a temperature array.

    Returns shape (outcome_count, len(temperatures)).  Rows of the
    multi-atom table are a truncated Poisson and deliberately sum to
    slightly less than one; the missing mass is the neglected loading tail.
    """
    temps = np.asarray(temperatures, dtype=float)
    f = recapture_curve(model.trap, temps, release_time)
    if not model.multi_atom:
        return np.stack([1.0 - f, f])
    mean = model.mean_loading * f
    rows = [_poisson_pmf(n, mean) for n in range(model.atom_cap + 1)]
    return np.stack(rows)


def outcome_distribution(model: LikelihoodModel, temperature: float, release_time: float) -> np.ndarray:
    """Outcome probabilities at a single temperature, as a vector over n."""
    return outcome_table(model, np.atleast_1d(temperature), release_time)[:, 0]
