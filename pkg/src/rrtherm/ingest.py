"""From raw photon counts to atom-number records.

Readout produces a fluorescence photon count per shot; atom numbers sit on
an equispaced comb of peaks on top of that signal.  This module fits the
comb to calibration data, maps counts to the nearest peak, estimates the
mean loading, and reads and writes shot records.

File format: CSV with header ``t_us,atoms`` or ``t_us,photons``, one shot
per row, release times in microseconds.  Rows at zero release time are
calibration shots.  Optional ``# key: value`` comment lines before the
header carry record metadata.  Times are written as ``t / 1e-6`` and read
back as ``parsed * 1e-6``; for any time that entered the package through
the microsecond boundary this round-trips bit for bit.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .protocols import MeasurementRecord, _damped_gauss_newton

DEFAULT_ATOM_CAP = 7


class CalibrationError(ValueError):
    """Calibration data could not pin down the photon-count comb."""


class RecordFormatError(ValueError):
    """A record file violated the CSV schema.

    ``line`` is the 1-based offending line number, or None when the
    problem is the file as a whole.
    """

    def __init__(self, message: str, line: int | None = None):
        super().__init__(f"line {line}: {message}" if line else message)
        self.line = line


@dataclass
class CalibrationFit:
    """Equispaced Gaussian comb fitted to a photon-count histogram.

    ``peak_offset`` is the centre of the empty-trap peak and
    ``peak_spacing`` the photon step per atom; atom number n sits at
    peak_offset + n * peak_spacing.  This fit ties all widths equal, so
    ``peak_widths`` holds one value repeated.  ``clamped_low`` counts
    conversions that rounded to a negative atom number, a sign of
    background drift; it is diagnostics, not part of equality.
    """

    peak_offset: float
    peak_spacing: float
    peak_widths: tuple[float, ...]
    amplitudes: tuple[float, ...]
    residual_norm: float
    converged: bool = True
    clamped_low: int = field(default=0, compare=False)

    def __post_init__(self) -> None:
        if not self.peak_spacing > 0:
            raise ValueError("peak spacing must be positive")
        if len(self.amplitudes) < 2:
            raise ValueError("a calibration needs at least two peaks")
        if len(self.peak_widths) != len(self.amplitudes):
            raise ValueError("one width per peak")
        if any(not w > 0 for w in self.peak_widths):
            raise ValueError("peak widths must be positive")

    @property
    def n_peaks(self) -> int:
        return len(self.amplitudes)


_erf = np.vectorize(math.erf)


def fit_calibration_histogram(counts, n_peaks: int = DEFAULT_ATOM_CAP + 1) -> CalibrationFit:
    """Fit an equispaced comb of same-width Gaussians to photon counts.

    Bins the counts (Freedman-Diaconis width, floored so the fit stays
    overdetermined) and seeds offset and spacing from the histogram's local
    maxima.  When essentially all samples sit in those maximal bins the
    clusters are already separated and the comb is read straight off their
    centroids; a shape fit below bin resolution has nothing to refine.
    Otherwise the seed is polished by least squares on the bin counts, with
    each peak integrated over its bin.  Fewer than two maxima, a fit still
    moving at the iteration cap, or a spacing collapsed toward zero all
    raise CalibrationError.
    """
    if n_peaks < 2:
        raise ValueError("n_peaks must be at least 2")
    data = np.asarray(counts, float).ravel()
    if data.size < 10 * n_peaks:
        raise ValueError(
            f"need at least {10 * n_peaks} calibration samples for {n_peaks} peaks, got {data.size}"
        )

    lo, hi = float(data.min()), float(data.max())
    span = hi - lo
    if span <= 0:
        raise CalibrationError("all photon counts identical; no peak structure")
    q25, q75 = np.percentile(data, [25, 75])
    width = 2.0 * (q75 - q25) / data.size ** (1 / 3)
    if width <= 0:
        width = span / (5 * n_peaks)

    # First pass at Freedman-Diaconis width to discover the comb scale,
    # then rebin fine enough to resolve the discovered spacing: the FD rule
    # assumes one smooth mode and overshoots badly on multimodal data.
    spacing0 = None
    for _ in range(2):
        n_bins = int(np.clip(math.ceil(span / width), n_peaks + 5, 200))
        hist, edges = np.histogram(data, bins=n_bins)
        centers = 0.5 * (edges[:-1] + edges[1:])
        bin_width = edges[1] - edges[0]
        maxima = _prominent_maxima(hist)
        if len(maxima) < 2:
            raise CalibrationError(
                "photon counts form a single cluster; cannot separate atom-number peaks"
            )
        clusters = [data[(data >= edges[i]) & (data <= edges[i + 1])] for i in maxima]
        peak_centers = np.array([c.mean() for c in clusters])
        offset0 = float(peak_centers[0])
        spacing0 = float(np.median(np.diff(peak_centers)))
        if bin_width <= spacing0 / 4.0:
            break
        width = spacing0 / 6.0

    coverage = float(hist[maxima].sum()) / data.size
    if coverage > 0.9:
        return _comb_from_clusters(
            clusters, offset0, spacing0, n_peaks, bin_width, hist, maxima
        )

    within = float(np.mean([c.std() for c in clusters]))
    sigma0 = float(np.clip(within, bin_width / 2.0, spacing0 / 4.0))
    positions0 = offset0 + spacing0 * np.arange(n_peaks)
    floor = max(hist.max() * 1e-3, 1e-3)
    amps0 = np.array(
        [
            max(float(hist[np.abs(centers - p) <= spacing0 / 2.0].sum()), floor)
            for p in positions0
        ]
    )
    # Component mass cannot exceed the sample count; without the ceiling a
    # peak can drift out of the window and fit the data with its tail.
    amp_ceiling = 2.0 * data.size

    def residuals(params: np.ndarray) -> np.ndarray:
        offset = params[0]
        spacing = math.exp(params[1])
        sigma = math.exp(params[2])
        amps = np.exp(params[3:])
        positions = offset + spacing * np.arange(n_peaks)
        z = (edges[None, :] - positions[:, None]) / (sigma * math.sqrt(2.0))
        mass = 0.5 * (_erf(z[:, 1:]) - _erf(z[:, :-1]))
        model = amps @ mass
        return np.concatenate([hist - model, np.maximum(0.0, amps - amp_ceiling)])

    start = np.concatenate(
        [[offset0, math.log(spacing0), math.log(sigma0)], np.log(amps0)]
    )
    max_iterations = 200
    # The offset moves in photon units while everything else moves in log
    # units, so the step cap has to accommodate the histogram's scale.
    params, _, small_step, iterations, cost = _damped_gauss_newton(
        residuals, start, max_iterations, 1e-8, max_step=max(10.0, span / 2.0)
    )
    if iterations >= max_iterations and not small_step:
        raise CalibrationError("calibration fit did not settle")
    spacing = math.exp(params[1])
    if spacing < bin_width / 2.0:
        raise CalibrationError("fitted peak spacing is consistent with zero")
    sigma = math.exp(params[2])
    return CalibrationFit(
        peak_offset=float(params[0]),
        peak_spacing=spacing,
        peak_widths=(sigma,) * n_peaks,
        amplitudes=tuple(float(a) for a in np.exp(params[3:])),
        residual_norm=math.sqrt(cost),
        converged=small_step,
    )


def _comb_from_clusters(clusters, offset, spacing, n_peaks, bin_width, hist, maxima):
    """Comb parameters read directly off well-separated clusters.

    Amplitudes are cluster sample counts placed at their nearest comb
    position; the width reports the cluster spread, floored at half the
    bin resolution; the residual is the mass the comb does not claim.
    """
    amps = [0.0] * n_peaks
    claimed = set()
    for bin_index, cluster in zip(maxima, clusters):
        k = round((cluster.mean() - offset) / spacing)
        if 0 <= k < n_peaks:
            amps[k] += float(cluster.size)
            claimed.add(bin_index)
    unclaimed = [h for i, h in enumerate(hist) if i not in claimed]
    width = max(float(np.mean([c.std() for c in clusters])), bin_width / 2.0)
    return CalibrationFit(
        peak_offset=offset,
        peak_spacing=spacing,
        peak_widths=(width,) * n_peaks,
        amplitudes=tuple(amps),
        residual_norm=float(np.linalg.norm(unclaimed)),
        converged=True,
    )


def _local_maxima(hist: np.ndarray) -> list[int]:
    """Indices of local maxima, plateaus counted once at their left edge."""
    maxima = []
    n = hist.size
    i = 0
    while i < n:
        if hist[i] == 0:
            i += 1
            continue
        j = i
        while j + 1 < n and hist[j + 1] == hist[i]:
            j += 1
        left = hist[i - 1] if i > 0 else -1
        right = hist[j + 1] if j + 1 < n else -1
        if hist[i] > left and hist[i] > right:
            maxima.append(i)
        i = j + 1
    return maxima


def _prominent_maxima(hist: np.ndarray) -> list[int]:
    """Local maxima that clear their saddle by more than counting noise.

    Of each adjacent pair whose lesser peak rises less than two Poisson
    sigmas above the valley between them, the lesser is a noise bump and
    gets dropped; repeat until stable.
    """
    maxima = _local_maxima(hist)
    while len(maxima) > 1:
        drop = None
        for a, b in zip(maxima, maxima[1:]):
            saddle = hist[a : b + 1].min()
            lesser = a if hist[a] <= hist[b] else b
            if hist[lesser] - saddle <= 2.0 * math.sqrt(hist[lesser]):
                drop = lesser
                break
        if drop is None:
            break
        maxima.remove(drop)
    return maxima


def photons_to_atoms(
    photon_count: float, calib: CalibrationFit, atom_cap: int = DEFAULT_ATOM_CAP
) -> int:
    """Atom number of the comb peak nearest a photon count.

    Clamped to [0, atom_cap]; a count rounding below zero bumps the
    calibration's ``clamped_low`` diagnostic.
    """
    index = round((photon_count - calib.peak_offset) / calib.peak_spacing)
    if index < 0:
        calib.clamped_low += 1
        return 0
    return min(index, atom_cap)


def estimate_mean_loading(calibration_atoms) -> float:
    """Empirical mean of zero-release-time atom counts.

    All-zero data yields 0.0 with a warning: a zero mean loading makes
    every downstream likelihood degenerate.
    """
    atoms = np.asarray(calibration_atoms, float).ravel()
    if atoms.size == 0:
        raise ValueError("need at least one calibration count")
    mean = float(atoms.mean())
    if mean == 0.0:
        warnings.warn(
            "calibration counts are all zero; mean loading 0 is unusable for estimation",
            stacklevel=2,
        )
    return mean


def save_record(record: MeasurementRecord, path) -> None:
    """Write a record as shot-per-row CSV, calibration first at t_us = 0.

    The format has no separate calibration column, so a shot taken at
    exactly zero release time would read back as a calibration count.
    """
    lines = [f"# {key}: {value}" for key, value in sorted(record.metadata.items())]
    lines.append("t_us,atoms")
    lines.extend(f"0,{n}" for n in record.calibration)
    lines.extend(f"{t / 1e-6!r},{n}" for t, n in record.shots)
    Path(path).write_text("\n".join(lines) + "\n")


def load_record(
    path,
    calibration: CalibrationFit | None = None,
    atom_cap: int = DEFAULT_ATOM_CAP,
) -> MeasurementRecord:
    """Read a shot CSV into a record, in file order.

    An ``atoms`` file is taken as already quantised.  A ``photons`` file is
    mapped through ``calibration`` when given; otherwise the zero-time rows
    are fitted first and the whole file is quantised with the result.
    Malformed content raises RecordFormatError naming the line.
    """
    text = Path(path).read_text()
    if not text.strip():
        raise RecordFormatError("empty file; expected a t_us,atoms or t_us,photons header")

    metadata: dict[str, str] = {}
    header: str | None = None
    rows: list[tuple[int, float, float]] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            if header is not None:
                raise RecordFormatError("comment after header", lineno)
            key, sep, value = line[1:].partition(":")
            if not sep or not key.strip():
                raise RecordFormatError("metadata comment must look like '# key: value'", lineno)
            metadata[key.strip()] = value.strip()
            continue
        if header is None:
            header = line
            if header not in ("t_us,atoms", "t_us,photons"):
                raise RecordFormatError(
                    f"header must be 't_us,atoms' or 't_us,photons', got {header!r}", lineno
                )
            continue
        fields = line.split(",")
        if len(fields) != 2:
            raise RecordFormatError(f"expected 2 columns, got {len(fields)}", lineno)
        try:
            t_us = float(fields[0])
        except ValueError:
            raise RecordFormatError(f"release time {fields[0]!r} is not a number", lineno) from None
        if not math.isfinite(t_us) or t_us < 0:
            raise RecordFormatError("release time must be finite and nonnegative", lineno)
        try:
            value = float(fields[1])
        except ValueError:
            raise RecordFormatError(f"count {fields[1]!r} is not a number", lineno) from None
        rows.append((lineno, t_us, value))

    if header is None:
        raise RecordFormatError("no header line found")

    if header == "t_us,atoms":
        atoms_rows = []
        for lineno, t_us, value in rows:
            if value != int(value) or value < 0:
                raise RecordFormatError(
                    f"atom count must be a nonnegative integer, got {value!r}", lineno
                )
            atoms_rows.append((t_us, int(value)))
    else:
        if calibration is None:
            zero_photons = [value for _, t_us, value in rows if t_us == 0.0]
            if not zero_photons:
                raise RecordFormatError(
                    "photon file has no t_us = 0 calibration rows and no calibration was given"
                )
            calibration = fit_calibration_histogram(zero_photons, n_peaks=atom_cap + 1)
        atoms_rows = [
            (t_us, photons_to_atoms(value, calibration, atom_cap)) for _, t_us, value in rows
        ]

    shots = tuple((t_us * 1e-6, n) for t_us, n in atoms_rows if t_us != 0.0)
    calib_counts = tuple(n for t_us, n in atoms_rows if t_us == 0.0)
    return MeasurementRecord(shots=shots, calibration=calib_counts, metadata=metadata)


def record_to_payload(record: MeasurementRecord) -> dict:
    """JSON-ready dict mirroring a record, times in microseconds."""
    return {
        "shots": [{"t_us": t / 1e-6, "atoms": n} for t, n in record.shots],
        "calibration": list(record.calibration),
        "metadata": dict(record.metadata),
    }


def record_from_payload(payload: dict) -> MeasurementRecord:
    """Rebuild a record from its JSON form."""
    shots = tuple(
        (float(shot["t_us"]) * 1e-6, int(shot["atoms"])) for shot in payload.get("shots", ())
    )
    return MeasurementRecord(
        shots=shots,
        calibration=tuple(int(n) for n in payload.get("calibration", ())),
        metadata={str(k): str(v) for k, v in payload.get("metadata", {}).items()},
    )
