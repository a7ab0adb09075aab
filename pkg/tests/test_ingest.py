"""Photon-count calibration, quantisation and record file round trips."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rrtherm.ingest import (
    CalibrationError,
    CalibrationFit,
    RecordFormatError,
    estimate_mean_loading,
    fit_calibration_histogram,
    load_record,
    photons_to_atoms,
    record_from_payload,
    record_to_payload,
    save_record,
)
from rrtherm.protocols import MeasurementRecord


def three_peak_photons(rng, size=3000):
    atoms = rng.choice(3, size=size, p=[0.45, 0.35, 0.20])
    return 100 + 50 * atoms + rng.normal(0, 8, size)


def comb_fit(offset=100.0, spacing=50.0, n_peaks=8):
    return CalibrationFit(
        peak_offset=offset,
        peak_spacing=spacing,
        peak_widths=(8.0,) * n_peaks,
        amplitudes=(10.0,) * n_peaks,
        residual_norm=0.0,
    )


def full_record():
    times_us = [2.0, 10.0, 22.0, 42.5, 60.0]
    shots = tuple((t * 1e-6, n) for t, n in zip(times_us, [3, 1, 0, 2, 4]))
    return MeasurementRecord(
        shots=shots, calibration=(2, 0, 4, 1), metadata={"trap": "deep", "run": "7"}
    )


class TestCalibrationFitType:
    def test_nonpositive_spacing_rejected(self):
        with pytest.raises(ValueError, match="spacing"):
            comb_fit(spacing=0.0)

    def test_single_peak_rejected(self):
        with pytest.raises(ValueError, match="two peaks"):
            CalibrationFit(100.0, 50.0, (8.0,), (10.0,), 0.0)

    def test_width_count_must_match(self):
        with pytest.raises(ValueError, match="per peak"):
            CalibrationFit(100.0, 50.0, (8.0,), (10.0, 10.0), 0.0)

    def test_nonpositive_width_rejected(self):
        with pytest.raises(ValueError, match="width"):
            CalibrationFit(100.0, 50.0, (8.0, 0.0), (10.0, 10.0), 0.0)

    def test_n_peaks_counts_amplitudes(self):
        assert comb_fit(n_peaks=5).n_peaks == 5


class TestFitCalibrationHistogram:
    def test_recovers_synthetic_mixture(self):
        photons = three_peak_photons(np.random.default_rng(42))
        fit = fit_calibration_histogram(photons, n_peaks=3)
        assert abs(fit.peak_offset - 100.0) < 2.0
        assert abs(fit.peak_spacing - 50.0) < 2.0
        assert fit.converged
        assert fit.n_peaks == 3
        assert len(fit.peak_widths) == 3

    def test_recovery_is_stable_across_seeds(self):
        for seed in range(8):
            photons = three_peak_photons(np.random.default_rng(seed))
            fit = fit_calibration_histogram(photons, n_peaks=3)
            assert abs(fit.peak_offset - 100.0) < 2.0
            assert abs(fit.peak_spacing - 50.0) < 2.0

    def test_separated_delta_peaks_read_exactly(self):
        fit = fit_calibration_histogram([100.0] * 40 + [150.0] * 40, n_peaks=2)
        assert fit.peak_offset == 100.0
        assert fit.peak_spacing == 50.0
        assert fit.amplitudes == (40.0, 40.0)
        assert fit.residual_norm == 0.0

    def test_single_cluster_raises(self):
        data = np.random.default_rng(0).normal(100, 5, 200)
        with pytest.raises(CalibrationError, match="single cluster"):
            fit_calibration_histogram(data, n_peaks=2)

    def test_identical_counts_raise(self):
        with pytest.raises(CalibrationError, match="identical"):
            fit_calibration_histogram([120.0] * 50, n_peaks=2)

    def test_needs_ten_samples_per_peak(self):
        with pytest.raises(ValueError, match="at least 30"):
            fit_calibration_histogram([100.0, 150.0] * 14, n_peaks=3)

    def test_needs_two_peaks(self):
        with pytest.raises(ValueError, match="n_peaks"):
            fit_calibration_histogram([100.0] * 40, n_peaks=1)

    def test_poisson_loaded_comb(self):
        # the shape of real calibration data: comb populated by Poisson loading
        rng = np.random.default_rng(3)
        atoms = np.minimum(rng.poisson(1.65, 160), 7)
        photons = 200 + 80 * atoms + rng.normal(0, 12, 160)
        fit = fit_calibration_histogram(photons)
        assert abs(fit.peak_offset - 200.0) < 12.0
        assert abs(fit.peak_spacing - 80.0) < 8.0


class TestPhotonsToAtoms:
    def test_offset_maps_to_zero(self):
        assert photons_to_atoms(100.0, comb_fit()) == 0

    def test_rounds_to_nearest_peak(self):
        assert photons_to_atoms(148.0, comb_fit()) == 1

    def test_negative_index_clamps_and_counts(self):
        fit = comb_fit()
        assert photons_to_atoms(60.0, fit) == 0
        assert fit.clamped_low == 1
        photons_to_atoms(30.0, fit)
        assert fit.clamped_low == 2

    def test_clamps_at_cap(self):
        assert photons_to_atoms(100.0 + 50.0 * 12, comb_fit(), atom_cap=7) == 7

    @given(st.integers(min_value=0, max_value=7))
    def test_requantisation_is_idempotent(self, n):
        fit = comb_fit()
        photons = fit.peak_offset + n * fit.peak_spacing
        assert photons_to_atoms(photons, fit) == n

    @pytest.mark.parametrize("scale,shift", [(2.0, 500.0), (1.7, 333.3), (0.25, -40.0)])
    def test_affine_rescaling_preserves_atoms(self, scale, shift):
        rng = np.random.default_rng(11)
        calib_photons = three_peak_photons(rng)
        shot_photons = 100 + 50 * rng.choice(3, size=60, p=[0.45, 0.35, 0.20]) + rng.normal(0, 8, 60)

        fit = fit_calibration_histogram(calib_photons, n_peaks=3)
        atoms = [photons_to_atoms(p, fit) for p in shot_photons]

        fit2 = fit_calibration_histogram(scale * calib_photons + shift, n_peaks=3)
        atoms2 = [photons_to_atoms(scale * p + shift, fit2) for p in shot_photons]
        assert atoms == atoms2


class TestEstimateMeanLoading:
    def test_plain_mean(self):
        assert estimate_mean_loading([1, 2, 3]) == 2.0

    def test_all_zeros_warn(self):
        with pytest.warns(UserWarning, match="all zero"):
            assert estimate_mean_loading([0, 0, 0]) == 0.0

    def test_empty_rejected(self):
        with pytest.raises(ValueError, match="at least one"):
            estimate_mean_loading([])

    def test_poisson_sample_mean(self):
        draws = np.random.default_rng(9).poisson(1.88, 100)
        assert abs(estimate_mean_loading(draws) - 1.88) < 3 * math.sqrt(1.88 / 100)


class TestRecordFiles:
    def test_round_trip(self, tmp_path):
        record = full_record()
        path = tmp_path / "run.csv"
        save_record(record, path)
        assert load_record(path) == record

    def test_round_trip_on_lattice_and_golden_times(self, tmp_path):
        times = [float(t) for t in np.arange(1, 101) * 2e-6] + [14e-6, 22e-6, 42e-6, 60e-6]
        record = MeasurementRecord(shots=tuple((t, 1) for t in times))
        path = tmp_path / "grid.csv"
        save_record(record, path)
        loaded = load_record(path)
        assert [t for t, _ in loaded.shots] == times

    def test_empty_file_rejected(self, tmp_path):
        path = tmp_path / "empty.csv"
        path.write_text("")
        with pytest.raises(RecordFormatError, match="empty file"):
            load_record(path)

    def test_header_only_gives_empty_record(self, tmp_path):
        path = tmp_path / "bare.csv"
        path.write_text("t_us,atoms\n")
        record = load_record(path)
        assert record == MeasurementRecord()

    def test_unknown_header_rejected(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("time,counts\n1,2\n")
        with pytest.raises(RecordFormatError, match="header"):
            load_record(path)

    @pytest.mark.parametrize(
        "row,complaint",
        [
            ("5", "2 columns"),
            ("abc,3", "not a number"),
            ("-2,3", "nonnegative"),
            ("5,x", "not a number"),
            ("5,1.5", "integer"),
            ("5,-1", "integer"),
        ],
    )
    def test_malformed_rows_name_their_line(self, tmp_path, row, complaint):
        path = tmp_path / "bad.csv"
        path.write_text(f"t_us,atoms\n10,2\n{row}\n")
        with pytest.raises(RecordFormatError, match=complaint) as err:
            load_record(path)
        assert err.value.line == 3
        assert "line 3" in str(err.value)

    def test_metadata_comments_round_trip(self, tmp_path):
        path = tmp_path / "meta.csv"
        path.write_text("# trap: shallow\n# note: drift check\nt_us,atoms\n4,1\n")
        record = load_record(path)
        assert record.metadata == {"trap": "shallow", "note": "drift check"}

    def test_bad_metadata_comment_rejected(self, tmp_path):
        path = tmp_path / "meta.csv"
        path.write_text("# just a remark\nt_us,atoms\n")
        with pytest.raises(RecordFormatError, match="key: value"):
            load_record(path)

    def test_comment_after_header_rejected(self, tmp_path):
        path = tmp_path / "meta.csv"
        path.write_text("t_us,atoms\n# trap: deep\n4,1\n")
        with pytest.raises(RecordFormatError, match="after header"):
            load_record(path)

    def test_blank_lines_ignored(self, tmp_path):
        path = tmp_path / "gaps.csv"
        path.write_text("t_us,atoms\n\n10,2\n\n0,1\n")
        record = load_record(path)
        # parsed times are microseconds times 1e-6, not the nearest double
        # to the decimal literal; 10 * 1e-6 is one ulp below 10e-6
        assert record.shots == ((10 * 1e-6, 2),)
        assert record.calibration == (1,)


class TestPhotonRecordFiles:
    def write_photon_file(self, path, rng):
        atoms_cal = np.minimum(rng.poisson(1.65, 120), 7)
        photons_cal = 200 + 80 * atoms_cal + rng.normal(0, 8, 120)
        shot_atoms = [3, 0, 5, 2, 2, 7, 1]
        times_us = [2, 10, 22, 30, 42, 50, 60]
        photons_shot = [200 + 80 * n + rng.normal(0, 8) for n in shot_atoms]
        lines = ["t_us,photons"]
        lines += [f"0,{p}" for p in photons_cal]
        lines += [f"{t},{p}" for t, p in zip(times_us, photons_shot)]
        path.write_text("\n".join(lines) + "\n")
        return atoms_cal, shot_atoms, times_us

    def test_self_calibrating_load(self, tmp_path):
        path = tmp_path / "raw.csv"
        atoms_cal, shot_atoms, times_us = self.write_photon_file(path, np.random.default_rng(21))
        record = load_record(path)
        assert [n for _, n in record.shots] == shot_atoms
        assert [t for t, _ in record.shots] == [t * 1e-6 for t in times_us]
        assert list(record.calibration) == list(atoms_cal)

    def test_explicit_calibration(self, tmp_path):
        path = tmp_path / "raw.csv"
        _, shot_atoms, _ = self.write_photon_file(path, np.random.default_rng(22))
        calib = comb_fit(offset=200.0, spacing=80.0)
        record = load_record(path, calibration=calib)
        assert [n for _, n in record.shots] == shot_atoms

    def test_photons_without_calibration_rows_rejected(self, tmp_path):
        path = tmp_path / "raw.csv"
        path.write_text("t_us,photons\n10,340\n20,180\n")
        with pytest.raises(RecordFormatError, match="calibration"):
            load_record(path)


class TestRecordPayload:
    def test_payload_round_trip(self):
        record = full_record()
        payload = record_to_payload(record)
        assert record_from_payload(payload) == record

    def test_payload_times_are_microseconds(self):
        record = MeasurementRecord(shots=((22e-6, 3),))
        assert record_to_payload(record)["shots"][0]["t_us"] == pytest.approx(22.0)
