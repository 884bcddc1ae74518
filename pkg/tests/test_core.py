"""Validation and bookkeeping types: detectors, grids, unit helpers."""

import math

import numpy as np
import pytest

from cqmcorr import (
    ConfigError,
    CorrelatorResult,
    DetectorModel,
    EnsembleGenerator,
    TimeGrid,
    as_bloch,
    check_segments,
    rabi_mhz,
    rabi_rad_per_us,
    require_physical,
)


def test_as_bloch_accepts_lists_and_copies():
    r = as_bloch([0.1, -0.2, 0.3])
    assert r.dtype == np.float64 and r.shape == (3,)
    src = np.array([1.0, 0.0, 0.0])
    out = as_bloch(src)
    out[0] = 5.0
    assert src[0] == 1.0


@pytest.mark.parametrize("bad", [[1, 2], [[1, 2, 3]], [np.nan, 0, 0], [np.inf, 0, 0]])
def test_as_bloch_rejects_malformed(bad):
    with pytest.raises(ConfigError):
        as_bloch(bad)


def test_require_physical_norm_window():
    require_physical([0.6, 0.0, 0.8])
    require_physical([1.0, 0.0, 0.0])
    with pytest.raises(ConfigError):
        require_physical([1.1, 0.0, 0.0])
    # the tolerance argument loosens the cap
    require_physical([1.04, 0.0, 0.0], tol=0.05)


def test_rabi_unit_conversions_round_trip():
    assert rabi_rad_per_us(1.0) == pytest.approx(2.0 * math.pi, rel=1e-15)
    for f in (0.25, 1.0, 3.7):
        assert rabi_mhz(rabi_rad_per_us(f)) == pytest.approx(f, rel=1e-15)


class TestDetectorModel:
    def test_basic_fields_and_gamma(self):
        det = DetectorModel(axis=(0, 0, 1), tau_m=2.0, k_phase=0.5, eta=0.8)
        assert det.gamma_m == pytest.approx((1 + 0.25) / (2 * 0.8 * 2.0), rel=1e-15)
        # axis is stored normalized and read-only
        with pytest.raises(ValueError):
            det.axis[0] = 1.0

    @pytest.mark.parametrize(
        "kwargs",
        [
            dict(axis=(0, 0, 2), tau_m=1.0),
            dict(axis=(0, 0, 1), tau_m=0.0),
            dict(axis=(0, 0, 1), tau_m=-1.0),
            dict(axis=(0, 0, 1), tau_m=1.0, eta=0.0),
            dict(axis=(0, 0, 1), tau_m=1.0, eta=1.2),
            dict(axis=(0, 0, 1), tau_m=1.0, k_phase=math.inf),
        ],
    )
    def test_rejects_bad_parameters(self, kwargs):
        with pytest.raises(ConfigError):
            DetectorModel(**kwargs)

    def test_quadrature_angle_construction(self):
        det = DetectorModel.from_quadrature_angle((0, 0, 1), tau_min=2.04, phi_a_deg=70.0, eta=0.44)
        phi = math.radians(70.0)
        assert det.tau_m == pytest.approx(2.04 / math.cos(phi) ** 2, rel=1e-15)
        assert det.k_phase == pytest.approx(math.tan(phi), rel=1e-15)
        # informational-only detector at 0 degrees
        det0 = DetectorModel.from_quadrature_angle((0, 0, 1), tau_min=2.04, phi_a_deg=0.0)
        assert det0.tau_m == 2.04 and det0.k_phase == 0.0

    def test_quadrature_angle_tau_m_override(self):
        det = DetectorModel.from_quadrature_angle(
            (0, 0, 1), tau_min=2.04, phi_a_deg=70.0, tau_m=17.0
        )
        assert det.tau_m == 17.0
        assert det.k_phase == pytest.approx(math.tan(math.radians(70.0)), rel=1e-15)

    def test_quadrature_angle_rejects_near_90(self):
        with pytest.raises(ConfigError):
            DetectorModel.from_quadrature_angle((0, 0, 1), tau_min=2.04, phi_a_deg=90.0)


class TestTimeGrid:
    def test_times_are_multiplicative(self):
        grid = TimeGrid(t0=0.0, dt=0.1, n_steps=5)
        np.testing.assert_array_equal(grid.times(), 0.1 * np.arange(5))
        np.testing.assert_array_equal(grid.state_times(), 0.1 * np.arange(6))
        assert grid.t_end == pytest.approx(0.5, abs=0)

    def test_rejects_bad_grids(self):
        with pytest.raises(ConfigError):
            TimeGrid(t0=0.0, dt=0.0, n_steps=5)
        with pytest.raises(ConfigError):
            TimeGrid(t0=0.0, dt=0.1, n_steps=0)


class TestSegments:
    def mk(self, t_start, t_end):
        return EnsembleGenerator(matrix=np.zeros((3, 3)), r_st=np.zeros(3),
                                 t_start=t_start, t_end=t_end)

    def test_accepts_cover(self):
        check_segments([self.mk(0.0, 1.0), self.mk(1.0, math.inf)], 0.0, 5.0)

    def test_rejects_gap_overlap_and_short_cover(self):
        with pytest.raises(ConfigError):
            check_segments([self.mk(0.0, 1.0), self.mk(1.5, 3.0)], 0.0, 2.0)
        with pytest.raises(ConfigError):
            check_segments([self.mk(0.0, 2.0), self.mk(1.0, 3.0)], 0.0, 2.5)
        with pytest.raises(ConfigError):
            check_segments([self.mk(0.0, 1.0)], 0.0, 2.0)
        with pytest.raises(ConfigError):
            check_segments([], 0.0, 1.0)

    def test_rejects_window_starting_before_first_segment(self):
        with pytest.raises(ConfigError):
            check_segments([self.mk(0.5, math.inf)], 0.0, 1.0)


class TestCorrelatorResult:
    def test_paired_difference(self):
        res = CorrelatorResult(
            lags=np.array([0.1, 0.2]),
            values=np.array([1.0, 0.5]),
            errors=np.array([0.1, 0.1]),
            values_minus=np.array([0.2, 0.1]),
            errors_minus=np.array([0.1, 0.1]),
        )
        np.testing.assert_allclose(res.delta, [0.8, 0.4])
        np.testing.assert_allclose(res.delta_error, np.sqrt(0.02))

    def test_unpaired_has_no_delta(self):
        res = CorrelatorResult(lags=np.array([0.1]), values=np.array([1.0]))
        with pytest.raises(ValueError):
            res.delta
        assert res.delta_error is None
