"""Shared types, unit conventions, and validation.

Conventions used throughout the package:

* time in microseconds, rates in 1/us, angular frequencies in rad/us;
* a Rabi frequency quoted in MHz maps to ``omega_r = 2*pi*f`` rad/us;
* angles are degrees at user-facing interfaces and radians internally;
* Bloch vectors are plain float64 numpy arrays ``(x, y, z)``. Physical states
  satisfy ``|r| <= 1`` (up to a small tolerance); intermediate states produced
  by the correlator recipe may lie far outside the unit ball and carry no norm
  bound.
"""

from __future__ import annotations

import dataclasses
import math

import numpy as np

TWO_PI = 2.0 * math.pi

# |r| <= 1 + PHYSICAL_NORM_TOL for states tagged physical (covers round-off in
# user-supplied states, nothing more).
PHYSICAL_NORM_TOL = 1e-9

# unit-axis tolerance for detector axes
AXIS_NORM_TOL = 1e-12


class ConfigError(ValueError):
    """Invalid configuration or arguments (CLI exit code 2)."""


class DiagnosticError(RuntimeError):
    """Numerical diagnostic: the computation is untrustworthy as configured
    (CLI exit code 3). Examples: trajectory norm overshoot, overdamped
    closed-form regime, degenerate fit design."""


def as_bloch(r) -> np.ndarray:
    """Coerce to a finite float64 3-vector (always a fresh copy)."""
    arr = np.array(r, dtype=np.float64)
    if arr.shape != (3,):
        raise ConfigError(f"Bloch vector must have shape (3,), got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ConfigError(f"Bloch vector has non-finite components: {arr}")
    return arr


def require_physical(r, tol: float = PHYSICAL_NORM_TOL) -> np.ndarray:
    """Coerce to a Bloch vector and enforce |r| <= 1 + tol."""
    arr = as_bloch(r)
    norm = float(np.linalg.norm(arr))
    if norm > 1.0 + tol:
        raise ConfigError(f"state norm {norm:.12g} exceeds 1 + {tol:g}")
    return arr


def _frozen_array(obj, name, value):
    value = np.array(value, dtype=np.float64)
    value.setflags(write=False)
    object.__setattr__(obj, name, value)


def rabi_rad_per_us(f_mhz: float) -> float:
    """Angular Rabi frequency (rad/us) for a Rabi frequency quoted in MHz."""
    return TWO_PI * f_mhz


def rabi_mhz(omega_r: float) -> float:
    """Inverse of :func:`rabi_rad_per_us`."""
    return omega_r / TWO_PI


@dataclasses.dataclass(frozen=True)
class DetectorModel:
    """One continuous detector: measurement axis, strength, and raw-units map.

    Parameters
    ----------
    axis : unit 3-vector
        Measurement axis n (the monitored observable is n . sigma).
    tau_m : float
        Measurement time in us (time to reach unit signal-to-noise).
    k_phase : float
        Phase-backaction strength K = tan(phi_a), phi_a the amplified
        quadrature angle.
    eta : float
        Quantum efficiency in (0, 1].
    response, offset : float
        Raw-record synthesis map: raw = offset + response * I_normalized.
        ``response`` is the half-separation: the two qubit poles sit at
        offset +- response, so a calibration that fits the separation of the
        two mean integrated signals measures 2*response.
    """

    axis: np.ndarray
    tau_m: float
    k_phase: float = 0.0
    eta: float = 1.0
    response: float = 1.0
    offset: float = 0.0

    def __post_init__(self):
        axis = np.asarray(self.axis, dtype=np.float64)
        if axis.shape != (3,) or not np.all(np.isfinite(axis)):
            raise ConfigError(f"detector axis must be a finite 3-vector, got {self.axis!r}")
        norm = float(np.linalg.norm(axis))
        if abs(norm - 1.0) > AXIS_NORM_TOL:
            raise ConfigError(f"detector axis norm {norm!r} differs from 1 by more than {AXIS_NORM_TOL:g}")
        _frozen_array(self, "axis", axis)
        if not (self.tau_m > 0 and math.isfinite(self.tau_m)):
            raise ConfigError(f"tau_m must be positive, got {self.tau_m!r}")
        if not (0.0 < self.eta <= 1.0):
            raise ConfigError(f"eta out of range (0, 1], got {self.eta!r}")
        for name in ("k_phase", "response", "offset"):
            if not math.isfinite(getattr(self, name)):
                raise ConfigError(f"{name} must be finite")

    @property
    def gamma_m(self) -> float:
        """Measurement-induced ensemble dephasing rate (1 + K^2)/(2 eta tau_m)."""
        return (1.0 + self.k_phase**2) / (2.0 * self.eta * self.tau_m)

    @classmethod
    def from_quadrature_angle(cls, axis, tau_min: float, phi_a_deg: float,
                              eta: float = 1.0, response: float = 1.0,
                              offset: float = 0.0, tau_m: float | None = None):
        """Build a detector from (tau_min, phi_a) with tau_m = tau_min/cos^2(phi_a)
        and K = tan(phi_a). ``tau_m`` may be given explicitly to override the
        cos^2 law (e.g. an independently measured value)."""
        phi = math.radians(phi_a_deg)
        c = math.cos(phi)
        if abs(c) < 1e-6:
            raise ConfigError(f"quadrature angle {phi_a_deg} deg too close to 90: tau_m diverges")
        if tau_m is None:
            tau_m = tau_min / c**2
        return cls(axis=axis, tau_m=tau_m, k_phase=math.tan(phi), eta=eta,
                   response=response, offset=offset)


@dataclasses.dataclass(frozen=True)
class EnsembleGenerator:
    """One piecewise-constant segment of the ensemble-averaged evolution
    dr/dt = matrix @ (r - r_st), valid on [t_start, t_end)."""

    matrix: np.ndarray
    r_st: np.ndarray
    t_start: float = -math.inf
    t_end: float = math.inf

    def __post_init__(self):
        mat = np.asarray(self.matrix, dtype=np.float64)
        if mat.shape != (3, 3) or not np.all(np.isfinite(mat)):
            raise ConfigError("generator matrix must be a finite 3x3 array")
        _frozen_array(self, "matrix", mat)
        _frozen_array(self, "r_st", as_bloch(self.r_st))
        if not self.t_start < self.t_end:
            raise ConfigError(f"empty generator interval [{self.t_start}, {self.t_end})")


def check_segments(segments, t_from: float, t_to: float) -> None:
    """Require an ordered, non-overlapping, gap-free segment list covering
    [t_from, t_to]. Raises ConfigError otherwise."""
    if not segments:
        raise ConfigError("no evolution segments given")
    prev_end = None
    for seg in segments:
        if prev_end is not None:
            if seg.t_start < prev_end:
                raise ConfigError(f"overlapping segments at t = {seg.t_start}")
            if seg.t_start > prev_end:
                # a gap matters only if it intersects the queried window
                if seg.t_start > t_from and prev_end < t_to:
                    raise ConfigError(f"segment gap on [{prev_end}, {seg.t_start})")
        prev_end = seg.t_end
    if segments[0].t_start > t_from or segments[-1].t_end < t_to:
        raise ConfigError(f"segments do not cover [{t_from}, {t_to}]")


@dataclasses.dataclass(frozen=True)
class TimeGrid:
    """Uniform sampling grid: n_steps samples at t_k = t0 + k*dt (computed
    multiplicatively, never by accumulation). Sample k represents the step
    [t_k, t_k + dt); the state history additionally includes the endpoint."""

    t0: float
    dt: float
    n_steps: int

    def __post_init__(self):
        if not (self.dt > 0 and math.isfinite(self.dt)):
            raise ConfigError(f"dt must be positive, got {self.dt!r}")
        if self.n_steps < 1:
            raise ConfigError(f"n_steps must be >= 1, got {self.n_steps!r}")

    @property
    def t_end(self) -> float:
        return self.t0 + self.n_steps * self.dt

    def times(self) -> np.ndarray:
        """Sample times t_k, k = 0 .. n_steps-1."""
        return self.t0 + self.dt * np.arange(self.n_steps)

    def state_times(self) -> np.ndarray:
        """State-history times t_k, k = 0 .. n_steps (includes the endpoint)."""
        return self.t0 + self.dt * np.arange(self.n_steps + 1)


@dataclasses.dataclass(frozen=True)
class CorrelatorResult:
    """Correlator values on a lag grid, optionally paired (two prepared cases)
    and with standard errors for Monte Carlo estimates.

    ``values`` may be 2-D (first-time grid x lag grid) for cross-correlator
    grids, in which case ``t1_values`` holds the first-time axis.
    """

    lags: np.ndarray
    values: np.ndarray
    errors: np.ndarray | None = None
    values_minus: np.ndarray | None = None
    errors_minus: np.ndarray | None = None
    detector_indices: tuple = (0,)
    t1_values: np.ndarray | None = None

    @property
    def delta(self) -> np.ndarray:
        """Paired difference K_plus - K_minus."""
        if self.values_minus is None:
            raise ValueError("no paired case present")
        return self.values - self.values_minus

    @property
    def delta_error(self) -> np.ndarray | None:
        if self.errors is None or self.errors_minus is None:
            return None
        return np.sqrt(self.errors**2 + self.errors_minus**2)


def validate_experiment(config) -> list[str]:
    """Report-style validation of a parsed experiment config (see the cli
    module for the schema). Returns a list of violation messages; empty means
    valid. Never raises."""
    problems = []

    detectors = getattr(config, "detectors", None) or []
    if not detectors:
        problems.append("no detectors configured")
    for i, det in enumerate(detectors):
        axis = np.asarray(det.axis, dtype=np.float64)
        if axis.shape != (3,) or not np.all(np.isfinite(axis)):
            problems.append(f"detectors[{i}].axis is not a finite 3-vector")
            continue
        if abs(np.linalg.norm(axis) - 1.0) > AXIS_NORM_TOL:
            problems.append(f"detectors[{i}].axis is not a unit vector (|n| = {np.linalg.norm(axis):.15g})")
        if det.tau_m_us is not None:
            if not det.tau_m_us > 0:
                problems.append(f"detectors[{i}].tau_m_us must be positive")
        elif det.tau_min_us is None:
            problems.append(f"detectors[{i}] needs tau_min_us or tau_m_us")
        elif not det.tau_min_us > 0:
            problems.append(f"detectors[{i}].tau_min_us must be positive")
        if not (0.0 < det.eta <= 1.0):
            problems.append(f"detectors[{i}].eta out of range (0, 1]")
        if abs(math.cos(math.radians(det.phi_a_deg))) < 1e-6:
            problems.append(f"detectors[{i}].phi_a_deg too close to 90 deg")

    grid = getattr(config, "grid", None)
    if grid is not None:
        if grid.dt_us is not None and not grid.dt_us > 0:
            problems.append("grid.dt_us must be positive")
        if not grid.duration_us > 0:
            problems.append("grid.duration_us must be positive")
        if grid.decimate < 1:
            problems.append("grid.decimate must be >= 1")

    ens = getattr(config, "ensemble", None)
    if ens is not None and ens.n_traj < 1:
        problems.append("ensemble.n_traj must be >= 1")

    evo = getattr(config, "evolution", None)
    if evo is not None:
        if evo.gamma_per_us < 0:
            problems.append("evolution.gamma_per_us must be >= 0")
        segs = evo.segments or []
        for j, seg in enumerate(segs):
            if np.asarray(seg.matrix, dtype=np.float64).shape != (3, 3):
                problems.append(f"evolution.segments[{j}].matrix must be 3x3")
            if not seg.t_start_us < seg.t_end_us:
                problems.append(f"evolution.segments[{j}] has an empty time interval")
        for j in range(1, len(segs)):
            if segs[j].t_start_us != segs[j - 1].t_end_us:
                problems.append(f"evolution.segments[{j}] does not abut segment {j - 1}")

    corr = getattr(config, "correlator", None)
    if corr is not None:
        if corr.times is not None:
            times = list(corr.times)
            if any(t2 <= t1 for t1, t2 in zip(times, times[1:])):
                problems.append("correlator times not strictly ordered")
            n_det = len(detectors)
            for idx in corr.detector_indices or []:
                if not 0 <= idx < max(n_det, 1):
                    problems.append(f"correlator detector index {idx} out of range")
        if corr.mode not in ("mc", "gcr", "analytic"):
            problems.append(f"correlator.mode must be mc|gcr|analytic, got {corr.mode!r}")
        if corr.t_avg_us is not None and corr.t_avg_us <= 0:
            problems.append("correlator.t_avg_us must be positive")

    init = getattr(config, "initial_state", None)
    if init is not None:
        arr = np.asarray(init, dtype=np.float64)
        if arr.shape != (3,) or not np.all(np.isfinite(arr)):
            problems.append("initial_state is not a finite 3-vector")
        elif np.linalg.norm(arr) > 1.0 + PHYSICAL_NORM_TOL:
            problems.append(f"initial_state norm {np.linalg.norm(arr):.12g} exceeds 1")

    return problems
