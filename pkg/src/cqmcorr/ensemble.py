"""Deterministic ensemble-averaged qubit evolution.

The ensemble state obeys dr/dt = L (r - r_st) with a piecewise-constant
generator L (3x3 real matrix) and fixed point r_st. Each piece is an
EnsembleGenerator segment; propagation across a time window multiplies the
per-segment affine propagators in order.

The affine step over one segment is computed as a single matrix exponential
of the augmented 4x4 generator [[L, -L r_st], [0, 0]], which handles singular
L (pure rotations, partial dephasing) with no special cases.
"""

from __future__ import annotations

import dataclasses

import numpy as np
from scipy.linalg import expm

from .core import ConfigError, EnsembleGenerator, as_bloch, check_segments


def dephasing_matrix(axis, rate: float) -> np.ndarray:
    """Generator contribution of measurement-induced dephasing at ``rate``
    about ``axis``: damps the Bloch components transverse to the axis,
    rate * (n n^T - 1)."""
    n = as_bloch(axis)
    if rate < 0:
        raise ConfigError(f"dephasing rate must be >= 0, got {rate!r}")
    return rate * (np.outer(n, n) - np.eye(3))


def rotation_matrix(axis, omega: float) -> np.ndarray:
    """Generator of coherent rotation about ``axis`` at angular rate ``omega``
    (rad/us): r -> omega (n x r)."""
    n = as_bloch(axis)
    return omega * np.array([
        [0.0, -n[2], n[1]],
        [n[2], 0.0, -n[0]],
        [-n[1], n[0], 0.0],
    ])


def rabi_dephasing_generator(gamma: float, omega_r: float) -> EnsembleGenerator:
    """Rabi drive about x at angular rate ``omega_r`` plus dephasing of the
    x and y components at rate ``gamma`` (z-axis measurement plus any intrinsic
    dephasing lumped together). Unital: the fixed point is the origin."""
    if gamma < 0:
        raise ConfigError(f"gamma must be >= 0, got {gamma!r}")
    mat = np.array([
        [-gamma, 0.0, 0.0],
        [0.0, -gamma, -omega_r],
        [0.0, omega_r, 0.0],
    ])
    return EnsembleGenerator(matrix=mat, r_st=np.zeros(3))


@dataclasses.dataclass(frozen=True)
class Propagator:
    """Affine map r -> matrix @ r + shift over [t_from, t_to]."""

    matrix: np.ndarray
    shift: np.ndarray
    t_from: float
    t_to: float

    def apply(self, r) -> np.ndarray:
        return self.matrix @ np.asarray(r, dtype=np.float64) + self.shift

    def compose(self, earlier: "Propagator") -> "Propagator":
        """Propagator for earlier followed by self."""
        if earlier.t_to != self.t_from:
            raise ConfigError(
                f"cannot compose: earlier ends at {earlier.t_to}, later starts at {self.t_from}")
        return Propagator(
            matrix=self.matrix @ earlier.matrix,
            shift=self.matrix @ earlier.shift + self.shift,
            t_from=earlier.t_from,
            t_to=self.t_to,
        )


def _segment_step(segment: EnsembleGenerator, dt: float) -> tuple[np.ndarray, np.ndarray]:
    """(matrix, shift) for evolving dt under one segment's generator."""
    aug = np.zeros((4, 4))
    aug[:3, :3] = segment.matrix
    aug[:3, 3] = -segment.matrix @ segment.r_st
    full = expm(aug * dt)
    return full[:3, :3], full[:3, 3]


def propagator(t_from: float, t_to: float, segments, cache: dict | None = None) -> Propagator:
    """Affine propagator over [t_from, t_to] for a piecewise-constant generator.

    ``segments`` is an ordered gap-free list of EnsembleGenerator. ``cache``,
    if given, memoizes per-segment matrix exponentials keyed on (segment index,
    duration); repeated sweeps over a uniform grid then pay for each distinct
    duration once.
    """
    if t_to < t_from:
        raise ConfigError(f"t_to {t_to} precedes t_from {t_from}")
    if t_to == t_from:
        return Propagator(np.eye(3), np.zeros(3), t_from, t_to)
    segments = list(segments)
    check_segments(segments, t_from, t_to)

    matrix = np.eye(3)
    shift = np.zeros(3)
    for index, seg in enumerate(segments):
        lo = max(t_from, seg.t_start)
        hi = min(t_to, seg.t_end)
        if hi <= lo:
            continue
        dt = hi - lo
        if cache is not None:
            key = (index, dt)
            step = cache.get(key)
            if step is None:
                step = _segment_step(seg, dt)
                cache[key] = step
        else:
            step = _segment_step(seg, dt)
        matrix = step[0] @ matrix
        shift = step[0] @ shift + step[1]
    return Propagator(matrix, shift, t_from, t_to)


def evolve(state_in, t_in: float, t_out: float, segments) -> np.ndarray:
    """Ensemble-average state at t_out given state_in at t_in."""
    r = as_bloch(state_in)
    return propagator(t_in, t_out, segments).apply(r)
