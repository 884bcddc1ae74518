"""Stochastic simulation of continuously monitored qubits.

Ito stochastic differential equation for the conditioned Bloch vector r under
simultaneous monitoring by detectors ell, each with axis n, measurement time
tau_m, and phase-backaction strength K = tan(phi_a):

    dr = L (r - r_st) dt
       + sum_ell [ (n - (n.r) r) + K (n x r) ] / sqrt(tau_m_ell) dW_ell

with L the full ensemble generator (it already contains the measurement
dephasing of every detector, so the noise terms average to zero and the
ensemble mean follows L exactly). Integration is Euler-Maruyama on a uniform
grid, dW -> sqrt(dt) w with w a standard normal.

The normalized output sample for step k is

    I_k = n . r_k + sqrt(tau_m/dt) w_k

with r_k the state at the start of the step and w_k THE SAME draw that kicks
the state. That correlation is the entire mechanism behind the correlator
physics; drawing the signal noise separately would be a different (wrong)
model, so the draw is made once and reused.

Reproducibility: noise is counter-based. The normal for (trajectory, step,
detector) is a pure function of (seed, trajectory, step, detector), so
results never depend on thread count, batch size, or evaluation order. Batch
reductions (ensemble mean states) are combined in fixed batch-index order,
which makes them thread-count independent as well.
"""

from __future__ import annotations

import concurrent.futures
import dataclasses
import hashlib
import json
import math
import struct

import numpy as np
from scipy.special import ndtri

from .core import (
    ConfigError,
    DiagnosticError,
    TimeGrid,
    check_segments,
    require_physical,
)

DEFAULT_BATCH_SIZE = 8192

# trajectories may overshoot the unit sphere by Euler error; beyond this the
# step size is unusable and the run aborts
NORM_OVERSHOOT_TOL = 0.05

ARCHIVE_MAGIC = b"CQMARCH1"
ARCHIVE_VERSION = 1


@dataclasses.dataclass(frozen=True)
class NoisePlan:
    """Counter-based standard normals keyed on (seed, trajectory).

    Each trajectory owns an independent Philox stream; raw 64-bit words at
    flat index step * n_detectors + detector are mapped to open-interval
    uniforms ((raw >> 11) * 2^-53 + 2^-54) and through the inverse normal
    CDF. No state is carried between calls, so any trajectory's noise can be
    regenerated in isolation.
    """

    seed: int

    def __post_init__(self):
        if not 0 <= int(self.seed) < 2**64:
            raise ConfigError(f"seed must fit in uint64, got {self.seed!r}")

    def _raw(self, traj_index: int, count: int) -> np.ndarray:
        key = np.array([self.seed, traj_index], dtype=np.uint64)
        return np.random.Philox(key=key).random_raw(count)

    def normals(self, traj_index: int, n_steps: int, n_detectors: int = 1) -> np.ndarray:
        """Standard normals for one trajectory, shape (n_steps, n_detectors)."""
        raw = self._raw(traj_index, n_steps * n_detectors)
        u = (raw >> np.uint64(11)) * 2.0**-53 + 2.0**-54
        return ndtri(u).reshape(n_steps, n_detectors)


def _batch_normals(plan: NoisePlan, lo: int, hi: int, n_steps: int, n_det: int) -> np.ndarray:
    """Normals for trajectories lo..hi-1, shape (hi-lo, n_steps, n_det).
    Bitwise identical to stacking plan.normals per trajectory."""
    count = n_steps * n_det
    raw = np.empty((hi - lo, count), dtype=np.uint64)
    for i in range(lo, hi):
        raw[i - lo] = plan._raw(i, count)
    u = (raw >> np.uint64(11)) * 2.0**-53 + 2.0**-54
    ndtri(u, out=u)
    return u.reshape(hi - lo, n_steps, n_det)


def _detector_constants(detectors, dt: float):
    """Per-detector scalars used by the stepper: axis components, k_phase,
    kick scale sqrt(dt/tau_m), output noise scale sqrt(tau_m/dt)."""
    consts = []
    for det in detectors:
        n0, n1, n2 = (float(c) for c in det.axis)
        consts.append((n0, n1, n2, float(det.k_phase),
                       math.sqrt(dt / det.tau_m), math.sqrt(det.tau_m / dt)))
    return consts


def _segment_constants(segment):
    """Generator scalars (row-major matrix entries and the constant drift
    piece b = L r_st, so the drift is L r - b)."""
    m = segment.matrix
    b = segment.matrix @ segment.r_st
    return (float(m[0, 0]), float(m[0, 1]), float(m[0, 2]),
            float(m[1, 0]), float(m[1, 1]), float(m[1, 2]),
            float(m[2, 0]), float(m[2, 1]), float(m[2, 2]),
            float(b[0]), float(b[1]), float(b[2]))


def _segment_table(segments, grid: TimeGrid):
    """Per-step segment lookup. Each step uses the segment containing its
    start time; a segment boundary strictly inside a step is an Euler-level
    approximation, same order as the stepping error."""
    segments = list(segments)
    check_segments(segments, grid.t0, grid.t_end)
    consts = [_segment_constants(seg) for seg in segments]
    starts = np.array([seg.t_start for seg in segments])
    idx = np.searchsorted(starts, grid.times(), side="right") - 1
    idx = np.clip(idx, 0, len(segments) - 1)
    return consts, idx.astype(np.intp)


def _ito_update(x, y, z, noise_step, det_consts, seg, dt, sqrt_dt):
    """One Euler-Maruyama step. Components may be floats or equal-shape
    arrays; the expression tree is fixed, so the scalar and batched paths
    produce bit-identical IEEE results."""
    signals = []
    nrs = []
    for (n0, n1, n2, kk, kick, scale), w in zip(det_consts, noise_step):
        nr = n0 * x + n1 * y + n2 * z
        signals.append(nr + scale * w)
        nrs.append(nr)
    m00, m01, m02, m10, m11, m12, m20, m21, m22, b0, b1, b2 = seg
    dx = (m00 * x + m01 * y + m02 * z - b0) * dt
    dy = (m10 * x + m11 * y + m12 * z - b1) * dt
    dz = (m20 * x + m21 * y + m22 * z - b2) * dt
    for (n0, n1, n2, kk, kick, scale), w, nr in zip(det_consts, noise_step, nrs):
        g = w * kick
        dx = dx + (n0 - nr * x + kk * (n1 * z - n2 * y)) * g
        dy = dy + (n1 - nr * y + kk * (n2 * x - n0 * z)) * g
        dz = dz + (n2 - nr * z + kk * (n0 * y - n1 * x)) * g
    return x + dx, y + dy, z + dz, signals


def step_ito(r, detectors, generator, dt: float, noise_draws) -> tuple[np.ndarray, np.ndarray]:
    """Reference single step: state after dt and the normalized output
    samples, given one standard-normal draw per detector. The batch engine
    reproduces this bit for bit."""
    r = require_physical(r, tol=NORM_OVERSHOOT_TOL)
    if not dt > 0:
        raise ConfigError(f"dt must be positive, got {dt!r}")
    draws = np.asarray(noise_draws, dtype=np.float64).reshape(-1)
    detectors = list(detectors)
    if draws.size != len(detectors):
        raise ConfigError(f"need one noise draw per detector, got {draws.size} for {len(detectors)}")
    det_consts = _detector_constants(detectors, dt)
    seg = _segment_constants(generator)
    x, y, z, signals = _ito_update(float(r[0]), float(r[1]), float(r[2]),
                                   [float(w) for w in draws], det_consts, seg,
                                   dt, math.sqrt(dt))
    norm = math.sqrt(x * x + y * y + z * z)
    if norm > 1.0 + NORM_OVERSHOOT_TOL:
        raise DiagnosticError(
            f"state norm {norm:.6g} overshoots the Bloch sphere by more than "
            f"{NORM_OVERSHOOT_TOL}; reduce dt")
    return np.array([x, y, z]), np.array(signals)


def _simulate_batch(r0s, grid: TimeGrid, det_consts, seg_consts, seg_idx, noise,
                    record_states: bool, norm_tol: float, traj_lo: int):
    """Simulate a batch. Returns (signals (B, n_det, n_steps) normalized,
    state_sum (n_steps+1, 3), state_sumsq (n_steps+1, 3), states or None)."""
    n_steps = grid.n_steps
    n_det = noise.shape[2]
    batch = r0s.shape[0]
    dt = grid.dt
    sqrt_dt = math.sqrt(dt)
    max_norm2 = (1.0 + norm_tol) ** 2

    x = r0s[:, 0].copy()
    y = r0s[:, 1].copy()
    z = r0s[:, 2].copy()
    signals = np.empty((batch, n_det, n_steps))
    state_sum = np.zeros((n_steps + 1, 3))
    state_sumsq = np.zeros((n_steps + 1, 3))
    states = np.empty((batch, n_steps + 1, 3)) if record_states else None

    def tally(k):
        state_sum[k, 0] = x.sum()
        state_sum[k, 1] = y.sum()
        state_sum[k, 2] = z.sum()
        state_sumsq[k, 0] = (x * x).sum()
        state_sumsq[k, 1] = (y * y).sum()
        state_sumsq[k, 2] = (z * z).sum()
        if record_states:
            states[:, k, 0] = x
            states[:, k, 1] = y
            states[:, k, 2] = z

    tally(0)
    for k in range(n_steps):
        noise_step = [noise[:, k, ell] for ell in range(n_det)]
        x, y, z, sigs = _ito_update(x, y, z, noise_step, det_consts,
                                    seg_consts[seg_idx[k]], dt, sqrt_dt)
        for ell in range(n_det):
            signals[:, ell, k] = sigs[ell]
        norm2 = x * x + y * y + z * z
        if np.any(norm2 > max_norm2):
            worst = int(np.argmax(norm2))
            raise DiagnosticError(
                f"trajectory {traj_lo + worst} norm {math.sqrt(float(norm2[worst])):.6g} "
                f"at t = {grid.t0 + (k + 1) * dt:.6g} overshoots the Bloch sphere "
                f"by more than {norm_tol}; reduce dt")
        tally(k + 1)
    return signals, state_sum, state_sumsq, states


@dataclasses.dataclass
class TrajectoryRecord:
    """One simulated trajectory: conditioned states on the step endpoints and
    normalized output samples per detector."""

    grid: TimeGrid
    detectors: tuple
    states: np.ndarray   # (n_steps + 1, 3)
    signals: np.ndarray  # (n_detectors, n_steps), normalized units
    traj_index: int
    seed: int


def simulate_trajectory(r0, grid: TimeGrid, detectors, segments, plan: NoisePlan,
                        traj_index: int = 0,
                        norm_tol: float = NORM_OVERSHOOT_TOL) -> TrajectoryRecord:
    """Single conditioned trajectory with full state history."""
    r0 = require_physical(r0)
    detectors = tuple(detectors)
    if not detectors:
        raise ConfigError("need at least one detector")
    det_consts = _detector_constants(detectors, grid.dt)
    seg_consts, seg_idx = _segment_table(segments, grid)
    noise = _batch_normals(plan, traj_index, traj_index + 1, grid.n_steps, len(detectors))
    signals, _, _, states = _simulate_batch(
        r0[None, :], grid, det_consts, seg_consts, seg_idx, noise,
        record_states=True, norm_tol=norm_tol, traj_lo=traj_index)
    return TrajectoryRecord(grid=grid, detectors=detectors, states=states[0],
                            signals=signals[0], traj_index=traj_index, seed=plan.seed)


def synthesize_raw(signals, detector) -> np.ndarray:
    """Map normalized output samples to raw detector units:
    offset + response * I. ``response`` is the half-separation of the two
    pole means."""
    return detector.offset + detector.response * np.asarray(signals, dtype=np.float64)


@dataclasses.dataclass
class EnsembleArchive:
    """Ensemble of output records on a common grid, in raw detector units,
    plus ensemble state statistics from the underlying fine simulation.

    Serialized format (little-endian): magic ``CQMARCH1``, uint32 header
    length, JSON header with sorted keys (config_digest, dt, kind,
    n_detectors, n_samples, n_traj, seed, t0, version), then the signal
    array as consecutive per-trajectory blocks of n_detectors * n_samples
    float64 values, C order.
    """

    grid: TimeGrid
    seed: int
    signals: np.ndarray  # (n_traj, n_detectors, n_samples)
    kind: str = "raw"
    config_digest: str = ""
    detectors: tuple | None = None
    base_grid: TimeGrid | None = None
    mean_states: np.ndarray | None = None  # (base n_steps + 1, 3)
    sem_states: np.ndarray | None = None

    @property
    def n_traj(self) -> int:
        return self.signals.shape[0]

    @property
    def n_detectors(self) -> int:
        return self.signals.shape[1]

    @property
    def n_samples(self) -> int:
        return self.signals.shape[2]

    def header(self) -> dict:
        return {
            "config_digest": self.config_digest,
            "dt": self.grid.dt,
            "kind": self.kind,
            "n_detectors": self.n_detectors,
            "n_samples": self.n_samples,
            "n_traj": self.n_traj,
            "seed": self.seed,
            "t0": self.grid.t0,
            "version": ARCHIVE_VERSION,
        }

    def _serial_chunks(self):
        header = json.dumps(self.header(), sort_keys=True).encode()
        yield ARCHIVE_MAGIC
        yield struct.pack("<I", len(header))
        yield header
        data = np.ascontiguousarray(self.signals, dtype="<f8")
        yield data.data

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            for chunk in self._serial_chunks():
                fh.write(chunk)

    def digest(self) -> str:
        """sha256 of the serialized byte stream (identical to hashing the
        saved file)."""
        h = hashlib.sha256()
        for chunk in self._serial_chunks():
            h.update(chunk)
        return h.hexdigest()

    @classmethod
    def load(cls, path) -> "EnsembleArchive":
        with open(path, "rb") as fh:
            blob = fh.read()
        if blob[:8] != ARCHIVE_MAGIC:
            raise ConfigError(f"{path}: not an ensemble archive")
        (hlen,) = struct.unpack_from("<I", blob, 8)
        header = json.loads(blob[12:12 + hlen].decode())
        if header.get("version") != ARCHIVE_VERSION:
            raise ConfigError(f"{path}: unsupported archive version {header.get('version')}")
        shape = (header["n_traj"], header["n_detectors"], header["n_samples"])
        expected = 12 + hlen + 8 * shape[0] * shape[1] * shape[2]
        if len(blob) != expected:
            raise ConfigError(f"{path}: truncated archive ({len(blob)} of {expected} bytes)")
        signals = np.frombuffer(blob, dtype="<f8", offset=12 + hlen).reshape(shape)
        grid = TimeGrid(t0=header["t0"], dt=header["dt"], n_steps=header["n_samples"])
        return cls(grid=grid, seed=header["seed"], signals=signals,
                   kind=header["kind"], config_digest=header["config_digest"])


def run_ensemble(n_traj: int, plan: NoisePlan, initial_state, grid: TimeGrid,
                 detectors, segments, *, threads: int = 1,
                 batch_size: int = DEFAULT_BATCH_SIZE, decimate: int = 1,
                 norm_tol: float = NORM_OVERSHOOT_TOL,
                 config_digest: str = "") -> EnsembleArchive:
    """Simulate n_traj trajectories and collect their raw output records.

    Trajectory j uses noise stream (plan.seed, j), so the ensemble content is
    a pure function of the arguments. ``decimate`` averages each group of
    that many consecutive samples into one (dt grows accordingly), which is
    how a fine integration grid turns into a coarse acquisition grid.
    ``threads`` distributes whole batches (fixed size ``batch_size``) over a
    thread pool; per-trajectory outputs are written to disjoint slices and
    per-batch state sums are combined in batch order, so every output bit is
    independent of ``threads``.
    """
    if n_traj < 1:
        raise ConfigError(f"n_traj must be >= 1, got {n_traj!r}")
    if threads < 1 or batch_size < 1:
        raise ConfigError("threads and batch_size must be >= 1")
    if decimate < 1 or grid.n_steps % decimate != 0:
        raise ConfigError(
            f"decimate must divide n_steps, got {decimate!r} for {grid.n_steps} steps")
    r0 = require_physical(initial_state)
    detectors = tuple(detectors)
    if not detectors:
        raise ConfigError("need at least one detector")
    n_det = len(detectors)
    det_consts = _detector_constants(detectors, grid.dt)
    seg_consts, seg_idx = _segment_table(segments, grid)

    n_dec = grid.n_steps // decimate
    out = np.empty((n_traj, n_det, n_dec))
    n_batches = (n_traj + batch_size - 1) // batch_size
    offsets = np.array([det.offset for det in detectors])
    responses = np.array([det.response for det in detectors])

    def run_batch(b: int):
        lo = b * batch_size
        hi = min(lo + batch_size, n_traj)
        noise = _batch_normals(plan, lo, hi, grid.n_steps, n_det)
        r0s = np.broadcast_to(r0, (hi - lo, 3))
        signals, ssum, ssq, _ = _simulate_batch(
            r0s, grid, det_consts, seg_consts, seg_idx, noise,
            record_states=False, norm_tol=norm_tol, traj_lo=lo)
        if decimate > 1:
            signals = signals.reshape(hi - lo, n_det, n_dec, decimate).mean(axis=3)
        out[lo:hi] = offsets[:, None] + responses[:, None] * signals
        return ssum, ssq

    if threads == 1:
        tallies = [run_batch(b) for b in range(n_batches)]
    else:
        with concurrent.futures.ThreadPoolExecutor(max_workers=threads) as pool:
            futures = [pool.submit(run_batch, b) for b in range(n_batches)]
            tallies = [f.result() for f in futures]

    state_sum = np.zeros((grid.n_steps + 1, 3))
    state_sumsq = np.zeros((grid.n_steps + 1, 3))
    for ssum, ssq in tallies:
        state_sum += ssum
        state_sumsq += ssq
    mean_states = state_sum / n_traj
    if n_traj > 1:
        var = (state_sumsq - n_traj * mean_states**2) / (n_traj - 1)
        sem_states = np.sqrt(np.maximum(var, 0.0) / n_traj)
    else:
        sem_states = None

    dec_grid = TimeGrid(t0=grid.t0, dt=grid.dt * decimate, n_steps=n_dec)
    return EnsembleArchive(grid=dec_grid, seed=plan.seed, signals=out,
                           kind="raw", config_digest=config_digest,
                           detectors=detectors, base_grid=grid,
                           mean_states=mean_states, sem_states=sem_states)
