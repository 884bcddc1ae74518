"""Stochastic trajectory engine: noise plan, stepper, ensembles, archives."""

import math

import numpy as np
import pytest

from cqmcorr import (
    ConfigError,
    DetectorModel,
    DiagnosticError,
    EnsembleArchive,
    NoisePlan,
    TimeGrid,
    dephasing_matrix,
    EnsembleGenerator,
    rabi_dephasing_generator,
    run_ensemble,
    simulate_trajectory,
    step_ito,
    synthesize_raw,
)

GAMMA = 1.0 / 1.8
OMEGA = 2.0 * math.pi


def reference_detector(phi_a_deg=0.0, **kwargs):
    return DetectorModel.from_quadrature_angle((0, 0, 1), tau_min=2.04,
                                               phi_a_deg=phi_a_deg, eta=0.44, **kwargs)


def drive_segments():
    return (rabi_dephasing_generator(GAMMA, OMEGA),)


class TestNoisePlan:
    def test_pure_function_of_seed_and_trajectory(self):
        plan = NoisePlan(seed=42)
        a = plan.normals(7, 100, 2)
        b = plan.normals(7, 100, 2)
        np.testing.assert_array_equal(a, b)
        c = NoisePlan(seed=42).normals(7, 100, 2)
        np.testing.assert_array_equal(a, c)

    def test_distinct_streams(self):
        plan = NoisePlan(seed=42)
        assert not np.array_equal(plan.normals(0, 50, 1), plan.normals(1, 50, 1))
        assert not np.array_equal(plan.normals(0, 50, 1), NoisePlan(43).normals(0, 50, 1))

    def test_shape_and_moments(self):
        draws = NoisePlan(seed=3).normals(0, 4000, 2)
        assert draws.shape == (4000, 2)
        assert abs(draws.mean()) < 0.05
        assert abs(draws.std() - 1.0) < 0.05

    def test_prefix_stability(self):
        """A longer record extends the stream without changing its start."""
        plan = NoisePlan(seed=9)
        short = plan.normals(0, 60, 2)
        long = plan.normals(0, 100, 2)
        np.testing.assert_array_equal(long[:60], short)


class TestStepIto:
    def test_matches_hand_formula(self):
        det = reference_detector(70.0)
        gen = drive_segments()[0]
        r = np.array([0.3, -0.2, 0.4])
        dt = 0.001
        w = 0.7
        state, signals = step_ito(r, [det], gen, dt, [w])

        n = det.axis
        drift = gen.matrix @ (r - gen.r_st) * dt
        kick = ((n - (n @ r) * r) + det.k_phase * np.cross(n, r)) * w * math.sqrt(dt / det.tau_m)
        np.testing.assert_allclose(state, r + drift + kick, atol=1e-15)
        assert signals[0] == pytest.approx((n @ r) + math.sqrt(det.tau_m / dt) * w,
                                           abs=1e-12)

    def test_two_detector_step(self):
        det_z = DetectorModel(axis=(0, 0, 1), tau_m=1.0, k_phase=2.0)
        det_x = DetectorModel(axis=(1, 0, 0), tau_m=1.0)
        matrix = (dephasing_matrix(det_z.axis, det_z.gamma_m)
                  + dephasing_matrix(det_x.axis, det_x.gamma_m))
        gen = EnsembleGenerator(matrix=matrix, r_st=np.zeros(3))
        r = np.array([0.0, -1.0, 0.0])
        dt = 4e-4
        w = np.array([0.3, -1.1])
        state, signals = step_ito(r, [det_z, det_x], gen, dt, w)

        drift = matrix @ r * dt
        kick = np.zeros(3)
        for det, wi in zip((det_z, det_x), w):
            n = det.axis
            kick += ((n - (n @ r) * r) + det.k_phase * np.cross(n, r)) * wi * math.sqrt(dt / det.tau_m)
        np.testing.assert_allclose(state, r + drift + kick, atol=1e-15)
        assert signals.shape == (2,)

    def test_signal_uses_pre_step_state(self):
        det = reference_detector(0.0)
        gen = drive_segments()[0]
        r = np.array([0.0, 0.0, 1.0])
        _, signals = step_ito(r, [det], gen, 0.01, [0.0])
        assert signals[0] == 1.0

    def test_validation(self):
        det = reference_detector()
        gen = drive_segments()[0]
        with pytest.raises(ConfigError):
            step_ito([0, 0, 1], [det], gen, 0.0, [0.1])
        with pytest.raises(ConfigError):
            step_ito([0, 0, 1], [det], gen, 0.01, [0.1, 0.2])
        with pytest.raises(ConfigError):
            step_ito([0, 0, 1.2], [det], gen, 0.01, [0.1])


class TestTrajectory:
    def test_replaying_steps_reproduces_trajectory(self):
        det = reference_detector(40.0)
        grid = TimeGrid(0.0, 0.004, 25)
        plan = NoisePlan(seed=17)
        rec = simulate_trajectory([1, 0, 0], grid, [det], drive_segments(), plan,
                                  traj_index=5)
        draws = plan.normals(5, grid.n_steps, 1)
        r = np.array([1.0, 0.0, 0.0])
        for k in range(grid.n_steps):
            r, sig = step_ito(r, [det], drive_segments()[0], grid.dt, draws[k])
            np.testing.assert_array_equal(r, rec.states[k + 1])
            np.testing.assert_array_equal(sig, rec.signals[:, k])

    def test_states_start_at_preparation(self):
        det = reference_detector()
        grid = TimeGrid(0.0, 0.004, 10)
        rec = simulate_trajectory([0, 1, 0], grid, [det], drive_segments(), NoisePlan(1))
        np.testing.assert_array_equal(rec.states[0], [0, 1, 0])
        assert rec.states.shape == (11, 3)
        assert rec.signals.shape == (1, 10)

    def test_norm_guard_trips_on_coarse_step(self):
        det = reference_detector(70.0)
        grid = TimeGrid(0.0, 0.02, 400)  # kick std ~ 0.1 per step: must trip
        with pytest.raises(DiagnosticError, match="trajectory"):
            simulate_trajectory([0, 0, 1], grid, [det], drive_segments(), NoisePlan(2))


class TestRunEnsemble:
    def small_args(self, **over):
        args = dict(n_traj=64, plan=NoisePlan(seed=11), initial_state=[1, 0, 0],
                    grid=TimeGrid(0.0, 0.004, 40), detectors=(reference_detector(40.0),),
                    segments=drive_segments())
        args.update(over)
        return args

    def test_matches_single_trajectory_engine(self):
        args = self.small_args()
        arch = run_ensemble(**args)
        for j in (0, 13, 63):
            rec = simulate_trajectory(args["initial_state"], args["grid"],
                                      args["detectors"], args["segments"],
                                      args["plan"], traj_index=j)
            np.testing.assert_array_equal(arch.signals[j], rec.signals)

    def test_batch_size_invariance(self):
        a = run_ensemble(**self.small_args(), batch_size=7)
        b = run_ensemble(**self.small_args(), batch_size=64)
        np.testing.assert_array_equal(a.signals, b.signals)
        # state tallies are summed per batch, so only the reduction tree moves
        np.testing.assert_allclose(a.mean_states, b.mean_states, rtol=1e-12, atol=1e-15)

    def test_thread_invariance_bitwise(self):
        a = run_ensemble(**self.small_args(), threads=1, batch_size=16)
        b = run_ensemble(**self.small_args(), threads=4, batch_size=16)
        assert a.digest() == b.digest()
        np.testing.assert_array_equal(a.mean_states, b.mean_states)
        np.testing.assert_array_equal(a.sem_states, b.sem_states)

    def test_efficiency_never_touches_trajectories(self):
        """eta enters the ensemble generator, not the stepper: with the
        generator held fixed, records are bit-identical across eta."""
        base = self.small_args()
        lo = run_ensemble(**{**base, "detectors": (reference_detector(40.0),)})
        det_hi = DetectorModel(axis=(0, 0, 1), tau_m=lo.detectors[0].tau_m
                               if lo.detectors else reference_detector(40.0).tau_m,
                               k_phase=reference_detector(40.0).k_phase, eta=1.0)
        hi = run_ensemble(**{**base, "detectors": (det_hi,)})
        np.testing.assert_array_equal(lo.signals, hi.signals)

    def test_decimation_averages_fine_samples(self):
        fine = run_ensemble(**self.small_args())
        coarse = run_ensemble(**self.small_args(), decimate=4)
        want = fine.signals.reshape(64, 1, 10, 4).mean(axis=3)
        np.testing.assert_array_equal(coarse.signals, want)
        assert coarse.grid.dt == pytest.approx(0.016)
        assert coarse.grid.n_steps == 10
        assert coarse.base_grid.n_steps == 40

    def test_decimate_must_divide(self):
        with pytest.raises(ConfigError):
            run_ensemble(**self.small_args(), decimate=7)

    def test_raw_units_applied_after_decimation(self):
        det = reference_detector(40.0, response=0.33, offset=-0.4)
        raw = run_ensemble(**self.small_args(detectors=(det,)), decimate=4)
        norm = run_ensemble(**self.small_args(), decimate=4)
        np.testing.assert_array_equal(raw.signals, -0.4 + 0.33 * norm.signals)

    def test_mean_state_statistics_shapes(self):
        arch = run_ensemble(**self.small_args())
        assert arch.mean_states.shape == (41, 3)
        assert arch.sem_states.shape == (41, 3)
        np.testing.assert_array_equal(arch.mean_states[0], [1, 0, 0])
        assert np.all(arch.sem_states[0] == 0.0)
        assert np.all(arch.sem_states[1:].ravel()[
            np.abs(arch.mean_states[1:]).ravel() > 0] >= 0.0)

    def test_validation(self):
        with pytest.raises(ConfigError):
            run_ensemble(**self.small_args(n_traj=0))
        with pytest.raises(ConfigError):
            run_ensemble(**self.small_args(detectors=()))


def test_synthesize_raw_affine_map():
    det = DetectorModel(axis=(0, 0, 1), tau_m=1.0, response=2.0, offset=-0.4)
    sig = np.array([0.0, 1.0, -1.0])
    np.testing.assert_array_equal(synthesize_raw(sig, det), [-0.4, 1.6, -2.4])


class TestArchiveSerialization:
    def build(self, tmp_path):
        arch = run_ensemble(n_traj=9, plan=NoisePlan(seed=5), initial_state=[0, 0, 1],
                            grid=TimeGrid(0.0, 0.01, 12),
                            detectors=(reference_detector(0.0, response=1.005, offset=-0.4),),
                            segments=(EnsembleGenerator(
                                matrix=dephasing_matrix((0, 0, 1), GAMMA), r_st=np.zeros(3)),),
                            decimate=3, config_digest="abc123")
        path = tmp_path / "run.cqm"
        arch.save(path)
        return arch, path

    def test_round_trip(self, tmp_path):
        arch, path = self.build(tmp_path)
        back = EnsembleArchive.load(path)
        np.testing.assert_array_equal(back.signals, arch.signals)
        assert back.seed == 5
        assert back.kind == arch.kind
        assert back.config_digest == "abc123"
        assert back.grid.dt == pytest.approx(0.03)
        assert back.n_traj == 9 and back.n_detectors == 1 and back.n_samples == 4

    def test_digest_matches_file_hash(self, tmp_path):
        import hashlib

        arch, path = self.build(tmp_path)
        assert arch.digest() == hashlib.sha256(path.read_bytes()).hexdigest()
        # loaded archives serialize to the same bytes
        assert EnsembleArchive.load(path).digest() == arch.digest()

    def test_rejects_truncation_and_wrong_magic(self, tmp_path):
        arch, path = self.build(tmp_path)
        blob = path.read_bytes()
        bad = tmp_path / "bad.cqm"
        bad.write_bytes(blob[:-5])
        with pytest.raises(ConfigError, match="truncated"):
            EnsembleArchive.load(bad)
        bad.write_bytes(b"NOTMAGIC" + blob[8:])
        with pytest.raises(ConfigError, match="not an ensemble archive"):
            EnsembleArchive.load(bad)
