import numpy as np
import pytest
import scipy.sparse as sparse

from esnlyap.lyapunov import (AuxiliaryResult, LyapunovSpectrum,
                              _autonomous_jacobian_ops, _driven_jacobian_ops,
                              auxiliary_convergence, benettin, cle_spectrum,
                              cle_spectrum_selfdriven, kaplan_yorke,
                              rc_spectrum)
from esnlyap.reservoir import (FeatureMap, Reservoir, ReservoirParams,
                               build_reservoir, drive, driven_step,
                               feature_map_jacobian)
from esnlyap.systems import Trajectory
from esnlyap.training import Readout


def constant_map(M, n):
    for _ in range(n):
        yield M


def linear_reservoir(alpha, n=30, input_dim=2):
    params = ReservoirParams(n, input_dim, max(alpha, 1e-6), 0.1)
    return Reservoir(A=sparse.csr_matrix(alpha * np.eye(n)),
                     W_in=np.zeros((n, input_dim)), b=np.zeros(n),
                     params=params)


class TestBenettin:
    def test_constant_diagonal_map_is_exact(self):
        M = np.diag([2.0, 0.5])
        lam = benettin(constant_map(M, 400), k=2, tau=1.0, transient_steps=0)
        np.testing.assert_allclose(lam.exponents, [np.log(2.0), -np.log(2.0)],
                                   rtol=1e-12)
        assert lam.n_steps == 400

    def test_rotation_has_zero_exponents(self):
        th = 0.7
        M = np.array([[np.cos(th), -np.sin(th)], [np.sin(th), np.cos(th)]])
        lam = benettin(constant_map(M, 500), k=2, tau=1.0, transient_steps=0)
        np.testing.assert_allclose(lam.exponents, [0.0, 0.0], atol=1e-12)

    def test_random_constant_matrix_matches_eigenvalues(self):
        # seed chosen so the eigenvalue magnitudes are distinct; equal-modulus
        # complex pairs only converge pairwise
        rng = np.random.default_rng(23)
        M = rng.normal(size=(4, 4))
        expected = np.sort(np.log(np.abs(np.linalg.eigvals(M))))[::-1]
        lam = benettin(constant_map(M, 10500), k=4, tau=1.0,
                       transient_steps=500)
        np.testing.assert_allclose(lam.exponents, expected, atol=1e-6)

    def test_reorth_interval_invariance(self):
        diag = np.diag([1.5, 0.9, 0.2])
        rng = np.random.default_rng(11)
        rand = rng.normal(size=(3, 3))
        for M, tol in ((diag, 1e-12), (rand, 2e-4)):
            results = [benettin(constant_map(M, 20000), k=3,
                                reorth_every=reorth, tau=1.0,
                                transient_steps=500).exponents
                       for reorth in (1, 5, 10)]
            for other in results[1:]:
                np.testing.assert_allclose(results[0], other, atol=tol)

    def test_chunked_and_per_step_sources_agree(self):
        rng = np.random.default_rng(3)
        seq = rng.normal(size=(800, 3, 3)) * 0.8 + np.eye(3)
        lam_steps = benettin(iter(seq), k=3, tau=0.1, transient_steps=100)
        lam_chunks = benettin((seq[i:i + 128] for i in range(0, 800, 128)),
                              k=3, tau=0.1, transient_steps=100)
        np.testing.assert_allclose(lam_steps.exponents, lam_chunks.exponents,
                                   rtol=1e-9, atol=1e-10)
        assert lam_steps.n_steps == lam_chunks.n_steps

    def test_tau_scaling(self):
        M = np.diag([2.0, 0.5])
        lam = benettin(constant_map(M, 300), k=2, tau=0.25, transient_steps=0)
        assert lam.exponents[0] == pytest.approx(np.log(2.0) / 0.25)

    def test_rank_collapse_marks_lower_exponents(self):
        M = np.diag([2.0, 0.0, 0.0])
        lam = benettin(constant_map(M, 100), k=3, tau=1.0, transient_steps=0)
        assert lam.exponents[0] == pytest.approx(np.log(2.0))
        assert np.isneginf(lam.exponents[1:]).all()
        assert lam.n_collapsed == 2

    def test_empty_sequence_rejected(self):
        with pytest.raises(ValueError):
            benettin(iter([]), k=2)

    def test_too_short_for_transient_rejected(self):
        with pytest.raises(ValueError):
            benettin(constant_map(np.eye(2), 100), k=2, transient_steps=200)

    def test_k_larger_than_dimension_rejected(self):
        with pytest.raises(ValueError):
            benettin(constant_map(np.eye(2), 10), k=3, transient_steps=0)


class TestSpectrumType:
    def test_sorted_validation(self):
        with pytest.raises(ValueError):
            LyapunovSpectrum(np.array([0.0, 1.0]), 10, 0.1, "true")

    def test_neg_inf_tail_is_legal(self):
        lam = LyapunovSpectrum(np.array([0.5, -np.inf]), 10, 0.1, "cle",
                               n_collapsed=1)
        assert lam.max_exponent == pytest.approx(0.5)


class TestKaplanYorke:
    def _spec(self, values):
        return LyapunovSpectrum(np.asarray(values, dtype=float), 100, 1.0, "true")

    def test_lorenz_values(self):
        ky = kaplan_yorke(self._spec([0.91, 0.0, -14.6]))
        assert ky.j_index == 2
        assert ky.dimension == pytest.approx(2.0 + 0.91 / 14.6)

    def test_all_negative_gives_zero(self):
        ky = kaplan_yorke(self._spec([-1.0, -2.0]))
        assert ky.dimension == 0.0
        assert ky.j_index == 0

    def test_direct_formula(self):
        ky = kaplan_yorke(self._spec([0.5, -1.0]))
        assert ky.dimension == pytest.approx(1.5)
        assert ky.j_index == 1

    def test_saturation_flag(self):
        ky = kaplan_yorke(self._spec([0.5, 0.4]))
        assert ky.saturated
        assert ky.dimension == 2.0

    def test_invariant_under_appending_lower_exponents(self):
        base = kaplan_yorke(self._spec([0.91, 0.0, -14.6]))
        extended = kaplan_yorke(self._spec([0.91, 0.0, -14.6, -20.0, -31.0]))
        assert extended.dimension == pytest.approx(base.dimension)
        assert extended.j_index == base.j_index

    def test_neg_inf_tail(self):
        ky = kaplan_yorke(self._spec([0.3, -np.inf]))
        assert ky.dimension == pytest.approx(1.0)

    def test_fractional_part_in_unit_interval(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            lams = np.sort(rng.normal(size=rng.integers(1, 6)))[::-1]
            ky = kaplan_yorke(self._spec(lams))
            frac = ky.dimension - ky.j_index
            if not ky.saturated:
                assert 0.0 <= frac < 1.0


class TestCleSpectrum:
    def test_zero_matrix_collapses_to_sentinel(self):
        res = build_reservoir(ReservoirParams(40, 3, 0.0, 0.2, 6.0, seed=1))
        traj = Trajectory(np.zeros((800, 3)), tau=0.1)
        lam = cle_spectrum(res, traj, k=5, discard=10, transient_steps=0)
        assert np.isneginf(lam.exponents).all()
        assert lam.n_collapsed == 5
        assert lam.kind == "cle"

    def test_linear_reservoir_rate(self):
        alpha, tau = 0.8, 0.5
        res = linear_reservoir(alpha)
        traj = Trajectory(np.zeros((2000, 2)), tau=tau)
        lam = cle_spectrum(res, traj, k=3, discard=5, transient_steps=0)
        assert abs(lam.max_exponent - np.log(alpha) / tau) < 0.01 * abs(np.log(alpha) / tau)

    def test_compiled_plan_matches_generic_engine(self):
        res = build_reservoir(ReservoirParams(50, 3, 0.6, 0.4, 6.0, seed=2))
        rng = np.random.default_rng(8)
        inputs = rng.normal(size=(600, 3))
        traj = Trajectory(inputs, tau=0.05)
        lam = cle_spectrum(res, traj, k=6, discard=20, transient_steps=50)
        # replay the same drive by hand through the generic operator path
        r = np.zeros(50)
        for i in range(20):
            r = driven_step(res, r, inputs[i])
        ref = benettin(_driven_jacobian_ops(res, inputs[20:], r), k=6,
                       tau=0.05, transient_steps=50, kind="cle")
        np.testing.assert_allclose(lam.exponents, ref.exponents,
                                   rtol=1e-8, atol=1e-10)

    def test_discard_longer_than_input_rejected(self):
        res = linear_reservoir(0.5)
        traj = Trajectory(np.zeros((50, 2)), tau=0.1)
        with pytest.raises(ValueError):
            cle_spectrum(res, traj, k=2, discard=50)

    def test_growth_bound_by_largest_singular_value(self):
        # per-step tangent growth cannot beat sigma_max(A) since sech^2 <= 1
        res = build_reservoir(ReservoirParams(60, 3, 0.9, 0.3, 6.0, seed=4))
        rng = np.random.default_rng(9)
        traj = Trajectory(rng.normal(size=(1500, 3)) * 2, tau=0.02)
        lam = cle_spectrum(res, traj, k=4, discard=50, transient_steps=100)
        smax = np.linalg.svd(res.A.toarray(), compute_uv=False)[0]
        assert lam.max_exponent <= np.log(smax) / 0.02 + 1e-9


class TestRcSpectrum:
    def _trained_stub(self, n=40, seed=3, w_scale=0.02):
        res = build_reservoir(ReservoirParams(n, 3, 0.5, 0.3, 6.0, seed=seed))
        fm = FeatureMap("stacked", n)
        rng = np.random.default_rng(seed)
        W_out = rng.normal(size=(3, fm.n_features)) * w_scale
        return res, Readout(W_out, fm)

    def test_zero_readout_equals_zero_input_cle(self):
        res, _ = self._trained_stub()
        fm = FeatureMap("stacked", res.n_nodes)
        readout = Readout(np.zeros((3, fm.n_features)), fm)
        lam_rc = rc_spectrum(res, readout, 900, k=5, tau=0.1,
                             transient_steps=100)
        traj = Trajectory(np.zeros((900, 3)), tau=0.1)
        lam_cle = cle_spectrum(res, traj, k=5, discard=0, transient_steps=100)
        np.testing.assert_allclose(lam_rc.exponents, lam_cle.exponents,
                                   rtol=1e-10)
        assert lam_rc.kind == "rc"

    @pytest.mark.parametrize("fm_kind", ["identity", "squared_half", "stacked"])
    def test_jacobian_matches_finite_differences(self, fm_kind):
        from esnlyap.lyapunov import _RcJacobian, _sech2
        from esnlyap.reservoir import autonomous_step

        n = 25
        res = build_reservoir(ReservoirParams(n, 3, 0.7, 0.4, 6.0, seed=6))
        fm = FeatureMap(fm_kind, n)
        rng = np.random.default_rng(10)
        readout = Readout(rng.normal(size=(3, fm.n_features)) * 0.1, fm)
        r = rng.uniform(-0.6, 0.6, n)
        from esnlyap.training import predict
        u = res.A @ r + res.W_in @ predict(readout, r) + res.b
        jac = _RcJacobian(_sech2(u), res, readout, r) @ np.eye(n)
        h = 1e-6
        fd = np.empty((n, n))
        for j in range(n):
            dr = np.zeros(n)
            dr[j] = h
            plus, _ = autonomous_step(res, readout, r + dr)
            minus, _ = autonomous_step(res, readout, r - dr)
            fd[:, j] = (plus - minus) / (2 * h)
        denom = np.max(np.abs(jac))
        assert np.max(np.abs(jac - fd)) / denom < 1e-5

    def test_compiled_plan_matches_generic_engine(self):
        res, readout = self._trained_stub(seed=12)
        rng = np.random.default_rng(2)
        r0 = rng.uniform(-0.4, 0.4, res.n_nodes)
        lam = rc_spectrum(res, readout, 700, k=5, tau=0.05, r0=r0,
                          transient_steps=80)
        ref = benettin(_autonomous_jacobian_ops(res, readout, r0, 700),
                       k=5, tau=0.05, transient_steps=80, kind="rc")
        np.testing.assert_allclose(lam.exponents, ref.exponents,
                                   rtol=1e-8, atol=1e-10)

    def test_divergence_error_names_step(self):
        from esnlyap.reservoir import RolloutDivergenceError

        res, _ = self._trained_stub()
        fm = FeatureMap("identity", res.n_nodes)
        readout = Readout(np.full((3, res.n_nodes), 1e5), fm)
        with pytest.raises(RolloutDivergenceError) as err:
            rc_spectrum(res, readout, 100, k=3, tau=0.1,
                        r0=np.full(res.n_nodes, 0.5), transient_steps=0,
                        divergence_threshold=1e4)
        assert err.value.step is not None


class TestSelfdrivenCle:
    def test_zero_length_rollout_rejected(self):
        res = linear_reservoir(0.5)
        fm = FeatureMap("identity", res.n_nodes)
        readout = Readout(np.zeros((2, res.n_nodes)), fm)
        with pytest.raises(ValueError):
            cle_spectrum_selfdriven(res, readout, np.empty((0, res.n_nodes)),
                                    k=2, tau=0.1)

    def test_zero_matrix_sentinel(self):
        res = build_reservoir(ReservoirParams(30, 2, 0.0, 0.2, 6.0, seed=1))
        fm = FeatureMap("identity", 30)
        readout = Readout(np.zeros((2, 30)), fm)
        states = np.random.default_rng(0).uniform(-0.5, 0.5, (400, 30))
        lam = cle_spectrum_selfdriven(res, readout, states, k=3, tau=0.1,
                                      transient_steps=0)
        assert np.isneginf(lam.exponents).all()

    def test_matches_cle_when_feedback_replays_input(self):
        # feed the rollout states of a zero-readout reservoir back: the
        # self-driven estimate must equal the zero-input CLE spectrum
        res = build_reservoir(ReservoirParams(35, 2, 0.6, 0.2, 6.0, seed=9))
        fm = FeatureMap("identity", 35)
        readout = Readout(np.zeros((2, 35)), fm)
        r = np.random.default_rng(1).uniform(-0.3, 0.3, 35)
        states = []
        for _ in range(700):
            states.append(r.copy())
            r = np.tanh(res.A @ r + res.b)
        lam_self = cle_spectrum_selfdriven(res, readout, np.array(states),
                                           k=4, tau=0.1, transient_steps=50)
        traj = Trajectory(np.zeros((700, 2)), tau=0.1)
        lam_cle = cle_spectrum(res, traj, k=4, discard=0, transient_steps=50,
                               r0=states[0])
        np.testing.assert_allclose(lam_self.exponents, lam_cle.exponents,
                                   rtol=1e-8)


class TestAuxiliaryConvergence:
    def test_identical_initial_conditions_degenerate(self):
        res = linear_reservoir(0.7)
        traj = Trajectory(np.zeros((200, 2)), tau=0.1)
        r0 = np.full(res.n_nodes, 0.1)
        out = auxiliary_convergence(res, traj, r0, r0.copy())
        assert isinstance(out, AuxiliaryResult)
        assert out.degenerate

    def test_linear_regime_slope(self):
        alpha, tau = 0.8, 0.5
        res = linear_reservoir(alpha)
        traj = Trajectory(np.zeros((200, 2)), tau=tau)
        rng = np.random.default_rng(4)
        r0a = rng.uniform(-1e-3, 1e-3, res.n_nodes)
        r0b = rng.uniform(-1e-3, 1e-3, res.n_nodes)
        out = auxiliary_convergence(res, traj, r0a, r0b)
        expected = np.log(alpha) / tau
        assert out.synchronized
        assert abs(out.slope - expected) < 0.1 * abs(expected)

    def test_no_synchronization_flagged(self):
        # expanding linear response: distance grows, no GS
        res = linear_reservoir(1.6)
        traj = Trajectory(np.zeros((300, 2)), tau=0.1)
        rng = np.random.default_rng(5)
        out = auxiliary_convergence(res, traj,
                                    rng.uniform(-1e-8, 1e-8, res.n_nodes),
                                    rng.uniform(-1e-8, 1e-8, res.n_nodes))
        assert not out.synchronized
        assert out.slope > 0
