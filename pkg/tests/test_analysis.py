import numpy as np
import pytest

from ntkfed import model
from ntkfed.analysis import (
    activation_flips,
    check_decay,
    fedavg_decay_monitor,
    kernel_spectrum,
    ntk_gd_gap,
)
from ntkfed.fed import Cohort, RoundConfig, RoundMetrics, run_round_fedavg, run_round_ntkfl
from ntkfed.ntk_engine import GlobalState, build_kernel
from ntkfed.rng import stream


def theory_state(n_hidden=256, n_samples=12, d1=8, seed=0, eta=None):
    rng = np.random.default_rng(seed)
    cfg = model.ModelConfig(d1=d1, hidden=n_hidden, variant="theory")
    w0 = model.init_weights(cfg, seed)
    X = rng.standard_normal((n_samples, d1))
    X /= np.linalg.norm(X, axis=1, keepdims=True)
    y = rng.choice([-1.0, 1.0], size=(n_samples, 1))
    state = GlobalState(J=model.batch_jacobian(w0, cfg, X), Y=y,
                        f0=model.forward(w0, cfg, X), eta=1.0,
                        provenance=tuple((0, i) for i in range(n_samples)))
    state.kernel = build_kernel(state.J)
    if eta is None:
        _, lam_max = kernel_spectrum(state.kernel)
        eta = n_samples / (2.0 * lam_max)
    state.eta = eta
    return cfg, w0, X, y, state


class TestKernelSpectrum:
    def test_identity(self):
        assert kernel_spectrum(np.eye(3)) == (1.0, 1.0)

    def test_diagonal(self):
        lo, hi = kernel_spectrum(np.diag([1.0, 2.0]))
        assert (lo, hi) == (1.0, 2.0)

    def test_iterative_matches_dense(self):
        rng = np.random.default_rng(1)
        a = rng.standard_normal((32, 32))
        k = a @ a.T / 32.0
        dense = kernel_spectrum(k)
        iterative = kernel_spectrum(k, force_iterative=True)
        assert iterative[0] == pytest.approx(dense[0], rel=1e-5, abs=1e-8)
        assert iterative[1] == pytest.approx(dense[1], rel=1e-6)

    def test_extremes_bracket_rayleigh_quotients(self):
        rng = np.random.default_rng(2)
        a = rng.standard_normal((20, 20))
        k = a @ a.T / 20.0
        lo, hi = kernel_spectrum(k)
        for _ in range(100):
            v = rng.standard_normal(20)
            q = v @ k @ v / (v @ v)
            assert lo - 1e-9 <= q <= hi + 1e-9

    def test_rejects_asymmetric(self):
        with pytest.raises(ValueError):
            kernel_spectrum(np.array([[0.0, 1.0], [0.0, 0.0]]))


class TestCheckDecay:
    def test_fixed_point_reports_zero_residual(self):
        _, _, _, _, state = theory_state(seed=3)
        state.Y = state.f0.copy()
        report = check_decay(state, 50)
        assert report.sq_residuals[0] == 0.0
        assert report.violations.size == 0

    def test_scalar_one_step_annihilation(self):
        state = GlobalState(J=np.ones((1, 1, 1)), Y=np.zeros((1, 1)), f0=np.ones((1, 1)),
                            eta=1.0, provenance=((0, 0),))
        state.kernel = np.array([[1.0]])
        report = check_decay(state, 5)
        assert report.sq_residuals[1] == 0.0
        assert report.violations.size == 0
        assert report.applicable

    def test_zero_violations_at_stable_step(self):
        _, _, _, _, state = theory_state(seed=4)
        report = check_decay(state, 500)
        assert report.applicable
        assert report.violations.size == 0
        # the per-round analytic envelope is looser than the strict one everywhere
        assert (report.envelope_strict <= report.envelope * (1 + 1e-12)).all()

    def test_inapplicable_marked_when_step_too_large(self):
        _, _, _, _, state = theory_state(seed=5)
        state.eta = 3.9 * state.n_samples / kernel_spectrum(state.kernel)[1] / 2.0
        report = check_decay(state, 10)
        assert not report.applicable

    def test_csv_export(self, tmp_path):
        _, _, _, _, state = theory_state(seed=6)
        report = check_decay(state, 20)
        out = tmp_path / "decay.csv"
        report.write_csv(out)
        lines = out.read_text().splitlines()
        assert lines[0] == "t,sq_residual,envelope,envelope_strict,violation"
        assert len(lines) == 22


class TestFedavgMonitor:
    def make_metrics(self, pairs):
        return [RoundMetrics(i, "fedavg", 1, 0.0, 0.0, 0, before, after)
                for i, (before, after) in enumerate(pairs)]

    def test_zero_residual_start_is_reported_undefined(self):
        rows = fedavg_decay_monitor(self.make_metrics([(0.0, 0.0)]), 0.1, 1, 0.5, 10, 2)
        assert rows[0].ratio is None
        assert rows[0].within is None

    def test_envelope_reduces_to_single_machine_form(self):
        rows = fedavg_decay_monitor(self.make_metrics([(1.0, 0.5)]), 0.2, 1, 0.3, 10, 1)
        assert rows[0].envelope == pytest.approx(1 - 0.2 * 0.3 / (2 * 10))

    def test_kernel_round_beats_fedavg_round_on_matched_configs(self):
        wins = 0
        trials = 20
        for seed in range(trials):
            cfg, w0, X, y, state = theory_state(n_hidden=512, n_samples=16, seed=100 + seed)
            eta = state.eta / 4.0
            quarters = [(X[i:i + 4], y[i:i + 4]) for i in range(0, 16, 4)]
            cohort = Cohort(list(range(4)), [q[0] for q in quarters], [q[1] for q in quarters])
            rcfg_ntk = RoundConfig(clients_total=4, clients_per_round=4, rounds=1,
                                   eta=eta, t_grid=(50, 100, 200))
            w_ntk, m_ntk, _ = run_round_ntkfl(w0, cfg, rcfg_ntk, cohort)
            rcfg_fed = RoundConfig(clients_total=4, clients_per_round=4, rounds=1,
                                   scheme="fedavg", tau=5, batch_size=100, fedavg_lr=eta)
            rngs = [stream(seed, "round", 0, "client", c, "batch-perm") for c in range(4)]
            w_fed, m_fed = run_round_fedavg(w0, cfg, rcfg_fed, cohort, rngs)
            ntk_red = m_ntk.residual_after / m_ntk.residual_before
            pred = model.forward(w_fed, cfg, X) - y
            fed_red = float(pred.ravel() @ pred.ravel()) / m_fed.residual_before
            if ntk_red <= fed_red:
                wins += 1
        assert wins >= 0.9 * trials


class TestNtkGdGap:
    def test_gap_zero_at_start_and_bounded(self):
        cfg, w0, X, y, state = theory_state(n_hidden=256, n_samples=10, seed=7)
        eta = state.eta / 25.0
        report = ntk_gd_gap(cfg, w0, X, y.ravel(), eta, (10, 20, 40, 80))
        assert report.t_grid[0] == 0
        assert report.gaps[0] == 0.0
        assert report.bounds[0] == 0.0
        assert (report.gaps <= report.bounds + 1e-12).all()

    def test_gap_grows_with_steps(self):
        cfg, w0, X, y, state = theory_state(n_hidden=256, n_samples=10, seed=8)
        eta = state.eta / 25.0
        report = ntk_gd_gap(cfg, w0, X, y.ravel(), eta, (20, 60, 120, 240))
        inner = report.gaps[1:]
        assert (np.diff(inner) >= -1e-12).all()
        assert inner[-1] > inner[0]

    def test_requires_theory_variant(self):
        cfg = model.ModelConfig(d1=4, hidden=8, d2=2)
        w = model.init_weights(cfg, 9)
        with pytest.raises(ValueError, match="theory"):
            ntk_gd_gap(cfg, w, np.eye(4), np.zeros(4), 0.1, (1,))

    def test_requires_unit_inputs(self):
        cfg = model.ModelConfig(d1=4, hidden=8, variant="theory")
        w = model.init_weights(cfg, 10)
        with pytest.raises(ValueError, match="unit"):
            ntk_gd_gap(cfg, w, 2.0 * np.eye(4), np.zeros(4), 0.1, (1,))

    def test_csv_export(self, tmp_path):
        cfg, w0, X, y, state = theory_state(seed=11)
        report = ntk_gd_gap(cfg, w0, X, y.ravel(), state.eta / 30.0, (5, 10))
        out = tmp_path / "gap.csv"
        report.write_csv(out)
        lines = out.read_text().splitlines()
        assert lines[0] == "t,gap_l1,bound"
        assert len(lines) == 4


class TestActivationFlips:
    def unit_rows(self, rng, n, d):
        X = rng.standard_normal((n, d))
        return X / np.linalg.norm(X, axis=1, keepdims=True)

    def test_no_movement_no_flips(self):
        cfg = model.ModelConfig(d1=6, hidden=32, variant="theory")
        w = model.init_weights(cfg, 12)
        X = self.unit_rows(np.random.default_rng(12), 9, 6)
        report = activation_flips(w, w, cfg, X, r_ball=0.1)
        assert not report.counts.any()

    def test_forced_single_neuron_flip(self):
        cfg = model.ModelConfig(d1=2, hidden=1, variant="theory")
        w_ref = model.ModelWeights(np.array([0.05, 0.0]), cfg.layout(),
                                   fixed_out=np.array([1.0]))
        w_new = model.ModelWeights(np.array([-0.05, 0.0]), cfg.layout(),
                                   fixed_out=np.array([1.0]))
        report = activation_flips(w_ref, w_new, cfg, np.array([[1.0, 0.0]]), r_ball=0.2)
        assert report.counts.tolist() == [1]

    def test_ball_violation_rejected(self):
        cfg = model.ModelConfig(d1=3, hidden=4, variant="theory")
        w_ref = model.init_weights(cfg, 13)
        w_new = w_ref.copy()
        w_new.w += 1.0
        with pytest.raises(ValueError, match="ball"):
            activation_flips(w_ref, w_new, cfg, np.eye(3), r_ball=1e-3)

    def test_monte_carlo_bound(self):
        # perturbations inside an R = 0.01 ball around a 4096-neuron net
        cfg = model.ModelConfig(d1=16, hidden=4096, variant="theory")
        w_ref = model.init_weights(cfg, 14)
        X = self.unit_rows(np.random.default_rng(14), 16, 16)
        r_ball = 0.01
        within = 0
        trials = 100
        for s in range(trials):
            rng = np.random.default_rng(1000 + s)
            delta = rng.standard_normal((cfg.hidden, cfg.d1))
            delta *= r_ball / np.linalg.norm(delta, axis=1, keepdims=True)
            delta *= rng.uniform(0.0, 1.0, size=(cfg.hidden, 1))
            w_new = model.ModelWeights(w_ref.w + delta.reshape(-1), cfg.layout(),
                                       w_ref.fixed_out)
            report = activation_flips(w_ref, w_new, cfg, X, r_ball=r_ball)
            if report.max_count <= report.bound:
                within += 1
        assert within >= 95
