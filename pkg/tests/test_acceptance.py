"""Acceptance suite: one test per criterion, printed as PASS/FAIL lines.

The desk-scale federated runs (criteria 9, 10, 12) share a session-scoped
fixture that drives the CLI on the canonical experiment config; everything
else runs on small seeded problems at the tolerances fixed below.  Run with
``pytest tests/test_acceptance.py -s`` to see the per-criterion lines.
"""

import csv
import json
import time

import numpy as np
import pytest

from ntkfed import analysis, cli, cp, data, driver, fed, model, ntk_engine
from ntkfed.config import config_from_dict
from ntkfed.linalg import sym_eig
from ntkfed.rng import stream

SEED = 20260809

DESK_CONFIG = {
    "seed": SEED,
    "dataset": {"kind": "synthetic", "n_train": 6000, "n_test": 1500,
                "input_dim": 128, "classes": 10, "center_scale": 3.0, "spread": 0.6,
                "normalize": True},
    "model": {"hidden": 32},
    "rounds": {"scheme": "ntkfl", "clients_total": 50, "clients_per_round": 10,
               "rounds": 40, "alpha": 0.5, "eta": 0.3,
               "t_grid": list(range(200, 2001, 200)), "tau": 10, "batch_size": 200,
               "fedavg_lr": 0.7},
    "cp": {"beta": 0.4, "proj_dim": 100, "sparsity": 0.5},
}

CP_ETA = 0.008
CP_T_GRID = list(range(600, 6001, 600))
FEDAVG_TAU_GRID = (5, 10, 20)
TARGET_ACC = 0.75


def report(num: int, ok: bool, detail: str, elapsed: float, budget: float):
    status = "PASS" if ok and elapsed < budget else "FAIL"
    print(f"ACCEPTANCE {num:2d} {status}: {detail}  [{elapsed:.1f}s / budget {budget:.0f}s]")
    assert ok, f"criterion {num}: {detail}"
    assert elapsed < budget, f"criterion {num} exceeded its runtime budget: {elapsed:.1f}s"


def random_model(rng):
    variant = "theory" if rng.integers(0, 2) == 0 else "experiment"
    d2 = 1 if variant == "theory" else int(rng.integers(1, 5))
    return model.ModelConfig(d1=int(rng.integers(2, 9)), hidden=int(rng.integers(2, 13)),
                             d2=d2, variant=variant)


def test_criterion_1_jacobian_correctness():
    started = time.perf_counter()
    rng = np.random.default_rng(SEED)
    h = 1e-5
    worst_jac = worst_grad = 0.0
    for trial in range(20):
        cfg = random_model(rng)
        w = model.init_weights(cfg, int(rng.integers(0, 2**31)))
        x = rng.standard_normal(cfg.d1)
        jac = model.per_sample_jacobian(w, cfg, x)
        for k in range(cfg.weight_dim):
            wp, wm = w.copy(), w.copy()
            wp.w[k] += h
            wm.w[k] -= h
            col = (model.forward_one(wp, cfg, x) - model.forward_one(wm, cfg, x)) / (2 * h)
            denom = np.maximum(np.abs(col), 1e-3)
            worst_jac = max(worst_jac, float((np.abs(jac[:, k] - col) / denom).max()))
        batch = model.Batch(rng.standard_normal((4, cfg.d1)), rng.standard_normal((4, cfg.d2)))
        grad = model.batch_gradient(w, cfg, batch)
        for k in range(cfg.weight_dim):
            wp, wm = w.copy(), w.copy()
            wp.w[k] += h
            wm.w[k] -= h
            ref = (model.loss(model.forward(wp, cfg, batch.X), batch.Y)
                   - model.loss(model.forward(wm, cfg, batch.X), batch.Y)) / (2 * h)
            worst_grad = max(worst_grad, abs(float(grad[k]) - ref) / max(abs(ref), 1e-3))
    ok = worst_jac < 1e-5 and worst_grad < 1e-5
    report(1, ok, f"finite-difference errors: jacobian {worst_jac:.2e}, gradient {worst_grad:.2e}",
           time.perf_counter() - started, 10.0)


def test_criterion_2_kernel_properties():
    started = time.perf_counter()
    rng = np.random.default_rng(SEED + 1)
    ok = True
    detail = "symmetry exact, PSD within bound, permutation equivariance exact"
    for trial in range(50):
        n = int(rng.integers(2, 65))
        d2 = int(rng.integers(1, 5))
        d = int(rng.integers(2, 40))
        J = rng.standard_normal((n, d2, d))
        kernel = ntk_engine.build_kernel(J)
        if float(np.abs(kernel - kernel.T).max()) > 1e-12:
            ok, detail = False, f"trial {trial}: asymmetric kernel"
            break
        vals, _ = sym_eig(kernel)
        if vals[0] < -1e-8 * np.trace(kernel) / n:
            ok, detail = False, f"trial {trial}: lambda_min {vals[0]:.2e} too negative"
            break
        p = rng.permutation(n)
        if not np.array_equal(ntk_engine.build_kernel(J[p]), kernel[np.ix_(p, p)]):
            ok, detail = False, f"trial {trial}: permutation equivariance violated"
            break
    report(2, ok, detail, time.perf_counter() - started, 30.0)


def make_theory_state(n_hidden, n_samples, d1, seed, eta_scale=0.5):
    rng = np.random.default_rng(seed)
    cfg = model.ModelConfig(d1=d1, hidden=n_hidden, variant="theory")
    w0 = model.init_weights(cfg, seed)
    X = rng.standard_normal((n_samples, d1))
    X /= np.linalg.norm(X, axis=1, keepdims=True)
    y = rng.choice([-1.0, 1.0], size=(n_samples, 1))
    state = ntk_engine.GlobalState(
        J=model.batch_jacobian(w0, cfg, X), Y=y, f0=model.forward(w0, cfg, X),
        eta=1.0, provenance=tuple((0, i) for i in range(n_samples)))
    state.kernel = ntk_engine.build_kernel(state.J)
    lam_min, lam_max = analysis.kernel_spectrum(state.kernel)
    state.eta = eta_scale * n_samples / lam_max
    return cfg, w0, X, y, state, lam_min, lam_max


def test_criterion_3_evolution_equivalence():
    started = time.perf_counter()
    worst_gd = worst_eig = 0.0
    for seed in (SEED + 2, SEED + 3):
        cfg, w0, X, y, state, _, _ = make_theory_state(512, 16, 12, seed)
        n, d2, d = state.J.shape
        j2 = state.J.reshape(n * d2, d)
        vals, vecs = sym_eig(state.kernel)
        for t in (1, 10, 100):
            trace = ntk_engine.evolve_function(state, t, record_at=[t])
            w_t = ntk_engine.evolve_weights(state, trace.residual_at(t), w0)
            w = w0.w.copy()
            for _ in range(t):
                f_lin = state.f0 + (j2 @ (w - w0.w)).reshape(n, d2)
                w = w - state.eta * (j2.T @ (f_lin - state.Y).ravel()) / (n * d2)
            worst_gd = max(worst_gd, float(np.abs(w_t.w - w).max()))
            factors = (1.0 - state.eta * vals / n) ** t
            f_eig = vecs @ (factors[:, None] * (vecs.T @ (state.f0 - y))) + y
            worst_eig = max(worst_eig, float(np.abs(trace.f_at(t) - f_eig).max()))
    ok = worst_gd <= 1e-10 and worst_eig <= 1e-9
    report(3, ok, f"vs linearized descent {worst_gd:.2e} (tol 1e-10), "
                  f"vs eigen closed form {worst_eig:.2e} (tol 1e-9)",
           time.perf_counter() - started, 60.0)


@pytest.fixture(scope="session")
def wide_theory_state():
    return make_theory_state(2048, 16, 16, SEED + 4)


def test_criterion_4_decay_envelope(wide_theory_state):
    started = time.perf_counter()
    cfg, w0, X, y, state, lam_min, lam_max = wide_theory_state
    report_obj = analysis.check_decay(state, 2000)
    ok = report_obj.applicable and report_obj.violations.size == 0
    report(4, ok, f"n=2048 N=16 eta=N/(2 lam_max): {report_obj.violations.size} violations "
                  f"over t <= 2000 (lam_min {lam_min:.3f}, lam_max {lam_max:.3f})",
           time.perf_counter() - started, 120.0)


def test_criterion_5_linearization_fidelity(wide_theory_state):
    started = time.perf_counter()
    cfg, w0, X, y, state, _, _ = wide_theory_state
    grid = tuple(range(100, 501, 100))
    result = ntk_engine.select_t(state, grid, cfg, w0, X)
    trace = ntk_engine.evolve_function(state, result.chosen_t, record_at=[result.chosen_t])
    f_real = model.forward(result.w_next, cfg, X)
    rel = float(np.linalg.norm(f_real - trace.f_at(result.chosen_t))
                / np.linalg.norm(state.f0 - y))
    # exhaustive sweep: the chosen step count must beat every other grid point
    # when each candidate is re-evaluated from scratch
    chosen_loss = result.losses[result.t_grid.index(result.chosen_t)]
    sweep_ok = True
    for t in grid:
        fresh = ntk_engine.evolve_function(state, t, record_at=[t])
        w_t = ntk_engine.evolve_weights(state, fresh.residual_at(t), w0)
        if chosen_loss > model.loss(model.forward(w_t, cfg, X), y) + 1e-15:
            sweep_ok = False
    ok = result.chosen_t <= 500 and rel <= 5e-2 and sweep_ok
    report(5, ok, f"chosen t={result.chosen_t}, relative function gap {rel:.3e} (tol 5e-2), "
                  f"exhaustive sweep consistent: {sweep_ok}",
           time.perf_counter() - started, 120.0)


def test_criterion_6_weight_gap_study():
    started = time.perf_counter()
    cfg, w0, X, y, state, _, lam_max = make_theory_state(1024, 32, 32, SEED + 5)
    eta = 32 / (50.0 * lam_max)
    gap = analysis.ntk_gd_gap(cfg, w0, X, y.ravel(), eta, tuple(range(100, 1001, 100)))
    inner = gap.gaps[1:]
    nondecreasing = int(sum(1 for a, b in zip(inner, inner[1:]) if b >= a - 1e-12))
    bounded = bool((gap.gaps <= gap.bounds + 1e-12).all())
    ok = gap.gaps[0] == 0.0 and nondecreasing >= 9 and bounded
    report(6, ok, f"gap(0)=0, {nondecreasing}/9 nondecreasing pairs, "
                  f"bound holds everywhere: {bounded}",
           time.perf_counter() - started, 300.0)


def test_criterion_7_shuffle_invariance():
    started = time.perf_counter()
    rng = np.random.default_rng(SEED + 6)
    cfg = model.ModelConfig(d1=10, hidden=24, d2=4)
    w0 = model.init_weights(cfg, SEED + 6)
    cohort = fed.Cohort(
        [0, 1, 2],
        [rng.standard_normal((7, 10)), rng.standard_normal((5, 10)),
         rng.standard_normal((6, 10))],
        [data.one_hot(rng.integers(0, 4, 7), 4), data.one_hot(rng.integers(0, 4, 5), 4),
         data.one_hot(rng.integers(0, 4, 6), 4)])
    rcfg = fed.RoundConfig(clients_total=3, clients_per_round=3, rounds=1,
                           eta=0.02, t_grid=(10, 40, 120))
    base, _, state = fed.run_round_ntkfl(w0, cfg, rcfg, cohort)
    X = np.concatenate(cohort.inputs, axis=0)
    worst = 0.0
    for trial in range(10):
        plan = cp.gen_shuffle(SEED + trial, state.n_samples)
        shuffled = cp.apply_shuffle(state, plan)
        out = ntk_engine.select_t(shuffled, rcfg.t_grid, cfg, w0, X[plan.permutation])
        worst = max(worst, float(np.abs(out.w_next.w - base.w).max()))
    report(7, worst <= 1e-12, f"10 permutations, max per-coordinate drift {worst:.2e} (tol 1e-12)",
           time.perf_counter() - started, 60.0)


def test_criterion_8_cp_degenerate_reduction():
    started = time.perf_counter()
    rng = np.random.default_rng(SEED + 7)
    cfg = model.ModelConfig(d1=12, hidden=20, d2=3)
    w0 = model.init_weights(cfg, SEED + 7)
    cohort = fed.Cohort(
        [0, 1],
        [rng.standard_normal((8, 12)), rng.standard_normal((9, 12))],
        [data.one_hot(rng.integers(0, 3, 8), 3), data.one_hot(rng.integers(0, 3, 9), 3)])
    rcfg = fed.RoundConfig(clients_total=2, clients_per_round=2, rounds=1,
                           eta=0.03, t_grid=(10, 30, 80), scheme="cp-ntkfl")
    plain, _, _ = fed.run_round_ntkfl(w0, cfg, rcfg, cohort)
    degen, _, _ = cp.run_round_cp_ntkfl(w0, cfg, rcfg, cohort,
                                        cp.identity_projection(cfg.d1), 0.0,
                                        shuffle_seed=SEED)
    worst = float(np.abs(degen.w - plain.w).max())
    report(8, worst <= 1e-12,
           f"beta=1 identity projection sparsity=0: max weight difference {worst:.2e}",
           time.perf_counter() - started, 60.0)


# ---------------------------------------------------------------------------
# desk-scale runs (criteria 9, 10, 12)


def read_metrics(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="session")
def desk_runs(tmp_path_factory):
    """Canonical desk-scale executions shared by criteria 9, 10, 11 and 12."""
    root = tmp_path_factory.mktemp("desk")
    cfg_path = root / "criterion9.json"
    cfg_path.write_text(json.dumps({**DESK_CONFIG, "output_dir": str(root / "ntk_a5")}))

    assert cli.main(["train", "--config", str(cfg_path)]) == 0
    first = read_metrics(root / "ntk_a5" / "metrics.csv")

    cfg = config_from_dict(DESK_CONFIG)
    exp_a5 = driver.load_experiment_data(cfg)
    fedavg_a5 = {}
    for tau in FEDAVG_TAU_GRID:
        metrics, _ = driver.run_experiment(cfg, scheme="fedavg", tau=tau, exp=exp_a5)
        fedavg_a5[tau] = metrics

    a1_raw = json.loads(json.dumps(DESK_CONFIG))
    a1_raw["rounds"]["alpha"] = 0.1
    cfg_a1 = config_from_dict(a1_raw)
    exp_a1 = driver.load_experiment_data(cfg_a1)
    ntk_a1, _ = driver.run_experiment(cfg_a1, exp=exp_a1)
    fedavg_a1 = {}
    for tau in FEDAVG_TAU_GRID:
        metrics, _ = driver.run_experiment(cfg_a1, scheme="fedavg", tau=tau, exp=exp_a1)
        fedavg_a1[tau] = metrics

    cp_raw = json.loads(json.dumps(DESK_CONFIG))
    cp_raw["rounds"].update({"scheme": "cp-ntkfl", "eta": CP_ETA, "rounds": 30,
                             "t_grid": CP_T_GRID})
    cp_metrics, _ = driver.run_experiment(config_from_dict(cp_raw), exp=exp_a5)

    return {
        "root": root,
        "config_path": cfg_path,
        "ntk_a5_csv": first,
        "fedavg_a5": fedavg_a5,
        "ntk_a1": ntk_a1,
        "fedavg_a1": fedavg_a1,
        "cp": cp_metrics,
    }


def first_reaching(accs, target):
    for i, acc in enumerate(accs):
        if acc >= target:
            return i + 1
    return None


def test_criterion_9_heterogeneity_surrogate(desk_runs):
    started = time.perf_counter()
    ntk_accs = [float(r["test_acc"]) for r in desk_runs["ntk_a5_csv"]]
    ntk_first = first_reaching(ntk_accs, TARGET_ACC)
    fed_best = None
    for tau, metrics in desk_runs["fedavg_a5"].items():
        reached = first_reaching([m.test_acc for m in metrics], TARGET_ACC)
        effective = reached if reached is not None else len(metrics) + 1
        fed_best = effective if fed_best is None else min(fed_best, effective)
    speedup_ok = ntk_first is not None and 3 * ntk_first <= fed_best

    ntk_a5_final = ntk_accs[-1]
    ntk_a1_final = desk_runs["ntk_a1"][-1].test_acc
    ntk_drop = ntk_a5_final - ntk_a1_final
    fed_a5_final = max(m[-1].test_acc for m in desk_runs["fedavg_a5"].values())
    fed_a1_final = max(m[-1].test_acc for m in desk_runs["fedavg_a1"].values())
    fed_drop = fed_a5_final - fed_a1_final
    hetero_ok = ntk_drop <= 0.03 and fed_drop > ntk_drop

    ok = speedup_ok and hetero_ok
    report(9, ok,
           f"kernel rounds-to-{TARGET_ACC:.0%}: {ntk_first} vs best fedavg {fed_best} "
           f"(need 3x); alpha drop kernel {ntk_drop:+.3f} (tol 0.03) vs fedavg {fed_drop:+.3f}",
           time.perf_counter() - started, 1800.0)


def test_criterion_10_cp_accuracy_retention(desk_runs):
    started = time.perf_counter()
    plain_30 = float(desk_runs["ntk_a5_csv"][29]["test_acc"])
    cp_30 = desk_runs["cp"][29].test_acc
    ok = cp_30 >= plain_30 - 0.05
    report(10, ok, f"round-30 accuracy: cp {cp_30:.3f} vs plain {plain_30:.3f} (tol 5 points)",
           time.perf_counter() - started, 1800.0)


def test_criterion_11_communication_accounting(desk_runs):
    started = time.perf_counter()
    rng = np.random.default_rng(SEED + 8)
    exact = True
    for _ in range(20):
        d = int(rng.integers(10, 5000))
        d2 = int(rng.integers(1, 11))
        m_k = int(rng.integers(1, 21))
        sizes = [int(s) for s in rng.integers(1, 200, size=m_k)]
        sparsity = float(rng.choice([0.0, 0.5, 0.9]))
        if cp.comm_cost("fedavg", weight_dim=d, clients=m_k) != m_k * 8 * d:
            exact = False
        want_ntk = sum(8 * (n * d2 * d + 2 * n * d2) for n in sizes)
        if cp.comm_cost("ntkfl", weight_dim=d, d2=d2, cohort_sizes=sizes) != want_ntk:
            exact = False
        want_cp = 0
        for n in sizes:
            total = n * d2 * d
            kept = total - int(sparsity * total)  # sparsity here is an exact decimal
            want_cp += 12 * kept + 24 + 16 * n * d2
        if cp.comm_cost("cp-ntkfl", weight_dim=d, d2=d2, cohort_sizes=sizes,
                        sparsity=sparsity) != want_cp:
            exact = False

    row = desk_runs["ntk_a5_csv"][0]
    mcfg = model.ModelConfig(d1=128, hidden=DESK_CONFIG["model"]["hidden"], d2=10)
    m_k = DESK_CONFIG["rounds"]["clients_per_round"]
    fed_bytes = m_k * 8 * mcfg.weight_dim
    ratio = int(row["uplink_bytes"]) / fed_bytes
    cohort_samples = (6000 // 50) * m_k
    predicted = cohort_samples * 10 / m_k  # sum N_m d2 / M_k
    ratio_ok = abs(ratio - predicted) / predicted <= 0.01
    ok = exact and ratio_ok
    report(11, ok, f"formulas exact on 20 configs: {exact}; desk ratio {ratio:.1f} "
                   f"vs predicted {predicted:.1f} (tol 1%)",
           time.perf_counter() - started, 1.0)


def test_criterion_12_determinism(desk_runs):
    started = time.perf_counter()
    rerun_dir = desk_runs["root"] / "ntk_a5_rerun"
    assert cli.main(["train", "--config", str(desk_runs["config_path"]),
                     "--out", str(rerun_dir)]) == 0
    first = (desk_runs["root"] / "ntk_a5" / "metrics.csv").read_bytes()
    second = (rerun_dir / "metrics.csv").read_bytes()
    ok = first == second
    report(12, ok, f"two executions of the criterion-9 config: metrics.csv byte-identical "
                   f"({len(first)} bytes)", time.perf_counter() - started, 1800.0)
