"""Command-line experiment runner.

Subcommands:
  partition    write the client partition and its class histogram
  train        run the configured scheme, writing metrics.csv + weights.bin
  compare      rounds/bytes to a target accuracy for several schemes
  verify       run the numerical property checks, one pass/fail per line
  comm-report  per-round uplink bytes for each scheme under the config

Metrics CSV output is byte-reproducible for a fixed (config, seed, thread
count): floats are printed with 17 significant digits and wall time is only
recorded when the config opts in via record_wall_time.
"""

import argparse
import csv
import os
import struct
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import analysis, cp, data, driver, fed, model, ntk_engine
from .config import ExperimentConfig, parse_config
from .ntk_engine import DivergenceError
from .rng import stream

__all__ = ["main", "save_weights", "load_weights", "run_verify_checks"]

WEIGHTS_MAGIC = b"NTKW"
WEIGHTS_VERSION = 1

METRIC_COLUMNS = ("round", "scheme", "chosen_t_or_tau", "train_loss", "test_acc",
                  "uplink_bytes", "lambda_min", "wall_ms")


def fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return f"{value:.17g}"
    return str(value)


def save_weights(path, weights: model.ModelWeights):
    """Raw little-endian float64 vector behind a 16-byte header."""
    with open(path, "wb") as fh:
        fh.write(WEIGHTS_MAGIC)
        fh.write(struct.pack("<I", WEIGHTS_VERSION))
        fh.write(struct.pack("<Q", weights.w.size))
        fh.write(weights.w.astype("<f8").tobytes())


def load_weights(path) -> np.ndarray:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != WEIGHTS_MAGIC:
            raise ValueError(f"bad weights magic {magic!r}")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != WEIGHTS_VERSION:
            raise ValueError(f"unsupported weights version {version}")
        (count,) = struct.unpack("<Q", fh.read(8))
        payload = fh.read(8 * count)
        if len(payload) != 8 * count:
            raise ValueError("truncated weights file")
        return np.frombuffer(payload, dtype="<f8").copy()


def _metrics_row(m: fed.RoundMetrics, record_wall_time: bool) -> list[str]:
    return [
        str(m.round_index),
        m.scheme,
        str(m.chosen_t_or_tau),
        fmt(float(m.train_loss)),
        fmt(float(m.test_acc)),
        str(m.uplink_bytes),
        fmt(None if m.lambda_min is None else float(m.lambda_min)),
        fmt(float(m.wall_ms) if record_wall_time else 0.0),
    ]


def cmd_train(cfg: ExperimentConfig, out_dir: Path) -> int:
    out_dir.mkdir(parents=True, exist_ok=True)
    metrics_path = out_dir / "metrics.csv"
    status = 0
    final_weights = None
    with open(metrics_path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(METRIC_COLUMNS)
        fh.flush()

        def sink(m):
            writer.writerow(_metrics_row(m, cfg.record_wall_time))
            fh.flush()

        try:
            _, final_weights = driver.run_experiment(cfg, on_round=sink)
        except DivergenceError as exc:
            print(f"error: {exc} (partial metrics kept)", file=sys.stderr)
            status = 3
    if final_weights is not None:
        save_weights(out_dir / "weights.bin", final_weights)
    print(f"wrote {metrics_path}")
    return status


def cmd_partition(cfg: ExperimentConfig, out_dir: Path) -> int:
    out_dir.mkdir(parents=True, exist_ok=True)
    exp = driver.load_experiment_data(cfg)
    part = driver.build_partition(exp.train, cfg)
    classes = exp.train.n_classes
    path = out_dir / "partition.csv"
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["client", "size"] + [f"class_{c}" for c in range(classes)])
        for m, idx in enumerate(part.assignment):
            hist = np.bincount(exp.train.labels[idx], minlength=classes)
            writer.writerow([m, idx.size] + hist.tolist())
    print(f"wrote {path}")
    return 0


def _rounds_to_target(metrics, target: float) -> tuple[int | None, int]:
    """(first 1-based round reaching target, cumulative bytes through it)."""
    total = 0
    for m in metrics:
        total += m.uplink_bytes
        if m.test_acc >= target:
            return m.round_index + 1, total
    return None, total


def cmd_compare(cfg: ExperimentConfig, out_dir: Path) -> int:
    out_dir.mkdir(parents=True, exist_ok=True)
    target = cfg.compare.target_accuracy
    exp = driver.load_experiment_data(cfg)
    rows = []
    for scheme in cfg.compare.schemes:
        if scheme == "fedavg":
            best = None
            for tau in cfg.compare.tau_grid:
                metrics, _ = driver.run_experiment(cfg, scheme="fedavg", tau=tau, exp=exp)
                reached, total = _rounds_to_target(metrics, target)
                candidate = (reached if reached is not None else float("inf"), total, tau,
                             metrics[-1].test_acc if metrics else 0.0)
                if best is None or candidate[:2] < best[:2]:
                    best = candidate
            reached, total, tau, final_acc = best
            label = f"fedavg(tau={tau})"
            reached = None if reached == float("inf") else reached
        else:
            metrics, _ = driver.run_experiment(cfg, scheme=scheme, exp=exp)
            reached, total = _rounds_to_target(metrics, target)
            final_acc = metrics[-1].test_acc if metrics else 0.0
            label = scheme
        rows.append((label, reached, total, final_acc))
    path = out_dir / "compare.csv"
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["scheme", "rounds_to_target", "uplink_mb", "final_test_acc"])
        for label, reached, total, final_acc in rows:
            writer.writerow([label, "not reached" if reached is None else reached,
                             fmt(total / 1e6), fmt(float(final_acc))])
    for label, reached, total, final_acc in rows:
        state = "not reached" if reached is None else f"round {reached}"
        print(f"{label}: target {target:.2f} {state}, {total / 1e6:.2f} MB uplink, "
              f"final acc {final_acc:.3f}")
    print(f"wrote {path}")
    return 0


def cmd_comm_report(cfg: ExperimentConfig, out_dir: Path) -> int:
    out_dir.mkdir(parents=True, exist_ok=True)
    exp = driver.load_experiment_data(cfg)
    part = driver.build_partition(exp.train, cfg)
    ids = fed.sample_clients(cfg.rounds.clients_total, cfg.rounds.clients_per_round,
                             stream(cfg.seed, "round", 0, "client-sample"))
    sizes = [part.assignment[c].size for c in ids]
    d2 = exp.train.n_classes
    d1 = exp.train.X.shape[1]
    dense_cfg = model.ModelConfig(d1=d1, hidden=cfg.model.hidden, d2=d2)
    rows = [
        ("fedavg", cp.comm_cost("fedavg", weight_dim=dense_cfg.weight_dim, clients=len(ids))),
        ("ntkfl", cp.comm_cost("ntkfl", weight_dim=dense_cfg.weight_dim, d2=d2,
                               cohort_sizes=sizes)),
    ]
    if cfg.cp.proj_dim is not None:
        proj_cfg = model.ModelConfig(d1=cfg.cp.proj_dim, hidden=cfg.model.hidden, d2=d2)
        reduced = [max(1, int(cfg.cp.beta * s)) for s in sizes]
        rows.append(("cp-ntkfl", cp.comm_cost(
            "cp-ntkfl", weight_dim=proj_cfg.weight_dim, d2=d2, cohort_sizes=reduced,
            sparsity=cfg.cp.sparsity)))
    path = out_dir / "comm.csv"
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["scheme", "bytes_per_round", "mb_per_round"])
        for scheme, nbytes in rows:
            writer.writerow([scheme, nbytes, fmt(nbytes / 1e6)])
    for scheme, nbytes in rows:
        print(f"{scheme}: {nbytes} bytes/round ({nbytes / 1e6:.3f} MB)")
    print(f"wrote {path}")
    return 0


# ---------------------------------------------------------------------------
# verify


def _check_jacobian_fd(seed, fault):
    worst = 0.0
    for trial in range(5):
        rng = np.random.default_rng(seed + trial)
        cfg = model.ModelConfig(d1=int(rng.integers(2, 7)), hidden=int(rng.integers(2, 10)),
                                d2=int(rng.integers(1, 4)))
        w = model.init_weights(cfg, seed + trial)
        x = rng.standard_normal(cfg.d1)
        jac = model.per_sample_jacobian(w, cfg, x)
        h = 1e-5
        for k in range(cfg.weight_dim):
            wp, wm = w.copy(), w.copy()
            wp.w[k] += h
            wm.w[k] -= h
            col = (model.forward_one(wp, cfg, x) - model.forward_one(wm, cfg, x)) / (2 * h)
            denom = np.maximum(np.abs(col), 1e-3)
            worst = max(worst, float((np.abs(jac[:, k] - col) / denom).max()))
    return worst < 1e-5, f"max relative error {worst:.2e}"


def _check_gradient_fd(seed, fault):
    rng = np.random.default_rng(seed)
    cfg = model.ModelConfig(d1=4, hidden=6, d2=3)
    w = model.init_weights(cfg, seed)
    batch = model.Batch(rng.standard_normal((5, 4)), rng.standard_normal((5, 3)))
    grad = model.batch_gradient(w, cfg, batch)
    h = 1e-5
    worst = 0.0
    for k in range(cfg.weight_dim):
        wp, wm = w.copy(), w.copy()
        wp.w[k] += h
        wm.w[k] -= h
        ref = (model.loss(model.forward(wp, cfg, batch.X), batch.Y)
               - model.loss(model.forward(wm, cfg, batch.X), batch.Y)) / (2 * h)
        worst = max(worst, abs(float(grad[k]) - ref))
    return worst < 1e-5, f"max absolute error {worst:.2e}"


def _check_kernel_properties(seed, fault):
    rng = np.random.default_rng(seed)
    J = rng.standard_normal((10, 2, 8))
    kernel = ntk_engine.build_kernel(J)
    if fault == "kernel-asymmetry":
        kernel = kernel.copy()
        kernel[0, 1] += 1e-3
    if not np.array_equal(kernel, kernel.T):
        return False, "kernel is not symmetric"
    vals, _ = analysis.sym_eig(kernel)
    if vals[0] < -1e-10 * np.trace(kernel):
        return False, f"kernel has negative eigenvalue {vals[0]:.2e}"
    p = rng.permutation(10)
    if not np.array_equal(ntk_engine.build_kernel(J[p]), kernel[np.ix_(p, p)]):
        return False, "permutation equivariance violated"
    return True, "symmetry, PSD and permutation equivariance hold"


def _theory_setup(seed, n_hidden=256, n_samples=10, d1=8):
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
    lam_max = analysis.kernel_spectrum(state.kernel)[1]
    state.eta = n_samples / (2.0 * lam_max)
    return cfg, w0, X, y, state


def _check_shuffle_invariance(seed, fault):
    cfg, w0, X, y, state = _theory_setup(seed)
    grid = (10, 30, 90)
    base = ntk_engine.select_t(state, grid, cfg, w0, X).w_next.w
    worst = 0.0
    for trial in range(4):
        plan = cp.gen_shuffle(seed + trial, state.n_samples)
        shuffled = cp.apply_shuffle(state, plan)
        out = ntk_engine.select_t(shuffled, grid, cfg, w0, X[plan.permutation]).w_next.w
        worst = max(worst, float(np.abs(out - base).max()))
    return worst <= 1e-12, f"max weight perturbation {worst:.2e}"


def _check_evolution_equivalence(seed, fault):
    cfg, w0, X, y, state = _theory_setup(seed, n_samples=8)
    worst = 0.0
    for t in (1, 10, 50):
        trace = ntk_engine.evolve_function(state, t, record_at=[t])
        w_t = ntk_engine.evolve_weights(state, trace.residual_at(t), w0)
        n, d2, d = state.J.shape
        j2 = state.J.reshape(n * d2, d)
        w = w0.w.copy()
        for _ in range(t):
            f_lin = state.f0 + (j2 @ (w - w0.w)).reshape(n, d2)
            w = w - state.eta * (j2.T @ (f_lin - state.Y).ravel()) / (n * d2)
        worst = max(worst, float(np.abs(w_t.w - w).max()))
    return worst <= 1e-10, f"max deviation from linearized descent {worst:.2e}"


def _check_decay(seed, fault):
    _, _, _, _, state = _theory_setup(seed, n_hidden=512, n_samples=12)
    report = analysis.check_decay(state, 500)
    ok = report.applicable and report.violations.size == 0
    return ok, f"{report.violations.size} envelope violations over 500 steps"


def _check_gap(seed, fault):
    cfg, w0, X, y, state = _theory_setup(seed, n_hidden=256, n_samples=10)
    report = analysis.ntk_gd_gap(cfg, w0, X, y.ravel(), state.eta / 25.0, (20, 60, 120))
    if report.gaps[0] != 0.0:
        return False, "gap at t=0 is nonzero"
    if not (report.gaps <= report.bounds + 1e-12).all():
        return False, "gap exceeds the analytic bound"
    inner = report.gaps[1:]
    if not (np.diff(inner) >= -1e-12).all():
        return False, "gap is not nondecreasing"
    return True, f"gap grows {inner[0]:.3g} -> {inner[-1]:.3g} under the bound"


def _check_cp_degenerate(seed, fault):
    rng = np.random.default_rng(seed)
    cfg = model.ModelConfig(d1=6, hidden=12, d2=3)
    w0 = model.init_weights(cfg, seed)
    cohort = fed.Cohort([0, 1],
                        [rng.standard_normal((5, 6)), rng.standard_normal((4, 6))],
                        [data.one_hot(rng.integers(0, 3, 5), 3),
                         data.one_hot(rng.integers(0, 3, 4), 3)])
    rcfg = fed.RoundConfig(clients_total=2, clients_per_round=2, rounds=1,
                           eta=0.05, t_grid=(5, 15, 40))
    plain, _, _ = fed.run_round_ntkfl(w0, cfg, rcfg, cohort)
    spec = cp.identity_projection(cfg.d1)
    degen, _, _ = cp.run_round_cp_ntkfl(w0, cfg, rcfg, cohort, spec, 0.0, shuffle_seed=seed)
    worst = float(np.abs(plain.w - degen.w).max())
    return worst <= 1e-12, f"max weight difference {worst:.2e}"


VERIFY_CHECKS = {
    "jacobian-fd": _check_jacobian_fd,
    "gradient-fd": _check_gradient_fd,
    "kernel-properties": _check_kernel_properties,
    "shuffle-invariance": _check_shuffle_invariance,
    "evolution-equivalence": _check_evolution_equivalence,
    "decay": _check_decay,
    "gap": _check_gap,
    "cp-degenerate": _check_cp_degenerate,
}


def run_verify_checks(seed: int, only: str | None = None, fault: str | None = None):
    """Run the property checks whose name contains ``only`` (all by default).

    ``fault`` is a test hook that injects a known defect so the harness
    itself can be validated.
    """
    names = [n for n in VERIFY_CHECKS if only is None or only in n]
    if not names:
        raise ValueError(f"unknown verify check: {only}")
    return [(name, *VERIFY_CHECKS[name](seed, fault)) for name in names]


def cmd_verify(cfg: ExperimentConfig, out_dir: Path, only: str | None,
               fault: str | None = None) -> int:
    out_dir.mkdir(parents=True, exist_ok=True)
    results = run_verify_checks(cfg.seed, only=only, fault=fault)
    path = out_dir / "verify.csv"
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["check", "passed", "detail"])
        for name, ok, detail in results:
            writer.writerow([name, int(ok), detail])
    failures = 0
    for name, ok, detail in results:
        print(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
        failures += 0 if ok else 1
    print(f"wrote {path}")
    return 1 if failures else 0


def _resolve_threads(arg_threads) -> int | None:
    if arg_threads is not None:
        return arg_threads
    env = os.environ.get("NTKFED_THREADS")
    if env:
        try:
            return int(env)
        except ValueError as exc:
            raise SystemExit(f"NTKFED_THREADS must be an integer, got {env!r}") from exc
    return None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ntkfed",
                                     description="kernel-driven federated learning simulator")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("partition", "train", "compare", "verify", "comm-report"):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="path to the JSON experiment config")
        p.add_argument("--seed", type=int, default=None, help="override the master seed")
        p.add_argument("--threads", type=int, default=None,
                       help="worker thread cap (or NTKFED_THREADS)")
        p.add_argument("--out", default=None, help="override the config output directory")
        if name == "verify":
            p.add_argument("--only", default=None, help="run a single named check")
            p.add_argument("--inject-fault", default=None, help=argparse.SUPPRESS)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = parse_config(args.config)
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    if args.seed is not None:
        if not 0 <= args.seed < 2**64:
            print("error: --seed must be an unsigned 64-bit integer", file=sys.stderr)
            return 2
        cfg = replace(cfg, seed=args.seed)
    out_dir = Path(args.out if args.out is not None else cfg.output_dir)
    threads = _resolve_threads(args.threads)

    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=threads):
        if args.command == "train":
            return cmd_train(cfg, out_dir)
        if args.command == "partition":
            return cmd_partition(cfg, out_dir)
        if args.command == "compare":
            return cmd_compare(cfg, out_dir)
        if args.command == "verify":
            return cmd_verify(cfg, out_dir, args.only, getattr(args, "inject_fault", None))
        if args.command == "comm-report":
            return cmd_comm_report(cfg, out_dir)
    raise AssertionError(f"unhandled command {args.command}")


if __name__ == "__main__":
    sys.exit(main())
