"""Round-level protocol drivers: kernel-based rounds, FedAvg, centralized GD.

A round function takes the broadcast weights plus the selected cohort's data
and returns the next weights together with a RoundMetrics record.  Cohorts
are passed as explicit (client_id, X_m, Y_m) triples so the rounds stay pure
and independently testable; client sampling, partition lookup and test-set
evaluation live in the experiment driver.
"""

from dataclasses import dataclass

import numpy as np

from . import model, ntk_engine
from .ntk_engine import DivergenceError

__all__ = [
    "RoundConfig",
    "RoundMetrics",
    "Cohort",
    "sample_clients",
    "client_update",
    "run_round_ntkfl",
    "run_round_fedavg",
    "run_centralized",
    "evaluate",
]

SCHEMES = ("ntkfl", "fedavg", "centralized", "cp-ntkfl")

WEIGHT_CAP = 1e6  # divergence guard: abort when any |w| exceeds this


@dataclass(frozen=True)
class RoundConfig:
    clients_total: int
    clients_per_round: int
    rounds: int
    scheme: str = "ntkfl"
    eta: float = 0.1
    t_grid: tuple[int, ...] = tuple(range(100, 2001, 100))
    tau: int = 10
    batch_size: int = 200
    seed: int = 0
    fedavg_lr: float | None = None
    fedavg_weighted: bool = False

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ValueError(f"scheme must be one of {SCHEMES}, got {self.scheme!r}")
        if not 1 <= self.clients_per_round <= self.clients_total:
            raise ValueError("need 1 <= clients_per_round <= clients_total")
        if self.scheme == "fedavg" and self.tau < 1:
            raise ValueError("fedavg requires tau >= 1")
        object.__setattr__(self, "t_grid", tuple(int(t) for t in self.t_grid))

    @property
    def local_lr(self) -> float:
        return self.eta if self.fedavg_lr is None else self.fedavg_lr


@dataclass
class RoundMetrics:
    round_index: int
    scheme: str
    chosen_t_or_tau: int
    train_loss: float
    test_acc: float
    uplink_bytes: int
    residual_before: float
    residual_after: float
    lambda_min: float | None = None
    wall_ms: float = 0.0


@dataclass
class Cohort:
    """Selected clients' data for one round, in selection order."""

    client_ids: list[int]
    inputs: list[np.ndarray]
    targets: list[np.ndarray]

    def __post_init__(self):
        if not (len(self.client_ids) == len(self.inputs) == len(self.targets)):
            raise ValueError("client_ids, inputs and targets must align")
        if not self.client_ids:
            raise ValueError("cohort must contain at least one client")

    def pooled(self) -> tuple[np.ndarray, np.ndarray]:
        return np.concatenate(self.inputs, axis=0), np.concatenate(self.targets, axis=0)

    def sizes(self) -> list[int]:
        return [x.shape[0] for x in self.inputs]


def sample_clients(clients_total: int, clients_per_round: int,
                   rng: np.random.Generator) -> np.ndarray:
    """Uniform draw without replacement, returned sorted."""
    if clients_per_round > clients_total:
        raise ValueError("cannot select more clients than exist")
    return np.sort(rng.choice(clients_total, size=clients_per_round, replace=False))


def _check_weights(w: np.ndarray, where: str):
    if not np.isfinite(w).all() or np.abs(w).max() > WEIGHT_CAP:
        raise DivergenceError(f"weights diverged during {where}")


def client_update(weights: model.ModelWeights, cfg: model.ModelConfig, client_id: int,
                  X_m: np.ndarray, Y_m: np.ndarray) -> ntk_engine.ClientUpdate:
    """What one selected client computes and uploads in a kernel round.

    Outputs and Jacobian slices are produced sample by sample, so the upload
    for a given sample is bit-identical no matter how samples are grouped
    into clients.
    """
    n_m = X_m.shape[0]
    f0 = np.empty((n_m, cfg.d2), dtype=np.float64)
    for i in range(n_m):
        f0[i] = model.forward_one(weights, cfg, X_m[i])
    return ntk_engine.ClientUpdate(
        client_id=client_id,
        jacobian=model.batch_jacobian(weights, cfg, X_m),
        targets=np.asarray(Y_m, dtype=np.float64),
        f0=f0,
        n_samples=n_m,
    )


def ntk_uplink_bytes(sizes, d2: int, d: int) -> int:
    """Raw upload cost: the Jacobian tensor plus labels and initial outputs."""
    return sum(8 * (n_m * d2 * d + 2 * n_m * d2) for n_m in sizes)


def run_round_ntkfl(weights: model.ModelWeights, cfg: model.ModelConfig, rcfg: RoundConfig,
                    cohort: Cohort, eval_X: np.ndarray | None = None,
                    eval_Y: np.ndarray | None = None,
                    ) -> tuple[model.ModelWeights, RoundMetrics, ntk_engine.GlobalState]:
    """One kernel round: uploads, assembly, kernel, evolution, t search."""
    updates = [client_update(weights, cfg, cid, X_m, Y_m)
               for cid, X_m, Y_m in zip(cohort.client_ids, cohort.inputs, cohort.targets)]
    state = ntk_engine.assemble_global(updates, rcfg.eta)
    del updates
    state.kernel = ntk_engine.build_kernel(state.J)
    X = np.concatenate(cohort.inputs, axis=0)
    result = ntk_engine.select_t(state, rcfg.t_grid, cfg, weights, X, eval_X, eval_Y)
    _check_weights(result.w_next.w, "kernel round")
    chosen_idx = result.t_grid.index(result.chosen_t)
    metrics = RoundMetrics(
        round_index=-1,
        scheme="ntkfl",
        chosen_t_or_tau=result.chosen_t,
        train_loss=float(result.losses[chosen_idx]),
        test_acc=float("nan"),
        uplink_bytes=ntk_uplink_bytes(cohort.sizes(), cfg.d2, cfg.weight_dim),
        residual_before=float(result.residual_history[0]),
        residual_after=float(result.residual_history[result.chosen_t]),
    )
    return result.w_next, metrics, state


def _batch_indices(perm: np.ndarray, step: int, batch_size: int) -> np.ndarray:
    """Contiguous chunk of the seeded permutation, cycling with wraparound.

    Indices are sorted before use so a full batch visits samples in their
    stored order: mini-batch content stays random, while full-batch local
    steps match centralized gradient descent bit for bit.
    """
    n = perm.size
    if batch_size >= n:
        return np.sort(perm)
    start = (step * batch_size) % n
    end = start + batch_size
    if end <= n:
        return np.sort(perm[start:end])
    return np.sort(np.concatenate([perm[start:], perm[:end - n]]))


def local_sgd(weights: model.ModelWeights, cfg: model.ModelConfig, X_m, Y_m,
              steps: int, lr: float, batch_size: int,
              rng: np.random.Generator) -> model.ModelWeights:
    """tau mini-batch GD steps on one client's data from the broadcast point."""
    local = weights.copy()
    perm = rng.permutation(X_m.shape[0])
    for step in range(steps):
        take = _batch_indices(perm, step, batch_size)
        grad = model.batch_gradient(local, cfg, model.Batch(X_m[take], Y_m[take]))
        local.w -= lr * grad
        _check_weights(local.w, "local SGD")
    return local


def run_round_fedavg(weights: model.ModelWeights, cfg: model.ModelConfig, rcfg: RoundConfig,
                     cohort: Cohort, batch_rngs) -> tuple[model.ModelWeights, RoundMetrics]:
    """FedAvg round: tau local steps per client, then a (weighted) average."""
    if rcfg.tau < 1:
        raise ValueError("tau must be >= 1")
    locals_w = []
    for cid, X_m, Y_m, rng in zip(cohort.client_ids, cohort.inputs, cohort.targets, batch_rngs):
        locals_w.append(local_sgd(weights, cfg, X_m, Y_m, rcfg.tau,
                                  rcfg.local_lr, rcfg.batch_size, rng).w)
    if rcfg.fedavg_weighted:
        sizes = np.asarray(cohort.sizes(), dtype=np.float64)
        avg = (np.stack(locals_w) * (sizes / sizes.sum())[:, None]).sum(axis=0)
    else:
        avg = np.stack(locals_w).mean(axis=0)
    new_w = model.ModelWeights(avg, weights.layout, weights.fixed_out)
    _check_weights(new_w.w, "fedavg aggregation")
    X, Y = cohort.pooled()
    pred_after = model.forward(new_w, cfg, X)
    before = model.forward(weights, cfg, X) - Y
    after = pred_after - Y
    metrics = RoundMetrics(
        round_index=-1,
        scheme="fedavg",
        chosen_t_or_tau=rcfg.tau,
        train_loss=model.loss(pred_after, Y),
        test_acc=float("nan"),
        uplink_bytes=len(cohort.client_ids) * 8 * cfg.weight_dim,
        residual_before=float(np.dot(before.ravel(), before.ravel())),
        residual_after=float(np.dot(after.ravel(), after.ravel())),
    )
    return new_w, metrics


def run_centralized(weights: model.ModelWeights, cfg: model.ModelConfig,
                    X: np.ndarray, Y: np.ndarray, steps: int, lr: float,
                    ) -> tuple[model.ModelWeights, RoundMetrics]:
    """Full-batch gradient descent on pooled cohort data (upper-bound baseline)."""
    w = weights.copy()
    batch = model.Batch(X, Y)
    for _ in range(steps):
        w.w -= lr * model.batch_gradient(w, cfg, batch)
        _check_weights(w.w, "centralized GD")
    pred_after = model.forward(w, cfg, X)
    before = model.forward(weights, cfg, X) - Y
    after = pred_after - Y
    metrics = RoundMetrics(
        round_index=-1,
        scheme="centralized",
        chosen_t_or_tau=steps,
        train_loss=model.loss(pred_after, Y),
        test_acc=float("nan"),
        uplink_bytes=0,
        residual_before=float(np.dot(before.ravel(), before.ravel())),
        residual_after=float(np.dot(after.ravel(), after.ravel())),
    )
    return w, metrics


def evaluate(weights: model.ModelWeights, cfg: model.ModelConfig, X: np.ndarray,
             labels: np.ndarray, targets: np.ndarray) -> tuple[float, float]:
    """(accuracy, loss) on a labelled evaluation set.

    Accuracy is argmax match with ties broken toward the lowest class index.
    """
    if X.shape[0] == 0:
        raise ValueError("evaluation set is empty")
    pred = model.forward(weights, cfg, X)
    acc = float(np.mean(np.argmax(pred, axis=1) == labels))
    return acc, model.loss(pred, targets)
