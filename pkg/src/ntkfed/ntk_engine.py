"""Server-side kernel machinery.

One communication round's worth of uploads is stacked into a GlobalState;
from the kernel the training dynamics run as the discrete recursion

    f_{u+1} = f_u - (eta / N) K (f_u - Y)

with the residual accumulator R(t) = (eta / (N d2)) sum_{u<t} (Y - f_u).
Contracting the Jacobian tensor with R reproduces, exactly for d2 = 1, the
weights that gradient descent on the linearised network would reach, which
is what the closed-form weight update exploits.  The matrix exponential form
is kept only as a verification oracle (see linalg.sym_expm_apply).
"""

from dataclasses import dataclass, field

import numpy as np

from . import model
from .linalg import SparseTensor3, row_gram

__all__ = [
    "DivergenceError",
    "ClientUpdate",
    "GlobalState",
    "EvolutionTrace",
    "EvolutionResult",
    "assemble_global",
    "build_kernel",
    "evolve_function",
    "evolve_weights",
    "select_t",
]


class DivergenceError(RuntimeError):
    """Raised when an update produces non-finite or exploding values."""


@dataclass
class ClientUpdate:
    """One client's upload: Jacobian tensor, labels, and initial outputs."""

    client_id: int
    jacobian: np.ndarray | SparseTensor3
    targets: np.ndarray
    f0: np.ndarray
    n_samples: int

    def __post_init__(self):
        self.targets = np.asarray(self.targets, dtype=np.float64)
        self.f0 = np.asarray(self.f0, dtype=np.float64)
        shape = self.jacobian.shape
        if len(shape) != 3:
            raise ValueError(f"jacobian must be (N, d2, d), got shape {shape}")
        n, d2, _ = shape
        if n != self.n_samples:
            raise ValueError(f"jacobian holds {n} slices but n_samples = {self.n_samples}")
        if self.targets.shape != (n, d2) or self.f0.shape != (n, d2):
            raise ValueError("targets and f0 must both have shape (n_samples, d2)")


@dataclass
class GlobalState:
    """Stacked cohort: Jacobian tensor, labels, initial outputs, provenance."""

    J: np.ndarray
    Y: np.ndarray
    f0: np.ndarray
    eta: float
    provenance: tuple[tuple[int, int], ...]
    kernel: np.ndarray | None = field(default=None)

    @property
    def n_samples(self) -> int:
        return self.J.shape[0]


def assemble_global(updates: list[ClientUpdate], eta: float) -> GlobalState:
    """Stack client uploads in client order then local order (kernel unset)."""
    if not updates:
        raise ValueError("cannot assemble an empty round")
    d2 = updates[0].jacobian.shape[1]
    d = updates[0].jacobian.shape[2]
    for u in updates:
        if u.jacobian.shape[1:] != (d2, d):
            raise ValueError(
                f"client {u.client_id} upload has shape {u.jacobian.shape[1:]}, expected {(d2, d)}")
    tensors = [u.jacobian.densify() if isinstance(u.jacobian, SparseTensor3) else
               np.asarray(u.jacobian, dtype=np.float64) for u in updates]
    provenance = tuple((u.client_id, i) for u in updates for i in range(u.n_samples))
    return GlobalState(
        J=np.concatenate(tensors, axis=0),
        Y=np.concatenate([u.targets for u in updates], axis=0),
        f0=np.concatenate([u.f0 for u in updates], axis=0),
        eta=eta,
        provenance=provenance,
    )


def build_kernel(J: np.ndarray) -> np.ndarray:
    """Empirical kernel: K[i, j] = <J_i, J_j>_F / d2 over horizontal slices.

    Exactly symmetric and exactly equivariant to slice permutations (see
    linalg.row_gram for how).
    """
    n, d2, d = J.shape
    return row_gram(J.reshape(n, d2 * d)) / d2


@dataclass
class EvolutionTrace:
    """Recorded function-evolution trajectory up to t_max.

    ``sq_residuals[u]`` is ||f_u - Y||_F^2 and ``gamma[u]`` is max_i |(f_u -
    Y)_i| for every step u; full (f, R) snapshots are kept only at the
    requested grid points.
    """

    t_max: int
    sq_residuals: np.ndarray
    gamma: np.ndarray
    _f_at: dict[int, np.ndarray]
    _r_at: dict[int, np.ndarray]

    def f_at(self, t: int) -> np.ndarray:
        return self._f_at[t]

    def residual_at(self, t: int) -> np.ndarray:
        return self._r_at[t]


def evolve_function(state: GlobalState, t_max: int, record_at=()) -> EvolutionTrace:
    """Run the discrete kernel recursion for t_max steps.

    Snapshots of the outputs f and the residual accumulator R are stored for
    every step index in ``record_at`` (step 0 is always available).
    """
    if state.kernel is None:
        raise ValueError("kernel must be built before evolving")
    if not state.eta > 0:
        raise ValueError(f"eta must be positive, got {state.eta}")
    if t_max < 0:
        raise ValueError("t_max must be nonnegative")
    record = set(int(t) for t in record_at)
    if record and (min(record) < 0 or max(record) > t_max):
        raise ValueError("recorded steps must lie in [0, t_max]")
    n, d2 = state.Y.shape
    coef_f = state.eta / n
    coef_r = state.eta / (n * d2)
    f = state.f0.copy()
    r = np.zeros_like(f)
    sq = np.empty(t_max + 1, dtype=np.float64)
    gamma = np.empty(t_max + 1, dtype=np.float64)
    f_snaps = {0: state.f0.copy()}
    r_snaps = {0: np.zeros_like(f)}
    for u in range(t_max):
        diff = f - state.Y
        sq[u] = float(np.dot(diff.ravel(), diff.ravel()))
        gamma[u] = float(np.abs(diff).max()) if diff.size else 0.0
        with np.errstate(over="ignore", invalid="ignore"):  # divergence is detected below
            r -= coef_r * diff
            f -= coef_f * (state.kernel @ diff)
        if not np.isfinite(f).all():
            raise DivergenceError(
                f"function evolution diverged at step {u + 1} (eta = {state.eta} too large?)")
        t = u + 1
        if t in record:
            f_snaps[t] = f.copy()
            r_snaps[t] = r.copy()
    diff = f - state.Y
    sq[t_max] = float(np.dot(diff.ravel(), diff.ravel()))
    gamma[t_max] = float(np.abs(diff).max()) if diff.size else 0.0
    return EvolutionTrace(t_max, sq, gamma, f_snaps, r_snaps)


def evolve_weights(state: GlobalState, residual: np.ndarray,
                   w_k: model.ModelWeights) -> model.ModelWeights:
    """Closed-form weight update: w = sum_j (J_{:j:})^T R_{:j} + w_k."""
    n, d2, d = state.J.shape
    residual = np.asarray(residual, dtype=np.float64)
    if residual.shape != (n, d2):
        raise ValueError(f"residual must have shape {(n, d2)}, got {residual.shape}")
    if w_k.w.shape != (d,):
        raise ValueError(f"weights have dimension {w_k.w.shape[0]}, Jacobian expects {d}")
    if not residual.any():
        return w_k.copy()
    delta = state.J.reshape(n * d2, d).T @ residual.ravel()
    return model.ModelWeights(w_k.w + delta, w_k.layout, w_k.fixed_out)


@dataclass
class EvolutionResult:
    """Outcome of the per-round step-count search."""

    t_grid: tuple[int, ...]
    losses: np.ndarray
    chosen_t: int
    w_next: model.ModelWeights
    residual_history: np.ndarray


def select_t(state: GlobalState, t_grid, cfg: model.ModelConfig, w_k: model.ModelWeights,
             X: np.ndarray, eval_X: np.ndarray | None = None,
             eval_Y: np.ndarray | None = None) -> EvolutionResult:
    """Pick the evolution step count with the smallest realised loss.

    A single recursion sweep to max(t_grid) serves every grid point; each
    candidate's weights are materialised and the actual network (not the
    linearised surrogate) is evaluated.  By default the loss is measured on
    the cohort inputs X against the stacked labels; passing (eval_X, eval_Y)
    switches to held-out validation data.  Ties go to the smaller t.
    """
    grid = tuple(int(t) for t in t_grid)
    if not grid:
        raise ValueError("t_grid must be nonempty")
    if any(t <= 0 for t in grid) or any(b <= a for a, b in zip(grid, grid[1:])):
        raise ValueError("t_grid must be strictly increasing positive integers")
    if eval_X is None:
        eval_X, eval_Y = X, state.Y
    elif eval_Y is None:
        raise ValueError("eval_Y is required when eval_X is given")
    trace = evolve_function(state, grid[-1], record_at=grid)
    losses = np.empty(len(grid), dtype=np.float64)
    best_idx = 0
    best_w = None
    for i, t in enumerate(grid):
        w_t = evolve_weights(state, trace.residual_at(t), w_k)
        losses[i] = model.loss(model.forward(w_t, cfg, eval_X), eval_Y)
        if best_w is None or losses[i] < losses[best_idx]:
            best_idx, best_w = i, w_t
    return EvolutionResult(
        t_grid=grid,
        losses=losses,
        chosen_t=grid[best_idx],
        w_next=best_w,
        residual_history=trace.sq_residuals,
    )
