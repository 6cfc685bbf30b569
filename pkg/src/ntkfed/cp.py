"""Communication-efficient / privacy-oriented round building blocks.

The variant composes four tools around the plain kernel round: per-client
uniform subsampling, a seeded Gaussian input projection shared through a
trusted key server (the seed is handed over in-process here, with an access
record standing in for the encryption), global top-k Jacobian compression,
and a synchronised sample-level shuffle whose effect cancels in the weight
update.  The projected model lives in the projected input dimension for the
whole run; nothing is ever projected back.
"""

import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from . import fed, model, ntk_engine
from .linalg import topk_sparsify
from .rng import stream

__all__ = [
    "ProjectionSpec",
    "ShufflePlan",
    "KeyServer",
    "gen_projection",
    "identity_projection",
    "project_inputs",
    "gen_shuffle",
    "apply_shuffle",
    "compress_update",
    "compressed_bytes",
    "comm_cost",
    "run_round_cp_ntkfl",
]

COMPRESSED_HEADER_BYTES = 24  # dims (3 x u32) + kept count (u32) + scheme tag
VALUE_BYTES = 8
INDEX_BYTES = 4  # 32-bit flat indices; desk-scale tensors stay below 2**32 entries


@dataclass
class ProjectionSpec:
    """Input projection x -> x P regenerated bit-exactly from its seed."""

    seed: int | None
    d1: int
    d1_proj: int
    kind: str = "gaussian"
    _cached: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if not 1 <= self.d1_proj <= self.d1:
            raise ValueError(f"need 1 <= d1_proj <= d1, got d1_proj={self.d1_proj}, d1={self.d1}")
        if self.kind not in ("gaussian", "identity"):
            raise ValueError(f"unknown projection kind {self.kind!r}")
        if self.kind == "gaussian" and self.seed is None:
            raise ValueError("gaussian projection requires a seed")

    def matrix(self) -> np.ndarray:
        if self._cached is None:
            if self.kind == "identity":
                self._cached = np.eye(self.d1, dtype=np.float64)[:, : self.d1_proj]
            else:
                rng = stream(self.seed, "projection")
                self._cached = rng.standard_normal((self.d1, self.d1_proj))
        return self._cached


def gen_projection(seed: int, d1: int, d1_proj: int) -> ProjectionSpec:
    """Gaussian projection spec with i.i.d. standard normal entries."""
    return ProjectionSpec(seed=seed, d1=d1, d1_proj=d1_proj, kind="gaussian")


def identity_projection(d1: int, d1_proj: int | None = None) -> ProjectionSpec:
    """Coordinate-selection projection, the seedless degenerate test path."""
    return ProjectionSpec(seed=None, d1=d1, d1_proj=d1 if d1_proj is None else d1_proj,
                          kind="identity")


def project_inputs(X: np.ndarray, spec: ProjectionSpec) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != spec.d1:
        raise ValueError(f"expected inputs of shape (N, {spec.d1}), got {X.shape}")
    return X @ spec.matrix()


class KeyServer:
    """Trusted holder of the projection seed.

    Stands in for the encrypted seed distribution: parties must be granted
    access before they can read the seed, and every fetch is recorded so
    tests can assert the aggregation server never touches it.
    """

    def __init__(self, seed: int):
        self._seed = int(seed)
        self._granted: set[str] = {"key-server"}
        self.fetch_log: list[str] = []

    def grant(self, party: str):
        self._granted.add(party)

    def fetch_seed(self, party: str) -> int:
        self.fetch_log.append(party)
        if party not in self._granted:
            raise PermissionError(f"party {party!r} is not allowed to read the projection seed")
        return self._seed


@dataclass(frozen=True)
class ShufflePlan:
    """Sample-level permutation applied in synchronisation on the server."""

    permutation: np.ndarray
    seed: int | None = None

    def __post_init__(self):
        perm = np.asarray(self.permutation, dtype=np.int64)
        if perm.ndim != 1 or not np.array_equal(np.sort(perm), np.arange(perm.size)):
            raise ValueError("permutation must be a bijection on [0, N)")
        object.__setattr__(self, "permutation", perm)


def gen_shuffle(seed: int, n: int) -> ShufflePlan:
    return ShufflePlan(stream(seed, "shuffle").permutation(n), seed=seed)


def apply_shuffle(state: ntk_engine.GlobalState, plan: ShufflePlan) -> ntk_engine.GlobalState:
    """Permute Jacobian slices, label/output rows and provenance together.

    A built kernel is carried along as P K P^T, so downstream evolution sees
    a consistently relabelled cohort.
    """
    perm = plan.permutation
    if perm.size != state.n_samples:
        raise ValueError(f"permutation length {perm.size} != cohort size {state.n_samples}")
    kernel = None
    if state.kernel is not None:
        kernel = np.ascontiguousarray(state.kernel[np.ix_(perm, perm)])
    return ntk_engine.GlobalState(
        J=state.J[perm],
        Y=state.Y[perm],
        f0=state.f0[perm],
        eta=state.eta,
        provenance=tuple(state.provenance[i] for i in perm),
        kernel=kernel,
    )


def compressed_bytes(kept: int, n_samples: int, d2: int) -> int:
    """Wire size of one compressed upload: tensor payload plus labels and f0."""
    return (VALUE_BYTES + INDEX_BYTES) * kept + COMPRESSED_HEADER_BYTES \
        + VALUE_BYTES * 2 * n_samples * d2


def compress_update(update: ntk_engine.ClientUpdate,
                    sparsity: float) -> tuple[ntk_engine.ClientUpdate, int]:
    """Top-k sparsify a client upload; returns (compressed update, byte count)."""
    dense = update.jacobian
    if not isinstance(dense, np.ndarray):
        raise TypeError("update is already compressed")
    sparse = topk_sparsify(dense, sparsity)
    out = ntk_engine.ClientUpdate(
        client_id=update.client_id,
        jacobian=sparse,
        targets=update.targets,
        f0=update.f0,
        n_samples=update.n_samples,
    )
    return out, compressed_bytes(sparse.kept, update.n_samples, update.targets.shape[1])


def comm_cost(scheme: str, *, weight_dim: int, d2: int = 1, cohort_sizes=(),
              clients: int = 0, sparsity: float = 0.0) -> int:
    """Per-round uplink bytes for a scheme.

    fedavg sends one weight vector per client; a kernel round sends each
    client's dense Jacobian tensor plus labels and initial outputs; the CP
    round sends top-k compressed tensors over the (already subsampled,
    projected-model) cohort sizes.
    """
    if scheme == "fedavg":
        return clients * 8 * weight_dim
    if scheme == "ntkfl":
        return fed.ntk_uplink_bytes(cohort_sizes, d2, weight_dim)
    if scheme == "cp-ntkfl":
        total = 0
        frac = Fraction(str(sparsity))
        for n_m in cohort_sizes:
            size = n_m * d2 * weight_dim
            kept = math.ceil((1 - frac) * size)
            total += compressed_bytes(kept, n_m, d2)
        return total
    raise ValueError(f"unknown scheme {scheme!r}")


def run_round_cp_ntkfl(weights: model.ModelWeights, cfg: model.ModelConfig,
                       rcfg: fed.RoundConfig, cohort: fed.Cohort, spec: ProjectionSpec,
                       sparsity: float, shuffle_plan: ShufflePlan | None = None,
                       shuffle_seed: int = 0,
                       ) -> tuple[model.ModelWeights, fed.RoundMetrics, ntk_engine.GlobalState]:
    """One CP round over an already-subsampled cohort of raw inputs.

    Clients project their inputs, compute the update against the projected
    model and compress it; the server shuffles the assembled cohort, builds
    the kernel and runs the usual step-count search on the projected inputs.
    ``cfg`` must be the projected model (d1 == spec.d1_proj).
    """
    if cfg.d1 != spec.d1_proj:
        raise ValueError(f"projected model expects d1 == {spec.d1_proj}, got {cfg.d1}")
    updates = []
    total_bytes = 0
    projected = []
    for cid, X_m, Y_m in zip(cohort.client_ids, cohort.inputs, cohort.targets):
        Z_m = project_inputs(X_m, spec)
        projected.append(Z_m)
        update, nbytes = compress_update(
            fed.client_update(weights, cfg, cid, Z_m, Y_m), sparsity)
        updates.append(update)
        total_bytes += nbytes
    state = ntk_engine.assemble_global(updates, rcfg.eta)  # densified here
    del updates
    if shuffle_plan is None:
        shuffle_plan = gen_shuffle(shuffle_seed, state.n_samples)
    state = apply_shuffle(state, shuffle_plan)
    state.kernel = ntk_engine.build_kernel(state.J)
    Z = np.concatenate(projected, axis=0)[shuffle_plan.permutation]
    result = ntk_engine.select_t(state, rcfg.t_grid, cfg, weights, Z)
    fed._check_weights(result.w_next.w, "cp kernel round")
    chosen_idx = result.t_grid.index(result.chosen_t)
    metrics = fed.RoundMetrics(
        round_index=-1,
        scheme="cp-ntkfl",
        chosen_t_or_tau=result.chosen_t,
        train_loss=float(result.losses[chosen_idx]),
        test_acc=float("nan"),
        uplink_bytes=total_bytes,
        residual_before=float(result.residual_history[0]),
        residual_after=float(result.residual_history[result.chosen_t]),
    )
    return result.w_next, metrics, state
