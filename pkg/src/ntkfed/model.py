"""Two-layer MLP with manual forward/backward and per-sample Jacobians.

Two variants share one weight layout machinery:

* ``experiment`` - standard MLP: ReLU hidden layer, linear output, biases,
  both layers trainable.  Used for the federated training runs.
* ``theory`` - bias-free net ``f(x) = (1/sqrt(n)) sum_r c_r relu(v_r.x)``
  with the output signs c_r in {-1, +1} frozen; only the first layer is
  trainable.  Used for the convergence and weight-gap checks.

The ReLU derivative at exactly zero is taken to be zero, which makes every
Jacobian deterministic.
"""

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "ModelConfig",
    "ModelWeights",
    "Batch",
    "init_weights",
    "forward",
    "forward_one",
    "loss",
    "per_sample_jacobian",
    "batch_jacobian",
    "batch_gradient",
]

VARIANTS = ("experiment", "theory")


@dataclass(frozen=True)
class ModelConfig:
    d1: int
    hidden: int
    d2: int = 1
    variant: str = "experiment"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if min(self.d1, self.hidden, self.d2) < 1:
            raise ValueError("all dimensions must be >= 1")
        if self.variant == "theory" and self.d2 != 1:
            raise ValueError("theory variant requires d2 == 1")

    @property
    def weight_dim(self) -> int:
        if self.variant == "theory":
            return self.hidden * self.d1
        return self.hidden * self.d1 + self.hidden + self.d2 * self.hidden + self.d2

    def layout(self) -> dict[str, tuple[int, tuple[int, ...]]]:
        """Ordered segment map: name -> (offset into the flat vector, shape)."""
        if self.variant == "theory":
            return {"V": (0, (self.hidden, self.d1))}
        n, d1, d2 = self.hidden, self.d1, self.d2
        segs = {}
        off = 0
        for name, shape in (("W1", (n, d1)), ("b1", (n,)), ("W2", (d2, n)), ("b2", (d2,))):
            segs[name] = (off, shape)
            off += int(np.prod(shape))
        return segs


@dataclass
class ModelWeights:
    """Flat float64 weight vector plus its segment layout.

    The theory variant keeps its frozen output signs in ``fixed_out``,
    outside the trainable vector.
    """

    w: np.ndarray
    layout: dict[str, tuple[int, tuple[int, ...]]]
    fixed_out: np.ndarray | None = field(default=None)

    def __post_init__(self):
        self.w = np.asarray(self.w, dtype=np.float64)
        if self.w.ndim != 1:
            raise ValueError("weights must be a flat vector")
        if not np.isfinite(self.w).all():
            raise ValueError("weights contain non-finite entries")

    def view(self, name: str) -> np.ndarray:
        offset, shape = self.layout[name]
        size = int(np.prod(shape))
        return self.w[offset:offset + size].reshape(shape)

    def copy(self) -> "ModelWeights":
        return ModelWeights(self.w.copy(), self.layout, self.fixed_out)


@dataclass(frozen=True)
class Batch:
    X: np.ndarray
    Y: np.ndarray

    def __post_init__(self):
        X = np.asarray(self.X, dtype=np.float64)
        Y = np.asarray(self.Y, dtype=np.float64)
        if X.ndim != 2 or Y.ndim != 2:
            raise ValueError("X and Y must be 2-D")
        if X.shape[0] != Y.shape[0]:
            raise ValueError(f"row count mismatch: X has {X.shape[0]}, Y has {Y.shape[0]}")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "Y", Y)


def init_weights(cfg: ModelConfig, seed) -> ModelWeights:
    """Draw fresh weights, deterministically for a given seed or generator.

    theory: v_r ~ N(0, I), frozen c_r uniform on {-1, +1}.
    experiment: each layer N(0, 1/fan_in), biases zero.
    """
    rng = np.random.default_rng(seed)
    layout = cfg.layout()
    if cfg.variant == "theory":
        v = rng.standard_normal((cfg.hidden, cfg.d1))
        c = rng.integers(0, 2, size=cfg.hidden).astype(np.float64) * 2.0 - 1.0
        return ModelWeights(v.reshape(-1), layout, fixed_out=c)
    w1 = rng.standard_normal((cfg.hidden, cfg.d1)) * np.sqrt(1.0 / cfg.d1)
    w2 = rng.standard_normal((cfg.d2, cfg.hidden)) * np.sqrt(1.0 / cfg.hidden)
    w = np.zeros(cfg.weight_dim, dtype=np.float64)
    weights = ModelWeights(w, layout)
    weights.view("W1")[:] = w1
    weights.view("W2")[:] = w2
    return weights


def _check_inputs(cfg: ModelConfig, X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != cfg.d1:
        raise ValueError(f"expected inputs of shape (N, {cfg.d1}), got {X.shape}")
    return X


def forward(weights: ModelWeights, cfg: ModelConfig, X: np.ndarray) -> np.ndarray:
    """Network outputs for a batch, shape (N, d2)."""
    X = _check_inputs(cfg, X)
    if cfg.variant == "theory":
        z = X @ weights.view("V").T
        return (np.maximum(z, 0.0) @ weights.fixed_out)[:, None] / np.sqrt(cfg.hidden)
    a = np.maximum(X @ weights.view("W1").T + weights.view("b1"), 0.0)
    return a @ weights.view("W2").T + weights.view("b2")


def forward_one(weights: ModelWeights, cfg: ModelConfig, x: np.ndarray) -> np.ndarray:
    """Single-sample output, shape (d2,).

    Uses per-sample matvecs so the result never depends on how samples are
    batched; client uploads rely on this for exact cohort-split invariance.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (cfg.d1,):
        raise ValueError(f"expected input of shape ({cfg.d1},), got {x.shape}")
    if cfg.variant == "theory":
        z = weights.view("V") @ x
        return np.array([float(np.maximum(z, 0.0) @ weights.fixed_out) / np.sqrt(cfg.hidden)])
    a = np.maximum(weights.view("W1") @ x + weights.view("b1"), 0.0)
    return weights.view("W2") @ a + weights.view("b2")


def loss(pred: np.ndarray, Y: np.ndarray) -> float:
    """Halved MSE averaged over samples and output components."""
    pred = np.asarray(pred, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if pred.shape != Y.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {Y.shape}")
    n, d2 = pred.shape
    diff = pred - Y
    return float(np.dot(diff.ravel(), diff.ravel())) * 0.5 / (n * d2)


def _jacobian_into(out: np.ndarray, weights: ModelWeights, cfg: ModelConfig, x: np.ndarray):
    """Write the d2 x d Jacobian of f(x) w.r.t. the flat weights into out."""
    if cfg.variant == "theory":
        z = weights.view("V") @ x
        active = (z > 0.0).astype(np.float64)
        scale = weights.fixed_out * active / np.sqrt(cfg.hidden)
        # row j=0 of the Jacobian, viewed as (hidden, d1)
        np.multiply.outer(scale, x, out=out.reshape(cfg.hidden, cfg.d1))
        return
    w1, b1 = weights.view("W1"), weights.view("b1")
    w2 = weights.view("W2")
    z = w1 @ x + b1
    a = np.maximum(z, 0.0)
    mask = (z > 0.0).astype(np.float64)
    layout = weights.layout
    n, d1, d2 = cfg.hidden, cfg.d1, cfg.d2
    off, _ = layout["W1"]
    jw1 = out[:, off:off + n * d1].reshape(d2, n, d1)
    np.einsum("jh,h,l->jhl", w2, mask, x, out=jw1)
    off, _ = layout["b1"]
    np.multiply(w2, mask[None, :], out=out[:, off:off + n].reshape(d2, n))
    off, _ = layout["W2"]
    jw2 = out[:, off:off + d2 * n].reshape(d2, d2, n)
    jw2[:] = 0.0
    for j in range(d2):
        jw2[j, j, :] = a
    off, _ = layout["b2"]
    jb2 = out[:, off:off + d2].reshape(d2, d2)
    jb2[:] = np.eye(d2)


def per_sample_jacobian(weights: ModelWeights, cfg: ModelConfig, x: np.ndarray) -> np.ndarray:
    """Jacobian of the network output at one input: row j is df_j/dw."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (cfg.d1,):
        raise ValueError(f"expected input of shape ({cfg.d1},), got {x.shape}")
    out = np.zeros((cfg.d2, cfg.weight_dim), dtype=np.float64)
    _jacobian_into(out, weights, cfg, x)
    return out


def batch_jacobian(weights: ModelWeights, cfg: ModelConfig, X: np.ndarray) -> np.ndarray:
    """Stack of per-sample Jacobians, shape (N, d2, d), sample order preserved."""
    X = _check_inputs(cfg, X)
    out = np.zeros((X.shape[0], cfg.d2, cfg.weight_dim), dtype=np.float64)
    for i in range(X.shape[0]):
        _jacobian_into(out[i], weights, cfg, X[i])
    return out


def batch_gradient(weights: ModelWeights, cfg: ModelConfig, batch: Batch) -> np.ndarray:
    """Gradient of the halved-MSE batch loss w.r.t. the flat weight vector.

    Algebraically equal to (1/(N d2)) sum_i J(x_i)^T (f(x_i) - y_i), but
    computed by plain backpropagation without materialising Jacobians.
    """
    X = _check_inputs(cfg, batch.X)
    Y = batch.Y
    if Y.shape != (X.shape[0], cfg.d2):
        raise ValueError(f"expected targets of shape ({X.shape[0]}, {cfg.d2}), got {Y.shape}")
    n_samples = X.shape[0]
    grad = np.zeros(cfg.weight_dim, dtype=np.float64)
    out = ModelWeights(grad, weights.layout, weights.fixed_out)
    if cfg.variant == "theory":
        v = weights.view("V")
        z = X @ v.T
        pred = (np.maximum(z, 0.0) @ weights.fixed_out)[:, None] / np.sqrt(cfg.hidden)
        resid = (pred - Y) / (n_samples * cfg.d2)
        h = resid * ((z > 0.0) * (weights.fixed_out / np.sqrt(cfg.hidden)))
        out.view("V")[:] = h.T @ X
        return grad
    w1, b1 = weights.view("W1"), weights.view("b1")
    w2, b2 = weights.view("W2"), weights.view("b2")
    z = X @ w1.T + b1
    a = np.maximum(z, 0.0)
    resid = (a @ w2.T + b2 - Y) / (n_samples * cfg.d2)
    h = (resid @ w2) * (z > 0.0)
    out.view("W1")[:] = h.T @ X
    out.view("b1")[:] = h.sum(axis=0)
    out.view("W2")[:] = resid.T @ a
    out.view("b2")[:] = resid.sum(axis=0)
    return grad
