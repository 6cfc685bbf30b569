"""Experiment configuration: JSON schema, defaults, and validation.

Configs are plain JSON with four sections (dataset, model, rounds, cp plus
an optional compare block).  Unknown keys are rejected and every violation
names the offending key and its constraint.  All randomness downstream is
derived from the single master seed here, keyed by fixed labels (see rng).
"""

import copy
import json
from dataclasses import asdict, dataclass, field

from .fed import SCHEMES

__all__ = ["ExperimentConfig", "parse_config", "config_from_dict", "config_to_dict"]

DEFAULT_T_GRID = tuple(range(100, 2001, 100))


@dataclass(frozen=True)
class DatasetConfig:
    kind: str = "synthetic"
    n_train: int = 2000
    n_test: int = 500
    input_dim: int = 32
    classes: int = 10
    center_scale: float = 3.0
    spread: float = 0.6
    train_images: str | None = None
    train_labels: str | None = None
    test_images: str | None = None
    test_labels: str | None = None
    normalize: bool = False


@dataclass(frozen=True)
class ModelSection:
    hidden: int = 100
    variant: str = "experiment"


@dataclass(frozen=True)
class RoundsSection:
    scheme: str = "ntkfl"
    clients_total: int = 50
    clients_per_round: int = 10
    rounds: int = 10
    alpha: float = 0.5
    eta: float = 0.1
    t_grid: tuple[int, ...] = DEFAULT_T_GRID
    tau: int = 10
    batch_size: int = 200
    fedavg_lr: float | None = None
    fedavg_weighted: bool = False
    t_select: str = "train"
    val_fraction: float = 0.1
    centralized_steps: int = 100
    centralized_lr: float = 0.1


@dataclass(frozen=True)
class CpSection:
    beta: float = 1.0
    proj_dim: int | None = None
    sparsity: float = 0.0


@dataclass(frozen=True)
class CompareSection:
    schemes: tuple[str, ...] = ("ntkfl", "fedavg")
    target_accuracy: float = 0.75
    tau_grid: tuple[int, ...] = (5, 10, 20)


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    output_dir: str = "runs/ntkfed"
    record_wall_time: bool = False
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    model: ModelSection = field(default_factory=ModelSection)
    rounds: RoundsSection = field(default_factory=RoundsSection)
    cp: CpSection = field(default_factory=CpSection)
    compare: CompareSection = field(default_factory=CompareSection)


def _fail(key: str, constraint: str):
    raise ValueError(f"{key} {constraint}")


def _check_type(key, value, types, constraint):
    if isinstance(value, bool) and bool not in (types if isinstance(types, tuple) else (types,)):
        _fail(key, constraint)
    if not isinstance(value, types):
        _fail(key, constraint)
    return value


def _take(section: dict, known: set[str], prefix: str):
    for key in section:
        if key not in known:
            _fail(f"{prefix}.{key}" if prefix else key, "is not a recognized key")


def _validate_dataset(raw: dict) -> DatasetConfig:
    defaults = DatasetConfig()
    _take(raw, set(defaults.__dataclass_fields__), "dataset")
    merged = {**asdict(defaults), **raw}
    if merged["kind"] not in ("synthetic", "idx"):
        _fail("dataset.kind", "must be 'synthetic' or 'idx'")
    if merged["kind"] == "synthetic":
        for key in ("n_train", "n_test", "input_dim", "classes"):
            if not isinstance(merged[key], int) or merged[key] < 1:
                _fail(f"dataset.{key}", "must be a positive integer")
        if merged["n_train"] < merged["classes"]:
            _fail("dataset.n_train", "must be at least dataset.classes")
        for key in ("center_scale", "spread"):
            if not isinstance(merged[key], (int, float)) or merged[key] <= 0:
                _fail(f"dataset.{key}", "must be a positive number")
    else:
        for key in ("train_images", "train_labels", "test_images", "test_labels"):
            if not isinstance(merged[key], str):
                _fail(f"dataset.{key}", "must be a file path for kind 'idx'")
    _check_type("dataset.normalize", merged["normalize"], bool, "must be a boolean")
    return DatasetConfig(**merged)


def _validate_model(raw: dict) -> ModelSection:
    defaults = ModelSection()
    _take(raw, set(defaults.__dataclass_fields__), "model")
    merged = {**asdict(defaults), **raw}
    if not isinstance(merged["hidden"], int) or merged["hidden"] < 1:
        _fail("model.hidden", "must be a positive integer")
    if merged["variant"] not in ("experiment", "theory"):
        _fail("model.variant", "must be 'experiment' or 'theory'")
    return ModelSection(**merged)


def _validate_rounds(raw: dict) -> RoundsSection:
    defaults = RoundsSection()
    _take(raw, set(defaults.__dataclass_fields__), "rounds")
    merged = {**asdict(defaults), **raw}
    if merged["scheme"] not in SCHEMES:
        _fail("rounds.scheme", f"must be one of {', '.join(SCHEMES)}")
    for key in ("clients_total", "clients_per_round", "rounds", "tau", "batch_size",
                "centralized_steps"):
        if not isinstance(merged[key], int) or merged[key] < 0:
            _fail(f"rounds.{key}", "must be a nonnegative integer")
    if merged["clients_total"] < 1:
        _fail("rounds.clients_total", "must be at least 1")
    if not 1 <= merged["clients_per_round"] <= merged["clients_total"]:
        _fail("rounds.clients_per_round", "must lie in [1, clients_total]")
    if merged["tau"] < 1:
        _fail("rounds.tau", "must be at least 1")
    for key in ("alpha", "eta", "centralized_lr"):
        if not isinstance(merged[key], (int, float)) or merged[key] <= 0:
            _fail(f"rounds.{key}", "must be a positive number")
    if merged["fedavg_lr"] is not None and (
            not isinstance(merged["fedavg_lr"], (int, float)) or merged["fedavg_lr"] <= 0):
        _fail("rounds.fedavg_lr", "must be null or a positive number")
    grid = merged["t_grid"]
    if (not isinstance(grid, (list, tuple)) or not grid
            or any(not isinstance(t, int) or t < 1 for t in grid)
            or any(b <= a for a, b in zip(grid, grid[1:]))):
        _fail("rounds.t_grid", "must be a strictly increasing list of positive integers")
    merged["t_grid"] = tuple(grid)
    if merged["t_select"] not in ("train", "validation"):
        _fail("rounds.t_select", "must be 'train' or 'validation'")
    if not isinstance(merged["val_fraction"], (int, float)) or not 0 <= merged["val_fraction"] < 1:
        _fail("rounds.val_fraction", "must lie in [0, 1)")
    _check_type("rounds.fedavg_weighted", merged["fedavg_weighted"], bool, "must be a boolean")
    return RoundsSection(**merged)


def _validate_cp(raw: dict) -> CpSection:
    defaults = CpSection()
    _take(raw, set(defaults.__dataclass_fields__), "cp")
    merged = {**asdict(defaults), **raw}
    beta = merged["beta"]
    if not isinstance(beta, (int, float)) or not 0 < beta <= 1:
        _fail("cp.beta", "must lie in (0,1]")
    if merged["proj_dim"] is not None and (
            not isinstance(merged["proj_dim"], int) or merged["proj_dim"] < 1):
        _fail("cp.proj_dim", "must be null or a positive integer")
    sparsity = merged["sparsity"]
    if not isinstance(sparsity, (int, float)) or not 0 <= sparsity < 1:
        _fail("cp.sparsity", "must lie in [0,1)")
    return CpSection(**merged)


def _validate_compare(raw: dict) -> CompareSection:
    defaults = CompareSection()
    _take(raw, set(defaults.__dataclass_fields__), "compare")
    merged = {**asdict(defaults), **raw}
    schemes = merged["schemes"]
    if not isinstance(schemes, (list, tuple)) or not schemes or \
            any(s not in SCHEMES for s in schemes):
        _fail("compare.schemes", f"must be a nonempty list drawn from {', '.join(SCHEMES)}")
    merged["schemes"] = tuple(schemes)
    target = merged["target_accuracy"]
    if not isinstance(target, (int, float)) or not 0 <= target < 1:
        _fail("compare.target_accuracy", "must lie in [0,1)")
    taus = merged["tau_grid"]
    if not isinstance(taus, (list, tuple)) or not taus or \
            any(not isinstance(t, int) or t < 1 for t in taus):
        _fail("compare.tau_grid", "must be a nonempty list of positive integers")
    merged["tau_grid"] = tuple(taus)
    return CompareSection(**merged)


def config_from_dict(raw: dict) -> ExperimentConfig:
    """Validate a raw JSON object into an ExperimentConfig, filling defaults."""
    raw = copy.deepcopy(raw)
    _take(raw, {"seed", "output_dir", "record_wall_time",
                "dataset", "model", "rounds", "cp", "compare"}, "")
    seed = raw.get("seed", 0)
    if not isinstance(seed, int) or seed < 0 or seed >= 2**64:
        _fail("seed", "must be an unsigned 64-bit integer")
    output_dir = raw.get("output_dir", ExperimentConfig.output_dir)
    if not isinstance(output_dir, str) or not output_dir:
        _fail("output_dir", "must be a nonempty string")
    record = raw.get("record_wall_time", False)
    _check_type("record_wall_time", record, bool, "must be a boolean")
    for section in ("dataset", "model", "rounds", "cp", "compare"):
        if not isinstance(raw.get(section, {}), dict):
            _fail(section, "must be an object")
    cfg = ExperimentConfig(
        seed=seed,
        output_dir=output_dir,
        record_wall_time=record,
        dataset=_validate_dataset(raw.get("dataset", {})),
        model=_validate_model(raw.get("model", {})),
        rounds=_validate_rounds(raw.get("rounds", {})),
        cp=_validate_cp(raw.get("cp", {})),
        compare=_validate_compare(raw.get("compare", {})),
    )
    if cfg.rounds.scheme == "cp-ntkfl":
        if cfg.cp.proj_dim is None:
            _fail("cp.proj_dim", "is required for scheme 'cp-ntkfl'")
        if cfg.dataset.kind == "synthetic" and cfg.cp.proj_dim > cfg.dataset.input_dim:
            _fail("cp.proj_dim", "must not exceed dataset.input_dim")
    if cfg.model.variant == "theory" and cfg.dataset.classes != 1 \
            and cfg.rounds.scheme != "centralized":
        # theory nets are single-output; federated classification needs d2 = classes
        _fail("model.variant", "must be 'experiment' for multi-class federated runs")
    return cfg


def config_to_dict(cfg: ExperimentConfig) -> dict:
    """Inverse of config_from_dict (tuples become lists, as in JSON)."""
    out = asdict(cfg)
    out["rounds"]["t_grid"] = list(cfg.rounds.t_grid)
    out["compare"]["schemes"] = list(cfg.compare.schemes)
    out["compare"]["tau_grid"] = list(cfg.compare.tau_grid)
    return out


def parse_config(path) -> ExperimentConfig:
    """Load and validate a JSON experiment config from disk."""
    with open(path, "r", encoding="utf-8") as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValueError(f"config is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ValueError("config root must be a JSON object")
    return config_from_dict(raw)
