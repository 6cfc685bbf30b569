"""Experiment driver: dataset assembly, partitioning, and the round loop.

Every random draw is tied to the master seed through fixed labels, so a full
multi-round run is reproducible bit for bit from the config alone, and new
labelled components never disturb existing streams.
"""

import time
from dataclasses import dataclass, replace

import numpy as np

from . import analysis, cp, data, fed, model
from .config import ExperimentConfig
from .rng import derive_seed, stream

__all__ = ["ExperimentData", "load_experiment_data", "build_partition", "run_experiment"]


@dataclass
class ExperimentData:
    train: data.Dataset
    test: data.Dataset
    train_targets: np.ndarray
    test_targets: np.ndarray


def load_experiment_data(cfg: ExperimentConfig) -> ExperimentData:
    ds = cfg.dataset
    if ds.kind == "synthetic":
        pool = data.make_synthetic(ds.n_train + ds.n_test, ds.input_dim, ds.classes,
                                   stream(cfg.seed, "data"),
                                   center_scale=ds.center_scale, spread=ds.spread)
        train = data.Dataset(pool.X[:ds.n_train], pool.labels[:ds.n_train], pool.n_classes)
        test = data.Dataset(pool.X[ds.n_train:], pool.labels[ds.n_train:], pool.n_classes)
    else:
        train = data.load_idx(ds.train_images, ds.train_labels)
        test = data.load_idx(ds.test_images, ds.test_labels)
        classes = max(train.n_classes, test.n_classes)
        train = data.Dataset(train.X, train.labels, classes)
        test = data.Dataset(test.X, test.labels, classes)
    if ds.normalize:
        train = data.unit_normalize(train)
        test = data.unit_normalize(test)
    return ExperimentData(
        train=train,
        test=test,
        train_targets=data.one_hot(train.labels, train.n_classes),
        test_targets=data.one_hot(test.labels, test.n_classes),
    )


def build_partition(train: data.Dataset, cfg: ExperimentConfig) -> data.PartitionSpec:
    return data.dirichlet_partition(train, cfg.rounds.clients_total, cfg.rounds.alpha,
                                    stream(cfg.seed, "partition"))


def _model_config(cfg: ExperimentConfig, exp: ExperimentData) -> model.ModelConfig:
    scheme = cfg.rounds.scheme
    d1 = exp.train.X.shape[1]
    if scheme == "cp-ntkfl":
        d1 = cfg.cp.proj_dim
    return model.ModelConfig(d1=d1, hidden=cfg.model.hidden, d2=exp.train.n_classes,
                             variant=cfg.model.variant)


def _round_config(cfg: ExperimentConfig, tau: int | None) -> fed.RoundConfig:
    r = cfg.rounds
    return fed.RoundConfig(
        clients_total=r.clients_total,
        clients_per_round=r.clients_per_round,
        rounds=r.rounds,
        scheme=r.scheme,
        eta=r.eta,
        t_grid=r.t_grid,
        tau=r.tau if tau is None else tau,
        batch_size=r.batch_size,
        seed=cfg.seed,
        fedavg_lr=r.fedavg_lr,
        fedavg_weighted=r.fedavg_weighted,
    )


def _cohort_for(ids, part: data.PartitionSpec, exp: ExperimentData) -> fed.Cohort:
    return fed.Cohort(
        client_ids=[int(c) for c in ids],
        inputs=[exp.train.X[part.assignment[c]] for c in ids],
        targets=[exp.train_targets[part.assignment[c]] for c in ids],
    )


def _validation_split(cfg: ExperimentConfig, exp: ExperimentData):
    """Server-held split for validation-based step selection."""
    n = len(exp.train)
    n_val = int(cfg.rounds.val_fraction * n)
    if cfg.rounds.t_select != "validation" or n_val == 0:
        return None, None, np.arange(n)
    perm = stream(cfg.seed, "val-split").permutation(n)
    val_idx, rest = np.sort(perm[:n_val]), np.sort(perm[n_val:])
    return exp.train.X[val_idx], exp.train_targets[val_idx], rest


def run_experiment(cfg: ExperimentConfig, scheme: str | None = None, tau: int | None = None,
                   exp: ExperimentData | None = None, on_round=None,
                   ) -> tuple[list[fed.RoundMetrics], model.ModelWeights]:
    """Run the configured number of rounds for one scheme.

    ``scheme``/``tau`` override the config (the comparison command sweeps
    them); ``on_round`` is called with each RoundMetrics as it completes so
    callers can stream output.  Returns the per-round metrics and the final
    weights.
    """
    scheme = scheme or cfg.rounds.scheme
    if scheme not in fed.SCHEMES:
        raise ValueError(f"unknown scheme {scheme!r}")
    if exp is None:
        exp = load_experiment_data(cfg)
    if scheme != cfg.rounds.scheme:
        cfg = replace(cfg, rounds=replace(cfg.rounds, scheme=scheme))
    rcfg = _round_config(cfg, tau)
    mcfg = _model_config(cfg, exp)

    val_x, val_y, usable = _validation_split(cfg, exp)
    train_for_clients = data.Dataset(exp.train.X[usable], exp.train.labels[usable],
                                     exp.train.n_classes)
    part = data.dirichlet_partition(train_for_clients, rcfg.clients_total, cfg.rounds.alpha,
                                    stream(cfg.seed, "partition"))
    exp_for_rounds = ExperimentData(
        train=train_for_clients,
        test=exp.test,
        train_targets=data.one_hot(train_for_clients.labels, exp.train.n_classes),
        test_targets=exp.test_targets,
    )

    weights = model.init_weights(mcfg, stream(cfg.seed, "init"))
    projection = None
    test_x = exp.test.X
    if scheme == "cp-ntkfl":
        key_server = cp.KeyServer(cfg.seed)
        key_server.grant("client")
        projection = cp.gen_projection(key_server.fetch_seed("client"),
                                       exp.train.X.shape[1], cfg.cp.proj_dim)
        test_x = cp.project_inputs(test_x, projection)

    metrics: list[fed.RoundMetrics] = []
    for k in range(rcfg.rounds):
        started = time.perf_counter()
        ids = fed.sample_clients(rcfg.clients_total, rcfg.clients_per_round,
                                 stream(cfg.seed, "round", k, "client-sample"))
        lam_min = None
        if scheme == "ntkfl":
            cohort = _cohort_for(ids, part, exp_for_rounds)
            weights, m, state = fed.run_round_ntkfl(weights, mcfg, rcfg, cohort,
                                                    eval_X=val_x, eval_Y=val_y)
            lam_min = analysis.kernel_spectrum(state.kernel)[0]
            del state
        elif scheme == "cp-ntkfl":
            selected = data.PartitionSpec(tuple(part.assignment[c] for c in ids))
            reduced = data.subsample(selected, cfg.cp.beta, derive_seed(cfg.seed, "round", k))
            cohort = fed.Cohort(
                client_ids=[int(c) for c in ids],
                inputs=[exp_for_rounds.train.X[idx] for idx in reduced.assignment],
                targets=[exp_for_rounds.train_targets[idx] for idx in reduced.assignment],
            )
            weights, m, state = cp.run_round_cp_ntkfl(
                weights, mcfg, rcfg, cohort, projection, cfg.cp.sparsity,
                shuffle_seed=derive_seed(cfg.seed, "round", k))
            lam_min = analysis.kernel_spectrum(state.kernel)[0]
            del state
        elif scheme == "fedavg":
            cohort = _cohort_for(ids, part, exp_for_rounds)
            rngs = [stream(cfg.seed, "round", k, "client", int(c), "batch-perm") for c in ids]
            weights, m = fed.run_round_fedavg(weights, mcfg, rcfg, cohort, rngs)
        else:
            cohort = _cohort_for(ids, part, exp_for_rounds)
            pooled_x, pooled_y = cohort.pooled()
            weights, m = fed.run_centralized(weights, mcfg, pooled_x, pooled_y,
                                             cfg.rounds.centralized_steps,
                                             cfg.rounds.centralized_lr)
        acc, _ = fed.evaluate(weights, mcfg, test_x, exp.test.labels, exp.test_targets)
        m.round_index = k
        m.scheme = scheme
        m.test_acc = acc
        m.lambda_min = lam_min
        m.wall_ms = (time.perf_counter() - started) * 1000.0
        metrics.append(m)
        if on_round is not None:
            on_round(m)
    return metrics, weights
