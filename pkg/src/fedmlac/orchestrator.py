"""Round loop: client sampling, local updates, aggregation, evaluation."""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .client import (
    ClientError,
    ClientState,
    ClientUpload,
    LocalUpdateConfig,
    fedavg_update,
    fedmlac_update,
    fedprox_update,
    make_heterogeneous_fleet,
)
from .data import (
    Dataset,
    PartitionPlan,
    dirichlet_partition,
    group_partition,
    iid_partition,
    inject_gaussian_noise,
    inject_label_errors,
    load_feature_csv,
    split_indices,
    synth_gaussian_mixture,
)
from .nn import LayerParams, ModelParams, ModelSpec, forward, init_model
from .server import (
    AggregationAudit,
    AggregationConfig,
    fedavg_aggregate,
    lpa_aggregate,
    write_audit_lines,
)

ALGORITHMS = ("fedmlac", "fedmlac_no_lpa", "fedmlac_no_ml", "fedavg", "fedprox")
ADVERSARIES = ("none", "label_flip", "feature_noise", "model_scale")
METRICS_COLUMNS = (
    "round",
    "algorithm",
    "seed",
    "test_acc",
    "macro_f1",
    "mean_train_loss",
    "mean_grad_sq",
    "n_sampled",
    "trusted_min",
    "trusted_max",
)

# stream tags for derive_seed
_DATA, _TEST_SPLIT, _PARTITION, _LOCAL_SPLIT, _FLEET = 1, 2, 3, 4, 5
_PLUGIN_INIT, _LOCAL_INIT, _CLIENT, _ROUND, _ADVERSARY = 6, 7, 8, 9, 10


def derive_seed(master_seed: int, *keys: int) -> int:
    """Platform-stable 64-bit seed for one named random stream."""
    seq = np.random.SeedSequence([int(master_seed), *map(int, keys)])
    return int(seq.generate_state(1, dtype=np.uint64)[0])


@dataclass
class DataConfig:
    source: str = "synthetic"  # "synthetic" or a CSV path
    num_classes: int = 4
    dim: int = 8
    n_per_class: int = 150
    cluster_spread: float = 0.5
    n_groups: int | None = None
    partition: str = "dirichlet"  # dirichlet | iid | group
    dirichlet_alpha: float = 0.5
    test_fraction: float = 0.1
    local_test_fraction: float = 0.2
    seed: int | None = None  # None -> master_seed


@dataclass
class ModelConfig:
    plugin_hidden: tuple[int, ...] = (16,)
    # one entry per architecture variant; empty -> clients use plugin_hidden
    local_hidden: tuple[tuple[int, ...], ...] = ()
    activation: str = "tanh"


@dataclass
class AdversaryConfig:
    kind: str = "none"
    fraction: float = 0.0
    rate: float = 0.0  # label_flip
    snr_db: float = 100.0  # feature_noise
    factor: float = 1.0  # model_scale
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ADVERSARIES:
            raise ValueError(f"adversary kind must be one of {ADVERSARIES}, got {self.kind!r}")
        if not 0.0 <= self.fraction <= 1.0:
            raise ValueError("adversary fraction must lie in [0, 1]")


@dataclass
class FederationConfig:
    algorithm: str = "fedmlac"
    rounds: int = 5000
    active_ratio: float = 0.2
    num_clients: int = 10
    master_seed: int = 0
    eval_mode: str = "global"  # which evaluation fills test_acc / macro_f1
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    local: LocalUpdateConfig = field(default_factory=LocalUpdateConfig)
    aggregation: AggregationConfig = field(default_factory=AggregationConfig)
    adversary: AdversaryConfig = field(default_factory=AdversaryConfig)

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"algorithm must be one of {ALGORITHMS}, got {self.algorithm!r}")
        if self.rounds < 1:
            raise ValueError("rounds must be >= 1")
        if not 0.0 < self.active_ratio <= 1.0:
            raise ValueError("active_ratio must lie in (0, 1]")
        if self.num_clients < 1:
            raise ValueError("num_clients must be >= 1")
        if self.eval_mode not in ("global", "personalized"):
            raise ValueError("eval_mode must be 'global' or 'personalized'")


@dataclass
class RoundRecord:
    round: int
    sampled: list[int]
    test_acc: float
    macro_f1: float
    mean_train_loss: float
    mean_grad_sq: float
    trusted_sizes: list[int]
    trusted_members: list[list[int]] | None = None
    global_acc: float = float("nan")
    global_f1: float = float("nan")
    personal_acc: float | None = None
    personal_f1: float | None = None

    def csv_row(self, algorithm: str, seed: int) -> list:
        return [
            self.round,
            algorithm,
            seed,
            repr(self.test_acc),
            repr(self.macro_f1),
            repr(self.mean_train_loss),
            repr(self.mean_grad_sq),
            len(self.sampled),
            min(self.trusted_sizes),
            max(self.trusted_sizes),
        ]


@dataclass
class Federation:
    cfg: FederationConfig
    clients: list[ClientState]
    global_model: ModelParams
    plugin_spec: ModelSpec
    test_set: Dataset
    plan: PartitionPlan
    adversaries: frozenset[int]

    @property
    def homogeneous(self) -> bool:
        return all(c.local_model.spec == self.plugin_spec for c in self.clients)


class RoundError(RuntimeError):
    def __init__(self, round_index: int, cause: Exception):
        self.round_index = round_index
        super().__init__(f"round {round_index}: {cause}")


# --- metrics -----------------------------------------------------------------


def evaluate(model: ModelParams, test_set: Dataset) -> tuple[float, float]:
    """Accuracy and macro-F1 of argmax predictions.

    Macro-F1 averages per-class F1 over the classes that occur in either the
    labels or the predictions; a 0/0 precision or recall counts as 0.
    """
    if test_set is None or len(test_set) == 0:
        raise ValueError("empty test set")
    pred = forward(model, test_set.X).argmax(axis=1)
    return accuracy_and_macro_f1(test_set.y, pred)


def accuracy_and_macro_f1(y_true: np.ndarray, y_pred: np.ndarray) -> tuple[float, float]:
    y_true = np.asarray(y_true)
    y_pred = np.asarray(y_pred)
    if y_true.size == 0:
        raise ValueError("empty test set")
    acc = float(np.mean(y_true == y_pred))
    f1s = []
    for c in np.union1d(y_true, y_pred):
        tp = np.sum((y_pred == c) & (y_true == c))
        fp = np.sum((y_pred == c) & (y_true != c))
        fn = np.sum((y_pred != c) & (y_true == c))
        denom = 2 * tp + fp + fn
        f1s.append(2.0 * tp / denom if denom else 0.0)
    return acc, float(np.mean(f1s))


def sample_clients(num_clients: int, active_ratio: float, round_seed: int) -> list[int]:
    """``max(1, round(active_ratio * N))`` distinct ids, sorted."""
    size = min(num_clients, max(1, int(round(active_ratio * num_clients))))
    rng = np.random.default_rng(round_seed)
    return sorted(int(i) for i in rng.choice(num_clients, size=size, replace=False))


def rate_check(records: Sequence[RoundRecord] | Sequence[float], min_rounds: int = 50) -> float:
    """Least-squares slope of log(running mean of grad^2) against log t over
    the trailing 80% of rounds (t counted from 1)."""
    g = np.array([r.mean_grad_sq if isinstance(r, RoundRecord) else r for r in records], dtype=float)
    if len(g) < min_rounds:
        raise ValueError(f"rate check needs >= {min_rounds} rounds, got {len(g)}")
    t = np.arange(1, len(g) + 1, dtype=float)
    running = np.cumsum(g) / t
    start = int(math.floor(0.2 * len(g)))
    slope, _ = np.polyfit(np.log(t[start:]), np.log(running[start:]), 1)
    return float(slope)


# --- setup -------------------------------------------------------------------


def load_dataset(cfg: FederationConfig) -> Dataset:
    dc = cfg.data
    seed = cfg.master_seed if dc.seed is None else dc.seed
    if dc.source == "synthetic":
        return synth_gaussian_mixture(
            dc.num_classes, dc.dim, dc.n_per_class, dc.cluster_spread,
            derive_seed(seed, _DATA), dc.n_groups,
        )
    return load_feature_csv(dc.source)


def plugin_spec_for(cfg: FederationConfig, in_dim: int, num_classes: int) -> ModelSpec:
    return ModelSpec.mlp(in_dim, cfg.model.plugin_hidden, num_classes, cfg.model.activation)


def build_federation(cfg: FederationConfig, dataset: Dataset | None = None) -> Federation:
    """Split data, corrupt adversarial clients, assign architectures, init models."""
    ds = dataset if dataset is not None else load_dataset(cfg)
    seed = cfg.master_seed
    data_seed = seed if cfg.data.seed is None else cfg.data.seed

    pool_idx, test_idx = split_indices(
        len(ds), cfg.data.test_fraction, np.random.default_rng(derive_seed(data_seed, _TEST_SPLIT))
    )
    if len(test_idx) == 0:
        raise ValueError("global test split is empty; raise test_fraction or add data")
    test_set = ds.subset(test_idx)
    pool = ds.subset(pool_idx)

    n_clients = cfg.num_clients
    if cfg.data.partition == "dirichlet":
        plan = dirichlet_partition(pool, n_clients, cfg.data.dirichlet_alpha, derive_seed(data_seed, _PARTITION))
    elif cfg.data.partition == "iid":
        plan = iid_partition(pool, n_clients, derive_seed(data_seed, _PARTITION))
    elif cfg.data.partition == "group":
        plan = group_partition(pool)
        if plan.num_clients != n_clients:
            raise ValueError(
                f"group partition yields {plan.num_clients} clients but num_clients={n_clients}"
            )
    else:
        raise ValueError(f"unknown partition strategy {cfg.data.partition!r}")

    adv = cfg.adversary
    n_adv = int(round(adv.fraction * n_clients)) if adv.kind != "none" else 0
    adv_rng = np.random.default_rng(derive_seed(seed, _ADVERSARY, adv.seed))
    adversaries = frozenset(int(i) for i in adv_rng.choice(n_clients, size=n_adv, replace=False)) if n_adv else frozenset()

    p_spec = plugin_spec_for(cfg, ds.feature_dim, ds.num_classes)
    variants = cfg.model.local_hidden or (cfg.model.plugin_hidden,)
    specs = [ModelSpec.mlp(ds.feature_dim, h, ds.num_classes, cfg.model.activation) for h in variants]
    fleet = make_heterogeneous_fleet(specs, n_clients, derive_seed(seed, _FLEET))

    clients = []
    for k, indices in enumerate(plan.client_indices):
        local = pool.subset(indices)
        tr, te = split_indices(
            len(local), cfg.data.local_test_fraction,
            np.random.default_rng(derive_seed(data_seed, _LOCAL_SPLIT, k)),
        )
        train = local.subset(tr)
        if k in adversaries:
            corrupt_seed = derive_seed(seed, _ADVERSARY, adv.seed, k)
            if adv.kind == "label_flip":
                train = inject_label_errors(train, adv.rate, corrupt_seed)
            elif adv.kind == "feature_noise":
                train = inject_gaussian_noise(train, adv.snr_db, corrupt_seed)
        model = init_model(fleet[k], np.random.default_rng(derive_seed(seed, _LOCAL_INIT, k)))
        clients.append(
            ClientState(k, train, model, derive_seed(seed, _CLIENT, k), local.subset(te) if len(te) else None)
        )

    global_model = init_model(p_spec, np.random.default_rng(derive_seed(seed, _PLUGIN_INIT)))
    fed = Federation(cfg, clients, global_model, p_spec, test_set, plan, adversaries)
    if cfg.algorithm in ("fedavg", "fedprox") and not fed.homogeneous:
        raise ValueError(f"{cfg.algorithm} needs every client to use the global architecture")
    return fed


# --- rounds ------------------------------------------------------------------


def _scale_upload(upload: ClientUpload, broadcast: ModelParams, factor: float) -> None:
    # Boosted poisoning: the upload's offset from the broadcast model is
    # multiplied by ``factor``. Scaling raw parameters instead makes plain
    # averaging overflow float64 within a few hundred rounds.
    upload.model = ModelParams(
        broadcast.spec,
        [
            LayerParams(b.weights + factor * (u.weights - b.weights), b.bias + factor * (u.bias - b.bias))
            for u, b in zip(upload.model.layers, broadcast.layers)
        ],
    )


def local_update(fed: Federation, client: ClientState, broadcast: ModelParams, t: int) -> ClientUpload:
    cfg = fed.cfg
    algo = cfg.algorithm
    if algo in ("fedmlac", "fedmlac_no_lpa"):
        return fedmlac_update(client, broadcast, cfg.local, t, fed.plugin_spec)
    if algo == "fedmlac_no_ml":
        local_cfg = LocalUpdateConfig(**{**cfg.local.__dict__, "alpha": 1.0})
        if client.local_model.spec == fed.plugin_spec:
            return fedavg_update(client, broadcast, local_cfg, t)
        return fedmlac_update(client, broadcast, local_cfg, t, fed.plugin_spec, plugin_objective="ce")
    if algo == "fedavg":
        return fedavg_update(client, broadcast, cfg.local, t)
    return fedprox_update(client, broadcast, cfg.local, t)


def personal_model(fed: Federation, client: ClientState) -> ModelParams:
    """The model a client would serve: its own for mutual-learning variants,
    the global one when local training restarts from it every round."""
    algo = fed.cfg.algorithm
    if algo in ("fedavg", "fedprox"):
        return fed.global_model
    if algo == "fedmlac_no_ml" and client.local_model.spec == fed.plugin_spec:
        return fed.global_model
    return client.local_model


def evaluate_personalized(fed: Federation) -> tuple[float, float]:
    """Unweighted mean over clients of local-test accuracy and macro-F1."""
    accs, f1s = [], []
    for c in fed.clients:
        if c.test_set is None:
            continue
        a, f = evaluate(personal_model(fed, c), c.test_set)
        accs.append(a)
        f1s.append(f)
    if not accs:
        raise ValueError("no client holds a local test split")
    return float(np.mean(accs)), float(np.mean(f1s))


def run_round(fed: Federation, t: int, audit_fh=None) -> RoundRecord:
    """Broadcast, train sampled clients, aggregate, evaluate."""
    cfg = fed.cfg
    if t >= cfg.rounds:
        raise ValueError(f"round {t} beyond configured T={cfg.rounds}")
    try:
        sampled = sample_clients(cfg.num_clients, cfg.active_ratio, derive_seed(cfg.master_seed, _ROUND, t))
        broadcast = fed.global_model
        uploads = []
        for k in sampled:
            up = local_update(fed, fed.clients[k], broadcast, t)
            if cfg.adversary.kind == "model_scale" and k in fed.adversaries:
                _scale_upload(up, broadcast, cfg.adversary.factor)
            uploads.append(up)

        audit: AggregationAudit | None = None
        if cfg.algorithm in ("fedmlac", "fedmlac_no_ml"):
            new_global, audit = lpa_aggregate(uploads, cfg.aggregation, return_audit=True)
            if audit_fh is not None:
                write_audit_lines(audit_fh, audit, t)
        else:
            new_global = fedavg_aggregate(uploads)
        if not new_global.is_finite():
            raise FloatingPointError("aggregated model has non-finite parameters")
        fed.global_model = new_global

        g_acc, g_f1 = evaluate(new_global, fed.test_set)
        p_acc = p_f1 = None
        if cfg.eval_mode == "personalized" or t == cfg.rounds - 1:
            p_acc, p_f1 = evaluate_personalized(fed)
    except (ClientError, ValueError, FloatingPointError) as exc:
        raise RoundError(t, exc) from exc

    if audit is not None:
        sizes = [len(ts.members) for ts in audit.trusted]
    else:
        sizes = [len(sampled)] * fed.plugin_spec.num_layers
    acc, f1 = (p_acc, p_f1) if cfg.eval_mode == "personalized" else (g_acc, g_f1)
    return RoundRecord(
        round=t,
        sampled=sampled,
        test_acc=acc,
        macro_f1=f1,
        mean_train_loss=float(np.mean([u.train_loss for u in uploads])),
        mean_grad_sq=float(np.mean([u.grad_sq_norm for u in uploads])),
        trusted_sizes=sizes,
        trusted_members=[list(ts.members) for ts in audit.trusted] if audit else None,
        global_acc=g_acc,
        global_f1=g_f1,
        personal_acc=p_acc,
        personal_f1=p_f1,
    )


@dataclass
class SimulationResult:
    records: list[RoundRecord]
    federation: Federation
    summary: dict


def run_simulation(
    cfg: FederationConfig,
    metrics_path: str | Path | None = None,
    audit_path: str | Path | None = None,
    dataset: Dataset | None = None,
    progress=None,
) -> SimulationResult:
    """Run ``cfg.rounds`` rounds. Metric rows are appended and flushed one
    round at a time so an interrupted run leaves a readable prefix."""
    start = time.perf_counter()
    fed = build_federation(cfg, dataset)
    records: list[RoundRecord] = []
    metrics_fh = open(metrics_path, "w", newline="") if metrics_path else None
    audit_fh = open(audit_path, "w") if audit_path else None
    try:
        writer = csv.writer(metrics_fh, lineterminator="\n") if metrics_fh else None
        if writer:
            writer.writerow(METRICS_COLUMNS)
            metrics_fh.flush()
        for t in range(cfg.rounds):
            rec = run_round(fed, t, audit_fh)
            records.append(rec)
            if writer:
                writer.writerow(rec.csv_row(cfg.algorithm, cfg.master_seed))
                metrics_fh.flush()
            if audit_fh:
                audit_fh.flush()
            if progress is not None:
                progress(rec)
    finally:
        if metrics_fh:
            metrics_fh.close()
        if audit_fh:
            audit_fh.close()

    last = records[-1]
    summary = {
        "algorithm": cfg.algorithm,
        "seed": cfg.master_seed,
        "rounds": len(records),
        "eval_mode": cfg.eval_mode,
        "final_test_acc": last.test_acc,
        "final_macro_f1": last.macro_f1,
        "final_global_acc": last.global_acc,
        "final_global_f1": last.global_f1,
        "final_personal_acc": last.personal_acc,
        "final_personal_f1": last.personal_f1,
        "adversaries": sorted(fed.adversaries),
        "wall_seconds": time.perf_counter() - start,
    }
    if len(records) >= 50:
        summary["grad_rate_slope"] = rate_check(records)
    return SimulationResult(records, fed, summary)
