"""Client-side local updates: mutual learning, FedAvg and FedProx."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from .data import Dataset
from .nn import (
    Batch,
    LayerParams,
    ModelParams,
    ModelSpec,
    ShapeError,
    ce_loss_and_grads,
    client_loss_and_grads,
    grad_sq_norm,
    plugin_loss_and_grads,
    sgd_step,
)


class ClientError(RuntimeError):
    def __init__(self, client_id: int, message: str):
        self.client_id = client_id
        super().__init__(f"client {client_id}: {message}")


@dataclass
class LocalUpdateConfig:
    epochs: int = 1
    batch_size: int = 16
    lr: float = 0.01
    alpha: float = 0.5
    temperature: float = 1.0
    prox_mu: float = 0.0
    # "snapshot": the plug-in's teacher is the local model as it was at the
    # start of the batch; "fresh": the local model right after its step.
    teacher: str = "snapshot"

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.lr >= 0:
            raise ValueError("lr must be non-negative")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")
        if not self.prox_mu >= 0:
            raise ValueError("prox_mu must be non-negative")
        if self.teacher not in ("snapshot", "fresh"):
            raise ValueError(f"teacher must be 'snapshot' or 'fresh', got {self.teacher!r}")


@dataclass
class ClientState:
    id: int
    dataset: Dataset
    local_model: ModelParams
    rng_seed: int
    test_set: Dataset | None = None

    def __post_init__(self):
        if self.local_model.spec.output_dim != self.dataset.num_classes:
            raise ShapeError(
                f"client {self.id}: model has {self.local_model.spec.output_dim} outputs "
                f"for {self.dataset.num_classes} classes"
            )


@dataclass
class ClientUpload:
    client_id: int
    model: ModelParams
    n_k: int
    train_loss: float
    grad_sq_norm: float
    meta: dict = field(default_factory=dict)


def batch_order(state: ClientState, round_index: int, epoch: int) -> np.ndarray:
    """Sample order for one epoch; a pure function of seed, round and epoch."""
    rng = np.random.default_rng([state.rng_seed, round_index, epoch])
    return rng.permutation(len(state.dataset))


def iterate_batches(
    state: ClientState, batch_size: int, round_index: int, epoch: int
) -> Iterator[Batch]:
    order = batch_order(state, round_index, epoch)
    ds = state.dataset
    for start in range(0, len(order), batch_size):
        idx = order[start : start + batch_size]
        yield Batch(ds.X[idx], ds.y[idx])


def _meta(cfg: LocalUpdateConfig, algorithm: str, steps: int) -> dict:
    return {
        "algorithm": algorithm,
        "epochs": cfg.epochs,
        "batch_size": cfg.batch_size,
        "lr": cfg.lr,
        "alpha": cfg.alpha,
        "temperature": cfg.temperature,
        "prox_mu": cfg.prox_mu,
        "teacher": cfg.teacher,
        "steps": steps,
    }


def _finite(client_id: int, loss: float, what: str) -> None:
    if not math.isfinite(loss):
        raise ClientError(client_id, f"non-finite {what} loss {loss}")


def _step(client_id: int, model: ModelParams, grads, lr: float) -> None:
    try:
        sgd_step(model, grads, lr)
    except FloatingPointError as exc:
        raise ClientError(client_id, str(exc)) from None


def fedmlac_update(
    state: ClientState,
    plugin: ModelParams,
    cfg: LocalUpdateConfig,
    round_index: int = 0,
    plugin_spec: ModelSpec | None = None,
    plugin_objective: str = "kd",
) -> ClientUpload:
    """One round of mutual learning on a client.

    Per batch the local model takes a step on the blended CE + KL(plug-in ||
    local) objective, then the plug-in copy takes a step on KL(local ||
    plug-in). ``plugin_objective`` selects what trains the plug-in: ``"kd"``
    (distillation, the normal case), ``"ce"`` (its own cross-entropy on local
    labels, used when mutual learning is ablated) or ``"none"`` (frozen).

    The local model is updated in place and persists in ``state``; the
    upload carries an independent copy of the trained plug-in.
    """
    if plugin_spec is not None and plugin.spec != plugin_spec:
        raise ShapeError(f"client {state.id}: broadcast plug-in does not match the federation spec")
    local = state.local_model
    if local.spec.in_dim != plugin.spec.in_dim or local.spec.output_dim != plugin.spec.output_dim:
        raise ShapeError(
            f"client {state.id}: plug-in maps {plugin.spec.in_dim}->{plugin.spec.output_dim}, "
            f"local model maps {local.spec.in_dim}->{local.spec.output_dim}"
        )
    if plugin_objective not in ("kd", "ce", "none"):
        raise ValueError(f"unknown plug-in objective {plugin_objective!r}")

    theta = plugin.copy()
    losses, sq_norms = [], []
    for epoch in range(cfg.epochs):
        for batch in iterate_batches(state, cfg.batch_size, round_index, epoch):
            snapshot = local.copy() if plugin_objective == "kd" and cfg.teacher == "snapshot" else local
            loss, grads = client_loss_and_grads(local, theta, batch, cfg.alpha, cfg.temperature)
            _finite(state.id, loss, "client")
            _step(state.id, local, grads, cfg.lr)
            losses.append(loss)

            if plugin_objective == "none":
                sq_norms.append(grad_sq_norm(grads))
                continue
            if plugin_objective == "kd":
                p_loss, p_grads = plugin_loss_and_grads(snapshot, theta, batch, cfg.temperature)
            else:
                p_loss, p_grads = ce_loss_and_grads(theta, batch)
            _finite(state.id, p_loss, "plug-in")
            _step(state.id, theta, p_grads, cfg.lr)
            sq_norms.append(grad_sq_norm(p_grads))

    return ClientUpload(
        state.id,
        theta,
        len(state.dataset),
        float(np.mean(losses)),
        float(np.mean(sq_norms)),
        _meta(cfg, "fedmlac", len(losses)),
    )


def _check_homogeneous(state: ClientState, global_model: ModelParams) -> None:
    if state.local_model.spec != global_model.spec:
        raise ShapeError(
            f"client {state.id}: local architecture differs from the global model; "
            "FedAvg-style training needs a homogeneous fleet"
        )


def _proximal_terms(model: ModelParams, anchor: ModelParams, mu: float):
    """``(mu/2) * ||w - w_anchor||^2`` and its gradient ``mu * (w - w_anchor)``."""
    diffs = [
        LayerParams(a.weights - b.weights, a.bias - b.bias)
        for a, b in zip(model.layers, anchor.layers)
    ]
    penalty = 0.5 * mu * sum(np.sum(d.weights**2) + np.sum(d.bias**2) for d in diffs)
    grads = [LayerParams(mu * d.weights, mu * d.bias) for d in diffs]
    return float(penalty), grads


def _centralized_style_update(
    state: ClientState,
    global_model: ModelParams,
    cfg: LocalUpdateConfig,
    round_index: int,
    prox_mu: float,
    algorithm: str,
) -> ClientUpload:
    _check_homogeneous(state, global_model)
    state.local_model = global_model.copy()
    local = state.local_model
    losses, sq_norms = [], []
    for epoch in range(cfg.epochs):
        for batch in iterate_batches(state, cfg.batch_size, round_index, epoch):
            loss, grads = ce_loss_and_grads(local, batch)
            if prox_mu:
                penalty, prox = _proximal_terms(local, global_model, prox_mu)
                loss += penalty
                grads = [
                    LayerParams(g.weights + p.weights, g.bias + p.bias)
                    for g, p in zip(grads, prox)
                ]
            _finite(state.id, loss, "local")
            _step(state.id, local, grads, cfg.lr)
            losses.append(loss)
            sq_norms.append(grad_sq_norm(grads))
    return ClientUpload(
        state.id,
        local.copy(),
        len(state.dataset),
        float(np.mean(losses)),
        float(np.mean(sq_norms)),
        _meta(cfg, algorithm, len(losses)),
    )


def fedavg_update(
    state: ClientState, global_model: ModelParams, cfg: LocalUpdateConfig, round_index: int = 0
) -> ClientUpload:
    """Reset the local model to the broadcast one and run CE-only SGD."""
    return _centralized_style_update(state, global_model, cfg, round_index, 0.0, "fedavg")


def fedprox_update(
    state: ClientState, global_model: ModelParams, cfg: LocalUpdateConfig, round_index: int = 0
) -> ClientUpload:
    """FedAvg local training plus a proximal pull towards the broadcast model."""
    return _centralized_style_update(state, global_model, cfg, round_index, cfg.prox_mu, "fedprox")


def make_heterogeneous_fleet(
    specs: Sequence[ModelSpec], num_clients: int, seed: int
) -> list[ModelSpec]:
    """Assign each client one architecture uniformly at random."""
    if not specs:
        raise ValueError("need at least one model spec")
    choice = np.random.default_rng(seed).integers(0, len(specs), size=num_clients)
    return [specs[int(c)] for c in choice]
