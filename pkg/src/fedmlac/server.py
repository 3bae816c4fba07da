"""Server-side aggregation: layer-wise pruning aggregation (LPA) and FedAvg.

All aggregators sort uploads by client id before touching parameters, so the
result does not depend on arrival order, bit for bit.

Notes on the layer statistics:

* the per-layer centre used for deviations is the *unweighted* mean of the
  cohort, while the final average is weighted by client sample counts;
* a layer's parameter vector is its weight matrix flattened and followed by
  its bias.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .client import ClientUpload
from .nn import LayerParams, ModelParams, ShapeError


class AggregationError(ValueError):
    pass


@dataclass(frozen=True)
class LayerDeviation:
    client_id: int
    layer: int
    deviation: float


@dataclass(frozen=True)
class TrustedSet:
    layer: int
    members: tuple[int, ...]
    total_weight: int


@dataclass(frozen=True)
class AggregationConfig:
    v_l: float = 0.1
    v_h: float = 0.1

    def __post_init__(self):
        for name in ("v_l", "v_h"):
            v = getattr(self, name)
            if not 0.0 <= v < 1.0:
                raise ValueError(f"{name} must lie in [0, 1), got {v}")

    def pruned_counts(self, cohort: int) -> tuple[int, int]:
        """``(floor(v_l * |S|), floor(v_h * |S|))``."""
        # the epsilon keeps e.g. 0.3 * 10 from flooring to 2 after rounding
        return math.floor(self.v_l * cohort + 1e-9), math.floor(self.v_h * cohort + 1e-9)

    def validate_cohort(self, cohort: int) -> None:
        low, high = self.pruned_counts(cohort)
        if low + high >= cohort:
            raise AggregationError(
                f"v_l={self.v_l}, v_h={self.v_h} prune {low}+{high} of a cohort of "
                f"{cohort}: floor(v_l*|S|) + floor(v_h*|S|) < |S| is violated"
            )


@dataclass
class AggregationAudit:
    """What LPA saw and kept for each layer in one round."""

    deviations: list[list[LayerDeviation]]
    trusted: list[TrustedSet]

    def records(self, round_index: int) -> list[dict]:
        out = []
        for layer, (devs, ts) in enumerate(zip(self.deviations, self.trusted)):
            ranked = sorted(devs, key=lambda d: (d.deviation, d.client_id))
            out.append(
                {
                    "round": round_index,
                    "layer": layer,
                    "deviations": [[d.client_id, d.deviation] for d in ranked],
                    "trusted": list(ts.members),
                }
            )
        return out


def write_audit_lines(fh, audit: AggregationAudit, round_index: int) -> None:
    for rec in audit.records(round_index):
        fh.write(json.dumps(rec) + "\n")


def _as_models(uploads: Sequence[ClientUpload | ModelParams]) -> list[ModelParams]:
    if not uploads:
        raise AggregationError("no uploads to aggregate")
    if isinstance(uploads[0], ClientUpload):
        uploads = sorted(uploads, key=lambda u: u.client_id)
        models = [u.model for u in uploads]
    else:
        models = list(uploads)
    spec = models[0].spec
    for m in models[1:]:
        if m.spec != spec:
            raise ShapeError("uploads do not share one architecture")
    return models


def _sorted_uploads(uploads: Sequence[ClientUpload]) -> list[ClientUpload]:
    if not uploads:
        raise AggregationError("no uploads to aggregate")
    ordered = sorted(uploads, key=lambda u: u.client_id)
    ids = [u.client_id for u in ordered]
    if len(set(ids)) != len(ids):
        raise AggregationError(f"duplicate client ids in cohort: {ids}")
    _as_models(ordered)
    return ordered


def layer_mean(uploads: Sequence[ClientUpload | ModelParams]) -> ModelParams:
    """Unweighted per-layer mean. Uploads are summed in client-id order;
    bare models are summed in the order given."""
    models = _as_models(uploads)
    layers = []
    for l in range(models[0].spec.num_layers):
        # offsets from the first model keep identical uploads exact
        ref = models[0].layers[l]
        w = ref.weights + np.stack([m.layers[l].weights - ref.weights for m in models]).mean(axis=0)
        b = ref.bias + np.stack([m.layers[l].bias - ref.bias for m in models]).mean(axis=0)
        layers.append(LayerParams(w, b))
    return ModelParams(models[0].spec, layers)


def layer_deviations(
    uploads: Sequence[ClientUpload], mean_model: ModelParams
) -> list[list[LayerDeviation]]:
    """``devs[l][i]``: l2 distance of upload i's layer l from the mean layer."""
    ordered = _sorted_uploads(uploads)
    if ordered[0].model.spec != mean_model.spec:
        raise ShapeError("mean model does not match the uploads")
    out = []
    for l, centre in enumerate(mean_model.layers):
        flat_centre = centre.flat()
        out.append(
            [
                LayerDeviation(u.client_id, l, float(np.linalg.norm(u.model.layers[l].flat() - flat_centre)))
                for u in ordered
            ]
        )
    return out


def trusted_set(
    devs: Sequence[LayerDeviation], cfg: AggregationConfig, weights: dict[int, int] | None = None
) -> TrustedSet:
    """Drop the ``floor(v_l|S|)`` smallest and ``floor(v_h|S|)`` largest
    deviations of one layer. Equal deviations rank by client id."""
    if not devs:
        raise AggregationError("no deviations")
    cohort = len(devs)
    cfg.validate_cohort(cohort)
    low, high = cfg.pruned_counts(cohort)
    ranked = sorted(devs, key=lambda d: (d.deviation, d.client_id))
    kept = ranked[low : cohort - high]
    members = tuple(sorted(d.client_id for d in kept))
    total = sum(weights[k] for k in members) if weights is not None else len(members)
    return TrustedSet(devs[0].layer, members, total)


def _weighted_layer(layers: list[LayerParams], weights: list[int]) -> LayerParams:
    # Written as reference + weighted offsets: identical inputs give the
    # reference back exactly, and the result stays inside the members' hull.
    total = float(sum(weights))
    ref = layers[0]
    w = ref.weights.copy()
    b = ref.bias.copy()
    for layer, n in zip(layers[1:], weights[1:]):
        frac = n / total
        w += frac * (layer.weights - ref.weights)
        b += frac * (layer.bias - ref.bias)
    return LayerParams(w, b)


def lpa_aggregate(
    uploads: Sequence[ClientUpload], cfg: AggregationConfig, return_audit: bool = False
):
    """Per layer, sample-weighted average over that layer's trusted set.

    Different layers may draw on different clients. With ``return_audit``
    the deviations and trusted sets are returned alongside the model.
    """
    ordered = _sorted_uploads(uploads)
    cfg.validate_cohort(len(ordered))
    for u in ordered:
        if u.n_k < 1:
            raise AggregationError(f"client {u.client_id} reports n_k={u.n_k}")
    by_id = {u.client_id: u for u in ordered}
    sizes = {u.client_id: u.n_k for u in ordered}
    mean = layer_mean(ordered)
    devs = layer_deviations(ordered, mean)

    layers, trusted = [], []
    for l, layer_devs in enumerate(devs):
        ts = trusted_set(layer_devs, cfg, sizes)
        trusted.append(ts)
        layers.append(
            _weighted_layer(
                [by_id[k].model.layers[l] for k in ts.members], [sizes[k] for k in ts.members]
            )
        )
    model = ModelParams(ordered[0].model.spec, layers)
    if return_audit:
        return model, AggregationAudit(devs, trusted)
    return model


def fedavg_aggregate(uploads: Sequence[ClientUpload]) -> ModelParams:
    """Sample-count weighted average of whole models."""
    ordered = _sorted_uploads(uploads)
    sizes = [u.n_k for u in ordered]
    if min(sizes) < 1:
        raise AggregationError("every upload needs n_k >= 1")
    spec = ordered[0].model.spec
    layers = [
        _weighted_layer([u.model.layers[l] for u in ordered], sizes) for l in range(spec.num_layers)
    ]
    return ModelParams(spec, layers)
