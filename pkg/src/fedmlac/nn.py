"""Dense-network engine: forward pass, softmax losses, analytic gradients, SGD.

Everything runs in float64. The two distillation losses treat the teacher's
outputs as constants, so gradients only reach the student model.

KL direction: ``kl_divergence(p, q)`` is ``sum p * log(p / q)`` with the
*teacher* distribution as ``p``. The client objective distils the plug-in
into the local model (teacher = plug-in) and the plug-in objective distils
the local model into the plug-in (teacher = local model).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

EPS = 1e-12

ACTIVATIONS = ("tanh", "relu")


class ShapeError(ValueError):
    """Raised when arrays do not conform to a model's layer dimensions."""

    def __init__(self, message: str, layer: int | None = None):
        self.layer = layer
        if layer is not None:
            message = f"layer {layer}: {message}"
        super().__init__(message)


@dataclass(frozen=True)
class ModelSpec:
    """Architecture of a dense network.

    ``layer_dims`` lists ``(in_dim, out_dim)`` per layer and ``activations``
    names the nonlinearity applied after each hidden layer (one entry per
    layer except the last, whose output is the logits).
    """

    layer_dims: tuple[tuple[int, int], ...]
    activations: tuple[str, ...] = ()

    def __post_init__(self):
        dims = tuple((int(i), int(o)) for i, o in self.layer_dims)
        object.__setattr__(self, "layer_dims", dims)
        acts = tuple(self.activations)
        if not acts and len(dims) > 1:
            acts = ("tanh",) * (len(dims) - 1)
        object.__setattr__(self, "activations", acts)
        if not dims:
            raise ValueError("a model needs at least one layer")
        for idx, (i, o) in enumerate(dims):
            if i < 1 or o < 1:
                raise ShapeError(f"non-positive dimension ({i}, {o})", idx)
        for idx in range(len(dims) - 1):
            if dims[idx][1] != dims[idx + 1][0]:
                raise ShapeError(
                    f"out_dim {dims[idx][1]} does not chain into in_dim "
                    f"{dims[idx + 1][0]} of layer {idx + 1}",
                    idx,
                )
        if len(acts) != len(dims) - 1:
            raise ValueError(
                f"expected {len(dims) - 1} hidden activations, got {len(acts)}"
            )
        for a in acts:
            if a not in ACTIVATIONS:
                raise ValueError(f"unknown activation {a!r}")

    @classmethod
    def mlp(
        cls,
        in_dim: int,
        hidden: Sequence[int],
        out_dim: int,
        activation: str = "tanh",
    ) -> "ModelSpec":
        widths = [in_dim, *hidden, out_dim]
        dims = tuple(zip(widths[:-1], widths[1:]))
        return cls(dims, (activation,) * len(hidden))

    @property
    def in_dim(self) -> int:
        return self.layer_dims[0][0]

    @property
    def output_dim(self) -> int:
        return self.layer_dims[-1][1]

    @property
    def num_layers(self) -> int:
        return len(self.layer_dims)

    @property
    def num_params(self) -> int:
        return sum(o * i + o for i, o in self.layer_dims)

    def hidden_widths(self) -> list[int]:
        return [o for _, o in self.layer_dims[:-1]]


@dataclass
class LayerParams:
    weights: np.ndarray  # [out_dim, in_dim]
    bias: np.ndarray  # [out_dim]

    def flat(self) -> np.ndarray:
        return np.concatenate([self.weights.ravel(), self.bias])

    def copy(self) -> "LayerParams":
        return LayerParams(self.weights.copy(), self.bias.copy())


# Gradients share the layer layout of the parameters they belong to.
GradientSet = list[LayerParams]


@dataclass
class ModelParams:
    spec: ModelSpec
    layers: list[LayerParams] = field(default_factory=list)

    def __post_init__(self):
        if len(self.layers) != self.spec.num_layers:
            raise ShapeError(
                f"spec has {self.spec.num_layers} layers, got {len(self.layers)}"
            )
        for idx, (layer, (i, o)) in enumerate(zip(self.layers, self.spec.layer_dims)):
            if layer.weights.shape != (o, i) or layer.bias.shape != (o,):
                raise ShapeError(
                    f"expected weights {(o, i)} and bias {(o,)}, got "
                    f"{layer.weights.shape} and {layer.bias.shape}",
                    idx,
                )

    def copy(self) -> "ModelParams":
        return ModelParams(self.spec, [layer.copy() for layer in self.layers])

    def flat(self) -> np.ndarray:
        return np.concatenate([layer.flat() for layer in self.layers])

    def is_finite(self) -> bool:
        return all(
            np.isfinite(l.weights).all() and np.isfinite(l.bias).all()
            for l in self.layers
        )

    def same_values(self, other: "ModelParams") -> bool:
        """Bitwise equality of architecture and every parameter."""
        return self.spec == other.spec and all(
            np.array_equal(a.weights, b.weights) and np.array_equal(a.bias, b.bias)
            for a, b in zip(self.layers, other.layers)
        )


def init_model(spec: ModelSpec, rng: np.random.Generator) -> ModelParams:
    """Glorot-uniform weights, zero biases."""
    layers = []
    for i, o in spec.layer_dims:
        limit = np.sqrt(6.0 / (i + o))
        layers.append(LayerParams(rng.uniform(-limit, limit, size=(o, i)), np.zeros(o)))
    return ModelParams(spec, layers)


def zero_model(spec: ModelSpec) -> ModelParams:
    return ModelParams(
        spec, [LayerParams(np.zeros((o, i)), np.zeros(o)) for i, o in spec.layer_dims]
    )


@dataclass
class Batch:
    features: np.ndarray  # [B, in_dim]
    labels: np.ndarray  # [B], integers

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or self.features.shape[0] < 1:
            raise ShapeError(f"features must be a non-empty matrix, got {self.features.shape}")
        if self.labels.shape != (self.features.shape[0],):
            raise ShapeError(
                f"{self.features.shape[0]} feature rows but labels of shape {self.labels.shape}"
            )

    def __len__(self) -> int:
        return self.features.shape[0]


def _activate(name: str, z: np.ndarray) -> np.ndarray:
    if name == "tanh":
        return np.tanh(z)
    return np.maximum(z, 0.0)


def _activation_grad(name: str, z: np.ndarray, a: np.ndarray) -> np.ndarray:
    if name == "tanh":
        return 1.0 - a * a
    return (z > 0.0).astype(np.float64)


def _forward_cached(model: ModelParams, x: np.ndarray):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.spec.in_dim:
        raise ShapeError(
            f"input width {x.shape[-1] if x.ndim else None} does not match "
            f"in_dim {model.spec.in_dim}",
            0,
        )
    inputs, pre = [], []
    h = x
    last = model.spec.num_layers - 1
    for idx, layer in enumerate(model.layers):
        inputs.append(h)
        z = h @ layer.weights.T + layer.bias
        pre.append(z)
        h = z if idx == last else _activate(model.spec.activations[idx], z)
    return h, inputs, pre


def forward(model: ModelParams, batch: Batch | np.ndarray) -> np.ndarray:
    """Logits ``[B, C]`` for a batch or a bare feature matrix."""
    x = batch.features if isinstance(batch, Batch) else batch
    logits, _, _ = _forward_cached(model, x)
    return logits


def _backward(model: ModelParams, inputs: list, pre: list, dlogits: np.ndarray) -> GradientSet:
    grads: list[LayerParams] = [None] * model.spec.num_layers  # type: ignore[list-item]
    delta = dlogits
    for idx in range(model.spec.num_layers - 1, -1, -1):
        layer = model.layers[idx]
        grads[idx] = LayerParams(delta.T @ inputs[idx], delta.sum(axis=0))
        if idx > 0:
            act = model.spec.activations[idx - 1]
            delta = (delta @ layer.weights) * _activation_grad(act, pre[idx - 1], inputs[idx])
    return grads


def softmax(logits: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    if not temperature > 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    z = np.atleast_2d(np.asarray(logits, dtype=np.float64)) / temperature
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _check_labels(labels: np.ndarray, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    bad = np.flatnonzero((labels < 0) | (labels >= num_classes))
    if bad.size:
        raise ValueError(
            f"label {labels[bad[0]]} at row {bad[0]} outside [0, {num_classes})"
        )
    return labels


def cross_entropy(probs: np.ndarray, labels: np.ndarray) -> float:
    """Batch-mean negative log-likelihood with a 1e-12 floor in the log."""
    probs = np.atleast_2d(probs)
    labels = _check_labels(labels, probs.shape[1])
    picked = probs[np.arange(len(labels)), labels]
    return float(-np.mean(np.log(np.maximum(picked, EPS))))


def kl_divergence(p: np.ndarray, q: np.ndarray) -> float:
    """Batch-mean ``KL(p || q)``; ``q`` is floored at 1e-12 inside the ratio."""
    p, q = np.atleast_2d(p), np.atleast_2d(q)
    if p.shape != q.shape:
        raise ShapeError(f"KL arguments differ in shape: {p.shape} vs {q.shape}")
    safe_p = np.where(p > 0, p, 1.0)
    terms = np.where(p > 0, p * (np.log(safe_p) - np.log(np.maximum(q, EPS))), 0.0)
    return float(terms.sum(axis=1).mean())


def _soft_target_logit_grad(target: np.ndarray, q: np.ndarray, temperature: float):
    # d/dz of -mean_b sum_c target_c * log(max(q_c, EPS)), q = softmax(z / T).
    # Floored entries have zero derivative.
    w = np.where(q >= EPS, target, 0.0)
    return (q * w.sum(axis=1, keepdims=True) - w) / (temperature * q.shape[0])


def _check_alpha(alpha: float) -> None:
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")


def _check_pair(a: ModelParams, b: ModelParams, batch: Batch) -> None:
    if a.spec.in_dim != b.spec.in_dim or a.spec.output_dim != b.spec.output_dim:
        raise ShapeError(
            f"client model maps {a.spec.in_dim}->{a.spec.output_dim} but plug-in maps "
            f"{b.spec.in_dim}->{b.spec.output_dim}"
        )
    _check_labels(batch.labels, a.spec.output_dim)


def client_loss_and_grads(
    client_model: ModelParams,
    plugin_model: ModelParams,
    batch: Batch,
    alpha: float,
    temperature: float = 1.0,
) -> tuple[float, GradientSet]:
    """Blended objective for the personalized model.

    ``alpha * CE(client, y) + (1 - alpha) * KL(plugin || client)`` with the
    plug-in as a constant teacher. Gradients are w.r.t. ``client_model``.
    """
    _check_alpha(alpha)
    _check_pair(client_model, plugin_model, batch)
    logits, inputs, pre = _forward_cached(client_model, batch.features)
    probs = softmax(logits)
    onehot = np.zeros_like(probs)
    onehot[np.arange(len(batch)), batch.labels] = 1.0
    ce = cross_entropy(probs, batch.labels)
    dlogits = alpha * _soft_target_logit_grad(onehot, probs, 1.0)

    teacher = softmax(forward(plugin_model, batch.features), temperature)
    student = softmax(logits, temperature)
    kl = kl_divergence(teacher, student)
    dlogits = dlogits + (1.0 - alpha) * _soft_target_logit_grad(teacher, student, temperature)

    loss = alpha * ce + (1.0 - alpha) * kl
    return loss, _backward(client_model, inputs, pre, dlogits)


def plugin_loss_and_grads(
    client_model: ModelParams,
    plugin_model: ModelParams,
    batch: Batch,
    temperature: float = 1.0,
) -> tuple[float, GradientSet]:
    """``KL(client || plugin)`` with the client as a constant teacher."""
    _check_pair(client_model, plugin_model, batch)
    teacher = softmax(forward(client_model, batch.features), temperature)
    logits, inputs, pre = _forward_cached(plugin_model, batch.features)
    student = softmax(logits, temperature)
    loss = kl_divergence(teacher, student)
    dlogits = _soft_target_logit_grad(teacher, student, temperature)
    return loss, _backward(plugin_model, inputs, pre, dlogits)


def ce_loss_and_grads(model: ModelParams, batch: Batch) -> tuple[float, GradientSet]:
    """Plain cross-entropy on the model's own predictions."""
    _check_labels(batch.labels, model.spec.output_dim)
    logits, inputs, pre = _forward_cached(model, batch.features)
    probs = softmax(logits)
    onehot = np.zeros_like(probs)
    onehot[np.arange(len(batch)), batch.labels] = 1.0
    loss = cross_entropy(probs, batch.labels)
    return loss, _backward(model, inputs, pre, _soft_target_logit_grad(onehot, probs, 1.0))


def grad_sq_norm(grads: GradientSet) -> float:
    return float(sum(np.sum(g.weights**2) + np.sum(g.bias**2) for g in grads))


def sgd_step(model: ModelParams, grads: GradientSet, lr: float) -> ModelParams:
    """In-place ``p <- p - lr * g``; returns ``model``.

    Refuses non-finite gradients so a poisoned update cannot silently
    corrupt the parameters.
    """
    if len(grads) != model.spec.num_layers:
        raise ShapeError(f"{len(grads)} gradient layers for a {model.spec.num_layers}-layer model")
    for idx, (layer, g) in enumerate(zip(model.layers, grads)):
        if g.weights.shape != layer.weights.shape or g.bias.shape != layer.bias.shape:
            raise ShapeError("gradient shape differs from parameters", idx)
        if not (np.isfinite(g.weights).all() and np.isfinite(g.bias).all()):
            raise FloatingPointError(f"non-finite gradient in layer {idx}")
    for layer, g in zip(model.layers, grads):
        layer.weights -= lr * g.weights
        layer.bias -= lr * g.bias
    return model


# --- checkpoint files --------------------------------------------------------
#
# Little-endian layout:
#   b"FMLC" | version u16 | layer count u16 |
#   per layer: out_dim u32 | in_dim u32 | weights f64[out*in] row-major | bias f64[out]
# Activations are not stored; pass them to ``load_checkpoint``.

MAGIC = b"FMLC"
FORMAT_VERSION = 1


def checkpoint_bytes(model: ModelParams) -> bytes:
    parts = [MAGIC, struct.pack("<HH", FORMAT_VERSION, model.spec.num_layers)]
    for layer in model.layers:
        out_dim, in_dim = layer.weights.shape
        parts.append(struct.pack("<II", out_dim, in_dim))
        parts.append(np.ascontiguousarray(layer.weights, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(layer.bias, dtype="<f8").tobytes())
    return b"".join(parts)


def save_checkpoint(model: ModelParams, path: str | Path) -> None:
    Path(path).write_bytes(checkpoint_bytes(model))


def parse_checkpoint(data: bytes, activation: str = "tanh") -> ModelParams:
    if data[:4] != MAGIC:
        raise ValueError("not a model checkpoint (bad magic)")
    version, count = struct.unpack_from("<HH", data, 4)
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    offset = 8
    layers, dims = [], []
    for idx in range(count):
        if offset + 8 > len(data):
            raise ValueError(f"truncated checkpoint in layer {idx} header")
        out_dim, in_dim = struct.unpack_from("<II", data, offset)
        offset += 8
        nbytes = 8 * (out_dim * in_dim + out_dim)
        if offset + nbytes > len(data):
            raise ValueError(f"truncated checkpoint in layer {idx} payload")
        w = np.frombuffer(data, "<f8", out_dim * in_dim, offset).reshape(out_dim, in_dim)
        offset += 8 * out_dim * in_dim
        b = np.frombuffer(data, "<f8", out_dim, offset)
        offset += 8 * out_dim
        layers.append(LayerParams(w.astype(np.float64), b.astype(np.float64)))
        dims.append((in_dim, out_dim))
    if offset != len(data):
        raise ValueError(f"{len(data) - offset} trailing bytes after last layer")
    spec = ModelSpec(tuple(dims), (activation,) * (count - 1))
    return ModelParams(spec, layers)


def load_checkpoint(path: str | Path, activation: str = "tanh") -> ModelParams:
    return parse_checkpoint(Path(path).read_bytes(), activation)
