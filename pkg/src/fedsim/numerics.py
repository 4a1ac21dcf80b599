"""Dense float64 model math: init, forward, cross-entropy, backprop, SGD.

Every operation here is a pure function of its arguments: inputs are never
mutated and identical inputs produce bitwise-identical outputs regardless of
thread count or call order.  The federated layer leans on that property for
reproducible runs.

Parameters of a model live in one flat float64 vector.  Layer ``l`` with
``fan_in`` inputs and ``fan_out`` outputs owns the contiguous index range
holding its weight matrix (row-major, shape ``fan_in x fan_out``) followed
by its bias (length ``fan_out``).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

MODEL_KINDS = ("linear", "mlp")
MASK_MODES = ("scratch", "finetune", "feature_extract")


class NumericsError(ValueError):
    """Shape or domain violation in a numeric operation."""


class NonFiniteError(ArithmeticError):
    """NaN or Inf showed up where only finite values are allowed."""


@dataclass(frozen=True)
class ModelSpec:
    """Architecture of a classifier.

    ``linear`` is a single affine map; ``mlp`` stacks affine maps with ReLU
    between them (never after the last, which produces logits).
    """

    kind: str
    input_dim: int
    num_classes: int
    hidden_dims: tuple[int, ...] = ()
    activation: str = "relu"

    def __post_init__(self) -> None:
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if self.kind not in MODEL_KINDS:
            raise NumericsError(f"unknown model kind {self.kind!r}")
        if self.kind == "linear" and self.hidden_dims:
            raise NumericsError("linear model must have no hidden layers")
        if self.kind == "mlp" and not self.hidden_dims:
            raise NumericsError("mlp model needs at least one hidden layer")
        if self.input_dim < 1:
            raise NumericsError(f"input_dim must be >= 1, got {self.input_dim}")
        if any(h < 1 for h in self.hidden_dims):
            raise NumericsError(f"hidden layer sizes must be >= 1, got {self.hidden_dims}")
        if self.num_classes < 2:
            raise NumericsError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.activation != "relu":
            raise NumericsError(f"unsupported activation {self.activation!r}")

    @property
    def layer_shapes(self) -> list[tuple[int, int]]:
        """(fan_in, fan_out) per layer, input to output."""
        dims = [self.input_dim, *self.hidden_dims, self.num_classes]
        return [(dims[i], dims[i + 1]) for i in range(len(dims) - 1)]

    @property
    def layer_ranges(self) -> list[tuple[int, int]]:
        """Contiguous [start, stop) parameter range of each layer."""
        ranges = []
        offset = 0
        for fan_in, fan_out in self.layer_shapes:
            size = fan_in * fan_out + fan_out
            ranges.append((offset, offset + size))
            offset += size
        return ranges

    @property
    def total_params(self) -> int:
        return sum(fi * fo + fo for fi, fo in self.layer_shapes)


@dataclass(frozen=True)
class TrainableMask:
    """Which parameter index ranges are frozen (excluded from updates).

    ``scratch`` and ``finetune`` freeze nothing; ``feature_extract`` freezes
    everything except the final classification layer.  A single-layer linear
    model in ``feature_extract`` mode is entirely trainable: the whole model
    is its classification layer.
    """

    mode: str = "scratch"
    frozen_ranges: tuple[tuple[int, int], ...] = ()

    def __post_init__(self) -> None:
        if self.mode not in MASK_MODES:
            raise NumericsError(f"unknown mask mode {self.mode!r}")
        if self.mode in ("scratch", "finetune") and self.frozen_ranges:
            raise NumericsError(f"{self.mode} mask must not freeze any range")
        for start, stop in self.frozen_ranges:
            if start < 0 or stop <= start:
                raise NumericsError(f"bad frozen range ({start}, {stop})")

    @classmethod
    def for_mode(cls, mode: str, spec: ModelSpec) -> "TrainableMask":
        if mode == "feature_extract":
            return cls(mode=mode, frozen_ranges=tuple(spec.layer_ranges[:-1]))
        return cls(mode=mode)

    def trainable_bool(self, num_params: int) -> np.ndarray:
        """Boolean vector: True where the parameter may be updated."""
        out = np.ones(num_params, dtype=bool)
        for start, stop in self.frozen_ranges:
            if stop > num_params:
                raise NumericsError(
                    f"frozen range ({start}, {stop}) exceeds parameter count {num_params}"
                )
            out[start:stop] = False
        return out


@dataclass(frozen=True)
class ParamCountReport:
    trainable: int
    non_trainable: int
    total: int

    def __post_init__(self) -> None:
        if self.trainable < 0 or self.non_trainable < 0:
            raise NumericsError("parameter counts must be non-negative")
        if self.trainable + self.non_trainable != self.total:
            raise NumericsError("trainable + non_trainable must equal total")


def _check_params(spec: ModelSpec, params: np.ndarray) -> np.ndarray:
    p = np.asarray(params, dtype=np.float64)
    if p.ndim != 1 or p.size != spec.total_params:
        raise NumericsError(
            f"parameter vector has {p.size} entries, model needs {spec.total_params}"
        )
    return p


def _check_batch(spec: ModelSpec, batch: np.ndarray) -> np.ndarray:
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim != 2:
        raise NumericsError(f"batch must be 2-D, got shape {x.shape}")
    if x.shape[1] != spec.input_dim:
        raise NumericsError(
            f"batch has {x.shape[1]} features, model expects {spec.input_dim}"
        )
    return x


def _check_labels(labels: np.ndarray, num_classes: int, batch_rows: int) -> np.ndarray:
    y = np.asarray(labels)
    if not np.issubdtype(y.dtype, np.integer):
        raise NumericsError(f"labels must be integers, got dtype {y.dtype}")
    y = y.astype(np.int64, copy=False)
    if y.ndim != 1 or y.size != batch_rows:
        raise NumericsError(f"expected {batch_rows} labels, got shape {y.shape}")
    if y.size == 0:
        raise NumericsError("batch must be non-empty")
    if y.min() < 0 or y.max() >= num_classes:
        raise NumericsError(
            f"labels must lie in [0, {num_classes}), got range "
            f"[{int(y.min())}, {int(y.max())}]"
        )
    return y


def _param_views(spec: ModelSpec, flat: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
    """(weight, bias) views per layer into a flat vector (no copies)."""
    views = []
    for (fan_in, fan_out), (start, _stop) in zip(spec.layer_shapes, spec.layer_ranges):
        w = flat[start : start + fan_in * fan_out].reshape(fan_in, fan_out)
        b = flat[start + fan_in * fan_out : start + fan_in * fan_out + fan_out]
        views.append((w, b))
    return views


def init_params(spec: ModelSpec, rng_seed: int) -> np.ndarray:
    """Seeded initial parameters: per-layer uniform(+-1/sqrt(fan_in)) weights,
    zero biases.  Same (spec, seed) always gives the bitwise-same vector."""
    rng = np.random.default_rng(rng_seed)
    parts = []
    for fan_in, fan_out in spec.layer_shapes:
        bound = 1.0 / math.sqrt(fan_in)
        parts.append(rng.uniform(-bound, bound, size=fan_in * fan_out))
        parts.append(np.zeros(fan_out, dtype=np.float64))
    return np.concatenate(parts)


def forward(spec: ModelSpec, params: np.ndarray, batch: np.ndarray) -> np.ndarray:
    """Logits for a batch, shape (batch rows, num_classes)."""
    p = _check_params(spec, params)
    x = _check_batch(spec, batch)
    layers = _param_views(spec, p)
    h = x
    for i, (w, b) in enumerate(layers):
        z = h @ w + b
        h = np.maximum(z, 0.0) if i < len(layers) - 1 else z
    return h


def per_sample_cross_entropy(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Per-row -log softmax(logits)[label], computed via stable logsumexp."""
    z = np.asarray(logits, dtype=np.float64)
    if z.ndim != 2:
        raise NumericsError(f"logits must be 2-D, got shape {z.shape}")
    y = _check_labels(labels, z.shape[1], z.shape[0])
    m = z.max(axis=1)
    lse = m + np.log(np.exp(z - m[:, None]).sum(axis=1))
    return lse - z[np.arange(z.shape[0]), y]


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, float]:
    """Mean cross-entropy loss and accuracy over a batch.

    Accuracy uses argmax with ties broken toward the lowest class index, so
    the metric is deterministic.
    """
    z = np.asarray(logits, dtype=np.float64)
    losses = per_sample_cross_entropy(z, labels)
    y = np.asarray(labels).astype(np.int64, copy=False)
    preds = np.argmax(z, axis=1)
    return float(losses.mean()), float(np.mean(preds == y))


def loss_and_grad(
    spec: ModelSpec,
    params: np.ndarray,
    batch: np.ndarray,
    labels: np.ndarray,
    mask: TrainableMask | None = None,
) -> tuple[float, float, np.ndarray]:
    """One fused forward/backward pass.

    Returns (loss, accuracy, gradient of the mean cross-entropy w.r.t. the
    flat parameter vector).  Gradient entries inside the mask's frozen
    ranges are exactly 0.0.
    """
    p = _check_params(spec, params)
    x = _check_batch(spec, batch)
    y = _check_labels(labels, spec.num_classes, x.shape[0])
    n = x.shape[0]
    layers = _param_views(spec, p)

    # Forward, caching each layer's input activation.
    acts = [x]
    logits = None
    for i, (w, b) in enumerate(layers):
        z = acts[-1] @ w + b
        if i < len(layers) - 1:
            acts.append(np.maximum(z, 0.0))
        else:
            logits = z

    m = logits.max(axis=1, keepdims=True)
    e = np.exp(logits - m)
    denom = e.sum(axis=1, keepdims=True)
    losses = (np.log(denom[:, 0]) + m[:, 0]) - logits[np.arange(n), y]
    loss = float(losses.mean())
    acc = float(np.mean(np.argmax(logits, axis=1) == y))

    # Backward: dL/dz at the output is (softmax - onehot) / n.
    grad = np.zeros_like(p)
    gviews = _param_views(spec, grad)
    dz = e / denom
    dz[np.arange(n), y] -= 1.0
    dz /= n
    for i in reversed(range(len(layers))):
        w, _b = layers[i]
        gw, gb = gviews[i]
        a = acts[i]
        gw[...] = a.T @ dz
        gb[...] = dz.sum(axis=0)
        if i > 0:
            # relu'(z) == 1 exactly where the cached activation is > 0
            dz = (dz @ w.T) * (acts[i] > 0.0)

    if mask is not None:
        for start, stop in mask.frozen_ranges:
            grad[start:stop] = 0.0
    return loss, acc, grad


def backward(
    spec: ModelSpec,
    params: np.ndarray,
    batch: np.ndarray,
    labels: np.ndarray,
    mask: TrainableMask | None = None,
) -> np.ndarray:
    """Gradient of the mean cross-entropy w.r.t. the flat parameters."""
    return loss_and_grad(spec, params, batch, labels, mask)[2]


def sgd_step(
    params: np.ndarray,
    gradient: np.ndarray,
    lr: float,
    mask: TrainableMask | None = None,
) -> np.ndarray:
    """params - lr * gradient on trainable entries; frozen entries are
    returned bitwise-unchanged."""
    p = np.asarray(params, dtype=np.float64)
    g = np.asarray(gradient, dtype=np.float64)
    if p.shape != g.shape or p.ndim != 1:
        raise NumericsError(f"shape mismatch: params {p.shape} vs gradient {g.shape}")
    if not np.isfinite(g).all():
        raise NonFiniteError("gradient contains non-finite entries")
    if not math.isfinite(lr) or lr < 0.0:
        raise NumericsError(f"learning rate must be finite and >= 0, got {lr}")
    out = p.copy()
    if lr == 0.0:
        return out
    if mask is None or not mask.frozen_ranges:
        out -= lr * g
    else:
        trainable = mask.trainable_bool(p.size)
        out[trainable] = p[trainable] - lr * g[trainable]
    if not np.isfinite(out).all():
        raise NonFiniteError("parameters became non-finite after SGD step")
    return out


def count_params(spec: ModelSpec, mask: TrainableMask) -> ParamCountReport:
    """Trainable / non-trainable / total parameter accounting."""
    total = spec.total_params
    trainable = int(mask.trainable_bool(total).sum())
    return ParamCountReport(trainable=trainable, non_trainable=total - trainable, total=total)
