"""LoRA-adapted multinomial logistic classifier with exact per-sample gradients.

The default architecture is a single linear layer (logits = W_eff @ x); an
optional two-layer variant inserts a tanh hidden layer. Only the adapter
pairs (a, b) are trainable; base weights stay frozen. Per-sample gradients
are analytic, which DP-SGD requires for per-example clipping.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import lora
from .lora import LoraLayer, effective_weight

# Gradient dictionaries are keyed by (layer_index, matrix_name).
GradKey = tuple[int, str]


@dataclass(frozen=True)
class Example:
    x: np.ndarray
    y: int


@dataclass
class Classifier:
    layers: list[LoraLayer]
    class_count: int

    def __post_init__(self):
        if not self.layers:
            raise ValueError("classifier needs at least one layer")
        if self.class_count < 2:
            raise ValueError(f"class_count must be >= 2, got {self.class_count}")
        for prev, nxt in zip(self.layers, self.layers[1:]):
            if nxt.d_in != prev.d_out:
                raise ValueError(
                    f"layer dimensions do not compose: {prev.d_out} -> {nxt.d_in}"
                )
        if self.layers[-1].d_out != self.class_count:
            raise ValueError(
                f"final layer emits {self.layers[-1].d_out} logits for "
                f"{self.class_count} classes"
            )

    @property
    def feature_dim(self) -> int:
        return self.layers[0].d_in


def trainable_params(model: Classifier) -> frozenset[GradKey]:
    """Adapter matrices the current layer flags allow to be trained."""
    keys = set()
    for idx, layer in enumerate(model.layers):
        keys.add((idx, "b"))
        if not layer.a_frozen:
            keys.add((idx, "a"))
    return frozenset(keys)


def _as_batch(data) -> tuple[np.ndarray, np.ndarray]:
    if hasattr(data, "features"):
        return data.features, data.labels
    xs = np.stack([np.asarray(ex.x, dtype=np.float64) for ex in data])
    ys = np.array([ex.y for ex in data], dtype=np.int64)
    return xs, ys


def forward_batch(model: Classifier, x: np.ndarray) -> np.ndarray:
    """Logits for a batch of row-vector inputs (n x d_in -> n x c)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.feature_dim:
        raise ValueError(
            f"batch has shape {x.shape}, expected (n, {model.feature_dim})"
        )
    h = x
    z = h
    last = len(model.layers) - 1
    for idx, layer in enumerate(model.layers):
        z = h @ effective_weight(layer).T
        if idx < last:
            h = np.tanh(z)
    return z


def forward(model: Classifier, x) -> np.ndarray:
    """Logits for a single input vector."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError(f"expected a vector, got shape {x.shape}")
    return forward_batch(model, x[None, :])[0]


def softmax(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def loss(logits, y: int) -> float:
    """Cross-entropy -log softmax(logits)[y], computed with max subtraction."""
    z = np.asarray(logits, dtype=np.float64)
    if not np.isfinite(z).all():
        raise ValueError("logits contain non-finite entries")
    m = z.max()
    return float(m + np.log(np.exp(z - m).sum()) - z[y])


def _batch_losses(logits: np.ndarray, y: np.ndarray) -> np.ndarray:
    m = logits.max(axis=1)
    lse = m + np.log(np.exp(logits - m[:, None]).sum(axis=1))
    return lse - logits[np.arange(len(y)), y]


def per_sample_grads(
    model: Classifier, batch, trainable: frozenset[GradKey] | None = None
) -> dict[GradKey, np.ndarray]:
    """Exact per-example cross-entropy gradients for every adapter matrix.

    Returns arrays of shape (n, *matrix.shape) keyed by (layer, "a"|"b").
    Matrices outside the trainable set are frozen and get exact zeros.
    """
    x, y = _as_batch(batch)
    if len(x) == 0:
        raise ValueError("empty batch")
    if trainable is None:
        trainable = trainable_params(model)

    # forward pass, caching layer inputs
    last = len(model.layers) - 1
    inputs = [x]
    h = x
    for idx, layer in enumerate(model.layers):
        z = h @ effective_weight(layer).T
        if idx < last:
            h = np.tanh(z)
            inputs.append(h)
    delta = softmax(z)  # d loss / d logits, per sample
    delta[np.arange(len(y)), y] -= 1.0

    grads: dict[GradKey, np.ndarray] = {}
    n = len(x)
    for idx in range(last, -1, -1):
        layer = model.layers[idx]
        h_in = inputs[idx]
        s = layer.scale
        if (idx, "b") in trainable:
            ax = h_in @ layer.a.T
            grads[(idx, "b")] = s * np.einsum("nc,nr->ncr", delta, ax)
        else:
            grads[(idx, "b")] = np.zeros((n,) + layer.b.shape)
        if (idx, "a") in trainable:
            btd = delta @ layer.b
            grads[(idx, "a")] = s * np.einsum("nr,nd->nrd", btd, h_in)
        else:
            grads[(idx, "a")] = np.zeros((n,) + layer.a.shape)
        if idx > 0:
            upstream = delta @ effective_weight(layer)
            delta = upstream * (1.0 - h_in * h_in)  # back through tanh
    return grads


def evaluate(model: Classifier, data) -> tuple[float, float]:
    """(accuracy, mean cross-entropy); argmax ties go to the lowest class."""
    x, y = _as_batch(data)
    if len(x) == 0:
        raise ValueError("empty dataset")
    logits = forward_batch(model, x)
    preds = np.argmax(logits, axis=1)
    accuracy = float(np.mean(preds == y))
    return accuracy, float(np.mean(_batch_losses(logits, y)))


def fit_dense_weights(
    x: np.ndarray,
    y: np.ndarray,
    dims: list[int],
    class_count: int,
    steps: int = 200,
    lr: float = 0.1,
    seed=0,
) -> list[np.ndarray]:
    """Full-batch gradient descent on dense weights (no adapters, no privacy).

    `dims` lists the layer input sizes, e.g. [d_x] for a linear model or
    [d_x, hidden] for one tanh hidden layer; the final output is class_count
    wide. Used to produce the frozen backbone weights.
    """
    rng = np.random.default_rng(seed) if not isinstance(seed, np.random.Generator) else seed
    sizes = dims + [class_count]
    weights = [
        rng.standard_normal((sizes[i + 1], sizes[i])) / np.sqrt(sizes[i])
        for i in range(len(dims))
    ]
    n = len(x)
    last = len(weights) - 1
    for _ in range(steps):
        inputs = [x]
        h = x
        for idx, w in enumerate(weights):
            z = h @ w.T
            if idx < last:
                h = np.tanh(z)
                inputs.append(h)
        delta = softmax(z)
        delta[np.arange(n), y] -= 1.0
        for idx in range(last, -1, -1):
            grad = delta.T @ inputs[idx] / n
            if idx > 0:
                upstream = delta @ weights[idx]
                delta = upstream * (1.0 - inputs[idx] * inputs[idx])
            weights[idx] = weights[idx] - lr * grad
    return weights


def random_dense_weights(dims: list[int], class_count: int, seed=0) -> list[np.ndarray]:
    """Random frozen backbone, for runs without a pre-training phase."""
    rng = np.random.default_rng(seed) if not isinstance(seed, np.random.Generator) else seed
    sizes = dims + [class_count]
    return [
        rng.standard_normal((sizes[i + 1], sizes[i])) / np.sqrt(sizes[i])
        for i in range(len(sizes) - 1)
    ]


def build_classifier(
    base_weights: list[np.ndarray],
    rank: int,
    alpha: float,
    seed,
    class_count: int,
    a_frozen: bool = False,
) -> Classifier:
    """Attach fresh adapters (Kaiming a, zero b) to frozen base weights.

    The requested rank is clamped per layer to min(d_out, d_in); narrow
    output layers therefore carry a smaller effective rank.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    layers = []
    for w0 in base_weights:
        r = min(rank, min(w0.shape))
        a, b = lora.init_adapter(w0.shape[0], w0.shape[1], r, rng)
        layers.append(
            LoraLayer(w0=w0, a=a, b=b, rank=r, alpha=alpha * r / rank, a_frozen=a_frozen)
        )
    return Classifier(layers=layers, class_count=class_count)
