"""Small feed-forward scoring network with hand-rolled backpropagation.

ELU on hidden layers, identity output, Adagrad updates. Everything runs on
numpy float64 so scores and checkpoints round-trip bit-exactly.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import TrainingFailureError

CHECKPOINT_VERSION = 1


def elu(x: np.ndarray) -> np.ndarray:
    # exp only on the negative entries: cheaper and no overflow warnings
    out = x.copy()
    neg = x <= 0
    out[neg] = np.expm1(x[neg])
    return out


def elu_grad(x: np.ndarray) -> np.ndarray:
    out = np.ones_like(x)
    neg = x <= 0
    out[neg] = np.exp(x[neg])
    return out


def softplus(x: np.ndarray) -> np.ndarray:
    """log(1 + e^x) without overflow for large |x|."""
    return np.logaddexp(0.0, x)


def sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


class RankerModel:
    """Feed-forward scorer: ELU hidden layers, single linear output unit.

    layer_sizes includes input and output, e.g. [d, 64, 32, 1].
    """

    def __init__(self, layer_sizes: Sequence[int], rng: np.random.Generator):
        sizes = [int(s) for s in layer_sizes]
        if len(sizes) < 2 or sizes[-1] != 1:
            raise ValueError(f"layer_sizes must end in 1, got {sizes}")
        if any(s < 1 for s in sizes):
            raise ValueError(f"layer sizes must be positive, got {sizes}")
        self.layer_sizes = sizes
        self.weights: list[np.ndarray] = []
        self.biases: list[np.ndarray] = []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            self.weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
            self.biases.append(np.zeros(fan_out))

    @classmethod
    def for_input(
        cls, input_dim: int, hidden: Sequence[int], rng: np.random.Generator
    ) -> "RankerModel":
        return cls([input_dim] + list(hidden) + [1], rng)

    @property
    def input_dim(self) -> int:
        return self.layer_sizes[0]

    def num_parameters(self) -> int:
        return sum(w.size for w in self.weights) + sum(b.size for b in self.biases)

    def forward(self, features: np.ndarray, cache: list | None = None) -> np.ndarray:
        """Score a (B, d) batch or a single (d,) vector.

        Pass a list as `cache` to record activations for `backward`.
        """
        x = np.asarray(features, dtype=np.float64)
        single = x.ndim == 1
        if single:
            x = x[None, :]
        if x.shape[1] != self.input_dim:
            raise ValueError(
                f"feature dim {x.shape[1]} does not match model input {self.input_dim}"
            )
        if cache is not None:
            cache.clear()
        a = x
        last = len(self.weights) - 1
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            if cache is not None:
                cache.append(a)
            z = a @ w + b
            a = z if k == last else elu(z)
            if cache is not None and k < last:
                cache.append(z)  # pre-activation, needed for the ELU gradient
        scores = a[:, 0]
        return scores[0] if single else scores

    def backward(
        self, cache: list, dscores: np.ndarray
    ) -> tuple[list[np.ndarray], list[np.ndarray]]:
        """Reverse-accumulate d(loss)/d(params) given d(loss)/d(scores)."""
        dscores = np.asarray(dscores, dtype=np.float64)
        grad_w = [np.zeros_like(w) for w in self.weights]
        grad_b = [np.zeros_like(b) for b in self.biases]
        delta = dscores[:, None]
        for k in range(len(self.weights) - 1, -1, -1):
            a_in = cache[2 * k]
            grad_w[k] = a_in.T @ delta
            grad_b[k] = delta.sum(axis=0)
            if k > 0:
                z_prev = cache[2 * k - 1]
                delta = (delta @ self.weights[k].T) * elu_grad(z_prev)
        return grad_w, grad_b

    def predict_prob(self, features: np.ndarray) -> np.ndarray:
        """Sigmoid of the score, for the binary-target regressors."""
        return sigmoid(np.atleast_1d(self.forward(features)))

    def copy(self) -> "RankerModel":
        clone = object.__new__(RankerModel)
        clone.layer_sizes = list(self.layer_sizes)
        clone.weights = [w.copy() for w in self.weights]
        clone.biases = [b.copy() for b in self.biases]
        return clone


class Adagrad:
    """Per-parameter adaptive gradient accumulation."""

    def __init__(self, model: RankerModel, learning_rate: float, eps: float = 1e-8):
        if learning_rate <= 0:
            raise ValueError("learning rate must be positive")
        self.lr = float(learning_rate)
        self.eps = eps
        self._accum_w = [np.zeros_like(w) for w in model.weights]
        self._accum_b = [np.zeros_like(b) for b in model.biases]

    def step(self, model: RankerModel, grad_w, grad_b) -> None:
        for k in range(len(model.weights)):
            self._accum_w[k] += grad_w[k] ** 2
            self._accum_b[k] += grad_b[k] ** 2
            model.weights[k] -= self.lr * grad_w[k] / (np.sqrt(self._accum_w[k]) + self.eps)
            model.biases[k] -= self.lr * grad_b[k] / (np.sqrt(self._accum_b[k]) + self.eps)


def save_model(model: RankerModel, path) -> None:
    """Write a versioned binary checkpoint; load_model restores it bit-exactly."""
    arrays = {
        "format_version": np.array([CHECKPOINT_VERSION], dtype=np.int64),
        "layer_sizes": np.array(model.layer_sizes, dtype=np.int64),
    }
    for k, (w, b) in enumerate(zip(model.weights, model.biases)):
        arrays[f"w{k}"] = w
        arrays[f"b{k}"] = b
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_model(path) -> RankerModel:
    path = Path(path)
    with np.load(path) as data:
        version = int(data["format_version"][0])
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version} in {path}")
        sizes = [int(s) for s in data["layer_sizes"]]
        model = object.__new__(RankerModel)
        model.layer_sizes = sizes
        model.weights = [data[f"w{k}"].astype(np.float64) for k in range(len(sizes) - 1)]
        model.biases = [data[f"b{k}"].astype(np.float64) for k in range(len(sizes) - 1)]
    for k, (w, b) in enumerate(zip(model.weights, model.biases)):
        if w.shape != (sizes[k], sizes[k + 1]) or b.shape != (sizes[k + 1],):
            raise ValueError(f"checkpoint layer {k} has inconsistent shapes")
    return model


@dataclass
class PointwiseFit:
    """Settings for fitting the network to per-item targets."""

    learning_rate: float = 0.05
    steps: int = 200
    batch_size: int = 256
    loss: str = "bce"  # "bce" on sigmoid(score), "mse" on raw score


def pointwise_loss_and_grad(
    scores: np.ndarray, targets: np.ndarray, weights: np.ndarray, loss: str
) -> tuple[float, np.ndarray]:
    """Weighted-mean pointwise loss and its gradient wrt the scores.

    bce: binary cross-entropy against sigmoid(score); targets may be soft.
    mse: squared error on the raw score.
    """
    if loss == "bce":
        values = softplus(scores) - targets * scores
        grad = sigmoid(scores) - targets
    elif loss == "mse":
        diff = scores - targets
        values = diff**2
        grad = 2.0 * diff
    else:
        raise ValueError(f"unknown pointwise loss {loss!r}")
    denom = max(len(scores), 1)
    total = float(np.sum(weights * values)) / denom
    return total, weights * grad / denom


def fit_pointwise(
    model: RankerModel,
    features: np.ndarray,
    targets: np.ndarray,
    config: PointwiseFit,
    rng: np.random.Generator,
    optimizer: Adagrad | None = None,
    sample_weights: np.ndarray | None = None,
) -> Adagrad:
    """Run mini-batch Adagrad steps on a pointwise objective.

    Returns the optimizer so callers can keep its state warm across refits.
    """
    features = np.asarray(features, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    n = features.shape[0]
    if n == 0:
        raise ValueError("empty training set")
    if sample_weights is None:
        sample_weights = np.ones(n)
    if optimizer is None:
        optimizer = Adagrad(model, config.learning_rate)
    for step in range(config.steps):
        idx = rng.integers(0, n, size=min(config.batch_size, n))
        cache: list = []
        scores = np.atleast_1d(model.forward(features[idx], cache=cache))
        loss, dscores = pointwise_loss_and_grad(
            scores, targets[idx], sample_weights[idx], config.loss
        )
        if not np.isfinite(loss):
            raise TrainingFailureError("pointwise loss diverged", epoch=step)
        grad_w, grad_b = model.backward(cache, dscores)
        optimizer.step(model, grad_w, grad_b)
    return optimizer
