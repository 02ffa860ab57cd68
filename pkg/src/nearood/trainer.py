"""Compact feed-forward classifier trained with optional label smoothing.

The architecture is input(d) -> ReLU hidden layers -> ReLU penultimate
layer of width p -> linear head with one row per class. The penultimate
activation is the feature representation consumed by the Gaussian
detector; label smoothing only changes the training targets, never the
network or the loss code path.

Training is plain minibatch Adam (decay constants pinned below), fully
deterministic for a fixed seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import (
    ConfigInvalid,
    DataError,
    DimensionMismatch,
    EpsilonOutOfRange,
    LabelOutOfRange,
    NonFiniteLoss,
)
from .gaussian import FeatureSet
from .numerics import RngState, as_matrix

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPSILON = 1e-8

SCHEDULES = ("constant", "half-cosine")


@dataclass(frozen=True)
class TrainConfig:
    """Training hyperparameters; epsilon 0.1 and lr 0.001 are the defaults.

    ``schedule`` is either "constant" or "half-cosine" (cosine decay from
    the base rate toward zero across the run). ``early_stop_fraction``
    carves that fraction of the training rows into a holdout whose loss
    selects the returned parameters; 0 disables it and the last epoch wins.
    """

    epsilon: float = 0.1
    learning_rate: float = 0.001
    epochs: int = 80
    batch_size: int = 128
    seed: int = 0
    hidden_sizes: tuple[int, ...] = (64,)
    penultimate_dim: int = 16
    schedule: str = "constant"
    early_stop_fraction: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "hidden_sizes", tuple(int(h) for h in self.hidden_sizes))
        for name in ("epsilon", "learning_rate", "early_stop_fraction"):
            object.__setattr__(self, name, float(getattr(self, name)))
        for name in ("epochs", "batch_size", "seed", "penultimate_dim"):
            object.__setattr__(self, name, int(getattr(self, name)))
        if not 0.0 <= self.epsilon < 1.0:
            raise EpsilonOutOfRange(f"epsilon must be in [0, 1), got {self.epsilon}")
        if self.learning_rate <= 0.0:
            raise ConfigInvalid("learning_rate must be positive")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigInvalid("epochs and batch_size must be at least 1")
        if self.penultimate_dim < 1 or any(h < 1 for h in self.hidden_sizes):
            raise ConfigInvalid("layer widths must be at least 1")
        if self.schedule not in SCHEDULES:
            raise ConfigInvalid(f"schedule must be one of {SCHEDULES}, got {self.schedule!r}")
        if not 0.0 <= self.early_stop_fraction < 1.0:
            raise ConfigInvalid("early_stop_fraction must be in [0, 1)")


@dataclass(frozen=True)
class ClassifierParams:
    """Weights and biases, one (out, in) matrix and (out,) bias per layer.

    All layers except the last apply ReLU; the last is the linear head.
    """

    weights: tuple[np.ndarray, ...]
    biases: tuple[np.ndarray, ...]

    def __post_init__(self):
        ws = tuple(np.array(w, dtype=np.float64) for w in self.weights)
        bs = tuple(np.array(b, dtype=np.float64) for b in self.biases)
        if len(ws) != len(bs) or len(ws) < 2:
            raise DataError("need matching weights/biases for at least two layers")
        for i, (w, b) in enumerate(zip(ws, bs)):
            if w.ndim != 2 or b.ndim != 1 or w.shape[0] != b.shape[0]:
                raise DimensionMismatch(f"layer {i} weight/bias shapes disagree")
            if i > 0 and w.shape[1] != ws[i - 1].shape[0]:
                raise DimensionMismatch(f"layer {i} input dim breaks the layer chain")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise DataError(f"layer {i} contains non-finite parameters")
            w.setflags(write=False)
            b.setflags(write=False)
        object.__setattr__(self, "weights", ws)
        object.__setattr__(self, "biases", bs)

    @property
    def layer_sizes(self) -> tuple[int, ...]:
        return (self.weights[0].shape[1],) + tuple(w.shape[0] for w in self.weights)

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def class_count(self) -> int:
        return self.weights[-1].shape[0]

    @property
    def penultimate_dim(self) -> int:
        return self.weights[-1].shape[1]

    @property
    def head_weights(self) -> np.ndarray:
        """Last-layer weight rows w_c, one per class (used as plane templates)."""
        return self.weights[-1]


def smooth_targets(labels, class_count: int, epsilon: float) -> np.ndarray:
    """(N, C) target rows: correct class 1 - eps + eps/C, others eps/C."""
    if not 0.0 <= epsilon < 1.0:
        raise EpsilonOutOfRange(f"epsilon must be in [0, 1), got {epsilon}")
    y = np.asarray(labels, dtype=np.int64)
    if y.ndim != 1:
        raise DataError("labels must be 1-D")
    if y.size and (y.min() < 0 or y.max() >= class_count):
        raise LabelOutOfRange(f"labels must be in 0..{class_count - 1}")
    targets = np.full((y.shape[0], class_count), epsilon / class_count)
    targets[np.arange(y.shape[0]), y] = (1.0 - epsilon) + epsilon / class_count
    return targets


def init_params(layer_sizes, rng: RngState) -> ClassifierParams:
    """Scaled-uniform fan-in initialization, biases zero, from one stream."""
    sizes = [int(s) for s in layer_sizes]
    if len(sizes) < 3:
        raise ConfigInvalid("need at least input, penultimate and head sizes")
    gen = rng.generator()
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        bound = 1.0 / math.sqrt(fan_in)
        weights.append(gen.uniform(-bound, bound, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return ClassifierParams(weights=tuple(weights), biases=tuple(biases))


def _forward_full(params: ClassifierParams, x: np.ndarray):
    """All layer activations for a (N, d) batch; activations[0] is the input."""
    activations = [x]
    h = x
    for w, b in zip(params.weights[:-1], params.biases[:-1]):
        h = np.maximum(h @ w.T + b, 0.0)
        activations.append(h)
    logits = h @ params.weights[-1].T + params.biases[-1]
    return activations, logits


def forward(params: ClassifierParams, x) -> tuple[np.ndarray, np.ndarray]:
    """Single-vector forward pass; returns (logits, penultimate activation)."""
    v = np.asarray(x, dtype=np.float64)
    if v.ndim != 1 or v.shape[0] != params.input_dim:
        raise DimensionMismatch(f"expected input of dim {params.input_dim}")
    activations, logits = _forward_full(params, v[None, :])
    return logits[0], activations[-1][0]


def forward_batch(params: ClassifierParams, inputs) -> tuple[np.ndarray, np.ndarray]:
    """Batched forward pass; returns (logits (N, C), penultimate (N, p))."""
    x = as_matrix(inputs, "inputs")
    if x.shape[1] != params.input_dim:
        raise DimensionMismatch(f"expected inputs of dim {params.input_dim}")
    activations, logits = _forward_full(params, x)
    return logits, activations[-1]


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def loss_and_gradient(params: ClassifierParams, inputs, targets):
    """Mean cross-entropy against (possibly smoothed) target rows, with grads.

    Returns (loss, grads) where grads is a ClassifierParams carrying the
    exact backpropagated gradient in each slot.
    """
    x = as_matrix(inputs, "inputs")
    t = as_matrix(targets, "targets")
    if x.shape[1] != params.input_dim:
        raise DimensionMismatch(f"expected inputs of dim {params.input_dim}")
    if t.shape != (x.shape[0], params.class_count):
        raise DimensionMismatch(
            f"targets must be {(x.shape[0], params.class_count)}, got {t.shape}"
        )
    n = x.shape[0]
    activations, logits = _forward_full(params, x)
    log_probs = _log_softmax(logits)
    loss = float(-(t * log_probs).sum() / n)
    if not math.isfinite(loss):
        raise NonFiniteLoss("loss is non-finite")

    d_logits = (np.exp(log_probs) - t) / n
    grad_w = [None] * len(params.weights)
    grad_b = [None] * len(params.biases)
    delta = d_logits
    for layer in range(len(params.weights) - 1, -1, -1):
        grad_w[layer] = delta.T @ activations[layer]
        grad_b[layer] = delta.sum(axis=0)
        if layer > 0:
            delta = (delta @ params.weights[layer]) * (activations[layer] > 0.0)
    return loss, ClassifierParams(weights=tuple(grad_w), biases=tuple(grad_b))


def _schedule_rate(config: TrainConfig, epoch: int) -> float:
    if config.schedule == "constant":
        return config.learning_rate
    return config.learning_rate * 0.5 * (1.0 + math.cos(math.pi * epoch / config.epochs))


def train(inputs, labels, class_count: int, config: TrainConfig) -> ClassifierParams:
    """Train the classifier; deterministic for a fixed config.seed.

    Raises NonFiniteLoss (with the offending epoch) if the loss diverges.
    """
    x = as_matrix(inputs, "inputs")
    y = np.asarray(labels, dtype=np.int64)
    if y.ndim != 1 or y.shape[0] != x.shape[0]:
        raise DimensionMismatch("inputs and labels disagree in length")
    targets = smooth_targets(y, class_count, config.epsilon)

    rng = RngState(config.seed)
    params = init_params(
        (x.shape[1], *config.hidden_sizes, config.penultimate_dim, class_count),
        rng.child(0),
    )
    shuffle_gen = rng.child(1).generator()

    train_idx = np.arange(x.shape[0])
    holdout_idx = None
    if config.early_stop_fraction > 0.0:
        n_hold = max(1, int(round(config.early_stop_fraction * x.shape[0])))
        if n_hold >= x.shape[0]:
            raise ConfigInvalid("early_stop_fraction leaves no training rows")
        perm = rng.child(2).generator().permutation(x.shape[0])
        holdout_idx, train_idx = perm[:n_hold], perm[n_hold:]

    m_state = [np.zeros_like(w) for w in params.weights] + [
        np.zeros_like(b) for b in params.biases
    ]
    v_state = [np.zeros_like(g) for g in m_state]
    step = 0
    best_params, best_loss = params, math.inf

    for epoch in range(config.epochs):
        lr = _schedule_rate(config, epoch)
        order = shuffle_gen.permutation(train_idx.shape[0])
        for start in range(0, order.shape[0], config.batch_size):
            batch = train_idx[order[start : start + config.batch_size]]
            try:
                _, grads = loss_and_gradient(params, x[batch], targets[batch])
                step += 1
                flat_grads = list(grads.weights) + list(grads.biases)
                flat_params = list(params.weights) + list(params.biases)
                corr1 = 1.0 - ADAM_BETA1**step
                corr2 = 1.0 - ADAM_BETA2**step
                new_flat = []
                for i, (p, g) in enumerate(zip(flat_params, flat_grads)):
                    m_state[i] = ADAM_BETA1 * m_state[i] + (1.0 - ADAM_BETA1) * g
                    v_state[i] = ADAM_BETA2 * v_state[i] + (1.0 - ADAM_BETA2) * g * g
                    update = (m_state[i] / corr1) / (
                        np.sqrt(v_state[i] / corr2) + ADAM_EPSILON
                    )
                    new_flat.append(p - lr * update)
                k = len(params.weights)
                # The constructor re-checks finiteness, so parameters stay
                # finite after every step or the run aborts.
                params = ClassifierParams(
                    weights=tuple(new_flat[:k]), biases=tuple(new_flat[k:])
                )
            except (NonFiniteLoss, DataError) as exc:
                raise NonFiniteLoss(
                    f"training diverged at epoch {epoch}: {exc}", epoch=epoch
                ) from exc
        if holdout_idx is not None:
            hold_loss, _ = loss_and_gradient(params, x[holdout_idx], targets[holdout_idx])
            if hold_loss < best_loss:
                best_loss, best_params = hold_loss, params
    return best_params if holdout_idx is not None else params


def extract_features(
    params: ClassifierParams, inputs, labels, class_count: int, source_tag: str = ""
) -> FeatureSet:
    """Penultimate activations as a FeatureSet; labels pass through untouched."""
    _, penultimate = forward_batch(params, inputs)
    return FeatureSet(
        features=penultimate,
        labels=np.asarray(labels, dtype=np.int64),
        class_count=class_count,
        source_tag=source_tag,
    )


# ---------------------------------------------------------------------------
# Serialization: plain text, hex floats for exact 64-bit round-trips.
# ---------------------------------------------------------------------------

_PARAMS_MAGIC = "nearood-classifier-params 1"


def save_params(params: ClassifierParams, path) -> None:
    lines = [_PARAMS_MAGIC]
    lines.append("layer_sizes " + " ".join(str(s) for s in params.layer_sizes))
    for layer, (w, b) in enumerate(zip(params.weights, params.biases)):
        for i in range(w.shape[0]):
            lines.append(f"W {layer} {i} " + " ".join(float(v).hex() for v in w[i]))
        lines.append(f"b {layer} " + " ".join(float(v).hex() for v in b))
    Path(path).write_text("\n".join(lines) + "\n")


def load_params(path) -> ClassifierParams:
    path = Path(path)
    if not path.exists():
        raise DataError(f"params file not found: {path}")
    lines = path.read_text().splitlines()
    if not lines or lines[0] != _PARAMS_MAGIC:
        raise DataError(f"{path} is not a classifier params file")
    sizes: list[int] = []
    w_rows: dict[tuple[int, int], np.ndarray] = {}
    b_rows: dict[int, np.ndarray] = {}
    for line in lines[1:]:
        if not line.strip():
            continue
        parts = line.split(" ", 1)
        if parts[0] == "layer_sizes":
            sizes = [int(tok) for tok in parts[1].split()]
        elif parts[0] == "W":
            layer_txt, row_txt, rest = parts[1].split(" ", 2)
            w_rows[(int(layer_txt), int(row_txt))] = np.array(
                [float.fromhex(tok) for tok in rest.split()]
            )
        elif parts[0] == "b":
            layer_txt, rest = parts[1].split(" ", 1)
            b_rows[int(layer_txt)] = np.array([float.fromhex(tok) for tok in rest.split()])
        else:
            raise DataError(f"malformed params line: {line[:40]!r}")
    try:
        n_layers = len(sizes) - 1
        weights = tuple(
            np.stack([w_rows[(layer, i)] for i in range(sizes[layer + 1])])
            for layer in range(n_layers)
        )
        biases = tuple(b_rows[layer] for layer in range(n_layers))
        return ClassifierParams(weights=weights, biases=biases)
    except (KeyError, ValueError, IndexError) as exc:
        raise DataError(f"malformed params file {path}: {exc}") from exc
