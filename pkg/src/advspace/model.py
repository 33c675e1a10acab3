"""Dense rectifier classifiers with exact input Jacobians.

Everything here runs in float64. Networks are immutable once built: training
returns a new :class:`DenseNet` rather than updating one in place, so a trained
model can be shared freely between crafting workers.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

CHECKPOINT_FORMAT = "advspace-densenet"
CHECKPOINT_VERSION = 1

LossFn = Callable[[np.ndarray, np.ndarray], tuple[np.ndarray, np.ndarray]]


class InputDimensionError(ValueError):
    """Raised when an input does not match the network's feature count."""


class TrainingError(RuntimeError):
    """Raised when training diverges."""


@dataclass(frozen=True)
class DenseNet:
    """Feedforward classifier: affine layers with rectifiers in between.

    ``layers`` holds ``(weight, bias)`` pairs with weights shaped ``[out, in]``.
    The final layer emits raw logits.
    """

    layers: tuple[tuple[np.ndarray, np.ndarray], ...]
    seed: int | None = None
    metadata: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if not self.layers:
            raise ValueError("a DenseNet needs at least one layer")
        frozen = []
        prev_out = None
        for i, (w, b) in enumerate(self.layers):
            w = np.array(w, dtype=np.float64)
            b = np.array(b, dtype=np.float64)
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise ValueError(f"layer {i}: weight {w.shape} and bias {b.shape} disagree")
            if prev_out is not None and w.shape[1] != prev_out:
                raise ValueError(f"layer {i} expects {w.shape[1]} inputs, previous layer emits {prev_out}")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise ValueError(f"layer {i} has non-finite parameters")
            w.setflags(write=False)
            b.setflags(write=False)
            frozen.append((w, b))
            prev_out = w.shape[0]
        if prev_out < 2:
            raise ValueError("class_count must be at least 2")
        object.__setattr__(self, "layers", tuple(frozen))

    @property
    def input_dim(self) -> int:
        return self.layers[0][0].shape[1]

    @property
    def class_count(self) -> int:
        return self.layers[-1][0].shape[0]

    @property
    def dims(self) -> list[int]:
        return [self.input_dim] + [w.shape[0] for w, _ in self.layers]


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    class_count: int | None = None

    def __post_init__(self):
        x = np.asarray(self.features, dtype=np.float64)
        y = np.asarray(self.labels)
        if x.ndim != 2 or x.shape[0] < 1:
            raise ValueError("features must be a non-empty [n, d] matrix")
        if y.shape != (x.shape[0],):
            raise ValueError("labels must have one entry per sample")
        if not np.issubdtype(y.dtype, np.integer):
            if not np.all(y == np.round(y)):
                raise ValueError("labels must be integral class indices")
            y = y.astype(np.int64)
        if np.any(x < 0.0) or np.any(x > 1.0) or not np.all(np.isfinite(x)):
            raise ValueError("features must lie in [0, 1]")
        c = int(y.max()) + 1 if self.class_count is None else int(self.class_count)
        if np.any(y < 0) or np.any(y >= c):
            raise ValueError("labels outside [0, class_count)")
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "labels", y.astype(np.int64))
        object.__setattr__(self, "class_count", c)

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def subset(self, idx) -> "Dataset":
        return Dataset(self.features[idx], self.labels[idx], self.class_count)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 40
    batch_size: int = 32
    learning_rate: float = 1e-2
    optimizer: str = "adam"
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.optimizer not in ("gd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}; expected 'gd' or 'adam'")


@dataclass(frozen=True)
class AdvTrainConfig(TrainConfig):
    """Training settings plus the PGD inner loop used to perturb minibatches."""

    inner_attack_iterations: int = 10
    inner_step_size: float = 0.01
    rr_epsilon: float = 0.05

    def __post_init__(self):
        super().__post_init__()
        if self.inner_attack_iterations < 0 or self.inner_step_size <= 0 or self.rr_epsilon < 0:
            raise ValueError("adversarial-training parameters must be positive")

    def base(self) -> TrainConfig:
        return TrainConfig(self.epochs, self.batch_size, self.learning_rate, self.optimizer, self.seed)


def init_net(sizes: Sequence[int], seed: int = 0) -> DenseNet:
    """He-uniform initialisation for layer widths ``sizes = [d, h1, ..., c]``."""
    if len(sizes) < 2:
        raise ValueError("sizes needs an input and an output width")
    rng = np.random.default_rng(seed)
    layers = []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        bound = np.sqrt(6.0 / fan_in)
        layers.append((rng.uniform(-bound, bound, (fan_out, fan_in)), np.zeros(fan_out)))
    return DenseNet(tuple(layers), seed=seed)


def _as_batch(net: DenseNet, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    x2 = x[None, :] if single else x
    if x2.ndim != 2 or x2.shape[1] != net.input_dim:
        raise InputDimensionError(f"expected {net.input_dim} features, got shape {x.shape}")
    return x2, single


def _forward(net: DenseNet, x: np.ndarray) -> tuple[np.ndarray, list[np.ndarray], list[np.ndarray]]:
    # returns logits, the input to every layer, and each hidden layer's active mask
    inputs, masks = [], []
    h = x
    last = len(net.layers) - 1
    for i, (w, b) in enumerate(net.layers):
        inputs.append(h)
        z = h @ w.T + b
        if i < last:
            mask = z > 0.0
            masks.append(mask)
            h = np.where(mask, z, 0.0)
        else:
            h = z
    return h, inputs, masks


def forward_logits(net: DenseNet, x) -> np.ndarray:
    """Logits for one sample ``[d]`` or a batch ``[n, d]``."""
    x2, single = _as_batch(net, x)
    logits = _forward(net, x2)[0]
    return logits[0] if single else logits


def softmax(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise FloatingPointError("softmax of non-finite logits")
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def jacobian(net: DenseNet, x) -> np.ndarray:
    """Exact logit Jacobian, ``[c, d]`` per sample (``[n, c, d]`` for a batch).

    A rectifier sitting exactly at zero contributes slope 0.
    """
    x2, single = _as_batch(net, x)
    _, _, masks = _forward(net, x2)
    w_out = net.layers[-1][0]
    acc = np.broadcast_to(w_out, (x2.shape[0],) + w_out.shape)
    for (w, _), mask in zip(reversed(net.layers[:-1]), reversed(masks)):
        acc = (acc * mask[:, None, :]) @ w
    acc = np.ascontiguousarray(acc)
    return acc[0] if single else acc


def backprop_input(net: DenseNet, x, grad_logits) -> np.ndarray:
    """Vector-Jacobian product ``grad_logits · J`` in a single backward pass."""
    x2, single = _as_batch(net, x)
    g = np.asarray(grad_logits, dtype=np.float64)
    g = g[None, :] if g.ndim == 1 else g
    _, _, masks = _forward(net, x2)
    for i in range(len(net.layers) - 1, -1, -1):
        g = g @ net.layers[i][0]
        if i > 0:
            g = g * masks[i - 1]
    return g[0] if single else g


def cross_entropy(logits, labels) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample cross-entropy and its gradient with respect to the logits."""
    z = np.asarray(logits, dtype=np.float64)
    y = np.asarray(labels)
    single = z.ndim == 1
    z2 = z[None, :] if single else z
    y2 = np.atleast_1d(y)
    shifted = z2 - z2.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(z2.shape[0])
    value = logsumexp - shifted[rows, y2]
    grad = softmax(z2)
    grad[rows, y2] -= 1.0
    return (value[0], grad[0]) if single else (value, grad)


def loss_gradient_wrt_input(net: DenseNet, loss: LossFn, x, y) -> np.ndarray:
    """Input gradient of ``loss(logits, y)``, i.e. ``dL/dlogits · J``."""
    x2, single = _as_batch(net, x)
    logits = _forward(net, x2)[0]
    _, g_logits = loss(logits, np.atleast_1d(y))
    g = backprop_input(net, x2, g_logits)
    return g[0] if single else g


def accuracy(net: DenseNet, features, labels) -> float:
    """Fraction of samples whose argmax logit (lowest index on ties) equals the label."""
    logits = forward_logits(net, np.atleast_2d(features))
    return float(np.mean(np.argmax(logits, axis=1) == np.asarray(labels)))


def _parameter_gradients(net: DenseNet, x: np.ndarray, y: np.ndarray) -> tuple[float, list]:
    logits, inputs, masks = _forward(net, x)
    value, g = cross_entropy(logits, y)
    g = g / x.shape[0]
    grads = [None] * len(net.layers)
    for i in range(len(net.layers) - 1, -1, -1):
        grads[i] = (g.T @ inputs[i], g.sum(axis=0))
        if i > 0:
            g = (g @ net.layers[i][0]) * masks[i - 1]
    return float(value.mean()), grads


class _Adam:
    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def _fit(net, data: Dataset, cfg: TrainConfig, perturb=None):
    _check_data(net, data)
    params = [a.copy() for w, b in net.layers for a in (w, b)]
    rng = np.random.default_rng(cfg.seed)
    adam = _Adam(params, cfg.learning_rate) if cfg.optimizer == "adam" else None
    history = []
    n = len(data)
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            xb, yb = data.features[idx], data.labels[idx]
            current = _rebuild(net, params)
            if perturb is not None:
                xb = perturb(current, xb, yb)
            value, grads = _parameter_gradients(current, xb, yb)
            if not np.isfinite(value):
                raise TrainingError(f"non-finite training loss at epoch {epoch}")
            flat = [a for pair in grads for a in pair]
            if adam is not None:
                adam.step(params, flat)
            else:
                for p, g in zip(params, flat):
                    p -= cfg.learning_rate * g
        history.append(accuracy(_rebuild(net, params), data.features, data.labels))
    trained = _rebuild(net, params)
    meta = dict(net.metadata)
    meta["final_accuracy"] = accuracy(trained, data.features, data.labels)
    meta["epochs"] = cfg.epochs
    return DenseNet(trained.layers, seed=net.seed, metadata=meta), history


def _rebuild(net: DenseNet, params) -> DenseNet:
    pairs = tuple((params[2 * i], params[2 * i + 1]) for i in range(len(net.layers)))
    return DenseNet(pairs, seed=net.seed, metadata=net.metadata)


def _check_data(net: DenseNet, data: Dataset):
    if data.dim != net.input_dim:
        raise InputDimensionError(f"dataset has {data.dim} features, network expects {net.input_dim}")
    if data.class_count > net.class_count:
        raise InputDimensionError("dataset has more classes than the network outputs")


def train(net: DenseNet, data: Dataset, cfg: TrainConfig) -> tuple[DenseNet, list[float]]:
    """Minibatch cross-entropy training; returns the new network and per-epoch accuracy."""
    if cfg.epochs == 0:
        _check_data(net, data)
        return net, []
    return _fit(net, data, cfg)


def pgd_linf(net: DenseNet, x, y, epsilon: float, step_size: float, iterations: int, rng) -> np.ndarray:
    """Random start inside the epsilon box, then signed cross-entropy ascent.

    Every iterate is clipped to both the epsilon box around ``x`` and [0, 1].
    """
    x = np.asarray(x, dtype=np.float64)
    lo = np.clip(x - epsilon, 0.0, 1.0)
    hi = np.clip(x + epsilon, 0.0, 1.0)
    adv = x.copy()
    if epsilon > 0:
        adv = np.clip(x + rng.uniform(-epsilon, epsilon, x.shape), lo, hi)
    for _ in range(iterations):
        g = loss_gradient_wrt_input(net, cross_entropy, adv, y)
        adv = np.clip(adv + step_size * np.sign(g), lo, hi)
    return adv


def pgd_accuracy(net: DenseNet, data: Dataset, epsilon: float, step_size=0.01, iterations=50, seed=0) -> float:
    rng = np.random.default_rng(seed)
    adv = pgd_linf(net, data.features, data.labels, epsilon, step_size, iterations, rng)
    return accuracy(net, adv, data.labels)


def adversarially_train(net: DenseNet, data: Dataset, cfg: AdvTrainConfig) -> tuple[DenseNet, list[float]]:
    """Train on PGD perturbations of each minibatch instead of the clean batch."""
    if cfg.epochs == 0:
        _check_data(net, data)
        return net, []
    attack_rng = np.random.default_rng([cfg.seed, 1])

    def perturb(current, xb, yb):
        if cfg.inner_attack_iterations == 0 and cfg.rr_epsilon == 0:
            return xb
        return pgd_linf(current, xb, yb, cfg.rr_epsilon, cfg.inner_step_size, cfg.inner_attack_iterations, attack_rng)

    robust, history = _fit(net, data, cfg.base(), perturb)
    meta = dict(robust.metadata, adversarial=True, rr_epsilon=cfg.rr_epsilon,
                inner_attack_iterations=cfg.inner_attack_iterations, inner_step_size=cfg.inner_step_size)
    return DenseNet(robust.layers, seed=robust.seed, metadata=meta), history


def save_checkpoint(net: DenseNet, path) -> None:
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "dims": net.dims,
        "class_count": net.class_count,
        "seed": net.seed,
        "metadata": net.metadata,
        "layers": [{"weight": w.tolist(), "bias": b.tolist()} for w, b in net.layers],
    }
    Path(path).write_text(json.dumps(payload, sort_keys=True))


def load_checkpoint(path) -> DenseNet:
    payload = json.loads(Path(path).read_text())
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not a DenseNet checkpoint")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {payload.get('version')}")
    layers = tuple((np.array(l["weight"]), np.array(l["bias"])) for l in payload["layers"])
    net = DenseNet(layers, seed=payload.get("seed"), metadata=payload.get("metadata", {}))
    if net.dims != payload["dims"] or net.class_count != payload["class_count"]:
        raise ValueError(f"{path}: stored dims do not match layer shapes")
    return net
