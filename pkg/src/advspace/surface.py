"""Gradient-producing attack components.

A surface turns a model, a loss, a saliency map and an lp norm into a single
perturbation direction per sample. Directions always point *toward*
misclassification, so travelers only ever add them.

All functions accept a single sample (logits ``[c]``, Jacobian ``[c, d]``) or a
batch (``[n, c]``, ``[n, c, d]``) and return matching shapes.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .model import DenseNet, _as_batch, _forward, backprop_input, cross_entropy, jacobian

DLR_GUARD = 1e-12


class Loss(str, Enum):
    CE = "CE"
    CW = "CW"
    IDENTITY = "IL"
    DLR = "DLR"


class SaliencyMap(str, Enum):
    JSMA = "JSMA"
    DEEPFOOL = "DF"
    IDENTITY = "ID"


# +1: the attacker maximises the loss, -1: the attacker minimises it
ORIENTATION = {Loss.CE: 1.0, Loss.DLR: 1.0, Loss.CW: -1.0, Loss.IDENTITY: -1.0}

NORMS = (0, 2, np.inf)


def parse_norm(p) -> float:
    """Accept 0, 2, inf or the spellings 'l0', 'l2', 'linf'."""
    if isinstance(p, str):
        key = p.strip().lower().lstrip("l")
        table = {"0": 0, "2": 2, "inf": np.inf, "∞": np.inf}
        if key not in table:
            raise ValueError(f"unknown lp norm {p!r}")
        return table[key]
    p = float(p)
    if p not in (0.0, 2.0, np.inf):
        raise ValueError(f"lp norm must be 0, 2 or inf, got {p}")
    return p


def norm_name(p) -> str:
    p = parse_norm(p)
    return "linf" if p == np.inf else f"l{int(p)}"


def dual_exponent(p) -> float:
    """q for the DeepFool map; l0 falls back to the l-inf conjugate."""
    p = parse_norm(p)
    return 2.0 if p == 2 else 1.0


@dataclass(frozen=True)
class LossComponent:
    kind: Loss
    cw_tradeoff: float = 1.0
    cw_norm: float = 2

    def __post_init__(self):
        object.__setattr__(self, "kind", Loss(self.kind))
        object.__setattr__(self, "cw_norm", parse_norm(self.cw_norm))
        if not self.cw_tradeoff > 0:
            raise ValueError("cw_tradeoff must be positive")

    @property
    def orientation(self) -> str:
        return "maximize" if ORIENTATION[self.kind] > 0 else "minimize"


@dataclass(frozen=True)
class SurfaceConfig:
    loss: Loss
    saliency: SaliencyMap
    norm: float
    cw_tradeoff: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "loss", Loss(self.loss))
        object.__setattr__(self, "saliency", SaliencyMap(self.saliency))
        object.__setattr__(self, "norm", parse_norm(self.norm))

    @property
    def requires_full_jacobian(self) -> bool:
        return self.saliency is not SaliencyMap.IDENTITY


@dataclass
class SurfaceOutput:
    direction: np.ndarray
    closest_class: np.ndarray | None
    jacobian_evals: int
    objective: np.ndarray
    logits: np.ndarray


def _batch_logits(logits, y):
    z = np.asarray(logits, dtype=np.float64)
    single = z.ndim == 1
    z2 = z[None, :] if single else z
    y2 = np.broadcast_to(np.atleast_1d(np.asarray(y, dtype=np.int64)), (z2.shape[0],))
    return z2, y2, single


def _runner_up(z: np.ndarray, y: np.ndarray) -> np.ndarray:
    masked = z.copy()
    masked[np.arange(z.shape[0]), y] = -np.inf
    return np.argmax(masked, axis=1)


def ce_loss(logits, y):
    """Cross-entropy value and logit gradient (softmax minus one-hot)."""
    return cross_entropy(logits, y)


def identity_loss(logits, y):
    z, y2, single = _batch_logits(logits, y)
    rows = np.arange(z.shape[0])
    value = z[rows, y2].copy()
    grad = np.zeros_like(z)
    grad[rows, y2] = 1.0
    return (value[0], grad[0]) if single else (value, grad)


def perturbation_norm_term(delta, p):
    """``||delta||_p^p`` and its gradient; l-inf uses the plain max norm, l0 has no gradient."""
    d = np.asarray(delta, dtype=np.float64)
    single = d.ndim == 1
    d2 = d[None, :] if single else d
    p = parse_norm(p)
    if p == 2:
        value, grad = (d2 * d2).sum(axis=1), 2.0 * d2
    elif p == 0:
        value, grad = np.count_nonzero(d2, axis=1).astype(np.float64), np.zeros_like(d2)
    else:
        k = np.argmax(np.abs(d2), axis=1)
        rows = np.arange(d2.shape[0])
        value = np.abs(d2[rows, k])
        grad = np.zeros_like(d2)
        grad[rows, k] = np.sign(d2[rows, k])
    return (value[0], grad[0]) if single else (value, grad)


def cw_loss(logits, y, delta, p=2, c=1.0):
    """Carlini-Wagner objective: distortion plus a hinge on the true-class margin.

    Returns ``(value, grad_logits, grad_delta)``. The hinge contributes no
    gradient once the margin is non-positive.
    """
    z, y2, single = _batch_logits(logits, y)
    rows = np.arange(z.shape[0])
    r = _runner_up(z, y2)
    margin = z[rows, y2] - z[rows, r]
    active = margin > 0
    d = np.asarray(delta, dtype=np.float64)
    d2 = np.broadcast_to(d[None, :] if d.ndim == 1 else d, (z.shape[0], d.shape[-1]))
    dist, grad_delta = perturbation_norm_term(d2, p)
    value = dist + c * np.maximum(margin, 0.0)
    grad = np.zeros_like(z)
    grad[rows[active], y2[active]] = c
    grad[rows[active], r[active]] -= c
    if single:
        return value[0], grad[0], grad_delta[0]
    return value, grad, grad_delta


def dlr_loss(logits, y):
    """Difference-of-logits-ratio value and logit gradient.

    With fewer than three classes the denominator uses the second-largest logit.
    Sorted positions are treated as locally constant when differentiating.
    """
    z, y2, single = _batch_logits(logits, y)
    n, c = z.shape
    rows = np.arange(n)
    order = np.argsort(-z, axis=1, kind="stable")
    top, bottom = order[:, 0], order[:, 2 if c >= 3 else 1]
    r = _runner_up(z, y2)
    num = z[rows, y2] - z[rows, r]
    den = z[rows, top] - z[rows, bottom] + DLR_GUARD
    value = -num / den
    grad = np.zeros_like(z)
    np.add.at(grad, (rows, y2), -1.0 / den)
    np.add.at(grad, (rows, r), 1.0 / den)
    np.add.at(grad, (rows, top), num / den**2)
    np.add.at(grad, (rows, bottom), -num / den**2)
    return (value[0], grad[0]) if single else (value, grad)


def _batch_jacobian(jac, y):
    j = np.asarray(jac, dtype=np.float64)
    single = j.ndim == 2
    j3 = j[None] if single else j
    y2 = np.broadcast_to(np.atleast_1d(np.asarray(y, dtype=np.int64)), (j3.shape[0],))
    return j3, y2, single


def jsma_like_map(jac, y):
    """Per-feature scores: ``|J_y| * sum_{j != y} J_j`` where those two disagree in sign, else 0."""
    j3, y2, single = _batch_jacobian(jac, y)
    rows = np.arange(j3.shape[0])
    own = j3[rows, y2]
    others = j3.sum(axis=1) - own
    scores = np.where(np.sign(own) == np.sign(others), 0.0, np.abs(own) * others)
    return scores[0] if single else scores


def apply_feature_limit_mask(scores, x):
    """Drop scores that would push a feature already sitting at 0 or 1 further out."""
    s = np.asarray(scores, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    return np.where(((s > 0) & (x >= 1.0)) | ((s < 0) & (x <= 0.0)), 0.0, s)


def closest_class(logits, jac, y, q):
    """Class minimising ``|f_y - f_i| / ||J_y - J_i||_q`` over ``i != y`` (lowest index on ties)."""
    z, y2, single = _batch_logits(logits, y)
    j3, _, _ = _batch_jacobian(jac, y2)
    rows = np.arange(z.shape[0])
    gap = np.abs(z[rows, y2][:, None] - z)
    diff = j3[rows, y2][:, None, :] - j3
    dist = np.sum(np.abs(diff) ** q, axis=2) ** (1.0 / q)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(dist > 0, gap / np.where(dist > 0, dist, 1.0), np.where(gap == 0, 0.0, np.inf))
    ratio[rows, y2] = np.nan
    k = np.nanargmin(ratio, axis=1)
    return k[0] if single else k


def deepfool_like_map(logits, jac, y, q):
    """DeepFool projection toward the closest class.

    ``|f_y - f_k| / ||dJ||_q^q * |dJ|^(q-1) * sign(dJ)`` with ``dJ = J_y - J_k``.
    The result increases the ``y``-vs-``k`` margin; subtract it to cross the boundary.
    Returns ``(direction, k)``.
    """
    z, y2, single = _batch_logits(logits, y)
    j3, _, _ = _batch_jacobian(jac, y2)
    rows = np.arange(z.shape[0])
    k = np.atleast_1d(closest_class(z, j3, y2, q))
    diff = j3[rows, y2] - j3[rows, k]
    gap = np.abs(z[rows, y2] - z[rows, k])
    size = np.sum(np.abs(diff) ** q, axis=1)
    scale = np.divide(gap, size, out=np.zeros_like(gap), where=size > 0)
    direction = scale[:, None] * np.abs(diff) ** (q - 1.0) * np.sign(diff)
    return (direction[0], k[0]) if single else (direction, k)


def lp_transform(grad, p):
    """Project gradient-like information onto the unit step of an lp threat model."""
    g = np.asarray(grad, dtype=np.float64)
    single = g.ndim == 1
    g2 = g[None, :] if single else g
    p = parse_norm(p)
    if p == np.inf:
        out = np.sign(g2)
    elif p == 2:
        size = np.linalg.norm(g2, axis=1, keepdims=True)
        out = np.divide(g2, size, out=np.zeros_like(g2), where=size > 0)
    else:
        rows = np.arange(g2.shape[0])
        k = np.argmax(np.abs(g2), axis=1)
        out = np.zeros_like(g2)
        out[rows, k] = np.sign(g2[rows, k])
    return out[0] if single else out


def _loss_rows(cfg: SurfaceConfig, logits, labels, delta):
    """Value and logit gradient of the configured loss for the given labels."""
    if cfg.loss is Loss.CE:
        return (*ce_loss(logits, labels), None)
    if cfg.loss is Loss.DLR:
        return (*dlr_loss(logits, labels), None)
    if cfg.loss is Loss.IDENTITY:
        return (*identity_loss(logits, labels), None)
    return cw_loss(logits, labels, delta, cfg.norm, cfg.cw_tradeoff)


def surface_gradient(net: DenseNet, cfg: SurfaceConfig, x, delta, y, chain=None) -> SurfaceOutput:
    """Compose loss, saliency map and lp norm into an attack direction at ``x + delta``.

    ``chain`` is an optional elementwise factor applied to every input gradient
    (the derivative of a reparameterisation, e.g. the tanh change of variables);
    the returned direction then lives in that parameter space.
    """
    x0, single = _as_batch(net, x)
    d = np.broadcast_to(np.asarray(delta, dtype=np.float64), x0.shape)
    point = x0 + d
    y2 = np.broadcast_to(np.atleast_1d(np.asarray(y, dtype=np.int64)), (x0.shape[0],))
    n = point.shape[0]
    rows = np.arange(n)
    sign = ORIENTATION[cfg.loss]
    logits = _forward(net, point)[0]
    factor = 1.0 if chain is None else np.asarray(chain, dtype=np.float64)
    k = None

    if not cfg.requires_full_jacobian:
        value, g_logits, g_delta = _loss_rows(cfg, logits, y2, d)
        grad = backprop_input(net, point, g_logits)
        if g_delta is not None:
            grad = grad + g_delta
        direction = sign * grad * factor
        objective = sign * value
        evals = 0
    else:
        jac = jacobian(net, point)
        c = net.class_count
        rows_grad = np.empty_like(jac)
        rows_value = np.empty((n, c))
        for j in range(c):
            value, g_logits, g_delta = _loss_rows(cfg, logits, np.full(n, j), d)
            rows_grad[:, j] = np.einsum("nc,ncd->nd", g_logits, jac)
            if g_delta is not None:
                rows_grad[:, j] += g_delta
            rows_value[:, j] = value
        # rows that grow with support for each class, whatever the loss orientation
        support = -sign * rows_grad
        if chain is not None:
            support = support * factor[:, None, :] if np.ndim(factor) == 2 else support * factor
        support_value = -sign * rows_value
        if cfg.saliency is SaliencyMap.JSMA:
            direction = jsma_like_map(support, y2)
        else:
            projection, k = deepfool_like_map(support_value, support, y2, dual_exponent(cfg.norm))
            direction = -projection
        objective = -support_value[rows, y2]
        evals = 1

    if cfg.norm == 0:
        direction = apply_feature_limit_mask(direction, point)
    direction = lp_transform(direction, cfg.norm)
    if single:
        return SurfaceOutput(direction[0], None if k is None else k[0], evals, objective[0], logits[0])
    return SurfaceOutput(direction, k, evals, objective, logits)
