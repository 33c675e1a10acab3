"""Input-manipulating attack components.

A traveler owns the iterate. It optionally applies a random restart once at
initialisation, optionally reparameterises the input through tanh (change of
variables), and steps with one of four optimizers along the directions a
surface provides. Without the change of variables every step is clipped to
[0, 1]; with it, steps happen on ``w`` and the box holds by construction.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

COV_KAPPA = 1e-6
MBS_CHECKPOINTS = (0.22, 0.44, 0.66, 0.88)


class Optimizer(str, Enum):
    SGD = "SGD"
    ADAM = "Adam"
    MBS = "MBS"
    BWSGD = "BWSGD"


@dataclass(frozen=True)
class TravelerConfig:
    optimizer: Optimizer = Optimizer.SGD
    step_size: float = 0.01
    rr_enabled: bool = False
    rr_epsilon: float = 0.05
    cov_enabled: bool = False
    mbs_momentum: float = 0.75
    bwsgd_blend: float = 0.0
    bwsgd_backward: float = 0.9
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    max_iters: int = 100

    def __post_init__(self):
        object.__setattr__(self, "optimizer", Optimizer(self.optimizer))
        if not self.step_size > 0:
            raise ValueError("step_size must be positive")
        if self.rr_epsilon < 0:
            raise ValueError("rr_epsilon must be non-negative")
        if not 0 < self.mbs_momentum <= 1:
            raise ValueError("mbs_momentum must lie in (0, 1]")
        if self.bwsgd_blend != 0:
            raise ValueError("only bwsgd_blend = 0 is supported")
        if not 0 < self.bwsgd_backward <= 1:
            raise ValueError("bwsgd_backward must lie in (0, 1]")


@dataclass
class OptimizerState:
    x_org: np.ndarray
    z_org: np.ndarray
    prev: np.ndarray
    alpha: np.ndarray
    m: np.ndarray | None = None
    v: np.ndarray | None = None
    t: int = 0
    best: np.ndarray | None = None
    best_at_checkpoint: np.ndarray | None = None
    checkpoints: frozenset = field(default_factory=frozenset)


def random_restart(x, epsilon: float, rng) -> np.ndarray:
    """Uniform noise in ``[-epsilon, epsilon]`` per feature, clipped to [0, 1]."""
    x = np.asarray(x, dtype=np.float64)
    if epsilon == 0:
        return x.copy()
    return np.clip(x + rng.uniform(-epsilon, epsilon, x.shape), 0.0, 1.0)


def cov_to_w(x) -> np.ndarray:
    x = np.clip(np.asarray(x, dtype=np.float64), COV_KAPPA, 1.0 - COV_KAPPA)
    return np.arctanh(2.0 * x - 1.0)


def cov_from_w(w) -> np.ndarray:
    return 0.5 * (np.tanh(np.asarray(w, dtype=np.float64)) + 1.0)


def cov_chain(w) -> np.ndarray:
    """Elementwise derivative of :func:`cov_from_w`."""
    t = np.tanh(np.asarray(w, dtype=np.float64))
    return 0.5 * (1.0 - t * t)


def _finish(z, clamp: bool):
    return np.clip(z, 0.0, 1.0) if clamp else z


def sgd_step(x, direction, alpha, clamp: bool = True) -> np.ndarray:
    return _finish(x + alpha * direction, clamp)


def adam_step(state: OptimizerState, x, direction, alpha, beta1=0.9, beta2=0.999, eps=1e-8, clamp=True):
    """Bias-corrected adaptive-moment ascent step; updates ``state`` in place."""
    if state.m is None:
        state.m = np.zeros_like(x)
        state.v = np.zeros_like(x)
    state.t += 1
    state.m = beta1 * state.m + (1.0 - beta1) * direction
    state.v = beta2 * state.v + (1.0 - beta2) * direction * direction
    m_hat = state.m / (1.0 - beta1**state.t)
    v_hat = state.v / (1.0 - beta2**state.t)
    return _finish(x + alpha * m_hat / (np.sqrt(v_hat) + eps), clamp)


def mbs_step(x, x_prev, direction, alpha, eta=0.75, clamp=True) -> np.ndarray:
    return _finish(x + eta * alpha * direction + (1.0 - eta) * (x - x_prev), clamp)


def bwsgd_step(x, x_org, direction, alpha, beta=0.9, misclassified=False, clamp=True) -> np.ndarray:
    """Forward step, then a retreat toward ``x_org`` for samples already misclassified."""
    z = x + alpha * direction
    back = np.asarray(misclassified, dtype=bool)
    if back.ndim == 1 and z.ndim == 2:
        back = back[:, None]
    # written as x_org + beta * (z - x_org) so features still at x_org stay there exactly
    z = np.where(back, x_org + beta * (z - x_org), z)
    return _finish(z, clamp)


def traveler_init(x, cfg: TravelerConfig, rng) -> tuple[np.ndarray, OptimizerState]:
    """Apply random restart, then map into w-space when the change of variables is on.

    Returns the first iterate in input space and the per-sample optimizer state.
    ``x_org`` is always the clean input.
    """
    x = np.asarray(x, dtype=np.float64)
    start = random_restart(x, cfg.rr_epsilon, rng) if cfg.rr_enabled else x.copy()
    z_org = cov_to_w(x) if cfg.cov_enabled else x.copy()
    z = cov_to_w(start) if cfg.cov_enabled else start.copy()
    n = x.shape[0] if x.ndim == 2 else 1
    alpha = np.full((n, 1) if x.ndim == 2 else 1, cfg.step_size)
    checkpoints = frozenset(max(1, int(round(f * cfg.max_iters))) for f in MBS_CHECKPOINTS)
    state = OptimizerState(x_org=x.copy(), z_org=z_org, prev=z, alpha=alpha, checkpoints=checkpoints)
    return start, state


class Traveler:
    """Stateful stepping over a batch of iterates."""

    def __init__(self, cfg: TravelerConfig):
        self.cfg = cfg
        self.state: OptimizerState | None = None
        self.x: np.ndarray | None = None
        self.z: np.ndarray | None = None
        self.steps = 0

    def start(self, x, rng) -> np.ndarray:
        self.x, self.state = traveler_init(x, self.cfg, rng)
        self.z = self.state.prev.copy()
        self.steps = 0
        return self.x

    def chain(self) -> np.ndarray | None:
        """Derivative of input space w.r.t. the optimised variable (``None`` without CoV)."""
        return cov_chain(self.z) if self.cfg.cov_enabled else None

    def _schedule(self, objective):
        st = self.state
        obj = np.asarray(objective, dtype=np.float64).reshape(st.alpha.shape[0], -1)[:, :1]
        if st.best is None:
            st.best = obj.copy()
            st.best_at_checkpoint = obj.copy()
        st.best = np.maximum(st.best, obj)
        if self.steps in st.checkpoints:
            stalled = ~(st.best > st.best_at_checkpoint)
            st.alpha = np.where(stalled, st.alpha * 0.5, st.alpha)
            st.best_at_checkpoint = st.best.copy()

    def step(self, direction, misclassified=None, objective=None) -> np.ndarray:
        cfg, st = self.cfg, self.state
        clamp = not cfg.cov_enabled
        z = self.z
        alpha = st.alpha if z.ndim == 2 else st.alpha[0]
        if cfg.optimizer is Optimizer.SGD:
            new = sgd_step(z, direction, alpha, clamp)
        elif cfg.optimizer is Optimizer.ADAM:
            new = adam_step(st, z, direction, alpha, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps, clamp)
        elif cfg.optimizer is Optimizer.MBS:
            if objective is not None:
                self._schedule(objective)
                alpha = st.alpha if z.ndim == 2 else st.alpha[0]
            new = mbs_step(z, st.prev, direction, alpha, cfg.mbs_momentum, clamp)
        else:
            flags = np.zeros(z.shape[:1], bool) if misclassified is None else misclassified
            new = bwsgd_step(z, st.z_org, direction, alpha, cfg.bwsgd_backward, flags, clamp)
        st.prev = z
        self.z = new
        self.steps += 1
        if cfg.cov_enabled:
            # only features whose w moved are re-mapped, so untouched ones stay bit-identical
            self.x = np.where(new != z, cov_from_w(new), self.x)
        else:
            self.x = new
        return self.x
