"""The attack space: enumeration, stable ids, known-attack aliases, and crafting."""
from __future__ import annotations

import csv
import itertools
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .model import DenseNet, forward_logits
from .surface import Loss, SaliencyMap, SurfaceConfig, norm_name, parse_norm, surface_gradient
from .traveler import Optimizer, Traveler, TravelerConfig

# slot order doubles as the mixed-radix digit order, most significant first
SLOTS = ("loss", "saliency", "norm", "optimizer", "rr", "cov")
SLOT_VALUES = {
    "loss": (Loss.CE, Loss.CW, Loss.IDENTITY, Loss.DLR),
    "saliency": (SaliencyMap.JSMA, SaliencyMap.DEEPFOOL, SaliencyMap.IDENTITY),
    "norm": (0.0, 2.0, np.inf),
    "optimizer": (Optimizer.SGD, Optimizer.ADAM, Optimizer.MBS, Optimizer.BWSGD),
    "rr": (False, True),
    "cov": (False, True),
}
RADICES = tuple(len(SLOT_VALUES[s]) for s in SLOTS)
ATTACK_COUNT = int(np.prod(RADICES))

DEFAULT_STEP_SIZE = {0.0: 1.0, 2.0: 0.05, np.inf: 0.01}
DEFAULT_RR_EPSILON = 0.05

KNOWN_ATTACKS = {
    "BIM": (Loss.CE, SaliencyMap.IDENTITY, np.inf, Optimizer.SGD, False, False),
    "PGD": (Loss.CE, SaliencyMap.IDENTITY, np.inf, Optimizer.SGD, True, False),
    "JSMA": (Loss.IDENTITY, SaliencyMap.JSMA, 0.0, Optimizer.SGD, False, False),
    "DF": (Loss.IDENTITY, SaliencyMap.DEEPFOOL, 2.0, Optimizer.SGD, False, False),
    "CW": (Loss.CW, SaliencyMap.IDENTITY, 2.0, Optimizer.ADAM, False, True),
    "APGD-CE": (Loss.CE, SaliencyMap.IDENTITY, np.inf, Optimizer.MBS, True, False),
    "APGD-DLR": (Loss.DLR, SaliencyMap.IDENTITY, np.inf, Optimizer.MBS, True, False),
    "FAB": (Loss.IDENTITY, SaliencyMap.DEEPFOOL, 2.0, Optimizer.BWSGD, False, False),
}


class UnknownAttackError(ValueError):
    pass


@dataclass(frozen=True)
class AttackConfig:
    loss: Loss
    saliency: SaliencyMap
    norm: float
    optimizer: Optimizer
    rr: bool
    cov: bool
    step_size: float | None = field(default=None, compare=False)
    rr_epsilon: float = field(default=DEFAULT_RR_EPSILON, compare=False)
    cw_tradeoff: float = field(default=1.0, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "loss", Loss(self.loss))
        object.__setattr__(self, "saliency", SaliencyMap(self.saliency))
        object.__setattr__(self, "norm", parse_norm(self.norm))
        object.__setattr__(self, "optimizer", Optimizer(self.optimizer))
        object.__setattr__(self, "rr", bool(self.rr))
        object.__setattr__(self, "cov", bool(self.cov))
        if self.step_size is None:
            object.__setattr__(self, "step_size", DEFAULT_STEP_SIZE[self.norm])

    @property
    def components(self) -> tuple:
        return (self.loss, self.saliency, self.norm, self.optimizer, self.rr, self.cov)

    @property
    def attack_id(self) -> int:
        return encode(self)

    @property
    def alias(self) -> str | None:
        for name, comps in KNOWN_ATTACKS.items():
            if comps == self.components:
                return name
        return None

    @property
    def label(self) -> str:
        return self.alias or f"A{self.attack_id}"

    def describe(self) -> dict:
        return {
            "loss": self.loss.value,
            "saliency": self.saliency.value,
            "norm": norm_name(self.norm),
            "optimizer": self.optimizer.value,
            "rr": int(self.rr),
            "cov": int(self.cov),
        }

    def surface(self) -> SurfaceConfig:
        return SurfaceConfig(self.loss, self.saliency, self.norm, self.cw_tradeoff)

    def traveler(self, max_iters: int) -> TravelerConfig:
        return TravelerConfig(
            optimizer=self.optimizer,
            step_size=self.step_size,
            rr_enabled=self.rr,
            rr_epsilon=self.rr_epsilon,
            cov_enabled=self.cov,
            max_iters=max_iters,
        )


def slot_value(config: AttackConfig, slot: str):
    return config.components[SLOTS.index(slot)]


def value_name(slot: str, value) -> str:
    if slot == "norm":
        return norm_name(value)
    if slot in ("rr", "cov"):
        return "enabled" if value else "disabled"
    return value.value


def encode(config: AttackConfig) -> int:
    idx = 0
    for slot, radix, value in zip(SLOTS, RADICES, config.components):
        idx = idx * radix + SLOT_VALUES[slot].index(value)
    return idx


def decode(attack_id: int, **hyper) -> AttackConfig:
    if isinstance(attack_id, bool) or not isinstance(attack_id, (int, np.integer)):
        raise UnknownAttackError(f"attack id must be an integer, got {attack_id!r}")
    if not 0 <= attack_id < ATTACK_COUNT:
        raise UnknownAttackError(f"attack id {attack_id} outside [0, {ATTACK_COUNT})")
    digits = []
    rest = int(attack_id)
    for radix in reversed(RADICES):
        rest, digit = divmod(rest, radix)
        digits.append(digit)
    values = [SLOT_VALUES[s][d] for s, d in zip(SLOTS, reversed(digits))]
    return AttackConfig(*values, **hyper)


def enumerate_attacks(**hyper) -> list[AttackConfig]:
    """All 576 component combinations in id order."""
    return [AttackConfig(*combo, **hyper) for combo in itertools.product(*(SLOT_VALUES[s] for s in SLOTS))]


def known_alias(name: str, **hyper) -> AttackConfig:
    key = name.strip().upper()
    if key not in KNOWN_ATTACKS:
        raise UnknownAttackError(f"unknown attack {name!r}; known: {', '.join(KNOWN_ATTACKS)}")
    return AttackConfig(*KNOWN_ATTACKS[key], **hyper)


def resolve_attacks(selection, **hyper) -> list[AttackConfig]:
    """Turn ``'all'``, ids, or alias names into configs (id order, de-duplicated)."""
    if selection in (None, "all") or selection == ["all"]:
        return enumerate_attacks(**hyper)
    items = selection.split(",") if isinstance(selection, str) else selection
    chosen = {}
    for item in items:
        item = str(item).strip()
        if not item:
            continue
        cfg = decode(int(item), **hyper) if item.isdigit() else known_alias(item, **hyper)
        chosen[cfg.attack_id] = cfg
    return [chosen[k] for k in sorted(chosen)]


class IterationClock:
    """Per-sample crafting time.

    ``wall`` mode divides each batch-iteration's wall time evenly across the
    batch. ``deterministic`` mode charges ``unit_cost`` per iteration instead.
    """

    def __init__(self, mode: str = "deterministic", unit_cost: float = 1.0, batch_size: int = 1):
        if mode not in ("wall", "deterministic"):
            raise ValueError(f"unknown time mode {mode!r}")
        self.mode = mode
        self.unit_cost = float(unit_cost)
        self.batch_size = max(int(batch_size), 1)
        self.elapsed = 0.0
        self._t0 = None

    def __enter__(self):
        self._t0 = time.perf_counter()
        return self

    def __exit__(self, *exc):
        if self.mode == "wall":
            self.elapsed += (time.perf_counter() - self._t0) / self.batch_size
        else:
            self.elapsed += self.unit_cost
        return False


def measure_time(iterations: int, unit_cost: float = 1.0, mode: str = "deterministic", hook=None) -> np.ndarray:
    """Cumulative per-iteration times for ``iterations`` calls of ``hook``."""
    clock = IterationClock(mode, unit_cost)
    out = np.zeros(iterations)
    for i in range(iterations):
        with clock:
            if hook is not None:
                hook(i)
        out[i] = clock.elapsed
    return out


def unit_cost(config: AttackConfig, class_count: int) -> float:
    return float(class_count) if config.surface().requires_full_jacobian else 1.0


@dataclass
class CraftRecord:
    """Per-sample, per-iteration crafting trajectory (iteration 0 is the initial iterate)."""

    attack_id: int
    trial: int
    l0_frac: np.ndarray
    l2_frac: np.ndarray
    linf: np.ndarray
    elapsed: np.ndarray
    misclassified: np.ndarray
    aborted: np.ndarray
    final: np.ndarray

    @property
    def samples(self) -> int:
        return self.l0_frac.shape[0]

    @property
    def iterations(self) -> int:
        return self.l0_frac.shape[1] - 1

    def norm_fraction(self, p) -> np.ndarray:
        p = parse_norm(p)
        return {0.0: self.l0_frac, 2.0: self.l2_frac, np.inf: self.linf}[p]


def _norms(delta: np.ndarray):
    d = delta.shape[1]
    return (
        np.count_nonzero(delta, axis=1) / d,
        np.linalg.norm(delta, axis=1) / np.sqrt(d),
        np.abs(delta).max(axis=1),
    )


def craft(net: DenseNet, x, y, config: AttackConfig, max_iters: int, rng, time_mode="deterministic",
          trial: int = 0) -> CraftRecord:
    """Run one attack for ``max_iters`` iterations, recording every iterate.

    Crafting does not stop at the first misclassification. A sample whose
    iterate turns non-finite is frozen at its last finite iterate and flagged.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = np.asarray(y, dtype=np.int64)
    n, _ = x.shape
    scfg = config.surface()
    traveler = Traveler(config.traveler(max_iters))
    clock = IterationClock(time_mode, unit_cost(config, net.class_count), n)

    shape = (n, max_iters + 1)
    l0, l2, linf = np.zeros(shape), np.zeros(shape), np.zeros(shape)
    miscls = np.zeros(shape, dtype=bool)
    elapsed = np.zeros(max_iters + 1)
    aborted = np.zeros(n, dtype=bool)

    xi = traveler.start(x, rng)
    for i in range(max_iters + 1):
        elapsed[i] = clock.elapsed
        l0[:, i], l2[:, i], linf[:, i] = _norms(xi - x)
        if i == max_iters:
            miscls[:, i] = np.argmax(forward_logits(net, xi), axis=1) != y
            break
        with clock:
            out = surface_gradient(net, scfg, x, xi - x, y, chain=traveler.chain())
            flags = np.argmax(out.logits, axis=1) != y
            prev_x, prev_z = traveler.x.copy(), traveler.z.copy()
            new = traveler.step(out.direction, flags, out.objective)
            bad = ~np.all(np.isfinite(new), axis=1) | aborted
            if np.any(bad):
                traveler.x[bad], traveler.z[bad] = prev_x[bad], prev_z[bad]
                aborted |= bad
        miscls[:, i] = flags
        xi = traveler.x
    return CraftRecord(encode(config), trial, l0, l2, linf, elapsed, miscls, aborted, xi.copy())


TRAJECTORY_HEADER = ("attack_id", "trial", "sample", "iteration", "l0_frac", "l2_frac", "linf",
                     "elapsed_time", "misclassified", "aborted")


def trajectory_rows(record: CraftRecord, extra: tuple = ()):
    for s in range(record.samples):
        for i in range(record.iterations + 1):
            yield extra + (record.attack_id, record.trial, s, i, repr(float(record.l0_frac[s, i])),
                           repr(float(record.l2_frac[s, i])), repr(float(record.linf[s, i])),
                           repr(float(record.elapsed[i])), int(record.misclassified[s, i]),
                           int(record.aborted[s]))


def write_trajectories(records, path, extra_header=(), extras=None) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(tuple(extra_header) + TRAJECTORY_HEADER)
        for k, rec in enumerate(records):
            w.writerows(trajectory_rows(rec, () if extras is None else tuple(extras[k])))


def with_hyper(config: AttackConfig, **hyper) -> AttackConfig:
    return replace(config, **hyper)
