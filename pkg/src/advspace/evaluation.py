"""Budgets, accuracy-vs-budget curves, the Pareto ensemble envelope and rankings.

A sample counts as defeated at budget ``b`` as soon as *any* recorded iterate
is misclassified and costs at most ``b``. Budgets are
``lp_fraction + theta * time / time_norm`` where lp distances are normalised
by their maximum over the unit box (l0 by d, l2 by sqrt(d), l-inf by 1).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .attacks import CraftRecord
from .surface import norm_name, parse_norm

DEFAULT_GRID = np.linspace(0.0, 1.0, 101)


@dataclass(frozen=True)
class ThreatModel:
    norm: float
    theta: float = 0.0
    grid: np.ndarray = field(default_factory=lambda: DEFAULT_GRID.copy(), compare=False)

    def __post_init__(self):
        object.__setattr__(self, "norm", parse_norm(self.norm))
        grid = np.asarray(self.grid, dtype=np.float64)
        if grid.ndim != 1 or grid.size == 0:
            raise ValueError("budget grid must be a non-empty vector")
        if np.any(np.diff(grid) <= 0):
            raise ValueError("budget grid must be strictly increasing")
        if not self.theta >= 0:
            raise ValueError(f"theta must be non-negative, got {self.theta}")
        object.__setattr__(self, "grid", grid)

    @property
    def name(self) -> str:
        return f"{norm_name(self.norm)}+{self.theta:g}"


@dataclass(frozen=True)
class PerfCurve:
    grid: np.ndarray
    accuracy: np.ndarray

    def __post_init__(self):
        grid = np.asarray(self.grid, dtype=np.float64)
        acc = np.asarray(self.accuracy, dtype=np.float64)
        if grid.shape != acc.shape:
            raise ValueError("grid and accuracy lengths differ")
        if np.any(acc < 0) or np.any(acc > 1):
            raise ValueError("accuracy must lie in [0, 1]")
        if np.any(np.diff(acc) > 0):
            raise ValueError("accuracy must be non-increasing in budget")
        object.__setattr__(self, "grid", grid)
        object.__setattr__(self, "accuracy", acc)


def sample_budget(lp_fraction, elapsed, theta: float, time_norm: float):
    if not time_norm > 0:
        raise ValueError("time_norm must be positive")
    return np.asarray(lp_fraction) + theta * (np.asarray(elapsed) / time_norm)


@dataclass(frozen=True)
class SuccessFrontier:
    """Non-dominated (distance, time) points among each sample's misclassified iterates.

    For any theta the cheapest successful iterate of a sample lies on its
    frontier, so this is a lossless summary of a trajectory for curve building.
    """

    samples: int
    sample: np.ndarray
    distance: np.ndarray
    time: np.ndarray


def success_frontier(record: CraftRecord, p) -> SuccessFrontier:
    lp = record.norm_fraction(p)
    hits = record.misclassified
    masked = np.where(hits, lp, np.inf)
    running = np.minimum.accumulate(masked, axis=1)
    previous = np.concatenate([np.full((lp.shape[0], 1), np.inf), running[:, :-1]], axis=1)
    keep = hits & (lp < previous)
    s, i = np.nonzero(keep)
    return SuccessFrontier(record.samples, s, lp[s, i], record.elapsed[i])


def defeat_budgets(source, tm: ThreatModel, time_norm: float) -> np.ndarray:
    """Cheapest budget at which each sample is defeated (``inf`` if never)."""
    front = source if isinstance(source, SuccessFrontier) else success_frontier(source, tm.norm)
    out = np.full(front.samples, np.inf)
    if front.sample.size:
        np.minimum.at(out, front.sample, sample_budget(front.distance, front.time, tm.theta, time_norm))
    return out


def curve_from_budgets(budgets, grid) -> PerfCurve:
    budgets = np.asarray(budgets, dtype=np.float64)
    grid = np.asarray(grid, dtype=np.float64)
    acc = (budgets[None, :] > grid[:, None]).mean(axis=1)
    return PerfCurve(grid, acc)


def perf_curve(trajectory, tm: ThreatModel, time_norm: float = 1.0) -> PerfCurve:
    if len(tm.grid) == 0:
        raise ValueError("empty budget grid")
    return curve_from_budgets(defeat_budgets(trajectory, tm, time_norm), tm.grid)


def oea(curves) -> PerfCurve:
    """Pointwise lower envelope of accuracy across attacks."""
    curves = list(curves)
    if not curves:
        raise ValueError("need at least one curve")
    grid = curves[0].grid
    for c in curves[1:]:
        if c.grid.shape != grid.shape or np.any(c.grid != grid):
            raise ValueError("curves must share a budget grid")
    return PerfCurve(grid, np.min([c.accuracy for c in curves], axis=0))


def area_to_oea(curve: PerfCurve, envelope: PerfCurve) -> float:
    """Area of the accuracy gap above the envelope (trapezoid rule over the grid)."""
    if curve.grid.shape != envelope.grid.shape or np.any(curve.grid != envelope.grid):
        raise ValueError("curve and envelope must share a budget grid")
    gap = curve.accuracy - envelope.accuracy
    if gap.size == 1:
        return 0.0
    widths = np.diff(curve.grid)
    return float(np.sum(0.5 * (gap[:-1] + gap[1:]) * widths))


def min_budget_to_threshold(curve: PerfCurve, threshold: float = 0.01) -> float:
    below = np.nonzero(curve.accuracy < threshold)[0]
    return float(curve.grid[below[0]]) if below.size else math.inf


@dataclass(frozen=True)
class RankedAttack:
    rank: int
    attack_id: int
    value: float
    percent: float


def percent_change(value: float, reference: float) -> float:
    if math.isinf(reference):
        return math.nan
    if math.isinf(value):
        return math.inf
    if reference == 0:
        return 0.0 if value == 0 else math.inf
    return 100.0 * (value - reference) / reference


def format_percent(pct: float) -> str:
    if math.isnan(pct):
        return "n/a"
    if math.isinf(pct):
        return "+inf%" if pct > 0 else "-inf%"
    r = round(pct)
    return "0%" if r == 0 else f"{r:+d}%"


def rank_attacks(values: dict, reference: float | None = None) -> list[RankedAttack]:
    """Ascending ranking (ties by lower id), annotated relative to ``reference``.

    Without an explicit reference the best value is used.
    """
    order = sorted(values, key=lambda a: (values[a], a))
    if reference is None:
        reference = values[order[0]] if order else math.nan
    return [RankedAttack(i + 1, a, float(values[a]), percent_change(values[a], reference))
            for i, a in enumerate(order)]


def table_rows(ranked: list[RankedAttack], known: dict) -> list[RankedAttack]:
    """Condensed layout: the top attack, every known attack, the lowest-ranked success
    and the first attack that never succeeds."""
    keep = {ranked[0].attack_id} if ranked else set()
    keep |= {r.attack_id for r in ranked if r.attack_id in known}
    finite = [r for r in ranked if math.isfinite(r.value)]
    if finite:
        keep.add(finite[-1].attack_id)
    failed = [r for r in ranked if not math.isfinite(r.value)]
    if failed:
        keep.add(failed[0].attack_id)
    return [r for r in ranked if r.attack_id in keep]
