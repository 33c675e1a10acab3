"""Rank correlation and component-hypothesis testing over attack areas."""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from .attacks import ATTACK_COUNT, RADICES, SLOT_VALUES, SLOTS, decode, value_name

EXACT_WILCOXON_MAX_N = 20


def spearman(x, y) -> float:
    """Pearson correlation of average ranks; ``nan`` when either ranking is constant."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1 or x.size < 2:
        raise ValueError("spearman needs two equal-length vectors of length >= 2")
    rx = rankdata(x) - (x.size + 1) / 2.0
    ry = rankdata(y) - (y.size + 1) / 2.0
    denom = math.sqrt(float(rx @ rx) * float(ry @ ry))
    if denom == 0:
        return math.nan
    return float(np.clip((rx @ ry) / denom, -1.0, 1.0))


@dataclass(frozen=True)
class WilcoxonResult:
    p_value: float
    statistic: float
    n: int
    exact: bool
    flag: str = ""


def _signed_rank_distribution(doubled_ranks: np.ndarray) -> np.ndarray:
    # counts[s] = number of sign patterns whose positive doubled-rank sum is s
    counts = np.zeros(int(doubled_ranks.sum()) + 1, dtype=np.int64)
    counts[0] = 1
    for r in doubled_ranks:
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[: counts.size - r]
        counts = counts + shifted
    return counts


def wilcoxon_signed_rank(differences, alternative: str = "greater", exact: bool | None = None) -> WilcoxonResult:
    """Signed-rank test of paired differences.

    Zero differences are dropped and tied magnitudes share their average rank.
    Up to 20 non-zero pairs the null distribution is counted exactly over all
    sign patterns; beyond that a tie-corrected normal approximation with
    continuity correction is used; ``exact`` forces either path. ``alternative='greater'``
    tests whether the differences tend to be positive.
    """
    if alternative not in ("greater", "less", "two-sided"):
        raise ValueError(f"unknown alternative {alternative!r}")
    d = np.asarray(differences, dtype=np.float64).ravel()
    d = d[d != 0]
    n = d.size
    if n == 0:
        return WilcoxonResult(1.0, 0.0, 0, True, "all-zero")
    ranks = rankdata(np.abs(d))
    w_plus = float(ranks[d > 0].sum())
    if exact is None:
        exact = n <= EXACT_WILCOXON_MAX_N
    if exact:
        doubled = np.rint(2 * ranks).astype(np.int64)
        counts = _signed_rank_distribution(doubled)
        total = float(2**n)
        observed = int(round(2 * w_plus))
        upper = counts[observed:].sum() / total
        lower = counts[: observed + 1].sum() / total
    else:
        _, tie_counts = np.unique(ranks, return_counts=True)
        mean = n * (n + 1) / 4.0
        var = n * (n + 1) * (2 * n + 1) / 24.0 - np.sum(tie_counts**3 - tie_counts) / 48.0
        sd = math.sqrt(var)
        upper = 0.5 * math.erfc(((w_plus - mean - 0.5) / sd) / math.sqrt(2))
        lower = 0.5 * math.erfc(-((w_plus - mean + 0.5) / sd) / math.sqrt(2))
    if alternative == "greater":
        p = upper
    elif alternative == "less":
        p = lower
    else:
        p = min(1.0, 2.0 * min(upper, lower))
    return WilcoxonResult(float(min(p, 1.0)), w_plus, n, exact)


@dataclass(frozen=True)
class Condition:
    kind: str = "none"  # none | dataset | threat | slot
    key: str = ""
    value: object = None

    def __str__(self) -> str:
        if self.kind == "none":
            return "always"
        if self.kind == "dataset":
            return f"Dataset={self.value}"
        if self.kind == "threat":
            return f"ThreatModel={self.value}"
        return f"{self.key}={value_name(self.key, self.value)}"


@dataclass(frozen=True)
class Hypothesis:
    slot: str
    h1: object
    h2: object
    condition: Condition = Condition()

    def __post_init__(self):
        if self.slot not in SLOTS:
            raise ValueError(f"unknown component slot {self.slot!r}")
        values = SLOT_VALUES[self.slot]
        if self.h1 not in values or self.h2 not in values:
            raise ValueError("hypothesis values must belong to the hypothesis slot")
        if self.h1 == self.h2:
            raise ValueError("H1 and H2 must differ")
        if self.condition.kind == "slot" and self.condition.key == self.slot:
            raise ValueError("a hypothesis cannot be conditioned on its own slot")

    @property
    def key(self) -> tuple:
        return (self.slot, value_name(self.slot, self.h1), value_name(self.slot, self.h2), str(self.condition))


def build_hypothesis_space(slots=None, datasets=(), threat_models=()) -> list[Hypothesis]:
    """Every ordered within-slot pair under every condition, in a fixed order.

    ``slots`` maps slot name to its candidate values (default: the full attack space).
    """
    slots = dict(SLOT_VALUES) if slots is None else dict(slots)
    out = []
    for slot, values in slots.items():
        conditions = [Condition()]
        conditions += [Condition("dataset", "dataset", d) for d in datasets]
        conditions += [Condition("threat", "threat", t) for t in threat_models]
        for other, other_values in slots.items():
            if other != slot:
                conditions += [Condition("slot", other, v) for v in other_values]
        for h1, h2 in itertools.permutations(values, 2):
            out.extend(Hypothesis(slot, h1, h2, cond) for cond in conditions)
    return out


class AreaTable:
    """Median-over-trials areas indexed by context (dataset, threat model) and attack id."""

    def __init__(self):
        self.contexts: list[tuple[str, str]] = []
        self._rows: dict[tuple[str, str], np.ndarray] = {}

    def add(self, dataset: str, threat: str, attack_id: int, area: float):
        ctx = (dataset, threat)
        if ctx not in self._rows:
            self.contexts.append(ctx)
            self._rows[ctx] = np.full(ATTACK_COUNT, np.nan)
        self._rows[ctx][attack_id] = area

    @property
    def matrix(self) -> np.ndarray:
        if not self.contexts:
            return np.empty((0, ATTACK_COUNT))
        return np.vstack([self._rows[c] for c in self.contexts])

    def datasets(self) -> list[str]:
        return list(dict.fromkeys(c[0] for c in self.contexts))

    def threats(self) -> list[str]:
        return list(dict.fromkeys(c[1] for c in self.contexts))


_DIGITS = np.array([[SLOT_VALUES[s].index(v) for s, v in zip(SLOTS, decode(a).components)]
                    for a in range(ATTACK_COUNT)])
_STRIDES = np.array([int(np.prod(RADICES[i + 1:])) for i in range(len(SLOTS))])


def matched_pairs(table: AreaTable, hypothesis: Hypothesis) -> tuple[np.ndarray, np.ndarray]:
    """Areas of attack pairs that differ only in the hypothesis slot (H1 value, H2 value).

    Pairs are formed within each (dataset, threat model) context the condition admits.
    """
    s = SLOTS.index(hypothesis.slot)
    values = SLOT_VALUES[hypothesis.slot]
    i1, i2 = values.index(hypothesis.h1), values.index(hypothesis.h2)
    attacks = _DIGITS[:, s] == i1
    cond = hypothesis.condition
    if cond.kind == "slot":
        attacks &= _DIGITS[:, SLOTS.index(cond.key)] == SLOT_VALUES[cond.key].index(cond.value)
    first = np.nonzero(attacks)[0]
    second = first + (i2 - i1) * _STRIDES[s]
    ctx = np.ones(len(table.contexts), dtype=bool)
    if cond.kind == "dataset":
        ctx = np.array([c[0] == cond.value for c in table.contexts], dtype=bool)
    elif cond.kind == "threat":
        ctx = np.array([c[1] == cond.value for c in table.contexts], dtype=bool)
    m = table.matrix[ctx]
    a1, a2 = m[:, first].ravel(), m[:, second].ravel()
    ok = ~(np.isnan(a1) | np.isnan(a2))
    return a1[ok], a2[ok]


@dataclass(frozen=True)
class HypothesisResult:
    hypothesis: Hypothesis
    p_value: float
    effect_size: float
    n_pairs: int
    flag: str = ""


def test_hypothesis(a1, a2, hypothesis: Hypothesis | None = None) -> HypothesisResult:
    """H1 beats H2 when its areas are smaller; one-sided signed-rank on ``a2 - a1``."""
    a1 = np.asarray(a1, dtype=np.float64)
    a2 = np.asarray(a2, dtype=np.float64)
    if a1.shape != a2.shape:
        raise ValueError("paired area lists differ in length")
    n = a1.size
    if n == 0:
        return HypothesisResult(hypothesis, math.nan, math.nan, 0, "empty")
    wins = np.count_nonzero(a1 < a2) + 0.5 * np.count_nonzero(a1 == a2)
    w = wilcoxon_signed_rank(a2 - a1, "greater")
    return HypothesisResult(hypothesis, w.p_value, float(wins / n), n, w.flag)


test_hypothesis.__test__ = False  # keep pytest from collecting it


def run_hypotheses(table: AreaTable, hypotheses) -> list[HypothesisResult]:
    results = []
    for h in hypotheses:
        a1, a2 = matched_pairs(table, h)
        r = test_hypothesis(a1, a2, h)
        if r.n_pairs:
            results.append(r)
    return results


def significance_filter(results, alpha: float = 0.01) -> tuple[list[HypothesisResult], float]:
    """Keep results with ``p < alpha / N``; returns them with the threshold used."""
    results = list(results)
    if not results:
        return [], alpha
    threshold = alpha / len(results)
    return [r for r in results if r.p_value < threshold], threshold


@dataclass(frozen=True)
class DeltaRow:
    hypothesis: Hypothesis
    effect_nonrobust: float
    effect_robust: float
    delta: float
    p_robust: float


def robust_delta(nonrobust, robust) -> list[DeltaRow]:
    """Effect-size change (robust minus non-robust) per hypothesis, largest change first."""
    base = {r.hypothesis.key: r for r in nonrobust}
    other = {r.hypothesis.key: r for r in robust}
    if set(base) != set(other):
        raise ValueError("robust and non-robust results cover different hypotheses")
    rows = [DeltaRow(r.hypothesis, r.effect_size, other[k].effect_size,
                     other[k].effect_size - r.effect_size, other[k].p_value)
            for k, r in base.items()]
    return sorted(rows, key=lambda r: -abs(r.delta))


def sort_results(results) -> list[HypothesisResult]:
    return sorted(results, key=lambda r: (r.p_value, -r.effect_size))
