import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from advspace.attacks import SLOT_VALUES, SLOTS, decode
from advspace.stats import (AreaTable, Condition, Hypothesis, HypothesisResult, build_hypothesis_space,
                            matched_pairs, robust_delta, run_hypotheses, significance_filter, sort_results, spearman,
                            test_hypothesis, wilcoxon_signed_rank)
from advspace.surface import Loss
from advspace.traveler import Optimizer

from oracles import hypothesis_count, spearman_oracle, wilcoxon_enumerate

tie_free = arrays(np.float64, st.integers(2, 30), elements=st.floats(-1e3, 1e3), unique=True)


class TestSpearman:
    def test_identical_and_reversed(self):
        x = np.array([0.3, 0.1, 0.9, 0.5])
        assert spearman(x, x) == 1.0
        assert spearman(x, -x) == -1.0

    def test_oracle_on_random_vectors(self, rng):
        worst = 0.0
        for k in range(1000):
            n = int(rng.integers(2, 40))
            if k % 2:
                x, y = rng.normal(size=n), rng.normal(size=n)
            else:
                x, y = rng.integers(0, 5, size=n).astype(float), rng.integers(0, 5, size=n).astype(float)
            ours = spearman(x, y)
            try:
                ref = spearman_oracle(x, y)
            except ZeroDivisionError:
                assert math.isnan(ours)
                continue
            worst = max(worst, abs(ours - ref))
        assert worst < 1e-12

    def test_constant_is_nan(self):
        assert math.isnan(spearman([1, 1, 1], [1, 2, 3]))

    def test_length_checks(self):
        with pytest.raises(ValueError):
            spearman([1], [1])
        with pytest.raises(ValueError):
            spearman([1, 2], [1, 2, 3])

    @given(tie_free)
    def test_extremes_exact(self, x):
        assert spearman(x, x) == 1.0 and spearman(x, -x) == -1.0

    @given(tie_free, st.data())
    def test_symmetric(self, x, data):
        y = data.draw(arrays(np.float64, x.size, elements=st.floats(-10, 10)))
        a, b = spearman(x, y), spearman(y, x)
        assert (math.isnan(a) and math.isnan(b)) or a == b

    @given(arrays(np.int64, st.integers(2, 30), elements=st.integers(-300, 300), unique=True), st.data())
    def test_rank_invariance(self, x, data):
        y = data.draw(arrays(np.float64, x.size, elements=st.floats(0, 1)))
        rho = spearman(x, y)
        assert spearman(np.exp(x / 10.0), y) == rho or math.isnan(rho)


class TestWilcoxon:
    def test_all_positive_five(self):
        assert wilcoxon_signed_rank([1, 2, 3, 4, 5]).p_value == 0.03125

    def test_single(self):
        assert wilcoxon_signed_rank([0.4]).p_value == 0.5

    def test_all_zero_flagged(self):
        r = wilcoxon_signed_rank([0, 0, 0])
        assert r.p_value == 1.0 and r.flag == "all-zero"

    def test_matches_enumeration(self, rng):
        for n in range(1, 13):
            for k in range(4):
                d = rng.normal(size=n)
                if k == 1:
                    d = np.round(d, 0)  # ties and zeros
                if k == 2:
                    d = np.abs(d)
                if not np.any(d != 0):
                    continue
                assert wilcoxon_signed_rank(d).p_value == pytest.approx(wilcoxon_enumerate(d), abs=1e-12)

    def test_alternatives(self, rng):
        d = rng.normal(size=9)
        g = wilcoxon_signed_rank(d, "greater").p_value
        l_ = wilcoxon_signed_rank(d, "less").p_value
        assert wilcoxon_signed_rank(-d, "greater").p_value == pytest.approx(l_)
        assert wilcoxon_signed_rank(d, "two-sided").p_value == pytest.approx(min(1.0, 2 * min(g, l_)))
        with pytest.raises(ValueError):
            wilcoxon_signed_rank(d, "bigger")

    def test_crossover(self, rng):
        assert wilcoxon_signed_rank(rng.normal(size=20)).exact
        assert not wilcoxon_signed_rank(rng.normal(size=21)).exact

    @pytest.mark.xfail(strict=True, reason="normal approximation at n=20 is only good to a few 1e-3")
    def test_approximation_within_1e3_at_20(self, rng):
        worst = 0.0
        for _ in range(200):
            d = rng.normal(0.3, 1.0, size=20)
            worst = max(worst, abs(wilcoxon_signed_rank(d, exact=True).p_value
                                   - wilcoxon_signed_rank(d, exact=False).p_value))
        assert worst < 1e-3

    def test_approximation_measured_bound_at_20(self, rng):
        worst = 0.0
        for _ in range(200):
            d = rng.normal(0.3, 1.0, size=20)
            worst = max(worst, abs(wilcoxon_signed_rank(d, exact=True).p_value
                                   - wilcoxon_signed_rank(d, exact=False).p_value))
        assert worst < 5e-3

    def test_agrees_with_scipy(self, rng):
        from scipy.stats import wilcoxon
        for n in (25, 60):
            d = rng.normal(0.2, 1.0, size=n)
            ref = wilcoxon(d, alternative="greater", method="approx", correction=True).pvalue
            assert wilcoxon_signed_rank(d).p_value == pytest.approx(ref, rel=1e-9)


def full_table(values=None, contexts=(("ds", "linf+0"),)):
    table = AreaTable()
    for ci, (ds, tm) in enumerate(contexts):
        for a in range(576):
            table.add(ds, tm, a, float(a + 1000 * ci) if values is None else values[ci][a])
    return table


class TestHypothesisSpace:
    def test_two_values_one_condition(self):
        hs = build_hypothesis_space({"rr": (False, True)})
        assert [(h.h1, h.h2) for h in hs] == [(False, True), (True, False)]

    @pytest.mark.parametrize("n_ds,n_tm", [(0, 0), (1, 9), (3, 9), (7, 63)])
    def test_count_closed_form(self, n_ds, n_tm):
        hs = build_hypothesis_space(datasets=[f"d{i}" for i in range(n_ds)],
                                    threat_models=[f"t{i}" for i in range(n_tm)])
        assert len(hs) == hypothesis_count([4, 3, 3, 4, 2, 2], n_ds, n_tm)
        assert len(set(hs)) == len(hs)

    def test_within_slot_only(self):
        for h in build_hypothesis_space(datasets=["a"], threat_models=["t"]):
            assert h.h1 in SLOT_VALUES[h.slot] and h.h2 in SLOT_VALUES[h.slot]
            assert not (h.condition.kind == "slot" and h.condition.key == h.slot)

    def test_deterministic(self):
        assert build_hypothesis_space(datasets=["a"]) == build_hypothesis_space(datasets=["a"])

    def test_invalid(self):
        with pytest.raises(ValueError):
            Hypothesis("loss", Loss.CE, Loss.CE)
        with pytest.raises(ValueError):
            Hypothesis("loss", Loss.CE, Optimizer.SGD)
        with pytest.raises(ValueError):
            Hypothesis("loss", Loss.CE, Loss.CW, Condition("slot", "loss", Loss.DLR))


class TestMatchedPairs:
    def test_unconditioned_size(self):
        a1, a2 = matched_pairs(full_table(), Hypothesis("optimizer", Optimizer.SGD, Optimizer.ADAM))
        assert a1.size == a2.size == 144

    def test_slot_condition_divides_by_four(self):
        h = Hypothesis("loss", Loss.CE, Loss.DLR)
        plain = matched_pairs(full_table(), h)[0].size
        cond = Hypothesis("loss", Loss.CE, Loss.DLR, Condition("slot", "optimizer", Optimizer.BWSGD))
        assert plain == 144 and matched_pairs(full_table(), cond)[0].size == 36

    def test_pairs_differ_only_in_slot(self):
        # areas equal to the id recover which attacks were paired
        for h in build_hypothesis_space()[::37]:
            a1, a2 = matched_pairs(full_table(), h)
            s = SLOTS.index(h.slot)
            for i, j in zip(a1.astype(int), a2.astype(int)):
                c1, c2 = decode(i).components, decode(j).components
                assert c1[s] == h.h1 and c2[s] == h.h2
                assert all(c1[k] == c2[k] for k in range(6) if k != s)
                if h.condition.kind == "slot":
                    assert c1[SLOTS.index(h.condition.key)] == h.condition.value
            assert a1.size == 576 // len(SLOT_VALUES[h.slot]) // (
                len(SLOT_VALUES[h.condition.key]) if h.condition.kind == "slot" else 1)

    def test_context_conditions(self):
        table = full_table(contexts=[("a", "l2+0"), ("b", "l2+0"), ("a", "linf+1")])
        h = Hypothesis("rr", False, True)
        assert matched_pairs(table, h)[0].size == 3 * 288
        assert matched_pairs(table, Hypothesis("rr", False, True, Condition("dataset", "dataset", "a")))[0].size == 576
        assert matched_pairs(table, Hypothesis("rr", False, True, Condition("threat", "threat", "linf+1")))[0].size \
            == 288

    def test_missing_areas_skipped(self):
        values = [np.full(576, np.nan)]
        values[0][:10] = 1.0
        table = full_table(values)
        assert matched_pairs(table, Hypothesis("cov", False, True))[0].size == 5
        assert run_hypotheses(table, [Hypothesis("loss", Loss.CE, Loss.CW)]) == []


class TestHypothesisTest:
    def test_strict_wins(self):
        r = test_hypothesis(np.arange(10.0), np.arange(10.0) + 1)
        assert r.effect_size == 1.0 and r.p_value == 2.0**-10 and r.n_pairs == 10

    def test_identical(self):
        r = test_hypothesis(np.ones(4), np.ones(4))
        assert r.effect_size == 0.5 and r.flag == "all-zero"

    def test_half_and_half(self):
        r = test_hypothesis([1, 2, 3, 4], [2, 1, 4, 3])
        assert r.effect_size == 0.5

    def test_empty(self):
        assert test_hypothesis([], []).flag == "empty"

    @given(arrays(np.float64, st.integers(1, 30), elements=st.integers(0, 5).map(float)), st.data())
    def test_complementarity(self, a1, data):
        a2 = data.draw(arrays(np.float64, a1.size, elements=st.integers(0, 5).map(float)))
        assert test_hypothesis(a1, a2).effect_size + test_hypothesis(a2, a1).effect_size == 1.0


def result(p, e, slot="rr", h1=False, h2=True, cond=Condition()):
    return HypothesisResult(Hypothesis(slot, h1, h2, cond), p, e, 10)


class TestSignificance:
    def test_threshold(self):
        results = [result(1.0, 0.5) for _ in range(1690)]
        kept, threshold = significance_filter(results)
        assert threshold == pytest.approx(5.917e-6, rel=1e-3) and kept == []

    def test_empty(self):
        assert significance_filter([])[0] == []

    def test_cut(self):
        kept, _ = significance_filter([result(1e-4, 1.0), result(0.006, 0.9)], alpha=0.01)
        assert [r.p_value for r in kept] == [1e-4]

    def test_sort(self):
        rs = [result(0.1, 0.2), result(0.01, 0.3), result(0.01, 0.9)]
        assert [(r.p_value, r.effect_size) for r in sort_results(rs)] == [(0.01, 0.9), (0.01, 0.3), (0.1, 0.2)]


class TestRobustDelta:
    def test_identical(self):
        rs = [result(0.1, 0.7)]
        assert [d.delta for d in robust_delta(rs, rs)] == [0.0]

    def test_subtraction(self):
        row = robust_delta([result(0.1, 0.51)], [result(0.2, 0.96)])[0]
        assert row.delta == pytest.approx(0.45) and row.p_robust == 0.2

    def test_sorted_by_magnitude(self, rng):
        conds = [Condition("dataset", "dataset", f"d{i}") for i in range(30)]
        base = [result(0.5, float(rng.uniform()), cond=c) for c in conds]
        rob = [result(0.5, float(rng.uniform()), cond=c) for c in conds]
        rows = robust_delta(base, rob)
        mags = [abs(r.delta) for r in rows]
        # independent check: insertion sort by descending magnitude
        ref = []
        for m in (abs(b.effect_size - r.effect_size) for b, r in zip(base, rob)):
            i = 0
            while i < len(ref) and ref[i] >= m:
                i += 1
            ref.insert(i, m)
        assert mags == ref

    def test_mismatch(self):
        with pytest.raises(ValueError):
            robust_delta([result(0.1, 0.5)], [result(0.1, 0.5, slot="cov")])
