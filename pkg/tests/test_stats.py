import csv
import io
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats as sps

from llga.bitstrings import ContractViolationError
from llga.policies import TheoryPolicy, tuned_policy
from llga.stats import (
    ErtSummary,
    HolmResult,
    PairedComparison,
    TableCell,
    comparison_table,
    evaluate_policy,
    holm_bonferroni,
    render_table_csv,
    render_table_json,
    render_table_text,
    wilcoxon_signed_rank,
)


class TestErtSummary:
    def test_all_successful_runs_mean(self):
        s = ErtSummary.from_runs(100, [100, 200, 300], [True, True, True])
        assert s.ert == pytest.approx(200.0)
        assert s.normalized_ert == pytest.approx(2.0)
        assert s.std == pytest.approx(100.0)  # ddof=1
        assert s.successes == 3 and s.runs == 3

    def test_failures_inflate_ert(self):
        # failed runs still spend evaluations: sum all, divide by successes
        s = ErtSummary.from_runs(10, [100, 200, 300], [True, True, False])
        assert s.ert == pytest.approx(300.0)
        assert s.std == pytest.approx(np.std([100, 200], ddof=1))

    def test_no_successes_gives_infinite_ert(self):
        s = ErtSummary.from_runs(10, [50, 60], [False, False])
        assert math.isinf(s.ert) and math.isinf(s.normalized_ert)
        assert math.isnan(s.std)

    def test_single_success_has_nan_std(self):
        s = ErtSummary.from_runs(10, [50, 60], [True, False])
        assert math.isnan(s.std)
        assert s.ert == pytest.approx(110.0)

    def test_validation(self):
        with pytest.raises(ContractViolationError):
            ErtSummary(10, 2, 3, 1.0, 0.1, 0.0, (1, 2), (True, True))
        with pytest.raises(ContractViolationError):
            ErtSummary(10, 2, 0, 1.0, 0.1, 0.0, (1, 2), (False, False))
        with pytest.raises(ContractViolationError):
            ErtSummary(10, 2, 2, 1.0, 0.1, 0.0, (1,), (True, True))


class TestEvaluatePolicy:
    def test_deterministic(self):
        a = evaluate_policy(TheoryPolicy(), 30, 20, 5)
        b = evaluate_policy(TheoryPolicy(), 30, 20, 5)
        assert a == b

    def test_parallel_degree_invariant(self):
        seq = evaluate_policy(tuned_policy(), 30, 24, 5, parallel=1)
        par = evaluate_policy(tuned_policy(), 30, 24, 5, parallel=3)
        assert seq == par

    def test_results_ordered_by_seed_position(self):
        fwd = evaluate_policy(TheoryPolicy(), 25, [3, 5, 9], 7)
        rev = evaluate_policy(TheoryPolicy(), 25, [9, 5, 3], 7)
        assert fwd.evaluations == rev.evaluations[::-1]

    def test_integer_seeds_mean_range(self):
        a = evaluate_policy(TheoryPolicy(), 25, 4, 7)
        b = evaluate_policy(TheoryPolicy(), 25, [0, 1, 2, 3], 7)
        assert a == b

    def test_master_seed_matters(self):
        a = evaluate_policy(TheoryPolicy(), 25, 10, 1)
        b = evaluate_policy(TheoryPolicy(), 25, 10, 2)
        assert a.evaluations != b.evaluations

    def test_duplicate_seeds_rejected(self):
        with pytest.raises(ContractViolationError):
            evaluate_policy(TheoryPolicy(), 25, [1, 1], 7)

    def test_empty_seeds_rejected(self):
        with pytest.raises(ContractViolationError):
            evaluate_policy(TheoryPolicy(), 25, 0, 7)

    def test_cutoff_counts_failures(self):
        s = evaluate_policy(TheoryPolicy(), 40, 10, 3, cutoff=5)
        assert s.successes == 0
        assert math.isinf(s.ert)


class TestWilcoxon:
    def test_all_positive_hand_case(self):
        res = wilcoxon_signed_rank([1.0, 2.0, 3.0, 4.0, 5.0])
        assert res.statistic == 15.0
        assert res.n_nonzero == 5
        assert res.method == "exact"
        assert res.p_value == pytest.approx(2 / 32)

    def test_paired_form_equals_difference_form(self):
        a = np.array([3.0, 1.0, 4.0, 1.0, 5.0, 9.0])
        b = np.array([2.0, 7.0, 1.0, 8.0, 2.0, 8.0])
        assert wilcoxon_signed_rank(a, b) == wilcoxon_signed_rank(a - b)

    def test_zero_differences_dropped(self):
        res = wilcoxon_signed_rank([0.0, 0.0, 1.0, 2.0, 3.0, 4.0, 5.0])
        assert res.n_nonzero == 5
        assert res.statistic == 15.0

    def test_all_zero_is_degenerate(self):
        res = wilcoxon_signed_rank(np.zeros(8))
        assert res.method == "degenerate"
        assert res.p_value == 1.0

    def test_too_few_nonzero_rejected(self):
        with pytest.raises(ContractViolationError):
            wilcoxon_signed_rank([1.0, 2.0, 3.0, 0.0, 0.0])

    def test_length_mismatch(self):
        with pytest.raises(ContractViolationError):
            wilcoxon_signed_rank([1.0, 2.0], [1.0])

    def test_exact_matches_scipy_on_tie_free_data(self):
        g = np.random.default_rng(42)
        for k in (5, 8, 12, 18, 25):
            for _ in range(6):
                d = g.normal(size=k) + 0.3
                ours = wilcoxon_signed_rank(d)
                ref = sps.wilcoxon(d, method="exact")
                assert ours.method == "exact"
                assert ours.p_value == pytest.approx(ref.pvalue, abs=1e-12)

    def test_approx_matches_scipy(self):
        g = np.random.default_rng(43)
        for k in (26, 40, 80):
            for _ in range(6):
                d = np.round(g.normal(size=k) * 3 + 0.5)  # integer data, ties
                d = np.where(d == 0.0, 1.0, d)
                ours = wilcoxon_signed_rank(d)
                ref = sps.wilcoxon(
                    d, zero_method="wilcox", correction=True, method="approx"
                )
                assert ours.method == "approx"
                assert ours.p_value == pytest.approx(ref.pvalue, abs=1e-9)

    def test_exact_and_approx_agree_at_the_crossover(self):
        # the two code paths validate each other at 25 nonzero pairs
        g = np.random.default_rng(44)
        worst = 0.0
        for _ in range(40):
            d = g.normal(size=25) + g.choice([-0.5, 0.5])
            exact = wilcoxon_signed_rank(d, exact_limit=25)
            approx = wilcoxon_signed_rank(d, exact_limit=5)
            assert exact.method == "exact" and approx.method == "approx"
            worst = max(worst, abs(exact.p_value - approx.p_value))
        assert worst <= 0.01, f"exact vs approx drift {worst:.4f}"

    def test_null_calibration(self):
        # under the null, two-sided rejection at 0.01 should happen at close
        # to the nominal rate (continuity correction makes it conservative)
        g = np.random.default_rng(45)
        diffs = g.normal(size=(10_000, 30))
        rejections = sum(
            wilcoxon_signed_rank(row).p_value <= 0.01 for row in diffs
        )
        rate = rejections / 10_000
        assert 0.005 <= rate <= 0.02, f"null rejection rate {rate}"

    def test_ties_use_midranks(self):
        # |d| = (1, 1): midranks 1.5 each; W+ = 1.5 with exactly one positive
        res = wilcoxon_signed_rank([1.0, -1.0, 2.0, 3.0, -4.0, 5.0])
        assert res.statistic == 1.5 + 3.0 + 4.0 + 6.0


class TestHolm:
    def test_hand_worked_case(self):
        res = holm_bonferroni([0.001, 0.02, 0.04], level=0.01)
        assert res.adjusted == pytest.approx((0.003, 0.04, 0.04))
        assert res.reject == (True, False, False)

    def test_cascade_rejection(self):
        res = holm_bonferroni([0.001, 0.002, 0.009], level=0.05)
        assert res.adjusted == pytest.approx((0.003, 0.004, 0.009))
        assert res.reject == (True, True, True)

    def test_empty(self):
        res = holm_bonferroni([], level=0.05)
        assert res == HolmResult((), (), 0.05)

    def test_invalid_inputs(self):
        with pytest.raises(ContractViolationError):
            holm_bonferroni([0.5], level=0.0)
        with pytest.raises(ContractViolationError):
            holm_bonferroni([1.5])
        with pytest.raises(ContractViolationError):
            holm_bonferroni([math.nan])

    @given(st.lists(st.floats(0.0, 1.0), min_size=1, max_size=12))
    @settings(max_examples=100, deadline=None)
    def test_adjusted_never_below_raw_and_monotone(self, ps):
        res = holm_bonferroni(ps, level=0.01)
        adjusted = np.asarray(res.adjusted)
        raw = np.asarray(ps)
        assert np.all(adjusted >= raw - 1e-15)
        assert np.all(adjusted <= 1.0)
        order = np.argsort(raw, kind="stable")
        assert np.all(np.diff(adjusted[order]) >= -1e-15)
        assert res.reject == tuple(a <= 0.01 for a in res.adjusted)


class TestPairedComparison:
    def test_from_runtimes(self):
        a = [120, 90, 200, 150, 170, 110]
        b = [100, 80, 150, 140, 160, 100]
        cmp = PairedComparison.from_runtimes(a, b, level=0.05)
        assert cmp.statistic == 21.0  # every difference positive
        assert cmp.significant == (cmp.p_value <= 0.05)

    def test_identical_runs_not_significant(self):
        a = [5, 6, 7, 8, 9]
        cmp = PairedComparison.from_runtimes(a, a)
        assert cmp.p_value == 1.0 and not cmp.significant

    def test_length_mismatch(self):
        with pytest.raises(ContractViolationError):
            PairedComparison.from_runtimes([1, 2], [1, 2, 3])


class TestComparisonTable:
    def test_identical_policies_indistinguishable(self):
        cells = comparison_table(
            [("a", TheoryPolicy()), ("b", TheoryPolicy())], [20], 10, 3
        )
        best = [c for c in cells if c.best]
        other = [c for c in cells if not c.best]
        assert len(best) == 1 and len(other) == 1
        assert best[0].policy_id == "a"  # tie goes to input order
        assert other[0].indistinguishable
        assert other[0].p_value == 1.0

    def test_single_policy_degenerate(self):
        cells = comparison_table([("only", TheoryPolicy())], [20, 25], 8, 3)
        assert len(cells) == 2
        assert all(c.best and c.p_value is None for c in cells)

    def test_deterministic_and_parallel_invariant(self):
        args = ([("t", TheoryPolicy()), ("s", tuned_policy())], [24, 32], 12, 9)
        a = comparison_table(*args, parallel=1)
        b = comparison_table(*args, parallel=2)
        assert a == b

    def test_duplicate_ids_rejected(self):
        with pytest.raises(ContractViolationError):
            comparison_table([("x", TheoryPolicy()), ("x", tuned_policy())], [20], 8, 1)

    def test_no_policies_rejected(self):
        with pytest.raises(ContractViolationError):
            comparison_table([], [20], 8, 1)

    def test_holm_is_per_problem_size(self):
        cells = comparison_table(
            [("t", TheoryPolicy()), ("s", tuned_policy()), ("u", TheoryPolicy())],
            [20, 26], 16, 5,
        )
        for n in (20, 26):
            column = [c for c in cells if c.n == n]
            assert sum(c.best for c in column) == 1
            tested = [c for c in column if c.p_adjusted is not None]
            assert len(tested) == 2


class TestRenderers:
    def _cells(self):
        return comparison_table(
            [("theory", TheoryPolicy()), ("tuned", tuned_policy())], [20], 10, 3
        )

    def test_csv_parses(self):
        text = render_table_csv(self._cells())
        rows = list(csv.reader(io.StringIO(text)))
        assert rows[0][:4] == ["policy", "n", "runs", "successes"]
        assert len(rows) == 3
        assert {r[0] for r in rows[1:]} == {"theory", "tuned"}

    def test_text_marks_best(self):
        text = render_table_text(self._cells())
        assert text.count("*") == 2
        assert "policy" in text and "n=20" in text

    def test_json_round_trips_and_nulls_infinities(self):
        payload = json.loads(render_table_json(self._cells(), level=0.01))
        assert payload["level"] == 0.01
        assert len(payload["cells"]) == 2
        assert all(len(c["per_seed_evaluations"]) == 10 for c in payload["cells"])

        failed = ErtSummary.from_runs(10, [50], [False])
        cell = TableCell("dead", 10, failed, True, False, None, None)
        out = json.loads(render_table_json([cell]))
        assert out["cells"][0]["ert"] is None
        assert out["cells"][0]["std"] is None
