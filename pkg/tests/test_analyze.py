import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from mtomnet import analyze as A

labels4 = st.lists(st.integers(0, 3), min_size=1, max_size=80)


class TestMacroF1:
    def test_perfect(self):
        y = np.array([0, 1, 2, 3, 3, 1])
        assert A.macro_f1(y, y, 4)[1] == 1.0

    def test_constant_predictor_counting_oracle(self):
        truths = np.repeat(np.arange(4), 100)
        per, macro = A.macro_f1(np.zeros(400, int), truths, 4)
        # class 0: precision 100/400, recall 1, F1 = 2*0.25/1.25
        np.testing.assert_allclose(per, [0.4, 0, 0, 0])
        assert macro == pytest.approx(0.1)

    def test_absent_class_counts_zero(self):
        per, macro = A.macro_f1([0, 1], [0, 1], 4)
        assert list(per) == [1, 1, 0, 0]
        assert macro == 0.5

    def test_out_of_range(self):
        with pytest.raises(ValueError, match="outside"):
            A.macro_f1([0, 4], [0, 1], 4)

    def test_length_mismatch(self):
        with pytest.raises(ValueError, match="differ in length"):
            A.macro_f1([0, 1], [0], 4)

    @given(data=st.data())
    def test_relabel_invariant(self, data):
        t = np.array(data.draw(labels4))
        p = np.array(data.draw(st.lists(st.integers(0, 3), min_size=len(t), max_size=len(t))))
        perm = np.array(data.draw(st.permutations(range(4))))
        assert A.macro_f1(perm[p], perm[t], 4)[1] == pytest.approx(A.macro_f1(p, t, 4)[1])

    @given(data=st.data())
    def test_bounds_and_total(self, data):
        t = np.array(data.draw(labels4))
        p = np.array(data.draw(st.lists(st.integers(0, 3), min_size=len(t), max_size=len(t))))
        assert A.confusion_matrix(p, t, 4).sum() == len(t)
        assert 0 <= A.macro_f1(p, t, 4)[1] <= 1

    @given(t=st.lists(st.integers(0, 3), min_size=4, max_size=60))
    def test_diagonal_equals_accuracy(self, t):
        # a diagonal confusion matrix with every class present
        t = np.array(t + [0, 1, 2, 3])
        assert A.macro_f1(t, t, 4)[1] == A.accuracy(t, t) == 1.0

    def test_matches_sklearn_style_oracle(self, rng):
        t, p = rng.integers(0, 4, 500), rng.integers(0, 4, 500)
        per = []
        for c in range(4):
            tp = np.sum((p == c) & (t == c))
            prec, rec = tp / max(np.sum(p == c), 1), tp / max(np.sum(t == c), 1)
            per.append(0 if prec + rec == 0 else 2 * prec * rec / (prec + rec))
        np.testing.assert_allclose(A.macro_f1(p, t, 4)[0], per)


class TestFalseBelief:
    def test_all_correct(self, rng):
        t = rng.integers(0, 4, (30, 5))
        f = rng.integers(0, 2, (30, 5))
        f[0] = 1
        rep = A.false_belief_accuracy(t, t, f)
        assert all(v == 1.0 for v in rep.per_order.values())

    def test_flag_all_equals_accuracy(self, rng):
        t, p = rng.integers(0, 4, (40, 5)), rng.integers(0, 4, (40, 5))
        rep = A.false_belief_accuracy(p, t, np.ones_like(t))
        assert sum(rep.per_order[o] * sum(rep.flagged[m] for m in ms)
                   for o, ms in A.ORDERS.items()) / t.size == pytest.approx(A.accuracy(p, t))
        for j, m in enumerate(A.MINDS):
            assert rep.per_mind[m] == A.accuracy(p[:, j], t[:, j])

    def test_empty_marker(self, rng):
        t = rng.integers(0, 4, (10, 5))
        flags = np.zeros_like(t)
        flags[:, 0] = 1
        rep = A.false_belief_accuracy(t, t, flags)
        assert rep.per_order["second"] is None and rep.per_mind["m12"] is None
        assert ("order", "second", 0, A.EMPTY) in rep.accuracy_rows()
        assert A.EMPTY in rep.text()

    def test_counts(self):
        t = np.array([[3, 3, 3, 3, 3], [0, 2, 3, 3, 1]])
        f = np.array([[1, 1, 0, 0, 0], [0, 0, 1, 0, 0]])
        c = A.false_belief_counts(t, f)
        assert c["m1"]["null"] == (1, 1) and c["m1"]["occur"] == (1, 0)
        assert c["m12"]["null"] == (2, 1)
        assert c["mc"]["disappear"] == (1, 0)

    def test_misaligned(self):
        with pytest.raises(ValueError, match="aligned"):
            A.false_belief_accuracy(np.zeros((3, 5)), np.zeros((3, 5)), np.zeros((2, 5)))

    def test_write(self, rng, tmp_path):
        t = rng.integers(0, 4, (10, 5))
        A.false_belief_accuracy(t, t, rng.integers(0, 2, (10, 5))).write(tmp_path)
        rows = A.read_csv(tmp_path / "false_belief_counts.csv", ("mind", "label", "count", "false_belief"))
        assert len(rows) == 20


class TestPca:
    def test_line(self, rng):
        x = np.outer(rng.normal(size=50), rng.normal(size=128)) + 3.0
        r = A.pca_project(x, np.repeat([1, 2], 25))
        assert r.explained_ratio[0] == pytest.approx(1.0, abs=1e-9)

    def test_isotropic(self):
        x = np.random.default_rng(0).normal(size=(20000, 2))
        r = A.pca_project(x, np.ones(20000, int))
        np.testing.assert_allclose(r.explained_ratio, [0.5, 0.5], atol=0.02)

    def test_duplicate_invariance(self, rng):
        x = rng.normal(size=(30, 8)) * np.arange(1, 9)
        g = np.repeat([1, 2], 15)
        a, b = A.pca_project(x, g), A.pca_project(np.vstack([x, x]), np.concatenate([g, g]))
        np.testing.assert_allclose(a.components, b.components, atol=1e-9)
        np.testing.assert_allclose(a.explained_ratio, b.explained_ratio, atol=1e-12)

    @settings(max_examples=30, deadline=None)
    @given(n=st.integers(3, 40), d=st.integers(2, 20), seed=st.integers(0, 999))
    def test_invariants(self, n, d, seed):
        r = np.random.default_rng(seed)
        r_ = A.pca_project(r.normal(size=(n, d)) * r.uniform(0.1, 5, d), r.integers(1, 3, n))
        np.testing.assert_allclose(r_.components @ r_.components.T, np.eye(2), atol=1e-9)
        ratios = r_.explained_ratio
        assert 0 <= ratios[1] <= ratios[0] <= 1 and ratios.sum() <= 1 + 1e-9
        assert 0.5 <= r_.separability <= 1

    def test_separable_clusters(self, rng):
        x = np.vstack([rng.normal(size=(20, 16)) + 5, rng.normal(size=(20, 16)) - 5])
        assert A.pca_project(x, np.repeat([1, 2], 20)).separability == 1.0

    def test_threshold_oracle(self, rng):
        v, g = rng.normal(size=25), rng.integers(1, 3, 25)
        best = 0
        for thr in np.concatenate([[-np.inf], np.sort(v)]):
            pred = np.where(v > thr, 1, 2)
            best = max(best, np.mean(pred == g), np.mean(pred != g))
        assert A.best_threshold_accuracy(v, g) == pytest.approx(best)

    def test_too_few(self):
        with pytest.raises(ValueError, match="at least 3"):
            A.pca_project(np.zeros((2, 4)), [1, 2])

    def test_write(self, rng, tmp_path):
        r = A.pca_project(rng.normal(size=(10, 4)), np.repeat([1, 2], 5))
        paths = r.write(tmp_path)
        assert [p.name for p in paths] == ["pca_mindnet1.txt", "pca_mindnet2.txt"]
        assert np.loadtxt(paths[0]).shape == (5, 2)


class TestTTest:
    def test_equal(self):
        r = A.paired_t_test([1, 2, 3], [1, 2, 3])
        assert r.degenerate and r.p == 1.0 and not r.significant

    def test_constant_shift(self):
        r = A.paired_t_test([2, 3, 4, 5], [1, 2, 3, 4])
        assert r.degenerate and r.p == 0.0 and r.significant

    def test_hand_computed(self):
        # d = (1, 2, 0, 3, 4): mean 2, sd sqrt(2.5), t = 2 / (sqrt(2.5)/sqrt(5)) = 2*sqrt(2)
        a, b = [11, 12, 10, 13, 14], [10, 10, 10, 10, 10]
        r = A.paired_t_test(a, b)
        assert r.t == pytest.approx(2 * math.sqrt(2), rel=1e-12)
        assert r.df == 4
        # tabulated t(4): two-sided p = 0.05 at 2.776, 0.02 at 3.747
        assert 0.02 < r.p < 0.05 and r.significant
        assert r.p == pytest.approx(stats.ttest_rel(a, b).pvalue, rel=1e-10)

    @pytest.mark.parametrize("t, df, p", [(2.776, 4, 0.05), (2.228, 10, 0.05), (1.96, 1e6, 0.05), (12.706, 1, 0.05)])
    def test_cdf_table(self, t, df, p):
        assert A.student_t_sf2(t, df) == pytest.approx(p, abs=5e-5)

    @given(t=st.floats(-40, 40), df=st.integers(1, 200))
    def test_cdf_vs_scipy(self, t, df):
        assert A.student_t_cdf(t, df) == pytest.approx(stats.t.cdf(t, df), abs=1e-12)

    @given(data=st.lists(st.tuples(st.floats(-10, 10), st.floats(-10, 10)), min_size=2, max_size=20))
    def test_antisymmetric(self, data):
        a, b = zip(*data)
        r, s = A.paired_t_test(a, b), A.paired_t_test(b, a)
        assert r.df == len(a) - 1 and 0 <= r.p <= 1
        if not r.degenerate:
            assert s.t == pytest.approx(-r.t)
            assert s.p == pytest.approx(r.p)

    def test_too_short(self):
        with pytest.raises(ValueError, match="n >= 2"):
            A.paired_t_test([1], [2])


class TestReportFile:
    def test_round_trip(self, tmp_path):
        rep = A.tbd_report(np.array([[0, 1, 2, 3, 3]] * 4), np.array([[0, 1, 2, 3, 0]] * 4))
        rep.write_csv(tmp_path / "r.csv")
        back = A.MetricReport.read_csv(tmp_path / "r.csv")
        assert back == rep

    def test_boss_report(self):
        p, t = np.array([[1, 2], [1, 3]]), np.array([[1, 2], [0, 3]])
        rep = A.boss_report(p, t)
        assert rep.accuracy == 0.75 and rep.per_person == {"p1": 0.5, "p2": 1.0}
        assert rep.selection_metric == 0.75
