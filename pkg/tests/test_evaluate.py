import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import brute_qvalues, step_area
from protgnn.evaluate import (
    ENTRAPMENT,
    TRUE,
    UNKNOWN,
    RocCurve,
    ScoreTable,
    calibration,
    decoy_fdr_curve,
    decoy_qvalues,
    emit_report,
    entrapment_curve,
    group_truth,
    pauc,
    read_scores,
    read_truth,
    write_truth,
)


def table(scores, decoy, truth=None):
    n = len(scores)
    return ScoreTable(
        group_ids=np.arange(n),
        members=tuple((f"P{i}",) for i in range(n)),
        scores=np.asarray(scores, dtype=float),
        is_decoy=np.asarray(decoy, dtype=bool),
        truth=tuple(truth) if truth is not None else (UNKNOWN,) * n,
    )


class TestQValues:
    def test_hand_count(self):
        scores, decoy = [0.9, 0.8, 0.6, 0.4, 0.7, 0.3], [0, 0, 0, 0, 1, 1]
        uniq, _, fdr, _ = decoy_fdr_curve(scores, decoy)
        # at threshold 0.6: three targets, one decoy
        assert fdr[uniq.tolist().index(0.6)] == pytest.approx(1 / 3)
        t = decoy_qvalues(table(scores, decoy))
        # the 0.4 cutoff admits a fourth target, so the minimum drops to 1/4
        assert t.q_values.tolist() == [0.0, 0.0, 0.25, 0.25, 0.25, 0.5]

    def test_no_decoys(self):
        t = decoy_qvalues(table([0.5, 0.2, 0.9], [0, 0, 0]))
        assert t.q_values.tolist() == [0.0, 0.0, 0.0]

    def test_decoys_on_top(self):
        t = decoy_qvalues(table([0.9, 0.8, 0.1], [1, 1, 0]))
        assert t.q_values[2] == 2.0

    def test_plus_one(self):
        t = decoy_qvalues(table([0.9, 0.8, 0.1], [0, 1, 0]), plus_one=True)
        assert t.q_values.tolist() == [1.0, 1.0, 1.0]

    def test_no_targets(self):
        with pytest.raises(ValueError):
            decoy_qvalues(table([0.9], [1]))

    def test_ties_share_a_threshold(self):
        t = decoy_qvalues(table([0.5, 0.5, 0.5], [0, 1, 0]))
        assert t.q_values.tolist() == [0.5, 0.5, 0.5]

    @settings(max_examples=200, deadline=None)
    @given(st.lists(st.tuples(st.integers(0, 5), st.booleans()), min_size=1, max_size=10))
    def test_brute_force(self, rows):
        scores = [s / 5 for s, _ in rows]
        decoy = [d for _, d in rows]
        if all(decoy):
            decoy[0] = False
        got = decoy_qvalues(table(scores, decoy)).q_values.tolist()
        assert got == brute_qvalues(scores, decoy)

    def test_monotone_large(self):
        rng = np.random.default_rng(0)
        scores = np.round(rng.random(10_000), 3)
        t = decoy_qvalues(table(scores, rng.random(10_000) < 0.3))
        order = np.argsort(-scores, kind="stable")
        assert (np.diff(t.q_values[order]) >= 0).all()

    def test_rank_invariance(self):
        rng = np.random.default_rng(1)
        scores = rng.random(200)
        decoy = rng.random(200) < 0.3
        truth = rng.choice([TRUE, ENTRAPMENT], 200)
        a = table(scores, decoy, truth)
        b = table(np.exp(3 * scores) - 7, decoy, truth)
        assert decoy_qvalues(a).q_values.tolist() == decoy_qvalues(b).q_values.tolist()
        ca, cb = entrapment_curve(a, 0.01, 0.5), entrapment_curve(b, 0.01, 0.5)
        assert ca.fdr.tolist() == cb.fdr.tolist() and ca.tp.tolist() == cb.tp.tolist()
        assert pauc(ca) == pauc(cb)


class TestCurve:
    def test_counting_point(self):
        t = table([4, 3, 2, 1], [0] * 4, [TRUE, TRUE, ENTRAPMENT, TRUE])
        c = entrapment_curve(t, 0.01, 0.5)
        assert (0.25, 3) in zip(c.fdr.tolist(), c.tp.tolist())

    def test_separable(self):
        t = table([5, 4, 3, 2, 1], [0] * 5, [TRUE] * 3 + [ENTRAPMENT] * 2)
        c = entrapment_curve(t)
        assert (c.fdr[0], c.tp[0]) == (0.01, 3)
        assert pauc(c) == 1.0

    def test_empty(self):
        c = entrapment_curve(table([1.0], [1]))
        assert len(c) == 0

    def test_unknown_excluded(self):
        t = table([3, 2, 1], [0, 0, 0], [TRUE, UNKNOWN, ENTRAPMENT])
        c = entrapment_curve(t, 0.01, 0.6)
        assert c.n_true == 1 and c.tp.max() == 1
        with pytest.raises(ValueError):
            entrapment_curve(table([1.0], [0]))

    def test_bad_band(self):
        with pytest.raises(ValueError):
            entrapment_curve(table([1.0], [0], [TRUE]), 0.05, 0.01)

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.tuples(st.integers(0, 30), st.sampled_from([TRUE, ENTRAPMENT])), min_size=1, max_size=60))
    def test_curve_properties(self, rows):
        t = table([s for s, _ in rows], [0] * len(rows), [f for _, f in rows])
        c = entrapment_curve(t, 0.01, 0.3)
        assert (np.diff(c.fdr) > 0).all()
        assert (np.diff(c.tp) >= 0).all()
        assert ((c.fdr >= 0) & (c.fdr <= 1)).all()
        assert (c.tp <= c.n_true).all()
        if c.n_true:
            v = pauc(c)
            assert 0.0 <= v <= 1.0
            pts = list(zip(c.fdr.tolist(), c.tp.tolist()))
            assert v == pytest.approx(step_area(pts, 0.01, 0.3) / (0.29 * c.n_true), abs=1e-12)


class TestPauc:
    def test_perfect(self):
        assert pauc(RocCurve(np.array([0.01]), np.array([20]), 0.01, 0.05, 20)) == pytest.approx(1.0, abs=1e-12)

    def test_half(self):
        assert pauc(RocCurve(np.array([0.01]), np.array([10]), 0.01, 0.05, 20)) == pytest.approx(0.5, abs=1e-12)

    def test_piecewise(self):
        c = RocCurve(np.array([0.01, 0.03]), np.array([10, 20]), 0.01, 0.05, 20)
        assert pauc(c) == pytest.approx(0.75, abs=1e-12)

    def test_undefined(self):
        with pytest.raises(ValueError):
            pauc(RocCurve(np.array([0.01]), np.array([0]), 0.01, 0.05, 0))


def test_group_truth():
    truth = {"A": TRUE, "B": ENTRAPMENT}
    assert group_truth(("A", "B"), truth) == TRUE
    assert group_truth(("B",), truth) == ENTRAPMENT
    assert group_truth(("DECOY_A",), truth) == UNKNOWN


def test_calibration_rows():
    t = table([3, 2, 1], [0, 1, 0], [TRUE, UNKNOWN, ENTRAPMENT])
    rows = calibration(t)
    assert rows[0] == (3.0, 1, 0.0, 0.0)
    assert rows[1] == (2.0, 1, 1.0, 0.0)
    assert rows[2] == (1.0, 2, 0.5, 0.5)


class TestFiles:
    def test_scores_roundtrip(self, tmp_path):
        t = decoy_qvalues(table([0.123456, 0.5, 0.25], [0, 1, 0], [TRUE, UNKNOWN, ENTRAPMENT]))
        t = ScoreTable(t.group_ids, (("A", "B"), ("DECOY_C",), ("D",)), t.scores, t.is_decoy, t.truth, t.q_values)
        emit_report({"x": t}, {"x": entrapment_curve(t)}, {"x": 0.5}, tmp_path)
        back = read_scores(tmp_path / "x.scores.tsv")
        assert back.members == t.members
        assert back.scores.tolist() == t.scores.tolist()
        assert back.q_values.tolist() == t.q_values.tolist()
        assert back.truth == t.truth
        assert back.is_decoy.tolist() == t.is_decoy.tolist()

    def test_report_files(self, tmp_path):
        a = table([1.0, 0.5], [0, 0], [TRUE, ENTRAPMENT])
        b = table([1.0], [1])
        empty = RocCurve(np.empty(0), np.empty(0, dtype=np.int64), 0.01, 0.05, 0)
        emit_report({"a": a, "b": b}, {"a": entrapment_curve(a), "b": empty}, {"a": 1.0, "b": 0.0}, tmp_path)
        assert (tmp_path / "b.curve.tsv").read_text().splitlines() == ["fdr\ttp"]
        summary = (tmp_path / "summary.tsv").read_text().splitlines()
        assert len(summary) == 3
        assert (tmp_path / "a.calibration.tsv").exists()

    def test_truth_roundtrip(self, tmp_path):
        truth = {"P1": TRUE, "P2": ENTRAPMENT}
        write_truth(truth, tmp_path / "t.tsv")
        assert read_truth(tmp_path / "t.tsv") == truth
