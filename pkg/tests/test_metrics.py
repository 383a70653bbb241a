import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from upldg.data import DomainData, UnlabelledSet
from upldg.fixmatch import BatchInfo, LossBreakdown
from upldg.metrics import (METRICS_HEADER, MetricsCollector, MetricsError, MetricsRecord, bin_index, ece, ece_bins,
                           feature_dump, pl_stats, read_metrics_csv, reveal_labels, top1_accuracy,
                           uncertainty_ece_series, write_metrics_csv)
from upldg.upl import gate_batch


def brute_force_ece(conf, correct, m):
    """Loop over bins (k/M, (k+1)/M] with float edges k/M."""
    n = len(conf)
    total = 0.0
    for k in range(m):
        lo, hi = k / m, (k + 1) / m
        members = [i for i in range(n) if lo < conf[i] <= hi]
        if not members:
            continue
        acc = sum(correct[i] for i in members) / len(members)
        avg = sum(conf[i] for i in members) / len(members)
        total += len(members) / n * abs(acc - avg)
    return total


class TestAccuracy:
    def test_examples(self):
        assert top1_accuracy(np.array([1, 2, 3]), np.array([1, 2, 3])) == 100.0
        assert top1_accuracy(np.array([0, 0]), np.array([1, 1])) == 0.0
        assert top1_accuracy(np.array([0, 1, 2, 3]), np.array([0, 1, 2, 0])) == 75.0

    def test_probabilities_lowest_tie(self):
        assert top1_accuracy(np.array([[0.5, 0.5], [0.2, 0.8]]), np.array([0, 1])) == 100.0

    def test_errors(self):
        with pytest.raises(MetricsError):
            top1_accuracy(np.array([]), np.array([]))
        with pytest.raises(MetricsError):
            top1_accuracy(np.array([1]), np.array([1, 2]))


class TestEce:
    def test_examples(self):
        assert ece(np.ones(5), np.ones(5)) == 0.0
        assert ece(np.full(5, 0.8), np.array([1, 1, 1, 0, 0]), 1) == pytest.approx(0.2, abs=1e-15)

    def test_six_examples_two_bins(self):
        conf = np.array([0.2, 0.5, 0.45, 0.7, 0.95, 1.0])
        correct = np.array([0, 1, 1, 1, 0, 1])
        assert ece(conf, correct, 2) == pytest.approx(brute_force_ece(conf, correct, 2), abs=1e-12)
        # 0.5 sits on the edge and goes to the lower bin
        np.testing.assert_array_equal(ece_bins(conf, correct, 2).counts, [3, 3])

    def test_edges_lower_bin(self):
        m = 10
        edges = np.arange(1, m + 1) / m
        np.testing.assert_array_equal(bin_index(edges, m), np.arange(m))
        np.testing.assert_array_equal(bin_index(np.nextafter(edges[:-1], 1.0), m), np.arange(1, m))

    def test_oracle_random(self):
        rng = np.random.default_rng(7)
        for trial in range(150):
            m = int(rng.integers(1, 16))
            n = int(rng.integers(1, 60))
            conf = rng.uniform(0.0, 1.0, n)
            conf[conf == 0.0] = 1.0
            # plant confidences exactly on bin edges
            on_edge = rng.random(n) < 0.3
            conf[on_edge] = rng.integers(1, m + 1, on_edge.sum()) / m
            correct = rng.integers(0, 2, n)
            assert ece(conf, correct, m) == pytest.approx(brute_force_ece(conf, correct, m), abs=1e-12)

    def test_counts_and_range(self):
        rng = np.random.default_rng(0)
        conf = rng.uniform(0.01, 1.0, 200)
        bins = ece_bins(conf, rng.integers(0, 2, 200), 7)
        assert bins.total == 200
        assert 0.0 <= ece(conf, rng.integers(0, 2, 200), 7) <= 1.0

    def test_errors(self):
        with pytest.raises(MetricsError):
            ece(np.array([0.5]), np.array([1]), 0)
        with pytest.raises(MetricsError):
            ece(np.array([0.0]), np.array([1]))
        with pytest.raises(MetricsError):
            ece(np.array([1.2]), np.array([1]))
        with pytest.raises(MetricsError):
            ece(np.array([0.5, 0.6]), np.array([1]))


class TestPlStats:
    def test_examples(self):
        assert pl_stats(np.ones(3, bool), np.array([0, 1, 2]), np.array([0, 1, 2])) == (100.0, 1.0)
        assert pl_stats(np.zeros(3, bool), np.zeros(3), np.zeros(3)) == (None, 0.0)
        sel = np.array([1, 1, 1, 1, 0, 0, 0, 0, 0, 0], bool)
        pseudo = np.array([0, 1, 2, 3, 0, 0, 0, 0, 0, 0])
        truth = np.array([0, 1, 2, 0, 1, 1, 1, 1, 1, 1])
        assert pl_stats(sel, pseudo, truth) == (75.0, 0.4)

    @settings(max_examples=30)
    @given(st.lists(st.tuples(st.booleans(), st.integers(0, 3), st.integers(0, 3)), min_size=1, max_size=30),
           st.randoms())
    def test_order_invariant(self, rows, rnd):
        shuffled = list(rows)
        rnd.shuffle(shuffled)
        a = pl_stats(*map(np.array, zip(*rows)))
        b = pl_stats(*map(np.array, zip(*shuffled)))
        assert a == b


class TestSeries:
    def test_one_epoch(self):
        s = uncertainty_ece_series([np.full((2, 3), 0.1)], [0.4], [0])
        assert s.points == ((pytest.approx(0.1), 0.4),)

    def test_sorted(self):
        v = [np.full((1, 2), 0.3), np.full((1, 2), 0.1), np.full((1, 2), 0.2)]
        s = uncertainty_ece_series(v, [0.7, 0.5, 0.6], [0, 1, 2])
        np.testing.assert_allclose(s.uncertainty, [0.1, 0.2, 0.3])
        np.testing.assert_allclose(s.ece, [0.5, 0.6, 0.7])

    def test_hand_computed(self):
        # epoch 0: batches of 2 and 1 examples; epoch 1: one batch of 2
        v = [np.array([[0.1, 0.3], [0.2, 0.2]]), np.array([[0.6, 0.0]]), np.array([[0.0, 0.02], [0.04, 0.0]])]
        s = uncertainty_ece_series(v, [0.1, 0.3, 0.05], [0, 0, 1])
        expected = [(0.015, 0.05), ((0.2 + 0.2 + 0.3) / 3, 0.2)]
        for (u, e), (u_ref, e_ref) in zip(s.points, expected):
            assert u == pytest.approx(u_ref, abs=1e-12)
            assert e == pytest.approx(e_ref, abs=1e-12)

    def test_errors(self):
        with pytest.raises(MetricsError):
            uncertainty_ece_series([], [], [])
        with pytest.raises(MetricsError):
            uncertainty_ece_series([np.zeros((1, 2))], [], [0])


class TestFeatureDump:
    def test_header_only(self, tiny_net, tmp_path):
        spec, params = tiny_net
        path = feature_dump(spec, params, [], tmp_path / "f.csv")
        assert path.read_text() == "example_id,domain,label,f0,f1,f2,f3\n"

    def test_rows(self, tiny_net, tmp_path):
        spec, params = tiny_net
        x = np.array([[0.5, -1.0], [0.5, -1.0], [2.0, 1.0]])
        dom = DomainData("a", x, np.array([1, 1, -1]), 3)
        path = feature_dump(spec, params, [dom], tmp_path / "f.csv")
        rows = list(csv.reader(path.open()))
        assert len(rows) == 4 and all(len(r) == 3 + spec.feature_dim for r in rows)
        assert rows[1][3:] == rows[2][3:]
        assert rows[3][2] == "" and rows[1][:3] == ["0", "a", "1"]

    def test_io_error(self, tiny_net, tmp_path):
        spec, params = tiny_net
        blocker = tmp_path / "file"
        blocker.write_text("")
        with pytest.raises(MetricsError):
            feature_dump(spec, params, [], blocker / "sub" / "f.csv")


class TestRecords:
    def test_round_trip(self, tmp_path):
        recs = [MetricsRecord(1, 50.0, None, None, 0.0, None, None),
                MetricsRecord(2, 75.5, 60.25, 91.0, 0.125, 0.0123, 0.05)]
        path = write_metrics_csv(tmp_path / "m.csv", recs)
        assert path.read_text().splitlines()[0] == ",".join(METRICS_HEADER)
        assert read_metrics_csv(path) == recs


class TestCollector:
    def test_scores_against_truth(self):
        pool = UnlabelledSet(np.zeros((4, 2)), np.array(["a"] * 4, dtype=object), np.array([0, 1, 1, 0]))
        np.testing.assert_array_equal(reveal_labels(pool, [3, 1]), [0, 1])
        col = MetricsCollector(pool, keep_gate_log=True, target_eval=lambda p: 42.0)
        q = np.array([[0.9, 0.1], [0.2, 0.8], [0.95, 0.05], [0.6, 0.4]])
        gate = gate_batch(q, 0.7)
        info = BatchInfo(0, 0, np.array([0, 1, 2, 3]), q, gate, np.full((4, 2), 0.01), None,
                         LossBreakdown(1.0, 0.5, 1.5, 3))
        col.on_batch(info)
        out = col.epoch_end(0, None)
        assert out["pl_coverage"] == 0.75
        assert out["pl_precision"] == pytest.approx(200 / 3)
        assert out["target_acc"] == 42.0
        assert out["mean_uncertainty"] == pytest.approx(0.01)
        correct = np.array([1, 1, 0, 1])
        assert out["ece"] == pytest.approx(ece(gate.confidence, correct))
        assert len(col.gate_log) == 4 and col.gate_log[2] == (2, 0, 0.95, 1.0, 1)
        assert col.run_coverage == 0.75
        assert col.calibration_series().points[0][1] == pytest.approx(out["ece"])
