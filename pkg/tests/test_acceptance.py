"""Acceptance criteria, one test each, at their stated tolerances and time budgets.

Every test records a ``PASS``/``FAIL`` line that is printed in the terminal
summary (and echoed to stdout, visible with ``-s``).
"""

import itertools
import time
from contextlib import contextmanager

import mpmath
import numpy as np
from scipy.stats import spearmanr

from conftest import ACCEPTANCE_LINES, fd_gradient, max_rel_error, random_network
from upldg import cli, harness
from upldg.averaging import VARIANTS, AveragingWeights, CheckpointTriple, EmaState, ema_update, model_average
from upldg.config import PRESETS, BenchmarkConfig, ExperimentConfig, load_config
from upldg.fixmatch import (GatePolicy, TrainConfig, objective, supervised_loss, total_loss, train_run,
                            unsupervised_loss)
from upldg.metrics import ece
from upldg.nn import ForwardMode, classify, extract_features, forward, loss_and_grad, predict, softmax
from upldg.upl import certainty, gate_batch, predictive_variance, upl_gate


@contextmanager
def criterion(name):
    """Record PASS/FAIL for ``name``; the body sets ``state["detail"]`` and asserts."""
    state = {"detail": ""}
    start = time.perf_counter()
    try:
        yield state
    except BaseException as exc:
        line = f"FAIL  {name}: {state['detail'] or type(exc).__name__} ({time.perf_counter() - start:.1f}s)"
        ACCEPTANCE_LINES.append(line)
        print(line)
        raise
    line = f"PASS  {name}: {state['detail']} ({time.perf_counter() - start:.1f}s)"
    ACCEPTANCE_LINES.append(line)
    print(line)


def within_budget(start, seconds):
    elapsed = time.perf_counter() - start
    assert elapsed < seconds, f"took {elapsed:.1f}s, budget {seconds}s"


class Recorder:
    def __init__(self):
        self.batches = []

    def on_batch(self, info):
        self.batches.append(info)

    def epoch_end(self, epoch, params):
        return {}


def default_sources(config=None, seed=0):
    cfg = config or ExperimentConfig()
    doms = harness.build_benchmark(cfg)
    splits, target = harness.leave_one_domain_out(doms, cfg.target, seed, cfg.train.labels_per_class,
                                                  cfg.train.train_fraction)
    return splits, target


def test_gradient_correctness():
    with criterion("gradient correctness (3 networks x L_s, L_u, L_final; rel err <= 1e-4; < 30 s)") as st:
        start = time.perf_counter()
        worst = 0.0
        for seed in range(3):
            spec, params = random_network(seed, input_dim=3, hidden=(5, 4), num_classes=3)
            rng = np.random.default_rng(seed + 10)
            x_l, y_l = rng.normal(size=(5, 3)), rng.integers(0, 3, 5)
            x_u, pseudo = rng.normal(size=(4, 3)), rng.integers(0, 3, 4)
            m_l, m_u = rng.integers(0, 2, (5, 4)) * 2.0, rng.integers(0, 2, (4, 4)) * 2.0
            n_u, lam = 10, 0.8

            def l_s(p):
                return supervised_loss(forward(spec, p, x_l, ForwardMode.TRAIN, mask=m_l)[0], y_l)

            def l_u(p):
                probs = forward(spec, p, x_u, ForwardMode.TRAIN, mask=m_u)[0]
                return unsupervised_loss(probs, pseudo, np.ones(4, bool), batch_size=n_u)

            def l_final(p):
                return total_loss(l_s(p), l_u(p), lam)

            _, g_s = objective(spec, params, x_l, y_l, None, None, 0, lam, mask_l=m_l)
            _, g_u = loss_and_grad(spec, params, x_u, pseudo, np.full(4, 1.0 / n_u), ForwardMode.TRAIN, mask=m_u)
            _, g_f = objective(spec, params, x_l, y_l, x_u, pseudo, n_u, lam, mask_l=m_l, mask_u=m_u)
            for g, fn in ((g_s, l_s), (g_u, l_u), (g_f, l_final)):
                worst = max(worst, max_rel_error(g, fd_gradient(fn, params)))
        st["detail"] = f"max rel err {worst:.2e}"
        assert worst <= 1e-4
        within_budget(start, 30)


def brute_force_gate(q, kappa, tau, eta):
    best = 0
    for i in range(len(q)):
        if q[i] > q[best]:
            best = i
    return best, bool(q[best] >= tau and kappa[best] >= eta)


def test_gate_matches_brute_force():
    with criterion("selection rule equals brute-force oracle on exhaustive grid (exact; < 10 s)") as st:
        start = time.perf_counter()
        grid = np.arange(21) / 20
        thresholds = (0.5, 0.7, 0.9, 0.95)
        checked = 0
        for a in range(21):
            q = np.array([a / 20, (20 - a) / 20])
            for k0, k1 in itertools.product(grid, repeat=2):
                kappa = np.array([k0, k1])
                for tau, eta in itertools.product(thresholds, repeat=2):
                    d = upl_gate(q, kappa, tau, eta)
                    assert (d.pseudo_label, d.selected) == brute_force_gate(q, kappa, tau, eta)
                    checked += 1
        # three classes through the batched gate, certainty on a 0.25 grid
        qs = np.array([[i, j, 20 - i - j] for i in range(21) for j in range(21 - i)]) / 20
        ks = np.array(list(itertools.product(np.arange(5) / 4, repeat=3)))
        q_rows, k_rows = np.repeat(qs, len(ks), axis=0), np.tile(ks, (len(qs), 1))
        for tau, eta in itertools.product(thresholds, repeat=2):
            gate = gate_batch(q_rows, tau, k_rows, eta)
            expected = [brute_force_gate(q, k, tau, eta) for q, k in zip(q_rows, k_rows)]
            assert gate.pseudo_label.tolist() == [e[0] for e in expected]
            assert gate.selected.tolist() == [e[1] for e in expected]
            checked += len(q_rows)
        st["detail"] = f"{checked} cases agree"
        within_budget(start, 10)


def test_selection_subsets_over_full_run():
    with criterion("certainty-gated selection is a subset of confidence selection and nests in eta (exact)") as st:
        splits, _ = default_sources()
        rec = Recorder()
        cfg = TrainConfig(eta=0.9)
        train_run(splits, cfg, GatePolicy.UPL, rec)
        etas = (0.3, 0.5, 0.7, 0.9, 0.95, 0.99)
        strict = 0
        for info in rec.batches:
            conf = gate_batch(info.q_weak, cfg.tau).selected
            assert not np.any(info.gate.selected & ~conf)
            prev = conf
            for eta in etas:
                sel = gate_batch(info.q_weak, cfg.tau, info.kappa, eta).selected
                assert not np.any(sel & ~prev)
                strict += int(sel.sum() < prev.sum())
                prev = sel
        st["detail"] = f"{len(rec.batches)} batches, eta chain {etas}, {strict} strict shrinkages"


def test_dropout_off_degeneracy():
    with criterion("dropout off: zero variance, unit certainty, gating identical to confidence (exact)") as st:
        splits, _ = default_sources()
        cfg = TrainConfig(dropout_rate=0.0, eta=1.0)
        ra, rb = Recorder(), Recorder()
        a = train_run(splits, cfg, GatePolicy.UPL, ra)
        b = train_run(splits, cfg, GatePolicy.CONFIDENCE, rb)
        assert len(ra.batches) == len(rb.batches) == 500
        for x, y in zip(ra.batches, rb.batches):
            assert np.all(x.variance == 0.0) and np.all(x.kappa == 1.0)
            assert np.array_equal(x.gate.selected, y.gate.selected)
        for k in a.triple.last:
            assert a.triple.last[k].tobytes() == b.triple.last[k].tobytes()
        st["detail"] = f"{len(ra.batches)} batches identical, final parameters bitwise equal"


def test_variance_certainty_kernels():
    with criterion("variance and certainty equal 50-digit recomputation on 100 matrices (1e-12)") as st:
        rng = np.random.default_rng(99)
        worst = 0.0
        mpmath.mp.dps = 50
        for _ in range(100):
            n, c = int(rng.integers(1, 16)), int(rng.integers(2, 10))
            mats = softmax(rng.normal(scale=rng.uniform(0.1, 6.0), size=(n, c)))
            v, k = predictive_variance(mats), certainty(predictive_variance(mats))
            for j in range(c):
                col = [mpmath.mpf(float(t)) for t in mats[:, j]]
                mean = mpmath.fsum(col) / n
                var = mpmath.fsum((t - mean) ** 2 for t in col) / n
                worst = max(worst, abs(float(var - mpmath.mpf(float(v[j])))),
                            abs(float(1 - mpmath.tanh(var) - mpmath.mpf(float(k[j])))))
        st["detail"] = f"max abs err {worst:.1e}"
        assert worst <= 1e-12


def brute_force_ece(conf, correct, m):
    total = 0.0
    for k in range(m):
        idx = [i for i in range(len(conf)) if k / m < conf[i] <= (k + 1) / m]
        if idx:
            acc = sum(correct[i] for i in idx) / len(idx)
            avg = sum(conf[i] for i in idx) / len(idx)
            total += len(idx) / len(conf) * abs(acc - avg)
    return total


def test_ece_matches_brute_force():
    with criterion("binned calibration error equals brute-force binning on 200 inputs incl. bin edges (1e-12)") as st:
        rng = np.random.default_rng(5)
        worst, edges = 0.0, 0
        for _ in range(200):
            m, n = int(rng.integers(1, 21)), int(rng.integers(1, 80))
            conf = 1.0 - rng.uniform(0.0, 1.0, n)  # (0, 1]
            on_edge = rng.random(n) < 0.3
            conf[on_edge] = rng.integers(1, m + 1, int(on_edge.sum())) / m
            edges += int(on_edge.sum())
            correct = rng.integers(0, 2, n)
            worst = max(worst, abs(ece(conf, correct, m) - brute_force_ece(conf, correct, m)))
        st["detail"] = f"max abs err {worst:.1e}, {edges} edge confidences"
        assert worst <= 1e-12


def test_model_averaging_identities():
    with criterion("averaging identities: identical checkpoints, degenerate weights, EMA closed form") as st:
        splits, target = default_sources()
        res = train_run(splits, TrainConfig(epochs=2), GatePolicy.CONFIDENCE)
        spec, p = res.spec, res.triple.last
        x = target.as_domain().x
        logits = lambda params: classify(params, extract_features(spec, params, x))
        same = model_average(CheckpointTriple(p, p.copy(), p.copy()))
        gap = float(np.max(np.abs(logits(same) - logits(p))))
        assert gap <= 1e-12
        degenerate = model_average(res.triple, AveragingWeights(1.0, 0.0, 0.0))
        assert np.array_equal(predict(spec, degenerate, x), predict(spec, res.triple.best, x))
        worst = 0.0
        for d, k in ((0.999, 500), (0.9, 37), (0.5, 3)):
            state = EmaState.start(res.triple.best, d)
            for _ in range(k):
                state = ema_update(state, p)
            for name in p:
                closed = p[name] * (1 - d ** k) + res.triple.best[name] * d ** k
                worst = max(worst, float(np.max(np.abs(state.shadow[name] - closed))))
        assert worst <= 1e-12
        st["detail"] = f"logit gap {gap:.1e}, degenerate exact, EMA err {worst:.1e}"


def test_certainty_gate_raises_pseudo_label_precision():
    with criterion("pseudo-label precision gain of certainty gating >= 3 pp over 3 seeds at equal tau (< 5 min)") as st:
        start = time.perf_counter()
        cfg = load_config(None, {"benchmark": "confident-shift", "target": "target", "tau": "0.5", "eta": "0.99"})
        doms = harness.build_benchmark(cfg)
        prec = {}
        for method in ("FixMatch", "UPL"):
            prec[method] = [harness.run_single(cfg, s, doms, method).collector.run_precision for s in cfg.seeds]
        gain = np.mean(prec["UPL"]) - np.mean(prec["FixMatch"])
        st["detail"] = (f"confidence {np.mean(prec['FixMatch']):.2f} -> certainty {np.mean(prec['UPL']):.2f} "
                        f"(+{gain:.2f} pp)")
        assert gain >= 3.0
        within_budget(start, 300)


def test_uncertainty_tracks_calibration_error():
    with criterion("epoch mean uncertainty and calibration error rank-correlate positively in >= 2 of 3 seeds") as st:
        cfg = load_config(None, {"benchmark": "confident-shift", "target": "target"})
        doms = harness.build_benchmark(cfg)
        rhos = []
        for s in cfg.seeds:
            hist = harness.run_single(cfg, s, doms, "FixMatch").result.history
            rhos.append(float(spearmanr([r.mean_uncertainty for r in hist], [r.ece for r in hist]).statistic))
        st["detail"] = "rho per seed " + ", ".join(f"{r:.3f}" for r in rhos)
        assert sum(r > 0 for r in rhos) >= 2


def test_averaging_variant_table():
    with criterion("seven-variant averaging table: order, identical-checkpoint columns, bitwise repeat") as st:
        cfg = ExperimentConfig()
        first = cli.ablate_ma_table(cfg)
        second = cli.ablate_ma_table(cfg)
        assert repr(first) == repr(second)
        assert len(first) == len(cfg.seeds) + 1 and all(len(r) == 1 + len(VARIANTS) for r in first)
        splits, target = default_sources()
        res = train_run(splits, cfg.train.with_(epochs=2), GatePolicy.UPL)
        p = res.triple.best
        same = harness.ablate_ma_variants(res.spec, CheckpointTriple(p, p.copy(), p.copy()), target)
        assert tuple(same) == VARIANTS and len(set(same.values())) == 1
        st["detail"] = (f"{len(first)} rows x {len(VARIANTS)} variants reproduced; "
                        f"identical columns {set(same.values())}")


def test_end_to_end_determinism(tmp_path):
    with criterion("same config and seed give bitwise-identical metrics and results files twice (< 2 min)") as st:
        start = time.perf_counter()
        outs = [tmp_path / "a", tmp_path / "b"]
        for out in outs:
            assert cli.main(["train", "--out", str(out)]) == 0
        files = sorted(p.relative_to(outs[0]) for p in outs[0].rglob("*.csv"))
        assert any(str(f).startswith("metrics") for f in files)
        for f in files:
            assert (outs[0] / f).read_bytes() == (outs[1] / f).read_bytes(), f
        st["detail"] = f"{len(files)} CSV files identical"
        within_budget(start, 120)


def test_zero_shift_sanity_bound():
    with criterion("zero-shift benchmark: full method within 5 points of the all-labels supervised reference") as st:
        start = time.perf_counter()
        cfg = ExperimentConfig(benchmark=BenchmarkConfig("zero-shift", PRESETS["zero-shift"]), target="d0")
        doms = harness.build_benchmark(cfg)
        row, _ = harness.run_trials(cfg, doms, "UPLM")
        ref = float(np.mean([harness.supervised_reference(cfg, s, doms) for s in cfg.seeds]))
        st["detail"] = f"method {row.mean:.2f} vs reference {ref:.2f}"
        assert abs(row.mean - ref) <= 5.0
        within_budget(start, 300)
