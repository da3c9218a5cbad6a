from __future__ import annotations

import numpy as np
import pytest

from oracles import naive_point_adjusted, plain_neg_elbo
from servescale.detector import (LOAD_DIMS, BetaController, LabeledDataset, NotCalibrated, NotTrained, VaeConfig,
                                 VaeDetector, calibrate_threshold, detect, detect_many, evaluate_point_adjusted,
                                 init_params, kl_gaussian, load_detector, loss_and_grads, normalize,
                                 save_detector, score, score_many, synthetic_benchmark, train)


@pytest.fixture(scope="module")
def bench():
    return synthetic_benchmark(seed=3, n_train=4000, n_test=4000, n_calib=6000)


@pytest.fixture(scope="module")
def det(bench):
    d = train(LabeledDataset(bench.train_rows, bench.train_labels), VaeConfig(epochs=30))
    return calibrate_threshold(d, score_many(d, bench.calib_rows))


# -- normalization -----------------------------------------------------------


def test_normalize_properties(caplog):
    rng = np.random.default_rng(0)
    x = rng.normal(5, 3, (500, 4))
    z, stats = normalize(x)
    assert np.allclose(z.mean(axis=0), 0, atol=1e-9)
    z2, _ = normalize(z)
    assert np.allclose(z2, z, atol=1e-9)
    x[:, 2] = 7.0
    z, stats = normalize(x)
    assert stats.constant == (2,)
    assert np.all(z[:, 2] == 0)
    assert "constant" in caplog.text


def test_labels_must_be_signed():
    with pytest.raises(ValueError):
        LabeledDataset(np.zeros((3, 7)), np.array([1, 0, 1]))


# -- objective ---------------------------------------------------------------


def small_problem(seed=0):
    rng = np.random.default_rng(seed)
    p = init_params(7, 6, 3, rng)
    for k in p:
        p[k] = p[k] + rng.normal(0, 0.1, p[k].shape)
    x = rng.normal(0, 1, (3, 7))
    eps = rng.standard_normal((3, 3))
    return p, x, eps


def test_gradients_match_finite_differences():
    p, x, eps = small_problem()
    labels = np.array([1.0, -1.0, 1.0])
    _, g = loss_and_grads(p, x, labels, 0.7, eps, anomaly_cap=1e6)
    h = 1e-6
    for k, v in p.items():
        fd = np.zeros_like(v)
        for idx in np.ndindex(v.shape):
            orig = v[idx]
            v[idx] = orig + h
            up, _ = loss_and_grads(p, x, labels, 0.7, eps, anomaly_cap=1e6, need_grads=False)
            v[idx] = orig - h
            dn, _ = loss_and_grads(p, x, labels, 0.7, eps, anomaly_cap=1e6, need_grads=False)
            v[idx] = orig
            fd[idx] = (up - dn) / (2 * h)
        rel = np.linalg.norm(g[k] - fd) / max(np.linalg.norm(fd), 1e-12)
        assert rel <= 1e-4, k


def test_all_normal_loss_is_plain_elbo():
    p, x, eps = small_problem(1)
    loss, _ = loss_and_grads(p, x, np.ones(3), 1.0, eps, need_grads=False)
    assert loss == pytest.approx(plain_neg_elbo(p, x, eps), abs=1e-9)


def test_anomaly_rows_carry_no_kl():
    p, x, eps = small_problem(2)
    parts: dict = {}
    lab = np.array([-1.0, -1.0, -1.0])
    a, _ = loss_and_grads(p, x, lab, 0.0, eps, need_grads=False, parts=parts)
    b, _ = loss_and_grads(p, x, lab, 1.0, eps, need_grads=False)
    assert a == b
    assert np.all(parts["kl"] > 0)


def test_kl_closed_form():
    assert kl_gaussian(np.zeros((1, 3)), np.zeros((1, 3)))[0] == 0.0
    assert kl_gaussian(np.array([[1.0, 0, 0]]), np.zeros((1, 3)))[0] == pytest.approx(0.5)


def test_beta_stays_in_range():
    c = BetaController(2.0, beta_max=1.0)
    for kl in [10.0] * 500 + [0.0] * 500:
        assert 0.0 <= c.update(kl) <= 1.0


def test_training_elbo_trends_upward(det):
    h = np.asarray(det.history)
    ma = np.convolve(h, np.ones(100) / 100, mode="valid")
    assert ma[-1] > ma[0]
    tail = ma[len(ma) // 2 :]
    slope = np.polyfit(np.arange(tail.size), tail, 1)[0]
    # flat once converged; any decline is within minibatch noise
    assert slope * tail.size >= -0.05 * abs(ma[0] - ma[-1])


def test_training_needs_a_normal_row():
    with pytest.raises(ValueError):
        train(LabeledDataset(np.zeros((4, 7)), -np.ones(4)), VaeConfig(epochs=1))


# -- scoring -----------------------------------------------------------------


def test_untrained_and_uncalibrated():
    empty = VaeDetector({}, None, VaeConfig())
    with pytest.raises(NotTrained):
        score(empty, np.zeros(7))


def test_uncalibrated_detect(bench):
    d = train(LabeledDataset(bench.train_rows[:500], bench.train_labels[:500]), VaeConfig(epochs=1))
    with pytest.raises(NotCalibrated):
        detect(d, bench.calib_rows[0])


def test_outliers_outscore_normals(det, bench):
    rng = np.random.default_rng(8)
    std = bench.calib_rows.std(axis=0)
    normals = bench.calib_rows[rng.integers(0, len(bench.calib_rows), 500)]
    wins = 0
    for row in normals:
        # every metric 10 sigma off in the same direction
        out = row + 10 * std * rng.choice([-1, 1])
        wins += score(det, row) < score(det, out)
    assert wins / len(normals) >= 0.99


def test_held_out_false_positive_rate(det, bench):
    flags = np.array([v.is_anomaly for v in detect_many(det, bench.clean_rows)])
    assert flags.mean() <= 2 * 1e-3
    assert all(v.direction == "none" for v in detect_many(det, bench.clean_rows[:200]) if not v.is_anomaly)


def test_injected_directions(det, bench):
    std = bench.calib_rows.std(axis=0)
    base = bench.calib_rows.mean(axis=0)
    hi, lo = base.copy(), base.copy()
    hi[list(LOAD_DIMS)] += 5 * std[list(LOAD_DIMS)]
    lo[list(LOAD_DIMS)] -= 3 * std[list(LOAD_DIMS)]
    v_hi, v_lo = detect(det, hi), detect(det, lo)
    assert v_hi.is_anomaly and v_hi.direction == "overload" and v_hi.md > 0
    assert v_lo.is_anomaly and v_lo.direction == "underload" and v_lo.md < 0


def test_threshold_is_deterministic(bench, det):
    again = calibrate_threshold(det, score_many(det, bench.calib_rows))
    assert again.threshold == det.threshold


# -- evaluation --------------------------------------------------------------


def test_point_adjusted_rules(oracle):
    truth = np.zeros(30, bool)
    truth[10:21] = True
    pred = np.zeros(30, bool)
    pred[12] = True
    assert evaluate_point_adjusted(truth, pred) == (1.0, 1.0, 1.0)
    assert evaluate_point_adjusted(truth, np.zeros(30, bool))[1] == 0.0
    o = oracle["pr_case"]
    got = evaluate_point_adjusted(o["truth"], o["pred"])
    assert got == pytest.approx((o["precision"], o["recall"], o["f1"]), abs=1e-12)


def test_point_adjusted_matches_naive_on_random():
    rng = np.random.default_rng(11)
    for _ in range(200):
        truth = rng.random(80) < 0.3
        pred = rng.random(80) < 0.2
        assert evaluate_point_adjusted(truth, pred) == pytest.approx(naive_point_adjusted(truth, pred), abs=1e-12)


def test_length_mismatch():
    with pytest.raises(ValueError):
        evaluate_point_adjusted([1, 0], [1])


# -- checkpoints -------------------------------------------------------------


def test_checkpoint_round_trip_and_bytes(det, bench, tmp_path):
    save_detector(det, tmp_path / "a.npz")
    save_detector(det, tmp_path / "b.npz")
    assert (tmp_path / "a.npz").read_bytes() == (tmp_path / "b.npz").read_bytes()
    back = load_detector(tmp_path / "a.npz")
    assert back.threshold == det.threshold
    assert np.array_equal(score_many(back, bench.test_rows[:100]), score_many(det, bench.test_rows[:100]))


def test_training_is_seeded(bench):
    ds = LabeledDataset(bench.train_rows[:800], bench.train_labels[:800])
    a, b = train(ds, VaeConfig(epochs=3)), train(ds, VaeConfig(epochs=3))
    assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)


def test_missing_checkpoint(tmp_path):
    with pytest.raises(FileNotFoundError, match="nope"):
        load_detector(tmp_path / "nope.npz")
