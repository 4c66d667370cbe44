import zlib

import numpy as np
import pytest

from anchordet.loss import (OUT_DIM, LossConfig, PredictionGrid, focal_loss, laplace_nll_2d, laplace_nll_3d,
                            log_softmax, oracle_predictions, orientation_l1, total_loss)
from anchordet.targets import TargetGrid

from gradcheck import assert_grad_close, numeric_grad, random_grid

LOSSES = {
    "focal": lambda p, t, c: focal_loss(p, t, c)[:2],
    "laplace_2d": lambda p, t, c: laplace_nll_2d(p, t, c)[:2],
    "laplace_3d": lambda p, t, c: laplace_nll_3d(p, t, c)[:2],
    "orientation": lambda p, t, c: orientation_l1(p, t, c)[:2],
    "total": lambda p, t, c: total_loss(p, t, c)[:2],
}


@pytest.mark.parametrize("name", sorted(LOSSES))
@pytest.mark.parametrize("cfg", [LossConfig(), LossConfig(dd_laplace=False, supervise_2d=False, focal_gamma=0.5),
                                 LossConfig(focal_gamma=0.0, focal_alpha=1.0)])
def test_gradients_match_finite_differences(name, cfg):
    fn = LOSSES[name]
    rng = np.random.default_rng(zlib.crc32(f"{name}{cfg}".encode()))
    for _ in range(10):
        pred, t = random_grid(rng, n=int(rng.integers(2, 8)))
        _, g = fn(pred, t, cfg)
        num = numeric_grad(lambda: fn(pred, t, cfg)[0], pred.raw)
        assert_grad_close(g, num)


def test_gradient_through_b_min_clamp():
    rng = np.random.default_rng(9)
    pred, t = random_grid(rng)
    pred.raw[:, 8:12] = np.log(1e-3) - 1.0      # clamped: zero gradient wrt log-b
    _, g = laplace_nll_2d(pred, t)
    assert_grad_close(g, numeric_grad(lambda: laplace_nll_2d(pred, t)[0], pred.raw))
    assert np.all(g[t.fg, 8:12] == 0)


def test_focal_reduces_to_cross_entropy():
    rng = np.random.default_rng(1)
    pred, t = random_grid(rng, n=20)
    val, _ = focal_loss(pred, t, LossConfig(focal_gamma=0.0, focal_alpha=1.0))
    ce = -np.mean(log_softmax(pred.logits)[np.arange(20), t.cls])
    assert val == pytest.approx(ce, rel=1e-12)


def test_zero_cases():
    rng = np.random.default_rng(2)
    _, t = random_grid(rng)
    oracle = oracle_predictions(t, confidence=200.0)
    assert focal_loss(oracle, t)[0] == pytest.approx(0.0, abs=1e-12)
    assert orientation_l1(oracle, t)[0] == 0.0
    raw = oracle.raw.copy()
    raw[:, 8:12] = 0.0
    raw[:, 18:24] = 0.0
    p1 = PredictionGrid(raw)
    assert laplace_nll_2d(p1, t)[0] == 0.0
    assert laplace_nll_3d(p1, t)[0] == 0.0
    assert total_loss(p1, t)[0] == pytest.approx(0.0, abs=1e-12)


def test_empty_and_background_only():
    empty = TargetGrid(*(np.zeros(0, np.int64) for _ in range(5)), np.zeros((0, 4)), np.zeros((0, 6)),
                       np.zeros((0, 2)))
    p = PredictionGrid(np.zeros((0, OUT_DIM)))
    for fn in (focal_loss, laplace_nll_2d, laplace_nll_3d, orientation_l1):
        assert fn(p, empty)[0] == 0.0
    rng = np.random.default_rng(3)
    pred, t = random_grid(rng, fg_frac=0.0)
    t.cls[:] = 0
    assert laplace_nll_3d(pred, t)[0] == 0.0
    assert not laplace_nll_3d(pred, t)[1].any()


def test_orientation_example():
    _, t = random_grid(np.random.default_rng(4), n=1)
    t.cs[0] = (0.0, 1.0)
    raw = np.zeros((1, OUT_DIM))
    raw[0, 24:26] = (1.0, 0.0)
    assert orientation_l1(PredictionGrid(raw), t)[0] == pytest.approx(2.0)


def test_laplace_stationary_at_abs_residual():
    _, t = random_grid(np.random.default_rng(5), n=1)
    t.t2d[0] = (0, 0, 0, 0)
    e = 0.37
    raw = np.zeros((1, OUT_DIM))
    raw[0, 4:8] = e
    vals = []
    grid = np.linspace(np.log(e) - 0.5, np.log(e) + 0.5, 101)
    for lb in grid:
        raw[0, 8:12] = lb
        vals.append(laplace_nll_2d(PredictionGrid(raw), t)[0])
    assert grid[int(np.argmin(vals))] == pytest.approx(np.log(e), abs=0.011)
    raw[0, 8:12] = np.log(e)
    assert laplace_nll_2d(PredictionGrid(raw), t)[0] == pytest.approx(4 * (1 + np.log(e)))


def test_permutation_invariance_and_total_sum():
    rng = np.random.default_rng(6)
    pred, t = random_grid(rng, n=12)
    perm = rng.permutation(12)
    for fn in (focal_loss, laplace_nll_2d, laplace_nll_3d, orientation_l1):
        assert fn(pred.take(perm), t.take(perm))[0] == pytest.approx(fn(pred, t)[0], rel=1e-12)
    total, _, parts = total_loss(pred, t)
    assert total == parts["class"] + parts["2d"] + parts["3d"]
    assert parts["3d"] == pytest.approx(laplace_nll_3d(pred, t)[0] + orientation_l1(pred, t)[0])


def test_prediction_grid_invariants():
    rng = np.random.default_rng(7)
    p = PredictionGrid(rng.normal(0, 5, (30, OUT_DIM)))
    np.testing.assert_allclose(p.probs.sum(axis=1), 1.0, atol=1e-6)
    assert (p.b2d >= p.b_min).all() and (p.b3d >= p.b_min).all()
    with pytest.raises(ValueError):
        PredictionGrid(np.zeros((3, 5)))


def test_config_invariants():
    for kw in ({"focal_gamma": -1}, {"focal_alpha": 0}, {"focal_alpha": 1.5}, {"b_min": 0}):
        with pytest.raises(ValueError):
            LossConfig(**kw)
