import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from ecgcode.grid_codec import Grid
from ecgcode.loss import (
    confidence_loss,
    confidence_loss_grad,
    grid_loss,
    grid_loss_grad,
    start_end_loss,
    start_end_loss_grad,
    torch_grid_loss,
)


def cl_oracle(pc, tc):
    d = pc - tc
    return 0.0 if abs(d) < 0.25 else d * d


def sel_oracle(ps, pe, ts, te, tc):
    ss = (ps - ts) ** 2 + (pe - te) ** 2
    return ss, (0.0 if ss < 0.15 else ss * tc)


@pytest.mark.parametrize("pc, tc, expected", [(0.9, 1.0, 0.0), (0.5, 1.0, 0.25), (0.3, 0.0, 0.09)])
def test_confidence_examples(pc, tc, expected):
    assert abs(confidence_loss(pc, tc) - expected) < 1e-12


def test_start_end_examples():
    assert start_end_loss(0.2, 0.8, 0.2, 0.8, 1.0) == (0.0, 0.0)
    ss, sel = start_end_loss(0.5, 0.9, 0.2, 0.5, 1.0)
    assert abs(ss - 0.25) < 1e-12 and abs(sel - 0.25) < 1e-12
    ss, sel = start_end_loss(0.5, 0.9, 0.2, 0.5, 0.0)
    assert abs(ss - 0.25) < 1e-12 and sel == 0.0


def test_grid_loss_examples():
    eps = 0.01
    rng = np.random.default_rng(0)
    target = np.zeros((50, 3, 3))
    target[..., 0] = rng.integers(0, 2, (50, 3))
    target[..., 1] = target[..., 0] * 0.1
    target[..., 2] = target[..., 0] * 0.7
    pred = target.copy()
    pred[..., 0] = np.where(target[..., 0] > 0, 1 - eps, eps)
    assert grid_loss(Grid(pred), Grid(target)).total == 0.0

    one_pred = np.zeros((1, 3, 3))
    one_pred[0, 0] = (0.5, 0.5, 0.9)
    one_target = np.zeros((1, 3, 3))
    one_target[0, 0] = (1.0, 0.2, 0.5)
    one_pred = Grid(one_pred)
    res = grid_loss(one_pred, Grid(one_target))
    assert abs(res.total - 0.5) < 1e-12
    assert res.cells.cl[0, 0] == pytest.approx(0.25, abs=1e-12)
    assert res.cells.sel[0, 0] == pytest.approx(0.25, abs=1e-12)


def test_masked_class_contributes_nothing():
    rng = np.random.default_rng(1)
    pred = rng.uniform(0.01, 0.99, (20, 3, 3))
    target = np.zeros((20, 3, 3))
    target[..., 0] = rng.integers(0, 2, (20, 3))
    target[..., 1:] = rng.uniform(0, 1, (20, 3, 2))
    full = grid_loss(Grid(pred), Grid(target)).cells
    masked = grid_loss(Grid(pred), Grid(target, mask=[True, True, False])).total
    assert masked == pytest.approx(float(np.sum(full.cl[:, :2] + full.sel[:, :2])), abs=1e-12)
    # arbitrary T-class predictions leave the masked loss untouched
    pred2 = pred.copy()
    pred2[:, 2] = rng.uniform(0, 1, (20, 3))
    assert grid_loss(Grid(pred2), Grid(target, mask=[True, True, False])).total == masked


def test_shape_mismatch():
    with pytest.raises(ValueError):
        grid_loss(Grid(np.zeros((2, 3, 3))), Grid(np.zeros((3, 3, 3))))


def test_non_finite_rejected():
    with pytest.raises(ValueError):
        confidence_loss(float("nan"), 1.0)
    with pytest.raises(ValueError):
        start_end_loss(0.1, float("inf"), 0.0, 0.0, 1.0)


def test_threshold_uses_active_branch():
    assert confidence_loss(0.75, 1.0) == pytest.approx(0.0625)
    assert confidence_loss(0.25, 0.0) == 0.0625
    assert start_end_loss(0.0, 0.0, 0.0, np.sqrt(0.15), 1.0)[1] > 0


unit = st.floats(0, 1, allow_nan=False)


@settings(max_examples=300, deadline=None)
@given(unit, unit, unit, unit, unit, unit, st.sampled_from([0.0, 1.0]))
def test_loss_properties(pc, tc, ps, pe, ts, te, tc_bin):
    cl = confidence_loss(pc, tc)
    assert cl >= 0 and cl == confidence_loss(tc, pc)
    if abs(pc - tc) < 0.25:
        assert cl == 0.0
    ss, sel = start_end_loss(ps, pe, ts, te, tc_bin)
    assert ss >= 0 and sel >= 0
    if ss < 0.15:
        assert sel == 0.0
    elif tc_bin == 1.0:
        assert sel == ss
    else:
        assert sel == 0.0


def test_sel_monotone_and_linear():
    ss_grid = np.linspace(0, 2, 401)
    sel = np.array([start_end_loss(0.0, 0.0, 0.0, np.sqrt(v), 1.0)[1] for v in ss_grid])
    assert np.all(np.diff(sel) >= 0)
    for tc in (0.0, 0.3, 0.7, 1.0):
        assert start_end_loss(0.0, 0.0, 0.0, np.sqrt(0.5), tc)[1] == pytest.approx(0.5 * tc)


def test_vectorized_matches_scalar_oracle():
    rng = np.random.default_rng(7)
    pc, tc = rng.uniform(0, 1, 100_000), rng.integers(0, 2, 100_000).astype(float)
    expected = [cl_oracle(a, b) for a, b in zip(pc, tc)]
    np.testing.assert_allclose(confidence_loss(pc, tc), expected, rtol=0, atol=1e-15)


def test_additive_over_partitions():
    rng = np.random.default_rng(3)
    pred = rng.uniform(0, 1, (30, 3, 3))
    target = np.zeros((30, 3, 3))
    target[..., 0] = rng.integers(0, 2, (30, 3))
    target[..., 1:] = rng.uniform(0, 1, (30, 3, 2))
    whole = grid_loss(Grid(pred), Grid(target)).total
    parts = sum(grid_loss(Grid(pred[s]), Grid(target[s])).total for s in (slice(0, 7), slice(7, 19), slice(19, 30)))
    assert whole == pytest.approx(parts, rel=1e-12)


def away_from_thresholds(p, t):
    diff = np.abs(p[..., 0] - t[..., 0])
    ss = (p[..., 1] - t[..., 1]) ** 2 + (p[..., 2] - t[..., 2]) ** 2
    return np.all((diff < 0.24) | (diff > 0.26)) and np.all((ss < 0.14) | (ss > 0.16))


def test_analytic_gradient_matches_finite_differences():
    rng = np.random.default_rng(11)
    h = 1e-6
    checked = 0
    while checked < 50:
        p = rng.uniform(0, 1, (4, 3, 3))
        t = np.zeros((4, 3, 3))
        t[..., 0] = rng.integers(0, 2, (4, 3))
        t[..., 1:] = rng.uniform(0, 1, (4, 3, 2))
        if not away_from_thresholds(p, t):
            continue
        checked += 1
        target = Grid(t)
        analytic = grid_loss_grad(Grid(p), target)
        numeric = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            up, down = p.copy(), p.copy()
            up[idx] += h
            down[idx] -= h
            numeric[idx] = (grid_loss(Grid(up), target).total - grid_loss(Grid(down), target).total) / (2 * h)
        scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
        assert np.max(np.abs(analytic - numeric) / scale) < 1e-4


def test_scalar_gradients():
    assert confidence_loss_grad(0.5, 1.0) == pytest.approx(-1.0)
    assert confidence_loss_grad(0.9, 1.0) == 0.0
    assert start_end_loss_grad(0.5, 0.9, 0.2, 0.5, 1.0) == pytest.approx((0.6, 0.8))
    assert start_end_loss_grad(0.5, 0.9, 0.2, 0.5, 0.0) == (0.0, 0.0)


def test_torch_loss_matches_numpy_reference():
    rng = np.random.default_rng(5)
    b = 3
    pred = rng.uniform(0, 1, (b, 10, 3, 3))
    target = np.zeros((b, 10, 3, 3))
    target[..., 0] = rng.integers(0, 2, (b, 10, 3))
    target[..., 1:] = rng.uniform(0, 1, (b, 10, 3, 2))
    mask = np.array([[1, 1, 1], [1, 0, 1], [0, 0, 1]], dtype=bool)
    expected = np.mean([grid_loss(Grid(pred[i]), Grid(target[i], mask[i])).total for i in range(b)])
    p = torch.tensor(pred, requires_grad=True)
    got = torch_grid_loss(p, torch.tensor(target), torch.tensor(mask))
    assert got.item() == pytest.approx(expected, rel=1e-12)
    got.backward()
    grads = np.stack([grid_loss_grad(Grid(pred[i]), Grid(target[i], mask[i])) for i in range(b)]) / b
    np.testing.assert_allclose(p.grad.numpy(), grads, atol=1e-12)
