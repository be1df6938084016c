"""Hypothesis property tests across modules."""

from __future__ import annotations

import numpy as np
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import array_shapes, arrays

from diican import autodiff as ad
from diican.autodiff import Tensor, backward
from diican.conv import conv2d_grouped
from diican.dataset import CycleRecord, Phase
from diican.features import apply_minmax, compute_soc_series, fit_minmax, invert_minmax, resample_curve_by_capacity
from diican.metrics import evaluate_metrics
from diican.model import augru_forward, gru_forward

from oracles import naive_conv2d

finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)
unit = st.floats(-1, 1, allow_nan=False, allow_infinity=False)


@given(arrays(np.float64, array_shapes(min_dims=1, max_dims=3, max_side=4), elements=unit), st.data())
def test_unbroadcast_recovers_operand_shape(a, data):
    # drop some leading dims and squash others to 1
    k = data.draw(st.integers(0, a.ndim))
    shape = tuple(1 if data.draw(st.booleans()) else s for s in a.shape[k:])
    b = Tensor(np.ones(shape), requires_grad=True)
    x = Tensor(a, requires_grad=True)
    backward((x * b).sum())
    assert b.grad.shape == shape
    np.testing.assert_allclose(b.grad.sum(), a.sum(), atol=1e-9)
    np.testing.assert_array_equal(x.grad, np.broadcast_to(np.ones(shape), a.shape))


@given(arrays(np.float64, (2, 5), elements=unit), arrays(np.float64, (2, 5), elements=unit))
def test_add_gradient_is_linear(a, b):
    x, y = Tensor(a, requires_grad=True), Tensor(b, requires_grad=True)
    backward((x + y).sum())
    assert np.all(x.grad == 1) and np.all(y.grad == 1)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 3), st.integers(1, 2), st.integers(1, 2), st.integers(1, 3), st.integers(1, 2),
       st.integers(0, 1), st.integers(0, 2 ** 31 - 1))
def test_grouped_conv_matches_loops(groups, cg, og, k, stride, pad, seed):
    rng = np.random.default_rng(seed)
    x = rng.uniform(-1, 1, (1, groups * cg, k + 3, 2))
    w = rng.uniform(-1, 1, (groups * og, cg, k, 1))
    got = conv2d_grouped(Tensor(x), Tensor(w), stride=(stride, 1), padding=(pad, 0), groups=groups).data
    want = naive_conv2d(x, w, None, (stride, 1), (pad, 0), groups)
    assert np.max(np.abs(got - want)) <= 1e-12


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 40), st.floats(0.1, 10.0), st.integers(0, 2 ** 31 - 1))
def test_resample_invariant_under_time_rescaling(n, scale, seed):
    rng = np.random.default_rng(seed)
    t = np.cumsum(rng.uniform(0.5, 2.0, n))
    i = rng.uniform(0.5, 2.0, n)
    v, temp = rng.uniform(3, 4, n), rng.uniform(20, 30, n)
    a = resample_curve_by_capacity(Phase(t, v, i, temp), 16)
    b = resample_curve_by_capacity(Phase(t * scale, v, i / scale, temp), 16)
    np.testing.assert_allclose(a, b, rtol=1e-9, atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 60), st.integers(0, 2 ** 31 - 1))
def test_soc_monotone_for_one_signed_current(n, seed):
    rng = np.random.default_rng(seed)
    t = np.cumsum(rng.uniform(0.1, 3.0, n))
    d = Phase(t, np.full(n, 3.5), -rng.uniform(0.1, 2.0, n), np.full(n, 25.0))
    soc = compute_soc_series(CycleRecord(0, d, d, 1.0))
    assert soc[0] == 1.0 and soc[-1] == 0.0
    assert np.all(np.diff(soc) <= 0)


@given(arrays(np.float64, st.tuples(st.integers(2, 20), st.integers(1, 4)), elements=finite))
def test_minmax_round_trip(x):
    lo, hi = np.min(x, axis=0), np.max(x, axis=0)
    if np.any(hi - lo < 1e-6):
        return
    lo, hi = fit_minmax(x, axis=0)
    y = apply_minmax(x, lo, hi)
    assert np.all((y >= -1e-12) & (y <= 1 + 1e-12))
    np.testing.assert_allclose(invert_minmax(y, lo, hi), x, atol=1e-9 * (1 + np.abs(x).max()))


@given(st.lists(st.floats(0.1, 100), min_size=2, max_size=30), st.data())
def test_metric_relations(y, data):
    y = np.array(y)
    noise = np.array(data.draw(st.lists(st.floats(-5, 5), min_size=len(y), max_size=len(y))))
    y_hat = y + noise
    if np.all(y == y[0]):
        return
    m = evaluate_metrics(y, y_hat, conventional_r2=True)
    assert 0 <= m.mae <= m.rmse + 1e-12
    assert m.r2 <= 1.0
    assert m.mape >= 0


@settings(max_examples=25, deadline=None, suppress_health_check=[HealthCheck.too_slow])
@given(st.integers(1, 5), st.integers(1, 4), st.integers(1, 4), st.integers(0, 2 ** 31 - 1))
def test_augru_with_unit_attention_is_gru(steps, n_in, hidden, seed):
    rng = np.random.default_rng(seed)
    p = {}
    for g in ("r", "z", "h"):
        p[f"g.W_{g}h"] = Tensor(rng.normal(size=(hidden, hidden)))
        p[f"g.W_{g}n"] = Tensor(rng.normal(size=(hidden, n_in)))
        p[f"g.b_{g}"] = Tensor(rng.normal(size=hidden))
    x = Tensor(rng.normal(size=(2, steps, n_in)))
    h0 = Tensor(rng.normal(size=(2, hidden)))
    a = gru_forward(p, "g", x, h0)[-1].data
    b = augru_forward(p, "g", x, [1.0] * steps, h0).data
    assert np.max(np.abs(a - b)) <= 1e-12


@given(arrays(np.float64, st.integers(1, 50), elements=st.floats(-30, 30)))
def test_sigmoid_range_and_symmetry(x):
    s = ad.sigmoid(Tensor(x)).data
    assert np.all((s >= 0) & (s <= 1))
    np.testing.assert_allclose(s + ad.sigmoid(Tensor(-x)).data, 1.0, atol=1e-15)
