import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from abmix import flow as fl
from abmix import ndiff as nd
from helpers import numeric_grad, rel_err


def make_flow(D=4, C=3, layers=4, seed=0, randomize=0.0, permute=True):
    store = nd.ParamStore()
    rng = np.random.default_rng(seed)
    flow = fl.FlowStack(store, "flow", D, C, rng, n_layers=layers, hidden=16, permute=permute)
    if randomize:
        for name, p in store.trainable():
            store.set(name, p.value + randomize * rng.normal(size=p.value.shape))
    return store, flow


def test_zero_conditioners_are_identity():
    _, flow = make_flow()
    rng = np.random.default_rng(1)
    th, c = rng.normal(size=(5, 4)), rng.normal(size=(5, 3))
    xi, ld = fl.flow_forward(flow, th, c)
    np.testing.assert_array_equal(xi.data, th)
    np.testing.assert_array_equal(ld.data, 0.0)
    np.testing.assert_array_equal(fl.flow_inverse(flow, th, c).data, th)


def test_hand_set_log_two_scale():
    store, flow = make_flow(D=4, layers=1, permute=False)
    layer = flow.layers[0]
    last = layer.net.layers[-1].name
    b = np.zeros(4)
    b[:2] = flow.layers[0].s_max * np.arctanh(math.log(2) / layer.s_max)
    store.set(f"{last}.b", b)
    th = np.array([[1.0, -2.0, 3.0, 0.5]])
    xi, ld = fl.flow_forward(flow, th, np.zeros((1, 3)))
    np.testing.assert_allclose(xi.data, [[1.0, -2.0, 6.0, 1.0]], atol=1e-12)
    assert ld.data[0] == pytest.approx(2 * math.log(2), abs=1e-12)


def numeric_jacobian(f, x, h=1e-5):
    return np.stack([numeric_grad(lambda v, k=k: f(v)[k], x, h) for k in range(len(x))])


@pytest.mark.parametrize("seed", range(5))
def test_logdet_matches_numeric_jacobian(seed):
    _, flow = make_flow(seed=seed, randomize=0.3)
    flow.set_standardization([0.5, -1, 0, 2], [2.0, 0.5, 1.0, 3.0])
    rng = np.random.default_rng(seed + 10)
    th, c = rng.normal(size=4), rng.normal(size=(1, 3))
    J = numeric_jacobian(lambda v: fl.flow_forward(flow, v[None], c)[0].data[0], th)
    sign, logabs = np.linalg.slogdet(J)
    _, ld = fl.flow_forward(flow, th[None], c)
    assert sign > 0
    assert abs(ld.data[0] - logabs) < 1e-4


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 6), st.integers(0, 10_000), st.floats(0.0, 0.5))
def test_invertibility_for_arbitrary_weights(D, seed, scale):
    # much larger weights push the stacked scales toward exp(12), where plain
    # float64 rounding alone exceeds the round-trip tolerance
    _, flow = make_flow(D=D, seed=seed, randomize=scale)
    rng = np.random.default_rng(seed)
    th, c = rng.normal(size=(8, D)) * 2, rng.normal(size=(8, 3))
    xi, ld = fl.flow_forward(flow, th, c)
    back = fl.flow_inverse(flow, xi.data, c).data
    np.testing.assert_allclose(back, th, atol=1e-6)
    # log-determinants of the two directions cancel
    y = nd.as_tensor(xi.data)
    total = np.zeros(8)
    for layer in reversed(flow.layers):
        y, ldi = layer.inverse(None, y, nd.Tensor(c))
        total += ldi.data
    np.testing.assert_allclose(ld.data + total, 0.0, atol=1e-9)


def test_batch_rows_are_independent():
    _, flow = make_flow(randomize=0.3)
    rng = np.random.default_rng(2)
    th, c = rng.normal(size=(6, 4)), rng.normal(size=(6, 3))
    full = fl.flow_inverse(flow, th, c).data
    for i in range(6):
        np.testing.assert_allclose(fl.flow_inverse(flow, th[i:i + 1], c[i:i + 1]).data[0], full[i], atol=1e-14)


def test_identity_log_density():
    _, flow = make_flow(D=2)
    ld = fl.flow_log_density(flow, np.zeros((1, 2)), np.zeros((1, 3))).data[0]
    assert abs(ld - (-math.log(2 * math.pi))) <= 1e-12
    x = np.random.default_rng(3).normal(size=(10, 2))
    np.testing.assert_allclose(fl.flow_log_density(flow, x, np.zeros((10, 3))).data,
                               stats.multivariate_normal(np.zeros(2)).logpdf(x), atol=1e-12)


def test_identity_npe_loss_expectation():
    _, flow = make_flow(D=2)
    x = np.random.default_rng(4).normal(size=(20_000, 2))
    loss = float(fl.npe_loss(flow, x, np.zeros((20_000, 3))).data)
    # -log N(x) = log(2 pi) + |x|^2 / 2, sd of |x|^2/2 is 1
    assert abs(loss - (1 + math.log(2 * math.pi))) < 4 / math.sqrt(20_000)


def test_npe_loss_invariant_to_duplication():
    _, flow = make_flow(randomize=0.2)
    rng = np.random.default_rng(5)
    th, c = rng.normal(size=(7, 4)), rng.normal(size=(7, 3))
    a = float(fl.npe_loss(flow, th, c).data)
    b = float(fl.npe_loss(flow, np.concatenate([th, th]), np.concatenate([c, c])).data)
    assert a == pytest.approx(b, abs=1e-14)


def test_npe_gradients_match_finite_differences():
    store, flow = make_flow(D=3, layers=2, randomize=0.3)
    rng = np.random.default_rng(6)
    th, c = rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
    g = nd.Graph()
    store.zero_grad()
    nd.grad_backward(g, fl.npe_loss(flow, th, c, g), store)

    def f(name, v):
        old = store[name].value.copy()
        store.set(name, v)
        out = float(fl.npe_loss(flow, th, c).data)
        store.set(name, old)
        return out

    for name, p in store.trainable():
        assert rel_err(p.grad, numeric_grad(lambda v, n=name: f(n, v), p.value.copy())) < 1e-4, name


def test_identity_flow_samples_are_standard_normal():
    _, flow = make_flow(D=2)
    d = fl.flow_sample(flow, np.zeros(3), 10_000, np.random.default_rng(7))
    assert d.unconstrained.shape == (10_000, 2)
    for k in range(2):
        assert stats.kstest(d.unconstrained[:, k], "norm").pvalue > 0.01


def test_sampling_determinism_and_conditioning():
    _, flow = make_flow(randomize=0.3)
    a = fl.flow_sample(flow, [0.1, 0.2, 0.3], 100, np.random.default_rng(8))
    b = fl.flow_sample(flow, [0.1, 0.2, 0.3], 100, np.random.default_rng(8))
    np.testing.assert_array_equal(a.unconstrained, b.unconstrained)
    c = fl.flow_sample(flow, [2.0, -1.0, 0.3], 100, np.random.default_rng(8))
    assert not np.allclose(a.unconstrained, c.unconstrained)


def test_log_q_ranks_where_draws_fall():
    # draws should be densest where the flow density is highest
    _, flow = make_flow(D=2, randomize=0.3)
    cond = np.array([0.3, -0.2, 0.5])
    d = fl.flow_sample(flow, cond, 40_000, np.random.default_rng(9))
    lo, hi = np.quantile(d.unconstrained, [0.02, 0.98], axis=0)
    edges = [np.linspace(lo[k], hi[k], 9) for k in range(2)]
    counts, _, _ = np.histogram2d(d.unconstrained[:, 0], d.unconstrained[:, 1], bins=edges)
    cx = [(e[:-1] + e[1:]) / 2 for e in edges]
    grid = np.array([[a, b] for a in cx[0] for b in cx[1]])
    dens = fl.flow_log_density(flow, grid, np.repeat(cond[None], len(grid), 0)).data
    rho = stats.spearmanr(counts.ravel(), dens).statistic
    assert rho > 0.9


def test_shape_errors():
    _, flow = make_flow()
    with pytest.raises(ValueError):
        fl.flow_forward(flow, np.zeros((2, 3)), np.zeros((2, 3)))
    with pytest.raises(ValueError):
        fl.flow_forward(flow, np.zeros((2, 4)), np.zeros((3, 3)))
    with pytest.raises(ValueError):
        flow.set_standardization(np.zeros(4), np.zeros(4))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nonfinite_output_reports_layer():
    store, flow = make_flow(D=2, layers=3, permute=False)
    last = flow.layers[1].net.layers[-1].name
    b = np.zeros(2)
    b[1] = 1e308
    store.set(f"{last}.b", b)
    with pytest.raises(nd.NumericError, match="layer 1"):
        fl.flow_forward(flow, np.ones((1, 2)) * 1e308, np.zeros((1, 3)))


def test_trained_flow_integrates_to_one():
    store, flow = make_flow(D=2, C=1, layers=4)
    rng = np.random.default_rng(10)
    L = np.array([[1.0, 0.0], [0.8, 0.5]])
    first = None
    for it in range(400):
        c = rng.uniform(-1, 1, size=(64, 1))
        th = rng.normal(size=(64, 2)) @ L.T + np.concatenate([c, c ** 2], axis=1)
        g = nd.Graph()
        loss = fl.npe_loss(flow, th, c, g)
        first = float(loss.data) if first is None else first
        nd.grad_backward(g, loss, store)
        nd.adam_step(store, 5e-3)
    assert float(loss.data) < first
    cond = np.array([[0.4]])
    x = np.linspace(-8, 8, 401)
    grid = np.array(np.meshgrid(x, x, indexing="ij")).reshape(2, -1).T
    dens = np.exp(fl.flow_log_density(flow, grid, np.repeat(cond, len(grid), 0)).data).reshape(401, 401)
    total = np.trapezoid(np.trapezoid(dens, x, axis=1), x)
    assert abs(total - 1) < 1e-2
