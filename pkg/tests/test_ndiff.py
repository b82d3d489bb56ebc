import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from abmix import ndiff as nd
from abmix.layers import MLP, Recurrent
from helpers import check_op_grads, naive_matmul, numeric_grad, rel_err

T = nd.Tensor


def test_affine_identity_and_dot():
    out = nd.affine_apply(T([[1.0, 2.0]]), T(np.eye(2)), T([0.0, 0.0]))
    np.testing.assert_array_equal(out.data, [[1.0, 2.0]])
    out = nd.affine_apply(T([[1.0, 1.0]]), T([[2.0], [3.0]]), T([1.0]))
    np.testing.assert_array_equal(out.data, [[6.0]])


def test_affine_matches_naive_loop():
    rng = np.random.default_rng(0)
    x, w, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2)), rng.normal(size=2)
    out = nd.affine_apply(T(x), T(w), T(b)).data
    np.testing.assert_allclose(out, naive_matmul(x, w) + b, atol=1e-12, rtol=0)


def test_affine_shape_mismatch():
    with pytest.raises(ValueError):
        nd.affine_apply(T(np.ones((2, 3))), T(np.ones((2, 2))), T(np.zeros(2)))


def test_activations():
    np.testing.assert_array_equal(nd.relu(T([-1.0, 0.0, 2.0])).data, [0, 0, 2])
    np.testing.assert_allclose(nd.softmax(T([0.0, 0.0, 0.0])).data, [1 / 3] * 3, atol=1e-15)
    big = nd.softmax(T([1000.0, 0.0])).data
    assert np.all(np.isfinite(big))
    # extended precision oracle: exp(-1000) is far below float64 resolution
    import mpmath

    ref = 1 / (1 + mpmath.e ** (-1000))
    assert abs(big[0] - float(ref)) == 0.0 and big[1] == pytest.approx(float(mpmath.e ** (-1000)), abs=1e-300)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 5), st.integers(1, 6), st.integers(0, 10_000))
def test_softmax_rows_normalized(rows, cols, seed):
    x = np.random.default_rng(seed).normal(scale=20, size=(rows, cols))
    p = nd.softmax(T(x)).data
    assert np.all((p >= 0) & (p <= 1))
    np.testing.assert_allclose(p.sum(-1), 1.0, atol=1e-12)


def test_unknown_activation():
    with pytest.raises(ValueError):
        nd.activation_apply(T([1.0]), "swish")


OPS = {
    "add_bcast": (lambda a, b: a + b, [(3, 4), (4,)]),
    "sub_bcast": (lambda a, b: a - b, [(2, 3, 1), (3, 4)]),
    "mul_bcast": (lambda a, b: a * b, [(3, 4), (3, 1)]),
    "div": (lambda a, b: a / (nd.exp(b) + 1.0), [(3, 4), (3, 4)]),
    "exp": (nd.exp, [(2, 3)]),
    "log": (lambda a: nd.log(nd.exp(a) + 0.5), [(2, 3)]),
    "square": (nd.square, [(5,)]),
    "relu": (lambda a: nd.relu(a * 3.0 + 0.1), [(4, 3)]),
    "tanh": (nd.tanh, [(4, 3)]),
    "sigmoid": (nd.sigmoid, [(4, 3)]),
    "softplus": (nd.softplus, [(4, 3)]),
    "softmax": (nd.softmax, [(3, 5)]),
    "log_softmax": (nd.log_softmax, [(3, 5)]),
    "matmul": (nd.matmul, [(2, 3, 4), (4, 5)]),
    "affine": (nd.affine_apply, [(2, 3, 4), (4, 2), (2,)]),
    "transpose": (nd.transpose, [(2, 3, 4)]),
    "sum_axis": (lambda a: nd.sum(a, axis=1), [(2, 3, 4)]),
    "sum_all": (lambda a: nd.sum(a), [(2, 3)]),
    "mean_keep": (lambda a: nd.mean(a, axis=-1, keepdims=True), [(3, 4)]),
    "set_mean": (lambda a: nd.set_mean(a, np.array([[1, 1, 0], [1, 0, 0]]), axis=1), [(2, 3, 4)]),
    "reshape": (lambda a: nd.reshape(a, (6, 2)), [(3, 4)]),
    "broadcast": (lambda a: nd.broadcast_to(a, (3, 2, 4)), [(2, 1)]),
    "getitem_basic": (lambda a: a[:, 1, :], [(2, 3, 4)]),
    "getitem_fancy": (lambda a: a[:, np.array([2, 0, 2])], [(3, 4)]),
    "concat": (lambda a, b: nd.concat([a, b], axis=-1), [(2, 3), (2, 2)]),
    "stack": (lambda a, b: nd.stack([a, b], axis=1), [(2, 3), (2, 3)]),
    "recurrent": (nd.recurrent_step, [(3, 4), (3, 2), (2, 8), (4, 4), (4, 4), (8,)]),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_op_gradients_finite_differences(name):
    build, shapes = OPS[name]
    rng = np.random.default_rng(abs(hash(name)) % 2**32)
    arrays = [rng.normal(size=s) for s in shapes]
    assert check_op_grads(build, arrays) < 1e-4


def test_grad_sum_and_quadratic():
    store = nd.ParamStore()
    store.add("w", [1.0, -2.0, 0.5])
    g = nd.Graph()
    loss = nd.sum(g.param(store, "w"))
    nd.grad_backward(g, loss, store)
    np.testing.assert_array_equal(store["w"].grad, [1, 1, 1])

    store.zero_grad()
    x, t = np.array([0.3, 1.0, -2.0]), 0.7
    g = nd.Graph()
    r = nd.sum(g.param(store, "w") * x) - t
    nd.grad_backward(g, nd.square(r), store)
    w = store["w"].value
    np.testing.assert_allclose(store["w"].grad, 2 * (w @ x - t) * x, rtol=1e-14)


def test_unreachable_weight_gets_zero_grad_and_nonscalar_rejected():
    store = nd.ParamStore()
    store.add("a", [1.0, 2.0])
    store.add("b", [3.0])
    g = nd.Graph()
    loss = nd.sum(g.param(store, "a"))
    g.param(store, "b")
    nd.grad_backward(g, loss, store)
    np.testing.assert_array_equal(store["b"].grad, [0.0])
    g = nd.Graph()
    with pytest.raises(ValueError):
        nd.grad_backward(g, g.param(store, "a"), store)


def _mlp_ce_store(seed=0):
    rng = np.random.default_rng(seed)
    store = nd.ParamStore()
    net = MLP(store, "m", [3, 5, 4], rng, activation="tanh")
    x = rng.normal(size=(6, 3))
    onehot = np.eye(4)[rng.integers(0, 4, 6)]
    return store, net, x, onehot


def _ce(g, store, net, x, onehot):
    logp = nd.log_softmax(net(g, nd.Tensor(x)))
    return nd.mul(nd.sum(logp * onehot), -1.0 / len(x))


def test_mlp_softmax_cross_entropy_grads():
    store, net, x, onehot = _mlp_ce_store()
    g = nd.Graph()
    nd.grad_backward(g, _ce(g, store, net, x, onehot), store)
    for name in store:
        p = store[name]

        def f(v, p=p):
            old = p.value.copy()
            p.value[...] = v
            out = float(_ce(None, store, net, x, onehot).data)
            p.value[...] = old
            return out

        assert rel_err(p.grad, numeric_grad(f, p.value.copy())) < 1e-4, name


def test_backward_is_linear():
    store, net, x, onehot = _mlp_ce_store(3)
    grads = {}
    for tag, (a, b) in {"l1": (1, 0), "l2": (0, 1), "mix": (2.5, -0.7)}.items():
        store.zero_grad()
        g = nd.Graph()
        l1 = _ce(g, store, net, x, onehot)
        l2 = nd.sum(nd.square(net(g, nd.Tensor(x))))
        nd.grad_backward(g, l1 * float(a) + l2 * float(b), store)
        grads[tag] = {k: store[k].grad.copy() for k in store}
    for k in grads["mix"]:
        np.testing.assert_allclose(grads["mix"][k], 2.5 * grads["l1"][k] - 0.7 * grads["l2"][k], atol=1e-12)


def test_recurrent_zero_weights_fixed_point_and_unroll():
    store = nd.ParamStore()
    cell = Recurrent(store, "r", 3, 4, np.random.default_rng(0))
    for k in store:
        store[k].value[...] = 0.0
    h = cell.step(None, nd.Tensor(np.zeros((2, 4))), nd.Tensor(np.ones((2, 3))))
    np.testing.assert_array_equal(h.data, 0.0)

    cell = Recurrent(nd.ParamStore(), "r", 3, 4, np.random.default_rng(1))
    x = np.random.default_rng(2).normal(size=(2, 1, 3))
    one = cell.unroll(None, nd.Tensor(x))[-1].data
    step = cell.step(None, nd.Tensor(np.zeros((2, 4))), nd.Tensor(x[:, 0])).data
    np.testing.assert_array_equal(one, step)


def test_recurrent_sequence_gradients():
    rng = np.random.default_rng(5)
    store = nd.ParamStore()
    cell = Recurrent(store, "r", 2, 3, rng)
    x = rng.normal(size=(2, 5, 2))
    proj = rng.normal(size=(2, 3))

    def loss(g):
        return nd.sum(cell.unroll(g, nd.Tensor(x))[-1] * proj)

    g = nd.Graph()
    nd.grad_backward(g, loss(g), store)
    for name in store:
        p = store[name]

        def f(v, p=p):
            old = p.value.copy()
            p.value[...] = v
            out = float(loss(None).data)
            p.value[...] = old
            return out

        assert rel_err(p.grad, numeric_grad(f, p.value.copy())) < 1e-4, name


def _adam_scalar(g, t, lr, b1=0.9, b2=0.999, eps=1e-8, w=0.0):
    m = v = 0.0
    for k in range(1, t + 1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        w -= lr * (m / (1 - b1**k)) / (np.sqrt(v / (1 - b2**k)) + eps)
    return w


def test_adam_zero_grad_and_reference():
    store = nd.ParamStore()
    store.add("w", [1.5])
    nd.adam_step(store, 0.1)
    assert store["w"].value[0] == 1.5 and store.step_count == 1

    store = nd.ParamStore()
    store.add("w", [0.0])
    for _ in range(7):
        store["w"].grad[...] = 0.3
        nd.adam_step(store, 0.01)
    assert store["w"].value[0] == pytest.approx(_adam_scalar(0.3, 7, 0.01), abs=1e-15)
    assert np.all(store["w"].grad == 0)


def test_adam_converges_on_quadratic():
    store = nd.ParamStore()
    store.add("w", [0.0])
    for _ in range(500):
        g = nd.Graph()
        nd.grad_backward(g, nd.sum(nd.square(g.param(store, "w") - 3.0)), store)
        nd.adam_step(store, 0.05)
    assert abs(store["w"].value[0] - 3.0) < 1e-2


def test_adam_rejects_bad_lr():
    with pytest.raises(ValueError):
        nd.adam_step(nd.ParamStore(), 0.0)


def test_set_mean_bitwise_permutation_invariant():
    rng = np.random.default_rng(9)
    x = rng.normal(size=(1, 4, 3)) * 1e3 + rng.normal(size=(1, 4, 3))
    mask = np.ones((1, 4))
    base = nd.set_mean(nd.Tensor(x), mask, axis=1).data
    for perm in ([3, 2, 1, 0], [1, 3, 0, 2], [2, 0, 3, 1]):
        assert np.array_equal(nd.set_mean(nd.Tensor(x[:, perm]), mask, axis=1).data, base)
    with pytest.raises(ValueError):
        nd.set_mean(nd.Tensor(x), np.zeros((1, 4)), axis=1)


def test_checkpoint_roundtrip_bit_exact(tmp_path):
    rng = np.random.default_rng(1)
    store = nd.ParamStore(step_count=17)
    store.add("a", rng.normal(size=(3, 4)))
    store.add("b.c", np.array([np.pi, -0.0, 1e-310, 1e300]))
    store.add("perm", [2.0, 0.0, 1.0], trainable=False)
    path = tmp_path / "x.ckpt"
    nd.save_checkpoint(store, path, meta={"k": 1})
    back, meta = nd.load_checkpoint(path)
    assert meta == {"k": 1} and back.step_count == 17 and list(back) == list(store)
    for k in store:
        assert back[k].value.tobytes() == store[k].value.tobytes()
        assert back[k].trainable == store[k].trainable
    path2 = tmp_path / "y.ckpt"
    nd.save_checkpoint(back, path2, meta={"k": 1})
    assert path.read_bytes() == path2.read_bytes()


def test_duplicate_param_name():
    store = nd.ParamStore()
    store.add("w", [1.0])
    with pytest.raises(KeyError):
        store.add("w", [2.0])
