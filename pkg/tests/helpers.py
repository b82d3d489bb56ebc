"""Independent reference computations shared by the test modules."""

import itertools

import numpy as np

from abmix import ndiff as nd


def numeric_grad(f, x, h=1e-5):
    """Central finite differences of scalar ``f`` at array ``x``."""
    x = np.array(x, dtype=float)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f(x)
        x[i] = old - h
        fm = f(x)
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def rel_err(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b)) / max(1e-8, np.max(np.abs(a)) + np.max(np.abs(b))))


def check_op_grads(build, arrays, h=1e-5):
    """Compare backward gradients of ``build(*tensors) -> Tensor`` against
    finite differences for each input array.  The scalar objective is a
    fixed random projection of the output, so every output entry matters.
    Returns the worst relative error."""
    rng = np.random.default_rng(12345)
    out_shape = build(*[nd.Tensor(a) for a in arrays]).shape
    proj = rng.normal(size=out_shape)

    def scalar(*arrs):
        return float(np.sum(build(*[nd.Tensor(a) for a in arrs]).data * proj))

    g = nd.Graph()
    leaves = [g.input(a) for a in arrays]
    out = build(*leaves)
    loss = nd.sum(nd.mul(out, proj))
    grads = nd.grad_backward(g, loss)
    worst = 0.0
    for k, a in enumerate(arrays):
        def fk(x, k=k):
            arrs = list(arrays)
            arrs[k] = x
            return scalar(*arrs)

        num = numeric_grad(fk, a, h)
        ana = grads[leaves[k].node]
        ana = np.zeros_like(a) if ana is None else ana
        worst = max(worst, rel_err(ana, num))
    return worst


def naive_matmul(x, w):
    B, I = x.shape
    O = w.shape[1]
    out = np.zeros((B, O))
    for b in range(B):
        for o in range(O):
            acc = 0.0
            for i in range(I):
                acc += x[b, i] * w[i, o]
            out[b, o] = acc
    return out


def hmm_enumerate(init, trans, log_emis):
    """Brute-force marginalization over all K**N state paths.

    Returns (loglik, filtered, smoothed)."""
    N, K = log_emis.shape
    emis = np.exp(log_emis)
    joint_t = np.zeros((N, K))
    total = 0.0
    filt_num = np.zeros((N, K))
    filt_den = np.zeros(N)
    for path in itertools.product(range(K), repeat=N):
        w = init[path[0]] * emis[0, path[0]]
        prefix = [w]
        for t in range(1, N):
            w *= trans[path[t - 1], path[t]] * emis[t, path[t]]
            prefix.append(w)
        total += w
        for t in range(N):
            joint_t[t, path[t]] += w
        # filtering at t only needs the prefix; each prefix is counted
        # K**(N-1-t) times across full paths
        for t in range(N):
            mult = K ** (N - 1 - t)
            filt_num[t, path[t]] += prefix[t] / mult
            filt_den[t] += prefix[t] / mult
    return np.log(total), filt_num / filt_den[:, None], joint_t / total


def hmm_enumerate_future(init, trans, log_emis):
    """p(z_t | y_{t+1..N}) by brute force: drop emissions up to and including t."""
    N, K = log_emis.shape
    emis = np.exp(log_emis)
    out = np.zeros((N, K))
    for path in itertools.product(range(K), repeat=N):
        prior = init[path[0]]
        for t in range(1, N):
            prior *= trans[path[t - 1], path[t]]
        for t in range(N):
            w = prior
            for s in range(t + 1, N):
                w *= emis[s, path[s]]
            out[t, path[t]] += w
    return out / out.sum(-1, keepdims=True)


def random_hmm(rng, K, N):
    init = rng.dirichlet(np.ones(K))
    trans = rng.dirichlet(np.ones(K), size=K)
    log_emis = rng.normal(scale=2.0, size=(N, K))
    return init, trans, log_emis
