"""Central finite differences for the manual backward passes (float64, h = 1e-5)."""
import numpy as np

from mibminet import nn_ops as ops

H = 1e-5


def numeric_grad(f, x, h=H):
    """d f / d x for scalar ``f``; perturbs ``x`` in place and restores it."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def rel_error(a, b) -> float:
    """Norm-wise relative error; exact zeros on both sides count as agreement."""
    denom = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if denom == 0 else float(np.linalg.norm(a - b) / denom)


def _away_from_zero(rng, shape, margin=1e-2):
    x = rng.standard_normal(shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * margin * 2, x)


def case_spatial(rng):
    b, c, k, t = rng.integers(1, 4), rng.integers(1, 5), rng.integers(1, 5), rng.integers(2, 10)
    x, w = rng.standard_normal((b, c, t)), rng.standard_normal((k, c))
    r = rng.standard_normal((b, k, t))
    loss = lambda: float(np.sum(ops.spatial_conv_forward(x, w) * r))
    gx, gw = ops.spatial_conv_backward(x, w, r)
    return [(gx, x, loss), (gw, w, loss)]


def case_pointwise(rng):
    b, k, t = rng.integers(1, 4), rng.integers(1, 5), rng.integers(2, 10)
    x, w = rng.standard_normal((b, k, t)), rng.standard_normal((k, k))
    r = rng.standard_normal((b, k, t))
    loss = lambda: float(np.sum(ops.pointwise_conv_forward(x, w) * r))
    gx, gw = ops.pointwise_conv_backward(x, w, r)
    return [(gx, x, loss), (gw, w, loss)]


def case_temporal(rng):
    b, k, kl, t = rng.integers(1, 3), rng.integers(1, 4), rng.integers(1, 8), rng.integers(4, 16)
    x, w = rng.standard_normal((b, k, t)), rng.standard_normal((k, kl))
    r = rng.standard_normal((b, k, t))
    loss = lambda: float(np.sum(ops.temporal_depthwise_forward(x, w) * r))
    gx, gw = ops.temporal_depthwise_backward(x, w, r)
    return [(gx, x, loss), (gw, w, loss)]


def case_relu(rng):
    x = _away_from_zero(rng, (rng.integers(1, 4), rng.integers(1, 10)))
    r = rng.standard_normal(x.shape)
    loss = lambda: float(np.sum(ops.relu(x) * r))
    return [(ops.relu_backward(x, r), x, loss)]


def case_pool(rng):
    k = int(rng.integers(1, 5))
    x = rng.standard_normal((rng.integers(1, 4), rng.integers(k, 5 * k)))
    out_shape = ops.avg_pool(x, k).shape
    r = rng.standard_normal(out_shape)
    loss = lambda: float(np.sum(ops.avg_pool(x, k) * r))
    return [(ops.avg_pool_backward(x.shape, r, k), x, loss)]


def case_dense(rng):
    b, i, o = rng.integers(1, 4), rng.integers(1, 8), rng.integers(1, 5)
    x, w, bias = rng.standard_normal((b, i)), rng.standard_normal((o, i)), rng.standard_normal(o)
    r = rng.standard_normal((b, o))
    loss = lambda: float(np.sum(ops.fully_connected(x, w, bias) * r))
    gx, gw, gb = ops.fully_connected_backward(x, w, r)
    return [(gx, x, loss), (gw, w, loss), (gb, bias, loss)]


def case_softmax_ce(rng):
    b, n = rng.integers(1, 5), rng.integers(2, 6)
    z = rng.standard_normal((b, n)) * 3
    y = rng.integers(0, n, b)
    loss = lambda: ops.softmax_cross_entropy(z, y)[0]
    return [(ops.softmax_cross_entropy(z, y)[1], z, loss)]


def _case_bn(rng, mode):
    b, f, t = rng.integers(2, 4), rng.integers(1, 4), rng.integers(2, 8)
    x = rng.standard_normal((b, f, t)) * 2 + 1
    p = ops.BatchNormParams(rng.uniform(0.5, 2, f), rng.standard_normal(f),
                            rng.standard_normal(f), rng.uniform(0.5, 2, f))
    p.momentum = 0.0  # keep running statistics fixed across repeated forwards
    r = rng.standard_normal((b, f, t))
    loss = lambda: float(np.sum(ops.batchnorm_forward(x, p, mode)[0] * r))
    _, cache = ops.batchnorm_forward(x, p, mode)
    gx, gg, gb = ops.batchnorm_backward(cache, p, r)
    return [(gx, x, loss), (gg, p.gamma, loss), (gb, p.beta, loss)]


def case_bn_train(rng):
    return _case_bn(rng, "train")


def case_bn_infer(rng):
    return _case_bn(rng, "infer")


CASES = {
    "spatial": case_spatial, "pointwise": case_pointwise, "temporal": case_temporal,
    "relu": case_relu, "avg_pool": case_pool, "dense": case_dense, "softmax_ce": case_softmax_ce,
    "batchnorm_train": case_bn_train, "batchnorm_infer": case_bn_infer,
}


def worst_error(case, rng) -> float:
    worst = 0.0
    for analytic, var, loss in case(rng):
        worst = max(worst, rel_error(analytic, numeric_grad(loss, var)))
    return worst
