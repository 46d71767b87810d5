"""Random gradient-check configurations for every differentiable op."""

import numpy as np

from proxytransfer import tensorcore as tc
from proxytransfer.tensorcore import Tensor


def weighted_sum(out):
    """Scalar loss touching every output element with its own fixed weight."""
    w = np.random.default_rng([7, *out.shape]).normal(size=out.shape)
    return tc.tsum(out * Tensor(w))


def rng_for(op, i):
    return np.random.default_rng([sum(map(ord, op)), i])


def _shape(rng, ndim=2, lo=1, hi=5):
    return tuple(int(n) for n in rng.integers(lo, hi, size=ndim))


def _positive(rng, shape):
    return rng.uniform(0.5, 2.0, size=shape)


def _away_from_zero(rng, shape):
    return rng.uniform(0.1, 1.0, size=shape) * rng.choice([-1.0, 1.0], size=shape)


def case_add(rng):
    s = _shape(rng)
    return lambda a, b: weighted_sum(a + b), [rng.normal(size=s), rng.normal(size=(1, s[1]))]


def case_sub(rng):
    s = _shape(rng)
    return lambda a, b: weighted_sum(a - b), [rng.normal(size=s), rng.normal(size=s[1:])]


def case_mul(rng):
    s = _shape(rng)
    return lambda a, b: weighted_sum(a * b), [rng.normal(size=s), rng.normal(size=(s[0], 1))]


def case_div(rng):
    s = _shape(rng)
    return lambda a, b: weighted_sum(a / b), [rng.normal(size=s), _positive(rng, s)]


def case_neg(rng):
    return lambda a: weighted_sum(-a), [rng.normal(size=_shape(rng))]


def case_power(rng):
    p = float(rng.choice([2.0, 3.0, 0.5, -1.0]))
    return lambda a: weighted_sum(tc.power(a, p)), [_positive(rng, _shape(rng))]


def case_exp(rng):
    return lambda a: weighted_sum(tc.exp(a)), [rng.normal(size=_shape(rng))]


def case_log(rng):
    return lambda a: weighted_sum(tc.log(a)), [_positive(rng, _shape(rng))]


def case_sqrt(rng):
    return lambda a: weighted_sum(tc.sqrt(a)), [_positive(rng, _shape(rng))]


def case_relu(rng):
    return lambda a: weighted_sum(tc.relu(a)), [_away_from_zero(rng, _shape(rng))]


def case_sum(rng):
    s = _shape(rng, 3)
    axis = [None, 0, 1, 2, (0, 2)][int(rng.integers(5))]
    keep = bool(rng.integers(2))
    return lambda a: weighted_sum(tc.tsum(a, axis=axis, keepdims=keep)), [rng.normal(size=s)]


def case_mean(rng):
    s = _shape(rng, 3)
    axis = [None, 0, 1, 2, (1, 2)][int(rng.integers(5))]
    return lambda a: weighted_sum(tc.mean(a, axis=axis)), [rng.normal(size=s)]


def case_reshape(rng):
    s = _shape(rng, 2)
    return lambda a: weighted_sum(tc.reshape(a, (s[1], s[0]))), [rng.normal(size=s)]


def case_transpose(rng):
    s = _shape(rng, 3)
    axes = tuple(int(i) for i in rng.permutation(3))
    return lambda a: weighted_sum(tc.transpose(a, axes)), [rng.normal(size=s)]


def case_take(rng):
    s = (int(rng.integers(3, 6)), int(rng.integers(1, 4)))
    idx = rng.integers(0, s[0], size=int(rng.integers(1, 7)))  # repeats exercise scatter-add
    return lambda a: weighted_sum(a[idx]), [rng.normal(size=s)]


def case_matmul(rng):
    m, k, n = _shape(rng, 3)
    return lambda a, b: weighted_sum(tc.matmul(a, b)), [rng.normal(size=(m, k)), rng.normal(size=(k, n))]


def case_l2_normalize(rng):
    s = _shape(rng, 2, 1, 5)
    axis = int(rng.integers(2))
    return lambda a: weighted_sum(tc.l2_normalize(a, axis=axis)), [rng.normal(size=s) + 0.1]


def case_euclidean(rng):
    s = _shape(rng, 2)
    return lambda a, b: weighted_sum(tc.euclidean_distance(a, b)), [rng.normal(size=s), rng.normal(size=s)]


def case_pairwise(rng):
    n, m, d = _shape(rng, 3)
    squared = bool(rng.integers(2))
    return (lambda a, b: weighted_sum(tc.pairwise_distances(a, b, squared=squared)),
            [rng.normal(size=(n, d)), rng.normal(size=(m, d))])


def case_logsumexp(rng):
    s = (int(rng.integers(1, 5)), int(rng.integers(2, 6)))
    mask = rng.random(s) < 0.7
    mask[:, 0] = True
    use_mask = bool(rng.integers(2))
    return (lambda a: weighted_sum(tc.logsumexp(a, axis=1, mask=mask if use_mask else None)),
            [3 * rng.normal(size=s)])


def case_log_softmax(rng):
    s = _shape(rng, 2, 1, 6)
    axis = int(rng.integers(2))
    return lambda a: weighted_sum(tc.log_softmax(a, axis=axis)), [3 * rng.normal(size=s)]


def case_conv2d(rng):
    n, c, o = int(rng.integers(1, 3)), int(rng.integers(1, 3)), int(rng.integers(1, 3))
    k = int(rng.choice([1, 3]))
    stride, pad = int(rng.integers(1, 3)), int(rng.integers(0, 2))
    h = int(rng.integers(k, 7))
    return (lambda x, w: weighted_sum(tc.conv2d(x, w, stride=stride, padding=pad)),
            [rng.normal(size=(n, c, h, h + 1)), rng.normal(size=(o, c, k, k))])


def case_composite(rng):
    """matmul, add, relu, l2_normalize, euclidean_distance, log, exp in one graph."""
    n, k, d = int(rng.integers(2, 4)), int(rng.integers(2, 4)), int(rng.integers(2, 4))

    def f(x, w, b, t):
        h = tc.relu(tc.matmul(x, w) + b)
        e = tc.l2_normalize(h + 1.0, axis=1)
        dist = tc.euclidean_distance(e, tc.l2_normalize(t, axis=1))
        return tc.tsum(tc.log(tc.exp(dist) + 1.0))

    return f, [rng.normal(size=(n, k)), rng.normal(size=(k, d)), rng.normal(size=d), rng.normal(size=(n, d))]


CASES = {name[5:]: fn for name, fn in globals().items() if name.startswith("case_")}


def case_proxynca(rng, squared=False):
    from proxytransfer.losses import ProxySet, proxynca_loss

    b, c, d = int(rng.integers(1, 6)), int(rng.integers(2, 7)), int(rng.integers(2, 8))
    labels = rng.integers(0, c, size=b)
    return (lambda emb, prox: proxynca_loss(emb, labels, ProxySet(prox), squared_distance=squared).value,
            [rng.normal(size=(b, d)), rng.normal(size=(c, d))])


def case_proxynca_squared(rng):
    return case_proxynca(rng, squared=True)


def case_cross_entropy(rng):
    from proxytransfer.losses import cross_entropy_loss

    b, c = int(rng.integers(1, 6)), int(rng.integers(2, 9))
    labels = rng.integers(0, c, size=b)
    return lambda z: cross_entropy_loss(z, labels).value, [2 * rng.normal(size=(b, c))]


def case_backbone(rng):
    """Whole residual backbone (stem, affine, relu, blocks, shortcut, pooling) w.r.t. input and params."""
    from proxytransfer.models import ArchSpec, Backbone, param_layout

    arch = ArchSpec((1, 1), (2, 3), stem_width=int(rng.integers(1, 3)))
    layout = param_layout(arch)
    params = [rng.normal(size=shape) * (0.5 if name.endswith("weight") else 1.0) for name, shape in layout]
    x = rng.normal(size=(int(rng.integers(1, 3)), 3, 6, 6))

    def f(x, *ps):
        net = Backbone(arch, {name: p for (name, _), p in zip(layout, ps)})
        return weighted_sum(net(x))

    return f, [x] + params


LOSS_CASES = {"proxynca": case_proxynca, "proxynca_squared": case_proxynca_squared,
              "cross_entropy": case_cross_entropy, "backbone": case_backbone}
