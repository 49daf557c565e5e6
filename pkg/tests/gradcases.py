"""Random scalar-valued probes, one family per differentiable op.

Each builder takes a numpy Generator and returns ``(fn, point)``: ``fn`` maps
the Tensor under test to a scalar, any other operands are fixed random
constants. Non-scalar op outputs are contracted with a fixed random vector.
"""

import numpy as np

from drkit import autodiff as ad
from drkit.autodiff import Tensor


def _u(rng, *shape):
    return rng.uniform(-2.0, 2.0, size=shape)


def _contract(rng, out_shape):
    weights = rng.normal(size=(int(np.prod(out_shape)), 1))

    def project(y):
        return ad.sum_all(ad.dense(ad.reshape(y, (1, -1)), Tensor(weights), Tensor([0.0])))

    return project


def conv_x(rng):
    x, w, b = _u(rng, 1, 2, 5, 5), _u(rng, 3, 2, 3, 3), _u(rng, 3)
    stride, pad = int(rng.integers(1, 3)), int(rng.integers(0, 2))
    ho = (5 + 2 * pad - 3) // stride + 1
    proj = _contract(rng, (1, 3, ho, ho))
    return (lambda t: proj(ad.conv2d(t, Tensor(w), Tensor(b), stride, pad))), x


def conv_w(rng):
    x, w, b = _u(rng, 2, 2, 4, 4), _u(rng, 3, 2, 3, 3), _u(rng, 3)
    proj = _contract(rng, (2, 3, 4, 4))
    return (lambda t: proj(ad.conv2d(Tensor(x), t, Tensor(b), 1, 1))), w


def conv_b(rng):
    x, w, b = _u(rng, 1, 2, 4, 4), _u(rng, 3, 2, 3, 3), _u(rng, 3)
    proj = _contract(rng, (1, 3, 2, 2))
    return (lambda t: proj(ad.conv2d(Tensor(x), Tensor(w), t, 1, 0))), b


def dense_x(rng):
    x, w, b = _u(rng, 3, 4), _u(rng, 4, 5), _u(rng, 5)
    proj = _contract(rng, (3, 5))
    return (lambda t: proj(ad.dense(t, Tensor(w), Tensor(b)))), x


def dense_w(rng):
    x, w, b = _u(rng, 3, 4), _u(rng, 4, 5), _u(rng, 5)
    proj = _contract(rng, (3, 5))
    return (lambda t: proj(ad.dense(Tensor(x), t, Tensor(b)))), w


def dense_b(rng):
    x, w, b = _u(rng, 3, 4), _u(rng, 4, 5), _u(rng, 5)
    proj = _contract(rng, (3, 5))
    return (lambda t: proj(ad.dense(Tensor(x), Tensor(w), t))), b


def relu(rng):
    x = _u(rng, 12)
    proj = _contract(rng, (12,))
    return (lambda t: proj(ad.relu(t))), x


def maxpool(rng):
    x = _u(rng, 1, 2, 5, 4)
    proj = _contract(rng, (1, 2, 2, 2))
    return (lambda t: proj(ad.maxpool2d(t, 2))), x


def avgpool(rng):
    x = _u(rng, 2, 1, 4, 6)
    proj = _contract(rng, (2, 1, 2, 3))
    return (lambda t: proj(ad.avgpool2d(t, 2))), x


def add(rng):
    x, y = _u(rng, 2, 3), _u(rng, 2, 3)
    proj = _contract(rng, (2, 3))
    return (lambda t: proj(ad.add(t, Tensor(y)))), x


def flatten(rng):
    x = _u(rng, 2, 2, 3)
    proj = _contract(rng, (2, 6))
    return (lambda t: proj(ad.flatten(t))), x


def reshape(rng):
    x = _u(rng, 6)
    proj = _contract(rng, (2, 3))
    return (lambda t: proj(ad.reshape(t, (2, 3)))), x


def softmax_xent(rng):
    z = _u(rng, 4, 5)
    labels = rng.integers(0, 5, size=4)
    reduction = "mean" if rng.random() < 0.5 else "sum"
    return (lambda t: ad.softmax_cross_entropy(t, labels, reduction)), z


def mean(rng):
    return ad.mean, _u(rng, 3, 4)


def sum_all(rng):
    return ad.sum_all, _u(rng, 7)


def std_dispersion(rng):
    return ad.std_dispersion, _u(rng, int(rng.integers(2, 20)))


def std_per_sample(rng):
    x = _u(rng, 3, 2, 2, 2)
    proj = _contract(rng, (3,))
    return (lambda t: proj(ad.std_dispersion(t, per_sample=True))), x


def gather_pad(rng):
    x = _u(rng, 2, 1, 3, 3)
    index = rng.integers(-1, 9, size=(2, 9))
    proj = _contract(rng, (2, 1, 3, 3))
    return (lambda t: proj(ad.gather_pad(t, index))), x


CASES = {
    "conv2d[x]": conv_x,
    "conv2d[w]": conv_w,
    "conv2d[b]": conv_b,
    "dense[x]": dense_x,
    "dense[w]": dense_w,
    "dense[b]": dense_b,
    "relu": relu,
    "maxpool2d": maxpool,
    "avgpool2d": avgpool,
    "add": add,
    "flatten": flatten,
    "reshape": reshape,
    "softmax_cross_entropy": softmax_xent,
    "mean": mean,
    "sum": sum_all,
    "std_dispersion": std_dispersion,
    "std_dispersion[per_sample]": std_per_sample,
    "gather_pad": gather_pad,
}
