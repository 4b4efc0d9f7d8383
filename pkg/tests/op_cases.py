"""Classical differentiable ops as (name, input shape, scalar-valued closure) cases.

Each closure contracts the op's output with a fixed random tensor so the
result is a scalar whose gradient touches every output element.
"""

import numpy as np

from bhvit import autograd as ag


def _probe(rng, shape):
    return rng.normal(size=shape)


def _contract(out, probe):
    return (out * probe).sum()


def build_cases(rng):
    """Return ``[(name, x_shape, sampler, f)]``; ``f(x_tensor) -> scalar Tensor``."""
    cases = []

    def case(name, shape, fn, out_shape=None, sampler=None):
        out_shape = out_shape or shape
        probe = _probe(rng, out_shape)
        other = rng.normal(size=shape)
        cases.append((name, shape, sampler or (lambda r: r.normal(size=shape)),
                      lambda x, fn=fn, probe=probe, other=other: _contract(fn(x, other), probe)))

    w_mat = rng.normal(size=(5, 3))
    case("add", (4, 5), lambda x, o: ag.add(x, o))
    case("add_broadcast", (4, 5), lambda x, o: ag.add(x, o[0]))
    case("sub", (4, 5), lambda x, o: ag.sub(o, x))
    case("mul", (4, 5), lambda x, o: ag.mul(x, x))
    case("div", (4, 5), lambda x, o: ag.div(x, 2.0 + ag.mul(x, x)))
    case("power", (4, 5), lambda x, o: ag.power(1.5 + ag.mul(x, x), 1.5))
    case("exp", (4, 5), lambda x, o: ag.exp(x))
    case("log", (4, 5), lambda x, o: ag.log(x), sampler=lambda r: r.uniform(0.5, 2.0, size=(4, 5)))
    case("abs", (4, 5), lambda x, o: ag.abs_(x),
         sampler=lambda r: r.choice([-1, 1], size=(4, 5)) * r.uniform(0.1, 2.0, size=(4, 5)))
    case("gelu", (4, 5), lambda x, o: ag.gelu(x))
    case("prelu", (4, 5), lambda x, o: ag.prelu(x, np.full(5, 0.25)),
         sampler=lambda r: r.choice([-1, 1], size=(4, 5)) * r.uniform(0.1, 2.0, size=(4, 5)))
    case("prelu_slope", (5,), lambda x, o: ag.prelu(ag.as_tensor(np.linspace(-2, 2, 20).reshape(4, 5)), x),
         out_shape=(4, 5))
    case("sum_axis", (3, 4, 5), lambda x, o: ag.sum_(x, axis=1), out_shape=(3, 5))
    case("mean_axis", (3, 4, 5), lambda x, o: ag.mean(x, axis=(0, 2)), out_shape=(4,))
    case("reshape", (3, 4, 5), lambda x, o: ag.reshape(x, (12, 5)), out_shape=(12, 5))
    case("transpose", (3, 4, 5), lambda x, o: ag.transpose(x, (2, 0, 1)), out_shape=(5, 3, 4))
    case("concat", (3, 4), lambda x, o: ag.concat([x, ag.mul(x, 2.0), o], axis=1), out_shape=(3, 12))
    case("split", (3, 7), lambda x, o: ag.mul(ag.split(x, [2, 5], axis=1)[1], 3.0), out_shape=(3, 5))
    case("getitem", (4, 5), lambda x, o: x[1:3, ::2], out_shape=(2, 3))
    case("pad", (2, 3), lambda x, o: ag.pad(x, ((1, 0), (2, 1))), out_shape=(3, 6))
    case("repeat_channels", (2, 3), lambda x, o: ag.repeat_channels(x, 4), out_shape=(2, 12))
    case("roll", (3, 4), lambda x, o: ag.roll(x, 1, axis=1))
    case("broadcast_to", (1, 4), lambda x, o: ag.broadcast_to(x, (3, 4)), out_shape=(3, 4))
    case("matmul", (4, 5), lambda x, o: ag.matmul(x, ag.as_tensor(w_mat)), out_shape=(4, 3))
    case("matmul_batched", (2, 3, 5), lambda x, o: ag.matmul(x, ag.transpose(x, (0, 2, 1))),
         out_shape=(2, 3, 3))
    case("softmax", (3, 6), lambda x, o: ag.softmax(x, axis=-1))
    case("softmax_axis0", (3, 6), lambda x, o: ag.softmax(x, axis=0))
    case("log_softmax", (3, 6), lambda x, o: ag.log_softmax(x, axis=-1))
    conv_w = rng.normal(size=(3, 3, 2, 4))
    case("conv2d", (1, 5, 5, 2), lambda x, o: ag.conv2d(x, ag.as_tensor(conv_w), padding=1), out_shape=(1, 5, 5, 4))
    case("conv2d_weight", (3, 3, 2, 4), lambda x, o: ag.conv2d(ag.as_tensor(np.ones((1, 4, 4, 2))), x, padding=1),
         out_shape=(1, 4, 4, 4))
    strided_w = rng.normal(size=(2, 2, 2, 3))
    case("conv2d_stride", (1, 4, 6, 2), lambda x, o: ag.conv2d(x, ag.as_tensor(strided_w), stride=2),
         out_shape=(1, 2, 3, 3))
    grouped_w = rng.normal(size=(3, 3, 1, 4))
    case("conv2d_dilated_grouped", (1, 7, 7, 4),
         lambda x, o: ag.conv2d(x, ag.as_tensor(grouped_w), dilation=3, groups=4, padding=3),
         out_shape=(1, 7, 7, 4))
    case("avg_pool2d", (1, 4, 4, 2), lambda x, o: ag.avg_pool2d(x, 2), out_shape=(1, 2, 2, 2))
    case("upsample_nearest", (1, 2, 2, 2), lambda x, o: ag.upsample_nearest(x, 2), out_shape=(1, 4, 4, 2))
    gamma, beta = rng.uniform(0.5, 1.5, size=3), rng.normal(size=3)
    case("batch_norm_train", (4, 2, 3),
         lambda x, o: ag.batch_norm(x, gamma, beta, np.zeros(3), np.ones(3), training=True))
    case("batch_norm_eval", (4, 2, 3),
         lambda x, o: ag.batch_norm(x, gamma, beta, np.full(3, 0.3), np.full(3, 2.0), training=False))
    return cases
