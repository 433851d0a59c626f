"""Float64 finite-difference suite over every differentiable op and a tiny network."""
from __future__ import annotations

import numpy as np

from . import model, ops
from .tensor import Tensor

TINY_TOPOLOGY = model.FusionTopology(stage_blocks=(2, 1), stage_channels=(4, 6), head_channels=4)
TOLERANCE = 1e-4


def probe(out: Tensor, weights: np.ndarray) -> Tensor:
    """Scalar sum(out * weights); a fixed random projection so every output coordinate matters."""
    weights = np.asarray(weights, dtype=out.dtype).reshape(out.shape)
    value = np.asarray(np.sum(out.data * weights), dtype=out.dtype)
    return Tensor._from_op(value, "probe", (out,), lambda g: (g * weights,))


def _leaf(rng, *shape):
    return Tensor(rng.standard_normal(shape), requires_grad=True)


def _case(rng, build):
    """(loss closure, leaves) with a random projection fixed once."""
    leaves, fn = build()
    w = rng.standard_normal(fn().shape)
    return (lambda: probe(fn(), w)), leaves


def op_cases(seed: int = 0) -> dict:
    rng = np.random.default_rng(seed)
    cases = {}

    def conv():
        x, w, b = _leaf(rng, 2, 3, 7, 6), _leaf(rng, 4, 3, 3, 3), _leaf(rng, 4)
        return [x, w, b], lambda: ops.conv2d(x, w, b, stride=2, padding=1)

    def conv1x1():
        x, w, b = _leaf(rng, 1, 5, 4, 4), _leaf(rng, 3, 5, 1, 1), _leaf(rng, 3)
        return [x, w, b], lambda: ops.conv2d(x, w, b)

    def tconv():
        x, w, b = _leaf(rng, 2, 3, 4, 5), _leaf(rng, 3, 2, 3, 3), _leaf(rng, 2)
        return [x, w, b], lambda: ops.transposed_conv2d(x, w, b, stride=2, padding=1, output_padding=1)

    def pool():
        x = _leaf(rng, 2, 3, 6, 8)
        return [x], lambda: ops.maxpool2d(x)[0]

    def relu():
        x = _leaf(rng, 2, 3, 5, 5)
        return [x], lambda: ops.relu(x)

    def add():
        a, b = _leaf(rng, 2, 3, 4), _leaf(rng, 2, 3, 4)
        return [a, b], lambda: ops.add(a, b)

    def scale_add():
        a, w, b = _leaf(rng, 2, 3, 4), _leaf(rng), _leaf(rng, 2, 3, 4)
        return [a, w, b], lambda: ops.scale_add(a, w, b)

    def mul():
        w, b = _leaf(rng), _leaf(rng, 2, 3, 4)
        return [w, b], lambda: ops.mul(w, b)

    def scale():
        a = _leaf(rng, 3, 4)
        return [a], lambda: ops.scale(a, -1.7)

    def concat():
        a, b = _leaf(rng, 1, 2, 3, 3), _leaf(rng, 1, 1, 3, 3)
        return [a, b], lambda: ops.concat([a, b], axis=1)

    for name, build in [("conv2d", conv), ("conv2d_1x1", conv1x1), ("transposed_conv2d", tconv),
                        ("maxpool2d", pool), ("relu", relu), ("add", add), ("scale_add", scale_add),
                        ("mul", mul), ("scale", scale), ("concat", concat)]:
        cases[name] = _case(rng, build)

    # reductions already end in a scalar
    t = _leaf(rng, 2, 3, 4)
    cases["total"] = ((lambda: ops.total(t)), [t])
    logits = _leaf(rng, 2, 2, 3, 4)
    target = rng.integers(0, 2, (2, 3, 4))
    cases["softmax_cross_entropy"] = ((lambda: ops.softmax_cross_entropy(logits, target)), [logits])
    return cases


def tiny_network(seed: int = 0, strategy: str = "skipcross"):
    """Float64 tiny network at a generic point, plus fixed 32x32 inputs and target.

    Fresh networks have zero biases, so a unit whose inputs are all zero sits
    exactly on the ReLU kink where one-sided and central differences disagree.
    Biases and fusion scalars are therefore drawn at random.
    """
    topo = model.configure_strategy(strategy, TINY_TOPOLOGY)
    net = model.build(topo, seed=seed, dtype=np.float64)
    rng = np.random.default_rng(seed + 1)
    for name, p in net.named_parameters():
        if name.endswith(".b"):
            p.data[...] = rng.uniform(-0.1, 0.1, p.shape)
    for p in net.fusion_scalars().values():
        p.data[...] = rng.uniform(-0.8, 0.8)
    rgb = rng.uniform(0, 1, (1, 3, 32, 32))
    adi = rng.uniform(0, 1, (1, 1, 32, 32))
    target = (rng.uniform(size=(1, 32, 32)) > 0.5).astype(np.uint8)
    return net, rgb, adi, target


def network_case(seed: int = 0, strategy: str = "skipcross"):
    net, rgb, adi, target = tiny_network(seed, strategy)

    def loss():
        return ops.softmax_cross_entropy(net(rgb, adi).logits, target)

    return loss, net.parameters()


# Deep-layer gradients of the tiny network can be ~1e-8 against an O(1) loss,
# where a 1e-6 step carries ~1e-4 relative round-off; larger steps instead risk
# straddling one of the many ReLU/max kinks. The network cases use a ladder.
NETWORK_STEPS = (1e-6, 1e-5, 1e-7)


def run_suite(seed: int = 0, samples_per_param: int = 6, strategies=("skipcross",)) -> dict:
    """Worst relative error per case name."""
    results = {}
    for name, (fn, leaves) in op_cases(seed).items():
        results[name] = ops.grad_check(fn, leaves, samples_per_param=samples_per_param, seed=seed)
    for strat in strategies:
        fn, params = network_case(seed, strat)
        results[f"network[{strat}]"] = ops.grad_check(
            fn, params, epsilon=NETWORK_STEPS, samples_per_param=samples_per_param, seed=seed
        )
    return results
