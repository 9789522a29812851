"""Finite-difference gradient verification.

The numeric oracle is the central difference (f(x+h) - f(x-h)) / 2h with
h = 1e-5 in float64. Analytic gradients from the autodiff graph are
compared coordinate-wise with

    rel_err = |analytic - numeric| / max(|analytic|, |numeric|, 1e-3)

The 1e-3 floor keeps finite-difference roundoff on near-zero gradients
from flagging spurious failures while still exposing any genuine sign or
magnitude error at the thresholds used in tests (1e-4 for primitive ops,
1e-3 for long compositions like the scan).
"""

from __future__ import annotations

import os
import zlib

import numpy as np

from .errors import ContractError
from .tensor import Tensor

DEFAULT_STEP = 1e-5
REL_FLOOR = 1e-3

# Test-build fault hook: name an op here and its analytic gradient is
# sign-flipped, which the grad-check CLI must report as a failure.
FAULT_ENV = "DASCAN_GRADCHECK_FAULT"


def numeric_gradient(fn, tensors: list[Tensor], h: float = DEFAULT_STEP):
    """Central-difference gradient of scalar ``fn()`` w.r.t. each tensor.

    ``fn`` must be a closure over ``tensors`` re-evaluating the loss from
    their current ``data``; entries are perturbed in place one coordinate
    at a time.
    """
    grads = []
    for t in tensors:
        base = t.data
        flat = base.reshape(-1)
        g = np.empty_like(flat)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + h
            f_plus = float(fn().data)
            flat[i] = keep - h
            f_minus = float(fn().data)
            flat[i] = keep
            g[i] = (f_plus - f_minus) / (2.0 * h)
        grads.append(g.reshape(base.shape))
    return grads


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), REL_FLOOR)
    return float((np.abs(analytic - numeric) / denom).max())


def check_gradients(fn, tensors: list[Tensor], h: float = DEFAULT_STEP,
                    fault: str | None = None):
    """Run fn, backprop, and compare against the numeric oracle.

    Returns the worst relative error across all checked tensors.
    """
    for t in tensors:
        t.grad = None
    loss = fn()
    loss.backward()
    analytic = []
    for t in tensors:
        if t.grad is None:
            raise AssertionError("tensor received no gradient")
        g = np.array(t.grad, dtype=np.float64)
        if fault:
            g = -g
        analytic.append(g)
    numeric = numeric_gradient(fn, tensors, h=h)
    return max(relative_error(a, n) for a, n in zip(analytic, numeric))


def fault_target() -> str | None:
    """Op name whose gradient the test build flips, or None."""
    return os.environ.get(FAULT_ENV) or None


# -- op-level verification suite ---------------------------------------------

PRIMITIVE_THRESHOLD = 1e-4
COMPOSITION_THRESHOLD = 1e-3


def _proj_loss(out, rng):
    """Scalar loss: fixed random projection of an op's output."""
    from . import tensor as T
    w = rng.standard_normal(out.shape)
    return T.tsum(T.mul(out, Tensor(w)))


def _leaf(rng, shape, low=None, high=None, margin=None):
    data = rng.standard_normal(shape)
    if margin is not None:  # push values away from 0 (kinked ops)
        data = np.where(np.abs(data) < margin, margin + np.abs(data), data)
    if low is not None:
        data = low + np.abs(data)
    return Tensor(data, requires_grad=True)


def _suite_cases():
    """name -> (builder, threshold); builder() -> (loss_fn, leaf tensors)."""
    from . import tensor as T

    def unary(op, n=12, **leaf_kw):
        def build():
            rng = np.random.default_rng(zlib.crc32(op.__name__.encode()))
            a = _leaf(rng, (n,), **leaf_kw)
            return (lambda: _proj_loss(op(a), np.random.default_rng(7))), [a]
        return build

    def binary(op):
        def build():
            rng = np.random.default_rng(zlib.crc32(op.__name__.encode()) + 1)
            a = _leaf(rng, (3, 4))
            b = _leaf(rng, (3, 4), low=0.5)
            return (lambda: _proj_loss(op(a, b),
                                       np.random.default_rng(7))), [a, b]
        return build

    def matmul_case():
        rng = np.random.default_rng(21)
        a, b = _leaf(rng, (3, 4)), _leaf(rng, (4, 5))
        return (lambda: _proj_loss(T.matmul(a, b),
                                   np.random.default_rng(7))), [a, b]

    def linear_case():
        rng = np.random.default_rng(22)
        x, w, b = _leaf(rng, (2, 3, 4)), _leaf(rng, (4, 5)), _leaf(rng, (5,))
        return (lambda: _proj_loss(T.linear(x, w, b),
                                   np.random.default_rng(7))), [x, w, b]

    def log_softmax_case():
        rng = np.random.default_rng(23)
        x = _leaf(rng, (4, 6))
        return (lambda: _proj_loss(T.log_softmax(x),
                                   np.random.default_rng(7))), [x]

    def layernorm_case():
        rng = np.random.default_rng(24)
        x = _leaf(rng, (3, 5, 8))
        return (lambda: _proj_loss(T.layernorm(x),
                                   np.random.default_rng(7))), [x]

    def conv_case(stride=1, groups=1, cin=4, cout=6):
        def build():
            rng = np.random.default_rng(25 + stride * 10 + groups)
            x = _leaf(rng, (2, cin, 6, 6))
            w = _leaf(rng, (cout, cin // groups, 3, 3))
            b = _leaf(rng, (cout,))
            fn = lambda: _proj_loss(
                T.conv2d(x, w, b, stride=stride, padding=1, groups=groups),
                np.random.default_rng(7))
            return fn, [x, w, b]
        return build

    def sample_case():
        from .sampling import sample
        rng = np.random.default_rng(31)
        fmap = _leaf(rng, (4, 5, 3))           # (H, W, C) channels-last
        # off-lattice coords with a safe margin from every lattice line
        px = rng.integers(0, 4, (2, 5)) + rng.uniform(0.2, 0.8, (2, 5))
        py = rng.integers(0, 3, (2, 5)) + rng.uniform(0.2, 0.8, (2, 5))
        coords = Tensor(np.stack([px / 4 * 2 - 1, py / 3 * 2 - 1], axis=-1),
                        requires_grad=True)
        fn = lambda: _proj_loss(sample(coords, fmap),
                                np.random.default_rng(7))
        return fn, [coords, fmap]

    def scan_case():
        from .ssm import SsmParams, selective_params, selective_scan
        rng = np.random.default_rng(32)
        d, n, L = 3, 2, 5
        x = _leaf(rng, (2, L, d))
        params = SsmParams(a=Tensor(-0.5 - np.abs(rng.standard_normal((d, n))),
                                    requires_grad=True),
                           step_w=_leaf(rng, (d, 1)),
                           step_b=_leaf(rng, (d,)),
                           b_w=_leaf(rng, (d, n)),
                           c_w=_leaf(rng, (d, n)))

        def fn():
            disc, c_t = selective_params(x, params)
            return _proj_loss(selective_scan(x, disc, c_t),
                              np.random.default_rng(7))
        return fn, [x, *params.tensors().values()]

    def offset_net_case():
        from .scan import OffsetNet
        rng = np.random.default_rng(33)
        c = 3
        net = OffsetNet(conv_w=_leaf(rng, (c, 1, 3, 3)),
                        conv_b=_leaf(rng, (c,)),
                        norm_g=Tensor(1.0 + 0.1 * rng.standard_normal(c),
                                      requires_grad=True),
                        norm_b=_leaf(rng, (c,)),
                        out_w=Tensor(0.1 * rng.standard_normal((c, 2)),
                                     requires_grad=True),
                        out_b=Tensor(0.05 * rng.standard_normal(2),
                                     requires_grad=True),
                        offset_range=0.5)
        x = _leaf(rng, (1, 4, 4, c))
        leaves = [x, net.conv_w, net.conv_b, net.norm_g, net.norm_b,
                  net.out_w, net.out_b]
        fn = lambda: _proj_loss(net.forward(x), np.random.default_rng(7))
        return fn, leaves

    def block_case():
        from .model import Model, ModelConfig
        config = ModelConfig(channels=(4, 4, 4, 4), blocks=(1, 1, 1, 1),
                             num_classes=2, state_size=2)
        model = Model(config, seed=4, dtype=np.float64)
        rng = np.random.default_rng(34)
        prefix = "stages.0.blocks.0"
        leaves = []
        for name, p in model.params.items():
            if not name.startswith(prefix):
                continue
            if name.endswith("ssm.a"):
                p.data = -0.5 - np.abs(0.3 * rng.standard_normal(p.shape))
            else:
                # keep offsets off-lattice so bilinear corners don't tie
                p.data = 0.12 * rng.standard_normal(p.shape)
            p.requires_grad = True
            leaves.append(p)
        x = _leaf(rng, (1, 4, 4, 4))
        leaves.append(x)
        fn = lambda: _proj_loss(model.block(x, 0, 0),
                                np.random.default_rng(7))
        return fn, leaves

    from . import tensor as T
    cases = {
        "add": (binary(T.add), PRIMITIVE_THRESHOLD),
        "mul": (binary(T.mul), PRIMITIVE_THRESHOLD),
        "div": (binary(T.div), PRIMITIVE_THRESHOLD),
        "exp": (unary(T.exp), PRIMITIVE_THRESHOLD),
        "log": (unary(T.log, low=0.5), PRIMITIVE_THRESHOLD),
        "sqrt": (unary(T.sqrt, low=0.5), PRIMITIVE_THRESHOLD),
        "tanh": (unary(T.tanh), PRIMITIVE_THRESHOLD),
        "sigmoid": (unary(T.sigmoid), PRIMITIVE_THRESHOLD),
        "softplus": (unary(T.softplus), PRIMITIVE_THRESHOLD),
        "silu": (unary(T.silu), PRIMITIVE_THRESHOLD),
        "gelu": (unary(T.gelu), PRIMITIVE_THRESHOLD),
        "relu": (unary(T.relu, margin=0.1), PRIMITIVE_THRESHOLD),
        "matmul": (matmul_case, PRIMITIVE_THRESHOLD),
        "linear": (linear_case, PRIMITIVE_THRESHOLD),
        "log_softmax": (log_softmax_case, PRIMITIVE_THRESHOLD),
        "layernorm": (layernorm_case, PRIMITIVE_THRESHOLD),
        "conv2d": (conv_case(), PRIMITIVE_THRESHOLD),
        "conv2d_stride2": (conv_case(stride=2), PRIMITIVE_THRESHOLD),
        "conv2d_depthwise": (conv_case(groups=4, cin=4, cout=4),
                             PRIMITIVE_THRESHOLD),
        "sample": (sample_case, PRIMITIVE_THRESHOLD),
        "selective_scan": (scan_case, COMPOSITION_THRESHOLD),
        "offset_net": (offset_net_case, COMPOSITION_THRESHOLD),
        "block": (block_case, COMPOSITION_THRESHOLD),
    }
    return cases


def run_suite(op: str = "all", fault: str | None = None) -> list[dict]:
    """Gradcheck one op (or every op); rows of name/rel_err/threshold/ok.

    ``fault`` (or the DASCAN_GRADCHECK_FAULT env var) names an op whose
    analytic gradient is deliberately sign-flipped — the resulting
    failure proves the checker can actually catch a wrong gradient.
    """
    cases = _suite_cases()
    if op != "all":
        if op not in cases:
            raise ContractError(
                f"unknown op {op!r}; choose from {sorted(cases)} or 'all'")
        cases = {op: cases[op]}
    fault = fault if fault is not None else fault_target()
    rows = []
    for name, (builder, threshold) in sorted(cases.items()):
        fn, tensors = builder()
        err = check_gradients(fn, tensors, fault=(name == fault) or None)
        rows.append({"op": name, "rel_err": err, "threshold": threshold,
                     "ok": err < threshold})
    return rows
