"""Selective state-space core: per-token parameterization, zero-order-hold
discretization, the sequential scan, and the static-kernel dual view.

State layout conventions, with L tokens, D channels, N states per channel:

* continuous diagonal state matrix  a: (D, N), negative real at init
* per-token step sizes              step: (..., L, D), strictly positive
* discrete coefficients             a_bar, b_bar: (..., L, D, N)
* per-token output mix              c_t: (..., L, N)

and the recurrence, per channel d (diagonal, so states never mix):

    h[t] = a_bar[t] * h[t-1] + b_bar[t] * x[t]
    y[t] = sum_n c_t[t, n] * h[t, n]

For token-independent parameters the same system collapses to a length-L
convolution kernel (c b_bar, c a_bar b_bar, ..., c a_bar^{L-1} b_bar);
``ssm_kernel``/``ssm_kernel_apply`` provide that dual route and tests hold
the two within 1e-10.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ContractError, DomainError, NumericsError, ShapeError
from .tensor import Tensor

# Below this magnitude of step*a the exact ZOH input coefficient
# (e^{da} - 1)/a * b is evaluated by its truncated series to dodge the
# 0/0; the series is accurate to ~1e-17 there.
ZOH_SERIES_CUTOFF = 1e-8


@dataclass
class SsmParams:
    """Learnable selective-SSM parameters for one mixer.

    a: (D, N) continuous diagonal state matrix (negative at init).
    step_w/step_b: channel projection D -> 1 plus per-channel bias
        producing the pre-softplus step sizes.
    b_w, c_w: projections D -> N producing per-token input/output mixes.
    """

    a: Tensor
    step_w: Tensor
    step_b: Tensor
    b_w: Tensor
    c_w: Tensor

    @property
    def dim(self) -> int:
        return self.a.shape[0]

    @property
    def state_size(self) -> int:
        return self.a.shape[1]

    def tensors(self) -> dict[str, Tensor]:
        return {"a": self.a, "step_w": self.step_w, "step_b": self.step_b,
                "b_w": self.b_w, "c_w": self.c_w}


@dataclass
class DiscreteSsmParams:
    """Zero-order-hold discretized coefficients, per token and channel."""

    a_bar: Tensor  # (..., L, D, N)
    b_bar: Tensor  # (..., L, D, N)
    step: Tensor   # (..., L, D)


def init_ssm_params(dim: int, state_size: int = 16, seed: int = 0,
                    dtype=np.float64) -> SsmParams:
    """Standalone initializer (the model builds its own named tensors).

    The diagonal state matrix starts at a[d, n] = -(n + 1); projections
    start small so the mixer opens near identity; step bias starts at
    zero so softplus gives ln 2 steps on zero input.
    """
    rng = np.random.default_rng(seed)
    scale = 0.02
    return SsmParams(
        a=T.parameter(np.tile(-(np.arange(1, state_size + 1, dtype=dtype)),
                              (dim, 1))),
        step_w=T.parameter(rng.normal(0.0, scale, (dim, 1)).astype(dtype)),
        step_b=T.parameter(np.zeros(dim, dtype=dtype)),
        b_w=T.parameter(rng.normal(0.0, scale, (dim, state_size)).astype(dtype)),
        c_w=T.parameter(rng.normal(0.0, scale, (dim, state_size)).astype(dtype)),
    )


# -- discretization -----------------------------------------------------------

def discretize_zoh(a, b, step):
    """Zero-order-hold discretization of a diagonal continuous system.

    a_bar = e^{step a};  b_bar = (step a)^{-1} (e^{step a} - 1) step b,
    with the series fallback b_bar = step b (1 + step a / 2) once
    |step a| < 1e-8 (exact at a = 0). Numpy arrays broadcast.

    Raises DomainError unless every step is > 0.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    step = np.asarray(step, dtype=np.float64)
    if not np.all(step > 0):
        raise DomainError("discretize_zoh requires step > 0")
    da = step * a
    a_bar = np.exp(da)
    small = np.abs(da) < ZOH_SERIES_CUTOFF
    safe = np.where(small, 1.0, da)
    # expm1 keeps (e^x - 1)/x fully accurate just above the cutoff, where
    # exp(x) - 1 would cancel down to ~8 digits.
    ratio = np.where(small, 1.0 + 0.5 * da, np.expm1(da) / safe)
    b_bar = ratio * step * b
    if a_bar.ndim == 0:
        return float(a_bar), float(b_bar)
    return a_bar, b_bar


def _discretize_graph(step: Tensor, a: Tensor, b_t: Tensor) -> tuple[Tensor, Tensor]:
    """Differentiable ZOH over the graph; shapes step (...,L,D), a (D,N),
    b_t (...,L,N) -> both (...,L,D,N).

    Recorded as two fused nodes (one per output) with hand-written
    backward rules instead of ~10 elementwise primitives: the (...,L,D,N)
    intermediates are the largest arrays in the whole model, so the
    primitive route's temporaries dominated training step time.
    """
    dt = step.data.dtype
    f64 = dt == np.float64
    # f32 cannot resolve expm1(x)/x beyond (e^x - 1)/x below ~1e-3 anyway,
    # so the series cutoff widens there and the exact branch drops expm1.
    cutoff = ZOH_SERIES_CUTOFF if f64 else 1e-3
    step_e = step.data[..., None]                        # (...,L,D,1)
    da = step_e * a.data                                 # (...,L,D,N)
    a_bar = np.exp(da)
    small = np.abs(da) < cutoff
    if small.any():
        safe = np.where(small, np.ones((), dtype=dt), da)
        exact = np.expm1(da) / safe if f64 else (a_bar - 1.0) / safe
        ratio = np.where(small, 1.0 + da * (0.5 + da / 6.0), exact)
    else:
        # softplus steps times A rows of magnitude >= 1 land here almost
        # always, so the masked branches reduce to two vector passes
        small = None
        safe = da
        ratio = np.expm1(da) / da if f64 else (a_bar - 1.0) / da
    b_e = b_t.data[..., None, :]                         # (...,L,1,N)
    b_bar = ratio * step_e * b_e

    def back_a_bar(g):
        # d exp(step*a): chain to step (sum over N) and a (sum over batch/L)
        ga = g * a_bar
        d_step = (ga * a.data).sum(axis=-1)
        d_a = (ga * step_e).reshape(-1, *a.shape).sum(axis=0)
        return (d_step, d_a)

    def back_b_bar(g):
        # ratio'(da) = (e^da*da - (e^da-1))/da^2 = (a_bar - ratio)/da, which
        # reuses the stored forward arrays; series 1/2 + da/3 near zero
        dratio = (a_bar - ratio) / safe
        if small is not None:
            dratio = np.where(small, 0.5 + da / 3.0, dratio)
        gb = g * b_e
        d_step = (gb * (dratio * a.data * step_e + ratio)).sum(axis=-1)
        d_a = (gb * dratio * step_e * step_e).reshape(-1, *a.shape).sum(axis=0)
        d_bt = (g * ratio * step_e).sum(axis=-2)
        return (d_step, d_a, d_bt)

    a_bar_t = T._record(a_bar, (step, a), back_a_bar)
    b_bar_t = T._record(b_bar, (step, a, b_t), back_b_bar)
    return a_bar_t, b_bar_t


def selective_params(x: Tensor, params: SsmParams) -> tuple[DiscreteSsmParams, Tensor]:
    """Input-dependent step/B/C from the token sequence.

    x: (..., L, D). Returns the discretized coefficients and c_t
    (..., L, N). Step sizes are softplus(proj(x) + step_bias), so zero
    input with zero bias gives ln 2 everywhere.
    """
    if x.shape[-1] != params.dim:
        raise ShapeError(
            f"sequence channels {x.shape[-1]} != ssm dim {params.dim}")
    raw = T.linear(x, params.step_w)                      # (...,L,1)
    step = T.softplus(T.add(raw, params.step_b))          # (...,L,D)
    b_t = T.linear(x, params.b_w)                         # (...,L,N)
    c_t = T.linear(x, params.c_w)
    a_bar, b_bar = _discretize_graph(step, params.a, b_t)
    return DiscreteSsmParams(a_bar=a_bar, b_bar=b_bar, step=step), c_t


# -- the scan -----------------------------------------------------------------

def selective_scan(x: Tensor, disc: DiscreteSsmParams, c_t: Tensor) -> Tensor:
    """Sequential linear recurrence over the token axis.

    x: (..., L, D); coefficients (..., L, D, N); c_t: (..., L, N);
    returns y with the shape of x. Recorded as one fused graph op: the
    forward stores the state trajectory and the backward replays it in
    reverse, so graph size stays independent of L.

    Raises NumericsError if the output picks up non-finite values.
    """
    x = T._as_tensor(x)
    squeeze = x.data.ndim == 2
    xd = x.data[None] if squeeze else x.data
    ab = disc.a_bar.data[None] if squeeze else disc.a_bar.data
    bb = disc.b_bar.data[None] if squeeze else disc.b_bar.data
    cd = c_t.data[None] if squeeze else c_t.data
    if xd.ndim != 3 or ab.ndim != 4 or cd.ndim != 3:
        raise ShapeError("selective_scan expects x (...,L,D), coefficients "
                         "(...,L,D,N), c (...,L,N)")
    B, L, D = xd.shape
    N = ab.shape[-1]
    if ab.shape != (B, L, D, N) or bb.shape != ab.shape or cd.shape != (B, L, N):
        raise ShapeError(
            f"inconsistent scan shapes: x {xd.shape}, a_bar {ab.shape}, "
            f"b_bar {bb.shape}, c {cd.shape}")

    hs = np.empty((B, L, D, N), dtype=xd.dtype)
    h = np.zeros((B, D, N), dtype=xd.dtype)
    scratch = np.empty_like(h)
    for t in range(L):
        # h = ab[t] * h + bb[t] * x[t], written without temporaries
        np.multiply(ab[:, t], h, out=h)
        np.multiply(bb[:, t], xd[:, t, :, None], out=scratch)
        np.add(h, scratch, out=h)
        hs[:, t] = h
    # y[t] = h[t] @ c[t] batched over (B, L)
    y = np.matmul(hs, cd[..., None])[..., 0]
    if not np.isfinite(y).all():
        raise NumericsError("selective_scan produced non-finite outputs")

    def backward(g):
        g3 = g[None] if squeeze else g
        dab = np.empty_like(ab)
        dbb = np.empty_like(bb)
        dx = np.empty_like(xd)
        dc = np.matmul(g3[:, :, None, :], hs)[:, :, 0, :]
        gh = np.zeros((B, D, N), dtype=xd.dtype)
        scratch = np.empty_like(gh)
        for t in range(L - 1, -1, -1):
            np.multiply(g3[:, t, :, None], cd[:, t, None, :], out=scratch)
            np.add(gh, scratch, out=gh)
            if t > 0:
                np.multiply(gh, hs[:, t - 1], out=dab[:, t])
            else:
                dab[:, 0] = 0.0  # h starts at zero, so a_bar[0] is inert
            np.multiply(gh, xd[:, t, :, None], out=dbb[:, t])
            np.multiply(gh, bb[:, t], out=scratch)
            np.sum(scratch, axis=-1, out=dx[:, t])
            np.multiply(gh, ab[:, t], out=gh)
        if squeeze:
            return (dx[0], dab[0], dbb[0], dc[0])
        return (dx, dab, dbb, dc)

    out = y[0] if squeeze else y
    return T._record(out, (x, disc.a_bar, disc.b_bar, c_t), backward)


# -- static-kernel dual route -------------------------------------------------

def _static_1d(name: str, value) -> np.ndarray:
    """Coerce a kernel parameter to shape (N,), rejecting token-varying input."""
    arr = np.asarray(value, dtype=np.float64)
    if arr.ndim == 0:
        return arr.reshape(1)
    if arr.ndim == 1:
        return arr
    if arr.ndim == 2:
        # (L, N): allowed only if every token row is identical.
        if not (arr == arr[0]).all():
            raise ContractError(
                f"ssm_kernel requires token-independent {name}; rows differ")
        return arr[0]
    raise ShapeError(f"{name} must be scalar, (N,), or constant (L, N)")


def ssm_kernel(a_bar, b_bar, c, length: int) -> np.ndarray:
    """Unrolled convolution kernel of a token-independent discrete SSM.

    k[j] = sum_n c[n] * a_bar[n]^j * b_bar[n], j = 0..length-1.
    Raises ContractError when handed token-dependent parameters.
    """
    if length < 1:
        raise DomainError("kernel length must be >= 1")
    ab = _static_1d("a_bar", a_bar)
    bb = _static_1d("b_bar", b_bar)
    cc = _static_1d("c", c)
    n = max(ab.size, bb.size, cc.size)
    ab, bb, cc = (np.broadcast_to(v, (n,)) for v in (ab, bb, cc))
    powers = ab[None, :] ** np.arange(length, dtype=np.float64)[:, None]
    return powers @ (cc * bb)


def ssm_kernel_apply(x, kernel) -> np.ndarray:
    """Causal 1-D convolution: y[t] = sum_{j<=t} kernel[j] x[t-j]."""
    x = np.asarray(x, dtype=np.float64)
    kernel = np.asarray(kernel, dtype=np.float64)
    if x.ndim != 1 or kernel.ndim != 1:
        raise ShapeError("ssm_kernel_apply works on 1-D sequences")
    return np.convolve(x, kernel)[: x.size]
