"""Four-stage vision backbone built on the adaptive-scan SSM mixer.

Layout: an overlapping convolutional stem downsamples x4, then four
stages of residual blocks separated by stride-2 downsample convolutions
(so feature grids sit at 1/4, 1/8, 1/16, 1/32 of the input), and a
BatchNorm -> global average pool -> linear head.

Each block, channels-last between convolutions:

    x = x + dwconv3x3(x)                     (convpos, toggleable)
    x = x + out_proj(gate(scan(resample(norm(x)))))   (adaptive-scan mixer)
    x = x + ffn(norm(x))                     (ConvFFN, dw-conv toggleable)

The mixer normalizes, resamples patches via the dynamic adaptive scan
(or keeps the sweeping raster when toggled off), flattens to a token
sequence, runs in-projection -> selective scan -> SiLU gate ->
out-projection, and scatters tokens back through the plan.

Every learnable tensor has a dotted name (stable across toggles), which
is what checkpoints store; initialization draws each tensor from its own
name-seeded stream so shared weights match across configurations that
differ only in toggles.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, fields as dc_fields, replace

import numpy as np

from . import tensor as T
from .errors import ContractError, ShapeError
from .fileio import Checkpoint
from .scan import OffsetNet, apply_plan, dynamic_adaptive_scan, sweeping_scan, unapply_plan
from .ssm import SsmParams, selective_params, selective_scan
from .tensor import Tensor

# The micro preset runs a narrower state so a full desk-scale training
# comparison fits a single-core CPU budget; the published sizes keep 16.
PRESETS = {
    "micro": {"channels": (16, 32, 64, 64), "blocks": (1, 1, 2, 1),
              "state_size": 8},
    "tiny": {"channels": (80, 160, 320, 512), "blocks": (3, 4, 12, 5)},
    "small": {"channels": (96, 192, 384, 512), "blocks": (4, 8, 20, 6)},
    "base": {"channels": (112, 224, 448, 640), "blocks": (4, 8, 25, 8)},
}

BN_EPS = 1e-5
BN_MOMENTUM = 0.1
LN_EPS = 1e-6


@dataclass
class ModelConfig:
    channels: tuple = PRESETS["micro"]["channels"]
    blocks: tuple = PRESETS["micro"]["blocks"]
    num_classes: int = 1000
    state_size: int = 16
    expansion: int = 1
    ffn_ratio: int = 3
    use_das: bool = True
    use_convpos: bool = True
    use_convffn: bool = True
    offset_range: float = 0.5
    drop_path: float = 0.0

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        self.blocks = tuple(int(b) for b in self.blocks)
        if len(self.channels) != 4 or len(self.blocks) != 4:
            raise ContractError("config needs 4 stage widths and 4 block counts")

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in dc_fields(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in dc_fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


def preset(name: str, **overrides) -> ModelConfig:
    if name not in PRESETS:
        raise ContractError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return ModelConfig(**{**PRESETS[name], **overrides})


# -- parameter book-keeping ---------------------------------------------------

def iter_param_specs(config: ModelConfig):
    """Yield (name, shape, init_kind) for every learnable tensor.

    Single source of truth: initialization, parameter counting, and
    checkpoint layout all walk this list.
    """
    c1 = config.channels[0]
    mid = max(c1 // 2, 1)
    stem_widths = [(3, mid), (mid, mid), (mid, c1), (c1, c1)]
    for i, (cin, cout) in enumerate(stem_widths):
        yield f"stem.conv{i}.w", (cout, cin, 3, 3), "conv"
        yield f"stem.conv{i}.b", (cout,), "zeros"
    for i in range(3):
        cout = stem_widths[i][1]
        yield f"stem.norm{i}.g", (cout,), "ones"
        yield f"stem.norm{i}.b", (cout,), "zeros"

    for s, (ch, nblocks) in enumerate(zip(config.channels, config.blocks)):
        d = ch * config.expansion
        n = config.state_size
        hidden = ch * config.ffn_ratio
        for i in range(nblocks):
            p = f"stages.{s}.blocks.{i}"
            if config.use_convpos:
                yield f"{p}.convpos.w", (ch, 1, 3, 3), "conv"
                yield f"{p}.convpos.b", (ch,), "zeros"
            yield f"{p}.norm1.g", (ch,), "ones"
            yield f"{p}.norm1.b", (ch,), "zeros"
            if config.use_das:
                yield f"{p}.opn.conv.w", (ch, 1, 3, 3), "conv"
                yield f"{p}.opn.conv.b", (ch,), "zeros"
                yield f"{p}.opn.norm.g", (ch,), "ones"
                yield f"{p}.opn.norm.b", (ch,), "zeros"
                yield f"{p}.opn.out.w", (ch, 2), "zeros"
                yield f"{p}.opn.out.b", (2,), "zeros"
            yield f"{p}.in_proj.w", (ch, 2 * d), "linear"
            yield f"{p}.in_proj.b", (2 * d,), "zeros"
            yield f"{p}.ssm.a", (d, n), "ssm_a"
            yield f"{p}.ssm.step_w", (d, 1), "linear"
            yield f"{p}.ssm.step_b", (d,), "zeros"
            yield f"{p}.ssm.b_w", (d, n), "linear"
            yield f"{p}.ssm.c_w", (d, n), "linear"
            yield f"{p}.out_proj.w", (d, ch), "linear"
            yield f"{p}.out_proj.b", (ch,), "zeros"
            yield f"{p}.norm2.g", (ch,), "ones"
            yield f"{p}.norm2.b", (ch,), "zeros"
            yield f"{p}.ffn.w1", (ch, hidden), "linear"
            yield f"{p}.ffn.b1", (hidden,), "zeros"
            if config.use_convffn:
                yield f"{p}.ffn.conv.w", (hidden, 1, 3, 3), "conv"
                yield f"{p}.ffn.conv.b", (hidden,), "zeros"
            yield f"{p}.ffn.w2", (hidden, ch), "linear"
            yield f"{p}.ffn.b2", (ch,), "zeros"
        if s < 3:
            nxt = config.channels[s + 1]
            yield f"down.{s}.conv.w", (nxt, ch, 3, 3), "conv"
            yield f"down.{s}.conv.b", (nxt,), "zeros"
            yield f"down.{s}.norm.g", (nxt,), "ones"
            yield f"down.{s}.norm.b", (nxt,), "zeros"

    c4 = config.channels[3]
    yield "head.bn.g", (c4,), "ones"
    yield "head.bn.b", (c4,), "zeros"
    yield "head.fc.w", (c4, config.num_classes), "linear"
    yield "head.fc.b", (config.num_classes,), "zeros"


def _init_array(name: str, shape: tuple, kind: str, seed: int,
                dtype) -> np.ndarray:
    # Stable per-tensor stream: same name + seed => same values, so two
    # configs differing only in toggles share every common weight.
    rng = np.random.default_rng(
        np.random.SeedSequence([seed, zlib.crc32(name.encode())]))
    if kind == "zeros":
        return np.zeros(shape, dtype=dtype)
    if kind == "ones":
        return np.ones(shape, dtype=dtype)
    if kind == "conv":
        fan_in = shape[1] * shape[2] * shape[3]
        return rng.normal(0.0, np.sqrt(2.0 / fan_in), shape).astype(dtype)
    if kind == "linear":
        return rng.normal(0.0, 0.02, shape).astype(dtype)
    if kind == "ssm_a":
        d, n = shape
        return np.tile(-np.arange(1, n + 1, dtype=dtype), (d, 1))
    raise AssertionError(f"unknown init kind {kind}")


def count_params(config: ModelConfig) -> int:
    """Total learnable scalars, by analytic walk of the layer specs."""
    return sum(int(np.prod(shape)) for _, shape, _ in iter_param_specs(config))


class Model:
    """Backbone with named parameters and an explicit forward pass."""

    def __init__(self, config: ModelConfig, seed: int = 0, dtype=np.float32):
        self.config = config
        self.seed = seed
        self.dtype = np.dtype(dtype)
        self.params: dict[str, Tensor] = {
            name: T.parameter(_init_array(name, shape, kind, seed, self.dtype))
            for name, shape, kind in iter_param_specs(config)
        }
        c4 = config.channels[3]
        self.buffers: dict[str, np.ndarray] = {
            "head.bn.mean": np.zeros(c4, dtype=self.dtype),
            "head.bn.var": np.ones(c4, dtype=self.dtype),
        }

    # -- plumbing ---------------------------------------------------------

    def parameters(self) -> dict[str, Tensor]:
        return self.params

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def num_params(self) -> int:
        return sum(p.size for p in self.params.values())

    def _p(self, name: str) -> Tensor:
        return self.params[name]

    def _ssm(self, prefix: str) -> SsmParams:
        return SsmParams(a=self._p(f"{prefix}.ssm.a"),
                         step_w=self._p(f"{prefix}.ssm.step_w"),
                         step_b=self._p(f"{prefix}.ssm.step_b"),
                         b_w=self._p(f"{prefix}.ssm.b_w"),
                         c_w=self._p(f"{prefix}.ssm.c_w"))

    def _opn(self, prefix: str) -> OffsetNet:
        return OffsetNet(conv_w=self._p(f"{prefix}.opn.conv.w"),
                         conv_b=self._p(f"{prefix}.opn.conv.b"),
                         norm_g=self._p(f"{prefix}.opn.norm.g"),
                         norm_b=self._p(f"{prefix}.opn.norm.b"),
                         out_w=self._p(f"{prefix}.opn.out.w"),
                         out_b=self._p(f"{prefix}.opn.out.b"),
                         offset_range=self.config.offset_range)

    def _ln(self, x: Tensor, prefix: str) -> Tensor:
        return T.add(T.mul(T.layernorm(x, eps=LN_EPS), self._p(f"{prefix}.g")),
                     self._p(f"{prefix}.b"))

    # -- forward pieces ----------------------------------------------------

    def stem(self, x: Tensor, min_divisor: int = 32) -> Tensor:
        """(B, 3, H, W) -> (B, C1, H/4, W/4). H, W must divide by
        min_divisor (32 in production; tests may relax for gradchecks)."""
        x = T._as_tensor(x)
        if x.data.ndim != 4:
            raise ShapeError(f"stem expects (B, 3, H, W), got {x.shape}")
        H, W = x.shape[2], x.shape[3]
        if H % min_divisor or W % min_divisor:
            raise ShapeError(
                f"input {H}x{W} not divisible by {min_divisor}")
        strides = (2, 1, 2, 1)
        for i, s in enumerate(strides):
            x = T.conv2d(x, self._p(f"stem.conv{i}.w"),
                         self._p(f"stem.conv{i}.b"), stride=s, padding=1)
            if i < 3:
                x = T.transpose(x, (0, 2, 3, 1))
                x = self._ln(x, f"stem.norm{i}")
                x = T.gelu(x)
                x = T.transpose(x, (0, 3, 1, 2))
        return x

    def _drop_path(self, branch: Tensor, training: bool,
                   rng: np.random.Generator | None) -> Tensor:
        rate = self.config.drop_path
        if not training or rate <= 0.0:
            return branch
        if rng is None:
            raise ContractError("drop_path > 0 needs an rng during training")
        b = branch.shape[0]
        keep = (rng.random(b) >= rate).astype(branch.data.dtype) / (1.0 - rate)
        shape = (b,) + (1,) * (branch.data.ndim - 1)
        return T.mul(branch, Tensor(keep.reshape(shape)))

    def block(self, x: Tensor, stage: int, index: int, training: bool = False,
              rng=None, plan_sink: list | None = None) -> Tensor:
        """One residual block on a channels-last (B, H, W, C) map."""
        cfg = self.config
        p = f"stages.{stage}.blocks.{index}"
        if cfg.use_convpos:
            pos = T.transpose(x, (0, 3, 1, 2))
            pos = T.conv2d(pos, self._p(f"{p}.convpos.w"),
                           self._p(f"{p}.convpos.b"), padding=1,
                           groups=x.shape[-1])
            x = T.add(x, T.transpose(pos, (0, 2, 3, 1)))

        normed = self._ln(x, f"{p}.norm1")
        if cfg.use_das:
            plan, resampled = dynamic_adaptive_scan(normed, self._opn(p))
        else:
            plan = sweeping_scan(x.shape[1], x.shape[2])
            resampled = normed
        if plan_sink is not None:
            plan_sink.append(plan)

        seq = apply_plan(resampled, plan)                     # (B, L, C)
        d = x.shape[-1] * cfg.expansion
        uz = T.linear(seq, self._p(f"{p}.in_proj.w"), self._p(f"{p}.in_proj.b"))
        u = T.slice_last(uz, 0, d)
        z = T.slice_last(uz, d, 2 * d)
        disc, c_t = selective_params(u, self._ssm(p))
        y = selective_scan(u, disc, c_t)
        y = T.mul(y, T.silu(z))
        y = T.linear(y, self._p(f"{p}.out_proj.w"), self._p(f"{p}.out_proj.b"))
        x = T.add(x, self._drop_path(unapply_plan(y, plan), training, rng))

        h = T.linear(self._ln(x, f"{p}.norm2"), self._p(f"{p}.ffn.w1"),
                     self._p(f"{p}.ffn.b1"))
        if cfg.use_convffn:
            hc = T.transpose(h, (0, 3, 1, 2))
            hc = T.conv2d(hc, self._p(f"{p}.ffn.conv.w"),
                          self._p(f"{p}.ffn.conv.b"), padding=1,
                          groups=h.shape[-1])
            h = T.transpose(hc, (0, 2, 3, 1))
        h = T.gelu(h)
        h = T.linear(h, self._p(f"{p}.ffn.w2"), self._p(f"{p}.ffn.b2"))
        return T.add(x, self._drop_path(h, training, rng))

    def forward_features(self, x, training: bool = False, rng=None,
                         capture_stage: int | None = None,
                         plan_sink: list | None = None) -> Tensor:
        """(B, 3, H, W) -> channels-first (B, C4, H/32, W/32) features."""
        x = T._as_tensor(x)
        squeeze = x.data.ndim == 3
        if squeeze:
            x = T.reshape(x, (1,) + x.data.shape)
        x = x.astype(self.dtype)
        x = self.stem(x)
        x = T.transpose(x, (0, 2, 3, 1))
        for s in range(4):
            for i in range(self.config.blocks[s]):
                sink = plan_sink if (capture_stage == s + 1 and i == 0) else None
                x = self.block(x, s, i, training=training, rng=rng,
                               plan_sink=sink)
            if s < 3:
                x = T.transpose(x, (0, 3, 1, 2))
                x = T.conv2d(x, self._p(f"down.{s}.conv.w"),
                             self._p(f"down.{s}.conv.b"), stride=2, padding=1)
                x = T.transpose(x, (0, 2, 3, 1))
                x = self._ln(x, f"down.{s}.norm")
        return T.transpose(x, (0, 3, 1, 2))

    def forward(self, x, training: bool = False, rng=None,
                capture_stage: int | None = None,
                plan_sink: list | None = None) -> Tensor:
        """Images (B, 3, H, W) in [0, 1] -> logits (B, num_classes)."""
        feats = self.forward_features(x, training=training, rng=rng,
                                      capture_stage=capture_stage,
                                      plan_sink=plan_sink)
        gamma, beta = self._p("head.bn.g"), self._p("head.bn.b")
        if training:
            mu = T.tmean(feats, axis=(0, 2, 3))
            centered = T.sub(feats, T.reshape(mu, (1, -1, 1, 1)))
            var = T.tmean(T.mul(centered, centered), axis=(0, 2, 3))
            inv = T.power(T.add(var, BN_EPS), -0.5)
            normed = T.mul(centered, T.reshape(inv, (1, -1, 1, 1)))
            out = T.add(T.mul(normed, T.reshape(gamma, (1, -1, 1, 1))),
                        T.reshape(beta, (1, -1, 1, 1)))
            m = BN_MOMENTUM
            self.buffers["head.bn.mean"] = (
                (1 - m) * self.buffers["head.bn.mean"] + m * mu.data)
            self.buffers["head.bn.var"] = (
                (1 - m) * self.buffers["head.bn.var"] + m * var.data)
        else:
            out = T.batchnorm_infer(feats, self.buffers["head.bn.mean"],
                                    self.buffers["head.bn.var"], gamma, beta,
                                    eps=BN_EPS)
        pooled = T.global_avg_pool(out)
        return T.linear(pooled, self._p("head.fc.w"), self._p("head.fc.b"))

    # -- persistence -------------------------------------------------------

    def state_tensors(self) -> dict[str, np.ndarray]:
        state = {name: p.data for name, p in self.params.items()}
        state.update(self.buffers)
        return state

    def load_state(self, tensors: dict[str, np.ndarray]):
        for name, p in self.params.items():
            if name not in tensors:
                raise ContractError(f"checkpoint missing tensor {name!r}")
            if tensors[name].shape != p.data.shape:
                raise ContractError(
                    f"tensor {name!r} shape {tensors[name].shape} != "
                    f"{p.data.shape}")
            p.data = tensors[name].astype(self.dtype, copy=True)
            p.grad = None
        for name in self.buffers:
            if name in tensors:
                self.buffers[name] = tensors[name].astype(self.dtype, copy=True)

    def to_checkpoint(self, step: int = 0, seed: int | None = None,
                      extra_config: dict | None = None) -> Checkpoint:
        config = self.config.as_dict()
        if extra_config:
            config.update(extra_config)
        return Checkpoint(config=config, tensors=self.state_tensors(),
                          step=step, seed=self.seed if seed is None else seed)

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint, dtype=None) -> "Model":
        config = ModelConfig.from_dict(ckpt.config)
        sample_tensor = next(iter(ckpt.tensors.values()))
        model = cls(config, seed=int(ckpt.seed),
                    dtype=dtype or sample_tensor.dtype)
        model.load_state(ckpt.tensors)
        return model


def build_model(config_or_preset, seed: int = 0, dtype=np.float32,
                **overrides) -> Model:
    if isinstance(config_or_preset, str):
        config = preset(config_or_preset, **overrides)
    elif overrides:
        config = replace(config_or_preset, **overrides)
    else:
        config = config_or_preset
    return Model(config, seed=seed, dtype=dtype)


# -- analytic FLOP counting -----------------------------------------------

def _conv_flops(cin: int, cout: int, k: int, out_hw: int, groups: int = 1) -> int:
    return (cin // groups) * cout * k * k * out_hw + cout * out_hw


def count_flops(config: ModelConfig, height: int = 224, width: int = 224) -> int:
    """Forward cost for one image at the given resolution.

    Counts one FLOP per multiply-accumulate in convolutions, linear
    projections, the scan recurrence (3/element: two for the state
    update, one for the readout), discretization (2/element), and
    bilinear resampling (8/output element). Pointwise nonlinearities and
    normalizations are excluded — the convention common profilers use.
    """
    if height % 32 or width % 32:
        raise ShapeError(f"input {height}x{width} not divisible by 32")
    total = 0
    c1 = config.channels[0]
    mid = max(c1 // 2, 1)
    h2, w2 = height // 2, width // 2
    h4, w4 = height // 4, width // 4
    total += _conv_flops(3, mid, 3, h2 * w2)
    total += _conv_flops(mid, mid, 3, h2 * w2)
    total += _conv_flops(mid, c1, 3, h4 * w4)
    total += _conv_flops(c1, c1, 3, h4 * w4)

    gh, gw = h4, w4
    for s, (ch, nblocks) in enumerate(zip(config.channels, config.blocks)):
        L = gh * gw
        d = ch * config.expansion
        n = config.state_size
        hidden = ch * config.ffn_ratio
        per_block = 0
        if config.use_convpos:
            per_block += _conv_flops(ch, ch, 3, L, groups=ch)
        if config.use_das:
            per_block += _conv_flops(ch, ch, 3, L, groups=ch)  # offset trunk
            per_block += L * ch * 2                            # offset head
            per_block += 8 * L * ch                            # bilinear gather
        per_block += L * ch * 2 * d                            # in_proj
        per_block += L * d * (1 + 2 * n)                       # step/B/C proj
        per_block += 2 * L * d * n                             # discretization
        per_block += 3 * L * d * n                             # scan recurrence
        per_block += L * d * ch                                # out_proj
        per_block += L * ch * hidden                           # ffn.w1
        if config.use_convffn:
            per_block += _conv_flops(hidden, hidden, 3, L, groups=hidden)
        per_block += L * hidden * ch                           # ffn.w2
        total += per_block * nblocks
        if s < 3:
            gh, gw = gh // 2, gw // 2
            total += _conv_flops(ch, config.channels[s + 1], 3, gh * gw)
    c4 = config.channels[3]
    total += gh * gw * c4                                      # pooling
    total += c4 * config.num_classes                           # classifier
    return int(total)
