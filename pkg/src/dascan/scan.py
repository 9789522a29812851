"""Patch traversal orders and the offset-predicted adaptive scan.

A ScanPlan couples a traversal order (a permutation of the H*W patch
slots, raster indexed) with the normalized source coordinate each patch's
features were read from. Fixed strategies (sweeping raster, boustrophedon
"continuous" snake, window-local raster) keep identity coordinates; the
dynamic adaptive scan keeps the raster order but resamples every patch
from an offset-predicted location, so the effective traversal adapts to
the input while the sequence layout stays fixed for the mixer.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ContractError, DomainError, FormatError, ShapeError
from .sampling import identity_grid, sample
from .tensor import Tensor


@dataclass
class ScanPlan:
    """Traversal order plus per-patch normalized source coordinates.

    order[slot] = flat raster index of the patch visited at that slot.
    source_coords: (H, W, 2) clamped normalized coordinates (f64).
    raw_coords: pre-clamp prediction, kept so downstream consumers can
    see which slots were clamped; None for fixed strategies.
    """

    height: int
    width: int
    order: np.ndarray
    source_coords: np.ndarray
    raw_coords: np.ndarray | None = field(default=None)

    def __post_init__(self):
        self.order = np.asarray(self.order, dtype=np.int64)
        self.validate()

    @property
    def slots(self) -> int:
        return self.height * self.width

    def validate(self):
        n = self.slots
        if self.order.shape != (n,):
            raise ContractError(
                f"order must have {n} entries, got shape {self.order.shape}")
        if not np.array_equal(np.sort(self.order), np.arange(n)):
            raise ContractError("order is not a permutation of the patch slots")
        if self.source_coords.shape[-3:] != (self.height, self.width, 2):
            raise ContractError(
                f"source_coords shape {self.source_coords.shape} does not "
                f"match a {self.height}x{self.width} grid")

    def inverse_order(self) -> np.ndarray:
        inv = np.empty_like(self.order)
        inv[self.order] = np.arange(self.order.size)
        return inv

    def serialize(self) -> str:
        """One line per slot: slot_index,src_x_norm,src_y_norm.

        Two leading comment lines carry the grid shape and the order so
        the plan round-trips exactly; floats are written with repr
        precision.
        """
        coords = self.source_coords
        if coords.ndim == 4:  # batched plan: serialize the first element
            coords = coords[0]
        out = io.StringIO()
        out.write(f"# grid {self.height} {self.width}\n")
        out.write("# order " + " ".join(str(i) for i in self.order) + "\n")
        flat = coords.reshape(-1, 2)
        for slot, patch in enumerate(self.order):
            x, y = flat[patch]
            out.write(f"{slot},{float(x)!r},{float(y)!r}\n")
        return out.getvalue()

    @classmethod
    def parse(cls, text: str) -> "ScanPlan":
        height = width = None
        order = None
        rows = []
        for line in text.splitlines():
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                parts = line[1:].split()
                if parts and parts[0] == "grid":
                    height, width = int(parts[1]), int(parts[2])
                elif parts and parts[0] == "order":
                    order = np.array([int(p) for p in parts[1:]], dtype=np.int64)
                continue
            fields = line.split(",")
            if len(fields) != 3:
                raise FormatError(f"bad plan line: {line!r}")
            rows.append((int(fields[0]), float(fields[1]), float(fields[2])))
        if height is None or order is None:
            raise FormatError("plan text missing grid/order header")
        if len(rows) != height * width:
            raise FormatError(
                f"expected {height * width} slot lines, got {len(rows)}")
        coords = np.zeros((height * width, 2), dtype=np.float64)
        for slot, x, y in rows:
            if not 0 <= slot < height * width:
                raise FormatError(f"slot index {slot} out of range")
            coords[order[slot]] = (x, y)
        return cls(height=height, width=width, order=order,
                   source_coords=coords.reshape(height, width, 2))


# -- fixed strategies ----------------------------------------------------

def _check_grid(height: int, width: int):
    if height < 1 or width < 1:
        raise DomainError(f"grid extents must be positive, got {height}x{width}")


def sweeping_scan(height: int, width: int) -> ScanPlan:
    """Plain raster: rows top to bottom, each row left to right."""
    _check_grid(height, width)
    return ScanPlan(height, width, np.arange(height * width),
                    identity_grid(height, width))


def continuous_scan(height: int, width: int) -> ScanPlan:
    """Boustrophedon snake: alternate rows reverse, so consecutive slots
    are always grid neighbors."""
    _check_grid(height, width)
    rows = np.arange(height * width).reshape(height, width)
    rows[1::2] = rows[1::2, ::-1].copy()
    return ScanPlan(height, width, rows.reshape(-1),
                    identity_grid(height, width))


def local_scan(height: int, width: int, window: int) -> ScanPlan:
    """Raster over window tiles, raster within each tile; edge tiles may
    be ragged. window must be >= 1 and no larger than max(H, W)."""
    _check_grid(height, width)
    if window < 1:
        raise DomainError(f"window must be >= 1, got {window}")
    if window > max(height, width):
        raise DomainError(
            f"window {window} exceeds grid extent max({height},{width})")
    order = []
    for by in range(0, height, window):
        for bx in range(0, width, window):
            for y in range(by, min(by + window, height)):
                for x in range(bx, min(bx + window, width)):
                    order.append(y * width + x)
    return ScanPlan(height, width, np.array(order),
                    identity_grid(height, width))


# -- offset prediction network --------------------------------------------

@dataclass
class OffsetNet:
    """Per-patch offset predictor: depthwise 3x3 conv -> layernorm ->
    GELU -> linear to 2 offset channels, tanh-bounded by offset_range.

    The final linear starts at zero, so a fresh network predicts exactly
    zero offsets everywhere.
    """

    conv_w: Tensor  # (C, 1, 3, 3)
    conv_b: Tensor  # (C,)
    norm_g: Tensor  # (C,)
    norm_b: Tensor  # (C,)
    out_w: Tensor   # (C, 2)
    out_b: Tensor   # (2,)
    offset_range: float = 0.5

    @property
    def channels(self) -> int:
        return self.conv_w.shape[0]

    def tensors(self) -> dict[str, Tensor]:
        return {"conv_w": self.conv_w, "conv_b": self.conv_b,
                "norm_g": self.norm_g, "norm_b": self.norm_b,
                "out_w": self.out_w, "out_b": self.out_b}

    def forward(self, fmap: Tensor) -> Tensor:
        """fmap (..., H, W, C) -> offsets (..., H, W, 2), |offset| <=
        offset_range."""
        fmap = T._as_tensor(fmap)
        if fmap.shape[-1] != self.channels:
            raise ShapeError(
                f"feature channels {fmap.shape[-1]} != offset net width "
                f"{self.channels}")
        batched = fmap.data.ndim == 4
        x = T.transpose(fmap, (0, 3, 1, 2) if batched else (2, 0, 1))
        x = T.conv2d(x, self.conv_w, self.conv_b, padding=1,
                     groups=self.channels)
        x = T.transpose(x, (0, 2, 3, 1) if batched else (1, 2, 0))
        x = T.add(T.mul(T.layernorm(x), self.norm_g), self.norm_b)
        x = T.gelu(x)
        raw = T.linear(x, self.out_w, self.out_b)
        return T.mul(T.tanh(raw), float(self.offset_range))


def init_offset_net(channels: int, seed: int = 0, dtype=np.float64,
                    offset_range: float = 0.5) -> OffsetNet:
    rng = np.random.default_rng(seed)
    he = np.sqrt(2.0 / 9.0)
    return OffsetNet(
        conv_w=T.parameter(rng.normal(0.0, he, (channels, 1, 3, 3)).astype(dtype)),
        conv_b=T.parameter(np.zeros(channels, dtype=dtype)),
        norm_g=T.parameter(np.ones(channels, dtype=dtype)),
        norm_b=T.parameter(np.zeros(channels, dtype=dtype)),
        out_w=T.parameter(np.zeros((channels, 2), dtype=dtype)),
        out_b=T.parameter(np.zeros(2, dtype=dtype)),
        offset_range=offset_range,
    )


# -- dynamic adaptive scan -------------------------------------------------

def dynamic_adaptive_scan(fmap: Tensor, opn: OffsetNet) -> tuple[ScanPlan, Tensor]:
    """Resample every patch from its offset-predicted source location.

    fmap: (..., H, W, C). Predicted offsets displace the identity grid,
    the result is clamped to [-1, 1], and the feature map is bilinearly
    resampled there; traversal order stays raster (the adaptivity lives
    in where each slot's features come from). With a freshly initialized
    offset net the resampled map equals the input bit-for-bit.

    Returns (plan, resampled); the plan records clamped and pre-clamp
    coordinates as plain arrays (detached from the graph).
    """
    fmap = T._as_tensor(fmap)
    if fmap.data.ndim not in (3, 4):
        raise ShapeError(f"feature map must be (..., H, W, C), got {fmap.shape}")
    H, W = fmap.shape[-3], fmap.shape[-2]
    offsets = opn.forward(fmap)
    if offsets.dtype != np.float64:
        # coordinate math always runs in f64 (lattice snapping needs it);
        # an explicit cast node keeps the gradient f32 upstream of here
        offsets = offsets.astype(np.float64)
    base = Tensor(identity_grid(H, W))
    raw = T.add(base, offsets)
    clamped = T.clamp(raw, -1.0, 1.0)
    resampled = sample(clamped, fmap)
    plan = ScanPlan(H, W, np.arange(H * W),
                    np.array(clamped.data, copy=True),
                    raw_coords=np.array(raw.data, copy=True))
    return plan, resampled


# -- sequence layout -------------------------------------------------------

def apply_plan(fmap: Tensor, plan: ScanPlan) -> Tensor:
    """(..., H, W, C) -> (..., L, C) token sequence in traversal order."""
    fmap = T._as_tensor(fmap)
    if fmap.shape[-3] != plan.height or fmap.shape[-2] != plan.width:
        raise ShapeError(
            f"feature map {fmap.shape} does not match plan grid "
            f"{plan.height}x{plan.width}")
    plan.validate()
    lead = fmap.shape[:-3]
    flat = T.reshape(fmap, lead + (plan.slots, fmap.shape[-1]))
    return T.take_tokens(flat, plan.order)


def unapply_plan(seq: Tensor, plan: ScanPlan) -> Tensor:
    """Inverse of apply_plan: scatter tokens back to their grid positions."""
    seq = T._as_tensor(seq)
    if seq.shape[-2] != plan.slots:
        raise ShapeError(
            f"sequence length {seq.shape[-2]} != plan slots {plan.slots}")
    plan.validate()
    grid_order = T.take_tokens(seq, plan.inverse_order())
    lead = seq.shape[:-2]
    return T.reshape(grid_order,
                     lead + (plan.height, plan.width, seq.shape[-1]))
