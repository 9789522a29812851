"""Synthetic displaced-glyph classification data, plus PPM/PGM image I/O.

Each sample is a 3x64x64 float image in [0, 1]: a smooth random
background, speckle noise, a handful of small distractor strokes, and
one class-defining glyph drawn off-center at a random displacement and
scale. Class identity is carried by glyph *shape* only: color, position
and total pixel count are randomized identically across classes (every
kind is solved to the same area band), so neither global color
statistics nor glyph mass give the label away — a classifier has to
resolve faint local spatial structure out of clutter.

Generation is stateless per sample: sample ``i`` of seed ``s`` is drawn
from ``default_rng(SeedSequence([s, i]))``, so datasets of different
lengths share a prefix and workers could generate slices independently.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError, DomainError, FormatError

GLYPHS = ("hbar", "vbar", "cross", "blob", "ring", "diagx")

IMAGE_SIZE = 64
MAX_GLYPH_PIXELS = 409          # <= 10% of a 64x64 canvas
NOISE_SIGMA = 0.05
DISPLACEMENT = (8.0, 16.0)      # glyph-center distance from image center, px
GLYPH_AREA = (90.0, 130.0)      # target glyph pixel count, shared by all kinds
GLYPH_TINT = (0.25, 0.35)       # per-channel glyph contrast magnitude
DISTRACTOR_TINT = 0.12          # distractor strokes stay at/below glyph contrast


def _upsample_bilinear(field: np.ndarray, size: int) -> np.ndarray:
    """(h, w) -> (size, size) by separable linear interpolation."""
    h, w = field.shape
    ys = np.linspace(0.0, h - 1.0, size)
    xs = np.linspace(0.0, w - 1.0, size)
    y0 = np.minimum(ys.astype(np.int64), h - 2)
    x0 = np.minimum(xs.astype(np.int64), w - 2)
    wy = (ys - y0)[:, None]
    wx = (xs - x0)[None, :]
    tl = field[np.ix_(y0, x0)]
    tr = field[np.ix_(y0, x0 + 1)]
    bl = field[np.ix_(y0 + 1, x0)]
    br = field[np.ix_(y0 + 1, x0 + 1)]
    top = tl * (1 - wx) + tr * wx
    bot = bl * (1 - wx) + br * wx
    return top * (1 - wy) + bot * wy


def _glyph_mask(kind: str, size: int, cy: float, cx: float, radius: float,
                thickness: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    box = (np.abs(dy) <= radius) & (np.abs(dx) <= radius)
    if kind == "hbar":
        return (np.abs(dy) <= thickness) & (np.abs(dx) <= radius)
    if kind == "vbar":
        return (np.abs(dx) <= thickness) & (np.abs(dy) <= radius)
    if kind == "cross":
        return ((np.abs(dy) <= thickness) | (np.abs(dx) <= thickness)) & box
    if kind == "blob":
        return dy * dy + dx * dx <= radius * radius
    if kind == "ring":
        d2 = dy * dy + dx * dx
        inner = max(radius - 2.0 * thickness, 1.0)
        return (d2 <= radius * radius) & (d2 >= inner * inner)
    if kind == "diagx":
        return ((np.abs(dy - dx) <= thickness) | (np.abs(dy + dx) <= thickness)) & box
    raise ContractError(f"unknown glyph kind {kind!r}")


def _glyph_geometry(kind: str, area: float) -> tuple[float, float]:
    """Solve (radius, thickness) so the kind's mask covers ~``area`` pixels.

    Bars run thicker than the cross/ring strokes so every kind lands in
    the same pixel-count band; class identity then never leaks into the
    glyph's total mass, only into how that mass is arranged. The
    closed forms invert the expected pixel counts of the masks above
    (a band |d| <= t covers 2t + 0.5 rows on average over sub-pixel
    centers).
    """
    if kind in ("hbar", "vbar"):
        return 9.5, area / 40.0 + 0.07     # fixed 20px length, area sets girth
    if kind == "cross":
        return ((area + 12.25) / 5.74 - 1.0) / 2.0, 1.5
    if kind == "blob":
        return float(np.sqrt(area / np.pi)), 1.5
    if kind == "ring":
        return area / (6.0 * np.pi) + 1.5, 1.5
    if kind == "diagx":
        return ((area + 9.0) / 5.53 - 1.0) / 2.0, 1.5
    raise ContractError(f"unknown glyph kind {kind!r}")


def _render_sample(rng: np.random.Generator, label: int,
                   size: int) -> np.ndarray:
    # smooth per-channel background from an upsampled coarse field
    img = np.empty((3, size, size), dtype=np.float64)
    for c in range(3):
        coarse = rng.uniform(0.3, 0.6, (8, 8))
        img[c] = _upsample_bilinear(coarse, size)

    # distractor strokes: sub-glyph-scale bars and dots at glyph contrast
    for _ in range(rng.integers(2, 5)):
        py, px = rng.uniform(4, size - 4, 2)
        length = rng.uniform(1.5, 3.0)
        kind = ("hbar", "vbar", "blob")[rng.integers(0, 3)]
        mask = _glyph_mask(kind, size, py, px, length,
                           1.0 if kind != "blob" else length)
        tint = rng.uniform(-DISTRACTOR_TINT, DISTRACTOR_TINT, 3)
        img += mask * tint[:, None, None]

    # the class glyph: displaced from center, random mass and faint color
    angle = rng.uniform(0.0, 2.0 * np.pi)
    dist = rng.uniform(*DISPLACEMENT)
    cy = size / 2.0 + dist * np.sin(angle)
    cx = size / 2.0 + dist * np.cos(angle)
    area = rng.uniform(*GLYPH_AREA)
    radius, thickness = _glyph_geometry(GLYPHS[label], area)
    mask = _glyph_mask(GLYPHS[label], size, cy, cx, radius, thickness)
    assert mask.sum() <= MAX_GLYPH_PIXELS
    tint = rng.uniform(*GLYPH_TINT, 3) * rng.choice((-1.0, 1.0))
    img += mask * tint[:, None, None]

    img += rng.normal(0.0, NOISE_SIGMA, img.shape)
    return np.clip(img, 0.0, 1.0)


def generate_dataset(num_samples: int, num_classes: int, seed: int,
                     image_size: int = IMAGE_SIZE):
    """Return ``(images, labels)``: float32 (N, 3, S, S) in [0, 1], int64 (N,).

    ``num_classes`` must be in [2, 6] (one glyph shape per class) and
    must divide ``num_samples`` so the label distribution is exactly
    balanced. Labels cycle 0..K-1, so any prefix is near-balanced too.
    """
    if not 2 <= num_classes <= len(GLYPHS):
        raise DomainError(
            f"num_classes must be in [2, {len(GLYPHS)}], got {num_classes}")
    if num_samples <= 0 or num_samples % num_classes:
        raise ContractError(
            f"num_samples ({num_samples}) must be a positive multiple of "
            f"num_classes ({num_classes})")
    images = np.empty((num_samples, 3, image_size, image_size),
                      dtype=np.float32)
    labels = np.arange(num_samples, dtype=np.int64) % num_classes
    for i in range(num_samples):
        rng = np.random.default_rng(np.random.SeedSequence([seed, i]))
        images[i] = _render_sample(rng, int(labels[i]), image_size)
    return images, labels


def train_eval_split(images: np.ndarray, labels: np.ndarray,
                     eval_fraction: float = 0.1):
    """Deterministic stratified split -> (train_x, train_y, eval_x, eval_y).

    The last ``eval_fraction`` of each class's samples (in dataset
    order) go to the eval set, so the split is reproducible and every
    class is represented on both sides.
    """
    if not 0.0 < eval_fraction < 1.0:
        raise DomainError(f"eval_fraction must be in (0, 1), got {eval_fraction}")
    eval_idx = []
    for cls in np.unique(labels):
        members = np.flatnonzero(labels == cls)
        n_eval = max(1, int(round(len(members) * eval_fraction)))
        eval_idx.append(members[len(members) - n_eval:])
    eval_idx = np.sort(np.concatenate(eval_idx))
    mask = np.zeros(len(labels), dtype=bool)
    mask[eval_idx] = True
    return images[~mask], labels[~mask], images[mask], labels[mask]


# -- portable pixmap I/O ------------------------------------------------------

def _to_bytes(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)


def write_ppm(path, img: np.ndarray):
    """Write a (3, H, W) float image in [0, 1] as binary PPM (P6)."""
    if img.ndim != 3 or img.shape[0] != 3:
        raise ContractError(f"expected (3, H, W), got {img.shape}")
    h, w = img.shape[1], img.shape[2]
    data = _to_bytes(img).transpose(1, 2, 0).tobytes()
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(data)


def write_pgm(path, img: np.ndarray):
    """Write a (H, W) float image in [0, 1] as binary PGM (P5)."""
    if img.ndim != 2:
        raise ContractError(f"expected (H, W), got {img.shape}")
    h, w = img.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(_to_bytes(img).tobytes())


def _read_pnm_tokens(raw: bytes, count: int):
    """Yield `count` whitespace-separated header tokens, skipping # comments.

    Returns (tokens, offset of the first raster byte)."""
    tokens = []
    i = 0
    while len(tokens) < count:
        if i >= len(raw):
            raise FormatError("truncated pixmap header")
        ch = raw[i:i + 1]
        if ch.isspace():
            i += 1
        elif ch == b"#":
            j = raw.find(b"\n", i)
            i = len(raw) if j < 0 else j + 1
        else:
            j = i
            while j < len(raw) and not raw[j:j + 1].isspace():
                j += 1
            tokens.append(raw[i:j])
            i = j
    return tokens, i + 1  # single whitespace byte after the last token


def _read_pnm(path, magic: bytes, channels: int) -> np.ndarray:
    with open(path, "rb") as f:
        raw = f.read()
    tokens, offset = _read_pnm_tokens(raw, 4)
    if tokens[0] != magic:
        raise FormatError(f"bad pixmap magic {tokens[0]!r}, wanted {magic!r}")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError as e:
        raise FormatError(f"non-numeric pixmap header field: {e}") from e
    if maxval != 255:
        raise FormatError(f"only maxval 255 supported, got {maxval}")
    need = w * h * channels
    data = raw[offset:offset + need]
    if len(data) != need:
        raise FormatError(f"pixmap raster has {len(data)} bytes, need {need}")
    arr = np.frombuffer(data, dtype=np.uint8).astype(np.float32) / 255.0
    if channels == 1:
        return arr.reshape(h, w)
    return arr.reshape(h, w, channels).transpose(2, 0, 1)


def read_ppm(path) -> np.ndarray:
    """Read binary PPM (P6) into a (3, H, W) float32 image in [0, 1]."""
    return _read_pnm(path, b"P6", 3)


def read_pgm(path) -> np.ndarray:
    """Read binary PGM (P5) into a (H, W) float32 image in [0, 1]."""
    return _read_pnm(path, b"P5", 1)
