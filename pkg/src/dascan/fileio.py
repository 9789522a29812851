"""Binary containers for tensors and checkpoints.

Tensor format (DTNS v1)
-----------------------
    magic   4 bytes  b"DTNS"
    version u8       1
    dtype   u8       0 = float32, 1 = float64
    rank    u8
    extents rank x u64, little-endian
    values  raw little-endian floats, row-major

Checkpoint format (DCKP v1)
---------------------------
    magic   4 bytes  b"DCKP"
    version u8       1
    step    u64      training step counter
    seed    u64      RNG seed the run was started with
    config  u32 byte length + canonical config text (sorted "key=value\\n",
            utf-8)
    count   u32      number of named tensors
    entries count x (u16 name length, utf-8 name, DTNS blob)

Round-trips are bit-exact; corrupt magic or a truncated payload raises
FormatError rather than crashing.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError
from .tensor import Tensor

TENSOR_MAGIC = b"DTNS"
CHECKPOINT_MAGIC = b"DCKP"

_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_CODE_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


def _read_exact(fh, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise FormatError(f"truncated payload: wanted {n} bytes, got {len(buf)}")
    return buf


def write_tensor(fh, array) -> None:
    """Serialize one array (or Tensor) into an open binary stream."""
    if isinstance(array, Tensor):
        array = array.data
    array = np.asarray(array)
    if array.ndim:  # ascontiguousarray would promote rank 0 to shape (1,)
        array = np.ascontiguousarray(array)
    if array.dtype not in _DTYPE_CODES:
        raise FormatError(f"unsupported dtype {array.dtype}; use float32/float64")
    fh.write(TENSOR_MAGIC)
    fh.write(struct.pack("<BBB", 1, _DTYPE_CODES[array.dtype], array.ndim))
    fh.write(struct.pack(f"<{array.ndim}Q", *array.shape))
    fh.write(array.astype(array.dtype.newbyteorder("<"), copy=False).tobytes())


def read_tensor(fh) -> np.ndarray:
    magic = _read_exact(fh, 4)
    if magic != TENSOR_MAGIC:
        raise FormatError(f"bad tensor magic {magic!r}")
    version, code, rank = struct.unpack("<BBB", _read_exact(fh, 3))
    if version != 1:
        raise FormatError(f"unsupported tensor format version {version}")
    if code not in _CODE_DTYPES:
        raise FormatError(f"unknown dtype code {code}")
    shape = struct.unpack(f"<{rank}Q", _read_exact(fh, 8 * rank))
    dtype = _CODE_DTYPES[code]
    count = 1
    for s in shape:
        count *= s
    data = np.frombuffer(_read_exact(fh, count * dtype.itemsize), dtype=dtype)
    return data.reshape(shape).astype(dtype.newbyteorder("="), copy=True)


def save_tensor(path, array) -> None:
    with open(path, "wb") as fh:
        write_tensor(fh, array)


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return read_tensor(fh)


# -- checkpoints ---------------------------------------------------------

def canonical_config_text(config: dict) -> str:
    """Stable key=value rendering: sorted keys, repr-free scalar values."""
    lines = []
    for key in sorted(config):
        value = config[key]
        if isinstance(value, bool):
            value = "true" if value else "false"
        elif isinstance(value, (tuple, list)):
            value = ",".join(str(v) for v in value)
        lines.append(f"{key}={value}")
    return "".join(line + "\n" for line in lines)


@dataclass
class Checkpoint:
    """Everything needed to rebuild and evaluate a trained model."""

    config: dict
    tensors: dict[str, np.ndarray]
    step: int = 0
    seed: int = 0
    extra: dict = field(default_factory=dict)  # not serialized

    def to_bytes(self) -> bytes:
        out = io.BytesIO()
        out.write(CHECKPOINT_MAGIC)
        out.write(struct.pack("<BQQ", 1, self.step, self.seed))
        text = canonical_config_text(self.config).encode("utf-8")
        out.write(struct.pack("<I", len(text)))
        out.write(text)
        out.write(struct.pack("<I", len(self.tensors)))
        for name in sorted(self.tensors):
            encoded = name.encode("utf-8")
            out.write(struct.pack("<H", len(encoded)))
            out.write(encoded)
            write_tensor(out, self.tensors[name])
        return out.getvalue()

    @classmethod
    def from_bytes(cls, blob: bytes) -> "Checkpoint":
        fh = io.BytesIO(blob)
        magic = _read_exact(fh, 4)
        if magic != CHECKPOINT_MAGIC:
            raise FormatError(f"bad checkpoint magic {magic!r}")
        version, step, seed = struct.unpack("<BQQ", _read_exact(fh, 17))
        if version != 1:
            raise FormatError(f"unsupported checkpoint version {version}")
        text_len, = struct.unpack("<I", _read_exact(fh, 4))
        text = _read_exact(fh, text_len).decode("utf-8")
        config = parse_config_text(text)
        count, = struct.unpack("<I", _read_exact(fh, 4))
        tensors = {}
        for _ in range(count):
            name_len, = struct.unpack("<H", _read_exact(fh, 2))
            name = _read_exact(fh, name_len).decode("utf-8")
            tensors[name] = read_tensor(fh)
        return cls(config=config, tensors=tensors, step=step, seed=seed)

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> "Checkpoint":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


def parse_config_text(text: str) -> dict:
    """Inverse of canonical_config_text, with typed scalar recovery."""
    config: dict = {}
    for raw in text.splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise FormatError(f"config line without '=': {line!r}")
        key, value = line.split("=", 1)
        config[key.strip()] = _parse_scalar(value.strip())
    return config


def _parse_scalar(value: str):
    if value == "true":
        return True
    if value == "false":
        return False
    if "," in value:
        return tuple(_parse_scalar(v) for v in value.split(","))
    try:
        return int(value)
    except ValueError:
        pass
    try:
        return float(value)
    except ValueError:
        pass
    return value
