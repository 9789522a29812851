"""Round-trip and corruption tests for the DTNS/DCKP binary containers."""

import io
import struct

import numpy as np
import pytest

from dascan.errors import FormatError
from dascan.fileio import (
    Checkpoint,
    canonical_config_text,
    load_tensor,
    parse_config_text,
    read_tensor,
    save_tensor,
    write_tensor,
)


def roundtrip(array):
    buf = io.BytesIO()
    write_tensor(buf, array)
    buf.seek(0)
    return read_tensor(buf)


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_tensor_roundtrip_is_bit_exact(dtype):
    rng = np.random.default_rng(0)
    arr = rng.standard_normal((3, 4, 5)).astype(dtype)
    back = roundtrip(arr)
    assert back.dtype == arr.dtype
    assert np.array_equal(back, arr)
    assert back.tobytes() == arr.tobytes()


def test_tensor_roundtrip_edge_shapes():
    for arr in [np.float64(3.5) * np.ones(()),  # rank 0
                np.zeros((0,), dtype=np.float32),  # empty
                np.arange(7.0)]:
        back = roundtrip(np.asarray(arr))
        assert back.shape == np.asarray(arr).shape
        assert np.array_equal(back, arr)


def test_tensor_preserves_nan_and_inf_payloads():
    arr = np.array([np.nan, np.inf, -np.inf, -0.0])
    back = roundtrip(arr)
    assert back.tobytes() == arr.tobytes()


def test_non_float_dtype_rejected():
    with pytest.raises(FormatError):
        write_tensor(io.BytesIO(), np.arange(4))  # int64


def test_bad_magic_raises():
    buf = io.BytesIO()
    write_tensor(buf, np.ones(3))
    blob = bytearray(buf.getvalue())
    blob[:4] = b"NOPE"
    with pytest.raises(FormatError, match="magic"):
        read_tensor(io.BytesIO(bytes(blob)))


def test_truncated_payload_raises():
    buf = io.BytesIO()
    write_tensor(buf, np.ones((4, 4)))
    blob = buf.getvalue()
    with pytest.raises(FormatError, match="truncated"):
        read_tensor(io.BytesIO(blob[:-8]))


def test_unknown_dtype_code_raises():
    buf = io.BytesIO()
    write_tensor(buf, np.ones(2))
    blob = bytearray(buf.getvalue())
    blob[5] = 7  # dtype code byte
    with pytest.raises(FormatError, match="dtype"):
        read_tensor(io.BytesIO(bytes(blob)))


def test_save_load_tensor_via_path(tmp_path):
    arr = np.linspace(0, 1, 11, dtype=np.float32)
    path = tmp_path / "t.dtns"
    save_tensor(path, arr)
    assert np.array_equal(load_tensor(path), arr)


# -- config text -----------------------------------------------------------


def test_canonical_config_text_sorts_keys():
    text = canonical_config_text({"b": 2, "a": 1})
    assert text == "a=1\nb=2\n"


def test_canonical_config_text_is_input_order_independent():
    a = canonical_config_text({"x": 1.5, "y": True, "z": "micro"})
    b = canonical_config_text({"z": "micro", "y": True, "x": 1.5})
    assert a == b


def test_config_text_roundtrips_types():
    config = {
        "preset": "micro",
        "lr": 0.001,
        "epochs": 12,
        "use_das": True,
        "use_convffn": False,
        "channels": (16, 32, 64, 64),
    }
    back = parse_config_text(canonical_config_text(config))
    assert back == config
    assert isinstance(back["lr"], float)
    assert isinstance(back["epochs"], int)
    assert isinstance(back["use_das"], bool)
    assert back["channels"] == (16, 32, 64, 64)


def test_parse_config_skips_comments_and_blanks():
    parsed = parse_config_text("# header\n\nlr=0.1\n  # note\nseed=3\n")
    assert parsed == {"lr": 0.1, "seed": 3}


def test_parse_config_rejects_bare_token():
    with pytest.raises(FormatError):
        parse_config_text("justaword\n")


# -- checkpoints -------------------------------------------------------------


def make_checkpoint():
    rng = np.random.default_rng(1)
    return Checkpoint(
        config={"preset": "micro", "seed": 5, "lr": 0.01},
        tensors={
            "w": rng.standard_normal((4, 3)),
            "b": rng.standard_normal(3).astype(np.float32),
        },
        step=17,
        seed=5,
    )


def test_checkpoint_roundtrip_bit_exact(tmp_path):
    ckpt = make_checkpoint()
    path = tmp_path / "model.dckp"
    ckpt.save(path)
    back = Checkpoint.load(path)
    assert back.step == 17
    assert back.seed == 5
    assert back.config == ckpt.config
    assert set(back.tensors) == {"w", "b"}
    for name in ckpt.tensors:
        assert back.tensors[name].tobytes() == ckpt.tensors[name].tobytes()
        assert back.tensors[name].dtype == ckpt.tensors[name].dtype


def test_checkpoint_serialization_is_deterministic():
    # same contents -> same bytes, regardless of dict insertion order
    a = make_checkpoint()
    b = make_checkpoint()
    b.tensors = dict(reversed(list(b.tensors.items())))
    b.config = dict(reversed(list(b.config.items())))
    assert a.to_bytes() == b.to_bytes()


def test_checkpoint_bad_magic():
    blob = bytearray(make_checkpoint().to_bytes())
    blob[0] = 0x58
    with pytest.raises(FormatError, match="magic"):
        Checkpoint.from_bytes(bytes(blob))


def test_checkpoint_truncation_detected():
    blob = make_checkpoint().to_bytes()
    with pytest.raises(FormatError):
        Checkpoint.from_bytes(blob[: len(blob) // 2])


def test_checkpoint_step_and_seed_header():
    # step/seed live in the fixed header; check against a hand-built layout
    ckpt = Checkpoint(config={}, tensors={}, step=258, seed=77)
    blob = ckpt.to_bytes()
    assert blob[:4] == b"DCKP"
    version, step, seed = struct.unpack("<BQQ", blob[4:21])
    assert (version, step, seed) == (1, 258, 77)
