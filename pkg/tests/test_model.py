"""Backbone tests: presets and parameter accounting, forward shapes,
the fresh-model scan-path equivalence, feature toggles, and checkpoint
round-trips."""

import numpy as np
import pytest

from dascan.errors import ContractError, ShapeError
from dascan.fileio import Checkpoint
from dascan.model import (
    Model,
    ModelConfig,
    build_model,
    count_flops,
    count_params,
    preset,
)


def micro(**overrides):
    defaults = dict(num_classes=4)
    defaults.update(overrides)
    return preset("micro", **defaults)


# -- presets and bookkeeping ---------------------------------------------------

def test_preset_names_and_rejection():
    for name in ("micro", "tiny", "small", "base"):
        cfg = preset(name)
        assert len(cfg.channels) == 4 and len(cfg.blocks) == 4
    with pytest.raises(ContractError):
        preset("medium")


def test_micro_preset_runs_narrow_state():
    assert preset("micro").state_size == 8
    # published scales keep the full state; the dataclass default matches
    assert preset("tiny").state_size == 16
    assert ModelConfig().state_size == 16


def test_preset_overrides_win():
    cfg = preset("micro", num_classes=7, use_das=False, state_size=4)
    assert cfg.num_classes == 7 and not cfg.use_das and cfg.state_size == 4


def test_config_needs_four_stages():
    with pytest.raises(ContractError):
        ModelConfig(channels=(8, 8, 8), blocks=(1, 1, 1))


def test_param_counts_at_published_scales():
    # frozen from the closed-form ledger walk; the bands are the contract
    expected = {"tiny": (27_457_328, 26.0e6), "small": (48_404_516, 45.0e6),
                "base": (85_403_866, 86.0e6)}
    for name, (exact, target) in expected.items():
        got = count_params(preset(name))
        assert got == exact
        assert abs(got - target) / target <= 0.10


def test_count_params_matches_instantiated_model():
    cfg = micro()
    assert Model(cfg, seed=0).num_params() == count_params(cfg)
    slim = micro(use_das=False, use_convpos=False, use_convffn=False)
    assert Model(slim, seed=0).num_params() == count_params(slim)


def test_toggles_add_their_parameter_groups():
    base = micro(use_das=False, use_convpos=False, use_convffn=False)
    das = Model(micro(use_convpos=False, use_convffn=False), seed=0)
    assert any(".opn." in name for name in das.params)
    assert not any(".convpos." in name for name in das.params)
    assert not any(".ffn.conv." in name for name in das.params)
    names = set(Model(base, seed=0).params)
    assert names < set(Model(micro(), seed=0).params)


def test_flops_at_published_scale_and_resolution_scaling():
    tiny = count_flops(preset("tiny"))
    assert tiny == 5_099_259_136
    assert abs(tiny - 4.8e9) / 4.8e9 <= 0.15
    cfg = micro()
    ratio = count_flops(cfg, 128, 128) / count_flops(cfg, 64, 64)
    assert 3.9 < ratio < 4.1  # linear-in-tokens modules dominate


# -- initialization ------------------------------------------------------------

def test_init_is_seed_deterministic():
    a = Model(micro(), seed=5)
    b = Model(micro(), seed=5)
    for name in a.params:
        np.testing.assert_array_equal(a.params[name].data, b.params[name].data)
    c = Model(micro(), seed=6)
    assert any(not np.array_equal(a.params[n].data, c.params[n].data)
               for n in a.params)


def test_shared_layers_init_identically_across_feature_sets():
    """Init is keyed by parameter name, so ablation arms share weights."""
    full = Model(micro(), seed=1)
    slim = Model(micro(use_das=False, use_convpos=False, use_convffn=False),
                 seed=1)
    for name, p in slim.params.items():
        np.testing.assert_array_equal(p.data, full.params[name].data)


def test_offset_head_starts_at_zero():
    m = Model(micro(), seed=2)
    np.testing.assert_array_equal(
        m.params["stages.0.blocks.0.opn.out.w"].data, 0.0)
    np.testing.assert_array_equal(
        m.params["stages.0.blocks.0.opn.out.b"].data, 0.0)


# -- forward pass --------------------------------------------------------------

def test_forward_shapes_and_dtype():
    m = Model(micro(), seed=0)
    rng = np.random.default_rng(0)
    x = rng.random((2, 3, 64, 64), dtype=np.float32)
    logits = m.forward(x)
    assert logits.shape == (2, 4)
    assert logits.dtype == np.float32
    feats = m.forward_features(x)
    assert feats.shape == (2, 64, 2, 2)


def test_stem_rejects_misaligned_input():
    m = Model(micro(), seed=0)
    with pytest.raises(ShapeError):
        m.forward(np.zeros((1, 3, 80, 64), dtype=np.float32))
    with pytest.raises(ShapeError):
        m.stem(np.zeros((3, 64, 64), dtype=np.float32))


def test_eval_forward_is_deterministic():
    m = Model(micro(), seed=0)
    x = np.random.default_rng(1).random((2, 3, 64, 64), dtype=np.float32)
    np.testing.assert_array_equal(m.forward(x).data, m.forward(x).data)


def test_fresh_model_matches_fixed_scan_baseline_bitwise():
    """Zero offset head => adaptive routing reduces to the sweep, so a
    fresh full model and its fixed-scan twin agree to the last bit."""
    full = Model(micro(use_convpos=False, use_convffn=False), seed=3)
    fixed = Model(micro(use_das=False, use_convpos=False, use_convffn=False),
                  seed=3)
    rng = np.random.default_rng(7)
    for _ in range(3):
        x = rng.random((1, 3, 64, 64), dtype=np.float32)
        np.testing.assert_array_equal(full.forward(x).data,
                                      fixed.forward(x).data)


def test_plan_capture_returns_one_valid_permutation():
    m = Model(micro(), seed=0)
    x = np.random.default_rng(2).random((1, 3, 64, 64), dtype=np.float32)
    sink = []
    m.forward(x, capture_stage=1, plan_sink=sink)
    assert len(sink) == 1
    order = sink[0].order
    assert sorted(order.tolist()) == list(range(16 * 16))


def test_drop_path_requires_rng_in_training():
    m = Model(micro(drop_path=0.5), seed=0)
    x = np.random.default_rng(3).random((2, 3, 64, 64), dtype=np.float32)
    with pytest.raises(ContractError):
        m.forward(x, training=True)


def test_training_forward_updates_bn_buffers():
    m = Model(micro(), seed=0)
    before = m.buffers["head.bn.mean"].copy()
    x = np.random.default_rng(4).random((2, 3, 64, 64), dtype=np.float32)
    m.forward(x, training=True)
    assert not np.array_equal(m.buffers["head.bn.mean"], before)


# -- persistence ---------------------------------------------------------------

def test_checkpoint_roundtrip_is_bitwise(tmp_path):
    m = Model(micro(), seed=9)
    path = tmp_path / "model.dckp"
    m.to_checkpoint(step=17).save(path)
    again = Model.from_checkpoint(Checkpoint.load(path))
    assert again.config == m.config
    for name, p in m.params.items():
        np.testing.assert_array_equal(again.params[name].data, p.data)
    x = np.random.default_rng(5).random((1, 3, 64, 64), dtype=np.float32)
    np.testing.assert_array_equal(again.forward(x).data, m.forward(x).data)


def test_load_state_rejects_missing_and_misshapen(tmp_path):
    m = Model(micro(), seed=0)
    state = m.state_tensors()
    clipped = {k: v for k, v in state.items() if not k.endswith("head.fc.b")}
    with pytest.raises(ContractError):
        m.load_state(clipped)
    bad = dict(state)
    bad["head.fc.w"] = bad["head.fc.w"][:, :-1]
    with pytest.raises(ContractError):
        m.load_state(bad)


def test_build_model_accepts_preset_name_and_config():
    by_name = build_model("micro", seed=0, num_classes=4)
    by_config = build_model(micro(), seed=0)
    assert by_name.config == by_config.config
    narrowed = build_model(micro(), seed=0, use_das=False)
    assert not narrowed.config.use_das
