"""Traversal orders, plan round-trips, offset prediction, and the
adaptive rescan path."""

import numpy as np
import pytest

import dascan.tensor as T
from dascan.errors import ContractError, DomainError, FormatError, ShapeError
from dascan.sampling import identity_grid
from dascan.scan import (
    OffsetNet,
    ScanPlan,
    apply_plan,
    continuous_scan,
    dynamic_adaptive_scan,
    init_offset_net,
    local_scan,
    sweeping_scan,
    unapply_plan,
)
from dascan.tensor import Tensor


# -- fixed traversal orders, hand tables ------------------------------------


def test_sweeping_is_plain_raster():
    np.testing.assert_array_equal(sweeping_scan(2, 3).order, [0, 1, 2, 3, 4, 5])


def test_continuous_snake_hand_tables():
    np.testing.assert_array_equal(continuous_scan(3, 3).order,
                                  [0, 1, 2, 5, 4, 3, 6, 7, 8])
    np.testing.assert_array_equal(continuous_scan(2, 3).order,
                                  [0, 1, 2, 5, 4, 3])
    np.testing.assert_array_equal(
        continuous_scan(3, 4).order,
        [0, 1, 2, 3, 7, 6, 5, 4, 8, 9, 10, 11])


def test_continuous_consecutive_slots_are_grid_neighbours():
    for h, w in [(2, 2), (3, 5), (4, 4), (1, 6), (5, 1)]:
        order = continuous_scan(h, w).order
        ys, xs = np.divmod(order, w)
        dist = np.abs(np.diff(ys)) + np.abs(np.diff(xs))
        assert np.all(dist == 1), f"snake breaks adjacency on {h}x{w}"


def test_local_scan_hand_tables():
    np.testing.assert_array_equal(
        local_scan(4, 4, 2).order,
        [0, 1, 4, 5, 2, 3, 6, 7, 8, 9, 12, 13, 10, 11, 14, 15])
    # ragged edge tiles on 3x3
    np.testing.assert_array_equal(local_scan(3, 3, 2).order,
                                  [0, 1, 3, 4, 2, 5, 6, 7, 8])


def test_local_scan_degenerate_windows_reduce_to_raster():
    np.testing.assert_array_equal(local_scan(3, 4, 1).order, np.arange(12))
    np.testing.assert_array_equal(local_scan(3, 4, 4).order, np.arange(12))


@pytest.mark.parametrize("h,w", [(1, 1), (2, 5), (5, 2), (4, 3)])
def test_all_strategies_emit_permutations(h, w):
    window = min(2, max(h, w))
    plans = [sweeping_scan(h, w), continuous_scan(h, w),
             local_scan(h, w, window)]
    for plan in plans:
        assert np.array_equal(np.sort(plan.order), np.arange(h * w))
        np.testing.assert_array_equal(plan.source_coords, identity_grid(h, w))


def test_bad_grid_and_window_rejected():
    with pytest.raises(DomainError):
        sweeping_scan(0, 3)
    with pytest.raises(DomainError):
        local_scan(3, 3, 0)
    with pytest.raises(DomainError):
        local_scan(3, 3, 5)


# -- ScanPlan mechanics ------------------------------------------------------


def test_plan_rejects_non_permutation():
    with pytest.raises(ContractError):
        ScanPlan(2, 2, np.array([0, 1, 1, 3]), identity_grid(2, 2))


def test_plan_rejects_wrong_coord_grid():
    with pytest.raises(ContractError):
        ScanPlan(2, 2, np.arange(4), identity_grid(3, 2))


def test_inverse_order_inverts():
    plan = continuous_scan(4, 5)
    inv = plan.inverse_order()
    np.testing.assert_array_equal(plan.order[inv], np.arange(20))
    np.testing.assert_array_equal(inv[plan.order], np.arange(20))


def test_apply_plan_reads_tokens_in_traversal_order():
    fmap = np.arange(8.0).reshape(2, 2, 2)  # patch (y,x) holds value 2*(2y+x)
    plan = continuous_scan(2, 2)  # order 0,1,3,2
    seq = apply_plan(Tensor(fmap), plan)
    np.testing.assert_array_equal(seq.data[:, 0], [0.0, 2.0, 6.0, 4.0])


def test_apply_then_unapply_is_identity_bitwise():
    rng = np.random.default_rng(4)
    fmap = rng.standard_normal((2, 5, 4, 3))
    for plan in [sweeping_scan(5, 4), continuous_scan(5, 4),
                 local_scan(5, 4, 2)]:
        back = unapply_plan(apply_plan(Tensor(fmap), plan), plan)
        assert back.data.tobytes() == fmap.tobytes()


def test_apply_plan_gradient_round_trips():
    plan = continuous_scan(3, 3)
    x = T.parameter(np.random.default_rng(5).standard_normal((1, 3, 3, 2)))
    w = np.arange(18.0).reshape(1, 9, 2)
    T.tsum(T.mul(apply_plan(x, plan), Tensor(w))).backward()
    # each token is read exactly once, so the gradient is w unscattered
    expected = w[0][plan.inverse_order()].reshape(1, 3, 3, 2)
    np.testing.assert_array_equal(x.grad, expected)


def test_apply_plan_shape_mismatch():
    with pytest.raises(ShapeError):
        apply_plan(Tensor(np.zeros((1, 3, 3, 2))), sweeping_scan(2, 3))
    with pytest.raises(ShapeError):
        unapply_plan(Tensor(np.zeros((1, 5, 2))), sweeping_scan(2, 3))


# -- serialization -------------------------------------------------------------


def test_plan_serialize_parse_round_trip_exact():
    rng = np.random.default_rng(6)
    coords = np.clip(identity_grid(3, 4) + rng.uniform(-0.3, 0.3, (3, 4, 2)),
                     -1.0, 1.0)
    plan = ScanPlan(3, 4, continuous_scan(3, 4).order, coords)
    back = ScanPlan.parse(plan.serialize())
    assert back.height == 3 and back.width == 4
    np.testing.assert_array_equal(back.order, plan.order)
    # repr-precision floats survive the text round trip bit-for-bit
    assert back.source_coords.tobytes() == coords.tobytes()


def test_plan_serialize_batched_takes_first():
    coords = np.stack([identity_grid(2, 2), identity_grid(2, 2) * 0.5])
    plan = ScanPlan(2, 2, np.arange(4), coords)
    back = ScanPlan.parse(plan.serialize())
    np.testing.assert_array_equal(back.source_coords, identity_grid(2, 2))


def test_plan_parse_rejects_malformed_text():
    good = sweeping_scan(2, 2).serialize()
    with pytest.raises(FormatError):
        ScanPlan.parse(good.replace("# grid 2 2\n", ""))
    with pytest.raises(FormatError):
        ScanPlan.parse(good + "4,0.0,0.0\n")  # extra slot line
    with pytest.raises(FormatError):
        ScanPlan.parse(good.replace("0,", "0;", 1))


# -- offset network ------------------------------------------------------------


def test_fresh_offset_net_predicts_exact_zero():
    opn = init_offset_net(channels=6, seed=3)
    fmap = Tensor(np.random.default_rng(7).standard_normal((2, 4, 5, 6)))
    offsets = opn.forward(fmap)
    assert offsets.shape == (2, 4, 5, 2)
    assert np.all(offsets.data == 0.0)


def test_offsets_respect_range_bound():
    opn = init_offset_net(channels=4, seed=1, offset_range=0.25)
    # force large raw predictions through the zero-initialized head
    opn.out_w.data[:] = 5.0
    opn.out_b.data[:] = 3.0
    fmap = Tensor(np.random.default_rng(8).standard_normal((3, 3, 4)) * 10)
    offsets = opn.forward(fmap).data
    assert np.all(np.abs(offsets) < 0.25)          # tanh is open-bounded
    assert np.max(np.abs(offsets)) > 0.2           # and actually engaged


def test_offset_net_channel_mismatch():
    opn = init_offset_net(channels=4)
    with pytest.raises(ShapeError):
        opn.forward(Tensor(np.zeros((2, 3, 3, 5))))


def test_offset_net_gradient_reaches_head():
    opn = init_offset_net(channels=3, seed=2)
    fmap = Tensor(np.random.default_rng(9).standard_normal((4, 4, 3)))
    T.tsum(T.mul(opn.forward(fmap), 2.0)).backward()
    assert opn.out_w.grad is not None
    assert float(np.abs(opn.out_w.grad).sum()) > 0.0


# -- dynamic adaptive scan ------------------------------------------------------


def test_fresh_das_is_bitwise_identity():
    """Zero offsets + lattice-exact resampling: the adaptive path must
    return the input features untouched."""
    opn = init_offset_net(channels=5, seed=4)
    fmap = np.random.default_rng(10).standard_normal((2, 6, 7, 5))
    plan, resampled = dynamic_adaptive_scan(Tensor(fmap), opn)
    assert resampled.data.tobytes() == fmap.tobytes()
    np.testing.assert_array_equal(plan.order, np.arange(42))
    np.testing.assert_array_equal(plan.source_coords,
                                  np.broadcast_to(identity_grid(6, 7),
                                                  (2, 6, 7, 2)))


def test_das_records_raw_and_clamped_coordinates():
    opn = init_offset_net(channels=3, seed=5, offset_range=0.5)
    opn.out_b.data[:] = 50.0  # saturate tanh: offset == +offset_range
    fmap = np.random.default_rng(11).standard_normal((4, 4, 3))
    plan, _ = dynamic_adaptive_scan(Tensor(fmap), opn)
    np.testing.assert_allclose(plan.raw_coords,
                               identity_grid(4, 4) + 0.5, rtol=1e-12)
    np.testing.assert_array_equal(plan.source_coords,
                                  np.clip(plan.raw_coords, -1.0, 1.0))
    # the right/bottom borders were pushed past 1 and clamped
    assert np.any(plan.raw_coords > 1.0)
    assert plan.source_coords.max() == 1.0


def test_das_constant_shift_resamples_from_shifted_cells():
    opn = init_offset_net(channels=1, seed=6, offset_range=1.0)
    h = w = 5
    # shift right by exactly one patch: 2/(w-1) of normalized range
    shift = 2.0 / (w - 1)
    opn.out_b.data[:] = np.arctanh(shift)
    fmap = np.random.default_rng(12).standard_normal((h, w, 1))
    plan, resampled = dynamic_adaptive_scan(Tensor(fmap), opn)
    # interior columns now hold their right/lower diagonal neighbour
    np.testing.assert_allclose(resampled.data[:h - 1, :w - 1, 0],
                               fmap[1:, 1:, 0], rtol=1e-9)


def test_das_gradient_reaches_head_through_zero_offsets():
    """Even a fresh net (zero offsets, identity resample) must receive
    gradient at its final linear layer — the path stays differentiable
    right at the lattice."""
    opn = init_offset_net(channels=4, seed=7)
    fmap = T.parameter(np.random.default_rng(13).standard_normal((1, 5, 5, 4)))
    plan, resampled = dynamic_adaptive_scan(fmap, opn)
    w = np.random.default_rng(14).standard_normal(resampled.shape)
    T.tsum(T.mul(resampled, Tensor(w))).backward()
    assert float(np.abs(opn.out_w.grad).sum()) > 0
    assert float(np.abs(fmap.grad).sum()) > 0
    # the trunk is still dark: a zero head blocks gradient upstream of it
    assert float(np.abs(opn.conv_w.grad).sum()) == 0.0


def test_das_gradients_flow_to_trunk_once_head_is_live():
    opn = init_offset_net(channels=4, seed=8)
    opn.out_w.data[:] = 0.01  # as after one optimizer step
    fmap = T.parameter(np.random.default_rng(15).standard_normal((1, 5, 5, 4)))
    _, resampled = dynamic_adaptive_scan(fmap, opn)
    w = np.random.default_rng(16).standard_normal(resampled.shape)
    T.tsum(T.mul(resampled, Tensor(w))).backward()
    assert float(np.abs(opn.conv_w.grad).sum()) > 0
    assert float(np.abs(opn.norm_g.grad).sum()) > 0


def test_das_rejects_bad_rank():
    opn = init_offset_net(channels=2)
    with pytest.raises(ShapeError):
        dynamic_adaptive_scan(Tensor(np.zeros((3, 2))), opn)
