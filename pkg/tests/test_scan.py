import itertools

import numpy as np
import pytest

from ssfmamba import diffcore as dc
from ssfmamba.scan import OrderKind, apply_order, build_order, identity_order, invert_order

KINDS = list(OrderKind)
SHAPES = [(1, 1, 1), (2, 2, 2), (3, 4, 5), (8, 8, 8)]


def enumerate_order(kind, shape, block=2):
    """Coordinates listed by plain nested loops following each rule."""
    H, W, D = shape
    if kind is OrderKind.IN_SLICE:
        return [(h, w, d) for d in range(D) for h in range(H) for w in range(W)]
    if kind is OrderKind.CROSS_SLICE:
        return [(h, w, d) for h in range(H) for w in range(W) for d in range(D)]
    out = []
    for h0, w0, d0 in itertools.product(range(0, H, block), range(0, W, block), range(0, D, block)):
        for h, w, d in itertools.product(range(h0, min(h0 + block, H)), range(w0, min(w0 + block, W)),
                                         range(d0, min(d0 + block, D))):
            out.append((h, w, d))
    return out


def test_in_slice_example():
    order = build_order(OrderKind.IN_SLICE, (2, 2, 2))
    assert [tuple(c) for c in order.coords()] == [
        (0, 0, 0), (0, 1, 0), (1, 0, 0), (1, 1, 0), (0, 0, 1), (0, 1, 1), (1, 0, 1), (1, 1, 1)]


def test_cross_slice_example():
    order = build_order(OrderKind.CROSS_SLICE, (2, 2, 2))
    assert [tuple(c) for c in order.coords()] == [
        (0, 0, 0), (0, 0, 1), (0, 1, 0), (0, 1, 1), (1, 0, 0), (1, 0, 1), (1, 1, 0), (1, 1, 1)]


def test_local3d_example():
    coords = [tuple(c) for c in build_order(OrderKind.LOCAL_3D, (2, 2, 4), block=2).coords()]
    assert set(c[2] for c in coords[:8]) == {0, 1}
    assert set(c[2] for c in coords[8:]) == {2, 3}
    assert coords == enumerate_order(OrderKind.LOCAL_3D, (2, 2, 4))


@pytest.mark.parametrize("kind", KINDS)
@pytest.mark.parametrize("shape", SHAPES + [(5, 3, 7)])
def test_orders_match_enumeration_and_are_bijective(kind, shape):
    order = build_order(kind, shape, block=2)
    assert [tuple(c) for c in order.coords()] == enumerate_order(kind, shape)
    assert np.array_equal(np.sort(order.forward), np.arange(np.prod(shape)))
    assert np.array_equal(order.inverse[order.forward], np.arange(order.length))


@pytest.mark.parametrize("kind", KINDS)
@pytest.mark.parametrize("shape", SHAPES)
def test_apply_invert_round_trip_is_bitwise(kind, shape):
    x = np.random.default_rng(0).normal(size=(3,) + shape)
    order = build_order(kind, shape)
    seq = apply_order(x, order)
    assert seq.shape == (3, order.length)
    assert np.array_equal(invert_order(seq, order), x)


def test_in_slice_keeps_slices_contiguous():
    order = build_order(OrderKind.IN_SLICE, (3, 4, 5))
    d = order.coords()[:, 2]
    runs = [k for k, _ in itertools.groupby(d)]
    assert runs == list(range(5))


def test_cross_slice_keeps_fibers_contiguous():
    order = build_order(OrderKind.CROSS_SLICE, (3, 4, 5))
    hw = [tuple(c[:2]) for c in order.coords()]
    runs = [k for k, _ in itertools.groupby(hw)]
    assert len(runs) == 12 and len(set(runs)) == 12


def test_local3d_single_block_is_raster_order():
    single = build_order(OrderKind.LOCAL_3D, (2, 2, 2), block=2)
    assert np.array_equal(single.forward, np.arange(8))
    big = build_order(OrderKind.LOCAL_3D, (3, 4, 5), block=8)
    assert np.array_equal(big.forward, np.arange(60))


def test_identity_order_and_constants():
    x = np.random.default_rng(1).normal(size=(2, 3, 4, 5))
    order = identity_order((3, 4, 5))
    assert np.array_equal(apply_order(x, order), x.reshape(2, -1))
    assert np.array_equal(invert_order(x.reshape(2, -1), order), x)
    const = np.full((2, 3, 4, 5), 1.5)
    for kind in KINDS:
        assert np.all(apply_order(const, build_order(kind, (3, 4, 5))) == 1.5)


def test_mismatched_orders_do_not_round_trip():
    x = np.random.default_rng(0).normal(size=(1, 3, 4, 5))
    seq = apply_order(x, build_order(OrderKind.IN_SLICE, (3, 4, 5)))
    assert not np.array_equal(invert_order(seq, build_order(OrderKind.CROSS_SLICE, (3, 4, 5))), x)


def test_shape_errors():
    order = build_order(OrderKind.IN_SLICE, (2, 2, 2))
    with pytest.raises(ValueError, match="does not match"):
        apply_order(np.zeros((1, 2, 2, 3)), order)
    with pytest.raises(ValueError, match="sequence length"):
        invert_order(np.zeros((1, 7)), order)
    with pytest.raises(ValueError):
        build_order(OrderKind.LOCAL_3D, (2, 2, 2), block=0)
    with pytest.raises(ValueError):
        build_order(OrderKind.IN_SLICE, (0, 2, 2))


def test_orders_are_cached_and_read_only():
    a = build_order(OrderKind.LOCAL_3D, (4, 4, 4), 2)
    assert a is build_order("local_3d", (4, 4, 4), 2)
    with pytest.raises(ValueError):
        a.forward[0] = 3


@pytest.mark.parametrize("kind", KINDS)
def test_gather_scatter_gradients(kind):
    rng = np.random.default_rng(2)
    order = build_order(kind, (2, 3, 4))
    tape = dc.Tape()
    x = tape.input("x", rng.normal(size=(2, 2, 3, 4)))
    seq = apply_order(x, order)
    w = rng.normal(size=seq.shape)
    back = invert_order(seq * w, order)
    tape.output("f", (back * rng.normal(size=back.shape)).sum())
    assert dc.finite_difference_check(tape, step=1e-5) < 1e-5
    # the gradient of a gather is the cotangent permuted back
    tape2 = dc.Tape()
    x2 = tape2.input("x", np.zeros((1, 2, 3, 4)))
    s2 = tape2.output("s", apply_order(x2, order))
    cot = rng.normal(size=s2.shape)
    g = dc.backward(tape2, cot, with_inputs=True)["x"]
    assert np.array_equal(g, invert_order(cot, order))
