"""Grid-to-sequence orderings used by the multi-directional scan.

A voxel ``(h, w, d)`` of an ``(H, W, D)`` grid has linear index
``h * W * D + w * D + d``.  An ordering is a permutation ``forward`` mapping
sequence position to linear index, plus its inverse.

* ``IN_SLICE``: whole depth slices one after another (d outermost, then h, w).
* ``CROSS_SLICE``: one depth fiber per (h, w), i.e. plain row-major order.
* ``LOCAL_3D``: block^3 sub-cubes in raster order of their origins, each
  emitted in raster order; edge blocks are clipped to the grid.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import diffcore as dc


class OrderKind(enum.Enum):
    IN_SLICE = "in_slice"
    CROSS_SLICE = "cross_slice"
    LOCAL_3D = "local_3d"

    @classmethod
    def parse(cls, text: str) -> "OrderKind":
        key = text.strip().lower().replace("-", "_")
        aliases = {"inslice": "in_slice", "crossslice": "cross_slice", "local3d": "local_3d"}
        return cls(aliases.get(key, key))


@dataclass(frozen=True, eq=False)
class ScanOrder:
    kind: OrderKind
    grid_shape: tuple
    block: int
    forward: np.ndarray
    inverse: np.ndarray

    @property
    def length(self) -> int:
        return int(self.forward.size)

    def coords(self) -> np.ndarray:
        """(L, 3) array of the (h, w, d) visited at each sequence position."""
        return np.stack(np.unravel_index(self.forward, self.grid_shape), axis=1)


def _validate(grid_shape, block):
    grid_shape = tuple(int(n) for n in grid_shape)
    if len(grid_shape) != 3 or min(grid_shape) < 1:
        raise ValueError(f"grid shape must be three extents >= 1, got {grid_shape}")
    if int(block) < 1:
        raise ValueError(f"block must be >= 1, got {block}")
    return grid_shape, int(block)


def build_order(kind: OrderKind, grid_shape, block: int = 2) -> ScanOrder:
    if isinstance(kind, str):
        kind = OrderKind.parse(kind)
    grid_shape, block = _validate(grid_shape, block)
    return _build_cached(kind, grid_shape, block if kind is OrderKind.LOCAL_3D else 1)


@lru_cache(maxsize=None)
def _build_cached(kind, grid_shape, block):
    H, W, D = grid_shape
    linear = np.arange(H * W * D).reshape(H, W, D)
    if kind is OrderKind.IN_SLICE:
        fwd = np.transpose(linear, (2, 0, 1)).reshape(-1)
    elif kind is OrderKind.CROSS_SLICE:
        fwd = linear.reshape(-1)
    else:
        parts = []
        for h0 in range(0, H, block):
            for w0 in range(0, W, block):
                for d0 in range(0, D, block):
                    parts.append(linear[h0:h0 + block, w0:w0 + block, d0:d0 + block].reshape(-1))
        fwd = np.concatenate(parts)
    inv = np.empty_like(fwd)
    inv[fwd] = np.arange(fwd.size)
    fwd.setflags(write=False)
    inv.setflags(write=False)
    return ScanOrder(kind, grid_shape, block, fwd, inv)


def identity_order(grid_shape) -> ScanOrder:
    return build_order(OrderKind.CROSS_SLICE, grid_shape)


def apply_order(x, order: ScanOrder):
    """(C, H, W, D) -> (C, L) gather along ``order.forward``.

    Works on numpy arrays and on tape variables alike.
    """
    if tuple(x.shape[1:]) != order.grid_shape:
        raise ValueError(f"spatial shape {tuple(x.shape[1:])} does not match order grid {order.grid_shape}")
    C = x.shape[0]
    if isinstance(x, dc.Var):
        return dc.gather(x.reshape(C, order.length), order.forward, axis=1)
    return np.asarray(x).reshape(C, order.length)[:, order.forward]


def invert_order(seq, order: ScanOrder):
    """(C, L) -> (C, H, W, D); exact inverse of :func:`apply_order`."""
    if seq.shape[-1] != order.length:
        raise ValueError(f"sequence length {seq.shape[-1]} != grid size {order.length}")
    C = seq.shape[0]
    if isinstance(seq, dc.Var):
        return dc.gather(seq, order.inverse, axis=1).reshape((C,) + order.grid_shape)
    return np.asarray(seq)[:, order.inverse].reshape((C,) + order.grid_shape)
