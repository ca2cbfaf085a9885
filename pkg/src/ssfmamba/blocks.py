"""MDIF building blocks: frequency branch, spatial branch and fusion.

Feature maps are channel-first arrays ``(C, H, W, D)``.  All functions here
operate on tape variables; :func:`conv1x1` and :func:`layer_norm` also accept
plain numpy arrays.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from . import fft3d
from .scan import OrderKind, apply_order, build_order, invert_order
from .ssm import MAMBA_PARAM_NAMES, init_mamba_params, mamba_forward

LN_EPS = 1e-5


class ParamScope:
    """Named view into a flat parameter store, registering slots on a tape."""

    def __init__(self, tape: dc.Tape, store: dict, prefix: str = ""):
        self.tape = tape
        self.store = store
        self.prefix = prefix

    def name(self, key: str) -> str:
        return f"{self.prefix}.{key}" if self.prefix else key

    def __call__(self, key: str) -> dc.Var:
        full = self.name(key)
        return self.tape.param(full, self.store[full])

    def child(self, key: str) -> "ParamScope":
        return ParamScope(self.tape, self.store, self.name(key))

    def has(self, key: str) -> bool:
        return self.name(key) in self.store

    def group(self, keys) -> dict:
        return {k: self(k) for k in keys}


def _lift_numpy(fn):
    """Allow ``fn`` to be called on numpy arrays by running it on a scratch tape."""

    def wrapper(x, *args, **kwargs):
        if isinstance(x, dc.Var):
            return fn(x, *args, **kwargs)
        tape = dc.Tape()
        args = [tape.const(a) if isinstance(a, np.ndarray) else a for a in args]
        return fn(tape.const(x), *args, **kwargs).value.copy()

    wrapper.__name__ = fn.__name__
    wrapper.__doc__ = fn.__doc__
    return wrapper


@_lift_numpy
def conv1x1(x, weight, bias):
    """Pointwise channel mixing: ``out[:, v] = weight @ x[:, v] + bias``."""
    c_in = x.shape[0]
    if weight.shape[1] != c_in:
        raise ValueError(f"conv1x1 weight expects {weight.shape[1]} channels, input has {c_in}")
    grid = x.shape[1:]
    flat = x.reshape(c_in, -1)
    out = weight @ flat + bias.reshape(-1, 1)
    return out.reshape((weight.shape[0],) + tuple(grid))


@_lift_numpy
def layer_norm(x, gamma, beta, eps: float = LN_EPS):
    """Normalize across channels at every voxel, then apply a per-channel affine."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    bshape = (-1,) + (1,) * (x.ndim - 1)
    mu = x.mean(axis=0, keepdims=True)
    centered = x - mu
    var = (centered * centered).mean(axis=0, keepdims=True)
    normed = centered * (var + eps) ** -0.5
    return normed * gamma.reshape(bshape) + beta.reshape(bshape)


# ---------------------------------------------------------------------------
# branch configuration

@dataclass(frozen=True)
class MdifConfig:
    channels: int
    freq_kinds: tuple = (OrderKind.IN_SLICE, OrderKind.CROSS_SLICE, OrderKind.LOCAL_3D)
    spatial_kinds: tuple = (OrderKind.IN_SLICE,)
    local_block: int = 2
    expansion: int = 2
    d_state: int = 8

    @property
    def fdb_enabled(self) -> bool:
        return len(self.freq_kinds) > 0


def init_mdif_params(rng: np.random.Generator, cfg: MdifConfig, prefix: str = "") -> dict:
    """Fresh parameters for one MDIF block, keyed by dotted names."""
    C = cfg.channels
    out: dict[str, np.ndarray] = {}

    def put(key, value):
        out[f"{prefix}.{key}" if prefix else key] = value

    def conv(key, zero=False):
        bound = np.sqrt(6.0 / C)
        put(f"{key}.w", np.zeros((C, C)) if zero else rng.uniform(-bound, bound, size=(C, C)))
        put(f"{key}.b", np.zeros(C))

    def norm(key):
        put(f"{key}.gamma", np.ones(C))
        put(f"{key}.beta", np.zeros(C))

    def mamba(key):
        for name, value in init_mamba_params(rng, C, cfg.expansion, cfg.d_state).as_dict().items():
            put(f"{key}.{name}", value)

    for k, _ in enumerate(cfg.spatial_kinds):
        mamba(f"spa.mamba{k}")
    norm("spa.ln")
    if cfg.fdb_enabled:
        norm("freq.mag_ln")
        conv("freq.conv1")
        conv("freq.conv2")
        for k, _ in enumerate(cfg.freq_kinds):
            mamba(f"freq.mamba{k}")
            norm(f"freq.ln{k}")
    conv("mlp.conv1")
    conv("mlp.conv2", zero=True)
    return out


# ---------------------------------------------------------------------------
# branches

def _norm(x, scope, key):
    return layer_norm(x, scope(f"{key}.gamma"), scope(f"{key}.beta"))


def _directional_mamba(x, scope, key, order):
    seq = apply_order(x, order)
    seq = mamba_forward(seq, scope.child(key).group(MAMBA_PARAM_NAMES))
    return invert_order(seq, order)


def frequency_branch(x, scope: ParamScope, kinds, local_block: int = 2, normalize: bool = True):
    """Per-direction spatial maps recovered from Mamba-processed magnitude spectra.

    ``normalize=False`` skips both LayerNorms (used to check the pipeline
    against the plain FFT round trip).
    """
    spatial = tuple(x.shape[1:])
    grid = fft3d.half_shape(spatial)
    mag = fft3d.spectral_magnitude(x)
    phase = fft3d.spectral_phase(x)
    if normalize:
        mag = _norm(mag, scope, "mag_ln")
    m = dc.leaky_relu(conv1x1(mag, scope("conv1.w"), scope("conv1.b")))
    m = dc.leaky_relu(conv1x1(m, scope("conv2.w"), scope("conv2.b")))
    outs = []
    for k, kind in enumerate(kinds):
        order = build_order(kind, grid, local_block)
        f = _directional_mamba(m, scope, f"mamba{k}", order)
        if normalize:
            f = _norm(f, scope, f"ln{k}")
        outs.append(fft3d.spectral_synthesis(f, phase, spatial))
    return outs


def spatial_branch(x, scope: ParamScope, kinds=(OrderKind.IN_SLICE,), local_block: int = 2):
    """LayerNorm then Mamba along each ordering of the spatial grid, summed."""
    grid = tuple(x.shape[1:])
    n = _norm(x, scope, "ln")
    out = None
    for k, kind in enumerate(kinds):
        f = _directional_mamba(n, scope, f"mamba{k}", build_order(kind, grid, local_block))
        out = f if out is None else out + f
    return out


def fuse(x, branch_sum, scope: ParamScope):
    """Residual MLP: x + conv(GELU(conv(branch_sum)))."""
    h = dc.gelu(conv1x1(branch_sum, scope("conv1.w"), scope("conv1.b")))
    return x + conv1x1(h, scope("conv2.w"), scope("conv2.b"))


def mdif_block(x, scope: ParamScope, cfg: MdifConfig):
    total = spatial_branch(x, scope.child("spa"), cfg.spatial_kinds, cfg.local_block)
    if cfg.fdb_enabled:
        for f in frequency_branch(x, scope.child("freq"), cfg.freq_kinds, cfg.local_block):
            total = total + f
    return fuse(x, total, scope.child("mlp"))
