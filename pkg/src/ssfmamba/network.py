"""Encoder-decoder segmentation network with MDIF encoder stages."""
from __future__ import annotations

import dataclasses
import io
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import diffcore as dc
from .blocks import MdifConfig, ParamScope, conv1x1, init_mdif_params, mdif_block
from .scan import OrderKind


# ---------------------------------------------------------------------------
# 3-D convolutions

@dc.primitive("conv3d")
class _Conv3d:
    """Cross-correlation of (Cin, H, W, D) with (Cout, Cin, k, k, k) weights."""

    def forward(attrs, x, w, b):
        s, p = attrs["stride"], attrs["padding"]
        c_out, c_in, k = w.shape[0], w.shape[1], w.shape[2]
        if x.shape[0] != c_in:
            raise ValueError(f"conv3d expects {c_in} input channels, got {x.shape[0]}")
        xp = np.pad(x, ((0, 0),) + ((p, p),) * 3)
        win = sliding_window_view(xp, (k, k, k), axis=(1, 2, 3))[:, ::s, ::s, ::s]
        out_grid = win.shape[1:4]
        cols = win.transpose(1, 2, 3, 0, 4, 5, 6).reshape(-1, c_in * k ** 3)
        y = cols @ w.reshape(c_out, -1).T + b
        return y.T.reshape((c_out,) + out_grid), (cols, xp.shape, out_grid)

    def backward(attrs, ctx, xs, y, gy):
        x, w, b = xs
        cols, padded_shape, out_grid = ctx
        s, p = attrs["stride"], attrs["padding"]
        c_out, c_in, k = w.shape[0], w.shape[1], w.shape[2]
        g = gy.reshape(c_out, -1)
        gw = (g @ cols).reshape(w.shape)
        gb = g.sum(axis=1)
        gcols = (g.T @ w.reshape(c_out, -1)).reshape(out_grid + (c_in, k, k, k))
        gxp = np.zeros(padded_shape)
        ho, wo, do = out_grid
        for i in range(k):
            for j in range(k):
                for l in range(k):
                    gxp[:, i:i + s * ho:s, j:j + s * wo:s, l:l + s * do:s] += \
                        gcols[:, :, :, :, i, j, l].transpose(3, 0, 1, 2)
        gx = gxp[:, p:padded_shape[1] - p, p:padded_shape[2] - p, p:padded_shape[3] - p]
        return gx, gw, gb


@dc.primitive("conv_transpose3d_2x")
class _ConvTranspose2x:
    """Kernel-2, stride-2 transposed convolution: (Cin, h, w, d) -> (Cout, 2h, 2w, 2d)."""

    def forward(attrs, x, w, b):
        if x.shape[0] != w.shape[0]:
            raise ValueError(f"transposed conv expects {w.shape[0]} channels, got {x.shape[0]}")
        c_out = w.shape[1]
        h, wd, d = x.shape[1:]
        y = np.einsum("cijk,coabe->oiajbke", x, w)
        return y.reshape(c_out, 2 * h, 2 * wd, 2 * d) + b[:, None, None, None], None

    def backward(attrs, ctx, xs, y, gy):
        x, w, b = xs
        c_out = w.shape[1]
        h, wd, d = x.shape[1:]
        g = gy.reshape(c_out, h, 2, wd, 2, d, 2)
        gx = np.einsum("oiajbke,coabe->cijk", g, w)
        gw = np.einsum("oiajbke,cijk->coabe", g, x)
        return gx, gw, gy.sum(axis=(1, 2, 3))


def conv3d(x, w, b, stride=1, padding=1):
    return x.tape.apply("conv3d", x, w, b, stride=stride, padding=padding)


def conv_transpose3d(x, w, b):
    return x.tape.apply("conv_transpose3d_2x", x, w, b)


# ---------------------------------------------------------------------------
# configuration

@dataclass
class ModelConfig:
    in_channels: int = 4
    num_classes: int = 4
    base_channels: int = 8
    num_stages: int = 3
    mdif_blocks_per_stage: int = 2
    local3d_block: int = 2
    mdsm_enabled: bool = True
    fdb_enabled: bool = True
    mdsm2_mode: bool = False
    expansion: int = 2
    d_state: int = 8

    def validate(self) -> None:
        for name in ("in_channels", "num_classes", "base_channels", "num_stages",
                     "mdif_blocks_per_stage", "local3d_block", "expansion", "d_state"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.mdsm2_mode and not self.mdsm_enabled:
            raise ValueError("mdsm2_mode requires mdsm_enabled")

    def stage_channels(self, s: int) -> int:
        return self.base_channels * 2 ** s

    def directions(self) -> tuple:
        if not self.mdsm_enabled:
            return (OrderKind.IN_SLICE,)
        if self.mdsm2_mode:
            return (OrderKind.IN_SLICE, OrderKind.CROSS_SLICE)
        return (OrderKind.IN_SLICE, OrderKind.CROSS_SLICE, OrderKind.LOCAL_3D)

    def mdif_config(self, s: int) -> MdifConfig:
        """With the frequency branch on, the scan directions go there; otherwise
        they are applied to the spatial branch."""
        dirs = self.directions()
        if self.fdb_enabled:
            freq, spa = dirs, (OrderKind.IN_SLICE,)
        else:
            freq, spa = (), dirs
        return MdifConfig(self.stage_channels(s), freq, spa, self.local3d_block,
                          self.expansion, self.d_state)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


ABLATIONS = {
    "baseline": dict(fdb_enabled=False, mdsm_enabled=False),
    "baseline+fdb": dict(fdb_enabled=True, mdsm_enabled=False),
    "baseline+mdsm": dict(fdb_enabled=False, mdsm_enabled=True),
    "baseline+mdsm2": dict(fdb_enabled=False, mdsm_enabled=True, mdsm2_mode=True),
    "ssfmamba": dict(fdb_enabled=True, mdsm_enabled=True),
    "1-layer": dict(mdif_blocks_per_stage=1),
    "2-layers": dict(mdif_blocks_per_stage=2),
    "3-layers": dict(mdif_blocks_per_stage=3),
}


def ablation_config(name: str, **overrides) -> ModelConfig:
    return ModelConfig(**{**ABLATIONS[name], **overrides})


# ---------------------------------------------------------------------------
# model

def _he_uniform(rng, shape, fan_in):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Model:
    def __init__(self, config: ModelConfig, params: dict, seed: int | None = None):
        self.config = config
        self.params = params
        self.seed = seed

    @property
    def parameter_count(self) -> int:
        return int(sum(v.size for v in self.params.values()))

    def trace(self, volume, tape: dc.Tape | None = None):
        """Run the forward pass on ``tape``; returns (tape, logits Var)."""
        tape = tape or dc.Tape()
        x = volume if isinstance(volume, dc.Var) else tape.input("volume", volume)
        return tape, network_forward(x, ParamScope(tape, self.params), self.config)

    def forward(self, volume) -> np.ndarray:
        _, logits = self.trace(volume)
        return logits.value.copy()


def build_model(config: ModelConfig, seed: int = 0) -> Model:
    config.validate()
    rng = np.random.default_rng(seed)
    cfg = config
    params: dict[str, np.ndarray] = {}
    c0 = cfg.stage_channels(0)
    params["stem.w"] = _he_uniform(rng, (c0, cfg.in_channels, 3, 3, 3), cfg.in_channels * 27)
    params["stem.b"] = np.zeros(c0)
    for s in range(cfg.num_stages):
        c = cfg.stage_channels(s)
        if s > 0:
            prev = cfg.stage_channels(s - 1)
            params[f"enc{s}.down.w"] = _he_uniform(rng, (c, prev, 3, 3, 3), prev * 27)
            params[f"enc{s}.down.b"] = np.zeros(c)
        for j in range(cfg.mdif_blocks_per_stage):
            params.update(init_mdif_params(rng, cfg.mdif_config(s), f"enc{s}.blk{j}"))
    for s in range(cfg.num_stages - 1, 0, -1):
        c, lo = cfg.stage_channels(s), cfg.stage_channels(s - 1)
        params[f"dec{s}.up.w"] = _he_uniform(rng, (c, lo, 2, 2, 2), c)
        params[f"dec{s}.up.b"] = np.zeros(lo)
        params[f"dec{s}.conv1.w"] = _he_uniform(rng, (lo, 2 * lo, 3, 3, 3), 2 * lo * 27)
        params[f"dec{s}.conv1.b"] = np.zeros(lo)
        params[f"dec{s}.conv2.w"] = _he_uniform(rng, (lo, lo, 3, 3, 3), lo * 27)
        params[f"dec{s}.conv2.b"] = np.zeros(lo)
    params["head.w"] = np.zeros((cfg.num_classes, c0))
    params["head.b"] = np.zeros(cfg.num_classes)
    return Model(config, params, seed)


def check_input_shape(config: ModelConfig, shape) -> None:
    if len(shape) != 4 or shape[0] != config.in_channels:
        raise ValueError(f"expected volume of shape ({config.in_channels}, H, W, D), got {tuple(shape)}")
    factor = 2 ** (config.num_stages - 1)
    bad = [n for n in shape[1:] if n % factor or n // factor < 1]
    if bad:
        raise ValueError(f"spatial extents {tuple(shape[1:])} must be divisible by "
                         f"2^(num_stages-1) = {factor}")


def decoder_stage(x, skip, scope: ParamScope):
    """Upsample, concatenate the skip, two 3x3x3 convs, add the upsampled tensor back."""
    up = conv_transpose3d(x, scope("up.w"), scope("up.b"))
    if tuple(up.shape[1:]) != tuple(skip.shape[1:]):
        raise ValueError(f"skip grid {tuple(skip.shape[1:])} != upsampled grid {tuple(up.shape[1:])}")
    h = dc.concat([up, skip], axis=0)
    h = dc.leaky_relu(conv3d(h, scope("conv1.w"), scope("conv1.b")))
    h = dc.leaky_relu(conv3d(h, scope("conv2.w"), scope("conv2.b")))
    return h + up


def network_forward(x, scope: ParamScope, cfg: ModelConfig):
    check_input_shape(cfg, x.shape)
    h = dc.leaky_relu(conv3d(x, scope("stem.w"), scope("stem.b")))
    skips = []
    for s in range(cfg.num_stages):
        if s > 0:
            h = dc.leaky_relu(conv3d(h, scope(f"enc{s}.down.w"), scope(f"enc{s}.down.b"), stride=2))
        mcfg = cfg.mdif_config(s)
        for j in range(cfg.mdif_blocks_per_stage):
            h = mdif_block(h, scope.child(f"enc{s}.blk{j}"), mcfg)
        skips.append(h)
    for s in range(cfg.num_stages - 1, 0, -1):
        h = decoder_stage(h, skips[s - 1], scope.child(f"dec{s}"))
    return conv1x1(h, scope("head.w"), scope("head.b"))


def forward(model: Model, volume) -> np.ndarray:
    return model.forward(volume)


# ---------------------------------------------------------------------------
# loss

def _check_labels(labels, num_classes):
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        bad = np.flatnonzero((labels < 0) | (labels >= num_classes))[0]
        raise ValueError(f"label {labels.reshape(-1)[bad]} at voxel {bad} outside 0..{num_classes - 1}")
    return labels.astype(np.intp)


def cross_entropy_loss(logits, labels):
    """Mean over voxels of -log softmax(logits)[true class].

    ``logits`` is (K, H, W, D) as a Var (returns a scalar Var) or numpy array
    (returns a float).
    """
    if not isinstance(logits, dc.Var):
        tape = dc.Tape()
        return float(cross_entropy_loss(tape.const(logits), labels).value)
    K = logits.shape[0]
    labels = _check_labels(labels, K)
    if labels.shape != tuple(logits.shape[1:]):
        raise ValueError(f"labels shape {labels.shape} != logits grid {tuple(logits.shape[1:])}")
    onehot = (np.arange(K).reshape((K,) + (1,) * labels.ndim) == labels[None]).astype(np.float64)
    shifted = logits - dc.max_nograd(logits, axis=0, keepdims=True)
    lse = dc.log(dc.exp(shifted).sum(axis=0))
    picked = (shifted * onehot).sum(axis=0)
    return (lse - picked).mean()


# ---------------------------------------------------------------------------
# checkpoints

CKPT_MAGIC = b"SSFC1"


@dataclass
class Checkpoint:
    config: ModelConfig
    params: dict
    step: int = 0
    seed: int = 0

    def to_model(self) -> Model:
        return Model(self.config, {k: v.copy() for k, v in self.params.items()}, self.seed)

    @classmethod
    def from_model(cls, model: Model, step: int = 0, seed: int | None = None) -> "Checkpoint":
        return cls(model.config, {k: v.copy() for k, v in model.params.items()}, step,
                   model.seed if seed is None else seed)


def _put_bytes(buf, data: bytes):
    buf.write(struct.pack("<I", len(data)))
    buf.write(data)


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    header = {"config": dataclasses.asdict(ckpt.config), "step": ckpt.step, "seed": ckpt.seed}
    _put_bytes(buf, json.dumps(header, sort_keys=True).encode("utf-8"))
    for name, value in ckpt.params.items():
        value = np.asarray(value, dtype="<f8")
        _put_bytes(buf, name.encode("utf-8"))
        buf.write(struct.pack("<I", value.ndim))
        buf.write(struct.pack(f"<{value.ndim}I", *value.shape))
        buf.write(np.ascontiguousarray(value).tobytes())
    return buf.getvalue()


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(ckpt))


def _take(data, pos, n, what):
    if pos + n > len(data):
        raise ValueError(f"truncated checkpoint while reading {what}")
    return data[pos:pos + n], pos + n


def load_checkpoint(path) -> Checkpoint:
    data = Path(path).read_bytes()
    magic, pos = _take(data, 0, len(CKPT_MAGIC), "magic")
    if magic != CKPT_MAGIC:
        raise ValueError(f"bad magic {magic!r}, expected {CKPT_MAGIC!r}")
    raw, pos = _take(data, pos, 4, "header length")
    text, pos = _take(data, pos, struct.unpack("<I", raw)[0], "header")
    header = json.loads(text.decode("utf-8"))
    params = {}
    while pos < len(data):
        raw, pos = _take(data, pos, 4, "name length")
        name, pos = _take(data, pos, struct.unpack("<I", raw)[0], "name")
        raw, pos = _take(data, pos, 4, "rank")
        rank = struct.unpack("<I", raw)[0]
        raw, pos = _take(data, pos, 4 * rank, "extents")
        shape = struct.unpack(f"<{rank}I", raw)
        count = int(np.prod(shape, dtype=np.int64))
        raw, pos = _take(data, pos, 8 * count, f"values of {name.decode()}")
        params[name.decode("utf-8")] = np.frombuffer(raw, dtype="<f8").reshape(shape).astype(np.float64)
    return Checkpoint(ModelConfig.from_dict(header["config"]), params, header["step"], header["seed"])
