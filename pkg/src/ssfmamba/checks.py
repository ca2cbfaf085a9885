"""Self-checks shared by the ``ssfm`` command line and the acceptance tests.

Each check returns a list of :class:`CheckResult` rows so callers can print
them or assert on them.
"""
from __future__ import annotations

import time
from typing import NamedTuple

import numpy as np

from . import blocks, fft3d, ssm
from . import diffcore as dc
from .blocks import MdifConfig, ParamScope
from .network import ModelConfig, build_model, cross_entropy_loss

# step sizes tried per coordinate for deep compositions (see finite_difference_check)
DEEP_STEPS = (1e-5, 1e-4, 1e-3)


class CheckResult(NamedTuple):
    name: str
    value: float
    tolerance: float
    seconds: float

    @property
    def passed(self) -> bool:
        return bool(self.value < self.tolerance)

    def line(self) -> str:
        verdict = "PASS" if self.passed else "FAIL"
        return f"{verdict} {self.name}: {self.value:.3e} (< {self.tolerance:g}) in {self.seconds:.1f}s"


def _timed(name, tolerance, fn) -> CheckResult:
    t0 = time.perf_counter()
    value = float(fn())
    return CheckResult(name, value, tolerance, time.perf_counter() - t0)


# ---------------------------------------------------------------------------
# gradient checks

def _unary(fn, positive=False):
    def build(rng):
        x = rng.normal(size=(3, 4))
        if positive:
            x = np.abs(x) + 0.5
        return {"x": x}, lambda v: fn(v["x"])
    return build


def _binary(fn, shape_a=(3, 4), shape_b=(3, 4)):
    def build(rng):
        return ({"a": rng.normal(size=shape_a), "b": rng.normal(size=shape_b) + 3.0},
                lambda v: fn(v["a"], v["b"]))
    return build


PRIMITIVE_CASES = {
    "add": _binary(lambda a, b: a + b),
    "add_broadcast": _binary(lambda a, b: a + b, (3, 4), (1, 4)),
    "sub": _binary(lambda a, b: a - b, (3, 4), (4,)),
    "neg": _unary(lambda x: -x),
    "multiply": _binary(lambda a, b: a * b, (3, 1), (3, 4)),
    "divide": _binary(lambda a, b: a / b),
    "scale": _unary(lambda x: 2.5 * x),
    "power": _unary(lambda x: x ** -0.5, positive=True),
    "matmul": _binary(lambda a, b: a @ b, (3, 4), (4, 2)),
    "exp": _unary(dc.exp),
    "log": _unary(dc.log, positive=True),
    "tanh": _unary(dc.tanh),
    "sigmoid": _unary(dc.sigmoid),
    "silu": _unary(dc.silu),
    "gelu": _unary(dc.gelu),
    "leaky_relu": _unary(dc.leaky_relu),
    "softplus": _unary(dc.softplus),
    "sum": _unary(lambda x: x.sum(axis=1)),
    "mean": _unary(lambda x: x.mean(axis=0, keepdims=True)),
    "reshape": _unary(lambda x: x.reshape(2, 6)),
    "permute": _unary(lambda x: dc.permute(x.reshape(2, 3, 2), (2, 0, 1))),
    "gather": _unary(lambda x: dc.gather(x, [3, 0, 0, 2], axis=1)),
    "concat": _binary(lambda a, b: dc.concat([a, b], axis=0)),
    "slice": _unary(lambda x: x[1:, ::2]),
    "broadcast": _unary(lambda x: dc.broadcast_to(x[:, :1], (2, 3, 4))),
    "pad": _unary(lambda x: dc.pad(x, ((1, 0), (2, 1)))),
}


def primitive_tape(name: str, seed: int = 7) -> dc.Tape:
    """Scalar tape ``sum(weights * op(inputs))`` for one primitive case."""
    rng = np.random.default_rng(seed)
    values, fn = PRIMITIVE_CASES[name](rng)
    tape = dc.Tape()
    out = fn({k: tape.input(k, v) for k, v in values.items()})
    tape.output("f", (out * rng.normal(size=out.shape)).sum())
    return tape


def lively(params: dict, rng) -> dict:
    """Give fusion/head convs random weights and Mamba steps in [0.1, 1].

    At the default init the fusion and head convs are zero (so most
    gradients vanish) and scan steps are ~1e-3 (so many gradients sit near
    roundoff); neither is a useful point to check gradients at.
    """
    params = dict(params)
    for k, v in params.items():
        if k.endswith("mlp.conv2.w") or k == "head.w":
            params[k] = rng.uniform(-0.5, 0.5, v.shape)
        elif k.endswith("dt_bias"):
            params[k] = np.log(np.expm1(rng.uniform(0.1, 1.0, v.shape)))
    return params


def mamba_tape(seed: int = 0) -> dc.Tape:
    rng = np.random.default_rng(seed)
    params = ssm.init_mamba_params(rng, 4)
    params.core = ssm.init_core_params(rng, 8, 8, dt_min=0.1, dt_max=1.0)
    params.in_b = rng.normal(size=params.in_b.shape) * 0.1
    params.out_b = rng.normal(size=params.out_b.shape) * 0.1
    tape = dc.Tape()
    y = ssm.mamba_block(tape.input("x", rng.normal(size=(4, 16))), params, prefix="m")
    tape.output("f", (y * rng.normal(size=y.shape)).sum())
    return tape


def mdif_tape(seed: int = 0, channels: int = 4, grid=(4, 4, 4)) -> dc.Tape:
    rng = np.random.default_rng(seed)
    cfg = MdifConfig(channels)
    params = lively(blocks.init_mdif_params(rng, cfg, "b"), rng)
    tape = dc.Tape()
    x = tape.input("x", rng.normal(size=(channels,) + tuple(grid)))
    y = blocks.mdif_block(x, ParamScope(tape, params, "b"), cfg)
    tape.output("f", (y * rng.normal(size=y.shape)).sum())
    return tape


TINY_NETWORK = dict(base_channels=2, num_stages=2, mdif_blocks_per_stage=1)


def network_tape(seed: int = 0, grid: int = 8) -> dc.Tape:
    """Cross-entropy of the tiny network (C0=2, two stages) on a random 8^3 volume."""
    model = build_model(ModelConfig(**TINY_NETWORK), seed)
    rng = np.random.default_rng(seed + 1)
    model.params = lively(model.params, rng)
    x = rng.normal(size=(4, grid, grid, grid))
    labels = rng.integers(0, 4, size=(grid,) * 3)
    tape, logits = model.trace(x)
    tape.output("loss", cross_entropy_loss(logits, labels))
    return tape


def gradcheck(module: str = "all", max_coords: int | None = None) -> list:
    """Finite-difference checks at the acceptance tolerances."""
    if module not in ("all", "diffcore", "ssm", "blocks", "network"):
        raise ValueError(f"unknown module {module!r}")
    out = []
    if module in ("all", "diffcore"):
        for name in sorted(PRIMITIVE_CASES):
            out.append(_timed(f"primitive {name}", 1e-5,
                              lambda: dc.finite_difference_check(primitive_tape(name), step=1e-5)))
    if module in ("all", "ssm"):
        out.append(_timed("mamba_block", 1e-4,
                          lambda: dc.finite_difference_check(mamba_tape(), step=1e-4)))
    if module in ("all", "blocks"):
        out.append(_timed("mdif_block", 1e-3, lambda: dc.finite_difference_check(
            mdif_tape(), step=DEEP_STEPS, max_coords=max_coords)))
    if module in ("all", "network"):
        out.append(_timed("tiny network", 1e-3, lambda: dc.finite_difference_check(
            network_tape(), step=DEEP_STEPS[:2], names=None, max_coords=max_coords)))
    return out


# ---------------------------------------------------------------------------
# spectral self-test

SPECTRAL_SHAPES = ((2, 2, 2), (4, 4, 4), (3, 5, 7), (8, 8, 8))


def fft_selftest(volumes: int = 100, seed: int = 0) -> list:
    rng = np.random.default_rng(seed)

    def oracle():
        worst = 0.0
        for shape in SPECTRAL_SHAPES:
            x = rng.normal(size=shape)
            ref = fft3d.dft3_reference(x).coefficients[:, :, : shape[2] // 2 + 1]
            worst = max(worst, float(np.max(np.abs(fft3d.rfft3(x).coefficients - ref))))
        return worst

    def symmetry():
        worst = 0.0
        for _ in range(volumes):
            # the full naive spectrum, so the symmetry is measured, not imposed
            shape = tuple(rng.integers(1, 6, size=3))
            x = rng.normal(size=shape)
            worst = max(worst, fft3d.check_conjugate_symmetry(fft3d.dft3_reference(x)))
        return worst

    def parseval():
        worst = 0.0
        for _ in range(volumes):
            shape = tuple(rng.integers(1, 9, size=3))
            x = rng.normal(size=shape)
            F = fft3d.hermitian_complete(fft3d.rfft3(x)).coefficients
            energy = float(np.sum(x * x))
            worst = max(worst, abs(energy - np.sum(np.abs(F) ** 2) / x.size) / energy)
        return worst

    return [
        _timed("rfft3 vs naive DFT (max abs)", 1e-9, oracle),
        _timed(f"conjugate symmetry over {volumes} volumes", 1e-10, symmetry),
        _timed(f"Parseval over {volumes} volumes (relative)", 1e-9, parseval),
    ]
