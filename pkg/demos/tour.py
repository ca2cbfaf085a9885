"""A short walk through the pieces: spectra, scan orders, the selective scan,
and one MDIF block.  Run with ``python demos/tour.py``."""
import numpy as np

from ssfmamba import blocks, fft3d, ssm
from ssfmamba import diffcore as dc
from ssfmamba.blocks import MdifConfig, ParamScope
from ssfmamba.scan import OrderKind, apply_order, build_order, invert_order

rng = np.random.default_rng(0)

# A real volume and its half spectrum.  The last axis keeps D//2 + 1 bins.
x = rng.normal(size=(4, 4, 6))
half = fft3d.rfft3(x)
print("half spectrum shape:", half.coefficients.shape)
print("round trip error:", np.abs(fft3d.irfft3(half) - x).max())

# Magnitude and phase split, then recombined
mag, phase = np.abs(half.coefficients), np.angle(half.coefficients)
print("polar recombination error:", np.abs(mag * np.exp(1j * phase) - half.coefficients).max())

# The three scan orders on a small grid
for kind in OrderKind:
    order = build_order(kind, (2, 2, 2))
    print(f"{kind.value:>12}:", [tuple(int(v) for v in c) for c in order.coords()[:4]], "...")
    seq = apply_order(rng.normal(size=(1, 2, 2, 2)), order)
    assert seq.shape == (1, 8)

# Selective scan against the step-by-step reference
core = ssm.init_core_params(rng, 4, 8)
u = rng.normal(size=(4, 20))
print("scan vs reference:", np.abs(ssm.selective_scan(u, core) - ssm.selective_scan_reference(u, core)).max())

# A freshly initialized MDIF block is the identity
cfg = MdifConfig(4)
params = blocks.init_mdif_params(rng, cfg, "b")
v = rng.normal(size=(4, 4, 4, 4))
tape = dc.Tape()
y = blocks.mdif_block(tape.input("x", v), ParamScope(tape, params, "b"), cfg)
print("MDIF identity at init:", np.array_equal(y.value, v))
