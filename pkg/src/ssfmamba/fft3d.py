"""Real-input 3-D Fourier analysis with Hermitian half-spectrum storage.

Conventions: the forward transform is unnormalized, the inverse carries the
1/N factor.  The last axis (depth) is the packed one: a half spectrum of an
``(H, W, D)`` volume has shape ``(H, W, D // 2 + 1)``.

``dft3_reference`` evaluates the triple sum literally and is only meant as an
oracle.  The fast path delegates to ``numpy.fft``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diffcore import primitive


@dataclass
class FullSpectrum:
    coefficients: np.ndarray  # complex, shape (H, W, D)

    @property
    def shape(self):
        return self.coefficients.shape


@dataclass
class HalfSpectrum:
    spatial_shape: tuple
    coefficients: np.ndarray  # complex, shape (H, W, D // 2 + 1)

    def __post_init__(self):
        self.spatial_shape = tuple(int(n) for n in self.spatial_shape)
        expected = half_shape(self.spatial_shape)
        if self.coefficients.shape[-3:] != expected:
            raise ValueError(f"half spectrum of {self.spatial_shape} must have trailing shape "
                             f"{expected}, got {self.coefficients.shape}")


@dataclass
class MagPhase:
    magnitude: np.ndarray
    phase: np.ndarray
    spatial_shape: tuple


def half_shape(spatial_shape) -> tuple:
    h, w, d = spatial_shape
    return (h, w, d // 2 + 1)


def _check_volume(volume) -> np.ndarray:
    volume = np.asarray(volume, dtype=np.float64)
    if volume.ndim != 3 or min(volume.shape) < 1:
        raise ValueError(f"expected a non-empty (H, W, D) volume, got shape {volume.shape}")
    return volume


def dft3_reference(volume) -> FullSpectrum:
    """Literal triple-sum DFT.  O(N^2); use only on small grids."""
    f = _check_volume(volume)
    H, W, D = f.shape
    h = np.arange(H)
    w = np.arange(W)
    d = np.arange(D)
    out = np.zeros((H, W, D), dtype=np.complex128)
    for u in range(H):
        for v in range(W):
            for k in range(D):
                phase = (u * h[:, None, None] / H + v * w[None, :, None] / W
                         + k * d[None, None, :] / D)
                out[u, v, k] = np.sum(f * np.exp(-2j * np.pi * phase))
    return FullSpectrum(out)


def rfft3(volume) -> HalfSpectrum:
    f = _check_volume(volume)
    return HalfSpectrum(f.shape, np.fft.rfftn(f))


def self_conjugate_mask(spatial_shape) -> np.ndarray:
    """Boolean mask over the half grid of bins equal to their own negation."""
    H, W, D = spatial_shape
    u = np.arange(H)[:, None, None]
    v = np.arange(W)[None, :, None]
    w = np.arange(D // 2 + 1)[None, None, :]
    return ((2 * u) % H == 0) & ((2 * v) % W == 0) & ((2 * w) % D == 0)


def hermitian_complete(spec: HalfSpectrum) -> FullSpectrum:
    """Expand a half spectrum to the full grid using F(-k) = conj F(k).

    Coefficients of the full grid that are stored twice in the half grid
    (the w = 0 plane and, for even D, the Nyquist plane) are symmetrized,
    which also zeroes the imaginary part of self-conjugate bins.
    """
    H, W, D = spec.spatial_shape
    half = spec.coefficients
    full = np.zeros((H, W, D), dtype=np.complex128)
    nh = D // 2 + 1
    full[:, :, :nh] = half
    neg_u = (-np.arange(H)) % H
    neg_v = (-np.arange(W)) % W
    for k in range(nh, D):
        full[:, :, k] = np.conj(half[neg_u][:, neg_v][:, :, D - k])
    for k in sorted({0, D // 2} if D % 2 == 0 else {0}):
        plane = full[:, :, k]
        mirror = np.conj(plane[neg_u][:, neg_v])
        full[:, :, k] = 0.5 * (plane + mirror)
    return FullSpectrum(full)


def irfft3(spec: HalfSpectrum) -> np.ndarray:
    """Inverse of :func:`rfft3`; the output is always real.

    Imaginary parts of self-conjugate bins are discarded, as the real
    inverse has no place to put them.
    """
    coeffs = np.array(spec.coefficients, dtype=np.complex128)
    coeffs[self_conjugate_mask(spec.spatial_shape)] = coeffs[self_conjugate_mask(spec.spatial_shape)].real
    return np.fft.irfftn(coeffs, s=spec.spatial_shape, axes=(-3, -2, -1))


def to_mag_phase(spec: HalfSpectrum) -> MagPhase:
    c = spec.coefficients
    mag = np.abs(c)
    phase = np.where(mag == 0, 0.0, np.angle(c))
    # atan2 returns -pi on the negative real axis with a -0.0 imaginary part
    phase = np.where(phase <= -np.pi, np.pi, phase)
    return MagPhase(mag, phase, spec.spatial_shape)


def from_mag_phase(mp: MagPhase) -> HalfSpectrum:
    if mp.magnitude.shape != mp.phase.shape:
        raise ValueError(f"magnitude {mp.magnitude.shape} and phase {mp.phase.shape} differ")
    return HalfSpectrum(mp.spatial_shape, mp.magnitude * np.exp(1j * mp.phase))


def check_conjugate_symmetry(spec: FullSpectrum) -> float:
    F = spec.coefficients
    H, W, D = F.shape
    mirrored = F[(-np.arange(H)) % H][:, (-np.arange(W)) % W][:, :, (-np.arange(D)) % D]
    return float(np.max(np.abs(mirrored - np.conj(F))))


# ---------------------------------------------------------------------------
# differentiable pieces of the frequency branch; arrays are (C, H, W, D)

def _half_weights(spatial_shape):
    """Multiplicity of each half-grid depth index in the real inverse."""
    D = spatial_shape[-1]
    wts = np.full(D // 2 + 1, 2.0)
    wts[0] = 1.0
    if D % 2 == 0:
        wts[-1] = 1.0
    return wts


@primitive("spectral_magnitude")
class _SpectralMagnitude:
    """|rfftn(x)| over the three trailing axes."""

    def forward(attrs, x):
        F = np.fft.rfftn(x, axes=(-3, -2, -1))
        return np.abs(F), F

    def backward(attrs, ctx, xs, y, gy):
        F = ctx
        safe = np.where(y > 0, y, 1.0)
        unit = np.where(y > 0, F / safe, 0.0)
        g = gy * unit
        # adjoint of the real-to-half transform: Re(sum_k g_k e^{+i theta k n})
        shape = xs[0].shape
        full = np.zeros(shape, dtype=np.complex128)
        full[..., : g.shape[-1]] = g
        n = shape[-3] * shape[-2] * shape[-1]
        return (np.real(np.fft.ifftn(full, axes=(-3, -2, -1))) * n,)


@primitive("spectral_phase", constant=True)
class _SpectralPhase:
    """Phase of rfftn(x); a constant as far as gradients are concerned."""

    def forward(attrs, x):
        F = np.fft.rfftn(x, axes=(-3, -2, -1))
        phase = np.where(np.abs(F) == 0, 0.0, np.angle(F))
        return np.where(phase <= -np.pi, np.pi, phase), None

    def backward(attrs, ctx, xs, y, gy):
        return (None,)


@primitive("spectral_synthesis")
class _SpectralSynthesis:
    """irfftn(m * exp(i phase)) with the phase held constant."""

    def forward(attrs, m, phase):
        shape = attrs["spatial_shape"]
        z = m * np.exp(1j * phase)
        z[..., self_conjugate_mask(shape)] = z[..., self_conjugate_mask(shape)].real
        return np.fft.irfftn(z, s=shape, axes=(-3, -2, -1)), None

    def backward(attrs, ctx, xs, y, gy):
        m, phase = xs
        shape = attrs["spatial_shape"]
        n = shape[0] * shape[1] * shape[2]
        gz = np.fft.rfftn(gy, axes=(-3, -2, -1)) * (_half_weights(shape) / n)
        gm = np.real(np.conj(gz) * np.exp(1j * phase))
        return gm, None


def spectral_magnitude(x):
    return x.tape.apply("spectral_magnitude", x)


def spectral_phase(x):
    return x.tape.apply("spectral_phase", x)


def spectral_synthesis(m, phase, spatial_shape):
    return m.tape.apply("spectral_synthesis", m, phase, spatial_shape=tuple(spatial_shape))
