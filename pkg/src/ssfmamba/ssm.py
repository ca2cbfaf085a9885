"""Selective state-space scan and the Mamba block built around it.

Sequences are channel-first: ``u`` has shape ``(d_inner, L)``.  The state
matrix is real diagonal, ``A = -exp(A_log)`` of shape ``(d_inner, N)``, and
the per-step parameters are

    delta_t = softplus(W_dt u_t + dt_bias)      (d_inner,)
    B_t     = W_B u_t                           (N,)
    C_t     = W_C u_t                           (N,)

with the recurrence

    h_t = exp(delta_t A) * h_{t-1} + (delta_t B_t) u_t
    y_t = C_t . h_t + D * u_t
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import brentq

from . import diffcore as dc
from .diffcore import primitive


@dataclass
class SsmCoreParams:
    A_log: np.ndarray   # (d_inner, N)
    D: np.ndarray       # (d_inner,)
    W_B: np.ndarray     # (N, d_inner)
    W_C: np.ndarray     # (N, d_inner)
    W_dt: np.ndarray    # (d_inner, d_inner)
    dt_bias: np.ndarray  # (d_inner,)

    @property
    def A(self) -> np.ndarray:
        return -np.exp(self.A_log)

    @property
    def d_inner(self) -> int:
        return self.A_log.shape[0]

    @property
    def d_state(self) -> int:
        return self.A_log.shape[1]


@dataclass
class MambaParams:
    in_w: np.ndarray     # (2 * d_inner, d_model)
    in_b: np.ndarray     # (2 * d_inner,)
    conv_w: np.ndarray   # (d_inner, width); last tap multiplies the current step
    conv_b: np.ndarray   # (d_inner,)
    core: SsmCoreParams
    out_w: np.ndarray    # (d_model, d_inner)
    out_b: np.ndarray    # (d_model,)

    @property
    def d_model(self) -> int:
        return self.in_w.shape[1]

    @property
    def d_inner(self) -> int:
        return self.core.d_inner

    def as_dict(self) -> dict:
        out = {k: getattr(self, k) for k in ("in_w", "in_b", "conv_w", "conv_b", "out_w", "out_b")}
        for k in ("A_log", "D", "W_B", "W_C", "W_dt", "dt_bias"):
            out[k] = getattr(self.core, k)
        return out

    @classmethod
    def from_dict(cls, p: dict) -> "MambaParams":
        core = SsmCoreParams(*(p[k] for k in ("A_log", "D", "W_B", "W_C", "W_dt", "dt_bias")))
        return cls(p["in_w"], p["in_b"], p["conv_w"], p["conv_b"], core, p["out_w"], p["out_b"])


MAMBA_PARAM_NAMES = ("in_w", "in_b", "conv_w", "conv_b", "A_log", "D", "W_B", "W_C",
                     "W_dt", "dt_bias", "out_w", "out_b")


# ---------------------------------------------------------------------------
# initialization

def hippo_a_log(d_inner: int, d_state: int) -> np.ndarray:
    """Real-diagonal HiPPO-style init: A[c, n] = -(n + 1)."""
    return np.log(np.tile(np.arange(1, d_state + 1, dtype=np.float64), (d_inner, 1)))


def init_core_params(rng: np.random.Generator, d_inner: int, d_state: int = 8,
                     dt_min: float = 1e-3, dt_max: float = 1e-1) -> SsmCoreParams:
    bound = 1.0 / np.sqrt(d_inner)
    dt = rng.uniform(dt_min, dt_max, size=d_inner)
    return SsmCoreParams(
        A_log=hippo_a_log(d_inner, d_state),
        D=np.ones(d_inner),
        W_B=rng.uniform(-bound, bound, size=(d_state, d_inner)),
        W_C=rng.uniform(-bound, bound, size=(d_state, d_inner)),
        W_dt=rng.uniform(-bound, bound, size=(d_inner, d_inner)),
        dt_bias=np.log(np.expm1(dt)),  # inverse softplus
    )


def init_mamba_params(rng: np.random.Generator, d_model: int, expansion: int = 2,
                      d_state: int = 8, conv_width: int = 3) -> MambaParams:
    if expansion < 1:
        raise ValueError("expansion must be >= 1")
    d_inner = expansion * d_model
    in_bound = 1.0 / np.sqrt(d_model)
    conv_bound = 1.0 / np.sqrt(conv_width)
    out_bound = 1.0 / np.sqrt(d_inner)
    return MambaParams(
        in_w=rng.uniform(-in_bound, in_bound, size=(2 * d_inner, d_model)),
        in_b=np.zeros(2 * d_inner),
        conv_w=rng.uniform(-conv_bound, conv_bound, size=(d_inner, conv_width)),
        conv_b=np.zeros(d_inner),
        core=init_core_params(rng, d_inner, d_state),
        out_w=rng.uniform(-out_bound, out_bound, size=(d_model, d_inner)),
        out_b=np.zeros(d_model),
    )


SILU_UNIT_ROOT = brentq(lambda z: z / (1.0 + np.exp(-z)) - 1.0, 0.5, 3.0, xtol=1e-15)


def identity_mamba_params(d_model: int, d_state: int = 8, shift: float = 40.0) -> MambaParams:
    """Parameters under which :func:`mamba_block` is the identity up to ~1e-14.

    The gate bias sits at the root of SiLU(z) = 1.  The value path is shifted
    by ``shift`` before its SiLU (where SiLU(a) ~ a) and shifted back by the
    output bias; the scan keeps only its skip term.
    """
    d_inner = 2 * d_model
    in_w = np.zeros((2 * d_inner, d_model))
    in_w[:d_model, :] = np.eye(d_model)
    in_b = np.zeros(2 * d_inner)
    in_b[d_inner:] = SILU_UNIT_ROOT
    conv_w = np.zeros((d_inner, 3))
    conv_w[:, -1] = 1.0
    core = SsmCoreParams(
        A_log=hippo_a_log(d_inner, d_state),
        D=np.ones(d_inner),
        W_B=np.zeros((d_state, d_inner)),
        W_C=np.zeros((d_state, d_inner)),
        W_dt=np.zeros((d_inner, d_inner)),
        dt_bias=np.zeros(d_inner),
    )
    out_w = np.zeros((d_model, d_inner))
    out_w[:, :d_model] = np.eye(d_model)
    return MambaParams(in_w, in_b, conv_w, np.full(d_inner, shift), core, out_w,
                       np.full(d_model, -shift))


# ---------------------------------------------------------------------------
# discretization and scans

def discretize(A, B, delta):
    """Zero-order hold for the state path, Euler step for the input path.

    ``A`` is (d, N), ``B`` is (N,) or (N, L) and ``delta`` is (d,) or (d, L).
    Returns ``(Abar, Bbar)`` of shapes (d, N[, L]).
    """
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    delta = np.asarray(delta, dtype=np.float64)
    if np.any(delta <= 0):
        raise ValueError("delta must be positive")
    if delta.ndim == 0:
        return np.exp(delta * A), delta * B
    if delta.ndim == 1:
        return np.exp(delta[:, None] * A), delta[:, None] * B[None, :]
    return np.exp(delta[:, None, :] * A[:, :, None]), delta[:, None, :] * B[None, :, :]


def _scan_states(u, delta, A, B):
    """Run the recurrence; returns all states as an (L, d, N) array."""
    d, L = u.shape
    a = np.exp(delta.T[:, :, None] * A[None])                 # (L, d, N)
    b = (delta * u).T[:, :, None] * B.T[:, None, :]           # (L, d, N)
    states = np.empty((L, d, A.shape[1]))
    h = np.zeros((d, A.shape[1]))
    for t in range(L):
        h = a[t] * h + b[t]
        states[t] = h
    return states, a


def scan_core(u, delta, A, B, C, D=None):
    """Selective scan with explicit per-step ``delta`` (d, L), ``B``, ``C`` (N, L)."""
    u = np.asarray(u, dtype=np.float64)
    states, _ = _scan_states(u, np.asarray(delta, dtype=np.float64),
                             np.asarray(A, dtype=np.float64), np.asarray(B, dtype=np.float64))
    y = np.einsum("tdn,nt->dt", states, np.asarray(C, dtype=np.float64))
    if D is not None:
        y = y + np.asarray(D, dtype=np.float64)[:, None] * u
    return y


def scan_core_reference(u, delta, A, B, C, D=None):
    """The recurrence written out one scalar at a time."""
    u = np.asarray(u, dtype=np.float64)
    d_inner, L = u.shape
    N = np.asarray(A).shape[1]
    y = np.zeros((d_inner, L))
    for c in range(d_inner):
        h = [0.0] * N
        for t in range(L):
            acc = 0.0
            for n in range(N):
                abar = np.exp(delta[c][t] * A[c][n])
                bbar = delta[c][t] * B[n][t]
                h[n] = abar * h[n] + bbar * u[c][t]
                acc += C[n][t] * h[n]
            if D is not None:
                acc += D[c] * u[c][t]
            y[c, t] = acc
    return y


def _softplus(x):
    return np.logaddexp(0.0, x)


def _projections(u, p: SsmCoreParams):
    delta = _softplus(p.W_dt @ u + p.dt_bias[:, None])
    return delta, p.W_B @ u, p.W_C @ u


def selective_scan(u, params: SsmCoreParams):
    u = np.asarray(u, dtype=np.float64)
    if u.ndim != 2 or u.shape[1] < 1:
        raise ValueError(f"expected (d_inner, L) input with L >= 1, got {u.shape}")
    delta, B, C = _projections(u, params)
    return scan_core(u, delta, params.A, B, C, params.D)


def selective_scan_reference(u, params: SsmCoreParams):
    """Per-step, per-channel loop used as an oracle for :func:`selective_scan`."""
    u = np.asarray(u, dtype=np.float64)
    d_inner, L = u.shape
    N = params.d_state
    A = params.A
    y = np.zeros((d_inner, L))
    h = np.zeros((d_inner, N))
    for t in range(L):
        x = u[:, t]
        delta = [_softplus(sum(params.W_dt[c, j] * x[j] for j in range(d_inner)) + params.dt_bias[c])
                 for c in range(d_inner)]
        B = [sum(params.W_B[n, j] * x[j] for j in range(d_inner)) for n in range(N)]
        C = [sum(params.W_C[n, j] * x[j] for j in range(d_inner)) for n in range(N)]
        for c in range(d_inner):
            acc = 0.0
            for n in range(N):
                h[c, n] = np.exp(delta[c] * A[c, n]) * h[c, n] + delta[c] * B[n] * x[c]
                acc += C[n] * h[c, n]
            y[c, t] = acc + params.D[c] * x[c]
    return y


@primitive("selective_scan")
class _SelectiveScan:
    """y = C_t . h_t for the recurrence above; skip term is added outside.

    Inputs: u (d, L), delta (d, L), A (d, N), B (N, L), C (N, L).
    """

    def forward(attrs, u, delta, A, B, C):
        states, a = _scan_states(u, delta, A, B)
        return np.einsum("tdn,nt->dt", states, C), (states, a)

    def backward(attrs, ctx, xs, y, gy):
        u, delta, A, B, C = xs
        states, a = ctx
        L = u.shape[1]
        gC = np.einsum("dt,tdn->nt", gy, states)
        # gh_t = gy_t C_t + a_{t+1} gh_{t+1}
        direct = gy.T[:, :, None] * C.T[:, None, :]           # (L, d, N)
        gh = np.empty_like(states)
        acc = np.zeros(states.shape[1:])
        for t in range(L - 1, -1, -1):
            acc = direct[t] + acc
            gh[t] = acc
            acc = a[t] * acc
        prev = np.concatenate([np.zeros((1,) + states.shape[1:]), states[:-1]], axis=0)
        ga = gh * prev * a                                      # d/d(delta*A) of a_t
        gA = np.einsum("tdn,td->dn", ga, delta.T)
        gdelta = np.einsum("tdn,dn->dt", ga, A)
        # input path b_t = delta_t u_t B_t
        ghB = np.einsum("tdn,nt->dt", gh, B)
        gdelta = gdelta + ghB * u
        gu = ghB * delta
        gB = np.einsum("tdn,dt->nt", gh, delta * u)
        return gu, gdelta, gA, gB, gC


def causal_depthwise_conv(x, w, b):
    """Per-channel causal convolution over the last axis with left zero padding.

    ``x`` (d, L), ``w`` (d, width) with ``w[:, -1]`` applied to the current step.
    """
    width = w.shape[1]
    L = x.shape[1]
    xp = dc.pad(x, ((0, 0), (width - 1, 0)))
    out = None
    for k in range(width):
        term = xp[:, k:k + L] * w[:, k:k + 1]
        out = term if out is None else out + term
    return out + b.reshape(-1, 1)


def mamba_forward(x, p: dict):
    """Mamba block on tape variables; ``p`` maps the names in MAMBA_PARAM_NAMES to Vars."""
    tape = x.tape
    d_inner = p["A_log"].shape[0]
    xz = p["in_w"] @ x + p["in_b"].reshape(-1, 1)
    a = xz[:d_inner]
    z = xz[d_inner:]
    a = dc.silu(causal_depthwise_conv(a, p["conv_w"], p["conv_b"]))
    delta = dc.softplus(p["W_dt"] @ a + p["dt_bias"].reshape(-1, 1))
    B = p["W_B"] @ a
    C = p["W_C"] @ a
    A = -dc.exp(p["A_log"])
    y = tape.apply("selective_scan", a, delta, A, B, C) + p["D"].reshape(-1, 1) * a
    y = y * dc.silu(z)
    return p["out_w"] @ y + p["out_b"].reshape(-1, 1)


def mamba_block(x, params: MambaParams, prefix: str = "mamba"):
    """Mamba block.  ``x`` is a tape Var or a numpy (d_model, L) array.

    On a numpy input a private tape is used and the numpy result returned.
    """
    if isinstance(x, dc.Var):
        tape = x.tape
        p = {k: tape.param(f"{prefix}.{k}", v) for k, v in params.as_dict().items()}
        return mamba_forward(x, p)
    tape = dc.Tape()
    xv = tape.input("x", x)
    p = {k: tape.param(f"{prefix}.{k}", v) for k, v in params.as_dict().items()}
    return mamba_forward(xv, p).value.copy()
