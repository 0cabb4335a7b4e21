"""Selective (input-dependent) diagonal state-space scan and its bidirectional wrapper.

Recurrence, per channel c and state n:

    dA_k = exp(delta_k[c] * A[c, n])
    h_k  = dA_k * h_{k-1} + delta_k[c] * B_k[n] * x_k[c]
    y_k  = sum_n C_k[n] * h_k[c, n] + D[c] * x_k[c]

``B_k``, ``C_k`` and ``delta_k`` are projections of ``x_k``.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .nn import Module, _param
from .rng import Rng

FLIP_MODES = ("time_flip", "token_flip", "none", "both")


class NonFiniteError(FloatingPointError):
    pass


def discretize(A, B, delta) -> tuple[Tensor, Tensor]:
    """Zero-order hold for A (exp(delta*A)) and Euler for B (delta*B)."""
    delta = ad.as_tensor(delta)
    if np.any(delta.data <= 0):
        raise ValueError("discretize: delta must be positive")
    return ad.exp(delta * A), delta * B


def scan(x, delta, A, B, C, D=None) -> Tensor:
    """Fused selective scan over axis -2.

    x, delta: (..., L, Ch); A: (Ch, N); B, C: (..., L, N); D: (Ch,).
    """
    x, delta, A, B, C = (ad.as_tensor(t) for t in (x, delta, A, B, C))
    xd, dd, Ad, Bd, Cd = x.data, delta.data, A.data, B.data, C.data
    L, ch = xd.shape[-2], xd.shape[-1]
    n = Ad.shape[-1]
    if dd.shape != xd.shape or Ad.shape != (ch, n) or Bd.shape != xd.shape[:-1] + (n,) \
            or Cd.shape != Bd.shape:
        raise ad.ShapeError(f"scan: x {xd.shape}, delta {dd.shape}, A {Ad.shape}, "
                            f"B {Bd.shape}, C {Cd.shape} do not conform")
    dA = np.exp(dd[..., None] * Ad)                       # (..., L, ch, n)
    dx = dd * xd
    dBx = dx[..., None] * Bd[..., None, :]                # (..., L, ch, n)
    hs = np.empty_like(dA)
    h = np.zeros(dA.shape[:-3] + (ch, n), dtype=dA.dtype)
    for k in range(L):
        h = dA[..., k, :, :] * h + dBx[..., k, :, :]
        hs[..., k, :, :] = h
    if not np.all(np.isfinite(hs)):
        bad = np.nonzero(~np.isfinite(hs).reshape(-1, L, ch * n).all(axis=(0, 2)))[0]
        raise NonFiniteError(f"scan: non-finite state at step {int(bad[0])}")
    y = np.einsum("...lcn,...ln->...lc", hs, Cd)
    parents = [x, delta, A, B, C]
    if D is not None:
        D = ad.as_tensor(D)
        y = y + D.data * xd
        parents.append(D)

    def backward(gy):
        gH = np.empty_like(hs)
        gh = np.zeros_like(h)
        for k in range(L - 1, -1, -1):
            gh = gh + gy[..., k, :, None] * Cd[..., k, None, :]
            gH[..., k, :, :] = gh
            gh = gh * dA[..., k, :, :]
        h_prev = np.zeros_like(hs)
        h_prev[..., 1:, :, :] = hs[..., :-1, :, :]
        g_pre = gH * h_prev * dA                            # d/d(delta*A)
        gC = np.einsum("...lc,...lcn->...ln", gy, hs)
        gBsum = np.einsum("...lcn,...ln->...lc", gH, Bd)    # d/d(dx)
        gdelta = (g_pre * Ad).sum(-1) + gBsum * xd
        gx = gBsum * dd
        gA = np.einsum("mcn,mc->cn", g_pre.reshape(-1, ch, n), dd.reshape(-1, ch))
        gB = np.einsum("...lcn,...lc->...ln", gH, dx)
        grads = [gx, gdelta, gA, gB, gC]
        if D is not None:
            gx += gy * D.data
            grads.append((gy * xd).reshape(-1, ch).sum(0))
        return grads

    return Tensor.from_op(y, parents, backward, "scan")


def inverse_softplus(y: np.ndarray) -> np.ndarray:
    return y + np.log(-np.expm1(-y))


class SsmParams(Module):
    """Input projections plus per-direction A and D.

    ``A = -exp(A_log)`` keeps every diagonal entry negative.
    """

    def __init__(self, channels: int, d_state: int, rng: Rng, dt_min: float = 1e-3,
                 dt_max: float = 1e-1, name: str = "ssm"):
        s = 1.0 / np.sqrt(channels)
        self.w_B = _param(rng.uniform(-s, s, size=(channels, d_state)))
        self.w_C = _param(rng.uniform(-s, s, size=(channels, d_state)))
        self.w_dt = _param(rng.uniform(-s, s, size=(channels, channels)) * 0.1)
        dt = np.exp(rng.uniform(np.log(dt_min), np.log(dt_max), size=channels))
        self.dt_bias = _param(inverse_softplus(dt))
        self.A_log = _param(np.log(np.tile(np.arange(1, d_state + 1, dtype=float), (channels, 1))))
        self.D = _param(np.ones(channels))
        self.channels, self.d_state = channels, d_state
        self.name = name

    @property
    def A(self) -> Tensor:
        return -ad.exp(self.A_log)

    def direction(self, name: str) -> "SsmParams":
        """A second direction sharing the input projections with fresh A and D."""
        other = object.__new__(SsmParams)
        other.w_B, other.w_C, other.w_dt, other.dt_bias = self.w_B, self.w_C, self.w_dt, self.dt_bias
        other.A_log = _param(self.A_log.data.copy())
        other.D = _param(np.ones(self.channels))
        other.channels, other.d_state, other.name = self.channels, self.d_state, name
        return other


def selective_scan(x, p: SsmParams) -> Tensor:
    """Project B, C, delta from ``x`` (..., L, Ch) and run the scan."""
    from . import energy
    x = ad.as_tensor(x)
    energy.record_affine(f"{p.name}.proj", x, p.channels, 2 * p.d_state + p.channels)
    energy.record_scan(p.name, x, p.channels, p.d_state)
    B = ad.affine(x, p.w_B)
    C = ad.affine(x, p.w_C)
    delta = ad.softplus(ad.affine(x, p.w_dt, p.dt_bias))
    return scan(x, delta, p.A, B, C, p.D)


def _flip(x: Tensor, mode: str, time_axis: int, token_axis: int) -> Tensor:
    if mode in ("time_flip", "both"):
        x = ad.reverse(x, time_axis)
    if mode in ("token_flip", "both"):
        x = ad.reverse(x, token_axis)
    return x


def bidirectional_time(x, p_fwd: SsmParams, mode: str = "time_flip", p_bwd: SsmParams | None = None,
                       pre: Callable[[Tensor], Tensor] | None = None,
                       time_axis: int = -3, token_axis: int = -2) -> tuple[Tensor, Tensor]:
    """Run the scan on ``x`` (..., T, L, C) and on a flipped copy, flipping the result back.

    ``pre`` is applied to each branch input after flipping (so stateful
    preprocessing such as LIF sees the flipped time order).  ``mode='none'``
    returns the forward output split into two equal halves.
    """
    if mode not in FLIP_MODES:
        raise ValueError(f"unknown flip mode {mode!r}; expected one of {FLIP_MODES}")
    x = ad.as_tensor(x)
    pre = pre or (lambda t: t)
    y = selective_scan(pre(x), p_fwd)
    if mode == "none":
        half = y * 0.5
        return half, half
    xb = _flip(x, mode, time_axis, token_axis)
    yb = selective_scan(pre(xb), p_bwd if p_bwd is not None else p_fwd)
    return y, _flip(yb, mode, time_axis, token_axis)
