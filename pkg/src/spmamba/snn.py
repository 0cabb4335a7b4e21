"""Leaky integrate-and-fire neurons with an arctangent surrogate gradient."""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

_SMOOTH = False


@contextlib.contextmanager
def surrogate_smoothing(enabled: bool = True):
    """Replace the hard step by the integral of its surrogate derivative.

    Only meant for finite-difference gradient checks: inside this context,
    spikes are smooth values in (0, 1) and the forward pass is differentiable
    with exactly the derivative the backward pass uses.
    """
    global _SMOOTH
    prev, _SMOOTH = _SMOOTH, enabled
    try:
        yield
    finally:
        _SMOOTH = prev


def smoothing_enabled() -> bool:
    return _SMOOTH


@dataclass(frozen=True)
class LifParams:
    v_th: float = 0.5
    v_reset: float = 0.0
    tau: float = 2.0
    alpha: float = 2.0

    def __post_init__(self):
        if not self.v_th > self.v_reset:
            raise ValueError("LIF threshold must exceed the reset potential")
        if not self.tau > 1:
            raise ValueError("LIF time constant must exceed 1")
        if not self.alpha > 0:
            raise ValueError("surrogate sharpness must be positive")


@dataclass
class LifState:
    v: Tensor

    @classmethod
    def initial(cls, shape, p: LifParams) -> "LifState":
        return cls(Tensor(np.full(shape, p.v_reset, dtype=ad.get_default_dtype())))


class SpikeTensor(Tensor):
    """Tensor whose entries are spikes in {0, 1} (smooth in surrogate-smoothing mode)."""

    __slots__ = ()


def surrogate_grad(x: np.ndarray, alpha: float) -> np.ndarray:
    """Derivative of the arctangent surrogate at ``x = h - v_th``."""
    with np.errstate(over="ignore"):  # far from threshold the derivative is simply 0
        return (alpha / 2.0) / (1.0 + (math.pi * alpha * x / 2.0) ** 2)


def heaviside_surrogate(h, v_th: float, alpha: float = 2.0) -> SpikeTensor:
    """Spike where ``h >= v_th``; backward uses the arctangent surrogate."""
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    h = ad.as_tensor(h)
    x = h.data - v_th
    if _SMOOTH:
        out = np.arctan(math.pi * alpha * x / 2.0) / math.pi + 0.5
    else:
        out = (x >= 0).astype(h.data.dtype)
    dsdh = surrogate_grad(x, alpha)
    res = SpikeTensor(out, parents=(h,) if h.requires_grad else (),
                      backward_fn=(lambda g: (g * dsdh,)) if h.requires_grad else None,
                      op="heaviside")
    res.is_spike = True
    return res


def lif_step(state: LifState, x, p: LifParams) -> tuple[SpikeTensor, LifState]:
    """One LIF update: charge, fire, hard reset."""
    x = ad.as_tensor(x)
    v = state.v
    if v.shape != x.shape:
        raise ad.ShapeError(f"lif_step: state {v.shape} and input {x.shape} differ")
    h = v + (x - (v - p.v_reset)) / p.tau
    s = heaviside_surrogate(h, p.v_th, p.alpha)
    v_new = h * (1.0 - s) + s * p.v_reset
    return s, LifState(v_new)


def lif(x, p: LifParams, time_axis: int = 1, record: str | None = None) -> SpikeTensor:
    """Run a LIF population over ``time_axis`` from a reset state; returns spikes.

    When an energy recorder is active and ``record`` names the site, the
    firing rate is logged.
    """
    x = ad.as_tensor(x)
    steps = ad.unstack(x, time_axis)
    state = LifState.initial(steps[0].shape, p)
    spikes = []
    for xt in steps:
        s, state = lif_step(state, xt, p)
        spikes.append(s)
    out = ad.stack(spikes, time_axis)
    res = SpikeTensor(out.data, parents=out.parents, backward_fn=out.backward_fn, op="lif")
    res.requires_grad = out.requires_grad
    res.is_spike = True
    if record is not None:
        from . import energy
        energy.record_site(record, res)
    return res


def firing_rate(s) -> float:
    data = s.data if isinstance(s, Tensor) else np.asarray(s)
    if data.size == 0:
        return 0.0
    return float(data.mean())
