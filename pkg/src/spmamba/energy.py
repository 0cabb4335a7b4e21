"""Theoretical energy: MAC work on real-valued inputs, AC work on spikes weighted by firing rate.

FLOP convention: one multiply-accumulate counts as 2 FLOPs.  Float-kind
records hold the FLOPs of a whole inference (all time steps); spike-kind
records hold FLOPs of a single time step, which the estimator scales by
``T * firing_rate``.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field

import numpy as np

E_MAC_PJ = 4.6
E_AC_PJ = 0.9

FLOAT_KINDS = ("float_conv", "ssm_float")
SPIKE_KINDS = ("spike_conv", "ssm_spike")

FLOP_CONVENTION = "multiply+add = 2 FLOPs; affine 2*in*out per position; dwconv 2*k*C per position"


@dataclass
class EnergyRecord:
    layer: str
    kind: str
    flops: float
    firing_rate: float
    timesteps: int

    def __post_init__(self):
        if self.kind not in FLOAT_KINDS + SPIKE_KINDS:
            raise ValueError(f"unknown record kind {self.kind!r}")
        if self.flops < 0:
            raise ValueError(f"{self.layer}: negative flop count")
        if not 0.0 <= self.firing_rate <= 1.0:
            raise ValueError(f"{self.layer}: firing rate {self.firing_rate} outside [0, 1]")


@dataclass
class EnergyTrace:
    records: list[EnergyRecord] = field(default_factory=list)
    sites: dict[str, float] = field(default_factory=dict)

    def merge(self, other: "EnergyTrace") -> "EnergyTrace":
        return EnergyTrace(self.records + other.records, {**self.sites, **other.sites})


@dataclass
class EnergyReport:
    e_sel: float
    e_smb: list[float]
    e_other: float
    e_total: float
    mac_share: float
    smb_mac_share: float

    @property
    def e_total_mj(self) -> float:
        return self.e_total * 1e-9


def record_energy(rec: EnergyRecord) -> tuple[float, float]:
    """(MAC energy, AC energy) in pJ for one record."""
    if not 0.0 <= rec.firing_rate <= 1.0:
        raise ValueError(f"{rec.layer}: firing rate {rec.firing_rate} outside [0, 1]")
    if rec.kind in FLOAT_KINDS:
        return E_MAC_PJ * rec.flops, 0.0
    return 0.0, E_AC_PJ * rec.flops * rec.timesteps * rec.firing_rate


def _group(layer: str) -> str:
    head = layer.split(".", 1)[0]
    if head == "sel":
        return "sel"
    if head.startswith("smb") and head[3:].isdigit():
        return head
    return "other"


def estimate(trace: EnergyTrace) -> EnergyReport:
    sel = other = 0.0
    smb: dict[int, float] = {}
    mac_total = smb_mac = smb_all = 0.0
    for rec in trace.records:
        mac, acc = record_energy(rec)
        e = mac + acc
        mac_total += mac
        g = _group(rec.layer)
        if g == "sel":
            sel += e
        elif g == "other":
            other += e
        else:
            n = int(g[3:])
            smb[n] = smb.get(n, 0.0) + e
            smb_mac += mac
            smb_all += e
    blocks = [smb.get(i, 0.0) for i in range(max(smb) + 1)] if smb else []
    total = sel + other + sum(blocks)
    return EnergyReport(e_sel=sel, e_smb=blocks, e_other=other, e_total=total,
                        mac_share=mac_total / total if total > 0 else 0.0,
                        smb_mac_share=smb_mac / smb_all if smb_all > 0 else 0.0)


# -- instrumentation -------------------------------------------------------------

class Recorder:
    """Collects records during a forward pass over a (batch, T, ...) input."""

    def __init__(self, batch: int, timesteps: int):
        self.batch = batch
        self.timesteps = timesteps
        self.trace = EnergyTrace()

    def add(self, layer: str, x, flops_total: float, spike_flops: float | None = None,
            float_kind: str = "float_conv", spike_kind: str = "spike_conv") -> None:
        """``flops_total`` counts the whole batch; normalized to one sample here."""
        per_sample = flops_total / self.batch
        if getattr(x, "is_spike", False):
            rate = float(np.clip(x.data.mean(), 0.0, 1.0)) if x.data.size else 0.0
            self.trace.records.append(EnergyRecord(
                layer, spike_kind, per_sample / self.timesteps, rate, self.timesteps))
        else:
            self.trace.records.append(EnergyRecord(layer, float_kind, per_sample, 0.0, self.timesteps))


_ACTIVE: list[Recorder] = []


@contextlib.contextmanager
def instrument(batch: int, timesteps: int):
    """Collect an :class:`EnergyTrace` from the forward passes run inside the block."""
    rec = Recorder(batch, timesteps)
    _ACTIVE.append(rec)
    try:
        yield rec.trace
    finally:
        _ACTIVE.remove(rec)


def _positions(x, width: int) -> int:
    return int(np.prod(x.shape)) // width


def record_affine(name: str, x, d_in: int, d_out: int) -> None:
    if _ACTIVE:
        _ACTIVE[-1].add(name, x, 2.0 * d_in * d_out * _positions(x, d_in))


def record_dwconv(name: str, x, kernel: int, channels: int) -> None:
    if _ACTIVE:
        _ACTIVE[-1].add(name, x, 2.0 * kernel * channels * _positions(x, channels))


def record_scan(name: str, x, channels: int, d_state: int) -> None:
    """Decay and readout products (A_bar*h, C*h) are float work; B_bar*x follows the input."""
    if not _ACTIVE:
        return
    rec = _ACTIVE[-1]
    pos = _positions(x, channels)
    rec.trace.records.append(EnergyRecord(
        f"{name}.state", "ssm_float", 4.0 * channels * d_state * pos / rec.batch, 0.0, rec.timesteps))
    rec.add(f"{name}.input", x, 2.0 * channels * d_state * pos,
            float_kind="ssm_float", spike_kind="ssm_spike")


def record_site(name: str, spikes) -> None:
    if _ACTIVE:
        _ACTIVE[-1].trace.sites[name] = float(spikes.data.mean()) if spikes.data.size else 0.0


def format_report(report: EnergyReport, trace: EnergyTrace | None = None) -> str:
    lines = [f"# energy estimate (E_MAC={E_MAC_PJ} pJ, E_AC={E_AC_PJ} pJ; {FLOP_CONVENTION})"]
    if trace is not None:
        lines.append(f"{'layer':<28}{'kind':<12}{'flops':>14}{'rate':>8}{'T':>4}{'pJ':>16}")
        for r in trace.records:
            mac, acc = record_energy(r)
            lines.append(f"{r.layer:<28}{r.kind:<12}{r.flops:>14.0f}{r.firing_rate:>8.4f}"
                         f"{r.timesteps:>4d}{mac + acc:>16.1f}")
    lines.append("")
    lines.append(f"e_sel_pj={float(report.e_sel)!r}")
    for i, e in enumerate(report.e_smb):
        lines.append(f"e_smb{i}_pj={float(e)!r}")
    lines.append(f"e_other_pj={float(report.e_other)!r}")
    lines.append(f"e_total_pj={float(report.e_total)!r}")
    lines.append(f"e_total_mj={float(report.e_total_mj)!r}")
    lines.append(f"mac_share={float(report.mac_share)!r}")
    lines.append(f"smb_mac_share={float(report.smb_mac_share)!r}")
    return "\n".join(lines) + "\n"
