import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from spmamba.autodiff import Tensor
from spmamba.blocks import Classifier, ModelConfig
from spmamba.energy import (E_AC_PJ, E_MAC_PJ, EnergyRecord, EnergyTrace, estimate, format_report,
                            instrument, record_affine, record_energy)
from spmamba.rng import Rng
from spmamba.snn import SpikeTensor


def toy_cfg(T=2, **kw):
    return ModelConfig(depth=2, decoder_depth=1, timesteps=T, centers=16, neighbors=8, width=32,
                       num_classes=3, **kw)


def toy_inputs(T, batch=2, seed=0):
    r = np.random.default_rng(seed)
    return r.normal(0, 0.2, size=(batch, T, 16, 8, 3)), r.normal(0, 0.6, size=(batch, T, 16, 3))


def test_constants():
    assert (E_MAC_PJ, E_AC_PJ) == (4.6, 0.9)


def test_hand_example_1800_pj():
    rec = EnergyRecord("smb0.x", "spike_conv", 1000, 0.5, 4)
    assert record_energy(rec) == (0.0, 1800.0)
    rep = estimate(EnergyTrace([rec]))
    assert rep.e_total == 1800.0 and rep.e_smb == [1800.0]


def test_silent_network_costs_only_float_work():
    recs = [EnergyRecord("sel.fc1", "float_conv", 500, 0.0, 4),
            EnergyRecord("smb0.in", "spike_conv", 800, 0.0, 4),
            EnergyRecord("smb0.ssm.state", "ssm_float", 300, 0.0, 4),
            EnergyRecord("smb0.ssm.input", "ssm_spike", 200, 0.0, 4)]
    assert estimate(EnergyTrace(recs)).e_total == pytest.approx(E_MAC_PJ * 800)


def test_doubling_T_doubles_spike_energy():
    rec = EnergyRecord("smb0.x", "spike_conv", 1234, 0.37, 2)
    dbl = EnergyRecord("smb0.x", "spike_conv", 1234, 0.37, 4)
    assert record_energy(dbl)[1] == pytest.approx(2 * record_energy(rec)[1], rel=1e-15)


def test_bad_firing_rate():
    with pytest.raises(ValueError):
        EnergyRecord("x", "spike_conv", 1, 1.5, 1)
    with pytest.raises(ValueError):
        EnergyRecord("x", "spike_conv", -1, 0.5, 1)
    with pytest.raises(ValueError):
        EnergyRecord("x", "photon_conv", 1, 0.5, 1)


def test_total_is_sum_of_parts():
    recs = [EnergyRecord("sel.a", "float_conv", 10, 0, 2), EnergyRecord("smb0.b", "spike_conv", 20, 0.3, 2),
            EnergyRecord("smb1.c", "ssm_float", 5, 0, 2), EnergyRecord("head.d", "float_conv", 7, 0, 2)]
    r = estimate(EnergyTrace(recs))
    assert r.e_total == pytest.approx(r.e_sel + sum(r.e_smb) + r.e_other)
    assert r.e_total_mj == pytest.approx(r.e_total * 1e-9)


records = st.builds(EnergyRecord, st.sampled_from(["sel.a", "smb0.b", "smb1.c", "head"]),
                    st.sampled_from(["float_conv", "spike_conv", "ssm_float", "ssm_spike"]),
                    st.floats(0, 1e6), st.floats(0, 1), st.integers(1, 8))


@given(st.lists(records, min_size=1, max_size=8), st.integers(0, 7), st.floats(0, 1), st.floats(1, 3))
def test_monotone_in_T_rate_and_flops(recs, i, rate, scale):
    i %= len(recs)
    base = estimate(EnergyTrace(recs)).e_total
    r = recs[i]
    more_t = [EnergyRecord(x.layer, x.kind, x.flops, x.firing_rate, x.timesteps + 1) for x in recs]
    assert estimate(EnergyTrace(more_t)).e_total >= base
    hi = EnergyRecord(r.layer, r.kind, r.flops, max(rate, r.firing_rate), r.timesteps)
    assert estimate(EnergyTrace(recs[:i] + [hi] + recs[i + 1:])).e_total >= base
    big = EnergyRecord(r.layer, r.kind, r.flops * scale, r.firing_rate, r.timesteps)
    assert estimate(EnergyTrace(recs[:i] + [big] + recs[i + 1:])).e_total >= base - 1e-9


def test_affine_flop_count():
    with instrument(batch=1, timesteps=1) as trace:
        record_affine("sel.fc", Tensor(np.ones((10, 4))), 4, 8)
    assert trace.records[0].flops == 640 and trace.records[0].kind == "float_conv"


def test_spike_input_recorded_per_step_with_rate():
    s = SpikeTensor(np.array([[1.0, 0, 0, 0]] * 10))
    s.is_spike = True
    with instrument(batch=1, timesteps=2) as trace:
        record_affine("smb0.fc", s, 4, 8)
    r = trace.records[0]
    assert (r.kind, r.flops, r.firing_rate, r.timesteps) == ("spike_conv", 320, 0.25, 2)


def test_no_recording_outside_instrument():
    record_affine("x", Tensor(np.ones((2, 2))), 2, 2)  # must be a no-op


def test_trace_merge():
    a = EnergyTrace([EnergyRecord("sel", "float_conv", 1, 0, 1)], {"a": 0.1})
    b = EnergyTrace([EnergyRecord("smb0", "float_conv", 2, 0, 1)], {"b": 0.2})
    m = a.merge(b)
    assert len(m.records) == 2 and m.sites == {"a": 0.1, "b": 0.2}


def run_model(T, tokens=None, seed=0):
    cfg = toy_cfg(T)
    model = Classifier(cfg, Rng(seed)).eval()
    tok, cen = toy_inputs(T) if tokens is None else tokens
    with instrument(batch=tok.shape[0], timesteps=T) as trace:
        model(tok, cen)
    return estimate(trace), trace


def test_zero_input_zero_rates():
    cfg = toy_cfg(2, gate_bias=0.0)
    model = Classifier(cfg, Rng(0)).eval()
    for _, p in model.named_parameters():
        if _.endswith(("bias", "beta")) and not _.endswith("dt_bias"):
            p.data[...] = 0.0
    with instrument(batch=1, timesteps=2) as trace:
        model(np.zeros((1, 2, 16, 8, 3)), np.zeros((1, 2, 16, 3)))
    assert all(r.firing_rate == 0.0 for r in trace.records)
    assert all(v == 0.0 for v in trace.sites.values())


def test_energy_monotone_in_T_on_toy_model():
    totals = [run_model(T, toy_inputs(T))[0].e_total for T in (1, 2, 4)]
    assert totals[0] < totals[1] < totals[2]


def test_spike_energy_ratio_tracks_T_and_rate():
    def spike_part(trace):
        return sum(record_energy(r)[1] for r in trace.records)

    def weighted_rate(trace):
        w = sum(r.flops for r in trace.records if r.kind in ("spike_conv", "ssm_spike"))
        return sum(r.flops * r.firing_rate for r in trace.records
                   if r.kind in ("spike_conv", "ssm_spike")) / w

    _, t1 = run_model(1, toy_inputs(1))
    _, t4 = run_model(4, toy_inputs(4))
    ratio = spike_part(t4) / spike_part(t1)
    assert ratio == pytest.approx(4 * weighted_rate(t4) / weighted_rate(t1), rel=1e-9)


def test_smb_mac_share_below_one_when_spiking():
    rep, trace = run_model(2)
    assert any(r.firing_rate > 0 for r in trace.records if r.layer.startswith("smb"))
    assert 0 < rep.smb_mac_share < 1
    assert len(rep.e_smb) == 2


def test_report_format_has_table_and_keys():
    rep, trace = run_model(2)
    text = format_report(rep, trace)
    kv = dict(line.split("=", 1) for line in text.splitlines() if "=" in line and not line.startswith("#"))
    assert float(kv["e_total_pj"]) == rep.e_total
    assert {"e_sel_pj", "e_smb0_pj", "e_smb1_pj", "mac_share", "e_total_mj"} <= set(kv)
    assert "2 FLOPs" in text.splitlines()[0]
