import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from spmamba import autodiff as ad
from spmamba.autodiff import Tensor
from spmamba.blocks import (Classifier, Encoder, ModelConfig, PretrainModel, SpikingEmbedding,
                            SpikingMambaBlock, batch_masks, chamfer_loss, cross_entropy, mask_tokens)
from spmamba.nn import LayerNorm, load_checkpoint, save_checkpoint
from spmamba.pointcloud import chamfer
from spmamba.rng import Rng
from spmamba.snn import surrogate_smoothing

from conftest import rel_err


def tiny(**kw):
    base = dict(depth=1, decoder_depth=0, timesteps=2, centers=4, neighbors=4, width=8, num_classes=3,
                d_state=4)
    base.update(kw)
    return ModelConfig(**base)


def inputs(cfg, batch=2, seed=0):
    r = np.random.default_rng(seed)
    tok = r.normal(0, 0.3, size=(batch, cfg.timesteps, cfg.centers, cfg.neighbors, 3))
    cen = r.normal(0, 0.5, size=(batch, cfg.timesteps, cfg.centers, 3))
    return tok, cen


def zero_biases(module):
    for name, p in module.named_parameters():
        if name.endswith(("bias", "beta")) and not name.endswith("dt_bias"):
            p.data[...] = 0.0


def is_binary(t):
    return set(np.unique(t.data).tolist()) <= {0.0, 1.0}


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(depth=2, decoder_depth=2).validate()
    with pytest.raises(ValueError):
        ModelConfig(mask_ratio=1.0).validate()
    with pytest.raises(ValueError):
        ModelConfig(flip_mode="nope").validate()
    with pytest.raises(ValueError):
        ModelConfig(width=7).validate()
    ModelConfig().validate()


def test_default_config_matches_full_scale():
    c = ModelConfig()
    assert (c.depth, c.decoder_depth, c.mask_ratio, c.v_th, c.v_th_pre_ssm) == (12, 4, 0.6, 0.5, 0.25)


# -- spiking embedding --------------------------------------------------------------

def test_sel_shape():
    cfg = tiny()
    tok, cen = inputs(cfg)
    assert SpikingEmbedding(cfg, Rng(0))(tok, cen).shape == (2, 2, 4, 8)


@pytest.mark.parametrize("norm", [True, False])
def test_sel_zero_tokens_give_position_embedding(norm):
    cfg = tiny(norm=norm)
    sel = SpikingEmbedding(cfg, Rng(0))
    zero_biases(sel)
    tok, cen = inputs(cfg)
    out = sel(np.zeros_like(tok), cen)
    assert np.array_equal(out.data, sel.pos(cen).data)


@pytest.mark.parametrize("pool", ["post", "pre"])
def test_sel_neighbor_permutation_invariant(pool):
    cfg = tiny(sel_pool=pool)
    sel = SpikingEmbedding(cfg, Rng(1)).eval()
    tok, cen = inputs(cfg, seed=3)
    base = sel(tok, cen).data
    r = np.random.default_rng(5)
    for _ in range(5):
        perm = r.permutation(cfg.neighbors)
        assert np.allclose(sel(tok[..., perm, :], cen).data, base, atol=1e-12)


def test_sel_width_mismatch():
    cfg = tiny()
    tok, cen = inputs(cfg)
    with pytest.raises(ad.ShapeError):
        SpikingEmbedding(cfg, Rng(0))(tok[..., :2], cen)


# -- spiking mamba block ----------------------------------------------------------

def test_smb_shape_and_binarity():
    cfg = tiny()
    blk = SpikingMambaBlock(cfg, Rng(2))
    u = np.random.default_rng(0).normal(size=(2, 2, 4, 8))
    out = blk(u)
    assert out.shape == u.shape
    for name, t in blk.last.items():
        if name not in ("y_fwd", "y_bwd"):
            assert is_binary(t), name


@settings(max_examples=20, deadline=None)
@given(arrays(np.float64, (1, 2, 4, 8), elements=st.floats(-50, 50, allow_nan=False)))
def test_spike_binarity_everywhere(u):
    cfg = tiny()
    blk = SpikingMambaBlock(cfg, Rng(2))
    blk(u)
    for name in ("s", "s1", "z", "gate", "s2", "gated"):
        assert is_binary(blk.last[name]), name


def test_smb_zero_input_is_identity():
    cfg = tiny()
    blk = SpikingMambaBlock(cfg, Rng(2))
    zero_biases(blk)
    u = np.zeros((1, 2, 4, 8))
    assert np.array_equal(blk(u).data, u)
    assert not blk.last["gated"].data.any()


def test_smb_residual_when_nothing_fires():
    cfg = tiny(v_th=1e6)
    blk = SpikingMambaBlock(cfg, Rng(2))
    u = np.random.default_rng(1).normal(size=(1, 2, 4, 8))
    zero_biases(blk)
    assert np.allclose(blk(u).data, u, atol=0)


def test_gate_zero_silences_token_column():
    cfg = tiny()
    blk = SpikingMambaBlock(cfg, Rng(2))
    blk(np.random.default_rng(4).normal(size=(2, 2, 4, 8)) * 3)
    gate, gated = blk.last["gate"].data, blk.last["gated"].data
    assert gate.shape[-2] == 1
    closed = np.broadcast_to(gate == 0, gated.shape)
    assert not gated[closed].any()


def test_gate_shared_over_tokens_and_independent_of_x_branch():
    cfg = tiny()
    blk = SpikingMambaBlock(cfg, Rng(3))
    u = np.random.default_rng(7).normal(size=(1, 2, 4, 8)) * 2
    blk(u)
    s1 = blk.last["s1"].data.copy()
    gate = blk.last["gate"].data
    # gate is a token-mean of z, broadcast over tokens
    assert gate.shape == (1, 2, 1, cfg.width * cfg.expand)
    # pushing z around through in_z never touches the x branch
    blk.in_z.fc.weight.data = blk.in_z.fc.weight.data * -1.0
    blk(u)
    assert np.array_equal(blk.last["s1"].data, s1)


def test_single_step_tied_directions_symmetric():
    cfg = tiny(timesteps=1, tie_directions=True)
    blk = SpikingMambaBlock(cfg, Rng(5))
    blk(np.random.default_rng(1).normal(size=(2, 1, 4, 8)) * 2)
    assert np.array_equal(blk.last["y_fwd"].data, blk.last["y_bwd"].data)


def test_time_flip_branch_sees_reversed_order():
    cfg = tiny(timesteps=3, tie_directions=True)
    blk = SpikingMambaBlock(cfg, Rng(5))
    blk(np.random.default_rng(2).normal(size=(1, 3, 4, 8)) * 2)
    assert not np.array_equal(blk.last["y_fwd"].data, blk.last["y_bwd"].data)


# -- classification ----------------------------------------------------------------

def test_classifier_logits_shape():
    cfg = tiny()
    tok, cen = inputs(cfg, batch=3)
    assert Classifier(cfg, Rng(0))(tok, cen).shape == (3, 3)


def test_head_zero_features_zero_logits():
    cfg = tiny()
    clf = Classifier(cfg, Rng(0))
    assert np.array_equal(clf.head(np.zeros((2, cfg.width))).data, np.zeros((2, 3)))


def test_time_permutation_after_mean():
    cfg = tiny(timesteps=3)
    clf = Classifier(cfg, Rng(0))
    u = np.random.default_rng(0).normal(size=(2, 3, 4, 8))
    a = clf.head(ad.mean(ad.mean(Tensor(u), axis=2), axis=1)).data
    b = clf.head(ad.mean(ad.mean(Tensor(u[:, ::-1]), axis=2), axis=1)).data
    assert np.allclose(a, b, atol=1e-14)


def test_cross_entropy_value_and_grad():
    logits = np.array([[2.0, 0.5, -1.0], [0.0, 0.0, 0.0]])
    y = np.array([0, 2])
    p = np.exp(logits) / np.exp(logits).sum(1, keepdims=True)
    want = -np.mean(np.log(p[[0, 1], y]))
    assert cross_entropy(Tensor(logits), y).item() == pytest.approx(want, rel=1e-12)
    (g,) = ad.grad(lambda t: cross_entropy(t, y), logits)
    onehot = np.eye(3)[y]
    assert np.allclose(g, (p - onehot) / 2)


def _fd_param(loss_fn, param, coords, eps=1e-5):
    out = []
    for idx in coords:
        old = param.data[idx]
        param.data[idx] = old + eps
        fp = loss_fn().item()
        param.data[idx] = old - eps
        fm = loss_fn().item()
        param.data[idx] = old
        out.append((fp - fm) / (2 * eps))
    return np.array(out)


def test_end_to_end_sel_weight_gradient():
    # 2-center toy instance, surrogate-smoothed forward
    cfg = tiny(centers=2, depth=1)
    clf = Classifier(cfg, Rng(8))
    tok, cen = inputs(cfg, batch=2, seed=9)
    y = np.array([0, 2])
    loss_fn = lambda: cross_entropy(clf(tok, cen), y)
    w = clf.encoder.sel.fc1.fc.weight
    with surrogate_smoothing():
        clf.zero_grad()
        ad.backward(loss_fn())
        coords = [(0, 0), (1, 2), (2, 3)]
        fd = _fd_param(loss_fn, w, coords)
        got = np.array([w.grad[c] for c in coords])
    assert rel_err(got, fd) < 1e-3


# -- masking and pre-training ----------------------------------------------------------

def test_mask_ratio_zero():
    cfg = tiny(centers=10)
    tok, cen = inputs(cfg, batch=1)
    m = mask_tokens(tok[0], cen[0], 0.0, Rng(0))
    assert len(m.mask_index) == 0 and len(m.visible_index) == 10


def test_mask_counts_and_determinism():
    cfg = tiny(centers=10)
    tok, cen = inputs(cfg, batch=1)
    a = mask_tokens(tok[0], cen[0], 0.6, Rng(4))
    b = mask_tokens(tok[0], cen[0], 0.6, Rng(4))
    assert len(a.mask_index) == 6 and len(a.visible_index) == 4
    assert np.array_equal(a.mask_index, b.mask_index)
    assert not set(a.mask_index) & set(a.visible_index)
    # same positions at every time step
    assert np.array_equal(a.masked_centers, cen[0][:, a.mask_index])


def test_mask_ratio_bounds():
    cfg = tiny()
    tok, cen = inputs(cfg, batch=1)
    with pytest.raises(ValueError):
        mask_tokens(tok[0], cen[0], 1.0, Rng(0))


def test_chamfer_loss_matches_reference():
    r = np.random.default_rng(2)
    p, q = r.normal(size=(2, 3, 5, 3)), r.normal(size=(2, 3, 5, 3))
    want = np.mean([chamfer(p[i, j], q[i, j]) for i in range(2) for j in range(3)])
    assert chamfer_loss(p, q).item() == pytest.approx(want, rel=1e-12)
    assert chamfer_loss(p, p).item() == 0.0


def test_pretrain_output_shape_and_perfect_prediction():
    cfg = tiny(centers=10, depth=2, decoder_depth=1)
    model = PretrainModel(cfg, Rng(0))
    tok, cen = inputs(cfg, batch=2)
    split = batch_masks(tok, cen, 0.6, Rng(1))
    pred, enc = model(split["visible_tokens"], split["visible_centers"], split["masked_centers"])
    assert pred.shape == (2, 2, 6, 4, 3)
    assert enc.shape == (2, 2, 4, 8)
    assert chamfer_loss(split["masked_tokens"], split["masked_tokens"]).item() == 0.0


def test_decoder_has_no_spiking_sites(monkeypatch):
    import spmamba.blocks as blocks_mod
    cfg = tiny(centers=10, depth=2, decoder_depth=1)
    model = PretrainModel(cfg, Rng(0))
    calls = []
    monkeypatch.setattr(blocks_mod, "lif", lambda *a, **k: calls.append(a))
    x = Tensor(np.random.default_rng(0).normal(size=(1, 2, 10, 8)))
    for blk in model.decoder:
        assert blk(x).shape == x.shape
    assert calls == []


def test_encoder_never_sees_masked_content():
    cfg = tiny(centers=10, depth=2, decoder_depth=1)
    model = PretrainModel(cfg, Rng(0)).eval()
    tok, cen = inputs(cfg, batch=1)
    split = batch_masks(tok, cen, 0.6, Rng(1))
    _, enc_a = model(split["visible_tokens"], split["visible_centers"], split["masked_centers"])
    tok2 = tok.copy()
    tok2[:, :, split["mask_index"][0]] += 5.0
    split2 = batch_masks(tok2, cen, 0.6, Rng(1))
    _, enc_b = model(split2["visible_tokens"], split2["visible_centers"], split2["masked_centers"])
    assert np.array_equal(enc_a.data, enc_b.data)


def test_ratio_zero_reconstructs_visible():
    cfg = tiny(centers=6, depth=2, decoder_depth=1)
    model = PretrainModel(cfg, Rng(0))
    tok, cen = inputs(cfg, batch=1)
    split = batch_masks(tok, cen, 0.0, Rng(1))
    pred, _ = model(split["visible_tokens"], split["visible_centers"], split["masked_centers"])
    assert pred.shape == (1, 2, 6, 4, 3)
    assert np.isfinite(model.loss(split).item())


# -- checkpoints ----------------------------------------------------------------------

def test_checkpoint_roundtrip(tmp_path):
    cfg = tiny(depth=2, decoder_depth=1)
    clf = Classifier(cfg, Rng(0))
    tok, cen = inputs(cfg)
    clf(tok, cen)  # move BN running stats off their defaults
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, clf.state_dict())
    other = Classifier(cfg, Rng(99))
    other.load_state_dict(load_checkpoint(path))
    clf.eval()
    other.eval()
    assert np.array_equal(clf(tok, cen).data, other(tok, cen).data)
    blob = path.read_bytes()
    assert blob[:5] == b"SPMK1" and int.from_bytes(blob[5:7], "little") == 1


def test_checkpoint_rejects_garbage(tmp_path):
    p = tmp_path / "bad.ckpt"
    p.write_bytes(b"NOPE")
    with pytest.raises(ValueError):
        load_checkpoint(p)
    save_checkpoint(p, {"a": np.ones(3)})
    p.write_bytes(p.read_bytes() + b"\0")
    with pytest.raises(ValueError):
        load_checkpoint(p)


def test_strict_load_reports_missing_and_unexpected():
    cfg = tiny()
    clf = Classifier(cfg, Rng(0))
    state = clf.state_dict()
    with pytest.raises(KeyError):
        clf.load_state_dict({**state, "bogus": np.ones(1)})
    state.pop(next(iter(state)))
    with pytest.raises(KeyError):
        clf.load_state_dict(state)


def test_tied_directions_count_parameters_once():
    a = Encoder(tiny(tie_directions=True), Rng(0))
    b = Encoder(tiny(tie_directions=False), Rng(0))
    assert len(a.parameters()) < len(b.parameters())


def test_layer_norm_statistics_and_gradient():
    x = np.random.default_rng(3).normal(2.0, 5.0, size=(3, 4, 6))
    ln = LayerNorm(6)
    y = ln(x).data
    assert np.allclose(y.mean(-1), 0, atol=1e-12)
    assert np.allclose(y.var(-1), 1, atol=1e-5)
    w = np.random.default_rng(4).normal(size=x.shape)
    f = lambda t: (ln(t) * w).sum()
    (g,) = ad.grad(f, x)
    assert rel_err(g, ad.finite_difference_grad(f, x)) < 1e-4
