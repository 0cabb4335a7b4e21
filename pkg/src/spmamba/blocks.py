"""Spiking embedding layer, spiking Mamba block, classifier and masked pre-training model.

All model tensors carry a leading batch axis and a time axis at position 1:
tokens are (B, T, E, K, 3), centers (B, T, E, 3), features (B, T, E, C).
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .nn import MLP2, ConvBN, DepthwiseConv1d, LayerNorm, Linear, Module, _param
from .rng import Rng
from .snn import LifParams, lif
from .ssm import FLIP_MODES, SsmParams, bidirectional_time, selective_scan


@dataclass
class ModelConfig:
    depth: int = 12             # encoder blocks N
    decoder_depth: int = 4      # decoder blocks N_d
    timesteps: int = 4          # T
    centers: int = 256          # E
    neighbors: int = 32         # K
    width: int = 384            # C'
    num_classes: int = 15
    mask_ratio: float = 0.6
    d_state: int = 16
    expand: int = 2
    conv_kernel: int = 4
    v_th: float = 0.5
    v_th_pre_ssm: float = 0.25
    v_th_gate: float = 0.5
    gate_bias: float = 2.0
    tau: float = 2.0
    alpha: float = 2.0
    flip_mode: str = "time_flip"
    sel_pool: str = "post"      # "post": max over K after the last SEL layer; "pre": before it
    tie_directions: bool = False
    norm: bool = True           # batch norm after each spiking-path conv

    def validate(self) -> None:
        if self.width % 2:
            raise ValueError("width must be even")
        if not 0 <= self.mask_ratio < 1:
            raise ValueError("mask_ratio must lie in [0, 1)")
        if self.decoder_depth >= self.depth:
            raise ValueError("decoder must be shallower than the encoder")
        if self.flip_mode not in FLIP_MODES:
            raise ValueError(f"flip_mode must be one of {FLIP_MODES}")
        if self.sel_pool not in ("post", "pre"):
            raise ValueError("sel_pool must be 'post' or 'pre'")
        for f in ("depth", "timesteps", "centers", "neighbors", "width", "num_classes", "d_state",
                  "expand", "conv_kernel"):
            if getattr(self, f) < 1:
                raise ValueError(f"{f} must be positive")

    def lif(self, v_th: float | None = None) -> LifParams:
        return LifParams(v_th=self.v_th if v_th is None else v_th, tau=self.tau, alpha=self.alpha)

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


class SpikingEmbedding(Module):
    """Neighbor tokens -> per-center feature potentials, plus a position embedding of the center."""

    def __init__(self, cfg: ModelConfig, rng: Rng, name: str = "sel"):
        half = cfg.width // 2
        self.fc1 = ConvBN(3, half, rng.child(1), name=f"{name}.fc1", norm=cfg.norm)
        self.fc2 = ConvBN(half, half, rng.child(2), name=f"{name}.fc2", norm=cfg.norm)
        self.fc3 = ConvBN(cfg.width, cfg.width, rng.child(3), name=f"{name}.fc3", norm=cfg.norm)
        self.pos = MLP2(3, half, cfg.width, rng.child(4), name=f"{name}.pos")
        self.lif_p = cfg.lif()
        self.pool = cfg.sel_pool
        self.name = name

    def __call__(self, tokens, centers) -> Tensor:
        tokens, centers = ad.as_tensor(tokens), ad.as_tensor(centers)
        if tokens.shape[-1] != 3 or tokens.shape[:-2] != centers.shape[:-1]:
            raise ad.ShapeError(f"sel: tokens {tokens.shape} and centers {centers.shape} do not conform")
        u = self.fc2(lif(self.fc1(tokens), self.lif_p, record=f"{self.name}.sn1"))
        g = ad.broadcast_to(ad.max_(u, axis=-2, keepdims=True), u.shape)
        s = lif(ad.concat([u, g], axis=-1), self.lif_p, record=f"{self.name}.sn2")
        if self.pool == "post":
            feat = ad.max_(self.fc3(s), axis=-2)
        else:
            feat = self.fc3(_spike_max(s))
        return feat + self.pos(centers)


def _spike_max(s) -> Tensor:
    from .snn import SpikeTensor
    m = ad.max_(s, axis=-2)
    out = SpikeTensor(m.data, parents=m.parents, backward_fn=m.backward_fn, op="max")
    out.requires_grad = m.requires_grad
    out.is_spike = True
    return out


class SpikingMambaBlock(Module):
    """Residual block: spiking input, spiking SSM branch with a time-flipped twin, pooled spiking gate."""

    def __init__(self, cfg: ModelConfig, rng: Rng, name: str = "smb"):
        d = cfg.width * cfg.expand
        self.in_x = ConvBN(cfg.width, d, rng.child(1), name=f"{name}.in_x", norm=cfg.norm)
        self.in_z = ConvBN(cfg.width, d, rng.child(2), name=f"{name}.in_z", norm=cfg.norm)
        # start with the pooled gate mostly open; a closed gate turns the block into the identity
        if self.in_z.bn is not None:
            self.in_z.bn.beta.data[...] = cfg.gate_bias
        else:
            self.in_z.fc.bias.data[...] = cfg.gate_bias
        self.conv = DepthwiseConv1d(d, cfg.conv_kernel, rng.child(3), name=f"{name}.dwconv")
        self.ssm = SsmParams(d, cfg.d_state, rng.child(4), name=f"{name}.ssm_fwd")
        self.ssm_bwd = self.ssm if cfg.tie_directions else self.ssm.direction(f"{name}.ssm_bwd")
        self.out = ConvBN(d, cfg.width, rng.child(5), name=f"{name}.out", norm=cfg.norm)
        self.lif_p = cfg.lif()
        self.lif_pre = cfg.lif(cfg.v_th_pre_ssm)
        self.lif_gate = cfg.lif(cfg.v_th_gate)
        self.flip_mode = cfg.flip_mode
        self.name = name
        self.last: dict[str, Tensor] = {}

    def named_parameters(self, prefix: str = ""):
        seen = set()
        for k, v in super().named_parameters(prefix):
            if id(v) not in seen:
                seen.add(id(v))
                yield k, v

    def __call__(self, u) -> Tensor:
        u = ad.as_tensor(u)
        nm = self.name
        s = lif(u, self.lif_p, record=f"{nm}.sn_in")
        s1 = lif(self.in_x(s), self.lif_p, record=f"{nm}.sn_x")
        z = lif(self.in_z(s), self.lif_p, record=f"{nm}.sn_z")

        def pre(t):
            return lif(self.conv(t), self.lif_pre, record=f"{nm}.sn_pre_ssm")

        y_fwd, y_bwd = bidirectional_time(s1, self.ssm, self.flip_mode, self.ssm_bwd, pre=pre)
        gate = lif(ad.mean(z, axis=-2, keepdims=True), self.lif_gate, record=f"{nm}.sn_gate")
        s2 = lif(y_fwd + y_bwd, self.lif_p, record=f"{nm}.sn_out")
        gated = s2 * gate
        gated.is_spike = True
        out = self.out(gated) + u
        if not np.all(np.isfinite(out.data)):
            raise FloatingPointError(f"{nm}: non-finite output")
        self.last = {"s": s, "s1": s1, "z": z, "gate": gate, "y_fwd": y_fwd, "y_bwd": y_bwd,
                     "s2": s2, "gated": gated}
        return out


class Encoder(Module):
    def __init__(self, cfg: ModelConfig, rng: Rng):
        cfg.validate()
        self.cfg = cfg
        self.sel = SpikingEmbedding(cfg, rng.child("sel"))
        self.blocks = [SpikingMambaBlock(cfg, rng.child(f"smb{i}"), name=f"smb{i}")
                       for i in range(cfg.depth)]

    def named_parameters(self, prefix: str = ""):
        yield from self.sel.named_parameters(prefix + "sel.")
        for i, b in enumerate(self.blocks):
            yield from b.named_parameters(f"{prefix}blocks.{i}.")

    def __call__(self, tokens, centers) -> Tensor:
        x = self.sel(tokens, centers)
        for b in self.blocks:
            x = b(x)
        return x

    def spikes(self) -> list[Tensor]:
        out = []
        for b in self.blocks:
            out.extend(v for v in b.last.values() if getattr(v, "is_spike", False))
        return out


class Classifier(Module):
    """Encoder, mean over centers then time of the final potentials, two-layer head."""

    def __init__(self, cfg: ModelConfig, rng: Rng):
        self.encoder = Encoder(cfg, rng.child("encoder"))
        self.head = MLP2(cfg.width, cfg.width, cfg.num_classes, rng.child("head"), name="head")

    def features(self, tokens, centers) -> Tensor:
        u = self.encoder(tokens, centers)
        return ad.mean(ad.mean(u, axis=2), axis=1)

    def __call__(self, tokens, centers) -> Tensor:
        return self.head(self.features(tokens, centers))


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    labels = np.asarray(labels, dtype=np.int64)
    m = Tensor(logits.data.max(axis=-1, keepdims=True))
    z = logits - m
    lse = ad.log(ad.sum_(ad.exp(z), axis=-1))
    picked = z[np.arange(len(labels)), labels]
    return ad.mean(lse - picked)


# -- masked pre-training ------------------------------------------------------------

@dataclass
class MaskSplit:
    visible_tokens: np.ndarray    # T x Ev x K x 3
    visible_centers: np.ndarray   # T x Ev x 3
    masked_tokens: np.ndarray     # T x Em x K x 3
    masked_centers: np.ndarray    # T x Em x 3
    visible_index: np.ndarray
    mask_index: np.ndarray


def mask_tokens(tokens: np.ndarray, centers: np.ndarray, ratio: float, rng: Rng) -> MaskSplit:
    """Mask floor(ratio*E) center positions, the same positions at every time step."""
    if not 0 <= ratio < 1:
        raise ValueError("mask ratio must lie in [0, 1)")
    E = centers.shape[-2]
    n_mask = int(np.floor(ratio * E + 1e-9))
    mask = np.sort(rng.choice(E, n_mask, replace=False)) if n_mask else np.zeros(0, dtype=np.int64)
    vis = np.setdiff1d(np.arange(E), mask)
    if len(vis) == 0:
        raise ValueError("mask_tokens: no visible centers left")
    return MaskSplit(tokens[..., vis, :, :], centers[..., vis, :], tokens[..., mask, :, :],
                     centers[..., mask, :], vis, mask)


def chamfer_loss(pred, target) -> Tensor:
    """Mean symmetric squared-L2 Chamfer distance over leading axes of (..., K, 3) patches."""
    pred, target = ad.as_tensor(pred), ad.as_tensor(target)
    diff = ad.reshape(pred, pred.shape[:-2] + (pred.shape[-2], 1, 3)) - \
        ad.reshape(target, target.shape[:-2] + (1, target.shape[-2], 3))
    d = ad.sum_(ad.square(diff), axis=-1)
    a = ad.mean(ad.min_(d, axis=-1), axis=-1)
    b = ad.mean(ad.min_(d, axis=-2), axis=-1)
    return ad.mean(a + b)


class DecoderBlock(Module):
    """Non-spiking residual block: affine, ReLU, unidirectional selective scan, affine."""

    def __init__(self, cfg: ModelConfig, rng: Rng, name: str):
        d = cfg.width * cfg.expand
        self.inp = Linear(cfg.width, d, rng.child(1), name=f"{name}.in")
        self.ssm = SsmParams(d, cfg.d_state, rng.child(2), name=f"{name}.ssm")
        self.out = Linear(d, cfg.width, rng.child(3), name=f"{name}.out")

    def __call__(self, x) -> Tensor:
        return x + self.out(selective_scan(ad.relu(self.inp(x)), self.ssm))


class PretrainModel(Module):
    """Spiking encoder on visible tokens; ANN decoder appends mask tokens and predicts patches."""

    def __init__(self, cfg: ModelConfig, rng: Rng):
        self.cfg = cfg
        self.encoder = Encoder(cfg, rng.child("encoder"))
        # the encoder's residual stream is unnormalized; rescale it before decoding
        self.enc_norm = LayerNorm(cfg.width)
        self.mask_token = _param(np.zeros(cfg.width))
        self.dec_pos = MLP2(3, cfg.width // 2, cfg.width, rng.child("dec_pos"), name="dec.pos")
        self.decoder = [DecoderBlock(cfg, rng.child(f"dec{i}"), name=f"dec{i}")
                        for i in range(cfg.decoder_depth)]
        self.head = Linear(cfg.width, 3 * cfg.neighbors, rng.child("rec_head"), gain=0.1, name="rec_head")

    def named_parameters(self, prefix: str = ""):
        yield from self.encoder.named_parameters(prefix + "encoder.")
        yield from self.enc_norm.named_parameters(prefix + "enc_norm.")
        yield prefix + "mask_token", self.mask_token
        yield from self.dec_pos.named_parameters(prefix + "dec_pos.")
        for i, b in enumerate(self.decoder):
            yield from b.named_parameters(f"{prefix}decoder.{i}.")
        yield from self.head.named_parameters(prefix + "head.")

    def __call__(self, vis_tokens, vis_centers, mask_centers) -> tuple[Tensor, Tensor]:
        """Returns (reconstructed masked patches, visible-token encoder output).

        With nothing masked the model reconstructs the visible patches instead.
        """
        vis_tokens, vis_centers = ad.as_tensor(vis_tokens), ad.as_tensor(vis_centers)
        mask_centers = np.asarray(mask_centers.data if isinstance(mask_centers, Tensor) else mask_centers)
        if vis_tokens.shape[2] == 0:
            raise ValueError("pretrain: no visible tokens")
        enc = self.encoder(vis_tokens, vis_centers)
        B, T, Ev, C = enc.shape
        Em = mask_centers.shape[2]
        parts, pos = [self.enc_norm(enc)], [vis_centers.data]
        if Em:
            parts.append(ad.broadcast_to(self.mask_token, (B, T, Em, C)))
            pos.append(mask_centers)
        x = ad.concat(parts, axis=2) + self.dec_pos(Tensor(np.concatenate(pos, axis=2)))
        for blk in self.decoder:
            x = blk(x)
        h = x[:, :, Ev:, :] if Em else x
        pred = ad.reshape(self.head(h), h.shape[:3] + (self.cfg.neighbors, 3))
        return pred, enc

    def loss(self, split_batch: dict[str, np.ndarray]) -> Tensor:
        pred, _ = self(split_batch["visible_tokens"], split_batch["visible_centers"],
                       split_batch["masked_centers"])
        target = split_batch["masked_tokens"] if split_batch["masked_tokens"].shape[2] else \
            split_batch["visible_tokens"]
        return chamfer_loss(pred, target)


def batch_masks(tokens: np.ndarray, centers: np.ndarray, ratio: float, rng: Rng) -> dict[str, np.ndarray]:
    """Independent masks per sample of a (B, T, E, K, 3) batch, stacked."""
    splits = [mask_tokens(tokens[b], centers[b], ratio, rng) for b in range(tokens.shape[0])]
    return {f: np.stack([getattr(s, f) for s in splits]) for f in
            ("visible_tokens", "visible_centers", "masked_tokens", "masked_centers",
             "visible_index", "mask_index")}
