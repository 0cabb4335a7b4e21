"""Parameter containers, pointwise layers, depthwise conv, checkpoints."""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .rng import Rng

CHECKPOINT_MAGIC = b"SPMK1"
CHECKPOINT_VERSION = 1


class Module:
    """Walks attributes to find parameters, in definition order."""

    training = True

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def parameters(self) -> list[Tensor]:
        seen, out = set(), []
        for _, p in self.named_parameters():
            if id(p) not in seen:  # tied parameters appear once
                seen.add(id(p))
                out.append(p)
        return out

    def modules(self) -> Iterator["Module"]:
        yield self
        for value in vars(self).values():
            if isinstance(value, Module):
                yield from value.modules()
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        yield from item.modules()

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, np.ndarray) and name.startswith("running_"):
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_buffers(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_buffers(f"{full}.{i}.")

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {k: v.data.copy() for k, v in self.named_parameters()}
        state.update((k, v.copy()) for k, v in self.named_buffers())
        return state

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> list[str]:
        """Copy matching arrays in place; returns the names that were loaded."""
        own = dict(self.named_parameters())
        bufs = dict(self.named_buffers())
        loaded = []
        for k, arr in state.items():
            if k in bufs:
                if bufs[k].shape != arr.shape:
                    raise ValueError(f"buffer {k!r}: checkpoint shape {arr.shape} != {bufs[k].shape}")
                bufs[k][...] = arr
                loaded.append(k)
                continue
            if k not in own:
                if strict:
                    raise KeyError(f"unexpected parameter {k!r}")
                continue
            if own[k].shape != arr.shape:
                raise ValueError(f"parameter {k!r}: checkpoint shape {arr.shape} != {own[k].shape}")
            own[k].data = np.array(arr, dtype=own[k].data.dtype)
            loaded.append(k)
        own.update(bufs)
        if strict:
            missing = set(own) - set(state)
            if missing:
                raise KeyError(f"missing parameters {sorted(missing)}")
        return loaded

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


def _param(arr) -> Tensor:
    return Tensor(np.asarray(arr, dtype=ad.get_default_dtype()), requires_grad=True)


class Linear(Module):
    """Pointwise affine layer (1x1 conv over tokens)."""

    def __init__(self, d_in: int, d_out: int, rng: Rng, bias: bool = True, gain: float = 1.0,
                 name: str = "linear"):
        bound = gain * np.sqrt(3.0 / d_in)
        self.weight = _param(rng.uniform(-bound, bound, size=(d_in, d_out)))
        self.bias = _param(np.zeros(d_out)) if bias else None
        self.d_in, self.d_out = d_in, d_out
        self.name = name

    def __call__(self, x) -> Tensor:
        from . import energy
        energy.record_affine(self.name, x, self.d_in, self.d_out)
        return ad.affine(x, self.weight, self.bias)


class BatchNorm(Module):
    """Per-channel normalization over every axis but the last.

    Training mode normalizes with batch statistics and updates running
    averages; eval mode uses the running averages.
    """

    training = True

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        self.gamma = _param(np.ones(channels))
        self.beta = _param(np.zeros(channels))
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self.momentum, self.eps = momentum, eps

    def __call__(self, x) -> Tensor:
        x = ad.as_tensor(x)
        if self.training:
            axes = tuple(range(x.ndim - 1))
            mu = ad.mean(x, axis=axes)
            xc = x - mu
            var = ad.mean(ad.square(xc), axis=axes)
            n = max(1, x.size // x.shape[-1])
            m = self.momentum
            self.running_mean[...] = (1 - m) * self.running_mean + m * mu.data
            self.running_var[...] = (1 - m) * self.running_var + m * var.data * n / max(1, n - 1)
            xn = xc / ad.exp(0.5 * ad.log(var + self.eps))
        else:
            xn = (x - self.running_mean) / np.sqrt(self.running_var + self.eps)
        return xn * self.gamma + self.beta


class LayerNorm(Module):
    """Per-position normalization over the last axis."""

    def __init__(self, channels: int, eps: float = 1e-5):
        self.gamma = _param(np.ones(channels))
        self.beta = _param(np.zeros(channels))
        self.eps = eps

    def __call__(self, x) -> Tensor:
        x = ad.as_tensor(x)
        xc = x - ad.mean(x, axis=-1, keepdims=True)
        var = ad.mean(ad.square(xc), axis=-1, keepdims=True)
        return xc / ad.exp(0.5 * ad.log(var + self.eps)) * self.gamma + self.beta


class ConvBN(Module):
    """Pointwise conv followed by batch norm (folded into the conv at inference)."""

    def __init__(self, d_in: int, d_out: int, rng: Rng, name: str, norm: bool = True):
        self.fc = Linear(d_in, d_out, rng, name=name)
        self.bn = BatchNorm(d_out) if norm else None

    def __call__(self, x) -> Tensor:
        y = self.fc(x)
        return self.bn(y) if self.bn is not None else y


class DepthwiseConv1d(Module):
    """Per-channel causal conv over the token axis (-2) of a (..., L, C) tensor."""

    def __init__(self, channels: int, kernel: int, rng: Rng, name: str = "dwconv"):
        bound = np.sqrt(3.0 / kernel)
        self.weight = _param(rng.uniform(-bound, bound, size=(kernel, channels)))
        self.bias = _param(np.zeros(channels))
        self.kernel, self.channels = kernel, channels
        self.name = name

    def __call__(self, x) -> Tensor:
        from . import energy
        x = ad.as_tensor(x)
        energy.record_dwconv(self.name, x, self.kernel, self.channels)
        return depthwise_conv1d(x, self.weight, self.bias)


def depthwise_conv1d(x, weight, bias=None) -> Tensor:
    """y[l] = sum_j w[j] * x[l - (k-1) + j], zero left padding."""
    x, weight = ad.as_tensor(x), ad.as_tensor(weight)
    k, c = weight.shape
    if x.shape[-1] != c:
        raise ad.ShapeError(f"dwconv: input {x.shape} vs weight {weight.shape}")
    L = x.shape[-2]
    pad = Tensor(np.zeros(x.shape[:-2] + (k - 1, c), dtype=x.data.dtype))
    xp = ad.concat([pad, x], axis=-2)
    out = None
    for j in range(k):
        term = xp[..., j:j + L, :] * weight[j]
        out = term if out is None else out + term
    if bias is not None:
        out = out + bias
    return out


class MLP2(Module):
    """Two affine layers with a ReLU in between (non-spiking heads)."""

    def __init__(self, d_in: int, d_hidden: int, d_out: int, rng: Rng, name: str = "mlp"):
        self.fc1 = Linear(d_in, d_hidden, rng.child(1), name=f"{name}.fc1")
        self.fc2 = Linear(d_hidden, d_out, rng.child(2), name=f"{name}.fc2")

    def __call__(self, x) -> Tensor:
        return self.fc2(ad.relu(self.fc1(x)))


# -- checkpoint file -------------------------------------------------------------

def save_checkpoint(path, state: dict[str, np.ndarray]) -> None:
    """Binary table: magic, u16 version, u32 count, then per entry
    u32 name length, name (utf-8), u32 ndim, ndim x u32 dims, f64 data.  Little endian.
    """
    parts = [CHECKPOINT_MAGIC, struct.pack("<HI", CHECKPOINT_VERSION, len(state))]
    for name, arr in state.items():
        key = name.encode()
        arr = np.asarray(arr, dtype="<f8")
        parts.append(struct.pack("<I", len(key)) + key)
        parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(arr.tobytes(order="C"))
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    blob = Path(path).read_bytes()
    if blob[:5] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    version, count = struct.unpack_from("<HI", blob, 5)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off = 11
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<I", blob, off)
        off += 4
        name = blob[off:off + n].decode()
        off += n
        (ndim,) = struct.unpack_from("<I", blob, off)
        off += 4
        shape = struct.unpack_from(f"<{ndim}I", blob, off)
        off += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        out[name] = np.frombuffer(blob, dtype="<f8", count=size, offset=off).reshape(shape).copy()
        off += 8 * size
    if off != len(blob):
        raise ValueError(f"{path}: {len(blob) - off} trailing bytes")
    return out
