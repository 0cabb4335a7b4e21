"""Run configuration, training / pre-training / fine-tuning loops, metrics files."""

from __future__ import annotations

import hashlib
import logging
import math
from contextlib import contextmanager
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Any

import numpy as np

from . import __version__
from . import autodiff as ad
from .blocks import Classifier, ModelConfig, PretrainModel, batch_masks, cross_entropy
from .data import Prepared, load_split, make_dataset, make_split, prepare
from .energy import EnergyReport, EnergyTrace, estimate, instrument
from .hde import derive_config
from .nn import BatchNorm, load_checkpoint, save_checkpoint
from .optim import AdamW, clip_grad_norm, cosine_lr
from .rng import Rng

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    def __init__(self, key: str, message: str):
        super().__init__(message)
        self.key = key


class DivergenceError(FloatingPointError):
    def __init__(self, epoch: int, step: int, what: str = "loss"):
        super().__init__(f"non-finite {what} at epoch {epoch}, step {step}")
        self.epoch, self.step = epoch, step


@dataclass
class RunConfig:
    seed: int = 0
    out: str = "runs/default"
    # data
    kinds: str = "sphere,cube,torus"
    train_per_class: int = 20
    test_per_class: int = 10
    points: int = 512
    noise: float = 0.01
    data_dir: str = ""
    # encoding
    timesteps: int = 2
    centers: int = 16
    neighbors: int = 8
    stage_fraction: float = 0.1
    hde_forward: bool = True
    hde_backward: bool = True
    # model
    depth: int = 2
    decoder_depth: int = 1
    width: int = 32
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
    sel_pool: str = "post"
    norm: bool = True
    mask_ratio: float = 0.6
    # optimization
    optimizer: str = "adamw"
    lr: float = 1e-3
    weight_decay: float = 5e-2
    scheduler: str = "cosine"
    warmup_epochs: int = -1        # -1: a tenth of the epochs
    epochs: int = 40
    batch_size: int = 8
    grad_clip: float = 10.0
    recalibrate: bool = True
    dtype: str = "float64"
    # pre-training / fine-tuning
    pretrain_epochs: int = 20
    pretrain_per_class: int = 0    # 0: pre-train on the training split; else a separate unlabeled corpus
    finetune_epochs: int = -1      # -1: half of ``epochs``
    checkpoint: str = ""
    # ablation
    knob: str = "timesteps"
    knob_values: str = ""

    def model_config(self, num_classes: int | None = None) -> ModelConfig:
        return ModelConfig(depth=self.depth, decoder_depth=self.decoder_depth, timesteps=self.timesteps,
                           centers=self.centers, neighbors=self.neighbors, width=self.width,
                           num_classes=num_classes or len(self.kind_list), mask_ratio=self.mask_ratio,
                           d_state=self.d_state, expand=self.expand, conv_kernel=self.conv_kernel,
                           v_th=self.v_th, v_th_pre_ssm=self.v_th_pre_ssm, v_th_gate=self.v_th_gate,
                           gate_bias=self.gate_bias,
                           tau=self.tau, alpha=self.alpha, flip_mode=self.flip_mode,
                           sel_pool=self.sel_pool, norm=self.norm)

    @property
    def kind_list(self) -> list[str]:
        return [k.strip() for k in self.kinds.split(",") if k.strip()]

    def validate(self) -> None:
        if self.optimizer != "adamw":
            raise ConfigError("optimizer", "only 'adamw' is supported")
        if self.scheduler not in ("cosine", "constant"):
            raise ConfigError("scheduler", "scheduler must be 'cosine' or 'constant'")
        if self.dtype not in ("float64", "float32"):
            raise ConfigError("dtype", "dtype must be float64 or float32")
        if self.batch_size < 1:
            raise ConfigError("batch_size", "batch_size must be positive")
        for key in ("epochs", "pretrain_epochs", "pretrain_per_class", "train_per_class", "test_per_class"):
            if getattr(self, key) < 0:
                raise ConfigError(key, f"{key} must be non-negative")
        if not 0 <= self.seed < 2 ** 64:
            raise ConfigError("seed", "seed must be a 64-bit unsigned integer")
        try:
            self.model_config().validate()
        except ValueError as e:
            raise ConfigError("model", str(e)) from None

    def digest(self) -> str:
        text = "\n".join(f"{k}={v!r}" for k, v in sorted(asdict(self).items()) if k != "out")
        return hashlib.sha256(text.encode()).hexdigest()


def _coerce(key: str, raw: Any, typ: type):
    if isinstance(raw, typ) and not (typ is int and isinstance(raw, bool)):
        return raw
    text = str(raw).strip()
    try:
        if typ is bool:
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if typ is int:
            return int(text, 0)
        if typ is float:
            return float(text)
        return text
    except ValueError:
        raise ConfigError(key, f"invalid value {text!r} for key {key!r}") from None


def parse_pairs(lines, base: RunConfig | None = None) -> RunConfig:
    """Apply ``key=value`` lines (``#`` comments allowed) on top of ``base``."""
    types = {f.name: f.type for f in fields(RunConfig)}
    pytypes = {"int": int, "float": float, "bool": bool, "str": str}
    updates = {}
    for raw in lines:
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(line, f"expected key=value, got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in types:
            raise ConfigError(key, f"unknown config key {key!r}")
        updates[key] = _coerce(key, value, pytypes[types[key]])
    return replace(base or RunConfig(), **updates)


def load_config(path: str | None, overrides=(), **kwargs) -> RunConfig:
    cfg = RunConfig()
    if path:
        cfg = parse_pairs(Path(path).read_text().splitlines(), cfg)
    cfg = parse_pairs(list(overrides), cfg)
    if kwargs:
        cfg = replace(cfg, **{k: v for k, v in kwargs.items() if v is not None})
    cfg.validate()
    return cfg


# -- metrics ------------------------------------------------------------------------

class Metrics:
    """``key=value`` lines, epoch-prefixed, behind a header naming config hash and version."""

    def __init__(self, cfg: RunConfig, kind: str):
        self.lines = [f"# artifact=spmamba {__version__}", f"# config_sha256={cfg.digest()}",
                      f"# run={kind}"]

    def add(self, prefix: str, **values) -> None:
        for k, v in values.items():
            self.lines.append(f"{prefix}.{k}={_fmt(v)}")

    def text(self) -> str:
        return "\n".join(self.lines) + "\n"

    def write(self, path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(self.text())

    def values(self) -> dict[str, str]:
        return dict(line.split("=", 1) for line in self.lines if not line.startswith("#"))


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(float(v))
    return str(v)


# -- data ---------------------------------------------------------------------------

def load_data(cfg: RunConfig) -> tuple[Prepared, Prepared]:
    if cfg.data_dir:
        root = Path(cfg.data_dir)
        train_split, test_split = load_split(root / "train"), load_split(root / "test")
    else:
        train_split, test_split = make_dataset(cfg.kind_list, cfg.train_per_class, cfg.test_per_class,
                                               cfg.points, cfg.noise, cfg.seed)
    hcfg = derive_config(cfg.centers, cfg.timesteps, cfg.stage_fraction)
    enc_rng = Rng(cfg.seed).child("encode")
    kw = dict(forward=cfg.hde_forward, backward=cfg.hde_backward)
    return (prepare(train_split, hcfg, cfg.neighbors, enc_rng.child("train"), **kw),
            prepare(test_split, hcfg, cfg.neighbors, enc_rng.child("test"), **kw))


def pretrain_corpus(cfg: RunConfig, train: Prepared) -> Prepared:
    if cfg.pretrain_per_class <= 0:
        return train
    split = make_split(cfg.kind_list, cfg.pretrain_per_class, cfg.points, cfg.noise,
                       Rng(cfg.seed).child("data").child("corpus"))
    hcfg = derive_config(cfg.centers, cfg.timesteps, cfg.stage_fraction)
    return prepare(split, hcfg, cfg.neighbors, Rng(cfg.seed).child("encode").child("corpus"),
                   forward=cfg.hde_forward, backward=cfg.hde_backward)


def _batches(n: int, size: int, rng: Rng | None):
    order = rng.permutation(n) if rng is not None else np.arange(n)
    for i in range(0, n, size):
        yield np.sort(order[i:i + size]) if rng is None else order[i:i + size]


def _schedule(cfg: RunConfig, epochs: int, steps_per_epoch: int):
    total = max(1, epochs * steps_per_epoch)
    warm = cfg.warmup_epochs if cfg.warmup_epochs >= 0 else max(0, epochs // 10)
    warm_steps = warm * steps_per_epoch

    def lr_at(step: int) -> float:
        if cfg.scheduler == "constant":
            return cfg.lr
        return cosine_lr(step, total, cfg.lr, warm_steps)

    return lr_at


def evaluate(model: Classifier, data: Prepared, batch_size: int = 16) -> tuple[float, float]:
    """(accuracy, mean cross-entropy) in eval mode."""
    model.eval()
    correct, loss_sum = 0, 0.0
    for idx in _batches(len(data), batch_size, None):
        t, c, y = data.batch(idx)
        logits = model(t, c)
        loss_sum += cross_entropy(logits, y).item() * len(idx)
        correct += int((logits.data.argmax(axis=-1) == y).sum())
    model.train()
    return correct / len(data), loss_sum / len(data)


@contextmanager
def _numeric_guard(epoch: int, step: int):
    try:
        with np.errstate(over="ignore", invalid="ignore"):
            yield
    except DivergenceError:
        raise
    except FloatingPointError as e:
        raise DivergenceError(epoch, step, f"value ({e})") from e


def recalibrate_norms(model, data: Prepared, batch_size: int) -> None:
    """Replace running BatchNorm statistics by exact averages over one pass of ``data``.

    Exponential averages lag behind the final weights; spiking thresholds are
    sensitive to that shift.
    """
    norms = [m for m in model.modules() if isinstance(m, BatchNorm)]
    if not norms:
        return
    saved = [m.momentum for m in norms]
    for m in norms:
        m.running_mean[...] = 0.0
        m.running_var[...] = 0.0
    model.train()
    for k, idx in enumerate(_batches(len(data), batch_size, None)):
        for m in norms:
            m.momentum = 1.0 / (k + 1)
        t, c, _ = data.batch(idx)
        model(t, c)
    for m, mom in zip(norms, saved):
        m.momentum = mom


def _step(model, opt: AdamW, loss: ad.Tensor, lr: float, clip: float, epoch: int, step: int) -> None:
    if not math.isfinite(loss.item()):
        raise DivergenceError(epoch, step)
    opt.zero_grad()
    ad.backward(loss)
    norm = clip_grad_norm(opt.params, clip)
    if not math.isfinite(norm):
        raise DivergenceError(epoch, step, "gradient")
    opt.step(lr)


def fit_classifier(model: Classifier, cfg: RunConfig, train: Prepared, test: Prepared, epochs: int,
                   metrics: Metrics, rng: Rng, prefix: str = "e") -> float:
    """Train in place; returns final test accuracy."""
    params = model.parameters()
    opt = AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    steps = math.ceil(len(train) / cfg.batch_size)
    lr_at = _schedule(cfg, epochs, steps)
    step = 0
    model.train()
    for epoch in range(epochs):
        tot, correct = 0.0, 0
        for idx in _batches(len(train), cfg.batch_size, rng.child(epoch)):
            t, c, y = train.batch(idx)
            with _numeric_guard(epoch + 1, step):
                logits = model(t, c)
                loss = cross_entropy(logits, y)
            _step(model, opt, loss, lr_at(step), cfg.grad_clip, epoch + 1, step)
            step += 1
            tot += loss.item() * len(idx)
            correct += int((logits.data.argmax(-1) == y).sum())
        acc, test_loss = evaluate(model, test)
        metrics.add(f"{prefix}{epoch + 1:03d}", train_loss=tot / len(train), train_acc=correct / len(train),
                    test_loss=test_loss, test_acc=acc, lr=lr_at(max(0, step - 1)))
        log.info("epoch %d train_loss %.4f test_acc %.3f", epoch + 1, tot / len(train), acc)
    if cfg.recalibrate:
        recalibrate_norms(model, train, cfg.batch_size)
    acc, test_loss = evaluate(model, test)
    metrics.add("final", test_acc=acc, test_loss=test_loss)
    return acc


def _set_dtype(cfg: RunConfig) -> None:
    ad.set_default_dtype(np.float32 if cfg.dtype == "float32" else np.float64)


def train_classifier(cfg: RunConfig, data=None) -> tuple[Classifier, Metrics, float]:
    _set_dtype(cfg)
    train, test = data or load_data(cfg)
    model = Classifier(cfg.model_config(), Rng(cfg.seed).child("model"))
    if cfg.checkpoint:
        model.load_state_dict(load_checkpoint(cfg.checkpoint), strict=False)
    metrics = Metrics(cfg, "train")
    acc = fit_classifier(model, cfg, train, test, cfg.epochs, metrics, Rng(cfg.seed).child("batches"))
    return model, metrics, acc


def pretrain(cfg: RunConfig, data=None, epochs: int | None = None) -> tuple[PretrainModel, Metrics]:
    """Masked patch reconstruction on the training clouds or a separate corpus (labels unused)."""
    _set_dtype(cfg)
    train = pretrain_corpus(cfg, (data or load_data(cfg))[0])
    model = PretrainModel(cfg.model_config(), Rng(cfg.seed).child("pretrain_model"))
    epochs = cfg.pretrain_epochs if epochs is None else epochs
    metrics = Metrics(cfg, "pretrain")
    opt = AdamW(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    steps = math.ceil(len(train) / cfg.batch_size)
    lr_at = _schedule(cfg, epochs, steps)
    rng = Rng(cfg.seed).child("pretrain")
    step = 0
    model.train()
    for epoch in range(epochs):
        tot = 0.0
        ep_rng = rng.child(epoch)
        for b, idx in enumerate(_batches(len(train), cfg.batch_size, ep_rng.child("order"))):
            t, c, _ = train.batch(idx)
            split = batch_masks(t, c, cfg.mask_ratio, ep_rng.child(b))
            with _numeric_guard(epoch + 1, step):
                loss = model.loss(split)
            _step(model, opt, loss, lr_at(step), cfg.grad_clip, epoch + 1, step)
            step += 1
            tot += loss.item() * len(idx)
        metrics.add(f"p{epoch + 1:03d}", loss=tot / len(train), lr=lr_at(max(0, step - 1)))
        log.info("pretrain epoch %d loss %.6f", epoch + 1, tot / len(train))
    return model, metrics


def overfit_pretrain(cfg: RunConfig, data=None, steps: int = 200, index: int = 0) -> list[float]:
    """Masked-reconstruction losses while fitting a single training cloud under one fixed mask."""
    _set_dtype(cfg)
    train, _ = data or load_data(cfg)
    model = PretrainModel(cfg.model_config(), Rng(cfg.seed).child("pretrain_model"))
    opt = AdamW(model.parameters(), lr=cfg.lr, weight_decay=0.0)
    t, c, _ = train.batch(np.array([index]))
    split = batch_masks(t, c, cfg.mask_ratio, Rng(cfg.seed).child("overfit"))
    model.train()
    losses = []
    for step in range(steps):
        with _numeric_guard(1, step):
            loss = model.loss(split)
        _step(model, opt, loss, cfg.lr, cfg.grad_clip, 1, step)
        losses.append(loss.item())
    return losses


def encoder_state(model) -> dict[str, np.ndarray]:
    return {k: v for k, v in model.state_dict().items() if k.startswith("encoder.")}


def finetune(cfg: RunConfig, state: dict[str, np.ndarray], data=None,
             epochs: int | None = None) -> tuple[Classifier, Metrics, float]:
    """Load a pre-trained encoder into a fresh classifier and train everything."""
    _set_dtype(cfg)
    train, test = data or load_data(cfg)
    model = Classifier(cfg.model_config(), Rng(cfg.seed).child("model"))
    loaded = model.load_state_dict(state, strict=False)
    if not loaded:
        raise ValueError("finetune: checkpoint holds no encoder parameters")
    if epochs is None:
        epochs = cfg.finetune_epochs if cfg.finetune_epochs >= 0 else cfg.epochs // 2
    metrics = Metrics(cfg, "finetune")
    acc = fit_classifier(model, cfg, train, test, epochs, metrics, Rng(cfg.seed).child("ft_batches"),
                         prefix="f")
    return model, metrics, acc


# -- energy ---------------------------------------------------------------------------

def energy_of(model: Classifier, data: Prepared, count: int = 8) -> tuple[EnergyReport, EnergyTrace]:
    """Per-sample energy estimate from one eval-mode forward over the first ``count`` samples."""
    model.eval()
    idx = np.arange(min(count, len(data)))
    t, c, _ = data.batch(idx)
    with instrument(batch=len(idx), timesteps=t.shape[1]) as trace:
        model(t, c)
    model.train()
    return estimate(trace), trace


def save_model(model, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(path, model.state_dict())


# -- ablation -------------------------------------------------------------------------

ABLATION_DEFAULTS = {
    "flip_mode": ["time_flip", "token_flip", "both", "none"],
    "hde_forward": [True, False],
    "hde_backward": [True, False],
    "timesteps": [1, 2, 4],
}


@dataclass
class AblationRow:
    value: Any
    accuracy: float
    energy_pj: float
    mac_share: float


def ablate(cfg: RunConfig, knob: str | None = None, values=None) -> tuple[list[AblationRow], Metrics]:
    """Train the toy classifier once per knob value (shared seed); report accuracy and energy."""
    knob = knob or cfg.knob
    if knob not in ABLATION_DEFAULTS:
        raise ConfigError("knob", f"knob must be one of {sorted(ABLATION_DEFAULTS)}")
    if values is None and cfg.knob_values:
        typ = type(ABLATION_DEFAULTS[knob][0])
        values = [_coerce(knob, v, typ) for v in cfg.knob_values.split(",")]
    values = ABLATION_DEFAULTS[knob] if values is None else list(values)
    metrics = Metrics(cfg, f"ablate:{knob}")
    rows = []
    for v in values:
        run = replace(cfg, **{knob: v})
        run.validate()
        model, _, acc = train_classifier(run)
        _, test = load_data(run)
        report, _ = energy_of(model, test)
        rows.append(AblationRow(v, acc, report.e_total, report.mac_share))
        metrics.add(f"{knob}={v}", test_acc=acc, energy_pj=report.e_total, mac_share=report.mac_share)
    return rows, metrics


def format_ablation(knob: str, rows: list[AblationRow]) -> str:
    lines = [f"{knob:<14}{'test_acc':>10}{'energy_pJ':>16}{'mac_share':>11}"]
    for r in rows:
        lines.append(f"{str(r.value):<14}{r.accuracy:>10.4f}{r.energy_pj:>16.1f}{r.mac_share:>11.4f}")
    return "\n".join(lines) + "\n"
