"""Command-line entry point: ``spmamba <subcommand> [--config F] [--seed S] [--out DIR] [key=value ...]``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .data import make_dataset, save_split
from .energy import format_report
from .hde import derive_config, hde
from .nn import load_checkpoint
from .pointcloud import fps, read_points
from .rng import Rng
from .train import (ConfigError, DivergenceError, Metrics, RunConfig, ablate,
                    energy_of, evaluate, finetune, format_ablation, load_config, load_data, pretrain,
                    save_model, train_classifier)
from .blocks import Classifier

log = logging.getLogger("spmamba")

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3


def _header(cfg: RunConfig, kind: str) -> list[str]:
    return Metrics(cfg, kind).lines


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)
    print(f"wrote {path}")


def cmd_generate_data(cfg: RunConfig, args) -> int:
    out = Path(cfg.out)
    train, test = make_dataset(cfg.kind_list, cfg.train_per_class, cfg.test_per_class, cfg.points,
                               cfg.noise, cfg.seed)
    save_split(train, out / "train", cfg.kind_list)
    save_split(test, out / "test", cfg.kind_list)
    _write(out / "manifest.txt", "\n".join(_header(cfg, "generate-data") + [
        f"kinds={cfg.kinds}", f"train={len(train.clouds)}", f"test={len(test.clouds)}"]) + "\n")
    return EXIT_OK


def cmd_train(cfg: RunConfig, args) -> int:
    model, metrics, acc = train_classifier(cfg)
    out = Path(cfg.out)
    metrics.write(out / "metrics.txt")
    save_model(model, out / "model.ckpt")
    print(f"test_acc={acc!r}")
    return EXIT_OK


def cmd_pretrain(cfg: RunConfig, args) -> int:
    model, metrics = pretrain(cfg)
    out = Path(cfg.out)
    metrics.write(out / "pretrain_metrics.txt")
    save_model(model, out / "pretrain.ckpt")
    return EXIT_OK


def cmd_finetune(cfg: RunConfig, args) -> int:
    out = Path(cfg.out)
    if cfg.checkpoint:
        state = load_checkpoint(cfg.checkpoint)
    else:
        pre, pre_metrics = pretrain(cfg)
        pre_metrics.write(out / "pretrain_metrics.txt")
        save_model(pre, out / "pretrain.ckpt")
        state = pre.state_dict()
    model, metrics, acc = finetune(cfg, encoder_state_from(state))
    metrics.write(out / "finetune_metrics.txt")
    save_model(model, out / "model.ckpt")
    print(f"test_acc={acc!r}")
    return EXIT_OK


def encoder_state_from(state: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    enc = {k: v for k, v in state.items() if k.startswith("encoder.")}
    return enc or state


def _load_classifier(cfg: RunConfig) -> Classifier:
    if not cfg.checkpoint:
        raise ConfigError("checkpoint", "checkpoint=PATH is required")
    model = Classifier(cfg.model_config(), Rng(cfg.seed).child("model"))
    model.load_state_dict(load_checkpoint(cfg.checkpoint))
    return model


def cmd_eval(cfg: RunConfig, args) -> int:
    model = _load_classifier(cfg)
    _, test = load_data(cfg)
    acc, loss = evaluate(model, test)
    m = Metrics(cfg, "eval")
    m.add("eval", test_acc=acc, test_loss=loss)
    m.write(Path(cfg.out) / "eval_metrics.txt")
    print(f"test_acc={acc!r}")
    return EXIT_OK


def cmd_encode(cfg: RunConfig, args) -> int:
    if not args.input:
        raise ConfigError("input", "encode needs --input POINTS_FILE")
    cloud = read_points(args.input)
    hcfg = derive_config(cfg.centers, cfg.timesteps, cfg.stage_fraction)
    order = fps(cloud, hcfg.S, Rng(cfg.seed).child("encode"))
    enc = hde(order, hcfg, cloud, forward=cfg.hde_forward, backward=cfg.hde_backward)
    lines = [f"# {h[2:]}" if h.startswith("# ") else h for h in _header(cfg, "encode")]
    lines.append(f"# T={hcfg.T} E={hcfg.E} L={hcfg.L} M={hcfg.M} R={hcfg.R}")
    for i, frame in enumerate(enc.frames):
        lines.append(f"# step {i}")
        lines.extend(" ".join(repr(float(v)) for v in p) for p in frame)
    _write(Path(cfg.out) / "frames.xyz", "\n".join(lines) + "\n")
    return EXIT_OK


def cmd_energy_report(cfg: RunConfig, args) -> int:
    if cfg.checkpoint:
        model = _load_classifier(cfg)
    else:
        model = Classifier(cfg.model_config(), Rng(cfg.seed).child("model"))
    _, test = load_data(cfg)
    report, trace = energy_of(model, test)
    text = "\n".join(_header(cfg, "energy-report")) + "\n" + format_report(report, trace)
    _write(Path(cfg.out) / "energy.txt", text)
    sys.stdout.write(format_report(report, trace))
    return EXIT_OK


def cmd_ablate(cfg: RunConfig, args) -> int:
    knob = args.knob or cfg.knob
    rows, metrics = ablate(cfg, knob)
    table = format_ablation(knob, rows)
    metrics.write(Path(cfg.out) / f"ablate_{knob}.txt")
    _write(Path(cfg.out) / f"ablate_{knob}_table.txt", table)
    sys.stdout.write(table)
    return EXIT_OK


COMMANDS = {
    "generate-data": cmd_generate_data,
    "train": cmd_train,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "eval": cmd_eval,
    "encode": cmd_encode,
    "energy-report": cmd_energy_report,
    "ablate": cmd_ablate,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="spmamba", description=__doc__)
    p.add_argument("--version", action="version", version=f"spmamba {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", help="key=value config file")
        s.add_argument("--seed", type=int, help="unsigned 64-bit seed")
        s.add_argument("--out", help="output directory")
        s.add_argument("-v", "--verbose", action="store_true")
        if name == "encode":
            s.add_argument("--input", help="point file (text or PCB1 binary)")
        if name == "ablate":
            s.add_argument("--knob", choices=["flip_mode", "hde_forward", "hde_backward", "timesteps"])
        s.add_argument("overrides", nargs="*", metavar="key=value")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.overrides, seed=args.seed, out=args.out)
        return COMMANDS[args.command](cfg, args)
    except ConfigError as e:
        print(f"error: config key '{e.key}': {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (DivergenceError, FloatingPointError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
