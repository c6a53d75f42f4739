"""Command-line entry point: ``darc {synth,train,eval,infer,recolor,stress}``."""
from __future__ import annotations

import argparse
import datetime
import logging
import sys
from pathlib import Path
from typing import Sequence

from . import __version__
from .checkpoint import CheckpointError, load_checkpoint
from .config import ConfigError, build, load_config, render, section
from .data import (DatasetError, SynthConfig, SynthError, default_domains, load_dataset,
                   read_image, save_dataset, synth_generate, write_image, write_labels)
from .infer import MIN_AREA, evaluate, extract_instances, two_pass_infer
from .network import ModelConfig, build_model
from .recolor import recolor
from .report import (plot_domain_scores, plot_losses, plot_stress, summary_row,
                     write_records, write_stress, write_summary)
from .stress import run_stress
from .train import TrainConfig, seed_everything, train

log = logging.getLogger("darc")


class UsageError(Exception):
    """Bad invocation; reported with exit status 2."""


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="key = value config file")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config entry, e.g. --set train.iterations=100")
    p.add_argument("--seed", type=int, help="random seed (overrides config)")
    p.add_argument("-v", "--verbose", action="store_true")


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="darc", description="Distribution-aware re-coloring nucleus segmentation.")
    parser.add_argument("--version", action="version", version=f"darc {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("synth", help="generate a synthetic multi-domain dataset")
    _common(p)
    p.add_argument("--out", type=Path, required=True, help="output root directory")

    p = sub.add_parser("train", help="train a model")
    _common(p)
    p.add_argument("--data", type=Path, required=True, help="domain dir or dataset root")
    p.add_argument("--train-domain", help="domain to train on when --data is a root")
    p.add_argument("--out", type=Path, required=True, help="checkpoint path")

    p = sub.add_parser("eval", help="score a checkpoint on one or more domains")
    _common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path, nargs="+", required=True)
    p.add_argument("--train-domain", required=True, help="source domain, excluded from the average")
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.add_argument("--name", help="method name for the summary row")

    p = sub.add_parser("infer", help="predict maps and instances for images")
    _common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--in", dest="inp", type=Path, required=True, help="PNG file or directory")
    p.add_argument("--out", type=Path, required=True, help="output directory")

    p = sub.add_parser("recolor", help="re-color one image with a trained colorizer")
    _common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--in", dest="inp", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True, help="output PNG")

    p = sub.add_parser("stress", help="background-expansion robustness test")
    _common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--B", dest="factors", help="comma-separated factors, e.g. 1,2,4,6")
    p.add_argument("--out", type=Path, required=True, help="output directory")
    return parser


# -- helpers -------------------------------------------------------------------

def _echo(out_dir: Path, args: argparse.Namespace, lines: list[str]) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    stamp = [
        f"# darc {__version__}",
        f"# command: {args.command}",
        f"# written: {datetime.datetime.now().isoformat(timespec='seconds')}",
    ]
    (out_dir / f"{args.command}_config.txt").write_text("\n".join(stamp + lines) + "\n")


def _seed(args: argparse.Namespace, flat: dict[str, str], key: str = "train.seed") -> int:
    if args.seed is not None:
        return args.seed
    return int(flat.get(key, 0))


def _infer_params(flat: dict[str, str], cfg: ModelConfig) -> tuple[float, float, int]:
    vals = section(flat, "infer")
    unknown = set(vals) - {"tau_seg", "tau_cnt", "min_area"}
    if unknown:
        raise ConfigError(f"unknown key infer.{sorted(unknown)[0]}")
    try:
        return (float(vals.get("tau_seg", cfg.tau_seg)), float(vals.get("tau_cnt", cfg.tau_cnt)),
                int(vals.get("min_area", MIN_AREA)))
    except ValueError as exc:
        raise ConfigError(f"infer: {exc}") from None


def _select_domain(samples, domain: str | None, where: Path):
    domains = sorted({s.domain for s in samples})
    if not samples:
        raise DatasetError(f"{where}: no samples found")
    if domain is None:
        if len(domains) > 1:
            raise UsageError(f"{where} holds domains {domains}; pass --train-domain")
        return samples
    chosen = [s for s in samples if s.domain == domain]
    if not chosen:
        raise DatasetError(f"{where}: domain {domain!r} not found (have {domains})")
    return chosen


# -- commands ------------------------------------------------------------------

def cmd_synth(args: argparse.Namespace, flat: dict[str, str]) -> None:
    vals = section(flat, "synth")
    val_per_domain = int(vals.pop("val_per_domain", 4))
    densities = vals.pop("densities", None)
    domains = default_domains()
    if densities is not None:
        dens = [float(d) for d in densities.split(",")]
        if len(dens) != len(domains):
            raise ConfigError(f"synth.densities needs {len(domains)} values")
        for d, v in zip(domains, dens):
            d.density = v
    if args.seed is not None:
        vals["seed"] = str(args.seed)
    cfg = build(SynthConfig, vals, "synth", domains=domains)
    save_dataset(args.out / "train", synth_generate(cfg, stream=0))
    if val_per_domain > 0:
        val_cfg = build(SynthConfig, {**vals, "images_per_domain": str(val_per_domain)},
                        "synth", domains=domains)
        save_dataset(args.out / "val", synth_generate(val_cfg, stream=1))
    lines = render({k: v for k, v in vars(cfg).items() if k != "domains"}, "synth")
    lines.append(f"synth.densities = {', '.join(str(d.density) for d in domains)}")
    lines.append(f"synth.val_per_domain = {val_per_domain}")
    _echo(args.out, args, lines)
    log.info("wrote synthetic dataset to %s", args.out)


def cmd_train(args: argparse.Namespace, flat: dict[str, str]) -> None:
    seed = _seed(args, flat)
    mcfg = build(ModelConfig, section(flat, "model"), "model")
    tvals = section(flat, "train")
    tvals["seed"] = str(seed)
    tcfg = build(TrainConfig, tvals, "train")
    samples = _select_domain(load_dataset(args.data), args.train_domain, args.data)
    seed_everything(seed)
    model = build_model(mcfg)
    out_dir = args.out.parent
    stem = args.out.stem
    _echo(out_dir, args, render(mcfg.to_dict(), "model") + render(tcfg.to_dict(), "train")
          + [f"# data: {args.data}", f"# samples: {len(samples)}"])
    history = train(model, samples, tcfg, log_path=out_dir / f"{stem}_loss.csv",
                    checkpoint_path=args.out)
    plot_losses(out_dir / f"{stem}_loss.png", history)
    log.info("saved checkpoint %s", args.out)


def cmd_eval(args: argparse.Namespace, flat: dict[str, str]) -> None:
    model, payload = load_checkpoint(args.checkpoint)
    tau_seg, tau_cnt, min_area = _infer_params(flat, model.cfg)
    samples = []
    for d in args.data:
        samples.extend(load_dataset(d))
    if not samples:
        raise DatasetError("no samples found in " + ", ".join(map(str, args.data)))
    domains = sorted({s.domain for s in samples})
    held_out = [d for d in domains if d != args.train_domain]
    if not held_out:
        raise UsageError(f"no held-out domains besides {args.train_domain!r}")
    records = evaluate(model, samples, tau_seg, tau_cnt, min_area)
    args.out.mkdir(parents=True, exist_ok=True)
    write_records(args.out / "scores.csv", records)
    name = args.name or model.cfg.variant
    text = write_summary(args.out / "summary.csv", [summary_row(name, records, held_out)], held_out)
    if args.train_domain in domains:
        text += "in-domain ({}): {}\n".format(
            args.train_domain, " ".join(summary_row(name, records, [args.train_domain])[1:3]))
    (args.out / "summary.txt").write_text(text)
    plot_domain_scores(args.out / "scores.png", records, f"{name} (trained on {args.train_domain})")
    _echo(args.out, args, render(model.cfg.to_dict(), "model")
          + [f"infer.tau_seg = {tau_seg}", f"infer.tau_cnt = {tau_cnt}",
             f"infer.min_area = {min_area}", f"# checkpoint iteration: {payload['iteration']}"])
    sys.stdout.write(text)


def _input_images(path: Path) -> list[Path]:
    if path.is_dir():
        files = sorted(path.glob("*.png"))
        if not files:
            raise DatasetError(f"{path}: no PNG images")
        return files
    if not path.is_file():
        raise DatasetError(f"{path}: no such file")
    return [path]


def cmd_infer(args: argparse.Namespace, flat: dict[str, str]) -> None:
    model, _ = load_checkpoint(args.checkpoint)
    tau_seg, tau_cnt, min_area = _infer_params(flat, model.cfg)
    args.out.mkdir(parents=True, exist_ok=True)
    for f in _input_images(args.inp):
        maps = two_pass_infer(model, read_image(f))
        labels = extract_instances(maps, tau_seg, tau_cnt, min_area)
        write_image(args.out / f"{f.stem}_seg.png", maps.seg)
        write_image(args.out / f"{f.stem}_contour.png", maps.contour)
        write_labels(args.out / f"{f.stem}_instances.png", labels)
        rho = "n/a" if maps.rho is None else f"{maps.rho:.4f}"
        log.info("%s: %d instances, predicted ratio %s", f.name, int(labels.max()), rho)
    _echo(args.out, args, render(model.cfg.to_dict(), "model"))


def cmd_recolor(args: argparse.Namespace, flat: dict[str, str]) -> None:
    model, _ = load_checkpoint(args.checkpoint)
    if model.colorizer is None:
        raise UsageError(f"checkpoint variant {model.cfg.variant} has no colorizer")
    out = recolor(read_image(args.inp), model.colorizer)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    write_image(args.out, out)


def cmd_stress(args: argparse.Namespace, flat: dict[str, str]) -> None:
    model, _ = load_checkpoint(args.checkpoint)
    tau_seg, tau_cnt, min_area = _infer_params(flat, model.cfg)
    vals = section(flat, "stress")
    text = args.factors or vals.get("B", "1,2,4,6")
    try:
        factors = [float(b) for b in text.split(",") if b.strip()]
    except ValueError:
        raise UsageError(f"bad --B value {text!r}") from None
    seed = args.seed if args.seed is not None else int(vals.get("seed", 0))
    samples = load_dataset(args.data)
    if not samples:
        raise DatasetError(f"{args.data}: no samples found")
    rows, per_image = run_stress(model, samples, factors, seed, tau_seg, tau_cnt, min_area)
    args.out.mkdir(parents=True, exist_ok=True)
    write_stress(args.out / "stress.csv", rows)
    with open(args.out / "stress_images.csv", "w") as fh:
        fh.write("B,dataset,image_id,aji,dice\n")
        for B, r in per_image:
            fh.write(f"{B:g},{r.dataset},{r.image_id},{r.aji!r},{r.dice!r}\n")
    plot_stress(args.out / "stress.png", rows, model.cfg.variant)
    _echo(args.out, args, [f"stress.B = {', '.join(f'{b:g}' for b in factors)}",
                           f"stress.seed = {seed}"])
    sys.stdout.write((args.out / "stress.csv").read_text())


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "infer": cmd_infer,
    "recolor": cmd_recolor,
    "stress": cmd_stress,
}


def dispatch(argv: Sequence[str] | None = None) -> int:
    parser = make_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        flat = load_config(args.config, args.overrides)
        COMMANDS[args.command](args, flat)
    except (UsageError, ConfigError) as exc:
        parser.print_usage(sys.stderr)
        print(f"darc {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (DatasetError, CheckpointError, SynthError, FloatingPointError, ValueError,
            RuntimeError, OSError) as exc:
        print(f"darc {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


def main() -> None:
    sys.exit(dispatch())
