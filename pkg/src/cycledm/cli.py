"""Command-line pipeline orchestration.

Subcommands cover every pipeline stage: ``synth-data``, ``train-ddpm``,
``train-converter``, ``convert``, ``evaluate``, and ``grid``. Each run owns
its output directory exclusively (lock file) and writes a manifest with the
fully resolved configuration, the root seed, and content hashes of inputs
and outputs, sufficient to replay the run byte-for-byte.

Exit codes: 0 success, 2 configuration/validation error, 1 runtime failure.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import torch

from . import __version__
from . import checkpoint as ckpt
from . import conversion as conv
from . import data as data_mod
from . import evaluation as ev
from .config import ConfigError, RunConfig, parse_config_text, resolve_config
from .diffusion import (DOMAIN_INDEX, HW, MP, DdpmTrainParams, DenoiserBundle,
                        train_ddpm)
from .schedule import make_schedule
from .seeding import derive_seed, torch_stream

logger = logging.getLogger(__name__)


class RunLock:
    """Exclusive ownership of an output directory for the duration of a run."""

    def __init__(self, out_dir: Path):
        self.path = out_dir / ".lock"

    def __enter__(self):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise RuntimeError(
                f"output directory {self.path.parent} is locked by another run "
                f"(remove {self.path} if that run is dead)") from None
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        return self

    def __exit__(self, *exc):
        self.path.unlink(missing_ok=True)


def write_manifest(out_dir: Path, command: str, config: RunConfig,
                   args: dict[str, str], inputs: dict[str, Path],
                   outputs: dict[str, Path]) -> Path:
    lines = [f"command = {command}", f"version = {__version__}"]
    lines += [f"config.{k} = {v}" for k, v in
              (line.split(" = ", 1) for line in config.as_text().splitlines())]
    lines += [f"arg.{k} = {v}" for k, v in sorted(args.items())]
    lines += [f"input.{k}.sha256 = {_hash_path(p)}" for k, p in sorted(inputs.items())]
    lines += [f"output.{k}.sha256 = {_hash_path(p)}" for k, p in sorted(outputs.items())]
    path = out_dir / "manifest.txt"
    path.write_text("\n".join(lines) + "\n")
    return path


def _hash_path(path: Path) -> str:
    path = Path(path)
    if path.is_dir():
        import hashlib
        h = hashlib.sha256()
        for f in sorted(path.rglob("*")):
            if f.is_file() and f.name != ".lock":
                h.update(str(f.relative_to(path)).encode())
                h.update(ckpt.file_sha256(f).encode())
        return h.hexdigest()
    return ckpt.file_sha256(path)


def manifest_replay_args(manifest_path: str | Path) -> tuple[str, list[str], dict[str, str]]:
    """Extract (command, --set overrides, recorded args) from a manifest."""
    raw = parse_config_text(Path(manifest_path).read_text(), origin=str(manifest_path))
    command = raw.pop("command")
    raw.pop("version", None)
    overrides = [f"{k[len('config.'):]}={v}" for k, v in raw.items() if k.startswith("config.")]
    args = {k[len("arg."):]: v for k, v in raw.items() if k.startswith("arg.")}
    return command, overrides, args


# ---------------------------------------------------------------------------
# Shared helpers

def _load_domain_pair(cfg: RunConfig):
    """Materialize (hw, mp) full datasets per the config's data source."""
    if cfg["data.source"] == "synthetic":
        spec = data_mod.SyntheticGlyphSpec(
            resolution=cfg["data.resolution"],
            per_class=cfg["synth.per_class"],
            jitter=cfg["synth.jitter"],
            wobble=cfg["synth.wobble"],
            hw_stroke_width=cfg["synth.hw_stroke_width"],
            mp_stroke_width=cfg["synth.mp_stroke_width"],
            serifs=cfg["synth.serifs"],
            seed=derive_seed(cfg["seed"], "data.synthetic"),
        )
        return data_mod.generate_synthetic_domains(spec)
    root = Path(cfg["data.root"])
    hw = data_mod.load_image_directory(root / HW, HW, cfg["data.resolution"])
    mp = data_mod.load_image_directory(root / MP, MP, cfg["data.resolution"])
    return hw, mp


def _split_pair(cfg: RunConfig, hw, mp):
    split_seed = derive_seed(cfg["seed"], "data.split")
    hw_train, hw_test = data_mod.split_dataset(hw, cfg["data.train_fraction"], split_seed)
    mp_train, mp_test = data_mod.split_dataset(mp, cfg["data.train_fraction"], split_seed + 1)
    return hw_train, hw_test, mp_train, mp_test


def _schedule(cfg: RunConfig):
    return make_schedule(cfg["schedule.steps"], cfg["schedule.beta_start"],
                         cfg["schedule.beta_end"])


def _write_loss_csv(path: Path, history) -> None:
    if history and isinstance(history[0], dict):
        keys = list(history[0])
        lines = ["step," + ",".join(keys)]
        lines += [f"{i}," + ",".join(f"{row[k]:.6f}" for k in keys)
                  for i, row in enumerate(history)]
    else:
        lines = ["step,loss"] + [f"{i},{v:.6f}" for i, v in enumerate(history)]
    path.write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# Subcommands

def cmd_synth_data(cfg: RunConfig, args) -> int:
    out = Path(args.out)
    with RunLock(out):
        hw, mp = _load_domain_pair(cfg)
        for ds, name in ((hw, HW), (mp, MP)):
            data_mod.save_dataset_pngs(ds, out / name)
            data_mod.write_dataset_manifest(ds, out / f"{name}_manifest.txt")
        write_manifest(out, "synth-data", cfg, {"out": str(out)}, {},
                       {HW: out / HW, MP: out / MP})
    print(f"wrote {len(hw)} hw and {len(mp)} mp images under {out}")
    return 0


def cmd_train_ddpm(cfg: RunConfig, args) -> int:
    out = Path(args.out)
    with RunLock(out):
        hw, mp = _load_domain_pair(cfg)
        hw_train, _, mp_train, _ = _split_pair(cfg, hw, mp)
        schedule = _schedule(cfg)
        params = DdpmTrainParams(
            steps=cfg["ddpm.steps"], batch_size=cfg["ddpm.batch_size"], lr=cfg["ddpm.lr"],
            null_rate=cfg["ddpm.null_rate"], base_channels=cfg["ddpm.base_channels"],
            emb_dim=cfg["ddpm.emb_dim"], joint_model=cfg["ddpm.joint_model"])
        bundle, history = train_ddpm([hw_train, mp_train], schedule, params, cfg["seed"])
        ckpt_path = out / "ddpm.ckpt"
        bundle.save(ckpt_path)
        _write_loss_csv(out / "loss.csv", history)
        write_manifest(out, "train-ddpm", cfg, {"out": str(out)}, {},
                       {"checkpoint": ckpt_path, "loss": out / "loss.csv"})
    print(f"denoiser checkpoint: {ckpt_path} (final loss {history[-1]:.4f})")
    return 0


def cmd_train_converter(cfg: RunConfig, args) -> int:
    out = Path(args.out)
    ddpm_path = Path(args.ddpm)
    with RunLock(out):
        bundle = DenoiserBundle.load(ddpm_path)
        t_star = cfg["conversion.t_star"]
        if t_star > bundle.schedule.T:
            raise ConfigError([f"conversion.t_star: {t_star} exceeds the checkpoint's "
                               f"schedule T={bundle.schedule.T}"])
        if bundle.schedule.T != cfg["schedule.steps"]:
            raise ConfigError([f"schedule.steps: config says {cfg['schedule.steps']} but the "
                               f"denoiser checkpoint was trained with T={bundle.schedule.T}"])
        hw, mp = _load_domain_pair(cfg)
        hw_train, _, mp_train, _ = _split_pair(cfg, hw, mp)
        hyper = conv.ConversionHyperparams(
            lambda_cycle=cfg["conversion.lambda_cycle"],
            lambda_identity=cfg["conversion.lambda_identity"],
            gp_weight=cfg["conversion.gp_weight"],
            batch_size=cfg["conversion.batch_size"],
            epochs=cfg["conversion.epochs"],
            lr=cfg["conversion.lr"],
            base_channels=cfg["conversion.base_channels"])
        pair, history = conv.train_conversion(bundle, hw_train, mp_train, t_star,
                                              hyper, cfg["seed"])
        pair_path = out / "pair.ckpt"
        pair.save(pair_path)
        _write_loss_csv(out / "loss.csv", history)
        write_manifest(out, "train-converter", cfg, {"out": str(out), "ddpm": str(ddpm_path)},
                       {"ddpm": ddpm_path},
                       {"checkpoint": pair_path, "loss": out / "loss.csv"})
    print(f"conversion checkpoint: {pair_path} (t_star={pair.t_star})")
    return 0


def cmd_convert(cfg: RunConfig, args) -> int:
    out = Path(args.out)
    in_dir = Path(args.input)
    direction = args.direction
    source_domain = HW if direction == conv.HW_TO_MP else MP
    target_domain = MP if direction == conv.HW_TO_MP else HW
    with RunLock(out):
        bundle = DenoiserBundle.load(args.ddpm)
        stream = torch_stream(cfg["seed"], f"convert.{args.method}.{direction}")
        source = data_mod.load_image_directory(in_dir, source_domain, cfg["data.resolution"])
        batch = source.to_batch()
        if args.method == "cycledm":
            pair = conv.ConversionPair.load(args.pair)
            converted = conv.convert(batch, direction, pair, bundle, stream,
                                     unconditional=args.unconditional)
        else:
            t_start = args.t_start if args.t_start is not None else cfg["conversion.t_star"]
            converted = conv.sdedit_convert(batch, direction, t_start, bundle, stream,
                                            unconditional=args.unconditional)
        out_ds = data_mod.DomainDataset(domain=target_domain,
                                        images=converted.pixels.numpy(),
                                        classes=source.classes.copy(),
                                        provenance=f"convert:{args.method}")
        _save_name_preserving(source, out_ds, in_dir, out)
        ev.save_image_grid([("source", source.images), (args.method, out_ds.images)],
                           out / "grid.png")
        inputs = {"input": in_dir, "ddpm": Path(args.ddpm)}
        cli_args = {"out": str(out), "input": str(in_dir), "ddpm": str(args.ddpm),
                    "direction": direction, "method": args.method,
                    "unconditional": str(args.unconditional).lower()}
        if args.pair:
            inputs["pair"] = Path(args.pair)
            cli_args["pair"] = str(args.pair)
        if args.t_start is not None:
            cli_args["t_start"] = str(args.t_start)
        write_manifest(out, "convert", cfg, cli_args, inputs,
                       {"images": out / "images", "grid": out / "grid.png"})
    print(f"converted {len(out_ds)} images -> {out / 'images'}")
    return 0


def _save_name_preserving(source_ds, out_ds, in_dir: Path, out: Path) -> None:
    # re-walk the input tree in the loader's order so output names mirror inputs
    from PIL import Image
    names = []
    for sub in sorted(p for p in in_dir.iterdir() if p.is_dir()):
        names += [(sub.name, f.name) for f in sorted(sub.glob("*.png"))]
    if len(names) != len(out_ds):
        raise RuntimeError("input directory changed while converting")
    for (letter, fname), i in zip(names, range(len(out_ds))):
        dest = out / "images" / letter
        dest.mkdir(parents=True, exist_ok=True)
        arr = data_mod.denormalize_to_u8(out_ds.images[i, 0])
        Image.fromarray(arr, mode="L").save(dest / fname)


def cmd_evaluate(cfg: RunConfig, args) -> int:
    out = Path(args.out)
    with RunLock(out):
        target_domain = args.reference_domain
        generated = data_mod.load_image_directory(Path(args.generated), target_domain,
                                                  cfg["data.resolution"])
        reference = data_mod.load_image_directory(Path(args.reference), target_domain,
                                                  cfg["data.resolution"])
        if len(generated) == 0:
            raise RuntimeError("generated set is empty")
        if args.extractor:
            extractor = ev.FeatureExtractor.load(args.extractor)
        elif args.no_train:
            raise ConfigError(["--no-train given but no --extractor checkpoint provided"])
        else:
            hw, mp = _load_domain_pair(cfg)
            hw_train, _, mp_train, _ = _split_pair(cfg, hw, mp)
            params = ev.ExtractorParams(embed_dim=cfg["eval.embed_dim"], epochs=cfg["eval.epochs"],
                                        batch_size=cfg["eval.batch_size"], lr=cfg["eval.lr"])
            extractor = ev.train_feature_extractor([hw_train, mp_train],
                                                   derive_seed(cfg["seed"], "eval.extractor"),
                                                   params)
            extractor.save(out / "extractor.ckpt")

        real = extractor.embed(reference, source="reference")
        gen = extractor.embed(generated, source="generated")
        precision, recall = ev.knn_precision_recall(real, gen, cfg["eval.k"])
        fid = ev.compute_fid(real, gen)
        accuracy = ev.nn_classify_accuracy(generated, generated.classes, reference)
        report = ev.build_report(direction=args.direction, method=args.method,
                                 t_star=args.t_star, accuracy=accuracy, precision=precision,
                                 recall=recall, fid=fid, n_real=real.n, n_gen=gen.n,
                                 seed=cfg["seed"])
        (out / "report.json").write_text(report.to_json())
        (out / "report.txt").write_text(ev.render_table([report]))
        outputs = {"report_json": out / "report.json", "report_txt": out / "report.txt"}
        write_manifest(out, "evaluate", cfg,
                       {"out": str(out), "generated": str(args.generated),
                        "reference": str(args.reference), "reference_domain": target_domain,
                        "direction": args.direction, "method": args.method,
                        "t_star": str(args.t_star),
                        "extractor": str(args.extractor or ""),
                        "no_train": str(args.no_train).lower()},
                       {"generated": Path(args.generated), "reference": Path(args.reference)},
                       outputs)
    print((out / "report.txt").read_text(), end="")
    return 0


def cmd_grid(cfg: RunConfig, args) -> int:
    rows = []
    for item in args.row:
        if "=" not in item:
            raise ConfigError([f"--row needs LABEL=DIR, got {item!r}"])
        label, d = item.split("=", 1)
        ds = data_mod.load_image_directory(Path(d), HW, cfg["data.resolution"])
        rows.append((label, ds.images))
    out = Path(args.out)
    ev.save_image_grid(rows, out, max_cols=args.limit)
    print(f"grid: {out}")
    return 0


# ---------------------------------------------------------------------------
# Entry point

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cycledm",
                                     description="Unpaired glyph-domain conversion pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="config file path or preset name (e.g. 'paper')")
        p.add_argument("--set", dest="overrides", action="append", default=[],
                       metavar="KEY=VALUE", help="override one config key")
        p.add_argument("--seed", type=int, default=None, help="root seed override")

    p = sub.add_parser("synth-data", help="render the synthetic two-domain dataset")
    common(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser("train-ddpm", help="train the conditional denoiser")
    common(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_ddpm)

    p = sub.add_parser("train-converter", help="train conversion networks at t_star")
    common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--ddpm", required=True, help="denoiser checkpoint path")
    p.set_defaults(func=cmd_train_converter)

    p = sub.add_parser("convert", help="convert a directory of glyphs across domains")
    common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--input", required=True, help="source images, <dir>/<letter>/*.png")
    p.add_argument("--ddpm", required=True)
    p.add_argument("--pair", default=None, help="conversion checkpoint (method=cycledm)")
    p.add_argument("--direction", choices=conv.DIRECTIONS, required=True)
    p.add_argument("--method", choices=("cycledm", "sdedit"), default="cycledm")
    p.add_argument("--t-start", dest="t_start", type=int, default=None,
                   help="diffusion depth for method=sdedit (default: conversion.t_star)")
    p.add_argument("--unconditional", action="store_true",
                   help="use the null class token instead of true labels")
    p.set_defaults(func=cmd_convert)

    p = sub.add_parser("evaluate", help="score generated images against a reference split")
    common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--generated", required=True)
    p.add_argument("--reference", required=True)
    p.add_argument("--reference-domain", choices=(HW, MP), required=True)
    p.add_argument("--direction", default=conv.HW_TO_MP, choices=conv.DIRECTIONS)
    p.add_argument("--method", default="cycledm")
    p.add_argument("--t-star", dest="t_star", type=int, default=0)
    p.add_argument("--extractor", default=None, help="feature extractor checkpoint")
    p.add_argument("--no-train", action="store_true",
                   help="fail instead of training an extractor when none is given")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("grid", help="render a comparison grid from image directories")
    common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--row", action="append", required=True, metavar="LABEL=DIR")
    p.add_argument("--limit", type=int, default=12, help="max columns")
    p.set_defaults(func=cmd_grid)
    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    torch.set_num_threads(max(1, torch.get_num_threads()))
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = resolve_config(args.config, args.overrides, args.seed)
    except ConfigError as exc:
        print(str(exc), file=sys.stderr)
        return 2
    if args.command == "convert" and args.method == "cycledm" and not args.pair:
        print("convert --method cycledm requires --pair", file=sys.stderr)
        return 2
    try:
        return args.func(cfg, args)
    except ConfigError as exc:
        print(str(exc), file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure
        logger.error("%s", exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
