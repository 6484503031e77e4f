"""Command line interface for convolutional DRAW training, evaluation and compression."""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Callable, Dict, Iterator, List, Optional, Sequence

import numpy as np

from .analysis import eval_bound, kl_profile, progression_sheet, sample_sheet
from .codec import (
    Bitstream,
    calibrate_grids,
    choose_t_keep,
    decompress,
    encode_image,
    grids_to_extras,
    load_grids,
)
from .config import ModelConfig, RunConfig, ensure_list, load_config
from .data import (
    BatchSource,
    Preparer,
    Prefetcher,
    binarize,
    load_dataset,
    make_preparer,
    read_raw_image,
    to_unit,
    write_raw_image,
)
from .draw import ConvDraw
from .errors import ContractViolation, ConvDrawError
from .imageio import read_ppm_image, save_image
from .reports import RATE_FIELDS, EvalPayload, RateReportPayload, rate_rows, write_csv
from .settings import CONFIG_ENV_VAR, DEFAULT_SEED, configure_logging, resolve_config_path, resolve_log_level
from .trainer import Trainer, bench_depth, beta_sweep

LOGGER = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_FAILURE = 2


class _Parser(argparse.ArgumentParser):
    """Usage errors exit with status 1 instead of argparse's 2."""

    def error(self, message: str) -> None:  # type: ignore[override]
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _common_options() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument(
        "--config",
        type=Path,
        default=None,
        help=(
            "Path to a key = value configuration file. When omitted the path is "
            f"taken from the {CONFIG_ENV_VAR} environment variable, else defaults apply."
        ),
    )
    common.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="Override a dotted configuration key, e.g. model.T=16. May be repeated.",
    )
    common.add_argument("--seed", type=int, default=None, help=f"Seed for all randomness (default {DEFAULT_SEED}).")
    common.add_argument("--out-dir", type=Path, default=Path("."), help="Directory for generated artifacts.")
    common.add_argument("--log-level", default=None, help="Override the configured log level.")
    return common


def build_parser() -> argparse.ArgumentParser:
    common = _common_options()
    parser = _Parser(prog="convdraw_compression", description=__doc__)
    commands = parser.add_subparsers(dest="command", metavar="COMMAND")
    commands.required = True

    train = commands.add_parser("train", parents=[common], help="Train a model on the configured dataset.")
    train.add_argument("--checkpoint", type=Path, default=None, help="Checkpoint to write (default OUT_DIR/model.ckpt).")
    train.add_argument("--resume", type=Path, default=None, help="Continue from an existing checkpoint.")
    train.add_argument("--max-steps", type=int, default=None, help="Override train.max_steps.")

    evaluate = commands.add_parser("eval", parents=[common], help="Report the variational bound.")
    evaluate.add_argument("--model", type=Path, required=True)
    evaluate.add_argument("--split", choices=("train", "valid", "both"), default="valid")
    evaluate.add_argument("--noise-draws", type=int, default=1)

    compress = commands.add_parser("compress", parents=[common], help="Compress one image into a stream.")
    compress.add_argument("--model", type=Path, required=True)
    keep = compress.add_mutually_exclusive_group()
    keep.add_argument("--t-keep", type=int, default=None, help="Stored timesteps (default: all).")
    keep.add_argument("--target-bpd", type=float, default=None, help="Store as many steps as fit this rate.")
    compress.add_argument("--lambda", dest="temperature", type=float, default=0.0, help="Prior temperature for the tail.")
    compress.add_argument("--report", type=Path, default=None, help="Write the per-step rate table as CSV.")
    compress.add_argument("input", type=Path, help="Raw C×H×W u8 image or binary PPM.")
    compress.add_argument("out", type=Path, help="Stream file to write.")

    expand = commands.add_parser("decompress", parents=[common], help="Decode a stream into an image.")
    expand.add_argument("--model", type=Path, required=True)
    expand.add_argument("input", type=Path, help="Stream file.")
    expand.add_argument("out", type=Path, help="Image to write (.ppm, .png or .raw).")

    sample = commands.add_parser("sample", parents=[common], help="Draw unconditional samples.")
    sample.add_argument("--model", type=Path, required=True)
    sample.add_argument("--count", type=int, default=16)
    sample.add_argument("--lambda", dest="temperature", type=float, default=1.0)
    sample.add_argument("--out", type=Path, default=None, help="Sheet to write (default OUT_DIR/samples.ppm).")

    profile = commands.add_parser("profile", parents=[common], help="Write the per-step KL profile CSV.")
    profile.add_argument("--model", type=Path, required=True)
    profile.add_argument("--noise-draws", type=int, default=1)

    bench = commands.add_parser("bench", parents=[common], help="Depth benchmark or β sweep.")
    bench.add_argument("--n-t", default="1,2,4,8,16,32", help="Comma separated timestep counts.")
    bench.add_argument("--budget", type=int, default=None, help="Training examples per model.")
    bench.add_argument("--betas", default=None, help="Comma separated β values; switches to the β sweep.")
    bench.add_argument("--seeds", default=None, help="Comma separated seeds for the β sweep.")

    progression = commands.add_parser("progression", parents=[common], help="Partial reconstruction sheet.")
    progression.add_argument("--model", type=Path, required=True)
    progression.add_argument("--count", type=int, default=8)
    progression.add_argument("--t-list", default=None, help="Comma separated stored-step counts.")
    progression.add_argument("--lambda", dest="temperature", type=float, default=0.0)
    progression.add_argument("--out", type=Path, default=None, help="Sheet to write (default OUT_DIR/progression.ppm).")
    return parser


# Helpers -------------------------------------------------------------------------


def _seed(args: argparse.Namespace, cfg: RunConfig) -> int:
    return args.seed if args.seed is not None else cfg.train.seed


def _split_images(cfg: RunConfig, split: str) -> np.ndarray:
    dataset = load_dataset(cfg.data)
    images = dataset.split(split)
    if len(images) == 0 and split == "valid":
        LOGGER.warning("No validation images configured; using the training split")
        images = dataset.train
    return images


def _preparer(cfg: RunConfig, model_cfg: ModelConfig) -> Preparer:
    return make_preparer(
        fmt=cfg.data.format,
        likelihood=model_cfg.likelihood,
        binarize_mode=cfg.data.binarize,
        dequantize_step=model_cfg.quantization_step if model_cfg.dequantizes_input else None,
    )


def _codec_input(model: ConvDraw, pixels: np.ndarray, fmt: str = "raw_u8_tensor") -> np.ndarray:
    """u8 pixels to deterministic model input: thresholded for Bernoulli models."""

    images = to_unit(pixels, fmt)
    if model.cfg.likelihood == "bernoulli":
        images = binarize(images, "threshold")
    return images


def _read_image(path: Path, model: ConvDraw) -> np.ndarray:
    c, h, w = model.cfg.input_shape
    if path.suffix.lower() == ".ppm":
        pixels = read_ppm_image(path, c)
        if pixels.shape[1:] != (c, h, w):
            raise ContractViolation(f"image {path} is {pixels.shape[1:]}, model expects {(c, h, w)}")
        return pixels
    return read_raw_image(path, c, h, w)


def _int_list(text: Optional[str], option: str) -> List[int]:
    try:
        return [int(item) for item in ensure_list(text)]
    except ValueError as exc:
        raise ContractViolation(f"{option} expects comma separated integers, got {text!r}") from exc


def _float_list(text: Optional[str], option: str) -> List[float]:
    try:
        return [float(item) for item in ensure_list(text)]
    except ValueError as exc:
        raise ContractViolation(f"{option} expects comma separated numbers, got {text!r}") from exc


# Subcommands ---------------------------------------------------------------------


def _cmd_train(args: argparse.Namespace, cfg: RunConfig) -> int:
    seed = _seed(args, cfg)
    train_cfg = replace(cfg.train, seed=seed)
    if args.max_steps is not None:
        train_cfg = replace(train_cfg, max_steps=args.max_steps)
    out_dir: Path = args.out_dir
    checkpoint_path = args.checkpoint or out_dir / "model.ckpt"
    if args.resume is not None:
        model, _ = ConvDraw.from_checkpoint(args.resume)
    else:
        model = ConvDraw(cfg.model, seed=seed)
    dataset = load_dataset(cfg.data)
    source = BatchSource(dataset.train, train_cfg.batch_size, seed, _preparer(cfg, model.cfg))
    batches: Iterator[np.ndarray] = (batch for _, batch in source.stream())
    trainer = Trainer(model, train_cfg, log_path=out_dir / "train_log.csv", checkpoint_path=checkpoint_path)
    with Prefetcher(batches, train_cfg.prefetch, name="batch-prefetch") as prefetched:
        trainer.run(prefetched)
    if model.cfg.fixed_posterior_variance:
        calibration = _codec_input(model, dataset.train[: train_cfg.calibration_images], cfg.data.format)
        grids = calibrate_grids(model, calibration)
        model.save(checkpoint_path, extras=grids_to_extras(grids))
    LOGGER.info("Model written to %s", checkpoint_path)
    return EXIT_OK


def _cmd_eval(args: argparse.Namespace, cfg: RunConfig) -> int:
    model, _ = ConvDraw.from_checkpoint(args.model)
    dataset = load_dataset(cfg.data)
    splits = ("train", "valid") if args.split == "both" else (args.split,)
    for split in splits:
        images = dataset.split(split)
        if len(images) == 0:
            LOGGER.warning("Split %s is empty; skipping", split)
            continue
        result = eval_bound(
            model,
            images,
            noise_draws=args.noise_draws,
            seed=_seed(args, cfg),
            prepare=_preparer(cfg, model.cfg),
            dataset=split,
        )
        print(result.summary())
        print(EvalPayload.from_result(result).model_dump_json())
    return EXIT_OK


def _cmd_compress(args: argparse.Namespace, cfg: RunConfig) -> int:
    model, checkpoint = ConvDraw.from_checkpoint(args.model)
    grids = load_grids(model, checkpoint.extras)
    image = _codec_input(model, _read_image(args.input, model))
    if args.target_bpd is not None:
        t_keep = choose_t_keep(image, model, args.target_bpd, grids=grids)
    else:
        t_keep = model.cfg.timesteps if args.t_keep is None else args.t_keep
    result = encode_image(image, model, t_keep, args.temperature, grids=grids)
    result.bitstream.write(args.out)
    report = result.report
    if args.report is not None:
        write_csv(args.report, RATE_FIELDS, rate_rows(report))
    print(RateReportPayload.from_report(report).model_dump_json())
    return EXIT_OK


def _cmd_decompress(args: argparse.Namespace, cfg: RunConfig) -> int:
    model, checkpoint = ConvDraw.from_checkpoint(args.model)
    bitstream = Bitstream.read(args.input)
    kwargs = {} if args.seed is None else {"seed": args.seed}
    image = decompress(bitstream, model, grids=load_grids(model, checkpoint.extras), **kwargs)
    out: Path = args.out
    if out.suffix.lower() == ".raw":
        write_raw_image(out, image.to_u8())
    else:
        save_image(out, image.data[0])
    LOGGER.info("Decoded %s of %s steps into %s", bitstream.t_stored, bitstream.t_total, out)
    return EXIT_OK


def _cmd_sample(args: argparse.Namespace, cfg: RunConfig) -> int:
    model, _ = ConvDraw.from_checkpoint(args.model)
    path = args.out or args.out_dir / "samples.ppm"
    sample_sheet(model, path, args.count, args.temperature, seed=_seed(args, cfg))
    return EXIT_OK


def _cmd_profile(args: argparse.Namespace, cfg: RunConfig) -> int:
    model, _ = ConvDraw.from_checkpoint(args.model)
    profile = kl_profile(
        model,
        _split_images(cfg, "valid"),
        csv_path=args.out_dir / "kl_profile.csv",
        noise_draws=args.noise_draws,
        seed=_seed(args, cfg),
        prepare=_preparer(cfg, model.cfg),
    )
    for t, total in enumerate(profile.step_totals()):
        LOGGER.debug("t=%s: %.6f nats", t, total)
    return EXIT_OK


def _cmd_bench(args: argparse.Namespace, cfg: RunConfig) -> int:
    seed = _seed(args, cfg)
    dataset = load_dataset(cfg.data)
    prepare = _preparer(cfg, cfg.model)
    held_out = dataset.valid if len(dataset.valid) else dataset.train[: cfg.train.batch_size]
    eval_images = prepare(held_out, np.random.default_rng([seed, 0, 1]))

    def source(batch_seed: int) -> Iterator[np.ndarray]:
        stream = BatchSource(dataset.train, cfg.train.batch_size, batch_seed, prepare).stream()
        return (batch for _, batch in stream)

    if args.betas:
        seeds = _int_list(args.seeds, "--seeds") if args.seeds else [seed]
        beta_sweep(
            cfg.model,
            replace(cfg.train, seed=seed),
            lambda _beta, run_seed: source(run_seed),
            eval_images,
            _float_list(args.betas, "--betas"),
            seeds,
            out_dir=args.out_dir,
        )
        return EXIT_OK
    budget = args.budget or 10 * cfg.train.batch_size
    bench_depth(
        cfg.model,
        replace(cfg.train, seed=seed),
        lambda _n_t: source(seed),
        eval_images,
        _int_list(args.n_t, "--n-t"),
        budget,
        csv_path=args.out_dir / "bench_depth.csv",
    )
    return EXIT_OK


def _cmd_progression(args: argparse.Namespace, cfg: RunConfig) -> int:
    model, _ = ConvDraw.from_checkpoint(args.model)
    images = _codec_input(model, _split_images(cfg, "valid")[: args.count], cfg.data.format)
    t_list = _int_list(args.t_list, "--t-list") if args.t_list else None
    path = args.out or args.out_dir / "progression.ppm"
    progression_sheet(model, images, path, t_list, args.temperature, seed=_seed(args, cfg))
    return EXIT_OK


COMMANDS: Dict[str, Callable[[argparse.Namespace, RunConfig], int]] = {
    "train": _cmd_train,
    "eval": _cmd_eval,
    "compress": _cmd_compress,
    "decompress": _cmd_decompress,
    "sample": _cmd_sample,
    "profile": _cmd_profile,
    "bench": _cmd_bench,
    "progression": _cmd_progression,
}


def run(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE

    try:
        config_path = resolve_config_path(args.config)
        cfg = load_config(config_path, args.overrides)
    except ContractViolation as exc:
        print(f"convdraw_compression: configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"convdraw_compression: cannot read configuration: {exc}", file=sys.stderr)
        return EXIT_FAILURE

    configure_logging(resolve_log_level(args.log_level, cfg.log_level))
    if config_path is not None:
        LOGGER.info("Loaded configuration from %s", config_path)

    try:
        return COMMANDS[args.command](args, cfg)
    except (ConvDrawError, OSError) as exc:
        LOGGER.debug("Command %s failed", args.command, exc_info=True)
        print(f"convdraw_compression {args.command}: {exc}", file=sys.stderr)
        return EXIT_FAILURE


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
