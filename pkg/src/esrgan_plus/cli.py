"""Command-line entry point: ``train``, ``sr``, ``eval`` and ``fit-niqe``.

Exit codes: 0 success, 1 configuration error, 2 data error, 3 numerical abort.
"""

from __future__ import annotations

import argparse
import csv
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import tensor as T
from .binio import IntegrityError
from .config import ConfigError, load_run_config
from .data import DataError, DatasetIndex, ImageIOError, load_image, save_image
from .metrics import NiqeModel, QualityRow, fit_pristine_model, niqe_score, psnr_y
from .models import ConfigurationError, IncompatibleWeightsError, generator_from_weights
from .plotting import plot_quality_report, plot_training_log
from .tensor import RngState, Tensor
from .training import (
    GAN,
    LOG_COLUMNS,
    PRETRAIN,
    CheckpointMismatchError,
    NumericalError,
    RunDirectory,
    Trainer,
    checkpoint_load,
    write_log_rows,
)

log = logging.getLogger("esrgan_plus")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
REPORT_COLUMNS = ("filename", "psnr_y", "niqe", "ma", "perceptual_index")
PHASE_ALIASES = {"pretrain": PRETRAIN, PRETRAIN: PRETRAIN, "gan": GAN}


class CommandError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def _png_files(path: Path) -> list[Path]:
    if path.is_file():
        return [path]
    if not path.is_dir():
        raise CommandError(f"input not found: {path}", EXIT_DATA)
    return sorted(path.glob("*.png"))


# --------------------------------------------------------------------- train


def _read_log(path: Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def cmd_train(args) -> int:
    try:
        run = load_run_config(args.config)
        phase = PHASE_ALIASES[args.phase]
        config = run.train_config(phase, seed=args.seed, deterministic=args.deterministic)
        train_dir = run.train_dir
    except (ConfigError, ConfigurationError) as exc:
        raise CommandError(str(exc), EXIT_CONFIG) from exc
    try:
        dataset = DatasetIndex.from_dir(train_dir)
    except (DataError, ImageIOError) as exc:
        raise CommandError(str(exc), EXIT_DATA) from exc

    out = RunDirectory(args.output or run.output_dir)
    out.make()
    init = None
    if phase == GAN:
        init_path = Path(args.init) if args.init else out.latest(PRETRAIN)
        if not init_path.is_file():
            raise CommandError(f"GAN phase needs a pretrained checkpoint, none at {init_path}", EXIT_DATA)
        init = _load_ckpt(init_path, None)

    try:
        trainer = Trainer(config, dataset, init=init)
        if args.resume:
            trainer.restore(_load_ckpt(Path(args.resume), config))
    except (CheckpointMismatchError, IncompatibleWeightsError) as exc:
        raise CommandError(str(exc), EXIT_CONFIG) from exc
    except (DataError, ImageIOError) as exc:
        raise CommandError(str(exc), EXIT_DATA) from exc

    log_path = out.log_path(phase)
    fresh = [True]
    if args.resume and log_path.is_file():
        # keep the rows up to the checkpoint; later ones are about to be replayed
        kept = [r for r in _read_log(log_path) if int(r["iter"]) <= trainer.iteration]
        write_log_rows(log_path, kept, fresh=True)
        fresh[0] = False

    def on_log(rows):
        write_log_rows(log_path, rows, fresh[0])
        fresh[0] = False

    try:
        trainer.run(on_checkpoint=out.checkpoint_writer(trainer), on_log=on_log)
    except NumericalError as exc:
        raise CommandError(f"numerical abort: {exc}", EXIT_NUMERIC) from exc
    except (DataError, ImageIOError) as exc:
        raise CommandError(str(exc), EXIT_DATA) from exc
    plot_training_log(_read_log(log_path), log_path.with_suffix(".png"))
    log.info("finished %s at iteration %d; outputs under %s", phase, trainer.iteration, out.root)
    return EXIT_OK


def _load_ckpt(path: Path, config):
    try:
        return checkpoint_load(path, config)
    except CheckpointMismatchError as exc:
        raise CommandError(str(exc), EXIT_CONFIG) from exc
    except (OSError, IntegrityError) as exc:
        raise CommandError(f"cannot load checkpoint {path}: {exc}", EXIT_DATA) from exc


# --------------------------------------------------------------------- sr


def cmd_sr(args) -> int:
    try:
        gen = generator_from_weights(args.weights)
    except (IncompatibleWeightsError, ConfigurationError) as exc:
        raise CommandError(str(exc), EXIT_CONFIG) from exc
    except (OSError, IntegrityError) as exc:
        raise CommandError(f"cannot load weights {args.weights}: {exc}", EXIT_DATA) from exc
    inputs = _png_files(Path(args.input))
    if not inputs:
        raise CommandError(f"no PNG inputs under {args.input}", EXIT_DATA)
    out_dir = Path(args.output)
    rng = RngState(args.seed, stream=3)
    noise = args.noise == "on"
    for path in inputs:
        try:
            img = load_image(path)
        except ImageIOError as exc:
            raise CommandError(str(exc), EXIT_DATA) from exc
        with T.no_grad():
            sr = gen(Tensor(img[None]), rng, noise=noise)
        if not np.all(np.isfinite(sr.data)):
            raise CommandError(f"non-finite output for {path}", EXIT_NUMERIC)
        save_image(sr.data[0], out_dir / path.name)
        log.info("wrote %s", out_dir / path.name)
    return EXIT_OK


# --------------------------------------------------------------------- eval


def _read_ma_file(path: Path) -> dict[str, float]:
    values = {}
    try:
        with open(path, newline="") as fh:
            for row in csv.reader(fh):
                if not row or row[0].strip().startswith("#"):
                    continue
                try:
                    values[Path(row[0].strip()).stem] = float(row[1])
                except (ValueError, IndexError):
                    if values:
                        raise
    except (OSError, ValueError, IndexError) as exc:
        raise CommandError(f"cannot read Ma file {path}: {exc}", EXIT_DATA) from exc
    return values


def _fmt(value: float | None) -> str:
    if value is None:
        return ""
    if math.isinf(value):
        return "inf" if value > 0 else "-inf"
    return f"{value:.6f}"


def write_report(rows: list[QualityRow], path: Path) -> None:
    """Per-image rows followed by a ``mean`` row."""
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(REPORT_COLUMNS)
        for r in rows:
            writer.writerow([r.filename, _fmt(r.psnr_y), _fmt(r.niqe), _fmt(r.ma), _fmt(r.perceptual_index)])
        mean = QualityRow(
            "mean",
            float(np.mean([r.psnr_y for r in rows])),
            float(np.mean([r.niqe for r in rows])),
            None if any(r.ma is None for r in rows) else float(np.mean([r.ma for r in rows])),
        )
        pis = [r.perceptual_index for r in rows]
        mean_pi = None if any(p is None for p in pis) else float(np.mean(pis))
        writer.writerow(["mean", _fmt(mean.psnr_y), _fmt(mean.niqe), _fmt(mean.ma), _fmt(mean_pi)])


def cmd_eval(args) -> int:
    sr_files = {p.stem: p for p in _png_files(Path(args.sr_dir))}
    hr_files = {p.stem: p for p in _png_files(Path(args.hr_dir))}
    missing = sorted(set(sr_files) ^ set(hr_files))
    if missing:
        raise CommandError(f"stems not present in both directories: {', '.join(missing)}", EXIT_DATA)
    if not sr_files:
        raise CommandError("no PNG images to evaluate", EXIT_DATA)
    try:
        model = NiqeModel.load(args.niqe_model)
    except (OSError, IntegrityError) as exc:
        raise CommandError(f"cannot load NIQE model {args.niqe_model}: {exc}", EXIT_DATA) from exc
    ma_values = _read_ma_file(Path(args.ma_file)) if args.ma_file else None
    if ma_values is not None:
        absent = sorted(set(sr_files) - set(ma_values))
        if absent:
            raise CommandError(f"Ma file lacks entries for: {', '.join(absent)}", EXIT_DATA)

    rows = []
    for stem in sorted(sr_files):
        try:
            sr, hr = load_image(sr_files[stem]), load_image(hr_files[stem])
            psnr = psnr_y(sr, hr, args.crop_border)
            niqe = niqe_score(sr, model)
        except ImageIOError as exc:
            raise CommandError(str(exc), EXIT_DATA) from exc
        except ValueError as exc:
            raise CommandError(f"{sr_files[stem].name}: {exc}", EXIT_DATA) from exc
        ma = ma_values[stem] if ma_values is not None else args.ma
        rows.append(QualityRow(sr_files[stem].name, psnr, niqe, ma))
    out = Path(args.out)
    write_report(rows, out)
    if not args.no_figure:
        plot_quality_report(rows, out.with_suffix(".png"))
    log.info("wrote %s (%d images)", out, len(rows))
    return EXIT_OK


# --------------------------------------------------------------------- fit-niqe


def cmd_fit_niqe(args) -> int:
    root = Path(args.pristine_dir)
    paths = _png_files(root) if root.is_dir() else []
    if len(paths) < 2:
        raise CommandError(f"need at least 2 PNG images in {root}, found {len(paths)}", EXIT_DATA)
    try:
        corpus = [load_image(p) for p in paths]
        model = fit_pristine_model(
            corpus, args.patch_size, args.sharpness_percentile, corpus_id=",".join(p.stem for p in paths)
        )
    except ImageIOError as exc:
        raise CommandError(str(exc), EXIT_DATA) from exc
    except ValueError as exc:
        raise CommandError(str(exc), EXIT_DATA) from exc
    model.save(args.out)
    log.info("fitted NIQE model on %d images (%d patches) -> %s", len(paths), model.metadata["num_patches"], args.out)
    return EXIT_OK


# --------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="esrgan-plus", description="ESRGAN+ / nESRGAN+ super-resolution toolkit")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run the PSNR pretraining or GAN phase")
    p.add_argument("config", help="INI run configuration")
    p.add_argument("--phase", choices=sorted(PHASE_ALIASES), default="pretrain", help="training phase")
    p.add_argument("--resume", metavar="CKPT", help="continue from a checkpoint of the same config")
    p.add_argument("--init", metavar="CKPT", help="pretrained checkpoint for the GAN phase "
                   "(default: <out>/checkpoints/psnr_pretrain_latest.ckpt)")
    p.add_argument("--seed", type=int, help="override [run] seed")
    p.add_argument("--deterministic", action=argparse.BooleanOptionalAction, default=None,
                   help="single-threaded BLAS for bit-exact replays (default from config)")
    p.add_argument("--output", metavar="DIR", help="override [run] output_dir")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sr", help="super-resolve PNG images x4")
    p.add_argument("--weights", required=True, help="generator weight file")
    p.add_argument("--input", required=True, help="PNG file or directory of PNGs")
    p.add_argument("--output", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=0, help="noise seed")
    p.add_argument("--noise", choices=("on", "off"), default="on", help="noise injection at inference")
    p.set_defaults(func=cmd_sr)

    p = sub.add_parser("eval", help="PSNR-Y / NIQE / perceptual-index report")
    p.add_argument("--sr-dir", required=True, help="super-resolved PNGs")
    p.add_argument("--hr-dir", required=True, help="ground-truth PNGs with matching stems")
    p.add_argument("--niqe-model", required=True, help="model file from fit-niqe")
    ma = p.add_mutually_exclusive_group()
    ma.add_argument("--ma-file", help="CSV of filename,ma values")
    ma.add_argument("--ma", type=float, help="constant Ma score for every image")
    p.add_argument("--crop-border", type=int, default=4, help="pixels removed per side before PSNR")
    p.add_argument("--out", required=True, help="report CSV path; a PNG figure is written alongside")
    p.add_argument("--no-figure", action="store_true", help="skip the report figure")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("fit-niqe", help="fit a NIQE pristine model")
    p.add_argument("--pristine-dir", required=True, help="directory of pristine PNGs")
    p.add_argument("--out", required=True, help="output model file")
    p.add_argument("--patch-size", type=int, default=96, help="native-scale patch side")
    p.add_argument("--sharpness-percentile", type=float, default=75.0,
                   help="percent of sharpest patches kept")
    p.set_defaults(func=cmd_fit_niqe)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CommandError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
