import argparse
import logging
import os
import sys
from typing import List, Optional

import numpy as np

from .assets import toy_corpus
from .config import RunConfig
from .const import ExitCode, RemoverKind, WatermarkArm
from .evaluate import apply_remover, protect_image, run_gauntlet
from .exceptions import ImageFormatException, NumericalFailureException, StorageException, UsageException
from .flow import FlowModel, load_flow, save_flow, train_mle
from .gradcheck import DEFAULT_CASES, SUITES, run_suites
from .harvim import AUDIT_FIELDS, Harvim
from .metrics import psnr
from .solver import flow_r_remove, trajectory_rows
from .storage import (
    load_png,
    load_png_dir,
    read_params,
    read_report,
    save_png,
    write_csv,
    write_params,
    write_report,
    write_text,
)
from .tensor import SeededRng
from .utils import image_side_of
from .watermark import (
    WatermarkGenerator,
    default_atlas,
    draw_noise,
    load_decoder,
    mask_image,
    save_decoder,
    train_decoder,
)

_LOGGER = logging.getLogger(__name__)

TRAJECTORY_FIELDS = ("round", "lambda", "objective", "psnr")

# master seed streams, one per command that draws randomness
PRIOR_STREAM = 2
DECODER_STREAM = 3
HARVIM_STREAM = 4
REMOVE_STREAM = 5


class ArgumentParser(argparse.ArgumentParser):
    """ argparse exits 2 on bad usage; 2 is reserved for numerical failures here """

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(ExitCode.USAGE, f"{self.prog}: error: {message}\n")


def parse_arguments(argv: Optional[List[str]] = None):
    common = ArgumentParser(add_help=False)
    common.add_argument("-c", "--config", help="Run config file (key = value lines)")
    common.add_argument(
        "--set",
        help="Override one config key, key=value (repeatable)",
        action="append",
        default=[],
        metavar="KEY=VALUE",
    )
    common.add_argument("--seed", help="Master seed (wins over the config file)", type=int)
    common.add_argument(
        "-d",
        "--debug",
        help="Print debugging statements",
        action="store_const",
        dest="loglevel",
        const=logging.DEBUG,
        default=logging.WARNING,
    )
    common.add_argument(
        "-v",
        "--verbose",
        help="Be verbose",
        action="store_const",
        dest="loglevel",
        const=logging.INFO,
    )

    parser = ArgumentParser(description="Learn hard-to-remove watermark placements against a flow-prior remover")
    commands = parser.add_subparsers(dest="command", metavar="COMMAND")
    commands.required = True

    train_prior = commands.add_parser("train-prior", parents=[common], help="Fit the flow prior")
    train_prior.add_argument("--corpus", help="Directory of training PNGs (default: procedural toy corpus)")
    train_prior.add_argument("-o", "--output", help="Checkpoint path (default: prior_path from the config)")

    decoder = commands.add_parser("train-decoder", parents=[common], help="Fit the watermark decoder")
    decoder.add_argument("-o", "--output", help="Checkpoint path (default: decoder_path from the config)")

    learn = commands.add_parser("learn-wm", parents=[common], help="Learn a watermark for one image")
    _add_image_arguments(learn)

    remove = commands.add_parser("remove", parents=[common], help="Attack a watermarked image with the removers")
    _add_image_arguments(remove)
    remove.add_argument("-p", "--params", help="Watermark params file (default: <output-dir>/params.json)")
    remove.add_argument("--trajectory", help="Write the Flow-R per-round trajectory CSV here")

    gauntlet = commands.add_parser("gauntlet", parents=[common], help="Random vs learned placement on a corpus")
    gauntlet.add_argument("--images", help="Directory of PNGs (default: procedural toy corpus)")

    report = commands.add_parser("report", parents=[common], help="Re-aggregate a gauntlet CSV")
    report.add_argument("csv", help="Report CSV written by the gauntlet command")
    report.add_argument("-o", "--output", help="Also write the table to this file")

    check = commands.add_parser("gradcheck", parents=[common], help="Run the finite-difference gradient suites")
    check.add_argument("--cases", type=int, default=DEFAULT_CASES, help="Random cases per suite")
    check.add_argument("--suite", action="append", choices=sorted(SUITES), help="Limit to a suite (repeatable)")

    assets = commands.add_parser("assets", parents=[common], help="Export the toy corpus and glyph atlas as PNGs")
    assets.add_argument("-o", "--output-dir", help="Target directory (default: <output_dir>/assets)")

    args = parser.parse_args(argv)
    logging.basicConfig(
        format="%(asctime)-15s %(name)-5s %(levelname)-8s %(message)s",
        level=args.loglevel,
    )
    return args


def _add_image_arguments(parser):
    source = parser.add_mutually_exclusive_group()
    source.add_argument("-i", "--image", help="Input PNG")
    source.add_argument("--toy", type=int, default=0, help="Index into the toy corpus when no image is given")
    parser.add_argument("-o", "--output-dir", help="Output directory (default: output_dir from the config)")


def load_config(args) -> RunConfig:
    config = RunConfig.load(args.config) if args.config else RunConfig()
    overrides = list(args.set)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    return config.with_overrides(overrides)


def _output_dir(args, config: RunConfig) -> str:
    directory = args.output_dir or config["output_dir"]
    os.makedirs(directory, exist_ok=True)
    return directory


def _image(args, config: RunConfig) -> np.ndarray:
    if args.image:
        return load_png(args.image).numpy()
    corpus = toy_corpus(config["corpus_size"], config["image_side"], seed=0)
    if not 0 <= args.toy < len(corpus):
        raise UsageException(f"toy index {args.toy} outside the {len(corpus)}-image corpus")
    return corpus[args.toy]


def _side(image: np.ndarray) -> int:
    try:
        return image_side_of(image.size)
    except ValueError as err:
        raise ImageFormatException(str(err)) from err


def _generator(config: RunConfig, image_side: int) -> WatermarkGenerator:
    decoder = load_decoder(config["decoder_path"]) if config["use_decoder"] else None
    return WatermarkGenerator(default_atlas(), image_side, decoder)


def _prior(config: RunConfig) -> FlowModel:
    prior = load_flow(config["prior_path"])
    _LOGGER.info("Loaded prior %r from %s", prior, config["prior_path"])
    return prior


def _tone(config: RunConfig, x_true: np.ndarray) -> float:
    return float(x_true.mean()) if config["glyph_tone"] is None else config["glyph_tone"]


def cmd_train_prior(args, config: RunConfig):
    corpus_dir = args.corpus or config["prior_corpus"]
    if corpus_dir:
        _, corpus = load_png_dir(corpus_dir)
    else:
        corpus = toy_corpus(config["prior_corpus_size"], config["image_side"], seed=1)
    dim = corpus.shape[1] if corpus.ndim == 2 and len(corpus) else config["image_side"] ** 2
    rng = SeededRng(config["seed"], PRIOR_STREAM)
    model = FlowModel(
        dim,
        num_layers=config["prior_layers"],
        hidden=config["prior_hidden"],
        scale_clamp=config["prior_scale_clamp"],
        rng=rng.spawn(0),
    )
    trained, history = train_mle(model, corpus, config.prior_train_config(), rng.spawn(1))
    save_flow(args.output or config["prior_path"], trained)
    for stats in history:
        print(f"epoch {stats.epoch:>3}  train NLL {stats.train_nll:12.4f}  validation NLL {stats.validation_nll:12.4f}")


def cmd_train_decoder(args, config: RunConfig):
    decoder, losses = train_decoder(
        default_atlas(), config.decoder_train_config(), SeededRng(config["seed"], DECODER_STREAM)
    )
    save_decoder(args.output or config["decoder_path"], decoder)
    if losses:
        print(f"decoder MSE {losses[0]:.5f} -> {losses[-1]:.5f} over {len(losses)} epochs")


def cmd_learn_wm(args, config: RunConfig):
    x_true = _image(args, config)
    prior = _prior(config)
    generator = _generator(config, _side(x_true))
    result = Harvim(prior, generator, config.harvim_config()).run(
        x_true, config["glyph"], SeededRng(config["seed"], HARVIM_STREAM)
    )
    directory = _output_dir(args, config)
    save_png(os.path.join(directory, "display.png"), result.display)
    save_png(os.path.join(directory, "mask.png"), mask_image(result.m))
    write_params(os.path.join(directory, "params.json"), generator, result.params)
    write_csv(os.path.join(directory, "audit.csv"), AUDIT_FIELDS, result.audit)
    placement = generator.placement(result.params)
    print(
        f"glyph {result.params.glyph}: p_left {placement['p_left']:.3f}  p_bottom {placement['p_bottom']:.3f}  "
        f"side fraction {placement['side_fraction']:.3f}"
    )


def cmd_remove(args, config: RunConfig):
    x_true = _image(args, config)
    prior = _prior(config)
    directory = _output_dir(args, config)
    params = read_params(args.params or os.path.join(directory, "params.json"))
    generator = _generator(config, _side(x_true))
    harvim_config = config.harvim_config()
    gauntlet_config = config.gauntlet_config()
    rng = SeededRng(config["seed"], REMOVE_STREAM)
    tone = _tone(config, x_true)
    noise = draw_noise(rng.spawn(0), x_true.size, harvim_config.sigma)
    protected = protect_image(generator, params, x_true, noise, harvim_config, tone, WatermarkArm.HARVIM)
    save_png(os.path.join(directory, "observation.png"), protected.observation)

    for index, kind in enumerate(gauntlet_config.removers):
        if kind is RemoverKind.FLOW_R and args.trajectory:
            states = flow_r_remove(
                protected.observation,
                protected.coverage,
                prior,
                gauntlet_config.flow_r,
                rng.spawn(10 + index),
                harvim_config.sigma,
                binarize_mask=gauntlet_config.binarize_mask,
                init_scale=gauntlet_config.flow_r_init_scale,
            )
            write_csv(args.trajectory, TRAJECTORY_FIELDS, trajectory_rows(states, x_true))
            reconstruction = states[-1].x
        else:
            reconstruction, _ = apply_remover(
                kind, protected, prior, harvim_config.sigma, tone, gauntlet_config, rng.spawn(10 + index)
            )
        save_png(os.path.join(directory, f"removed-{kind.value}.png"), reconstruction)
        print(f"{kind.value:<8} PSNR {psnr(reconstruction, x_true):7.3f} dB")


def cmd_gauntlet(args, config: RunConfig):
    if args.images:
        ids, images = load_png_dir(args.images)
    else:
        images = toy_corpus(config["corpus_size"], config["image_side"], seed=0)
        ids = None
    prior = _prior(config)
    generator = _generator(config, _side(images[0]) if len(images) else config["image_side"])
    report = run_gauntlet(
        images, prior, config.harvim_config(), config.gauntlet_config(), generator, config["seed"], ids
    )
    directory = config["output_dir"]
    os.makedirs(directory, exist_ok=True)
    write_report(os.path.join(directory, "gauntlet.csv"), report)
    table = report.table()
    write_text(os.path.join(directory, "gauntlet.txt"), table)
    print(table)


def cmd_report(args, config: RunConfig):
    table = read_report(args.csv).table()
    if args.output:
        write_text(args.output, table)
    print(table)


def cmd_gradcheck(args, config: RunConfig):
    if args.cases < 1:
        raise UsageException("--cases must be >= 1")
    results = run_suites(args.suite, args.cases, config["seed"], strict=False)
    for result in results:
        print(result)
        for failure in result.failures[:5]:
            print(f"    {failure}")
    failed = [result.name for result in results if not result.passed]
    if failed:
        raise NumericalFailureException(f"gradient suites failed: {', '.join(failed)}")


def cmd_assets(args, config: RunConfig):
    directory = args.output_dir or os.path.join(config["output_dir"], "assets")
    corpus = toy_corpus(config["corpus_size"], config["image_side"], seed=0)
    for index, image in enumerate(corpus):
        save_png(os.path.join(directory, "corpus", f"img{index:03d}.png"), image)
    atlas = default_atlas()
    for char in atlas.characters:
        save_png(os.path.join(directory, "glyphs", f"{char}.png"), atlas.bitmap(char))
    print(f"wrote {len(corpus)} images and {len(atlas.characters)} glyphs to {directory}")


COMMANDS = {
    "train-prior": cmd_train_prior,
    "train-decoder": cmd_train_decoder,
    "learn-wm": cmd_learn_wm,
    "remove": cmd_remove,
    "gauntlet": cmd_gauntlet,
    "report": cmd_report,
    "gradcheck": cmd_gradcheck,
    "assets": cmd_assets,
}


def run(argv: Optional[List[str]] = None) -> int:
    args = parse_arguments(argv)
    _LOGGER.debug("args: %s", args)
    try:
        config = load_config(args)
        COMMANDS[args.command](args, config)
    except UsageException as err:
        print(f"error: {err}", file=sys.stderr)
        return ExitCode.USAGE
    except NumericalFailureException as err:
        print(f"numerical failure: {err}", file=sys.stderr)
        return ExitCode.NUMERICAL
    except (StorageException, OSError) as err:
        print(f"I/O error: {err}", file=sys.stderr)
        return ExitCode.IO
    return ExitCode.OK


def main():
    sys.exit(int(run()))


if __name__ == "__main__":
    main()
