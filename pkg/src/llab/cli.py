"""Command-line entry point (``llab``)."""

from __future__ import annotations

import argparse
import logging
import os
import sys

from threadpoolctl import threadpool_limits

from . import experiments as ex
from .config import ExperimentConfig, load_config
from .errors import ConfigError, LabError

log = logging.getLogger("llab")


def _channels(text: str) -> list[int]:
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad channel list {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="llab", description="latent operator lab")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_text, needs_config=True):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=needs_config, help="experiment config file")
        p.add_argument("--seed", type=int, help="override the global seed")
        p.add_argument("--out", help="output directory (default: output.dir)")
        return p

    add("train-encoder", "pretrain a toy ViT encoder")
    add("train-reconstructor", "train a reconstructor on a frozen encoder").add_argument(
        "--encoder", required=True)
    p = add("fit-operator", "fit a latent operator for a pixel edit")
    p.add_argument("--encoder", required=True)
    p.add_argument("--reconstructor", help="optional, for a preview grid")
    p = add("edit", "edit features with an operator and reconstruct")
    p.add_argument("--encoder", required=True)
    p.add_argument("--reconstructor", required=True)
    p.add_argument("--operator", required=True)
    p.add_argument("--power", type=int)
    add("compare", "paired judge-similarity comparison of two pipelines")
    p = add("channel-maps", "activation maps of selected channels", needs_config=False)
    p.add_argument("--encoder", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--channels", type=_channels, default=[0, 1, 2, 3])
    p = add("make-corpus", "write a synthetic PPM corpus", needs_config=False)
    p.add_argument("--n", type=int, default=2000)
    p.add_argument("--size", type=int, default=32)
    return parser


def _config(args) -> ExperimentConfig | None:
    if not args.config:
        return None
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    if args.out:
        overrides["output.dir"] = args.out
    return load_config(args.config, overrides)


def run(args) -> None:
    cfg = _config(args)
    out = args.out or (cfg.output.dir if cfg else None)
    if out is None:
        raise ConfigError("--out is required without a config file")
    cmd = args.command
    if cmd == "train-encoder":
        path = ex.cmd_train_encoder(cfg, out)
    elif cmd == "train-reconstructor":
        path = ex.cmd_train_reconstructor(cfg, args.encoder, out)
    elif cmd == "fit-operator":
        path = ex.cmd_fit_operator(cfg, args.encoder, out, args.reconstructor)
    elif cmd == "edit":
        path = ex.cmd_edit_and_reconstruct(cfg, args.encoder, args.reconstructor, args.operator,
                                           out, args.power)
    elif cmd == "compare":
        path = ex.cmd_compare(cfg, out)
    elif cmd == "channel-maps":
        path = ex.cmd_channel_maps(args.encoder, args.image, out, args.channels, cfg)
    else:
        path = ex.cmd_make_corpus(out, args.n, args.size, args.seed or 0)
    print(path)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    threads = os.environ.get("LLAB_THREADS")
    try:
        limit = int(threads) if threads else None
    except ValueError:
        print(f"error: LLAB_THREADS must be an integer, got {threads!r}", file=sys.stderr)
        return ConfigError.exit_code
    try:
        with threadpool_limits(limits=limit):
            run(args)
    except LabError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return ConfigError.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
