"""Command-line interface.

Exit codes: 0 success, 1 usage or invalid parameters, 2 data error (missing or
malformed files), 3 numeric failure.
"""
import argparse
import logging
import os
import sys

import numpy as np

from .checkpoint import CheckpointError, read_checkpoint
from .config import KERNEL_CHOICES, RunConfig, load_config
from .numerics import ContractError, DimensionError, NumericError

log = logging.getLogger("topicmatch")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _common():
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--seed", type=int, help="64-bit seed override")
    p.add_argument("--out", help="output directory")
    p.add_argument("--topk", type=int, help="match cap (eval default 1000)")
    p.add_argument("--tau", type=float, help="coarse match threshold override")
    p.add_argument("--kco", type=int, help="number of covisible topics override")
    p.add_argument("--kernel", choices=KERNEL_CHOICES,
                   help="attention kernel for every stage")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def build_parser():
    common = _common()
    parser = _Parser(prog="topicmatch", description="Topic-assisted coarse-to-fine image matching.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", parents=[common], help="train on streamed synthetic pairs")
    p.add_argument("--steps", type=int, help="override the number of training steps")
    p.add_argument("--resume", help="checkpoint to resume from")

    p = sub.add_parser("match", parents=[common], help="match two images, print TSV")
    p.add_argument("checkpoint")
    p.add_argument("image_a")
    p.add_argument("image_b")

    p = sub.add_parser("eval", parents=[common], help="evaluate over a dataset manifest")
    p.add_argument("checkpoint")
    p.add_argument("manifest")

    p = sub.add_parser("gen-data", parents=[common], help="write a synthetic dataset manifest")
    p.add_argument("--count", type=int, default=100)
    p.add_argument("--images", action="store_true", help="also write PGM pairs and homographies")

    p = sub.add_parser("visualize-topics", parents=[common], help="export topic overlays")
    p.add_argument("checkpoint")
    p.add_argument("images", nargs="+", help="one image, or a pair (covisible topics only)")
    p.add_argument("--alpha", type=float, default=0.45)

    p = sub.add_parser("bench", parents=[common], help="FLOP and wall-time table")
    p.add_argument("--sizes", type=int, nargs="+", default=[128, 256, 512])
    p.add_argument("--topics", type=int, nargs="+", default=[8, 16])
    p.add_argument("--kco-list", type=int, nargs="+", default=[1, 2, 3, 4])
    p.add_argument("--no-timing", action="store_true", help="skip wall-time measurement")
    return parser


def _base_config(args):
    cfg = load_config(args.config) if args.config else RunConfig()
    return _apply_overrides(cfg, args)


def _apply_overrides(cfg, args):
    kw = {"seed": args.seed, "tau": args.tau, "n_covisible": args.kco}
    if args.kernel:
        kw.update(kernel_topic=args.kernel, kernel_coarse=args.kernel, kernel_fine=args.kernel)
    if args.topk is not None:
        kw["topk"] = args.topk
    cfg = cfg.override(**kw)
    cfg.validate()
    return cfg


def _load_model(args):
    from .matcher import TopicMatcher
    from .checkpoint import load_into

    entries, cfg, _ = read_checkpoint(args.checkpoint)
    if args.config:
        # model shape comes from the checkpoint; the file may only change run-time settings
        extra = load_config(args.config)
        if extra.model_hash() != cfg.model_hash():
            log.warning("--config describes a different architecture; using the checkpoint's")
        cfg = cfg.override(tau=extra.tau, n_covisible=extra.n_covisible, topk=extra.topk,
                           eval_perspective=extra.eval_perspective,
                           ransac_threshold=extra.ransac_threshold,
                           ransac_confidence=extra.ransac_confidence)
    cfg = _apply_overrides(cfg, args)
    model = TopicMatcher(cfg)
    load_into(model, entries)
    model.eval()
    return model, cfg


def _out_dir(args, default=None):
    out = args.out or default
    if out:
        os.makedirs(out, exist_ok=True)
    return out


def cmd_train(args):
    from .plotting import plot_loss_curve
    from .train import read_loss_curve, train

    cfg = _base_config(args)
    if args.steps is not None:
        cfg = cfg.override(steps=args.steps)
        cfg.validate()
    out = _out_dir(args, "run")
    with open(os.path.join(out, "config.txt"), "w", encoding="utf-8") as fh:
        fh.write(cfg.to_text())
    train(cfg, out, resume=args.resume)
    curve = os.path.join(out, "loss_curve.csv")
    plot_loss_curve(read_loss_curve(curve), os.path.join(out, "loss_curve.png"))
    print(f"wrote {os.path.join(out, 'final.tfm')} and {curve}")


def cmd_match(args):
    from .evaluate import format_match_rows, sorted_match_rows, summary_line
    from .synth import load_image

    model, cfg = _load_model(args)
    image_a, image_b = load_image(args.image_a), load_image(args.image_b)
    result = model.match(image_a, image_b)
    rows = sorted_match_rows(result, args.topk)
    text = format_match_rows(rows) + summary_line(result, rows)
    if args.out:
        path = os.path.join(_out_dir(args), "matches.tsv")
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text)
        print(summary_line(result, rows), end="")
    else:
        sys.stdout.write(text)


def cmd_eval(args):
    from .evaluate import evaluate_seeds
    from .plotting import plot_corner_error_cdf, plot_mma
    from .synth import read_manifest

    model, cfg = _load_model(args)
    entries = read_manifest(args.manifest)
    expected = cfg.data_hash(cfg.eval_perspective)
    if any(h != expected for _, h in entries):
        log.warning("manifest data hash differs from the evaluation config (%s)", expected)
    report = evaluate_seeds(model, [s for s, _ in entries], cfg)
    text = report.to_text()
    out = _out_dir(args)
    if out:
        with open(os.path.join(out, "report.txt"), "w", encoding="utf-8") as fh:
            fh.write(text)
        with open(os.path.join(out, "report.csv"), "w", encoding="utf-8") as fh:
            fh.write(report.to_csv())
        plot_mma(report, os.path.join(out, "mma.png"))
        plot_corner_error_cdf(report, os.path.join(out, "corner_error_cdf.png"))
    sys.stdout.write(text)


def cmd_gen_data(args):
    from .synth import gen_pair, save_image, write_manifest

    cfg = _base_config(args)
    if args.count < 0:
        raise UsageError("--count must be non-negative")
    out = _out_dir(args, "data")
    start = cfg.seed
    seeds = [start + i for i in range(args.count)]
    path = os.path.join(out, "manifest.tsv")
    write_manifest(path, seeds, cfg.data_hash(cfg.eval_perspective))
    if args.images:
        for s in seeds:
            pair = gen_pair(s, cfg.image_size, cfg.eval_perspective, cfg.jitter)
            save_image(os.path.join(out, f"{s}_a.pgm"), pair.image_a)
            save_image(os.path.join(out, f"{s}_b.pgm"), pair.image_b)
            np.savetxt(os.path.join(out, f"{s}_H.txt"), pair.homography, fmt="%.17g")
    print(f"wrote {path} ({len(seeds)} pairs)")


def cmd_visualize_topics(args):
    from .synth import load_image, save_image
    from .viz import pair_overlays, single_image_overlay
    from PIL import Image

    if len(args.images) > 2:
        raise UsageError("visualize-topics takes one image or a pair")
    model, cfg = _load_model(args)
    out = _out_dir(args, ".")
    images = [load_image(p) for p in args.images]
    if len(images) == 1:
        overlays = [single_image_overlay(model, images[0], args.alpha)]
    else:
        oa, ob, res = pair_overlays(model, images[0], images[1], alpha=args.alpha)
        overlays = [oa, ob]
        print("covisible topics: " + ",".join(str(int(k)) for k in res.covisible.selected))
    for path, ov in zip(args.images, overlays):
        stem = os.path.splitext(os.path.basename(path))[0]
        target = os.path.join(out, f"{stem}_topics.png")
        Image.fromarray(ov).save(target)
        print(f"wrote {target}")


def cmd_bench(args):
    from .bench import format_rows, sweep
    from .plotting import plot_bench

    cfg = _base_config(args)
    kernels = (args.kernel,) if args.kernel else ("dot", "linear")
    kcos = (args.kco,) if args.kco else tuple(args.kco_list)
    rows = sweep(tuple(args.sizes), tuple(args.topics), kcos, kernels, cfg.d_coarse,
                 cfg.coarse_heads, cfg.seed, timing=not args.no_timing)
    text = format_rows(rows)
    out = _out_dir(args)
    if out:
        with open(os.path.join(out, "bench.tsv"), "w", encoding="utf-8") as fh:
            fh.write(text)
        plot_bench(rows, os.path.join(out, "bench.png"))
    sys.stdout.write(text)


COMMANDS = {"train": cmd_train, "match": cmd_match, "eval": cmd_eval, "gen-data": cmd_gen_data,
            "visualize-topics": cmd_visualize_topics, "bench": cmd_bench}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s: %(message)s")
    from .synth import ImageFormatError

    try:
        COMMANDS[args.command](args)
    except (UsageError, ContractError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, ImageFormatError, CheckpointError, DimensionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
