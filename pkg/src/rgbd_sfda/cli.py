"""Command-line front end.

Exit codes: 0 success, 1 usage error, 2 runtime error.
"""

import argparse
import dataclasses
import json
import logging
import os
import sys

import numpy as np

from . import imageio, pipeline, toydata
from .encoder import load_checkpoint, save_checkpoint
from .spectral import StyleConfig, stylize

log = logging.getLogger("rgbd_sfda")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2
_SCENE_COUNTS = ("n_source", "n_target")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _setup_logging():
    level = os.environ.get("MISFIT_LOG", "error").lower()
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    logging.basicConfig(level=levels.get(level, logging.ERROR), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")


def _load(args):
    """(AdaptConfig, EncoderConfig, ablation, scene) from --config, with --seed applied."""
    if args.config:
        adapt, enc, abl, scene = pipeline.load_config(args.config)
    else:
        adapt, enc, abl, scene = pipeline.parse_config({})
    if args.seed is not None:
        adapt = adapt.replace(seed=args.seed)
        scene = {**scene, "seed": args.seed}
    return adapt, enc, abl, scene


def _scene_spec(scene):
    fields = [f.name for f in dataclasses.fields(toydata.ToySceneSpec)]
    pipeline._check_keys(scene, fields + list(_SCENE_COUNTS), "scene")
    spec = toydata.ToySceneSpec(**{k: v for k, v in scene.items() if k in fields})
    return spec, int(scene.get("n_source", 200)), int(scene.get("n_target", 200))


def _split_dir(path, split):
    """Accept either a split directory or a dataset root containing ``split``."""
    if os.path.exists(os.path.join(path, toydata.MANIFEST_NAME)):
        return path
    return os.path.join(path, split)


def _write_metrics(path, records):
    if not path:
        return
    with open(path, "w") as f:
        for r in records:
            f.write(r.to_json() + "\n")


def cmd_gen_toy(args):
    _, _, _, scene = _load(args)
    spec, n_src, n_tgt = _scene_spec(scene)
    n_src = args.n_source if args.n_source is not None else n_src
    n_tgt = args.n_target if args.n_target is not None else n_tgt
    src, tgt = toydata.gen_toy(spec, n_src, n_tgt, args.out)
    print(f"wrote {len(src.files)} source and {len(tgt.files)} target scenes to {args.out}")


def cmd_stylize(args):
    src_dir = _split_dir(args.src, "source")
    src = toydata.load_split(src_dir)
    prof_data = toydata.load_split(_split_dir(args.profile, "target"), with_labels=False)
    adapt, _, _, _ = _load(args)
    adapt = adapt.replace(beta_rgb=args.beta_rgb, beta_d=args.beta_depth)
    profiles = pipeline.build_profiles(prof_data, args.samples or adapt.profile_samples)
    rgb = np.stack([stylize(x, profiles[0], StyleConfig(adapt.beta_rgb, (0.0, 255.0))) for x in src.rgb])
    disp = np.stack([stylize(x, profiles[1], StyleConfig(adapt.beta_d, (0.0, adapt.disparity_max)))
                     for x in src.disparity])
    # the validity mask passes through unchanged
    disp = np.where(src.valid, np.maximum(disp, 1.0 / imageio.DISPARITY_SCALE), 0.0)
    out = toydata.Dataset(np.rint(rgb), disp, src.valid, src.labels, src.name)
    toydata.write_split(out, args.out, src.name, nested=False)
    print(f"stylized {len(out)} scenes into {args.out}")


def cmd_pretrain(args):
    adapt, enc, _, _ = _load(args)
    source = toydata.load_split(_split_dir(args.data, "source"))
    profiles = None
    if adapt.style:
        target = toydata.load_split(os.path.join(args.data, "target"), with_labels=False)
        profiles = pipeline.build_profiles(target, adapt.profile_samples)
    records = []
    params = pipeline.pretrain_source(source, profiles, adapt, enc, metrics=records)
    save_checkpoint(params, args.out)
    _write_metrics(args.metrics, records)
    print(f"saved {args.out}")


def cmd_adapt(args):
    adapt, _, _, _ = _load(args)
    # labels are never loaded for adaptation
    target = toydata.load_split(_split_dir(args.data, "target"), with_labels=False)
    records = []
    params = pipeline.adapt_target(target, load_checkpoint(args.model), adapt, metrics=records)
    save_checkpoint(params, args.out)
    _write_metrics(args.metrics, records)
    print(f"saved {args.out}")


def cmd_eval(args):
    adapt, _, _, _ = _load(args)
    data = toydata.load_split(_split_dir(args.data, "target"))
    rec = pipeline.evaluate(load_checkpoint(args.model), data, adapt)
    _write_metrics(args.metrics, [rec])
    names = toydata.CLASS_NAMES if len(rec.per_class_iou) == len(toydata.CLASS_NAMES) else None
    for c, iou in enumerate(rec.per_class_iou):
        label = names[c] if names else str(c)
        print(f"  {label:>10s}: {'n/a' if iou is None else f'{iou:.4f}'}")
    print(f"mIoU {rec.miou:.4f}")


def cmd_ablate(args):
    adapt, enc, abl, scene = _load(args)
    if args.data:
        source = toydata.load_split(os.path.join(args.data, "source"))
        target = toydata.load_split(os.path.join(args.data, "target"))
    else:
        spec, n_src, n_tgt = _scene_spec(scene)
        source = toydata.generate_split(spec, "source", n_src)
        target = toydata.generate_split(spec, "target", n_tgt)
    cells = pipeline.expand_grid(abl, adapt, enc.fusion_mode)
    seeds = [args.seed] if args.seed is not None else abl.get("seeds", [adapt.seed])
    records = pipeline.run_ablation_matrix(cells, seeds, source, target, adapt, enc)
    _write_metrics(args.out, records)
    if not args.out:
        for r in records:
            print(r.to_json())
    print("median target mIoU per cell:", file=sys.stderr if not args.out else sys.stdout)
    for label, m in pipeline.summarize(records).items():
        print(f"  {label:<45s} {m:.4f}", file=sys.stderr if not args.out else sys.stdout)


def build_parser():
    p = _Parser(prog="rgbd-sfda", description="Source-free RGB-D segmentation adaptation toolkit")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def add(name, fn, help_text):
        sp = sub.add_parser(name, help=help_text)
        sp.add_argument("--config", help="JSON config (AdaptConfig fields, encoder/ablation/scene sections)")
        sp.add_argument("--seed", type=int, help="override the configured seed")
        sp.set_defaults(func=fn)
        return sp

    sp = add("gen-toy", cmd_gen_toy, "generate the synthetic two-domain benchmark")
    sp.add_argument("--out", required=True)
    sp.add_argument("--n-source", type=int)
    sp.add_argument("--n-target", type=int)

    sp = add("stylize", cmd_stylize, "restyle a split towards another split's amplitude profile")
    sp.add_argument("--src", required=True)
    sp.add_argument("--profile", required=True)
    sp.add_argument("--beta-rgb", type=float, required=True)
    sp.add_argument("--beta-depth", type=float, required=True)
    sp.add_argument("--samples", type=int, help="number of profile images to average")
    sp.add_argument("--out", required=True)

    sp = add("pretrain", cmd_pretrain, "supervised source training")
    sp.add_argument("--data", required=True, help="dataset root with source/ (and target/ for style)")
    sp.add_argument("--out", required=True)
    sp.add_argument("--metrics")

    sp = add("adapt", cmd_adapt, "source-free adaptation on the target split")
    sp.add_argument("--model", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--metrics")

    sp = add("eval", cmd_eval, "mIoU of a checkpoint on a labeled split")
    sp.add_argument("--model", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--metrics")

    sp = add("ablate", cmd_ablate, "run the ablation matrix")
    sp.add_argument("--data", help="dataset root; generated in memory from the scene section if omitted")
    sp.add_argument("--out", help="metrics file (newline-delimited JSON)")
    return p


def main(argv=None):
    _setup_logging()
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        if not argv:
            raise UsageError(parser.format_usage() + "rgbd-sfda: error: a subcommand is required")
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_usage() + "rgbd-sfda: error: a subcommand is required")
        args.func(args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except pipeline.ConfigKeyError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (json.JSONDecodeError, TypeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001 - reported as a runtime failure
        log.debug("runtime failure", exc_info=True)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
