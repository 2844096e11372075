"""Command-line entry point: ``rayseg <subcommand> ...``.

Exit codes: 0 success, 1 usage error, 2 config error, 3 I/O error.
Every subcommand that takes ``--out`` writes ``run.cfg`` there with the
argv, the seed and every resolved config key.
"""

import argparse
import dataclasses
import os
import sys

import numpy as np

from . import config as cfgmod
from .dataset import SPLITS, load_dataset_config, load_split, save_dataset, split_config_mapping
from .evaluation import band_means, dump_images, entropy_image, format_parallax, parallax_report, \
    parallax_suite_config, parallax_summary
from .pseudo import confidence_sampler
from .scene import load_scene_config
from .train import (MODES, ExperimentResult, TrainConfig, evaluate, format_report, load_model,
                    prepare_scene, render_scene, run_experiment, save_model, train_config_from_mapping,
                    train_config_to_mapping)

EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_IO = 0, 1, 2, 3
ABLATION_ORDER = ("sup-only", "perspective", "no-sam", "full")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _write_run_log(out, argv, sections):
    """``run.cfg``: argv as a comment, then every resolved key.

    Train keys are written bare (so the file can be read back as a train
    config); other sections are prefixed, e.g. ``scene.grid_res``.
    """
    os.makedirs(out, exist_ok=True)
    lines = [f"# argv: {' '.join(argv)}"]
    for prefix, mapping in sections:
        lines.extend(f"{prefix}{k}={v}" for k, v in mapping.items())
    with open(os.path.join(out, "run.cfg"), "w") as f:
        f.write("\n".join(lines) + "\n")


def _read_run_log(path):
    """Resolved train config and seed back from a ``run.cfg``."""
    kv = cfgmod.read_keyvalue(path)
    train_keys = set(train_config_to_mapping(TrainConfig()))
    return train_config_from_mapping({k: v for k, v in kv.items() if k in train_keys})


def _train_config(args, base=None):
    mapping = cfgmod.read_keyvalue(args.config) if getattr(args, "config", None) else {}
    cfg = train_config_from_mapping(mapping, base)
    over = {}
    for flag, key in (("mode", "mode"), ("seed", "seed"), ("split", "labeled_fraction"),
                      ("epochs", "epochs"), ("steps_per_epoch", "steps_per_epoch"), ("lr", "lr"),
                      ("threads", "threads"), ("checkpoint_every", "checkpoint_every"),
                      ("samples", "n_samples")):
        value = getattr(args, flag, None)
        if value is not None:
            over[key] = value
    try:
        return dataclasses.replace(cfg, **over)
    except ValueError as exc:
        raise cfgmod.ConfigError(str(exc)) from None


def _default_threads():
    return len(os.sched_getaffinity(0)) if hasattr(os, "sched_getaffinity") else (os.cpu_count() or 1)


def _prepare(records, scene_cfg, cfg):
    return [prepare_scene(r, scene_cfg.grid_res, scene_cfg.grid_bounds, cfg) for r in records]


# --- subcommands ------------------------------------------------------------------

def cmd_gen(args, argv):
    mapping = cfgmod.read_keyvalue(args.config) if args.config else {}
    scene_cfg, data_cfg = split_config_mapping(mapping)
    if args.seed is not None:
        data_cfg = dataclasses.replace(data_cfg, seed=args.seed)
    for flag in ("n_train", "n_val", "n_test"):
        if getattr(args, flag) is not None:
            data_cfg = dataclasses.replace(data_cfg, **{flag: getattr(args, flag)})
    save_dataset(args.out, scene_cfg, data_cfg)
    _write_run_log(args.out, argv, [("scene.", cfgmod.dataclass_to_mapping(scene_cfg)),
                                    ("dataset.", cfgmod.dataclass_to_mapping(data_cfg))])
    print(f"wrote {data_cfg.n_train}/{data_cfg.n_val}/{data_cfg.n_test} scenes to {args.out}")
    return EXIT_OK


def cmd_train(args, argv):
    cfg = _train_config(args)
    scene_cfg, _ = load_dataset_config(args.data)
    out = args.out or os.path.join("runs", f"{cfg.mode}-s{cfg.seed}")
    _write_run_log(out, argv, [("", train_config_to_mapping(cfg)),
                               ("scene.", cfgmod.dataclass_to_mapping(scene_cfg))])
    train_recs = load_split(args.data, "train")
    eval_recs = load_split(args.data, args.eval_split)

    def checkpoint(epoch, state):
        if cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
            save_model(os.path.join(out, f"model_e{epoch + 1:03d}.rwts"), state.model)

    res = run_experiment(cfg, train_recs, eval_recs, scene_cfg.grid_res, scene_cfg.grid_bounds,
                         scene_cfg.n_classes, on_epoch=checkpoint)
    save_model(os.path.join(out, "model.rwts"), res.model)
    with open(os.path.join(out, "train_report.txt"), "w") as f:
        f.write(format_report([res], scene_cfg.n_classes))
    print(f"{cfg.mode} seed {cfg.seed}: {args.eval_split} mIoU {res.miou:.4f} -> {out}")
    return EXIT_OK


def cmd_eval(args, argv):
    cfg = _read_run_log(os.path.join(args.run, "run.cfg"))
    if args.threads is not None:
        cfg = dataclasses.replace(cfg, threads=args.threads)
    model = load_model(args.model or os.path.join(args.run, "model.rwts"))
    scene_cfg, _ = load_dataset_config(args.data)
    scenes = _prepare(load_split(args.data, args.split_name), scene_cfg, cfg)
    iou, m = evaluate(model.backbone, model.vox_head, scenes, scene_cfg.n_classes)
    res = ExperimentResult(cfg, np.zeros(0, int), [], iou, m, model)
    out = args.out or args.run
    os.makedirs(out, exist_ok=True)
    text = format_report([res], scene_cfg.n_classes).split("\n\n")[0] + "\n"
    with open(os.path.join(out, f"eval_{args.split_name}.txt"), "w") as f:
        f.write(text)
    if args.dump:
        if model.nerf_head is None:
            raise cfgmod.ConfigError("--dump needs a checkpoint with a NeRF head")
        for i, s in enumerate(scenes[:args.dump]):
            _dump_scene(model, s, cfg, os.path.join(out, "images", f"{args.split_name}_{i:04d}"))
    sys.stdout.write(text)
    return EXIT_OK


def _dump_scene(model, scene, cfg, prefix):
    bundle = render_scene(model, scene, cfg)
    _, pseudo = confidence_sampler(bundle.pixels, bundle.y_p, scene.record.masks, cfg.entropy_threshold)
    dump_images(bundle.pixels, bundle.y_p, pseudo, scene.record.image, prefix)
    cam = scene.camera
    return band_means(entropy_image(bundle.pixels, bundle.y_p, cam.width, cam.height), scene.record.image)


def cmd_ablate(args, argv):
    base = _train_config(args)
    scene_cfg, _ = load_dataset_config(args.data)
    out = args.out or os.path.join("runs", "ablate")
    seeds = list(range(args.seed or 0, (args.seed or 0) + args.seeds))
    _write_run_log(out, argv, [("", train_config_to_mapping(base)), ("", {"seeds": " ".join(map(str, seeds))}),
                               ("scene.", cfgmod.dataclass_to_mapping(scene_cfg))])
    train_recs = load_split(args.data, "train")
    test_recs = load_split(args.data, args.eval_split)
    prepared = (_prepare(train_recs, scene_cfg, base), _prepare(test_recs, scene_cfg, base))
    results = []
    for mode in ABLATION_ORDER:
        for seed in seeds:
            cfg = dataclasses.replace(base, mode=mode, seed=seed)
            results.append(run_experiment(cfg, train_recs, test_recs, scene_cfg.grid_res,
                                          scene_cfg.grid_bounds, scene_cfg.n_classes, prepared=prepared))
    text = format_ablation(results) + "\n" + format_report(results, scene_cfg.n_classes)
    with open(os.path.join(out, "ablation.txt"), "w") as f:
        f.write(text)
    sys.stdout.write(format_ablation(results))
    return EXIT_OK


def format_ablation(results):
    """One row per mode (sup-only, perspective, no-sam, full): median and per-seed mIoU."""
    lines = [f"{'mode':<12} {'median_miou':>11}  per-seed"]
    for mode in ABLATION_ORDER:
        vals = [r.miou for r in results if r.config.mode == mode]
        if not vals:
            continue
        seeds = " ".join(f"{r.config.seed}:{r.miou:.4f}" for r in results if r.config.mode == mode)
        lines.append(f"{mode:<12} {float(np.median(vals)):11.4f}  {seeds}")
    return "\n".join(lines) + "\n"


def cmd_parallax(args, argv):
    scene_cfg = load_scene_config(args.config, parallax_suite_config()) if args.config else parallax_suite_config()
    offsets = [float(x) for x in args.offsets.split(",")]
    seeds = list(range(args.seed, args.seed + args.seeds))
    out = args.out or os.path.join("runs", "parallax")
    _write_run_log(out, argv, [("", {"seeds": " ".join(map(str, seeds)), "offsets": args.offsets,
                                     "samples": args.samples}),
                               ("scene.", cfgmod.dataclass_to_mapping(scene_cfg))])
    rows = parallax_report(scene_cfg, seeds, offsets, n_samples=args.samples)
    text = format_parallax(rows + parallax_summary(rows))
    with open(os.path.join(out, "parallax.txt"), "w") as f:
        f.write(text)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_render_debug(args, argv):
    cfg = _read_run_log(os.path.join(args.run, "run.cfg"))
    if args.threads is not None:
        cfg = dataclasses.replace(cfg, threads=args.threads)
    model = load_model(args.model or os.path.join(args.run, "model.rwts"))
    if model.nerf_head is None:
        raise cfgmod.ConfigError("render-debug needs a checkpoint with a NeRF head")
    scene_cfg, _ = load_dataset_config(args.data)
    recs = load_split(args.data, args.split_name)
    if not 0 <= args.index < len(recs):
        raise UsageError(f"--index must lie in [0, {len(recs)})")
    scene = prepare_scene(recs[args.index], scene_cfg.grid_res, scene_cfg.grid_bounds, cfg)
    out = args.out or os.path.join(args.run, "debug")
    prefix = os.path.join(out, f"{args.split_name}_{args.index:04d}")
    band, interior = _dump_scene(model, scene, cfg, prefix)
    text = f"entropy band_mean={band:.6f} interior_mean={interior:.6f}\n"
    with open(prefix + "_entropy.txt", "w") as f:
        f.write(text)
    sys.stdout.write(text)
    return EXIT_OK


# --- argument parsing ---------------------------------------------------------------

def _add_train_flags(p):
    p.add_argument("--config", help="train config file (key=value); flags override its keys")
    p.add_argument("--seed", type=int, help="training seed (model init, labeled split, batch order)")
    p.add_argument("--split", type=float, help="labeled fraction of the train split, in (0, 1]")
    p.add_argument("--epochs", type=int, help="number of epochs E")
    p.add_argument("--steps-per-epoch", type=int, dest="steps_per_epoch", help="optimizer steps per epoch")
    p.add_argument("--lr", type=float, help="SGD learning rate")
    p.add_argument("--samples", type=int, help="samples per rendered ray")
    p.add_argument("--eval-split", default="test", choices=SPLITS, help="split scored after training")


def build_parser():
    parser = _Parser(prog="rayseg", description="Ray-rendered pseudo-labels for LiDAR segmentation.")
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("gen", help="generate a synthetic dataset directory")
    p.add_argument("--config", help="scene + dataset config file (key=value)")
    p.add_argument("--seed", type=int, help="dataset seed (overrides the config)")
    p.add_argument("--n-train", type=int, dest="n_train", help="number of training scenes")
    p.add_argument("--n-val", type=int, dest="n_val", help="number of validation scenes")
    p.add_argument("--n-test", type=int, dest="n_test", help="number of test scenes")
    p.add_argument("--out", required=True, help="dataset directory to write")

    p = sub.add_parser("train", help="train one mode and score it")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--mode", choices=MODES, help="training mode")
    _add_train_flags(p)
    p.add_argument("--checkpoint-every", type=int, dest="checkpoint_every",
                   help="also save model_eNNN.rwts every N epochs (0 = only the final model)")
    p.add_argument("--out", help="run directory (default runs/<mode>-s<seed>)")

    p = sub.add_parser("eval", help="score a trained model (backbone + vox head only)")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--run", required=True, help="run directory written by train")
    p.add_argument("--model", help="checkpoint (default <run>/model.rwts)")
    p.add_argument("--split-name", default="test", choices=SPLITS, help="split to score")
    p.add_argument("--dump", type=int, default=0, help="write image dumps for the first N scenes")
    p.add_argument("--out", help="output directory (default the run directory)")

    p = sub.add_parser("ablate", help="all four modes over several seeds")
    p.add_argument("--data", required=True, help="dataset directory")
    _add_train_flags(p)
    p.add_argument("--seeds", type=int, default=5, help="number of consecutive seeds")
    p.add_argument("--out", help="output directory (default runs/ablate)")

    p = sub.add_parser("parallax", help="ray-based vs perspective pseudo-label accuracy per camera offset")
    p.add_argument("--config", help="scene config file (default: the built-in parallax suite)")
    p.add_argument("--seed", type=int, default=1, help="first scene seed")
    p.add_argument("--seeds", type=int, default=5, help="number of scene seeds")
    p.add_argument("--offsets", default="0,0.5,1,2", help="comma-separated camera offsets in metres")
    p.add_argument("--samples", type=int, default=458, help="samples per rendered ray")
    p.add_argument("--out", help="output directory (default runs/parallax)")

    p = sub.add_parser("render-debug", help="render one scene and dump semantic/entropy/error images")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--run", required=True, help="run directory written by train")
    p.add_argument("--model", help="checkpoint (default <run>/model.rwts)")
    p.add_argument("--split-name", default="test", choices=SPLITS, help="split holding the scene")
    p.add_argument("--index", type=int, default=0, help="scene index within the split")
    p.add_argument("--out", help="output directory (default <run>/debug)")

    for name, sp in sub.choices.items():
        if name not in ("gen", "parallax"):
            sp.add_argument("--threads", type=int, help="worker threads (default: available CPUs)")
    return parser


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval, "ablate": cmd_ablate,
            "parallax": cmd_parallax, "render-debug": cmd_render_debug}


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
        if getattr(args, "threads", None) is None and args.command in ("train", "ablate"):
            args.threads = _default_threads()
        if getattr(args, "threads", None) is not None and args.threads < 1:
            raise UsageError("--threads must be >= 1")
        return COMMANDS[args.command](args, argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except cfgmod.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
