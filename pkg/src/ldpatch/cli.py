"""Command-line entry point: ``python3 -m ldpatch <subcommand> ...``.

Exit codes: 0 success, 2 invalid config or inputs, 3 training or optimization
failure, 4 no person boxes to attack or evaluate.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch

from . import pipeline
from .autoencoder import TrainingDiverged, load_autoencoder
from .config import ConfigError, PipelineConfig, load_config
from .core import ArtifactError, load_image_dir
from .detector import load_detector
from .diffusion import DiffusionError, load_diffusion
from .evaluation import write_matrix_csv
from .patch import PatchOptimizationError
from .synthetic import SynthScene, dump_scenes, load_scene_labels

log = logging.getLogger("ldpatch")

EXIT_OK, EXIT_CONFIG, EXIT_TRAINING, EXIT_NO_BOXES = 0, 2, 3, 4


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def _say(args, text: str) -> None:
    if not args.quiet:
        print(text)


def _out(path) -> Path:
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    return out


def _name(path) -> str:
    return Path(path).stem


# ---------------------------------------------------------------------------
# subcommands

def cmd_gen_data(args, cfg: PipelineConfig) -> None:
    which = {"train": "scenes", "attack": "attack_scenes", "eval": "eval_scenes"}[args.split]
    scenes = pipeline.scenes(cfg, which, args.n)
    dump_scenes(scenes, args.out)
    n_person = sum(len(s.boxes(cfg.detector.grid.person_class)) for s in scenes)
    _say(args, f"wrote {len(scenes)} scenes ({n_person} person boxes) to {args.out}")


def cmd_train_ae(args, cfg: PipelineConfig) -> None:
    _, mse, _ = pipeline.run_train_ae(cfg, _out(args.out))
    _say(args, f"heldout reconstruction mse {mse:.6f}")


def cmd_train_diffusion(args, cfg: PipelineConfig) -> None:
    ae = load_autoencoder(args.ae)
    _, history = pipeline.run_train_diffusion(cfg, ae, _out(args.out))
    tail = history[-min(200, len(history)):]
    _say(args, f"final diffusion loss {float(np.mean(tail)):.4f}")


def _scenes_from_dir(path, cfg: PipelineConfig) -> list[SynthScene]:
    images = load_image_dir(path, cfg.detector.grid.image_size)
    labels = load_scene_labels(path)
    if len(labels) != len(images):
        raise pipeline.StageInputError(f"{path}: {len(images)} images but {len(labels)} label files")
    classes = set(cfg.detector.grid.classes)
    for objs in labels:
        for _, c in objs:
            if c not in classes:
                raise pipeline.StageInputError(f"{path}: label {c!r} is not a configured class")
    return [SynthScene(x, objs) for x, objs in zip(images, labels)]


def cmd_train_detector(args, cfg: PipelineConfig) -> None:
    scenes = _scenes_from_dir(args.scenes, cfg) if args.scenes else None
    det, history = pipeline.run_train_detector(cfg, _out(args.out), scenes)
    _say(args, f"final detector loss {history[-1]:.4f}")


def cmd_optimize_patch(args, cfg: PipelineConfig) -> None:
    ae = load_autoencoder(args.ae)
    diffusion, _, _ = load_diffusion(args.diffusion)
    det = load_detector(args.detector)
    result = pipeline.run_optimize_patch(cfg, ae, diffusion, det)
    meta = {"detector": _name(args.detector), "seed": cfg.seed,
            "weights": cfg.to_dict()["attack"]["weights"]}
    art, png, loss_csv = pipeline.write_patch_outputs(result, _out(args.out), meta)
    last = result.history[-1]
    _say(args, f"wrote {art}, {png}, {loss_csv}; final l_det {last['l_det']:.4f} "
               f"l_kl {last['l_kl']:.4f}")


def cmd_evaluate(args, cfg: PipelineConfig) -> None:
    det = load_detector(args.detector)
    patch, meta = pipeline.load_patch_with_meta(args.patch)
    images = pipeline.eval_images(cfg, det, args.images)
    report = pipeline.run_evaluate(cfg, det, patch, images)
    json_path, csv_path = pipeline.write_report(report, _out(args.out),
                                                meta.get("detector", _name(args.patch)),
                                                _name(args.detector))
    _say(args, f"clean mAP {report.clean_map:.2f}  patched mAP {report.patched_map:.2f}  "
               f"ASR {report.asr:.2f}  confidence drop {100 * report.confidence_drop:.1f}%")


def cmd_cross_eval(args, cfg: PipelineConfig) -> None:
    dets = [load_detector(p) for p in args.detector]
    names = [_name(p) for p in args.detector]
    patches = None
    if args.patch:
        if len(args.patch) != len(dets):
            raise pipeline.StageInputError("give one --patch per --detector")
        patches = [pipeline.load_patch_with_meta(p)[0] for p in args.patch]
        ae = diffusion = None
    else:
        if not (args.ae and args.diffusion):
            raise pipeline.StageInputError("--ae and --diffusion are required without --patch")
        ae = load_autoencoder(args.ae)
        diffusion, _, _ = load_diffusion(args.diffusion)
    clean, maps, asrs = pipeline.run_cross_eval(cfg, ae, diffusion, dets, patches)
    out = _out(args.out)
    csv_path = out.with_suffix(".csv")
    write_matrix_csv(csv_path, names, names, clean, maps, asrs)
    doc = {"train_models": names, "victim_models": names, "clean_map": list(clean),
           "patched_map": maps.tolist(), "asr": asrs.tolist(), "seed": cfg.seed}
    out.with_suffix(".json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    _say(args, "patched mAP matrix (rows: patch source, columns: victim)\n"
               + "\n".join("  " + "  ".join(f"{v:6.2f}" for v in row) for row in maps))


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-ae": cmd_train_ae,
    "train-diffusion": cmd_train_diffusion,
    "train-detector": cmd_train_detector,
    "optimize-patch": cmd_optimize_patch,
    "evaluate": cmd_evaluate,
    "cross-eval": cmd_cross_eval,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON pipeline config (defaults when omitted)")
    common.add_argument("--seed", type=int, help="overrides the config seed")
    common.add_argument("--out", required=True, help="output file or directory")
    common.add_argument("--quiet", action="store_true", help="suppress progress and summaries")

    parser = argparse.ArgumentParser(prog="ldpatch", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("gen-data", parents=[common], help="write synthetic scenes with labels")
    p.add_argument("--split", choices=("train", "attack", "eval"), default="train")
    p.add_argument("--n", type=int, help="number of scenes (default from config)")
    sub.add_parser("train-ae", parents=[common], help="train the autoencoder")
    p = sub.add_parser("train-diffusion", parents=[common], help="train the latent denoiser")
    p.add_argument("--ae", required=True)
    p = sub.add_parser("train-detector", parents=[common], help="train the grid detector")
    p.add_argument("--scenes", help="gen-data directory (default: synthesize from the seed)")
    p = sub.add_parser("optimize-patch", parents=[common], help="optimize a patch distribution")
    p.add_argument("--ae", required=True)
    p.add_argument("--diffusion", required=True)
    p.add_argument("--detector", required=True)
    p = sub.add_parser("evaluate", parents=[common], help="mAP, ASR and confidence report")
    p.add_argument("--detector", required=True)
    p.add_argument("--patch", required=True)
    p.add_argument("--images", help="image directory (default: synthesize from the seed)")
    p = sub.add_parser("cross-eval", parents=[common], help="patch transfer matrix")
    p.add_argument("--detector", nargs="+", required=True)
    p.add_argument("--patch", nargs="+", help="one precomputed patch per detector")
    p.add_argument("--ae")
    p.add_argument("--diffusion")
    return parser


def _set_threads() -> None:
    value = os.environ.get("LDP_NUM_THREADS")
    if value is None:
        return
    try:
        n = int(value)
    except ValueError:
        n = 0
    if n < 1:
        raise CliError(f"LDP_NUM_THREADS must be a positive integer, got {value!r}", EXIT_CONFIG)
    torch.set_num_threads(n)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(name)s: %(message)s", stream=sys.stderr)
    try:
        _set_threads()
        try:
            cfg = load_config(args.config, args.seed)
        except ConfigError as exc:
            raise CliError(str(exc), EXIT_CONFIG) from None
        COMMANDS[args.command](args, cfg)
    except CliError as exc:
        print(f"ldpatch {args.command}: {exc}", file=sys.stderr)
        return exc.code
    except pipeline.NoBoxes as exc:
        print(f"ldpatch {args.command}: {exc}", file=sys.stderr)
        return EXIT_NO_BOXES
    except (ConfigError, ArtifactError, pipeline.StageInputError, FileNotFoundError,
            NotADirectoryError) as exc:
        print(f"ldpatch {args.command}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (TrainingDiverged, DiffusionError, PatchOptimizationError, RuntimeError) as exc:
        print(f"ldpatch {args.command}: training failed: {exc}", file=sys.stderr)
        return EXIT_TRAINING
    return EXIT_OK
