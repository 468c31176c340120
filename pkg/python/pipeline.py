#!/usr/bin/env python3
"""
Command-line driver for the two-stage grid-diffusion sequence generator.

Subcommands:
  dataset       write the synthetic training sequences as PNG frame folders
  train-stage1  train the unconditional grid model
  train-stage2  train the conditional per-frame refinement model
  sample        generate a coarse sequence autoregressively
  sr            refine a frame folder with the stage-2 model
  denoise       grid-wise denoising of a noisy volume
  eval          score frame folders (flicker, psnr, ssim, proxy_fd)
  inspect       dump a positional-embedding table or describe a checkpoint

Every run writes <out>/<command>_report.json embedding the config digest.
"""
import argparse
import json
import logging
import os
import sys
from typing import Any, Dict, List, Optional

import numpy as np
import torch
from dotenv import load_dotenv

from checkpoint import describe_checkpoint, read_checkpoint, save_checkpoint
from config_loader import (
    ConfigError,
    RunConfig,
    build_run_config,
    get_path,
    load_config,
    set_path,
)
from denoiser import DenoiserConfig, DenoiserModel, count_parameters, make_codec, plot_loss_curve, train
from diffusion import DivergenceError, NoiseSchedule, SamplingSchedule, derive_seed, make_generator, respace
from eval_metrics import evaluate_sequences, psnr, write_report
from frame_io import MANIFEST_NAME, load_frame_folder, save_sequence
from posembed import build_pos_embed
from sampler import SamplerPlan, generate_sequence
from seqgrid import GridLayout, Sequence, extract_training_grids, resample_frame
from sr_stage import bicubic_baseline, refine_sequence, train_sr
from synth_data import synth_dataset, synth_sequence
from voldenoise import NoisyVolume, add_volume_noise, denoise_volume

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"
LOG_ENV = "GRIDIT_LOG"
COMMANDS = ("dataset", "train-stage1", "train-stage2", "sample", "sr", "denoise", "eval", "inspect")

# CLI flag -> config keys it overrides
OVERRIDES = {
    "seed": ("runtime", "seed"),
    "workers": ("runtime", "workers"),
    "out": ("paths", "output_dir"),
    "iterations": ("sampler", "iterations"),
    "grid": ("grid", "K"),
    "control_rows": ("grid", "r"),
    "scale": ("sr", "scale"),
    "metric": ("eval", "metric"),
    "mode": ("denoise", "mode"),
    "tstar": ("denoise", "t_star"),
    "train_steps": ("training", "steps"),
}


def setup_logging(config: Dict[str, Any], log_file: Optional[str] = None) -> None:
    level_name = os.environ.get(LOG_ENV) or get_path(config, "logging", "level", default="INFO")
    level = getattr(logging, str(level_name).upper(), logging.INFO)
    root = logging.getLogger()
    # Clear existing handlers to avoid duplicate logs across runs
    for h in list(root.handlers):
        root.removeHandler(h)
    root.setLevel(level)
    formatter = logging.Formatter(LOG_FORMAT)

    sh = logging.StreamHandler()
    sh.setFormatter(formatter)
    root.addHandler(sh)
    if log_file is None and get_path(config, "logging", "to_file", default=False):
        log_file = get_path(config, "logging", "file_path", default="pipeline.log")
    if log_file:
        os.makedirs(os.path.dirname(os.path.abspath(log_file)), exist_ok=True)
        fh = logging.FileHandler(log_file)
        fh.setFormatter(formatter)
        root.addHandler(fh)


def resolve_file_path(
    base_dir: str,
    explicit_path: Optional[str],
    name_arg: Optional[str],
    default_name: str,
) -> str:
    """
    Resolve file path based on precedence:
    1. explicit_path (absolute or relative)
    2. name_arg joined with base_dir
    3. default_name joined with base_dir
    """
    if explicit_path:
        return explicit_path

    file_name = name_arg or default_name
    if os.path.isabs(file_name):
        return file_name

    return os.path.join(base_dir, file_name)


# ---------------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------------

def apply_overrides(config: Dict[str, Any], args: argparse.Namespace) -> Dict[str, Any]:
    """Copy explicit CLI flags into the config so the digest covers them."""
    for attr, keys in OVERRIDES.items():
        value = getattr(args, attr, None)
        if value is not None:
            set_path(config, value, *keys)
    steps = getattr(args, "steps", None)
    if steps is not None:
        section = "sr" if args.command == "sr" else "diffusion"
        set_path(config, steps, section, "sampling_steps")
    return config


def output_dir(run: RunConfig) -> str:
    base_dir = os.path.dirname(os.path.abspath(__file__))
    path = resolve_file_path(base_dir, None, None, run.output_dir)
    os.makedirs(path, exist_ok=True)
    return path


def write_run_report(out_dir: str, command: str, run: RunConfig, payload: Dict[str, Any]) -> str:
    report = {"command": command, "config_digest": run.digest, "seed": run.seed}
    report.update(payload)
    path = os.path.join(out_dir, f"{command.replace('-', '_')}_report.json")
    with open(path, "w", encoding="utf-8") as f:
        json.dump(report, f, indent=2, sort_keys=True)
    logger.info("Report written to %s", path)
    return path


def is_frame_folder(path: str) -> bool:
    if os.path.exists(os.path.join(path, MANIFEST_NAME)):
        return True
    return any(name.lower().endswith(".png") for name in os.listdir(path))


def load_sequences(path: str) -> List[Sequence]:
    """One frame folder, or a directory whose sub-folders are frame folders."""
    if not os.path.isdir(path):
        raise FileNotFoundError(f"Input folder not found: {path}")
    if is_frame_folder(path):
        return [load_frame_folder(path)]
    subdirs = sorted(d for d in os.listdir(path) if os.path.isdir(os.path.join(path, d)))
    sequences = [load_frame_folder(os.path.join(path, d)) for d in subdirs]
    if not sequences:
        raise FileNotFoundError(f"No frame folders under {path}")
    return sequences


def training_sequences(run: RunConfig, input_path: Optional[str]) -> List[Sequence]:
    if input_path:
        return load_sequences(input_path)
    return synth_dataset(run.synth, workers=run.workers)


def new_model(config: DenoiserConfig, seed: int, stage: str) -> DenoiserModel:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(derive_seed(seed, "init", stage))
        model = DenoiserModel(config)
    logger.info("Built %s model with %d parameters", stage, count_parameters(model))
    return model


def divergence_saver(out_dir: str, sched: NoiseSchedule, codec: str):
    def save(model: DenoiserModel):
        path = os.path.join(out_dir, "diverged.grdt")
        save_checkpoint(model, sched, path, codec=codec, extra={"diverged": True})
        logger.error("Last finite parameters saved to %s", path)
    return save


def sampling_schedule_for(sched: NoiseSchedule, steps: int) -> SamplingSchedule:
    if isinstance(sched, SamplingSchedule):
        return sched
    if steps > sched.T:
        raise ConfigError(f"diffusion.sampling_steps: {steps} exceeds the checkpoint's T={sched.T}")
    return respace(sched, steps)


def save_training_outputs(out_dir: str, stage: str, result) -> Dict[str, Any]:
    csv_path = os.path.join(out_dir, f"{stage}_loss.csv")
    result.curve.to_csv(csv_path, index=False)
    plot_path = None
    if len(result.curve):
        plot_path = plot_loss_curve(result.curve, os.path.join(out_dir, f"{stage}_loss.png"), f"{stage} loss")
    return {
        "steps": len(result.losses),
        "initial_loss": result.losses[0] if result.losses else None,
        "final_loss": result.losses[-1] if result.losses else None,
        "loss_csv": csv_path,
        "loss_plot": plot_path,
    }


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_dataset(args, run: RunConfig, out_dir: str) -> Dict[str, Any]:
    sequences = synth_dataset(run.synth, workers=run.workers)
    root = os.path.join(out_dir, "dataset")
    for i, seq in enumerate(sequences):
        save_sequence(seq, os.path.join(root, f"seq_{i:04d}"))
    return {
        "dataset_dir": root,
        "kind": run.synth.kind,
        "n_sequences": len(sequences),
        "n_frames": run.synth.n_frames,
        "frame_size": [run.synth.H, run.synth.W],
    }


def cmd_train_stage1(args, run: RunConfig, out_dir: str) -> Dict[str, Any]:
    codec = make_codec(run.codec)
    grids = []
    for seq in training_sequences(run, args.input):
        grids.extend(g.pixels for g in extract_training_grids(seq, run.layout, run.stride))
    data = codec.encode(torch.stack(grids))
    logger.info("Training stage 1 on %d grids of shape %s", data.shape[0], tuple(data.shape[1:]))

    sched = run.train_schedule()
    model = new_model(run.stage1, run.seed, "stage1")
    result = train(model, data, run.training, sched, derive_seed(run.seed, "train", "stage1"),
                   on_divergence=divergence_saver(out_dir, sched, run.codec))
    path = resolve_file_path(out_dir, args.stage1, None, run.stage1_checkpoint)
    save_checkpoint(model, sched, path, codec=run.codec, extra={"stage": 1, "K": run.layout.K})
    summary = save_training_outputs(out_dir, "stage1", result)
    summary.update({"checkpoint": path, "n_grids": int(data.shape[0]), "n_parameters": count_parameters(model)})
    return summary


def cmd_train_stage2(args, run: RunConfig, out_dir: str) -> Dict[str, Any]:
    codec = make_codec(run.codec)
    size = run.layout.element_h * run.sr_scale
    frames = []
    for seq in training_sequences(run, args.input):
        for frame in seq.frames:
            frame = frame if frame.shape[0] == 3 else frame.expand(3, -1, -1)
            if tuple(frame.shape[1:]) != (size, size):
                frame = resample_frame(frame, size, size).clamp(0.0, 1.0)
            frames.append(frame)
    hr = torch.stack(frames)
    logger.info("Training stage 2 on %d frames of %dx%d", hr.shape[0], size, size)

    sched = run.train_schedule()
    model = new_model(run.stage2, run.seed, "stage2")
    result = train_sr(model, hr, run.degrade, run.training, sched, derive_seed(run.seed, "train", "stage2"),
                      codec=codec, on_divergence=divergence_saver(out_dir, sched, run.codec))
    path = resolve_file_path(out_dir, args.stage2, None, run.stage2_checkpoint)
    save_checkpoint(model, sched, path, codec=run.codec, extra={"stage": 2, "scale": run.sr_scale})
    summary = save_training_outputs(out_dir, "stage2", result)
    summary.update({"checkpoint": path, "n_frames": int(hr.shape[0]), "n_parameters": count_parameters(model)})
    return summary


def load_stage(args, run: RunConfig, out_dir: str, stage: str):
    explicit = getattr(args, stage)
    path = resolve_file_path(out_dir, explicit, None, getattr(run, f"{stage}_checkpoint"))
    return path, read_checkpoint(path)


def cmd_sample(args, run: RunConfig, out_dir: str) -> Dict[str, Any]:
    path, ckpt = load_stage(args, run, out_dir, "stage1")
    plan = SamplerPlan(
        layout=run.layout,
        N=run.iterations,
        sched=sampling_schedule_for(ckpt.sched, run.sampling_steps),
        seed=run.seed,
        interpolate=run.interpolate,
        control_alpha=run.control_alpha,
        codec=make_codec(ckpt.codec),
        log_every=run.sampler_log_every,
    )
    coarse = generate_sequence(ckpt.model, plan)
    folder = os.path.join(out_dir, "sample")
    save_sequence(coarse.to_sequence(), folder)
    return {
        "checkpoint": path,
        "frames_dir": folder,
        "n_frames": len(coarse),
        "expected_length": plan.expected_length(),
        "nominal_length": coarse.nominal_length,
        "K": run.layout.K,
        "r": run.layout.r,
        "N": run.iterations,
        "sampling_steps": plan.sched.T,
        "provenance": coarse.provenance,
    }


def cmd_sr(args, run: RunConfig, out_dir: str) -> Dict[str, Any]:
    path, ckpt = load_stage(args, run, out_dir, "stage2")
    input_path = args.input or os.path.join(out_dir, "sample")
    seq = load_frame_folder(input_path)
    scale = run.sr_scale
    refined = refine_sequence(ckpt.model, seq, scale, sampling_schedule_for(ckpt.sched, run.sr_sampling_steps),
                              run.seed, codec=make_codec(ckpt.codec), workers=run.workers)
    folder = os.path.join(out_dir, "sr")
    save_sequence(refined, folder)
    payload = {
        "checkpoint": path,
        "input_dir": input_path,
        "frames_dir": folder,
        "n_frames": len(refined),
        "scale": scale,
        "frame_size": [refined.height, refined.width],
    }
    if args.reference:
        ref = load_frame_folder(args.reference)
        if len(ref) != len(refined):
            raise ValueError(f"Reference has {len(ref)} frames, refined sequence has {len(refined)}")
        bicubic = torch.stack([bicubic_baseline(f, scale).clamp(0.0, 1.0) for f in seq.frames])
        payload["psnr_sr"] = psnr(refined.frames, ref.frames)
        payload["psnr_bicubic"] = psnr(bicubic, ref.frames)
    return payload


def cmd_denoise(args, run: RunConfig, out_dir: str) -> Dict[str, Any]:
    _, ckpt1 = load_stage(args, run, out_dir, "stage1")
    stage2 = sr_sched = None
    if args.stage2:
        _, ckpt2 = load_stage(args, run, out_dir, "stage2")
        stage2 = ckpt2.model
        sr_sched = sampling_schedule_for(ckpt2.sched, run.sr_sampling_steps)

    clean = None
    if args.input:
        vol_seq = load_frame_folder(args.input)
        vol = NoisyVolume(vol_seq)
    else:
        clean = synth_sequence(run.synth, 0)
        vol = add_volume_noise(clean, run.denoise_noise_std, make_generator(derive_seed(run.seed, "volume_noise")))
        save_sequence(clean, os.path.join(out_dir, "denoise_clean"))
        save_sequence(vol.frames, os.path.join(out_dir, "denoise_noisy"))

    result = denoise_volume(
        ckpt1.model, stage2, vol, run.layout,
        sampling_schedule_for(ckpt1.sched, run.sampling_steps),
        mode=run.denoise_mode, t_star=run.t_star, seed=run.seed,
        codec=make_codec(ckpt1.codec), sr_sched=sr_sched, sr_scale=run.sr_scale, workers=run.workers,
    )
    folder = os.path.join(out_dir, "denoise")
    save_sequence(result, folder)
    payload = {
        "frames_dir": folder,
        "mode": run.denoise_mode,
        "t_star": run.t_star,
        "n_frames": len(result),
        "frame_size": [result.height, result.width],
        "refined": stage2 is not None,
    }
    if clean is not None:
        def at_output_size(frames: torch.Tensor) -> torch.Tensor:
            return torch.stack([resample_frame(f, result.height, result.width).clamp(0.0, 1.0) for f in frames])

        reference = at_output_size(clean.frames)
        payload["noise_std"] = run.denoise_noise_std
        payload["psnr_noisy"] = psnr(at_output_size(vol.frames.frames), reference)
        payload["psnr_denoised"] = psnr(result.frames, reference)
    return payload


def cmd_eval(args, run: RunConfig, out_dir: str) -> Dict[str, Any]:
    if not args.input:
        raise ValueError("eval needs --input")
    sequences = load_sequences(args.input)
    reference = load_sequences(args.reference) if args.reference else None
    reports = evaluate_sequences(sequences, [run.metric], reference, config_digest=run.digest)
    path = os.path.join(out_dir, "eval_report.json")
    write_report(reports, path, extra={"command": "eval", "config_digest": run.digest, "seed": run.seed,
                                       "input_dir": args.input})
    return {"report": path, "reports": [r.to_dict() for r in reports]}


def cmd_inspect(args, run: RunConfig, out_dir: str) -> Dict[str, Any]:
    if args.what == "checkpoint":
        path = resolve_file_path(out_dir, args.stage1, None, run.stage1_checkpoint)
        return {"checkpoint": path, "summary": describe_checkpoint(path)}

    cfg = run.stage1
    element = cfg.input_size // cfg.grid_K
    layout = GridLayout(K=cfg.grid_K, r=0, element_h=element, element_w=element)
    table = build_pos_embed(layout, cfg.patch, cfg.width, scheme=cfg.pos_scheme)
    bin_path = os.path.join(out_dir, "posembed.bin")
    txt_path = os.path.join(out_dir, "posembed.txt")
    with open(bin_path, "wb") as f:
        f.write(np.ascontiguousarray(table.values, dtype="<f4").tobytes())
    with open(txt_path, "w", encoding="utf-8") as f:
        f.write(f"scheme {table.scheme}\n")
        f.write(f"rows {table.num_patches}\n")
        f.write(f"cols {table.D}\n")
        f.write(f"patch_grid {table.patch_grid[0]} {table.patch_grid[1]}\n")
        f.write(f"K {cfg.grid_K}\npatch {cfg.patch}\n")
        f.write("dtype float32 little-endian row-major\n")
    return {"table": bin_path, "header": txt_path, "shape": list(table.values.shape), "scheme": table.scheme}


HANDLERS = {
    "dataset": cmd_dataset,
    "train-stage1": cmd_train_stage1,
    "train-stage2": cmd_train_stage2,
    "sample": cmd_sample,
    "sr": cmd_sr,
    "denoise": cmd_denoise,
    "eval": cmd_eval,
    "inspect": cmd_inspect,
}


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=str, default=None, help="Path to config.yaml (default: ../config.yaml)")
    common.add_argument("--seed", type=int, default=None, help="Root seed (override config)")
    common.add_argument("--out", type=str, default=None, help="Output directory (override config)")
    common.add_argument("--workers", type=int, default=None, help="Worker pool size (override config)")
    common.add_argument("--log-file", type=str, default=None, help="Also log to this file")

    parser = argparse.ArgumentParser(
        description="Two-stage grid-diffusion image-sequence generator",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  # Write the synthetic dataset and train both stages with config.yaml
  python pipeline.py dataset --out ../output
  python pipeline.py train-stage1 --out ../output --train-steps 500
  python pipeline.py train-stage2 --out ../output

  # Sample 3 autoregressive iterations, then refine to full size
  python pipeline.py sample --out ../output --seed 7 --iterations 3
  python pipeline.py sr --out ../output --input ../output/sample

  # Denoise a noisy frame folder and score the result
  python pipeline.py denoise --out ../output --mode sdedit --tstar 100
  python pipeline.py eval --out ../output --input ../output/denoise --metric flicker
        """
    )
    sub = parser.add_subparsers(dest="command", required=True)
    parsers = {name: sub.add_parser(name, parents=[common]) for name in COMMANDS}

    for name in ("train-stage1", "train-stage2", "eval", "sr", "denoise"):
        parsers[name].add_argument("--input", type=str, default=None, help="Input frame folder")
    for name in ("train-stage1", "train-stage2"):
        parsers[name].add_argument("--train-steps", type=int, default=None, help="Optimisation steps")
    for name in ("train-stage1", "sample", "denoise", "inspect"):
        parsers[name].add_argument("--stage1", type=str, default=None, help="Stage-1 checkpoint path")
    for name in ("train-stage2", "sr", "denoise"):
        parsers[name].add_argument("--stage2", type=str, default=None, help="Stage-2 checkpoint path")
    for name in ("train-stage1", "sample", "denoise", "inspect"):
        parsers[name].add_argument("--grid", type=int, default=None, help="Grid size K")
        parsers[name].add_argument("--control-rows", type=int, default=None, help="Control rows r")
    for name in ("sample", "sr", "denoise"):
        parsers[name].add_argument("--steps", type=int, default=None, help="Sampling steps T_s")
    for name in ("train-stage2", "sr", "denoise"):
        parsers[name].add_argument("--scale", type=int, default=None, help="Super-resolution factor")
    for name in ("sr", "eval"):
        parsers[name].add_argument("--reference", type=str, default=None, help="Reference frame folder(s)")

    parsers["sample"].add_argument("--iterations", type=int, default=None, help="Autoregressive iterations N")
    parsers["eval"].add_argument("--metric", type=str, default=None, help="flicker | psnr | ssim | proxy_fd")
    parsers["denoise"].add_argument("--mode", type=str, default=None, help="literal | sdedit")
    parsers["denoise"].add_argument("--tstar", type=int, default=None, help="sdedit noise level t*")
    parsers["inspect"].add_argument("--what", choices=("posembed", "checkpoint"), default="posembed",
                                    help="What to inspect")
    return parser


def run_cli(argv: Optional[List[str]] = None) -> int:
    """Parse argv, run one subcommand and return its exit code."""
    load_dotenv()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)

    try:
        if args.config and not os.path.exists(args.config):
            raise ConfigError(f"config: file not found: {args.config}")
        config = apply_overrides(load_config(args.config), args)
        setup_logging(config, args.log_file)
        run = build_run_config(config)
        out_dir = output_dir(run)
        logger.info("Running %s (config digest %s)", args.command, run.digest[:12])
        payload = HANDLERS[args.command](args, run, out_dir)
        if args.command != "eval":
            write_run_report(out_dir, args.command, run, payload)
        return 0
    except ConfigError as e:
        logger.error("Configuration error: %s", e)
        return 2
    except DivergenceError as e:
        logger.error("Diverged: %s", e)
        return 1
    except Exception as e:
        logger.error("%s failed: %s: %s", args.command, type(e).__name__, e)
        logger.debug("Traceback", exc_info=True)
        return 1


def main():
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
