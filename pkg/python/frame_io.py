"""
PNG frame folders with a JSON manifest.

manifest.json:
  {"frames": ["frame_00000.png", ...], "height": H, "width": W,
   "channels": C, "frame_rate_hint": null}
"""
import glob
import json
import logging
import os
from typing import Dict, List, Optional, Union

import numpy as np
import torch
from PIL import Image

from seqgrid import Sequence, from_uint8, to_uint8

logger = logging.getLogger(__name__)
logger.addHandler(logging.NullHandler())

MANIFEST_NAME = "manifest.json"


class FrameFolderError(ValueError):
    """A frame folder or its manifest is unusable; the message names the file."""


def save_sequence(seq: Sequence, folder: str, prefix: str = "frame") -> str:
    """Write frames as 8-bit PNGs plus a manifest; returns the manifest path."""
    os.makedirs(folder, exist_ok=True)
    names = []
    for i, frame in enumerate(seq.frames):
        pixels = to_uint8(frame).permute(1, 2, 0).contiguous().numpy()
        name = f"{prefix}_{i:05d}.png"
        if pixels.shape[2] == 1:
            Image.fromarray(pixels[:, :, 0]).save(os.path.join(folder, name))
        else:
            Image.fromarray(pixels).save(os.path.join(folder, name))
        names.append(name)

    manifest = {
        "frames": names,
        "height": seq.height,
        "width": seq.width,
        "channels": seq.channels,
        "frame_rate_hint": seq.frame_rate_hint,
    }
    manifest_path = os.path.join(folder, MANIFEST_NAME)
    with open(manifest_path, "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2)
    logger.info("Saved %d frames to %s", len(names), folder)
    return manifest_path


def _read_manifest(path: str, manifest: Union[None, str, Dict, List[str]]) -> Dict:
    if isinstance(manifest, dict):
        return manifest
    if isinstance(manifest, list):
        return {"frames": manifest}
    manifest_path = manifest or os.path.join(path, MANIFEST_NAME)
    if os.path.exists(manifest_path):
        try:
            with open(manifest_path, "r", encoding="utf-8") as f:
                return json.load(f)
        except json.JSONDecodeError as e:
            raise FrameFolderError(f"Manifest {manifest_path} is not valid JSON: {e}")
    if manifest is not None:
        raise FrameFolderError(f"Manifest {manifest_path} not found")
    # no manifest: every PNG in name order
    frames = sorted(os.path.basename(p) for p in glob.glob(os.path.join(path, "*.png")))
    return {"frames": frames}


def load_frame_folder(path: str, manifest: Union[None, str, Dict, List[str]] = None) -> Sequence:
    """Decode the frames listed by the manifest, in manifest order, to [0, 1] floats."""
    if not os.path.isdir(path):
        raise FileNotFoundError(f"Frame folder not found: {path}")
    info = _read_manifest(path, manifest)
    names = info.get("frames") or []
    if not names:
        raise FrameFolderError(f"No frames listed for folder {path}")

    frames = []
    shape = None
    for name in names:
        file_path = os.path.join(path, name)
        if not os.path.exists(file_path):
            raise FrameFolderError(f"Missing frame file: {file_path}")
        with Image.open(file_path) as img:
            array = np.array(img.convert("L") if img.mode in ("L", "I", "I;16") else img.convert("RGB"))
        if array.ndim == 2:
            array = array[:, :, None]
        tensor = from_uint8(torch.from_numpy(array).permute(2, 0, 1).contiguous())
        if shape is None:
            shape = tuple(tensor.shape)
        elif tuple(tensor.shape) != shape:
            raise FrameFolderError(
                f"Frame {file_path} has shape {tuple(tensor.shape)}, expected {shape}"
            )
        frames.append(tensor)

    logger.info("Loaded %d frames from %s", len(frames), path)
    return Sequence(torch.stack(frames, dim=0), info.get("frame_rate_hint"))
