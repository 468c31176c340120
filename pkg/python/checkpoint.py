"""
Binary model checkpoints.

Layout (all integers little-endian):
  b"GRDT"                      magic
  u32                          format version
  u32 + bytes                  config block, UTF-8 JSON {"model", "codec", "extra"}
  u32                          tensor count
  per tensor:
    u16 + bytes                name (UTF-8)
    u8                         rank
    u32 * rank                 dims
    f32 * prod(dims)           row-major data
  u32 + bytes                  schedule block, UTF-8 JSON
  32 bytes                     SHA-256 of everything above
"""
import hashlib
import json
import logging
import os
import struct
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np
import torch

from denoiser import DenoiserConfig, DenoiserModel
from diffusion import NoiseSchedule, build_schedule, respace

logger = logging.getLogger(__name__)
logger.addHandler(logging.NullHandler())

MAGIC = b"GRDT"
FORMAT_VERSION = 1
DIGEST_SIZE = 32


class CheckpointError(ValueError):
    pass


class ChecksumError(CheckpointError):
    pass


class VersionError(CheckpointError):
    pass


class FormatError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    model: DenoiserModel
    sched: NoiseSchedule
    codec: str = "identity"
    extra: Dict = field(default_factory=dict)


def _block(payload: bytes) -> bytes:
    return struct.pack("<I", len(payload)) + payload


def _json_bytes(data: Dict) -> bytes:
    return json.dumps(data, sort_keys=True).encode("utf-8")


def encode_checkpoint(model: DenoiserModel, sched: NoiseSchedule, codec: str = "identity",
                      extra: Optional[Dict] = None) -> bytes:
    parts = [MAGIC, struct.pack("<I", FORMAT_VERSION)]
    parts.append(_block(_json_bytes({"model": model.config.to_dict(), "codec": codec, "extra": extra or {}})))

    state = model.state_dict()
    parts.append(struct.pack("<I", len(state)))
    for name, tensor in state.items():
        name_bytes = name.encode("utf-8")
        data = tensor.detach().cpu().to(torch.float32).contiguous().numpy()
        parts.append(struct.pack("<H", len(name_bytes)) + name_bytes)
        parts.append(struct.pack("<B", data.ndim))
        parts.append(struct.pack(f"<{data.ndim}I", *data.shape))
        parts.append(data.astype("<f4").tobytes())

    parts.append(_block(_json_bytes(sched.to_dict())))
    body = b"".join(parts)
    return body + hashlib.sha256(body).digest()


def save_checkpoint(model: DenoiserModel, sched: NoiseSchedule, path: str, codec: str = "identity",
                    extra: Optional[Dict] = None) -> str:
    payload = encode_checkpoint(model, sched, codec, extra)
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    with open(path, "wb") as f:
        f.write(payload)
    logger.info("Saved checkpoint %s (%d bytes)", path, len(payload))
    return path


class _Reader:
    def __init__(self, data: bytes, offset: int = 0):
        self.data = data
        self.offset = offset

    def take(self, n: int) -> bytes:
        if self.offset + n > len(self.data):
            raise FormatError("Checkpoint payload ends unexpectedly")
        chunk = self.data[self.offset:self.offset + n]
        self.offset += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def json_block(self) -> Dict:
        (length,) = self.unpack("<I")
        try:
            return json.loads(self.take(length).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise FormatError(f"Malformed JSON block in checkpoint: {e}")


def _verify(data: bytes) -> bytes:
    if len(data) < len(MAGIC) + 4 + DIGEST_SIZE:
        raise ChecksumError(f"Checkpoint is truncated ({len(data)} bytes)")
    if data[:len(MAGIC)] != MAGIC:
        raise FormatError("Not a checkpoint file (bad magic)")
    body, digest = data[:-DIGEST_SIZE], data[-DIGEST_SIZE:]
    if hashlib.sha256(body).digest() != digest:
        raise ChecksumError("Checkpoint checksum mismatch: file is corrupted or truncated")
    (version,) = struct.unpack("<I", body[len(MAGIC):len(MAGIC) + 4])
    if version != FORMAT_VERSION:
        raise VersionError(f"Unsupported checkpoint version {version} (expected {FORMAT_VERSION})")
    return body


def _schedule_from_dict(info: Dict) -> NoiseSchedule:
    base = build_schedule(info["T"], info["beta_start"], info["beta_end"], info.get("sigma_choice", "posterior"))
    if "T_s" in info:
        return respace(base, info["T_s"])
    return base


def decode_checkpoint(data: bytes) -> Checkpoint:
    body = _verify(data)
    reader = _Reader(body, len(MAGIC) + 4)
    header = reader.json_block()
    (count,) = reader.unpack("<I")
    tensors: Dict[str, torch.Tensor] = {}
    for _ in range(count):
        (name_len,) = reader.unpack("<H")
        name = reader.take(name_len).decode("utf-8")
        (rank,) = reader.unpack("<B")
        dims = reader.unpack(f"<{rank}I") if rank else ()
        n = int(np.prod(dims)) if rank else 1
        values = np.frombuffer(reader.take(4 * n), dtype="<f4").astype(np.float32)
        tensors[name] = torch.from_numpy(values.reshape(dims).copy())
    sched_info = reader.json_block()
    if reader.offset != len(body):
        raise FormatError("Trailing bytes after schedule block")

    try:
        config = DenoiserConfig.from_dict(header["model"])
    except (KeyError, TypeError) as e:
        raise FormatError(f"Invalid model config block: {e}")
    model = DenoiserModel(config)
    try:
        model.load_state_dict(tensors, strict=True)
    except RuntimeError as e:
        raise FormatError(f"Tensors do not match the stored model config: {e}")
    model.eval()
    return Checkpoint(model=model, sched=_schedule_from_dict(sched_info),
                      codec=header.get("codec", "identity"), extra=header.get("extra", {}))


def read_checkpoint(path: str) -> Checkpoint:
    if not os.path.exists(path):
        raise FileNotFoundError(f"Checkpoint not found: {path}")
    with open(path, "rb") as f:
        data = f.read()
    ckpt = decode_checkpoint(data)
    logger.info("Loaded checkpoint %s", path)
    return ckpt


def load_checkpoint(path: str) -> Tuple[DenoiserModel, NoiseSchedule]:
    ckpt = read_checkpoint(path)
    return ckpt.model, ckpt.sched


def describe_checkpoint(path: str) -> Dict:
    """Header summary for the inspect command."""
    ckpt = read_checkpoint(path)
    shapes: List[Dict] = [
        {"name": name, "shape": list(t.shape)} for name, t in ckpt.model.state_dict().items()
    ]
    return {
        "model": ckpt.model.config.to_dict(),
        "codec": ckpt.codec,
        "schedule": ckpt.sched.to_dict(),
        "extra": ckpt.extra,
        "n_parameters": sum(p.numel() for p in ckpt.model.parameters()),
        "tensors": shapes,
    }
