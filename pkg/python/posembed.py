"""
Fixed sine/cosine positional embeddings for grid images.

Four schemes are built per patch of a grid image:
  2d       - patch row / patch column over the whole grid
  3d_grid  - (frame index, row within frame, column within frame), each axis
             allotted floor(D/3) dims, computed in frame order and rearranged
             into grid patch order
  combined - elementwise sum of the two, halved so entries stay in [-1, 1]
  concat   - 2d at width D//2 followed by 3d_grid at width D - D//2
"""
import logging
from dataclasses import dataclass
from typing import Tuple

import numpy as np
from einops import rearrange

from seqgrid import GridLayout

logger = logging.getLogger(__name__)
logger.addHandler(logging.NullHandler())

SCHEMES = ("2d", "3d_grid", "combined", "concat")
FREQUENCY_BASE = 10000.0


@dataclass
class PosEmbedTable:
    values: np.ndarray  # [num_patches, D]
    scheme: str
    patch_grid: Tuple[int, int]
    D: int

    @property
    def num_patches(self) -> int:
        return self.values.shape[0]


def sincos_1d(p, d: int) -> np.ndarray:
    """
    Embed position(s) p into d dims: d/2 sines followed by d/2 cosines.

    Accepts a scalar or an array of positions; returns [d] or [M, d].
    """
    if d < 2 or d % 2:
        raise ValueError(f"sincos_1d needs an even width >= 2, got {d}")
    omega = np.arange(d // 2, dtype=np.float64)
    omega /= d / 2.0
    omega = 1.0 / FREQUENCY_BASE ** omega

    pos = np.asarray(p, dtype=np.float64)
    out = np.einsum("m,d->md", pos.reshape(-1), omega)
    emb = np.concatenate([np.sin(out), np.cos(out)], axis=1)
    return emb[0] if pos.ndim == 0 else emb


def _axis_embed(pos: np.ndarray, d: int) -> np.ndarray:
    # odd widths get one zero column after the sin/cos pairs
    if d == 0:
        return np.zeros((pos.size, 0))
    even = d - (d % 2)
    parts = [sincos_1d(pos, even)] if even else []
    if d % 2:
        parts.append(np.zeros((pos.size, 1)))
    return np.concatenate(parts, axis=1)


def _patch_counts(layout: GridLayout, patch: int) -> Tuple[int, int]:
    if layout.element_h % patch or layout.element_w % patch:
        raise ValueError(
            f"Patch size {patch} does not divide grid elements of {layout.element_h}x{layout.element_w}"
        )
    return layout.element_h // patch, layout.element_w // patch


def embed_2d(layout: GridLayout, patch: int, D: int) -> np.ndarray:
    if layout.grid_h % patch or layout.grid_w % patch:
        raise ValueError(f"Patch size {patch} does not divide grid {layout.grid_h}x{layout.grid_w}")
    ph, pw = layout.grid_h // patch, layout.grid_w // patch
    rows, cols = np.meshgrid(np.arange(ph), np.arange(pw), indexing="ij")
    half = D // 2
    emb_row = _axis_embed(rows.reshape(-1), half)
    emb_col = _axis_embed(cols.reshape(-1), D - half)
    return np.concatenate([emb_row, emb_col], axis=1)


def embed_3d_frame_order(layout: GridLayout, patch: int, D: int) -> np.ndarray:
    """3D table in (frame, row-in-frame, column-in-frame) order: [K^2, eh_p, ew_p, D]."""
    eh_p, ew_p = _patch_counts(layout, patch)
    third = D // 3
    frames, rows, cols = np.meshgrid(
        np.arange(layout.num_elements), np.arange(eh_p), np.arange(ew_p), indexing="ij"
    )
    parts = [
        _axis_embed(frames.reshape(-1), third),
        _axis_embed(rows.reshape(-1), third),
        _axis_embed(cols.reshape(-1), third),
        np.zeros((frames.size, D - 3 * third)),
    ]
    table = np.concatenate(parts, axis=1)
    return table.reshape(layout.num_elements, eh_p, ew_p, D)


def frame_to_grid_order(table: np.ndarray, K: int) -> np.ndarray:
    """[K^2, eh_p, ew_p, D] frame-ordered table -> [num_patches, D] in grid patch order."""
    return rearrange(table, "(ki kj) h w d -> (ki h kj w) d", ki=K, kj=K)


def grid_to_frame_order(values: np.ndarray, K: int, eh_p: int, ew_p: int) -> np.ndarray:
    return rearrange(values, "(ki h kj w) d -> (ki kj) h w d", ki=K, kj=K, h=eh_p, w=ew_p)


def embed_3d_grid(layout: GridLayout, patch: int, D: int) -> np.ndarray:
    return frame_to_grid_order(embed_3d_frame_order(layout, patch, D), layout.K)


def build_pos_embed(layout: GridLayout, patch: int, D: int, scheme: str = "combined") -> PosEmbedTable:
    """
    [num_patches, D] table for one of SCHEMES.

    "combined" is 0.5 * (2d + 3d_grid), not the plain sum: the halving is
    deliberate and keeps every entry in [-1, 1] like the single tables.
    """
    if scheme not in SCHEMES:
        raise ValueError(f"Unknown positional embedding scheme '{scheme}', expected one of {SCHEMES}")
    if D < 6:
        raise ValueError(f"Embedding width D must be >= 6, got {D}")
    if layout.grid_h % patch or layout.grid_w % patch:
        raise ValueError(f"Patch size {patch} does not divide grid {layout.grid_h}x{layout.grid_w}")

    if scheme == "2d":
        values = embed_2d(layout, patch, D)
    elif scheme == "3d_grid":
        values = embed_3d_grid(layout, patch, D)
    elif scheme == "combined":
        values = 0.5 * (embed_2d(layout, patch, D) + embed_3d_grid(layout, patch, D))
    else:
        half = D // 2
        values = np.concatenate(
            [embed_2d(layout, patch, half), embed_3d_grid(layout, patch, D - half)], axis=1
        )

    patch_grid = (layout.grid_h // patch, layout.grid_w // patch)
    logger.debug("Built %s positional table %s for K=%d", scheme, values.shape, layout.K)
    return PosEmbedTable(values=values, scheme=scheme, patch_grid=patch_grid, D=D)
