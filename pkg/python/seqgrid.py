"""
Sequence <-> grid-image tensor algebra.

Frames are float tensors in [0, 1] shaped [C, H, W]. A grid image packs
K*K subsampled frames row-major into a single [C, K*h, K*w] tensor, so
element (i, j) holds sequence index start_index + i*K + j.
"""
import logging
from dataclasses import dataclass, replace
from typing import Dict, List, Optional, Tuple, Union

import torch
from einops import rearrange, repeat

logger = logging.getLogger(__name__)
logger.addHandler(logging.NullHandler())

CATMULL_ROM_A = -0.5
MASK_KINDS = ("step1_m", "step2_m_prev", "step2_m_current", "step2_m_next")


@dataclass
class Sequence:
    """An ordered stack of frames [N, C, H, W] with values in [0, 1]."""

    frames: torch.Tensor
    frame_rate_hint: Optional[float] = None

    def __post_init__(self):
        if self.frames.dim() != 4:
            raise ValueError(f"Sequence frames must be [N, C, H, W], got shape {tuple(self.frames.shape)}")
        n, c, h, w = self.frames.shape
        if n < 1:
            raise ValueError("Sequence must hold at least one frame")
        if c not in (1, 3):
            raise ValueError(f"Sequence frames must have 1 or 3 channels, got {c}")
        if h < 1 or w < 1:
            raise ValueError(f"Invalid frame size {h}x{w}")
        if not torch.isfinite(self.frames).all():
            raise ValueError("Sequence frames contain non-finite values")
        if self.frame_rate_hint is not None and self.frame_rate_hint <= 0:
            raise ValueError("frame_rate_hint must be positive")

    def __len__(self):
        return self.frames.shape[0]

    @property
    def channels(self) -> int:
        return self.frames.shape[1]

    @property
    def height(self) -> int:
        return self.frames.shape[2]

    @property
    def width(self) -> int:
        return self.frames.shape[3]

    def frame(self, index: int) -> torch.Tensor:
        return self.frames[index]

    @classmethod
    def from_frames(cls, frames: List[torch.Tensor], frame_rate_hint: Optional[float] = None) -> "Sequence":
        return cls(torch.stack(list(frames), dim=0), frame_rate_hint)


@dataclass(frozen=True)
class GridLayout:
    """K x K grid of element_h x element_w frames with r control rows."""

    K: int
    r: int
    element_h: int
    element_w: int

    def __post_init__(self):
        if self.K < 1:
            raise ValueError(f"K must be positive, got {self.K}")
        if not 0 <= self.r <= self.K:
            raise ValueError(f"control rows r must lie in [0, K={self.K}], got {self.r}")
        if self.element_h < 1 or self.element_w < 1:
            raise ValueError(f"Invalid element size {self.element_h}x{self.element_w}")

    @property
    def grid_h(self) -> int:
        return self.K * self.element_h

    @property
    def grid_w(self) -> int:
        return self.K * self.element_w

    @property
    def num_elements(self) -> int:
        return self.K * self.K

    def with_rows(self, r: int) -> "GridLayout":
        return replace(self, r=r)

    def scaled(self, factor: int) -> "GridLayout":
        """Layout of the same grid at a coarser spatial scale (latent space)."""
        if factor < 1 or self.element_h % factor or self.element_w % factor:
            raise ValueError(
                f"Element size {self.element_h}x{self.element_w} is not divisible by scale factor {factor}"
            )
        return replace(self, element_h=self.element_h // factor, element_w=self.element_w // factor)

    @classmethod
    def for_frames(cls, K: int, r: int, height: int, width: int) -> "GridLayout":
        """Layout whose grid has the spatial size of the source frames."""
        if height % K or width % K:
            raise ValueError(f"Frame size {height}x{width} is not divisible by K={K}")
        return cls(K=K, r=r, element_h=height // K, element_w=width // K)


@dataclass
class GridImage:
    pixels: torch.Tensor
    layout: GridLayout
    start_index: int = 0

    def __post_init__(self):
        expected = (self.layout.grid_h, self.layout.grid_w)
        if self.pixels.dim() != 3 or tuple(self.pixels.shape[1:]) != expected:
            raise ValueError(
                f"Grid pixels must be [C, {expected[0]}, {expected[1]}], got {tuple(self.pixels.shape)}"
            )
        if not torch.isfinite(self.pixels).all():
            raise ValueError("Grid pixels contain non-finite values")

    def frame_index(self, i: int, j: int) -> int:
        return self.start_index + i * self.layout.K + j

    def element(self, i: int, j: int) -> torch.Tensor:
        eh, ew = self.layout.element_h, self.layout.element_w
        return self.pixels[:, i * eh:(i + 1) * eh, j * ew:(j + 1) * ew]


@dataclass
class RowMask:
    values: torch.Tensor  # [K, K], entries in {0, 1}
    kind: str

    def __post_init__(self):
        if self.kind not in MASK_KINDS:
            raise ValueError(f"Unknown mask kind '{self.kind}'")
        v = self.values
        if v.dim() != 2 or v.shape[0] != v.shape[1]:
            raise ValueError(f"Row mask must be square [K, K], got {tuple(v.shape)}")
        if not ((v == 0) | (v == 1)).all():
            raise ValueError("Row mask entries must be 0 or 1")
        if not (v == v[:, :1]).all():
            raise ValueError("Row mask must be constant within each row")

    def expand(self, layout: GridLayout) -> torch.Tensor:
        """Broadcastable [1, K*h, K*w] pixel mask for the given layout."""
        if self.values.shape[0] != layout.K:
            raise ValueError(f"Mask is {self.values.shape[0]}x{self.values.shape[0]} but layout has K={layout.K}")
        pixels = repeat(self.values, "i j -> (i h) (j w)", h=layout.element_h, w=layout.element_w)
        return pixels.unsqueeze(0)


def _catmull_rom(x: torch.Tensor, a: float = CATMULL_ROM_A) -> torch.Tensor:
    x = x.abs()
    x2, x3 = x * x, x * x * x
    inner = (a + 2.0) * x3 - (a + 3.0) * x2 + 1.0
    outer = a * x3 - 5.0 * a * x2 + 8.0 * a * x - 4.0 * a
    return torch.where(x <= 1.0, inner, torch.where(x < 2.0, outer, torch.zeros_like(x)))


def cubic_weights(in_size: int, out_size: int) -> torch.Tensor:
    """
    Separable bicubic resampling matrix [out_size, in_size].

    Half-pixel centre alignment, four taps per output sample, taps outside
    the source are clamped to the border sample.
    """
    scale = in_size / out_size
    dst = torch.arange(out_size, dtype=torch.float64)
    src = (dst + 0.5) * scale - 0.5
    base = torch.floor(src)
    frac = src - base
    weights = torch.zeros(out_size, in_size, dtype=torch.float64)
    rows = torch.arange(out_size)
    for k in (-1, 0, 1, 2):
        idx = (base + k).clamp(0, in_size - 1).long()
        weights.index_put_((rows, idx), _catmull_rom(frac - k), accumulate=True)
    return weights


def resample_frame(frame: torch.Tensor, out_h: int, out_w: int) -> torch.Tensor:
    """Bicubic (Catmull-Rom, a=-0.5) resize of a [C, H, W] frame."""
    if out_h < 1 or out_w < 1:
        raise ValueError(f"Output size must be positive, got {out_h}x{out_w}")
    if frame.dim() != 3:
        raise ValueError(f"Expected a [C, H, W] frame, got shape {tuple(frame.shape)}")
    if not torch.isfinite(frame).all():
        raise ValueError("Cannot resample a frame with non-finite values")
    _, h, w = frame.shape
    if (h, w) == (out_h, out_w):
        return frame.clone()

    wy = cubic_weights(h, out_h)
    wx = cubic_weights(w, out_w)
    out = torch.einsum("oh,chw,pw->cop", wy, frame.to(torch.float64), wx)
    if frame.min() >= 0 and frame.max() <= 1:
        out = out.clamp(0.0, 1.0)
    return out.to(frame.dtype)


def to_three_channels(frame: torch.Tensor) -> torch.Tensor:
    if frame.shape[0] == 3:
        return frame
    if frame.shape[0] == 1:
        return frame.expand(3, -1, -1).clone()
    raise ValueError(f"Frames must have 1 or 3 channels, got {frame.shape[0]}")


def collapse_to_gray(frame: torch.Tensor) -> torch.Tensor:
    """Average channels of a [C, H, W] frame into a single channel."""
    return frame.mean(dim=0, keepdim=True)


def to_uint8(values: torch.Tensor) -> torch.Tensor:
    # round half up
    return torch.floor(values.clamp(0.0, 1.0) * 255.0 + 0.5).to(torch.uint8)


def from_uint8(values: torch.Tensor) -> torch.Tensor:
    return values.to(torch.float32) / 255.0


def pack_grid(frames: List[torch.Tensor], layout: GridLayout, start_index: int = 0) -> GridImage:
    """Pack K*K frames row-major into a GridImage; gray frames become 3-channel."""
    expected = layout.num_elements
    if len(frames) != expected:
        raise ValueError(f"pack_grid needs exactly K^2={expected} frames, got {len(frames)}")
    shape = (layout.element_h, layout.element_w)
    prepared = []
    for index, frame in enumerate(frames):
        if frame.dim() != 3 or tuple(frame.shape[1:]) != shape:
            raise ValueError(
                f"Frame {index} has shape {tuple(frame.shape)}, expected [C, {shape[0]}, {shape[1]}]"
            )
        prepared.append(to_three_channels(frame))
    channels = {f.shape[0] for f in prepared}
    if len(channels) != 1:
        raise ValueError(f"Frames have mismatched channel counts {sorted(channels)}")
    stacked = torch.stack(prepared, dim=0)
    pixels = rearrange(stacked, "(ki kj) c h w -> c (ki h) (kj w)", ki=layout.K, kj=layout.K)
    return GridImage(pixels=pixels, layout=layout, start_index=start_index)


def unpack_grid(grid: Union[GridImage, torch.Tensor], K: Optional[int] = None) -> List[torch.Tensor]:
    """Split a grid into its K*K frames in sequential order."""
    if isinstance(grid, GridImage):
        pixels, K = grid.pixels, grid.layout.K
    else:
        pixels = grid
        if K is None:
            raise ValueError("K is required when unpacking a raw tensor")
    _, gh, gw = pixels.shape
    if gh % K or gw % K:
        raise ValueError(f"Grid of size {gh}x{gw} is not divisible by K={K}")
    frames = rearrange(pixels, "c (ki h) (kj w) -> (ki kj) c h w", ki=K, kj=K)
    return list(frames.unbind(0))


def extract_training_grids(seq: Sequence, layout: GridLayout, stride: int = 1) -> List[GridImage]:
    """Slide a K^2-frame window over a sequence and pack each window into a grid."""
    K2 = layout.num_elements
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    if len(seq) < K2:
        raise ValueError(f"Sequence of {len(seq)} frames yields no grids: need at least K^2={K2} frames")
    if (layout.element_h * layout.K, layout.element_w * layout.K) != (seq.height, seq.width):
        raise ValueError(
            f"Layout elements {layout.element_h}x{layout.element_w} do not match frames "
            f"{seq.height}x{seq.width} / K={layout.K}"
        )

    small = [resample_frame(f, layout.element_h, layout.element_w) for f in seq.frames]
    grids = []
    for start in range(0, len(seq) - K2 + 1, stride):
        grids.append(pack_grid(small[start:start + K2], layout, start_index=start))
    logger.debug("Extracted %d grids from %d frames (stride %d)", len(grids), len(seq), stride)
    return grids


def row_shift(grid_like: torch.Tensor, layout: GridLayout) -> torch.Tensor:
    """Move the last r element rows to the top; vacated rows are zero."""
    if layout.r < 1:
        raise ValueError("row_shift needs at least one control row (r >= 1)")
    eh, K, r = layout.element_h, layout.K, layout.r
    if grid_like.shape[-2] != K * eh:
        raise ValueError(f"Tensor height {grid_like.shape[-2]} does not match grid height {K * eh}")
    shifted = torch.zeros_like(grid_like)
    shifted[..., : r * eh, :] = grid_like[..., (K - r) * eh:, :]
    return shifted


def _row_mask(K: int, rows, kind: str) -> RowMask:
    values = torch.zeros(K, K)
    values[list(rows), :] = 1.0
    return RowMask(values=values, kind=kind)


def make_masks(layout: GridLayout, mode: str) -> Union[RowMask, Tuple[RowMask, RowMask, RowMask]]:
    K, r = layout.K, layout.r
    if mode == "step1":
        if not 0 < r < K:
            raise ValueError(f"step1 mask needs 0 < r < K, got r={r}, K={K}")
        return _row_mask(K, range(r), "step1_m")
    if mode == "step2":
        if K < 3:
            raise ValueError(f"step2 masks need K >= 3, got K={K}")
        return (
            _row_mask(K, [0], "step2_m_prev"),
            _row_mask(K, range(1, K - 1), "step2_m_current"),
            _row_mask(K, [K - 1], "step2_m_next"),
        )
    raise ValueError(f"Unknown mask mode '{mode}' (expected 'step1' or 'step2')")


def assemble_grid_sequence(grids: List[GridImage]) -> Tuple[int, torch.Tensor]:
    """
    Unroll possibly overlapping grids back into one frame stack.

    Returns (first_index, frames) where frames covers every sequence index
    from first_index to the last index any grid holds. Indices held by
    several grids are averaged.
    """
    if not grids:
        raise ValueError("No grids to assemble")
    first = min(g.start_index for g in grids)
    last = max(g.start_index + g.layout.num_elements - 1 for g in grids)
    sums: Dict[int, torch.Tensor] = {}
    counts: Dict[int, int] = {}
    for grid in grids:
        for offset, frame in enumerate(unpack_grid(grid)):
            index = grid.start_index + offset
            sums[index] = sums[index] + frame if index in sums else frame.clone()
            counts[index] = counts.get(index, 0) + 1
    missing = [i for i in range(first, last + 1) if i not in sums]
    if missing:
        raise ValueError(f"Grids leave sequence indices uncovered: {missing[:5]}")
    frames = torch.stack([sums[i] / counts[i] for i in range(first, last + 1)], dim=0)
    return first, frames


def window_starts(num_frames: int, K: int) -> List[int]:
    """Non-overlapping K^2 windows plus one tail window aligned to the end."""
    K2 = K * K
    if num_frames < K2:
        raise ValueError(f"Need at least K^2={K2} frames, got {num_frames}")
    starts = list(range(0, num_frames - K2 + 1, K2))
    if starts[-1] + K2 < num_frames:
        starts.append(num_frames - K2)
    return starts
