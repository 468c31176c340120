"""
Unit tests for seqgrid.py
"""
import math
import os
import sys
import unittest

import torch

# Add parent directory to path to import modules
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from seqgrid import (
    GridImage,
    GridLayout,
    RowMask,
    Sequence,
    assemble_grid_sequence,
    collapse_to_gray,
    cubic_weights,
    extract_training_grids,
    from_uint8,
    make_masks,
    pack_grid,
    resample_frame,
    row_shift,
    to_uint8,
    unpack_grid,
    window_starts,
)
from tests.test_data import frame_index_of, indexed_sequence, tiny_layout


class TestSequenceAndLayout(unittest.TestCase):
    """Validation of the basic value types"""

    def test_sequence_rejects_bad_shapes(self):
        """Frames must be [N, C, H, W] with 1 or 3 channels and finite values"""
        with self.assertRaises(ValueError):
            Sequence(torch.zeros(3, 4, 4))
        with self.assertRaises(ValueError):
            Sequence(torch.zeros(2, 2, 4, 4))
        frames = torch.zeros(2, 3, 4, 4)
        frames[1, 0, 0, 0] = float("nan")
        with self.assertRaises(ValueError):
            Sequence(frames)

    def test_sequence_properties(self):
        seq = Sequence(torch.zeros(5, 1, 6, 8))
        self.assertEqual(len(seq), 5)
        self.assertEqual((seq.channels, seq.height, seq.width), (1, 6, 8))

    def test_layout_for_frames(self):
        """64x64 frames with K=4 give 16x16 elements"""
        layout = GridLayout.for_frames(4, 3, 64, 64)
        self.assertEqual((layout.element_h, layout.element_w), (16, 16))
        self.assertEqual((layout.grid_h, layout.grid_w), (64, 64))
        self.assertEqual(layout.num_elements, 16)
        with self.assertRaises(ValueError):
            GridLayout.for_frames(3, 1, 64, 64)

    def test_layout_scaled(self):
        layout = GridLayout.for_frames(4, 3, 64, 64)
        self.assertEqual(layout.scaled(2).element_h, 8)
        with self.assertRaises(ValueError):
            layout.scaled(3)

    def test_layout_rejects_invalid_rows(self):
        with self.assertRaises(ValueError):
            GridLayout(K=4, r=5, element_h=4, element_w=4)


class TestPackUnpack(unittest.TestCase):
    """Grid packing and unpacking"""

    def test_round_trip_is_exact(self):
        """unpack(pack(frames)) returns the frames unchanged"""
        seq = indexed_sequence(16)
        grid = pack_grid(list(seq.frames), tiny_layout())
        frames = unpack_grid(grid)
        self.assertEqual(len(frames), 16)
        for original, restored in zip(seq.frames, frames):
            self.assertTrue(torch.equal(original, restored))

    def test_elements_are_row_major(self):
        """Element (i, j) holds frame start + i*K + j"""
        seq = indexed_sequence(16)
        grid = pack_grid(list(seq.frames), tiny_layout(), start_index=7)
        for i in range(4):
            for j in range(4):
                self.assertEqual(frame_index_of(grid.element(i, j)), i * 4 + j)
                self.assertEqual(grid.frame_index(i, j), 7 + i * 4 + j)
    def test_round_trip_for_every_grid_size(self):
        """pack/unpack are mutual inverses for K in {1, 2, 4, 8}, also on non-square elements"""
        generator = torch.Generator().manual_seed(3)
        for K in (1, 2, 4, 8):
            with self.subTest(K=K):
                layout = GridLayout(K=K, r=0, element_h=3, element_w=5)
                frames = list(torch.rand((K * K, 3, 3, 5), generator=generator))
                grid = pack_grid(frames, layout)
                self.assertEqual(tuple(grid.pixels.shape), (3, 3 * K, 5 * K))
                restored = unpack_grid(grid)
                self.assertEqual(len(restored), K * K)
                for original, back in zip(frames, restored):
                    self.assertTrue(torch.equal(original, back))
                repacked = pack_grid(restored, layout)
                self.assertTrue(torch.equal(repacked.pixels, grid.pixels))

    def test_unpack_is_a_pixel_permutation(self):
        """Unpacking an all-distinct grid redistributes its pixels without loss or duplication"""
        n = 3 * 16 * 16
        pixels = torch.randperm(n, generator=torch.Generator().manual_seed(0)).to(torch.float32).reshape(3, 16, 16)
        frames = unpack_grid(GridImage(pixels=pixels, layout=tiny_layout()))
        flat = torch.cat([f.reshape(-1) for f in frames])
        self.assertEqual(flat.numel(), n)
        self.assertTrue(torch.equal(flat.sort().values, torch.arange(n, dtype=torch.float32)))

    def test_pack_wrong_count(self):
        seq = indexed_sequence(15)
        with self.assertRaises(ValueError):
            pack_grid(list(seq.frames), tiny_layout())

    def test_pack_wrong_frame_size(self):
        seq = indexed_sequence(16, size=5)
        with self.assertRaises(ValueError):
            pack_grid(list(seq.frames), tiny_layout())

    def test_gray_frames_become_rgb(self):
        """Single-channel frames are replicated to three channels"""
        seq = indexed_sequence(16, channels=1)
        grid = pack_grid(list(seq.frames), tiny_layout())
        self.assertEqual(grid.pixels.shape[0], 3)
        self.assertTrue(torch.equal(grid.pixels[0], grid.pixels[2]))

    def test_unpack_raw_tensor_needs_k(self):
        with self.assertRaises(ValueError):
            unpack_grid(torch.zeros(3, 16, 16))
        self.assertEqual(len(unpack_grid(torch.zeros(3, 16, 16), K=2)), 4)

    def test_grid_image_rejects_non_finite(self):
        pixels = torch.zeros(3, 16, 16)
        pixels[0, 0, 0] = float("inf")
        with self.assertRaises(ValueError):
            GridImage(pixels=pixels, layout=tiny_layout())


class TestTrainingGrids(unittest.TestCase):
    """Sliding-window grid extraction"""

    def setUp(self):
        self.seq = indexed_sequence(20, size=16)
        self.layout = GridLayout.for_frames(4, 3, 16, 16)

    def test_window_count_and_starts(self):
        """20 frames give 5 windows at stride 1 and 3 at stride 2"""
        grids = extract_training_grids(self.seq, self.layout, stride=1)
        self.assertEqual([g.start_index for g in grids], [0, 1, 2, 3, 4])
        grids = extract_training_grids(self.seq, self.layout, stride=2)
        self.assertEqual([g.start_index for g in grids], [0, 2, 4])
        self.assertEqual(tuple(grids[0].pixels.shape), (3, 16, 16))
    def test_elements_come_from_their_frames(self):
        """Element (i, j) of each window is the downsample of frame start + i*K + j"""
        seq = Sequence(torch.rand((20, 3, 16, 16), generator=torch.Generator().manual_seed(4)))
        for g in extract_training_grids(seq, self.layout, stride=3):
            for i in range(4):
                for j in range(4):
                    expected = resample_frame(seq.frames[g.start_index + i * 4 + j], 4, 4)
                    self.assertTrue(torch.equal(g.element(i, j), expected))

    def test_exact_window_counts(self):
        self.assertEqual(len(extract_training_grids(indexed_sequence(16, size=16), self.layout)), 1)
        grids = extract_training_grids(indexed_sequence(17, size=16), self.layout)
        self.assertEqual([g.start_index for g in grids], [0, 1])

    def test_short_sequence(self):
        seq = indexed_sequence(10, size=16)
        with self.assertRaises(ValueError):
            extract_training_grids(seq, self.layout)

    def test_mismatched_layout(self):
        layout = GridLayout.for_frames(4, 3, 20, 20)
        with self.assertRaises(ValueError):
            extract_training_grids(self.seq, layout)

    def test_invalid_stride(self):
        with self.assertRaises(ValueError):
            extract_training_grids(self.seq, self.layout, stride=0)


class TestRowShiftAndMasks(unittest.TestCase):
    """Row shifting and mask construction"""

    def test_row_shift_moves_last_rows_to_top(self):
        layout = tiny_layout(K=4, r=3)
        grid = torch.rand(3, 16, 16)
        shifted = row_shift(grid, layout)
        self.assertTrue(torch.equal(shifted[:, :12], grid[:, 4:]))
        self.assertTrue(torch.equal(shifted[:, 12:], torch.zeros(3, 4, 16)))

    def test_row_shift_single_row(self):
        layout = tiny_layout(K=4, r=1)
        grid = torch.rand(3, 16, 16)
        shifted = row_shift(grid, layout)
        self.assertTrue(torch.equal(shifted[:, :4], grid[:, 12:]))
        self.assertEqual(float(shifted[:, 4:].abs().sum()), 0.0)
    def test_row_shift_full_window_is_identity(self):
        for K in (1, 2, 4):
            with self.subTest(K=K):
                layout = tiny_layout(K=K, r=K)
                grid = torch.rand(3, 4 * K, 4 * K)
                self.assertTrue(torch.equal(row_shift(grid, layout), grid))

    def test_two_row_shifts_under_the_mask(self):
        """m * row_shift(row_shift(x)) keeps row i = x row 2(K-r)+i where that row exists, else zero"""
        for K, r in ((2, 1), (4, 3), (4, 2), (8, 4), (8, 7)):
            with self.subTest(K=K, r=r):
                layout = tiny_layout(K=K, r=r, element=2)
                # every element row carries its own index as a value
                labels = torch.arange(1, K + 1, dtype=torch.float32).repeat_interleave(2)
                x = labels.view(1, -1, 1).expand(1, 2 * K, 2 * K).clone()
                mask = make_masks(layout, "step1").expand(layout)
                out = mask * row_shift(row_shift(x, layout), layout)
                for i in range(K):
                    source = 2 * (K - r) + i
                    expected = float(source + 1) if i < r and source < K else 0.0
                    self.assertEqual(float(out[0, 2 * i].unique().item()), expected)

    def test_row_shift_needs_rows(self):
        with self.assertRaises(ValueError):
            row_shift(torch.zeros(3, 16, 16), tiny_layout(r=0))

    def test_row_shift_height_mismatch(self):
        with self.assertRaises(ValueError):
            row_shift(torch.zeros(3, 12, 16), tiny_layout())

    def test_step1_mask(self):
        mask = make_masks(tiny_layout(K=4, r=3), "step1")
        self.assertEqual(mask.values[:, 0].tolist(), [1.0, 1.0, 1.0, 0.0])

    def test_step2_masks_partition_grid(self):
        """prev + current + next covers every element exactly once"""
        for K in (3, 4, 8):
            prev, current, nxt = make_masks(tiny_layout(K=K, r=1), "step2")
            total = prev.values + current.values + nxt.values
            self.assertTrue(torch.equal(total, torch.ones(K, K)))
            self.assertEqual(float(prev.values[0].sum()), K)
            self.assertEqual(float(nxt.values[K - 1].sum()), K)

    def test_mask_errors(self):
        with self.assertRaises(ValueError):
            make_masks(tiny_layout(K=2, r=1), "step2")
        with self.assertRaises(ValueError):
            make_masks(tiny_layout(K=4, r=0), "step1")
        with self.assertRaises(ValueError):
            make_masks(tiny_layout(), "step3")

    def test_mask_expand(self):
        layout = tiny_layout(K=4, r=2)
        pixels = make_masks(layout, "step1").expand(layout)
        self.assertEqual(tuple(pixels.shape), (1, 16, 16))
        self.assertEqual(float(pixels[0, :8].min()), 1.0)
        self.assertEqual(float(pixels[0, 8:].max()), 0.0)

    def test_row_mask_validation(self):
        with self.assertRaises(ValueError):
            RowMask(values=torch.full((2, 2), 0.5), kind="step1_m")
        with self.assertRaises(ValueError):
            RowMask(values=torch.tensor([[1.0, 0.0], [0.0, 0.0]]), kind="step1_m")


class TestResampling(unittest.TestCase):
    """Bicubic resampling and 8-bit conversion"""

    def test_weights_rows_sum_to_one(self):
        for n_in, n_out in ((8, 16), (16, 4), (5, 7)):
            weights = cubic_weights(n_in, n_out)
            self.assertTrue(torch.allclose(weights.sum(dim=1), torch.ones(n_out, dtype=torch.float64)))

    def test_same_size_weights_are_identity(self):
        self.assertTrue(torch.allclose(cubic_weights(8, 8), torch.eye(8, dtype=torch.float64)))

    def test_constant_frame_stays_constant(self):
        frame = torch.full((3, 8, 8), 0.3)
        for size in (4, 16, 11):
            out = resample_frame(frame, size, size)
            self.assertEqual(tuple(out.shape), (3, size, size))
            self.assertTrue(torch.allclose(out, torch.full_like(out, 0.3), atol=1e-6))

    def test_same_size_returns_copy(self):
        frame = torch.rand(3, 8, 8)
        out = resample_frame(frame, 8, 8)
        self.assertTrue(torch.equal(out, frame))
        out[0, 0, 0] = 5.0
        self.assertNotEqual(float(frame[0, 0, 0]), 5.0)

    def test_unit_range_is_preserved(self):
        frame = torch.zeros(1, 8, 8)
        frame[:, :, 4:] = 1.0
        out = resample_frame(frame, 16, 16)
        self.assertGreaterEqual(float(out.min()), 0.0)
        self.assertLessEqual(float(out.max()), 1.0)
    def test_matches_direct_convolution(self):
        """An 8x8 horizontal ramp downsampled to 4x4 agrees with a loop over kernel taps"""
        def keys(x, a=-0.5):
            x = abs(x)
            if x <= 1:
                return (a + 2) * x ** 3 - (a + 3) * x ** 2 + 1
            if x < 2:
                return a * x ** 3 - 5 * a * x ** 2 + 8 * a * x - 4 * a
            return 0.0

        row = [j / 7 for j in range(8)]
        expected = []
        for o in range(4):
            s = (o + 0.5) * 2 - 0.5
            base = math.floor(s)
            value = sum(keys(s - k) * row[min(max(k, 0), 7)] for k in range(base - 1, base + 3))
            expected.append(min(max(value, 0.0), 1.0))

        frame = torch.tensor(row).expand(1, 8, 8).clone()
        out = resample_frame(frame, 4, 4)
        for y in range(4):
            for o in range(4):
                self.assertAlmostEqual(float(out[0, y, o]), expected[o], delta=1e-6)

    def test_down_then_up_keeps_a_smooth_ramp(self):
        """Away from the clamped borders a linear ramp survives 32 -> 16 -> 32 within 1e-3"""
        ramp = (torch.arange(32, dtype=torch.float32) / 31).expand(3, 32, 32).clone()
        back = resample_frame(resample_frame(ramp, 16, 16), 32, 32)
        interior = (back - ramp)[:, 5:27, 5:27]
        self.assertLess(float(interior.abs().max()), 1e-3)

    def test_resample_rejects_non_finite(self):
        frame = torch.zeros(3, 4, 4)
        frame[0, 0, 0] = float("nan")
        with self.assertRaises(ValueError):
            resample_frame(frame, 8, 8)

    def test_uint8_conversion(self):
        values = torch.tensor([0.0, 0.2, 1.0, 1.5, -0.1])
        self.assertEqual(to_uint8(values).tolist(), [0, 51, 255, 255, 0])
        x = torch.rand(3, 8, 8)
        self.assertLessEqual(float((from_uint8(to_uint8(x)) - x).abs().max()), 0.5 / 255 + 1e-6)

    def test_collapse_to_gray(self):
        frame = torch.stack([torch.full((2, 2), 0.0), torch.full((2, 2), 0.3), torch.full((2, 2), 0.6)])
        gray = collapse_to_gray(frame)
        self.assertEqual(tuple(gray.shape), (1, 2, 2))
        self.assertTrue(torch.allclose(gray, torch.full((1, 2, 2), 0.3)))


class TestAssembly(unittest.TestCase):
    """Restitching overlapping grids"""

    def test_window_starts(self):
        self.assertEqual(window_starts(32, 4), [0, 16])
        self.assertEqual(window_starts(20, 4), [0, 4])
        self.assertEqual(window_starts(10, 2), [0, 4, 6])
        with self.assertRaises(ValueError):
            window_starts(15, 4)

    def test_overlapping_windows_reassemble_exactly(self):
        seq = indexed_sequence(10)
        layout = tiny_layout(K=2, r=1)
        grids = [pack_grid(list(seq.frames[s:s + 4]), layout, start_index=s) for s in window_starts(10, 2)]
        first, frames = assemble_grid_sequence(grids)
        self.assertEqual(first, 0)
        self.assertTrue(torch.equal(frames, seq.frames))

    def test_overlaps_are_averaged(self):
        layout = tiny_layout(K=2, r=1)
        a = pack_grid([torch.zeros(3, 4, 4)] * 4, layout, start_index=0)
        b = pack_grid([torch.ones(3, 4, 4)] * 4, layout, start_index=2)
        _, frames = assemble_grid_sequence([a, b])
        self.assertEqual(frames.shape[0], 6)
        self.assertEqual([float(f.mean()) for f in frames], [0.0, 0.0, 0.5, 0.5, 1.0, 1.0])

    def test_uncovered_indices(self):
        layout = tiny_layout(K=2, r=1)
        a = pack_grid([torch.zeros(3, 4, 4)] * 4, layout, start_index=0)
        b = pack_grid([torch.zeros(3, 4, 4)] * 4, layout, start_index=8)
        with self.assertRaises(ValueError):
            assemble_grid_sequence([a, b])
        with self.assertRaises(ValueError):
            assemble_grid_sequence([])


if __name__ == '__main__':
    unittest.main()
