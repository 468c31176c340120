"""
Unit tests for eval_metrics.py
"""
import json
import math
import os
import shutil
import sys
import tempfile
import unittest

import numpy as np
import pandas as pd
import torch

# Add parent directory to path to import modules
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from eval_metrics import (
    FEATURE_DIM,
    FEATURE_NAMES,
    EvalReport,
    evaluate_sequences,
    features,
    fit_gaussian,
    flicker,
    frechet_distance,
    proxy_fd,
    psnr,
    report_to_frame,
    ssim,
    write_report,
)
from seqgrid import Sequence


def noisy_frames(n: int, seed: int, size: int = 16) -> torch.Tensor:
    generator = torch.Generator().manual_seed(seed)
    return torch.rand((n, 3, size, size), generator=generator)


class TestPixelMetrics(unittest.TestCase):
    """flicker, PSNR and SSIM"""

    def test_flicker(self):
        self.assertEqual(flicker(torch.full((5, 3, 4, 4), 0.3)), 0.0)
        frames = torch.stack([torch.zeros(3, 4, 4), torch.ones(3, 4, 4)])
        self.assertAlmostEqual(flicker(Sequence(frames)), 255.0)
        with self.assertRaises(ValueError):
            flicker(torch.zeros(1, 3, 4, 4))

    def test_psnr(self):
        a = torch.zeros(3, 8, 8)
        self.assertEqual(psnr(a, a.clone()), math.inf)
        self.assertAlmostEqual(psnr(a, torch.full((3, 8, 8), 0.1)), 20.0, places=5)
        with self.assertRaises(ValueError):
            psnr(a, torch.zeros(3, 8, 9))

    def test_ssim_identical(self):
        x = noisy_frames(1, 0)[0]
        self.assertAlmostEqual(ssim(x, x.clone()), 1.0, places=7)

    def test_ssim_degrades_with_noise(self):
        x = noisy_frames(2, 1)
        noisy = (x + 0.2 * torch.randn(x.shape, generator=torch.Generator().manual_seed(2))).clamp(0, 1)
        self.assertLess(ssim(x, noisy), 0.9)
        self.assertLess(ssim(x[0], noisy[0]), 1.0)
    def test_flicker_ignores_spatial_and_time_reordering(self):
        """Rolling every frame by the same offset, or reversing time, keeps the score"""
        frames = noisy_frames(5, 20)
        base = flicker(frames)
        for shifts in ((1, 0), (0, 3), (5, 7)):
            with self.subTest(shifts=shifts):
                rolled = torch.roll(frames, shifts=shifts, dims=(2, 3))
                self.assertAlmostEqual(flicker(rolled), base, places=9)
        self.assertAlmostEqual(flicker(frames.flip(0)), base, places=9)
    def test_flicker_of_a_periodic_sequence_ignores_its_phase(self):
        """Starting a period-3 loop at any of its frames gives the same score"""
        cycle = noisy_frames(3, 28)
        scores = [flicker(torch.stack([cycle[(i + phase) % 3] for i in range(7)])) for phase in range(3)]
        for score in scores[1:]:
            self.assertAlmostEqual(score, scores[0], places=9)
        self.assertGreater(scores[0], 0.0)

    def test_psnr_matches_explicit_loop(self):
        generator = torch.Generator().manual_seed(21)
        a = torch.rand((3, 5, 7), generator=generator)
        b = torch.rand((3, 5, 7), generator=generator)
        total = 0.0
        for c in range(3):
            for y in range(5):
                for x in range(7):
                    total += (float(a[c, y, x]) - float(b[c, y, x])) ** 2
        expected = 10.0 * math.log10(1.0 / (total / (3 * 5 * 7)))
        self.assertAlmostEqual(psnr(a, b), expected, places=6)

    def test_ssim_matches_per_window_computation(self):
        """Mean SSIM over every 11x11 window position, computed one window at a time"""
        a = noisy_frames(1, 22, size=32)[0].to(torch.float64).numpy()
        b = np.clip(a + 0.1 * np.random.default_rng(23).normal(size=a.shape), 0.0, 1.0)
        k = np.arange(11) - 5.0
        g = np.exp(-k ** 2 / (2 * 1.5 ** 2))
        w = np.outer(g, g) / g.sum() ** 2
        c1, c2 = 0.01 ** 2, 0.03 ** 2
        values = []
        for c in range(a.shape[0]):
            for y in range(a.shape[1] - 10):
                for x in range(a.shape[2] - 10):
                    pa, pb = a[c, y:y + 11, x:x + 11], b[c, y:y + 11, x:x + 11]
                    mu_a, mu_b = (w * pa).sum(), (w * pb).sum()
                    var_a = (w * (pa - mu_a) ** 2).sum()
                    var_b = (w * (pb - mu_b) ** 2).sum()
                    cov = (w * (pa - mu_a) * (pb - mu_b)).sum()
                    values.append((2 * mu_a * mu_b + c1) * (2 * cov + c2)
                                  / ((mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)))
        self.assertAlmostEqual(ssim(torch.from_numpy(a), torch.from_numpy(b)), float(np.mean(values)), places=9)

    def test_ssim_of_inverted_image_is_negative(self):
        x = noisy_frames(1, 24)[0]
        self.assertLess(ssim(x, 1.0 - x), 0.0)

    def test_ssim_errors(self):
        with self.assertRaises(ValueError):
            ssim(torch.zeros(3, 8, 8), torch.zeros(3, 8, 8))
        with self.assertRaises(ValueError):
            ssim(torch.zeros(3, 16, 16), torch.zeros(3, 16, 12))


class TestProxyFD(unittest.TestCase):
    """Hand-crafted features and the Frechet distance"""

    def test_feature_vector(self):
        feats = features(noisy_frames(1, 3)[0])
        self.assertEqual(feats.shape, (FEATURE_DIM,))
        self.assertAlmostEqual(float(feats[8:].sum()), 1.0)

    def test_flat_image_features(self):
        feats = features(torch.full((3, 8, 8), 0.25))
        np.testing.assert_allclose(feats[:7], np.full(7, 0.25))
        self.assertEqual(feats[7], 0.0)
        self.assertEqual(feats[8], 1.0)

    def test_gray_matches_replicated_rgb(self):
        gray = noisy_frames(1, 4)[0, :1]
        np.testing.assert_allclose(features(gray), features(gray.expand(3, -1, -1)))
    def test_feature_names_cover_the_vector(self):
        self.assertEqual(FEATURE_DIM, 16)
        self.assertEqual(len(set(FEATURE_NAMES)), FEATURE_DIM)
        self.assertEqual(FEATURE_NAMES[3:7], ("quadrant_tl", "quadrant_tr", "quadrant_bl", "quadrant_br"))

    def test_quadrant_features(self):
        image = torch.zeros(3, 8, 8)
        image[:, :4, 4:] = 0.25
        image[:, 4:, :4] = 0.5
        image[:, 4:, 4:] = 1.0
        np.testing.assert_allclose(features(image)[3:7], [0.0, 0.25, 0.5, 1.0])

    def test_frechet_distance_of_shifted_unit_clouds(self):
        """Unit Gaussian clouds offset by delta along one axis are delta^2 apart"""
        rng = np.random.default_rng(25)
        for delta in (0.5, 1.5, 3.0):
            with self.subTest(delta=delta):
                a = rng.normal(size=(20000, 4))
                b = rng.normal(size=(20000, 4))
                b[:, 0] += delta
                fd = frechet_distance(*fit_gaussian(a), *fit_gaussian(b))
                self.assertAlmostEqual(fd, delta ** 2, delta=0.1)

    def test_proxy_fd_is_symmetric(self):
        a, b = noisy_frames(40, 26), noisy_frames(32, 27) * 0.5
        forward, backward = proxy_fd(a, b), proxy_fd(b, a)
        self.assertGreater(forward, 0.0)
        self.assertAlmostEqual(forward, backward, delta=1e-4 * max(1.0, forward))

    def test_fit_gaussian_needs_two_rows(self):
        with self.assertRaises(ValueError):
            fit_gaussian(np.zeros((1, 4)))

    def test_frechet_distance(self):
        rng = np.random.default_rng(0)
        mu, sigma = fit_gaussian(rng.normal(size=(50, 4)))
        self.assertAlmostEqual(frechet_distance(mu, sigma, mu, sigma), 0.0, delta=1e-8)
        shift = np.array([1.0, 2.0, 0.0, 0.0])
        self.assertAlmostEqual(frechet_distance(mu, sigma, mu + shift, sigma), 5.0, places=6)

    def test_proxy_fd(self):
        a = noisy_frames(12, 5)
        flat = torch.rand(12, 3, 1, 1, generator=torch.Generator().manual_seed(6)).expand(-1, -1, 16, 16)
        self.assertAlmostEqual(proxy_fd(a, a.clone()), 0.0, delta=1e-4)
        self.assertGreater(proxy_fd(a, flat), proxy_fd(a, noisy_frames(12, 7)))
        with self.assertRaises(ValueError):
            proxy_fd(a[:7], a)


class TestReports(unittest.TestCase):
    """evaluate_sequences and report writing"""

    def setUp(self):
        self.test_dir = tempfile.mkdtemp()
        self.seqs = [noisy_frames(4, 10), noisy_frames(4, 11)]

    def tearDown(self):
        if os.path.exists(self.test_dir):
            shutil.rmtree(self.test_dir)

    def test_flicker_without_reference(self):
        reports = evaluate_sequences(self.seqs, ["flicker"], config_digest="abc")
        self.assertEqual(len(reports), 1)
        expected = (flicker(self.seqs[0]) + flicker(self.seqs[1])) / 2
        self.assertAlmostEqual(reports[0].value, expected)
        self.assertEqual(reports[0].n_items, 2)
        self.assertEqual(reports[0].config_digest, "abc")

    def test_identical_reference_is_infinite(self):
        reports = evaluate_sequences(self.seqs, ["psnr", "ssim"], reference=[s.clone() for s in self.seqs])
        self.assertTrue(reports[0].infinite)
        self.assertIsNone(reports[0].value)
        self.assertAlmostEqual(reports[1].value, 1.0, places=6)

    def test_proxy_fd_pools_frames(self):
        reports = evaluate_sequences(self.seqs, ["proxy_fd"], reference=[noisy_frames(8, 12)])
        self.assertEqual(reports[0].n_items, 8)
        self.assertGreaterEqual(reports[0].value, 0.0)

    def test_errors(self):
        with self.assertRaises(ValueError):
            evaluate_sequences(self.seqs, ["fvd"])
        with self.assertRaises(ValueError):
            evaluate_sequences(self.seqs, ["psnr"])
        with self.assertRaises(ValueError):
            evaluate_sequences(self.seqs, ["psnr"], reference=self.seqs[:1])
        with self.assertRaises(ValueError):
            evaluate_sequences([], ["flicker"])

    def test_write_report(self):
        reports = [
            EvalReport(metric="flicker", value=3.5, n_items=2, config_digest="d1"),
            EvalReport(metric="psnr", value=None, n_items=2, config_digest="d1", infinite=True),
        ]
        path = write_report(reports, os.path.join(self.test_dir, "eval", "eval_report.json"), extra={"seed": 0})
        with open(path, "r", encoding="utf-8") as f:
            payload = json.load(f)
        self.assertEqual(payload["seed"], 0)
        self.assertEqual([r["metric"] for r in payload["reports"]], ["flicker", "psnr"])
        self.assertIsNone(payload["reports"][1]["value"])

        table = pd.read_csv(os.path.join(self.test_dir, "eval", "eval_report.csv"))
        self.assertEqual(list(table["metric"]), ["flicker", "psnr"])
        self.assertEqual(list(report_to_frame(reports).columns),
                         ["metric", "value", "n_items", "config_digest", "infinite"])


if __name__ == '__main__':
    unittest.main()
