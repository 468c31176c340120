"""
Directional acceptance checks on small trained models.

These train real (if small) denoisers on CPU and take a while; they run
only with GRIDIT_SLOW_TESTS=1.
"""
import logging
import math
import os
import sys
import unittest
from dataclasses import replace

import numpy as np
import torch

# Add parent directory to path to import modules
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from denoiser import DenoiserConfig, DenoiserModel, TrainConfig, train
from diffusion import build_schedule, derive_seed, make_generator, respace, training_loss
from eval_metrics import flicker, proxy_fd, psnr
from sampler import SamplerPlan, generate_sequence
from seqgrid import GridLayout, extract_training_grids, resample_frame
from sr_stage import DegradeParams, bicubic_baseline, super_resolve, train_sr
from synth_data import SynthSpec, synth_dataset
from voldenoise import add_volume_noise, denoise_volume

logger = logging.getLogger(__name__)

SLOW = os.environ.get("GRIDIT_SLOW_TESTS") == "1"
SKIP_REASON = "set GRIDIT_SLOW_TESTS=1 to run the slow acceptance checks"

# 32x32 frames, 4x4 grids of 8x8 elements, x4 refinement back to 32x32
FRAME = 32
K, R = 4, 3
ELEMENT = FRAME // K
SR_SCALE = FRAME // ELEMENT
SAMPLING_STEPS = 50
# relative slack when comparing held-out losses of positional schemes
ABLATION_TOLERANCE = 0.02


def stage1_config(pos_scheme: str = "combined") -> DenoiserConfig:
    return DenoiserConfig(input_channels=3, input_size=FRAME, patch=2, depth=3, width=96, heads=4,
                          grid_K=K, pos_scheme=pos_scheme)


def stage2_config() -> DenoiserConfig:
    return DenoiserConfig(input_channels=3, input_size=FRAME, patch=2, depth=3, width=96, heads=4,
                          grid_K=1, conditional=True, pos_scheme="2d")


def new_model(config: DenoiserConfig, seed: int) -> DenoiserModel:
    torch.manual_seed(seed)
    return DenoiserModel(config)


def sample_frames(model: DenoiserModel, layout: GridLayout, sched, seeds) -> list:
    frames = []
    for seed in seeds:
        plan = SamplerPlan(layout=layout, N=1, sched=sched, seed=seed, interpolate=False)
        frames.extend(generate_sequence(model, plan).frames)
    return frames


def mean_psnr(frames, references) -> float:
    return float(np.mean([psnr(a, b) for a, b in zip(frames, references)]))


def training_grids(sequences, layout: GridLayout) -> torch.Tensor:
    return torch.stack([g.pixels for seq in sequences for g in extract_training_grids(seq, layout, stride=2)])


def held_out_loss(model: DenoiserModel, grids: torch.Tensor, sched, seed: int, repeats: int = 4) -> float:
    """Epsilon-MSE on fixed grids; a fixed seed gives every model the same timesteps and noise."""
    generator = make_generator(seed)
    with torch.no_grad():
        return float(np.mean([float(training_loss(model, grids, generator, sched, backward=False)[0])
                              for _ in range(repeats)]))


@unittest.skipUnless(SLOW, SKIP_REASON)
class TestTrainedModelAcceptance(unittest.TestCase):
    """Trained models beat their untrained and naive baselines"""

    @classmethod
    def setUpClass(cls):
        cls.layout = GridLayout.for_frames(K, R, FRAME, FRAME)
        cls.train_sched = build_schedule(1000)
        cls.sched = respace(cls.train_sched, SAMPLING_STEPS)

        spec = SynthSpec(n_sequences=24, n_frames=32, H=FRAME, W=FRAME, n_shapes=2,
                         speed_range=(0.5, 1.5), radius_range=(3.0, 5.0), seed=0)
        cls.sequences = synth_dataset(spec)
        cls.held_out = synth_dataset(replace(spec, n_sequences=4, seed=1))

        cls.grids = training_grids(cls.sequences, cls.layout)
        cls.reference = [resample_frame(f, ELEMENT, ELEMENT)
                         for seq in cls.held_out for f in seq.frames.unbind(0)]

        cfg = TrainConfig(steps=3000, batch_size=16, lr_min=1e-5, lr_max=2e-4, warmup_steps=200, log_every=500)
        cls.untrained = new_model(stage1_config(), 0)
        cls.stage1 = new_model(stage1_config(), 0)
        cls.stage1_result = train(cls.stage1, cls.grids, cfg, cls.train_sched, seed=1)

        hr = torch.cat([seq.frames for seq in cls.sequences])
        cls.degrade = DegradeParams(scale=SR_SCALE, blur_kernels=(3, 5, 7))
        cls.stage2 = new_model(stage2_config(), 2)
        cls.stage2_result = train_sr(cls.stage2, hr, cls.degrade, cfg, cls.train_sched, seed=3)

    def test_trained_samples_are_closer_to_the_data(self):
        trained = sample_frames(self.stage1, self.layout, self.sched, range(4))
        untrained = sample_frames(self.untrained, self.layout, self.sched, range(4))
        fd_trained = proxy_fd(trained, self.reference)
        fd_untrained = proxy_fd(untrained, self.reference)
        logger.info("proxy FD trained %.4f untrained %.4f", fd_trained, fd_untrained)
        self.assertLess(fd_trained, 0.5 * fd_untrained)

    def test_generated_sequences_are_temporally_coherent(self):
        plan = SamplerPlan(layout=self.layout, N=3, sched=self.sched, seed=11)
        frames = torch.stack(generate_sequence(self.stage1, plan).frames)
        order = torch.randperm(frames.shape[0], generator=make_generator(5))
        self.assertLess(flicker(frames), flicker(frames[order]))

    def test_length_is_linear_in_iterations(self):
        lengths = []
        for N in range(1, 6):
            plan = SamplerPlan(layout=self.layout, N=N, sched=respace(self.train_sched, 10), seed=N)
            coarse = generate_sequence(self.stage1, plan)
            self.assertEqual(len(coarse), plan.expected_length())
            self.assertEqual(len(coarse.provenance), len(coarse))
            lengths.append(len(coarse))
        self.assertEqual(lengths[0], K * K)
        self.assertEqual(len(set(np.diff(lengths))), 1)
    def test_conditioning_lowers_the_training_loss(self):
        """The refinement model sees a degraded copy of its target and ends below the unconditional loss"""
        stage1_tail = float(np.mean(self.stage1_result.losses[-200:]))
        stage2_tail = float(np.mean(self.stage2_result.losses[-200:]))
        logger.info("final training loss stage 1 %.5f stage 2 %.5f", stage1_tail, stage2_tail)
        self.assertLess(stage2_tail, stage1_tail)

    def test_refinement_beats_bicubic(self):
        hr = [f for seq in self.held_out for f in seq.frames[:8].unbind(0)]
        coarse = [resample_frame(f, ELEMENT, ELEMENT) for f in hr]
        refined = [super_resolve(self.stage2, c, SR_SCALE, self.sched, make_generator(derive_seed(0, "sr", i)))
                   for i, c in enumerate(coarse)]
        bicubic = [bicubic_baseline(c, SR_SCALE) for c in coarse]
        gain = mean_psnr(refined, hr) - mean_psnr(bicubic, hr)
        logger.info("refinement gain over bicubic %.2f dB", gain)
        self.assertGreaterEqual(gain, 0.5)

    def test_volume_denoising(self):
        """Denoising lifts PSNR and strays further from the input as t* grows"""
        clean = self.held_out[0]
        vol = add_volume_noise(clean, 25, make_generator(9))
        clean_small = [resample_frame(f, ELEMENT, ELEMENT) for f in clean.frames]
        noisy_small = torch.stack([resample_frame(f, ELEMENT, ELEMENT) for f in vol.frames.frames])

        distances = []
        for t_star in (50, 125, 250):
            out = denoise_volume(self.stage1, None, vol, self.layout, self.sched, mode="sdedit", t_star=t_star)
            distances.append(float((out.frames - noisy_small).pow(2).mean()))
            if t_star == 125:
                self.assertGreater(mean_psnr(out.frames.unbind(0), clean_small),
                                   mean_psnr(noisy_small.unbind(0), clean_small))
        self.assertEqual(distances, sorted(distances))


@unittest.skipUnless(SLOW, SKIP_REASON)
class TestPositionalEmbeddingAblation(unittest.TestCase):
    """Grid-aware positional tables against their single-axis parts"""

    def test_combined_is_no_worse_than_either_part(self):
        """Same seed per replicate; combined matches the better single scheme in at least 2 of 3"""
        layout = GridLayout.for_frames(K, R, FRAME, FRAME)
        train_sched = build_schedule(1000)
        spec = SynthSpec(n_sequences=8, n_frames=32, H=FRAME, W=FRAME, radius_range=(3.0, 5.0), seed=0)
        grids = training_grids(synth_dataset(spec), layout)
        held_out = training_grids(synth_dataset(replace(spec, n_sequences=2, seed=1)), layout)
        cfg = TrainConfig(steps=600, batch_size=16, lr_max=2e-4, warmup_steps=50, log_every=200)

        wins = 0
        for seed in range(3):
            losses = {}
            for scheme in ("2d", "3d_grid", "combined"):
                model = new_model(stage1_config(scheme), seed)
                train(model, grids, cfg, train_sched, seed=seed)
                losses[scheme] = held_out_loss(model, held_out, train_sched, seed=100 + seed)
                self.assertTrue(math.isfinite(losses[scheme]))
            best_single = min(losses["2d"], losses["3d_grid"])
            logger.info("replicate %d held-out loss: %s", seed,
                        ", ".join(f"{k} {v:.5f}" for k, v in losses.items()))
            if losses["combined"] <= best_single * (1.0 + ABLATION_TOLERANCE):
                wins += 1
        self.assertGreaterEqual(wins, 2)



if __name__ == '__main__':
    unittest.main()
