"""Acceptance gate: one test class per criterion.

Run with ``pytest tests/test_acceptance.py -v``; the terminal summary ends with
one PASS/FAIL line per criterion. Criterion 6 and 7 train models and take
minutes (6) to about an hour (7) on one CPU core.
"""

import math
import time

import numpy as np
import pytest
import torch
from scipy import stats

import endtoend
import overfit
from conftest import TINY_VOCODER
from dryrecover import cli
from dryrecover.checkpoint import load_checkpoint, save_checkpoint
from dryrecover.dataset import PairCorpus
from dryrecover.denoiser import DenoiserConfig, MelDenoiser, block_parameter_count, count_parameters
from dryrecover.dspcore import AudioClip, MelFrontend, StftConfig, mel_transform, num_frames, save_audio
from dryrecover.fxrender import (
    GAIN_RANGE_DB,
    THRESHOLD_RANGE_DB,
    apply_clipping,
    apply_distortion,
    effect_chain,
    render_pair,
    sample_effect_config,
)
from dryrecover.metrics import EmbeddingSet, esr, frechet_distance, frechet_from_stats, mr_stft, si_sdr
from dryrecover.moslab import Rating, RatingsTable, anova_oneway, studentized_range_ppf, tukey_hsd
from dryrecover.pipeline import RestorationPipeline
from dryrecover.synth import guitar_phrase
from dryrecover.training import TrainSchedule, l1_mel_loss, parameter_hash, train_denoiser, train_vocoder
from dryrecover.vocoder import Generator, VocoderConfig
from oracles import esr_loop, frechet_sqrtm, mean_cov_loop, mr_stft_loop, si_sdr_loop

HALF_SECOND = 22050


def criterion(number, title):
    return pytest.mark.acceptance(number, title)


def random_pairs(n_pairs, seed=0):
    rng = np.random.default_rng(seed)
    for _ in range(n_pairs):
        ref = rng.uniform(-0.8, 0.8, HALF_SECOND)
        est = rng.uniform(0.3, 1.5) * ref + rng.uniform(0.01, 0.5) * rng.standard_normal(HALF_SECOND)
        yield est, ref


# -- 1 ---------------------------------------------------------------------------------

@criterion(1, "metric oracle equivalence on 200 random 0.5 s pairs, < 2 min")
def test_metric_oracles():
    start = time.perf_counter()
    worst = {"esr": 0.0, "si_sdr": 0.0, "mr_stft": 0.0, "frechet": 0.0}
    for est, ref in random_pairs(200):
        worst["esr"] = max(worst["esr"], abs(esr(est, ref) / esr_loop(est, ref) - 1))
        worst["si_sdr"] = max(worst["si_sdr"], abs(si_sdr(est, ref) / si_sdr_loop(est, ref) - 1))
        worst["mr_stft"] = max(worst["mr_stft"], abs(mr_stft(est, ref) / mr_stft_loop(est, ref) - 1))
        # embeddings: consecutive 6-sample frames of each clip
        a, b = est[:6 * 400].reshape(400, 6), ref[:6 * 400].reshape(400, 6)
        mu1, s1 = mean_cov_loop(a)
        mu2, s2 = mean_cov_loop(b)
        ours = frechet_distance(EmbeddingSet(a), EmbeddingSet(b))
        worst["frechet"] = max(worst["frechet"], abs(ours / frechet_sqrtm(mu1, s1, mu2, s2) - 1))
    elapsed = time.perf_counter() - start
    print(f"worst relative errors {worst}; {elapsed:.1f}s")
    assert all(v < 1e-6 for v in worst.values()), worst
    assert elapsed < 120


# -- 2 ---------------------------------------------------------------------------------

@criterion(2, "closed-form metric identities")
class TestMetricIdentities:
    def test_esr_of_scaled_reference(self):
        rng = np.random.default_rng(1)
        x = rng.uniform(-1, 1, 4096)
        for a in rng.uniform(-3, 3, 50):
            assert esr(a * x, x) == pytest.approx((1 - a) ** 2, rel=1e-9, abs=1e-12)

    def test_si_sdr_scale_invariance(self):
        for est, ref in random_pairs(20, seed=2):
            base = si_sdr(est, ref)
            for scale in (1e-3, 0.5, 7.0, 1e3):
                assert si_sdr(scale * est, ref) == pytest.approx(base, rel=1e-9)

    def test_frechet_1d(self):
        rng = np.random.default_rng(3)
        for m1, m2, s1, s2 in zip(*(rng.uniform(-5, 5, 100) for _ in range(2)), *(rng.uniform(0.01, 4, 100)
                                                                                  for _ in range(2))):
            expected = (m1 - m2) ** 2 + (s1 - s2) ** 2
            assert abs(frechet_from_stats([m1], [[s1**2]], [m2], [[s2**2]]) - expected) <= 1e-8

    def test_identity_inputs(self):
        for est, ref in random_pairs(10, seed=4):
            assert esr(ref, ref) == 0.0
            assert mr_stft(ref, ref) == 0.0
        emb = EmbeddingSet(np.random.default_rng(5).standard_normal((300, 8)))
        assert frechet_distance(emb, emb) == pytest.approx(0.0, abs=1e-10)


# -- 3 ---------------------------------------------------------------------------------

def independent_block_count(c):
    # attention in/out projections with biases, conv(k=9) 4c wide, conv(k=1) back, two LayerNorms
    return (3 * c * c + 3 * c) + (c * c + c) + (9 * c * 4 * c + 4 * c) + (4 * c * c + c) + 2 * (2 * c)


@criterion(3, "architecture conformance and parameter budgets")
class TestArchitecture:
    @pytest.mark.parametrize("n_layers,c_emb,heads", [(1, 32, 1), (2, 64, 4), (8, 256, 4), (12, 384, 6)])
    def test_block_formula(self, n_layers, c_emb, heads):
        cfg = DenoiserConfig(n_layers=n_layers, c_emb=c_emb, n_heads=heads)
        model = MelDenoiser(cfg)
        for block in model.blocks:
            assert sum(p.numel() for p in block.parameters()) == independent_block_count(c_emb)
        assert block_parameter_count(c_emb) == independent_block_count(c_emb)
        c_bin = cfg.c_bin
        expected = (c_bin * c_emb + c_emb) + n_layers * independent_block_count(c_emb) + 2 * c_emb + (
            c_emb * c_bin + c_bin)
        assert count_parameters(model) == expected

    def test_totals_within_budget(self):
        generator = sum(p.numel() for p in Generator(VocoderConfig()).parameters())
        large = count_parameters(DenoiserConfig.preset("large")) + generator
        base = count_parameters(DenoiserConfig.preset("base")) + generator
        print(f"generator {generator:,}; large total {large:,}; base total {base:,}")
        assert 0.8 * 101.7e6 <= large <= 1.2 * 101.7e6
        assert 0.8 * 45.9e6 <= base <= 1.2 * 45.9e6


# -- 4 ---------------------------------------------------------------------------------

@criterion(4, "shape and length contracts")
class TestShapes:
    def test_denoiser_preserves_shape(self):
        rng = np.random.default_rng(6)
        models = {c: MelDenoiser(DenoiserConfig(n_layers=1, c_emb=32, n_heads=2, c_bin=c, dropout=0.0)).eval()
                  for c in (40, 80, 128)}
        for _ in range(100):
            c_bin = int(rng.choice(list(models)))
            shape = (int(rng.integers(1, 4)), int(rng.integers(1, 400)), c_bin)
            with torch.no_grad():
                out = models[c_bin](torch.randn(shape))
            assert tuple(out.shape) == shape

    def test_vocoder_length(self):
        gen = Generator(VocoderConfig(**TINY_VOCODER)).eval()
        with torch.no_grad():
            for frames in range(1, 257):
                assert gen(torch.randn(1, frames, 128)).shape[-1] == 512 * frames
            full = Generator(VocoderConfig()).eval()
            for frames in (1, 5):
                assert full(torch.randn(frames, 128)).shape[-1] == 512 * frames

    def test_frame_formula(self):
        rng = np.random.default_rng(7)
        for n in rng.integers(2048, 120_000, 40):
            clip = AudioClip(rng.uniform(-0.5, 0.5, int(n)).astype(np.float32))
            assert mel_transform(clip).values.shape == (int(n) // 512 + 1, 128) == (num_frames(int(n)), 128)


# -- 5 ---------------------------------------------------------------------------------

def finite_difference_check(module, loss_fn, n_params, seed, eps=1e-6):
    """Max relative error between autograd and central differences over sampled parameter entries."""
    params = [p for p in module.parameters() if p.requires_grad]
    module.zero_grad()
    loss_fn().backward()
    sizes = np.array([p.numel() for p in params])
    rng = np.random.default_rng(seed)
    worst = 0.0
    checked = attempts = 0
    while checked < n_params:
        attempts += 1
        assert attempts < 20 * n_params, "too few parameters influence the loss"
        i = int(rng.choice(len(params), p=sizes / sizes.sum()))
        p = params[i]
        j = int(rng.integers(p.numel()))
        analytic = p.grad.view(-1)[j].item()
        with torch.no_grad():
            flat = p.data.view(-1)
            orig = flat[j].item()
            flat[j] = orig + eps
            up = loss_fn().item()
            flat[j] = orig - eps
            down = loss_fn().item()
            flat[j] = orig
        numeric = (up - down) / (2 * eps)
        scale = max(abs(analytic), abs(numeric))
        if scale < 1e-9:
            continue  # parameter has no influence on this batch
        worst = max(worst, abs(analytic - numeric) / scale)
        checked += 1
    return worst


@criterion(5, "gradient checks against central differences, < 5 min")
class TestGradients:
    def test_denoiser(self):
        torch.manual_seed(0)
        start = time.perf_counter()
        model = MelDenoiser(DenoiserConfig(n_layers=2, c_emb=32, n_heads=2, dropout=0.0)).double().eval()
        wet, dry = torch.randn(2, 20, 128, dtype=torch.float64), torch.randn(2, 20, 128, dtype=torch.float64)
        worst = finite_difference_check(model, lambda: l1_mel_loss(model(wet), dry), 30, seed=0)
        print(f"denoiser worst relative error {worst:.2e}")
        assert worst < 1e-3
        assert time.perf_counter() - start < 150

    def test_generator(self):
        torch.manual_seed(0)
        start = time.perf_counter()
        # larger init so the output clears the log-Mel floor (otherwise every gradient is zero)
        gen = Generator(VocoderConfig(**TINY_VOCODER, init_std=0.1)).double()
        frontend = MelFrontend(StftConfig()).double()
        dry = torch.as_tensor(guitar_phrase(0.1, seed=0).samples[: 8 * 512], dtype=torch.float64)[None]
        mel = frontend(dry)
        worst = finite_difference_check(gen, lambda: l1_mel_loss(frontend(gen(mel)[:, : dry.shape[1]]), mel), 30, seed=1)
        print(f"generator worst relative error {worst:.2e}")
        assert worst < 1e-3
        assert time.perf_counter() - start < 150


# -- 6 ---------------------------------------------------------------------------------

@criterion(6, "overfit smoke training (denoiser < 10% in 2000 steps, vocoder halves in 5000)")
@pytest.mark.slow
class TestOverfit:
    def test_denoiser(self):
        torch.manual_seed(0)
        result, stop = overfit.run_denoiser()
        print(f"denoiser: {stop.first:.3f} -> {np.mean(stop.recent):.3f} after {result.step} steps")
        assert result.stopped_early and result.step <= overfit.DENOISER_BUDGET

    def test_vocoder(self):
        torch.manual_seed(0)
        result, stop = overfit.run_vocoder()
        print(f"vocoder: {stop.first:.3f} -> {np.mean(stop.recent):.3f} after {result.step} steps")
        assert result.stopped_early and result.step <= overfit.VOCODER_BUDGET


# -- 7 ---------------------------------------------------------------------------------

@criterion(7, "end-to-end: restored beats wet on SI-SDR and MR-STFT for >= 80% of held-out clips")
@pytest.mark.slow
def test_end_to_end_direction():
    rows = endtoend.run()
    summary = endtoend.summarize(rows)
    print(summary)
    assert summary["n"] >= 30
    assert summary["frac_both"] >= 0.8, summary


# -- 8 ---------------------------------------------------------------------------------

@criterion(8, "synthetic recipe conformance over 10 000 sampled chains")
def test_recipe_conformance():
    configs = [sample_effect_config(seed) for seed in range(10_000)]
    gains = np.array([c.distortion_gain_db for c in configs])
    thresholds = np.array([c.clip_threshold_db for c in configs])
    print(f"gain mean {gains.mean():.3f} dB, threshold mean {thresholds.mean():.3f} dB")
    assert abs(gains.mean() - 35) <= 0.5 and abs(thresholds.mean() + 35) <= 0.5
    assert GAIN_RANGE_DB == (20.0, 50.0) and THRESHOLD_RANGE_DB == (-50.0, -20.0)
    assert gains.min() >= 20 and gains.max() <= 50 and thresholds.min() >= -50 and thresholds.max() <= -20
    assert all(c.apply_distortion or c.apply_clipping for c in configs)
    rng = np.random.default_rng(8)
    for c in configs:
        x = AudioClip(rng.uniform(-1, 1, 256).astype(np.float32))
        assert np.max(np.abs(apply_clipping(x, c.clip_threshold_db).samples)) <= 10 ** (c.clip_threshold_db / 20)
        assert np.max(np.abs(apply_distortion(x, c.distortion_gain_db).samples)) <= 1.0
        wet = effect_chain(x, c)
        bound = 10 ** (c.clip_threshold_db / 20) if c.apply_clipping else 1.0
        assert np.max(np.abs(wet.samples)) <= bound


# -- 9 ---------------------------------------------------------------------------------

# q_{1-alpha}(k, df) from standard studentized-range tables
PUBLISHED_Q = [(0.95, 2, 10, 3.151), (0.95, 3, 10, 3.877), (0.95, 4, 20, 3.958), (0.95, 5, 30, 4.102),
               (0.95, 10, 120, 4.560), (0.99, 3, 10, 5.270)]


@criterion(9, "statistics validation")
class TestStatistics:
    def test_f_equals_t_squared(self):
        rng = np.random.default_rng(9)
        for _ in range(20):
            a, b = rng.integers(1, 6, rng.integers(5, 60)), rng.integers(1, 6, rng.integers(5, 60))
            if np.var(np.r_[a, b]) == 0:
                continue
            t = stats.ttest_ind(a, b).statistic
            assert abs(anova_oneway({"a": a, "b": b})["F"] - t**2) <= 1e-9 * max(1.0, t**2)

    @pytest.mark.parametrize("p,k,df,q", PUBLISHED_Q)
    def test_tukey_critical_values(self, p, k, df, q):
        assert abs(studentized_range_ppf(p, k, df) / q - 1) <= 0.005

    def test_separated_groups(self):
        rows = [Rating(f"r{r}", system, f"i{i}", "AQ", score)
                for r in range(5) for i in range(4)
                for system, score in (("ours", 4 + (r + i) % 2), ("baseline", 1 + (r * i) % 2))]
        table = RatingsTable(rows)
        assert anova_oneway(table, "AQ")["p"] < 0.001
        assert tukey_hsd(table, "AQ")[0]["p_adj"] < 0.001


# -- 10 --------------------------------------------------------------------------------

@criterion(10, "determinism and persistence")
class TestDeterminism:
    def test_render(self, tmp_path):
        clip = guitar_phrase(1.0, seed=5)
        first = render_pair(clip, sample_effect_config(42))[1].samples
        second = render_pair(guitar_phrase(1.0, seed=5), sample_effect_config(42))[1].samples
        assert np.array_equal(first, second)
        src = tmp_path / "src"
        src.mkdir()
        for i in range(3):
            save_audio(guitar_phrase(0.5, seed=i), src / f"c{i}.wav")
        for out in ("a", "b"):
            assert cli.main(["render", "--dry-dir", str(src), "--out-dir", str(tmp_path / out), "--seed", "9"]) == 0
        for wet in sorted((tmp_path / "a" / "wet").glob("*.wav")):
            assert wet.read_bytes() == (tmp_path / "b" / "wet" / wet.name).read_bytes()

    def test_training_sequence(self):
        corpus = overfit.overfit_corpus()
        schedule = TrainSchedule.for_phase("denoiser", max_steps=5, lr=1e-3, batch_size=4, crop_seconds=0.25,
                                           early_stop_patience=None, seed=3)
        cfg = DenoiserConfig(n_layers=1, c_emb=32, n_heads=1, dropout=0.1)
        runs = [train_denoiser(corpus, cfg, schedule) for _ in range(2)]
        assert [h["loss"] for h in runs[0].history] == [h["loss"] for h in runs[1].history]
        assert parameter_hash(runs[0].models["denoiser"]) == parameter_hash(runs[1].models["denoiser"])
        vsched = TrainSchedule.for_phase("vocoder", max_steps=3, batch_size=2, crop_seconds=0.1,
                                         early_stop_patience=None, seed=3)
        vcfg = VocoderConfig(**TINY_VOCODER)
        vruns = [train_vocoder(corpus, vcfg, vsched) for _ in range(2)]
        assert vruns[0].history == vruns[1].history
        assert parameter_hash(vruns[0].models["generator"]) == parameter_hash(vruns[1].models["generator"])

    def test_inference_and_checkpoints(self, tmp_path):
        torch.manual_seed(0)
        den = MelDenoiser(DenoiserConfig(n_layers=1, c_emb=32, n_heads=1))
        gen = Generator(VocoderConfig(**TINY_VOCODER))
        pipeline = RestorationPipeline(den, gen)
        clip = guitar_phrase(0.5, seed=11)
        out = pipeline.restore(clip).samples
        assert np.array_equal(out, pipeline.restore(clip).samples)

        loaded = RestorationPipeline.load(pipeline.save(tmp_path / "p.ckpt"))
        assert np.array_equal(out, loaded.restore(clip).samples)

        mel = torch.randn(1, 30, 128)
        path = save_checkpoint(tmp_path / "d.ckpt", "denoiser", {"denoiser": den.cfg.to_dict()}, {"denoiser": den})
        den2 = load_checkpoint(path).load_module("denoiser", MelDenoiser(den.cfg)).eval()
        with torch.no_grad():
            assert torch.equal(den.eval()(mel), den2(mel))
            path = save_checkpoint(tmp_path / "g.ckpt", "vocoder", {"vocoder": gen.cfg.to_dict()},
                                   {"generator": gen})
            gen2 = load_checkpoint(path).load_module("generator", Generator(gen.cfg)).eval()
            assert torch.equal(gen.eval()(mel), gen2(mel))
