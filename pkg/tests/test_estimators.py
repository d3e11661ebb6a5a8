import numpy as np
import pytest
from sklearn.base import clone

from conftest import TINY_DENOISER, TINY_VOCODER
from dryrecover.dspcore import AudioClip, StftConfig, mel_transform
from dryrecover.errors import ValidationError
from dryrecover.estimators import EffectChain, MelSpectrogram, TwoStageRestorer
from dryrecover.fxrender import EffectChainConfig, render_pair
from dryrecover.synth import guitar_phrase


def test_clone_and_params():
    est = TwoStageRestorer(denoiser=dict(TINY_DENOISER), denoiser_steps=3)
    copy = clone(est)
    assert copy.get_params()["denoiser_steps"] == 3 and copy is not est
    assert MelSpectrogram(n_mels=64).set_params(hop_length=256).get_params()["hop_length"] == 256


def test_mel_transformer_matches_frontend(rng):
    X = rng.uniform(-0.5, 0.5, (3, 4096)).astype(np.float32)
    out = MelSpectrogram().fit_transform(X)
    assert out.shape == (3, 4096 // 512 + 1, 128)
    ref = mel_transform(AudioClip(X[1]), StftConfig()).values
    np.testing.assert_allclose(out[1], ref, rtol=1e-6)
    ragged = MelSpectrogram().fit_transform([X[0], X[1, :3000]])
    assert isinstance(ragged, list) and ragged[1].shape == (6, 128)


def test_effect_chain_matches_renderer(rng):
    X = rng.uniform(-0.5, 0.5, (2, 2048)).astype(np.float32)
    wet = EffectChain(distortion_gain_db=30, clip_threshold_db=-25).fit_transform(X)
    _, ref = render_pair(AudioClip(X[0]), EffectChainConfig(30.0, -25.0, apply_clipping=True))
    np.testing.assert_array_equal(wet[0], ref.samples)


def test_unfitted_and_bad_input():
    with pytest.raises(Exception):
        MelSpectrogram().transform(np.zeros((1, 4096)))
    with pytest.raises(ValidationError):
        MelSpectrogram().fit(np.zeros((2, 2, 2)))
    with pytest.raises(ValidationError):
        TwoStageRestorer().fit([np.zeros(4096)], [np.zeros(4096), np.zeros(4096)])


def test_tiny_fit_predict_score(tmp_path):
    dry = [guitar_phrase(0.5, seed=i).samples for i in range(4)]
    wet = EffectChain().fit_transform(dry)
    est = TwoStageRestorer(denoiser=dict(TINY_DENOISER), vocoder=dict(TINY_VOCODER), denoiser_steps=2,
                           vocoder_steps=2, finetune_steps=2, batch_size=2, crop_seconds=0.25)
    est.fit(wet, dry)
    assert set(est.history_) == {"denoiser", "vocoder", "finetune"}
    pred = est.predict(wet)
    assert pred.shape == (4, 22050)
    assert np.isfinite(est.score(wet, dry))
    assert est.predict(wet[:1], trim=False).shape == (1, (22050 // 512 + 1) * 512)
    est.save(tmp_path / "p.ckpt")
    again = TwoStageRestorer.from_pipeline(tmp_path / "p.ckpt")
    np.testing.assert_array_equal(again.predict(wet), pred)
