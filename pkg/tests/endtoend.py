"""Toy three-phase training on a 30-minute synthetic corpus, scored on held-out clips.

``python tests/endtoend.py`` runs it standalone and prints the per-clip
comparison; the acceptance gate calls :func:`run` with the same settings.
"""

import json
import sys
import time

import numpy as np
import torch

from dryrecover.dataset import PairCorpus
from dryrecover.denoiser import DenoiserConfig
from dryrecover.dspcore import AudioClip, StftConfig
from dryrecover.estimators import _as_checkpoint
from dryrecover.fxrender import render_pair, sample_effect_config
from dryrecover.metrics import mr_stft, si_sdr
from dryrecover.pipeline import RestorationPipeline
from dryrecover.synth import guitar_phrase
from dryrecover.training import TrainSchedule, finetune_vocoder, train_denoiser, train_vocoder
from dryrecover.vocoder import VocoderConfig

N_CLIPS = 450
CLIP_SECONDS = 4.0  # 450 x 4 s = 30 minutes
N_HELD_OUT = 45
STEPS = {"denoiser": 1500, "vocoder": 1500, "finetune": 300}

DENOISER = DenoiserConfig(n_layers=2, c_emb=128, dropout=0.0)
VOCODER = VocoderConfig(initial_channels=32, mpd_channels=(8, 16, 32, 32, 32),
                        msd_channels=(8, 16, 16, 32, 32, 32, 32), msd_groups=(1,) * 7)


def corpus():
    dry, wet = [], []
    for i in range(N_CLIPS):
        d, w = render_pair(guitar_phrase(CLIP_SECONDS, seed=10_000 + i), sample_effect_config(20_000 + i))
        dry.append(d.samples)
        wet.append(w.samples)
    return dry, wet


def run(steps=None, log=print):
    steps = {**STEPS, **(steps or {})}
    t0 = time.time()
    dry, wet = corpus()
    n_train = N_CLIPS - N_HELD_OUT
    train = PairCorpus([str(i) for i in range(n_train)], dry[:n_train], wet[:n_train])
    stft = StftConfig()

    schedule = TrainSchedule.for_phase("denoiser", max_steps=steps["denoiser"], lr=1e-3, lr_decay=1.0,
                                       batch_size=16, crop_seconds=1.0, early_stop_patience=None)
    den = train_denoiser(train, DENOISER, schedule, stft)
    log(f"denoiser done at {time.time() - t0:.0f}s")
    schedule = TrainSchedule.for_phase("vocoder", max_steps=steps["vocoder"], batch_size=4, crop_seconds=0.25,
                                       early_stop_patience=None)
    voc = train_vocoder(train, VOCODER, schedule, stft)
    log(f"vocoder done at {time.time() - t0:.0f}s")
    schedule = TrainSchedule.for_phase("finetune", max_steps=steps["finetune"], batch_size=4, crop_seconds=0.25,
                                       early_stop_patience=None)
    ft = finetune_vocoder(train, den.models["denoiser"], _as_checkpoint(voc, VOCODER, stft), schedule)
    log(f"finetune done at {time.time() - t0:.0f}s")

    pipeline = RestorationPipeline(den.models["denoiser"], ft.models["generator"], stft)
    rows = []
    for d, w in zip(dry[n_train:], wet[n_train:]):
        r = pipeline.restore(AudioClip(w)).samples
        rows.append({"si_sdr_wet": si_sdr(w, d), "si_sdr_restored": si_sdr(r, d),
                     "mr_stft_wet": mr_stft(w, d), "mr_stft_restored": mr_stft(r, d)})
    return rows


def summarize(rows):
    sdr = np.array([r["si_sdr_restored"] > r["si_sdr_wet"] for r in rows])
    mrs = np.array([r["mr_stft_restored"] < r["mr_stft_wet"] for r in rows])
    med = {k: float(np.median([r[k] for r in rows])) for k in rows[0]}
    return {"n": len(rows), "frac_si_sdr": float(sdr.mean()), "frac_mr_stft": float(mrs.mean()),
            "frac_both": float((sdr & mrs).mean()), "medians": med}


if __name__ == "__main__":
    torch.set_num_threads(1)
    overrides = dict(zip(("denoiser", "vocoder", "finetune"), map(int, sys.argv[1:4])))
    print(json.dumps(summarize(run(overrides)), indent=2))
