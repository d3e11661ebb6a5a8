"""Losses and the three-phase training regimen.

1. ``train_denoiser``: L1 between predicted and ground-truth dry log-Mel.
2. ``train_vocoder``: LS-GAN + feature matching + L1 Mel on ground-truth dry Mel.
3. ``finetune_vocoder``: same objective, generator fed by the frozen denoiser.
"""

import copy
import dataclasses
import hashlib
import json
import logging
import math
import os
import time
from dataclasses import dataclass, field

import numpy as np
import torch

from dryrecover.checkpoint import load_checkpoint, save_checkpoint
from dryrecover.dataset import PairCorpus, PairManifest, crop_length
from dryrecover.denoiser import DenoiserConfig, MelDenoiser
from dryrecover.dspcore import MelFrontend, StftConfig
from dryrecover.errors import TrainingDivergedError, ValidationError
from dryrecover.vocoder import DiscriminatorBank, Generator, VocoderConfig

logger = logging.getLogger(__name__)

PHASES = ("denoiser", "vocoder", "finetune")


@dataclass(frozen=True)
class LossWeights:
    lambda_mel: float = 45.0
    lambda_fm: float = 2.0
    adversarial: str = "lsgan"

    def __post_init__(self):
        if self.lambda_mel < 0 or self.lambda_fm < 0:
            raise ValidationError("loss weights must be non-negative")
        if self.adversarial != "lsgan":
            raise ValidationError(f"unsupported adversarial loss {self.adversarial!r}")

    def to_dict(self):
        return dataclasses.asdict(self)


_PHASE_DEFAULTS = {
    "denoiser": dict(max_steps=1_500_000, lr=1e-5, lr_decay=0.999999, decay_every="step",
                     betas=(0.9, 0.999), weight_decay=0.01),
    "vocoder": dict(max_steps=1_000_000, lr=2e-4, lr_decay=0.999, decay_every="epoch",
                    betas=(0.8, 0.99), weight_decay=0.01),
    "finetune": dict(max_steps=500_000, lr=2e-4, lr_decay=0.999, decay_every="epoch",
                     betas=(0.8, 0.99), weight_decay=0.01),
}


@dataclass(frozen=True)
class TrainSchedule:
    phase: str = "denoiser"
    max_steps: int = 1_500_000
    optimizer: str = "adamw"
    lr: float = 1e-5
    lr_decay: float = 0.999999
    decay_every: str = "step"
    betas: tuple = (0.9, 0.999)
    weight_decay: float = 0.01
    batch_size: int = 64
    crop_seconds: float = 1.0
    checkpoint_every: int = 5000
    validate_every: int = 5000
    early_stop_patience: int | None = 10
    log_every: int = 100
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "betas", tuple(float(b) for b in self.betas))
        if self.phase not in PHASES:
            raise ValidationError(f"phase must be one of {PHASES}, got {self.phase!r}")
        if self.max_steps <= 0:
            raise ValidationError("max_steps must be positive")
        if not 0 < self.lr_decay <= 1:
            raise ValidationError("lr_decay must lie in (0, 1]")
        if self.decay_every not in ("step", "epoch"):
            raise ValidationError("decay_every must be 'step' or 'epoch'")
        if self.optimizer != "adamw":
            raise ValidationError("only the AdamW optimizer is supported")
        if self.batch_size <= 0 or self.lr <= 0:
            raise ValidationError("batch_size and lr must be positive")

    @classmethod
    def for_phase(cls, phase, **overrides):
        params = dict(_PHASE_DEFAULTS[phase], phase=phase)
        params.update(overrides)
        return cls(**params)

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["betas"] = list(self.betas)
        return d


# -- losses ------------------------------------------------------------------

def l1_mel_loss(pred, target):
    """Mean absolute difference over every element."""
    if tuple(pred.shape) != tuple(target.shape):
        raise ValidationError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")
    return torch.mean(torch.abs(pred - target))


def _as_list(x):
    return list(x) if isinstance(x, (list, tuple)) else [x]


def lsgan_losses(real_scores, fake_scores):
    """Least-squares adversarial losses summed over discriminators.

    ``d_loss = sum(mean((real - 1)^2) + mean(fake^2))``,
    ``g_loss = sum(mean((fake - 1)^2))``.
    """
    real_scores, fake_scores = _as_list(real_scores), _as_list(fake_scores)
    if len(real_scores) != len(fake_scores):
        raise ValidationError("real and fake score lists differ in length")
    d_loss = sum(torch.mean((r - 1) ** 2) + torch.mean(f**2) for r, f in zip(real_scores, fake_scores))
    g_loss = sum(torch.mean((f - 1) ** 2) for f in fake_scores)
    return d_loss, g_loss


def _flatten_features(feats):
    flat = []
    for f in feats:
        if isinstance(f, (list, tuple)):
            flat.extend(_flatten_features(f))
        else:
            flat.append(f)
    return flat


def feature_matching_loss(real_feats, fake_feats):
    """Sum over layers of the mean absolute feature difference.

    Accepts flat lists or per-discriminator nested lists of feature maps.
    """
    real, fake = _flatten_features(real_feats), _flatten_features(fake_feats)
    if len(real) != len(fake):
        raise ValidationError(f"feature lists differ in length: {len(real)} vs {len(fake)}")
    total = 0.0
    for r, f in zip(real, fake):
        if tuple(r.shape) != tuple(f.shape):
            raise ValidationError(f"feature map shapes differ: {tuple(r.shape)} vs {tuple(f.shape)}")
        total = total + torch.mean(torch.abs(r - f))
    return total


# -- shared loop machinery ----------------------------------------------------

@dataclass
class TrainResult:
    phase: str
    step: int
    models: dict
    history: list = field(default_factory=list)
    best_val: float | None = None
    last_checkpoint: str | None = None
    best_checkpoint: str | None = None
    stopped_early: bool = False


class _JsonlLog:
    def __init__(self, path=None):
        self.path = path
        self.records = []
        self._t0 = time.monotonic()
        if path:
            os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)

    def write(self, **record):
        record["wall_time"] = round(time.monotonic() - self._t0, 3)
        self.records.append(record)
        if self.path:
            with open(self.path, "a") as fh:
                fh.write(json.dumps(record) + "\n")


def _closed_form_lambda(decay):
    return lambda k: decay**k


def make_optimizer(params, schedule):
    opt = torch.optim.AdamW(params, lr=schedule.lr, betas=schedule.betas, weight_decay=schedule.weight_decay)
    # closed-form factor so the lr at step k is exactly lr * decay**k
    sched = torch.optim.lr_scheduler.LambdaLR(opt, _closed_form_lambda(schedule.lr_decay))
    return opt, sched


def _resolve_corpora(data, val, sample_rate):
    if isinstance(data, PairManifest):
        train = PairCorpus.from_manifest(data, "train", sample_rate) if data.split("train") else None
        if val is None and data.split("val"):
            val = PairCorpus.from_manifest(data, "val", sample_rate)
    else:
        train = data
    if train is None or len(train) == 0:
        raise ValidationError("training split is empty")
    return train, val


def _check_finite(losses, step, phase, out_dir, dump_modules, config):
    bad = {k: v for k, v in losses.items() if not math.isfinite(v)}
    if not bad:
        return
    dump_dir = out_dir or os.path.join(os.getcwd(), "divergence_dumps")
    os.makedirs(dump_dir, exist_ok=True)
    dump = os.path.join(dump_dir, f"{phase}_diverged_step{step}.ckpt")
    save_checkpoint(dump, f"{phase}-diverged", config, dump_modules, step=step, extra={"losses": losses})
    raise TrainingDivergedError(f"{phase} loss became non-finite at step {step}: {bad}", dump_path=dump)


class _EarlyStopper:
    def __init__(self, patience):
        self.patience = patience
        self.best = math.inf
        self.bad = 0

    def update(self, value):
        """Return ``(improved, should_stop)``."""
        if value < self.best:
            self.best, self.bad = value, 0
            return True, False
        self.bad += 1
        return False, self.patience is not None and self.bad >= self.patience


def _device(device):
    return torch.device(device or os.environ.get("DRYRECOVER_DEVICE", "cpu"))


# -- phase 1: denoiser -----------------------------------------------------------

def train_denoiser(data, cfg=None, schedule=None, stft=None, val=None, out_dir=None, device=None,
                   stop_when=None):
    """Optimise ``l1_mel_loss(denoiser(wet_mel), dry_mel)``.

    ``data`` is a :class:`PairManifest` (train/val splits are read from it) or a
    :class:`PairCorpus`. The returned model holds the best-validation weights
    when validation data exists, otherwise the final weights. ``stop_when`` is an
    optional ``callable(history_record) -> bool`` checked after every step.
    """
    cfg = cfg or DenoiserConfig()
    schedule = schedule or TrainSchedule.for_phase("denoiser")
    stft = stft or StftConfig()
    if cfg.c_bin != stft.n_mels:
        raise ValidationError(f"denoiser c_bin {cfg.c_bin} != frontend n_mels {stft.n_mels}")
    train, val = _resolve_corpora(data, val, stft.sample_rate)
    dev = _device(device)
    torch.manual_seed(schedule.seed)

    model = MelDenoiser(cfg).to(dev)
    frontend = MelFrontend(stft).to(dev)
    opt, sched = make_optimizer(model.parameters(), schedule)
    config = {"denoiser": cfg.to_dict(), "stft": stft.to_dict(), "schedule": schedule.to_dict()}
    log = _JsonlLog(os.path.join(out_dir, "train_log.jsonl") if out_dir else None)
    crop = crop_length(schedule.crop_seconds, stft.sample_rate, stft.hop_length)
    crop = min(crop, (train.min_length() // stft.hop_length) * stft.hop_length)
    stopper = _EarlyStopper(schedule.early_stop_patience)
    result = TrainResult("denoiser", 0, {"denoiser": model})
    best_state = None
    val_batch = val.fixed_batch(crop, stft.hop_length) if val is not None else None

    def checkpoint(name, step):
        if not out_dir:
            return None
        return save_checkpoint(os.path.join(out_dir, name), "denoiser", config, {"denoiser": model},
                               {"denoiser": opt}, step=step)

    batches = train.batches(schedule.seed, schedule.batch_size, crop, stft.hop_length)
    for step in range(1, schedule.max_steps + 1):
        model.train()
        dry, wet = next(batches)
        with torch.no_grad():
            dry_mel = frontend(dry.to(dev))
            wet_mel = frontend(wet.to(dev))
        loss = l1_mel_loss(model(wet_mel), dry_mel)
        loss_value = loss.item()
        _check_finite({"l1_mel": loss_value}, step, "denoiser", out_dir, {"denoiser": model}, config)
        lr = opt.param_groups[0]["lr"]
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        sched.step()
        result.history.append({"step": step, "loss": loss_value, "lr": lr})
        if stop_when is not None and stop_when(result.history[-1]):
            result.stopped_early = True
            result.step = step
            break
        if step % schedule.log_every == 0 or step == 1:
            log.write(phase="denoiser", step=step, l1_mel=loss_value, lr=lr)
        if val_batch is not None and step % schedule.validate_every == 0:
            model.eval()
            with torch.no_grad():
                v_dry, v_wet = (t.to(dev) for t in val_batch)
                val_loss = l1_mel_loss(model(frontend(v_wet)), frontend(v_dry)).item()
            improved, stop = stopper.update(val_loss)
            log.write(phase="denoiser", step=step, val_l1_mel=val_loss)
            if improved:
                best_state = copy.deepcopy(model.state_dict())
                result.best_val = val_loss
                result.best_checkpoint = checkpoint("denoiser_best.ckpt", step)
            if stop:
                result.stopped_early = True
                result.step = step
                break
        if step % schedule.checkpoint_every == 0:
            result.last_checkpoint = checkpoint("denoiser_last.ckpt", step)
        result.step = step
    result.last_checkpoint = checkpoint("denoiser_last.ckpt", result.step) or result.last_checkpoint
    if best_state is not None:
        model.load_state_dict(best_state)
    model.eval()
    return result


# -- phases 2 and 3: vocoder ------------------------------------------------------

def _requires_grad(module, flag):
    for p in module.parameters():
        p.requires_grad_(flag)


class GanStep:
    """One alternating discriminator/generator update.

    Exposed separately so tests can inspect the optimizer partition.
    """

    def __init__(self, generator, bank, frontend, losses, opt_g, opt_d):
        self.generator = generator
        self.bank = bank
        self.frontend = frontend
        self.losses = losses
        self.opt_g = opt_g
        self.opt_d = opt_d

    def _split(self, outputs, n):
        real_scores, fake_scores, real_feats, fake_feats = [], [], [], []
        for scores, feats in outputs:
            real_scores.append(scores[:n])
            fake_scores.append(scores[n:])
            real_feats.append([f[:n] for f in feats])
            fake_feats.append([f[n:] for f in feats])
        return real_scores, fake_scores, real_feats, fake_feats

    def generate(self, input_mel, length):
        return self.generator(input_mel)[:, :length]

    def compute_losses(self, input_mel, dry):
        """Forward-only loss evaluation (no parameter updates)."""
        n = dry.shape[0]
        y_hat = self.generate(input_mel, dry.shape[1])
        outs = self.bank(torch.cat([dry, y_hat]))
        rs, fs, rf, ff = self._split(outs, n)
        d_loss, g_adv = lsgan_losses(rs, fs)
        fm = feature_matching_loss(rf, ff)
        mel = l1_mel_loss(self.frontend(y_hat), self.frontend(dry))
        g_total = g_adv + self.losses.lambda_fm * fm + self.losses.lambda_mel * mel
        return {"d_loss": d_loss, "g_adv": g_adv, "fm": fm, "mel_l1": mel, "g_total": g_total}

    def discriminator_step(self, y_hat, dry):
        n = dry.shape[0]
        outs = self.bank(torch.cat([dry, y_hat.detach()]))
        rs, fs, _, _ = self._split(outs, n)
        d_loss, _ = lsgan_losses(rs, fs)
        self.opt_d.zero_grad(set_to_none=True)
        d_loss.backward()
        self.opt_d.step()
        return d_loss

    def generator_step(self, y_hat, dry, target_mel):
        n = dry.shape[0]
        _requires_grad(self.bank, False)
        try:
            outs = self.bank(torch.cat([dry, y_hat]))
        finally:
            _requires_grad(self.bank, True)
        _, fs, rf, ff = self._split(outs, n)
        g_adv = sum(torch.mean((f - 1) ** 2) for f in fs)
        fm = feature_matching_loss([[f.detach() for f in r] for r in rf], ff)
        mel = l1_mel_loss(self.frontend(y_hat), target_mel)
        g_total = g_adv + self.losses.lambda_fm * fm + self.losses.lambda_mel * mel
        self.opt_g.zero_grad(set_to_none=True)
        g_total.backward()
        self.opt_g.step()
        return {"g_adv": g_adv.item(), "fm": fm.item(), "mel_l1": mel.item(), "g_total": g_total.item()}

    def __call__(self, input_mel, dry):
        with torch.no_grad():
            target_mel = self.frontend(dry)
        y_hat = self.generate(input_mel, dry.shape[1])
        d_loss = self.discriminator_step(y_hat, dry)
        out = self.generator_step(y_hat, dry, target_mel)
        out["d_loss"] = d_loss.item()
        return out


def _gan_loop(phase, train, val, gen, bank, vcfg, schedule, losses, stft, out_dir, dev, mel_source, extra_modules,
              config, opt_state=None, stop_when=None):
    frontend = MelFrontend(stft).to(dev)
    opt_g, sched_g = make_optimizer(gen.parameters(), schedule)
    opt_d, sched_d = make_optimizer(bank.parameters(), schedule)
    if opt_state is not None:
        opt_state.load_optimizer("generator", opt_g)
        opt_state.load_optimizer("discriminator", opt_d)
        for opt in (opt_g, opt_d):
            for g in opt.param_groups:
                g["lr"] = g["initial_lr"] = schedule.lr
                g["betas"], g["weight_decay"] = schedule.betas, schedule.weight_decay
        sched_g = torch.optim.lr_scheduler.LambdaLR(opt_g, _closed_form_lambda(schedule.lr_decay))
        sched_d = torch.optim.lr_scheduler.LambdaLR(opt_d, _closed_form_lambda(schedule.lr_decay))
    step_fn = GanStep(gen, bank, frontend, losses, opt_g, opt_d)
    log = _JsonlLog(os.path.join(out_dir, "train_log.jsonl") if out_dir else None)
    crop = crop_length(schedule.crop_seconds, stft.sample_rate, stft.hop_length)
    crop = min(crop, (train.min_length() // stft.hop_length) * stft.hop_length)
    steps_per_epoch = max(1, len(train) // schedule.batch_size)
    stopper = _EarlyStopper(schedule.early_stop_patience)
    result = TrainResult(phase, 0, {"generator": gen, "discriminator": bank, **extra_modules})
    best_state = None
    val_batch = val.fixed_batch(crop, stft.hop_length) if val is not None else None
    modules = {"generator": gen, "discriminator": bank}

    def checkpoint(name, step):
        if not out_dir:
            return None
        return save_checkpoint(os.path.join(out_dir, name), "vocoder", config, modules,
                               {"generator": opt_g, "discriminator": opt_d}, step=step)

    batches = train.batches(schedule.seed, schedule.batch_size, crop, stft.hop_length)
    for step in range(1, schedule.max_steps + 1):
        gen.train()
        bank.train()
        dry, wet = (t.to(dev) for t in next(batches))
        input_mel = mel_source(dry, wet, frontend)
        out = step_fn(input_mel, dry)
        _check_finite(out, step, phase, out_dir, modules, config)
        lr = opt_g.param_groups[0]["lr"]
        if schedule.decay_every == "step" or step % steps_per_epoch == 0:
            sched_g.step()
            sched_d.step()
        result.history.append({"step": step, "lr": lr, **out})
        if stop_when is not None and stop_when(result.history[-1]):
            result.stopped_early = True
            result.step = step
            break
        if step % schedule.log_every == 0 or step == 1:
            log.write(phase=phase, step=step, lr=lr, **out)
        if val_batch is not None and step % schedule.validate_every == 0:
            gen.eval()
            with torch.no_grad():
                v_dry, v_wet = (t.to(dev) for t in val_batch)
                y_hat = gen(mel_source(v_dry, v_wet, frontend))[:, : v_dry.shape[1]]
                val_loss = l1_mel_loss(frontend(y_hat), frontend(v_dry)).item()
            improved, stop = stopper.update(val_loss)
            log.write(phase=phase, step=step, val_mel_l1=val_loss)
            if improved:
                best_state = (copy.deepcopy(gen.state_dict()), copy.deepcopy(bank.state_dict()))
                result.best_val = val_loss
                result.best_checkpoint = checkpoint(f"{phase}_best.ckpt", step)
            if stop:
                result.stopped_early = True
                result.step = step
                break
        if step % schedule.checkpoint_every == 0:
            result.last_checkpoint = checkpoint(f"{phase}_last.ckpt", step)
        result.step = step
    result.last_checkpoint = checkpoint(f"{phase}_last.ckpt", result.step) or result.last_checkpoint
    if best_state is not None:
        gen.load_state_dict(best_state[0])
        bank.load_state_dict(best_state[1])
    gen.eval()
    bank.eval()
    return result


def _dry_mel_source(dry, wet, frontend):
    with torch.no_grad():
        return frontend(dry)


def train_vocoder(data, cfg=None, schedule=None, stft=None, losses=None, val=None, out_dir=None, device=None,
                  stop_when=None):
    """Adversarial vocoder training on ground-truth dry Mel -> dry waveform."""
    cfg = cfg or VocoderConfig()
    schedule = schedule or TrainSchedule.for_phase("vocoder")
    stft = stft or StftConfig()
    losses = losses or LossWeights()
    if cfg.mel_bins != stft.n_mels or cfg.hop_length != stft.hop_length:
        raise ValidationError("vocoder mel_bins/hop_length disagree with the frontend")
    train, val = _resolve_corpora(data, val, stft.sample_rate)
    dev = _device(device)
    torch.manual_seed(schedule.seed)
    gen, bank = Generator(cfg).to(dev), DiscriminatorBank(cfg).to(dev)
    config = {"vocoder": cfg.to_dict(), "stft": stft.to_dict(), "losses": losses.to_dict(),
              "schedule": schedule.to_dict()}
    return _gan_loop("vocoder", train, val, gen, bank, cfg, schedule, losses, stft, out_dir, dev,
                     _dry_mel_source, {}, config, stop_when=stop_when)


def _load_denoiser(ckpt):
    if isinstance(ckpt, MelDenoiser):
        return ckpt
    if not hasattr(ckpt, "tensors"):
        ckpt = load_checkpoint(ckpt, expect_kind=("denoiser", "pipeline"))
    model = MelDenoiser(DenoiserConfig.from_dict(ckpt.config["denoiser"]))
    return ckpt.load_module("denoiser", model)


def finetune_vocoder(data, denoiser_ckpt, vocoder_ckpt, schedule=None, losses=None, val=None, out_dir=None,
                     device=None, stop_when=None):
    """Continue vocoder training with the generator fed ``denoiser(wet_mel)``.

    The denoiser is frozen: no gradients reach it and its weights are never
    updated. Targets remain the ground-truth dry waveforms. Checkpoints may
    be paths, loaded :class:`Checkpoint` objects, or (for the denoiser) a model.
    """
    schedule = schedule or TrainSchedule.for_phase("finetune")
    losses = losses or LossWeights()
    voc = vocoder_ckpt if hasattr(vocoder_ckpt, "tensors") else load_checkpoint(vocoder_ckpt, expect_kind="vocoder")
    vcfg = VocoderConfig.from_dict(voc.config["vocoder"])
    stft = StftConfig(**voc.config["stft"])
    denoiser = _load_denoiser(denoiser_ckpt)
    if denoiser.cfg.c_bin != vcfg.mel_bins:
        raise ValidationError(f"denoiser emits {denoiser.cfg.c_bin} bins, vocoder expects {vcfg.mel_bins}")
    train, val = _resolve_corpora(data, val, stft.sample_rate)
    dev = _device(device)
    torch.manual_seed(schedule.seed)
    denoiser = denoiser.to(dev).eval()
    _requires_grad(denoiser, False)
    gen = voc.load_module("generator", Generator(vcfg)).to(dev)
    bank = voc.load_module("discriminator", DiscriminatorBank(vcfg)).to(dev)

    def denoised_mel(dry, wet, frontend):
        with torch.no_grad():
            return denoiser(frontend(wet))

    config = {"vocoder": vcfg.to_dict(), "stft": stft.to_dict(), "losses": losses.to_dict(),
              "schedule": schedule.to_dict(), "denoiser": denoiser.cfg.to_dict()}
    return _gan_loop("finetune", train, val, gen, bank, vcfg, schedule, losses, stft, out_dir, dev,
                     denoised_mel, {"denoiser": denoiser}, config, opt_state=voc,
                     stop_when=stop_when)


def parameter_hash(module):
    """Stable digest of a module's parameters (used to verify freezing)."""
    h = hashlib.sha256()
    for name, p in sorted(module.named_parameters()):
        h.update(name.encode())
        h.update(np.ascontiguousarray(p.detach().cpu().numpy()).tobytes())
    return h.hexdigest()
