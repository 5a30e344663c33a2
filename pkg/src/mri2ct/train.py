"""Alternating adversarial training loop.

Per step: (1) the discriminator updates on a real CT patch and a detached
fake, (2) the generator updates on the weighted composite objective.  Every
step emits a :class:`StepReport`; the loop writes line-delimited JSON logs
and periodic checkpoints, and a fixed seed reproduces the run bit for bit
(single-threaded mode), including across a checkpoint resume.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from . import checkpoint
from . import tensor as T
from .discriminator import DiscriminatorConfig, discriminator_forward, init_discriminator
from .errors import ConfigError, DataError, NumericsError
from .generator import GeneratorConfig, generator_forward, init_generator
from .losses import (LossWeights, SlicedFeatureExtractor, gan_loss_discriminator,
                     gan_loss_generator, l1_loss, perceptual_loss,
                     total_generator_loss)
from .optim import adam_init, adam_step, grad_norm, lr_at, zero_grads
from .tensor import Tensor
from .volume import body_mask, normalize_hu, sample_patch


@dataclass(frozen=True)
class TrainConfig:
    max_lr: float = 2e-4
    epochs: int = 100                      # full-scale default; desk runs use far fewer
    steps_per_epoch: int = 100
    patch: tuple[int, int, int] = (16, 16, 16)
    batch: int = 2
    seed: int = 0
    ckpt_every: int = 0                    # epochs between checkpoints; 0 = final only
    grad_clip: float = 0.0                 # 0 disables clipping
    perc_seed: int = 7

    def __post_init__(self):
        if self.epochs < 1 or self.steps_per_epoch < 1 or self.batch < 1:
            raise ConfigError("epochs, steps_per_epoch and batch must be >= 1")
        if len(self.patch) != 3 or min(self.patch) < 1:
            raise ConfigError("patch must be 3 positive extents")

    def to_dict(self):
        d = {
            "max_lr": self.max_lr, "epochs": self.epochs,
            "steps_per_epoch": self.steps_per_epoch, "patch": list(self.patch),
            "batch": self.batch, "seed": self.seed, "ckpt_every": self.ckpt_every,
            "grad_clip": self.grad_clip, "perc_seed": self.perc_seed,
        }
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "patch" in d:
            d["patch"] = tuple(d["patch"])
        return cls(**d)


@dataclass
class StepReport:
    epoch: int
    step: int
    global_step: int
    lr: float
    d_loss: float
    gan: float
    l1: float
    perc: float
    total: float
    gnorm_g: float
    gnorm_d: float

    def to_json(self):
        return json.dumps(self.__dict__, sort_keys=True)


@dataclass
class Models:
    """Everything train_step touches, bundled for checkpointing."""

    gen_cfg: GeneratorConfig
    gen: object
    disc_cfg: DiscriminatorConfig
    disc: object
    adam_g: object
    adam_d: object
    fx: SlicedFeatureExtractor
    weights: LossWeights


def build_models(gen_cfg, disc_cfg, weights, seed, perc_seed=7):
    rng = np.random.default_rng(seed)
    gen = init_generator(gen_cfg, rng)
    disc = init_discriminator(disc_cfg, rng)
    return Models(
        gen_cfg=gen_cfg, gen=gen, disc_cfg=disc_cfg, disc=disc,
        adam_g=adam_init(list(gen.named())),
        adam_d=adam_init(list(disc.named())),
        fx=SlicedFeatureExtractor(seed=perc_seed),
        weights=weights,
    )


def _check_finite(name, value, snapshot):
    if not np.isfinite(value):
        raise NumericsError(f"non-finite {name} at step {snapshot.get('global_step')}",
                            snapshot)


def _clip_grads(named, limit):
    if limit <= 0:
        return
    norm = grad_norm(named)
    if norm > limit:
        scale = limit / norm
        for _, p in named:
            if p.grad is not None:
                p.grad *= p.grad.dtype.type(scale)


def train_step(mri_batch, ct_batch, models, lr, global_step=0, grad_clip=0.0):
    """One alternating update; batches are float32 [B,1,D,H,W] arrays in
    normalized intensity."""
    gen_named = list(models.gen.named())
    disc_named = list(models.disc.named())
    snapshot = {"global_step": global_step, "lr": lr}

    mri = Tensor(mri_batch)
    ct = Tensor(ct_batch)

    # (1) discriminator update on real + detached fake
    with T.no_grad():
        fake_frozen = generator_forward(mri, models.gen, models.gen_cfg)
    real_logits = discriminator_forward(ct, models.disc, models.disc_cfg)
    fake_logits = discriminator_forward(fake_frozen, models.disc, models.disc_cfg)
    d_loss = gan_loss_discriminator(real_logits, fake_logits)
    d_loss_val = d_loss.item()
    snapshot["d_loss"] = d_loss_val
    _check_finite("discriminator loss", d_loss_val, snapshot)
    T.backward(d_loss)
    _clip_grads(disc_named, grad_clip)
    gnorm_d = grad_norm(disc_named)
    adam_step(disc_named, models.adam_d, lr)
    zero_grads(gen_named)

    # (2) generator update on the composite objective
    for _, p in disc_named:
        p.requires_grad = False          # generator phase: skip disc weight grads
    fake = generator_forward(mri, models.gen, models.gen_cfg)
    fake_logits = discriminator_forward(fake, models.disc, models.disc_cfg)
    gan = gan_loss_generator(fake_logits)
    l1 = l1_loss(fake, ct)
    perc = perceptual_loss(fake, ct, models.fx)
    total, parts = total_generator_loss(gan, l1, perc, models.weights)
    snapshot.update(parts)
    _check_finite("generator loss", parts["total"], snapshot)
    T.backward(total)
    for _, p in disc_named:
        p.requires_grad = True
    _clip_grads(gen_named, grad_clip)
    gnorm_g = grad_norm(gen_named)
    adam_step(gen_named, models.adam_g, lr)
    zero_grads(disc_named)

    return StepReport(
        epoch=0, step=0, global_step=global_step, lr=lr,
        d_loss=d_loss_val, gan=parts["gan"], l1=parts["l1"], perc=parts["perc"],
        total=parts["total"], gnorm_g=gnorm_g, gnorm_d=gnorm_d,
    )


def _sample_batch(mri, ct, mask, patch, batch, rng):
    ms, cs = [], []
    for _ in range(batch):
        mp, cp, _ = sample_patch(mri, ct, mask, patch, rng)
        ms.append(mp[None])
        cs.append(cp[None])
    return np.stack(ms), np.stack(cs)


def _rng_state(rng):
    state = rng.bit_generator.state
    return json.loads(json.dumps(state, default=str))


def _restore_rng(state):
    rng = np.random.default_rng(0)
    fixed = dict(state)
    fixed["state"] = {k: int(v) for k, v in state["state"].items()}
    if "has_uint32" in fixed:
        fixed["has_uint32"] = int(fixed["has_uint32"])
    if "uinteger" in fixed:
        fixed["uinteger"] = int(fixed["uinteger"])
    rng.bit_generator.state = fixed
    return rng


def save_training_checkpoint(path, models, cfg, epoch, global_step, rng):
    config = {
        "format": 1,
        "generator": models.gen_cfg.to_dict(),
        "discriminator": models.disc_cfg.to_dict(),
        "train": cfg.to_dict(),
        "weights": models.weights.to_dict(),
        "progress": {"epoch": epoch, "global_step": global_step,
                     "adam_g_step": models.adam_g.step,
                     "adam_d_step": models.adam_d.step},
        "rng_state": _rng_state(rng),
    }
    arrays = {}
    for name, p in models.gen.named():
        arrays[f"generator.{name}"] = p.data
    for name, p in models.disc.named():
        arrays[f"discriminator.{name}"] = p.data
    for name in models.adam_g.m:
        arrays[f"adam_g.m.{name}"] = models.adam_g.m[name]
        arrays[f"adam_g.v.{name}"] = models.adam_g.v[name]
    for name in models.adam_d.m:
        arrays[f"adam_d.m.{name}"] = models.adam_d.m[name]
        arrays[f"adam_d.v.{name}"] = models.adam_d.v[name]
    checkpoint.save(path, config, arrays)


def load_training_checkpoint(path):
    """Rebuild models/optimizer/rng exactly as they were saved."""
    config, arrays = checkpoint.load(path)
    if config.get("format") != 1 or "progress" not in config:
        raise DataError(f"{path}: not a training checkpoint")
    gen_cfg = GeneratorConfig.from_dict(config["generator"])
    disc_cfg = DiscriminatorConfig.from_dict(config["discriminator"])
    tcfg = TrainConfig.from_dict(config["train"])
    weights = LossWeights.from_dict(config["weights"])
    models = build_models(gen_cfg, disc_cfg, weights, seed=tcfg.seed,
                          perc_seed=tcfg.perc_seed)
    for name, p in models.gen.named():
        p.data = np.ascontiguousarray(arrays[f"generator.{name}"])
    for name, p in models.disc.named():
        p.data = np.ascontiguousarray(arrays[f"discriminator.{name}"])
    for name in models.adam_g.m:
        models.adam_g.m[name] = np.ascontiguousarray(arrays[f"adam_g.m.{name}"])
        models.adam_g.v[name] = np.ascontiguousarray(arrays[f"adam_g.v.{name}"])
    for name in models.adam_d.m:
        models.adam_d.m[name] = np.ascontiguousarray(arrays[f"adam_d.m.{name}"])
        models.adam_d.v[name] = np.ascontiguousarray(arrays[f"adam_d.v.{name}"])
    progress = config["progress"]
    models.adam_g.step = int(progress["adam_g_step"])
    models.adam_d.step = int(progress["adam_d_step"])
    rng = _restore_rng(config["rng_state"])
    return models, tcfg, int(progress["epoch"]), int(progress["global_step"]), rng


def train(mri, ct, gen_cfg, disc_cfg, tcfg, weights=None, out_dir=".",
          log_name="train_log.jsonl", resume=None, on_step=None):
    """Epoch loop over mask-centered random patches of one aligned pair.

    Returns the final checkpoint path.  ``resume`` continues a saved run and
    reproduces the unresumed trajectory exactly.
    """
    if mri.extents != ct.extents:
        raise DataError(f"MRI/CT extents differ: {mri.extents} vs {ct.extents}")
    div = gen_cfg.spatial_divisor
    if any(p % div for p in tcfg.patch):
        raise ConfigError(f"patch {tcfg.patch} must be divisible by the "
                          f"generator's spatial divisor {div}")
    weights = weights or LossWeights()
    if mri.unit == "HU":
        mri = normalize_hu(mri)
    if mri.unit != "normalized":
        raise DataError("MRI volume must be HU or normalized")
    mask = body_mask(ct)
    ct_norm = normalize_hu(ct)

    os.makedirs(out_dir, exist_ok=True)
    if resume is not None:
        models, saved_cfg, start_epoch, global_step, rng = load_training_checkpoint(resume)
        if saved_cfg != tcfg:
            raise ConfigError("resume config differs from the checkpointed one")
        start_epoch += 1
    else:
        models = build_models(gen_cfg, disc_cfg, weights, seed=tcfg.seed,
                              perc_seed=tcfg.perc_seed)
        start_epoch, global_step = 0, 0
        rng = np.random.default_rng(tcfg.seed + 1)

    log_path = os.path.join(out_dir, log_name)
    mode = "a" if resume is not None else "w"
    final_path = os.path.join(out_dir, "ckpt_final.m2t")
    with open(log_path, mode, encoding="utf-8") as log:
        for epoch in range(start_epoch, tcfg.epochs):
            lr = lr_at(epoch, tcfg.max_lr, tcfg.epochs)
            for step in range(tcfg.steps_per_epoch):
                mb, cb = _sample_batch(mri, ct_norm, mask, tcfg.patch,
                                       tcfg.batch, rng)
                report = train_step(mb, cb, models, lr, global_step,
                                    tcfg.grad_clip)
                report.epoch = epoch
                report.step = step
                log.write(report.to_json() + "\n")
                if on_step is not None:
                    on_step(report)
                global_step += 1
            if tcfg.ckpt_every and (epoch + 1) % tcfg.ckpt_every == 0:
                path = os.path.join(out_dir, f"ckpt_epoch{epoch:04d}.m2t")
                save_training_checkpoint(path, models, tcfg, epoch, global_step, rng)
        save_training_checkpoint(final_path, models, tcfg, tcfg.epochs - 1,
                                 global_step, rng)
    return final_path
