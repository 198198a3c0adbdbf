"""Cross-domain conversion at a fixed diffusion timestep.

Two class-conditioned encoder-decoder networks bridge the noisy manifolds of
the handwritten (hw) and machine-printed (mp) domains at one timestep
``t_star``: one maps hw-noisy images to mp-noisy images, the other maps the
reverse direction. They are trained CycleGAN-style against two domain
discriminators, with cycle-consistency and identity L1 terms, on unpaired
batches diffused to ``t_star`` by the closed-form forward process. The
denoising backbone stays frozen throughout.

Conversion of a clean image then runs: diffuse to ``t_star``, apply the
direction's conversion network, and denoise in the target domain. The
baseline ``sdedit_convert`` is the same pipeline without the conversion
network.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import checkpoint as ckpt
from .diffusion import (DOMAIN_INDEX, HW, MP, Condition, DenoiserBundle, ImageBatch,
                        denoise_from, q_sample)
from .schedule import NoiseSchedule
from .seeding import TorchStream, derive_seed, init_module, numpy_stream
from .unet import NULL_CLASS, NUM_CLASSES

logger = logging.getLogger(__name__)

LOG_FLOOR = 1e-7          # clamp for log arguments in the adversarial loss
RANGE_SLACK = 0.05        # tolerated overshoot outside [-1, 1] before clamping

HW_TO_MP = "hw2mp"
MP_TO_HW = "mp2hw"
DIRECTIONS = (HW_TO_MP, MP_TO_HW)


class ConversionNet(nn.Module):
    """Residual encoder-decoder mapping one noisy manifold onto the other.

    The character class is injected as a learned embedding broadcast-added
    at the bottleneck; the table includes a null-token row.
    """

    def __init__(self, base_channels: int = 16, num_classes: int = NUM_CLASSES):
        super().__init__()
        c = base_channels
        groups = math.gcd(4, c)
        self.enc = nn.Sequential(
            nn.Conv2d(1, c, 7, padding=3), nn.GroupNorm(groups, c), nn.ReLU(),
            nn.Conv2d(c, 2 * c, 3, stride=2, padding=1), nn.GroupNorm(groups, 2 * c), nn.ReLU(),
        )
        self.class_embed = nn.Embedding(num_classes + 1, 2 * c)
        self.res1 = self._res_block(2 * c, groups)
        self.res2 = self._res_block(2 * c, groups)
        self.dec = nn.Sequential(
            nn.ConvTranspose2d(2 * c, c, 4, stride=2, padding=1), nn.GroupNorm(groups, c), nn.ReLU(),
            nn.Conv2d(c, 1, 7, padding=3),
        )

    @staticmethod
    def _res_block(ch, groups):
        return nn.Sequential(
            nn.Conv2d(ch, ch, 3, padding=1), nn.GroupNorm(groups, ch), nn.ReLU(),
            nn.Conv2d(ch, ch, 3, padding=1), nn.GroupNorm(groups, ch),
        )

    def forward(self, x: torch.Tensor, class_idx: torch.Tensor) -> torch.Tensor:
        h = self.enc(x)
        h = h + self.class_embed(class_idx)[:, :, None, None]
        h = h + self.res1(h)
        h = h + self.res2(h)
        return self.dec(h)


class Discriminator(nn.Module):
    """Class-projection discriminator returning one raw score per image.

    The score is fed through a sigmoid by the loss functions; the gradient
    penalty acts on the raw score.
    """

    def __init__(self, base_channels: int = 16, num_classes: int = NUM_CLASSES):
        super().__init__()
        c = base_channels
        self.features = nn.Sequential(
            nn.Conv2d(1, c, 4, stride=2, padding=1), nn.LeakyReLU(0.2),
            nn.Conv2d(c, 2 * c, 4, stride=2, padding=1), nn.LeakyReLU(0.2),
            nn.Conv2d(2 * c, 2 * c, 3, padding=1), nn.LeakyReLU(0.2),
        )
        self.head = nn.Linear(2 * c, 1)
        self.class_embed = nn.Embedding(num_classes + 1, 2 * c)

    def forward(self, x: torch.Tensor, class_idx: torch.Tensor) -> torch.Tensor:
        h = self.features(x).mean(dim=(2, 3))
        score = self.head(h).squeeze(1) + (self.class_embed(class_idx) * h).sum(dim=1)
        return score


@dataclass
class ConversionHyperparams:
    lambda_cycle: float = 2.0
    lambda_identity: float = 1.0
    gp_weight: float = 10.0
    batch_size: int = 16
    epochs: int = 30
    lr: float = 2e-4
    base_channels: int = 16

    def __post_init__(self):
        for name in ("lambda_cycle", "lambda_identity", "gp_weight"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")


@dataclass
class ConversionPair:
    """Both conversion networks and both discriminators, bound to one t_star."""

    t_star: int
    hw_to_mp: ConversionNet
    mp_to_hw: ConversionNet
    disc_hw: Discriminator        # scores the hw noisy manifold
    disc_mp: Discriminator        # scores the mp noisy manifold
    ddpm_fingerprint: str = ""
    hyper: ConversionHyperparams = field(default_factory=ConversionHyperparams)
    meta: dict = field(default_factory=dict)

    def net_for(self, direction: str) -> ConversionNet:
        if direction not in DIRECTIONS:
            raise ValueError(f"unknown direction {direction!r}")
        return self.hw_to_mp if direction == HW_TO_MP else self.mp_to_hw

    def save(self, path: str | Path) -> str:
        arrays = {}
        for prefix, module in self._modules():
            arrays.update(ckpt.state_arrays(module, prefix + "."))
        arch = {
            "family": "resnet_codec",
            "base_channels": self.hyper.base_channels,
            "num_classes": NUM_CLASSES,
        }
        meta = dict(self.meta)
        meta.update({
            "t_star": self.t_star,
            "ddpm_fingerprint": self.ddpm_fingerprint,
            "hyper": vars(self.hyper),
        })
        return ckpt.save_checkpoint(path, "conversion", arch, meta, arrays)

    @classmethod
    def load(cls, path: str | Path) -> "ConversionPair":
        data = ckpt.load_checkpoint(path, expect_kind="conversion")
        hyper = ConversionHyperparams(**data.meta["hyper"])
        pair = cls(
            t_star=int(data.meta["t_star"]),
            hw_to_mp=ConversionNet(hyper.base_channels),
            mp_to_hw=ConversionNet(hyper.base_channels),
            disc_hw=Discriminator(hyper.base_channels),
            disc_mp=Discriminator(hyper.base_channels),
            ddpm_fingerprint=data.meta["ddpm_fingerprint"],
            hyper=hyper,
            meta=data.meta,
        )
        for prefix, module in pair._modules():
            ckpt.load_state_arrays(module, data.arrays, prefix + ".")
            module.eval()
        return pair

    def _modules(self):
        return (("hw_to_mp", self.hw_to_mp), ("mp_to_hw", self.mp_to_hw),
                ("disc_hw", self.disc_hw), ("disc_mp", self.disc_mp))


# ---------------------------------------------------------------------------
# Loss terms

def cycle_loss(pair: ConversionPair, hw_noisy: torch.Tensor, hw_classes: torch.Tensor,
               mp_noisy: torch.Tensor, mp_classes: torch.Tensor) -> torch.Tensor:
    """L1 penalty for round trips failing to return to their input."""
    if hw_noisy.shape[1:] != mp_noisy.shape[1:]:
        raise ValueError("batches must share the image shape")
    back_hw = pair.mp_to_hw(pair.hw_to_mp(hw_noisy, hw_classes), hw_classes)
    back_mp = pair.hw_to_mp(pair.mp_to_hw(mp_noisy, mp_classes), mp_classes)
    return (back_hw - hw_noisy).abs().mean() + (back_mp - mp_noisy).abs().mean()


def identity_loss(pair: ConversionPair, hw_noisy: torch.Tensor, hw_classes: torch.Tensor,
                  mp_noisy: torch.Tensor, mp_classes: torch.Tensor) -> torch.Tensor:
    """L1 penalty for changing inputs that are already in the target domain."""
    stay_mp = pair.hw_to_mp(mp_noisy, mp_classes)
    stay_hw = pair.mp_to_hw(hw_noisy, hw_classes)
    return (stay_mp - mp_noisy).abs().mean() + (stay_hw - hw_noisy).abs().mean()


def adversarial_loss(gen: nn.Module, disc: nn.Module,
                     real: torch.Tensor, real_classes: torch.Tensor,
                     fake_source: torch.Tensor, fake_classes: torch.Tensor,
                     detach_fake: bool = False) -> tuple[torch.Tensor, torch.Tensor]:
    """Log-loss adversarial terms for one generator/discriminator pairing.

    Returns ``(gen_term, disc_term)``: the discriminator maximizes
    ``disc_term = E[log D(real)] + E[log(1 - D(fake))]`` while the generator
    minimizes the non-saturating ``gen_term = -E[log D(fake)]``. Sigmoid
    outputs are clamped to at least LOG_FLOOR so both stay finite.
    """
    fake = gen(fake_source, fake_classes)
    if detach_fake:
        fake = fake.detach()
    score_real = torch.sigmoid(disc(real, real_classes))
    score_fake = torch.sigmoid(disc(fake, fake_classes))
    if not bool(torch.isfinite(score_real).all() & torch.isfinite(score_fake).all()):
        raise FloatingPointError("discriminator produced a non-finite score")
    disc_term = (torch.log(score_real.clamp_min(LOG_FLOOR)).mean()
                 + torch.log((1.0 - score_fake).clamp_min(LOG_FLOOR)).mean())
    gen_term = -torch.log(score_fake.clamp_min(LOG_FLOOR)).mean()
    return gen_term, disc_term


def gradient_penalty(disc: nn.Module, real: torch.Tensor, fake: torch.Tensor,
                     classes: torch.Tensor, stream: TorchStream) -> torch.Tensor:
    """Penalize deviations of the score's input-gradient norm from 1.

    Evaluated at per-item random interpolates between real and fake.
    """
    if real.shape != fake.shape:
        raise ValueError("real and fake batches must have the same shape")
    u = stream.rand(real.shape[0]).view(-1, 1, 1, 1)
    x_hat = (u * real + (1.0 - u) * fake.detach()).requires_grad_(True)
    score = disc(x_hat, classes)
    grad, = torch.autograd.grad(score.sum(), x_hat, create_graph=True)
    if not bool(torch.isfinite(grad).all()):
        raise FloatingPointError("non-finite discriminator gradient")
    norms = grad.flatten(1).norm(2, dim=1)
    return ((norms - 1.0) ** 2).mean()


@dataclass
class LossTerms:
    """One training step's loss decomposition (tensors for backward).

    ``report()`` gives plain floats; the reported totals are recomputed
    from the reported parts so total == weighted sum of parts holds exactly.
    """

    adv_hw_to_mp: torch.Tensor    # generator term of hw_to_mp against disc_mp
    adv_mp_to_hw: torch.Tensor    # generator term of mp_to_hw against disc_hw
    cycle: torch.Tensor
    identity: torch.Tensor
    disc_hw_term: torch.Tensor    # discriminator log-likelihood terms (maximized)
    disc_mp_term: torch.Tensor
    gp_hw: torch.Tensor
    gp_mp: torch.Tensor
    hyper: ConversionHyperparams

    def generator_objective(self) -> torch.Tensor:
        return (self.adv_hw_to_mp + self.adv_mp_to_hw
                + self.hyper.lambda_cycle * self.cycle
                + self.hyper.lambda_identity * self.identity)

    def discriminator_objective(self) -> torch.Tensor:
        return (-(self.disc_hw_term + self.disc_mp_term)
                + self.hyper.gp_weight * (self.gp_hw + self.gp_mp))

    def report(self) -> dict[str, float]:
        parts = {
            "adv_hw_to_mp": float(self.adv_hw_to_mp),
            "adv_mp_to_hw": float(self.adv_mp_to_hw),
            "cycle": float(self.cycle),
            "identity": float(self.identity),
            "disc_hw_term": float(self.disc_hw_term),
            "disc_mp_term": float(self.disc_mp_term),
            "gp_hw": float(self.gp_hw),
            "gp_mp": float(self.gp_mp),
        }
        parts["generator_total"] = (parts["adv_hw_to_mp"] + parts["adv_mp_to_hw"]
                                    + self.hyper.lambda_cycle * parts["cycle"]
                                    + self.hyper.lambda_identity * parts["identity"])
        parts["discriminator_total"] = (-(parts["disc_hw_term"] + parts["disc_mp_term"])
                                        + self.hyper.gp_weight * (parts["gp_hw"] + parts["gp_mp"]))
        return parts


def total_loss(pair: ConversionPair, hw_noisy: torch.Tensor, hw_classes: torch.Tensor,
               mp_noisy: torch.Tensor, mp_classes: torch.Tensor,
               hyper: ConversionHyperparams, stream: TorchStream) -> LossTerms:
    """Evaluate every loss term on one pair of unpaired noisy batches."""
    adv_f, disc_mp_term = adversarial_loss(pair.hw_to_mp, pair.disc_mp,
                                           mp_noisy, mp_classes, hw_noisy, hw_classes)
    adv_g, disc_hw_term = adversarial_loss(pair.mp_to_hw, pair.disc_hw,
                                           hw_noisy, hw_classes, mp_noisy, mp_classes)
    with torch.no_grad():
        fake_mp = pair.hw_to_mp(hw_noisy, hw_classes)
        fake_hw = pair.mp_to_hw(mp_noisy, mp_classes)
    return LossTerms(
        adv_hw_to_mp=adv_f,
        adv_mp_to_hw=adv_g,
        cycle=cycle_loss(pair, hw_noisy, hw_classes, mp_noisy, mp_classes),
        identity=identity_loss(pair, hw_noisy, hw_classes, mp_noisy, mp_classes),
        disc_hw_term=disc_hw_term,
        disc_mp_term=disc_mp_term,
        gp_hw=gradient_penalty(pair.disc_hw, hw_noisy, fake_hw, hw_classes, stream),
        gp_mp=gradient_penalty(pair.disc_mp, mp_noisy, fake_mp, mp_classes, stream),
        hyper=hyper,
    )


# ---------------------------------------------------------------------------
# Training

def train_conversion(ddpm: DenoiserBundle, hw_train, mp_train, t_star: int,
                     hyper: ConversionHyperparams, seed: int,
                     log_every: int = 50) -> tuple[ConversionPair, list[dict[str, float]]]:
    """Train the conversion networks at ``t_star`` on unpaired clean batches.

    Each step draws one batch per domain, diffuses both to ``t_star`` with
    fresh noise, then updates the discriminators and the generators in
    alternation. The denoising backbone is untouched; its parameter
    fingerprint is asserted identical before and after.
    """
    schedule = ddpm.schedule
    t_star = schedule.check_t(t_star)
    hw_batchable = hw_train.to_batch() if hasattr(hw_train, "to_batch") else hw_train
    mp_batchable = mp_train.to_batch() if hasattr(mp_train, "to_batch") else mp_train
    if hw_batchable.domain != HW or mp_batchable.domain != MP:
        raise ValueError("train_conversion needs one hw dataset and one mp dataset")

    fingerprint_before = ddpm.fingerprint
    init_seed = derive_seed(seed, f"conversion.init.t{t_star}")
    pair = ConversionPair(
        t_star=t_star,
        hw_to_mp=init_module(ConversionNet(hyper.base_channels), derive_seed(init_seed, "f")),
        mp_to_hw=init_module(ConversionNet(hyper.base_channels), derive_seed(init_seed, "g")),
        disc_hw=init_module(Discriminator(hyper.base_channels), derive_seed(init_seed, "d")),
        disc_mp=init_module(Discriminator(hyper.base_channels), derive_seed(init_seed, "dp")),
        ddpm_fingerprint=fingerprint_before,
        hyper=hyper,
    )
    opt_disc = torch.optim.Adam(
        list(pair.disc_hw.parameters()) + list(pair.disc_mp.parameters()), lr=hyper.lr)
    opt_gen = torch.optim.Adam(
        list(pair.hw_to_mp.parameters()) + list(pair.mp_to_hw.parameters()), lr=hyper.lr)

    data_rng = numpy_stream(seed, f"conversion.data.t{t_star}")
    noise = TorchStream(derive_seed(seed, f"conversion.noise.t{t_star}"))

    n_hw, n_mp = len(hw_batchable), len(mp_batchable)
    bs = min(hyper.batch_size, n_hw, n_mp)
    steps_per_epoch = max(1, min(n_hw, n_mp) // bs)
    history: list[dict[str, float]] = []

    for epoch in range(hyper.epochs):
        for _ in range(steps_per_epoch):
            hw_idx = torch.from_numpy(data_rng.choice(n_hw, size=bs, replace=False))
            mp_idx = torch.from_numpy(data_rng.choice(n_mp, size=bs, replace=False))
            hw_x0, hw_cls = hw_batchable.pixels[hw_idx], hw_batchable.classes[hw_idx]
            mp_x0, mp_cls = mp_batchable.pixels[mp_idx], mp_batchable.classes[mp_idx]
            hw_noisy = q_sample(hw_x0, t_star, noise.randn_like(hw_x0), schedule)
            mp_noisy = q_sample(mp_x0, t_star, noise.randn_like(mp_x0), schedule)

            # discriminator step
            _, disc_mp_term = adversarial_loss(pair.hw_to_mp, pair.disc_mp,
                                               mp_noisy, mp_cls, hw_noisy, hw_cls,
                                               detach_fake=True)
            _, disc_hw_term = adversarial_loss(pair.mp_to_hw, pair.disc_hw,
                                               hw_noisy, hw_cls, mp_noisy, mp_cls,
                                               detach_fake=True)
            with torch.no_grad():
                fake_hw = pair.mp_to_hw(mp_noisy, mp_cls)
                fake_mp = pair.hw_to_mp(hw_noisy, hw_cls)
            gp_hw = gradient_penalty(pair.disc_hw, hw_noisy, fake_hw, hw_cls, noise)
            gp_mp = gradient_penalty(pair.disc_mp, mp_noisy, fake_mp, mp_cls, noise)
            disc_obj = (-(disc_hw_term + disc_mp_term)
                        + hyper.gp_weight * (gp_hw + gp_mp))
            opt_disc.zero_grad()
            disc_obj.backward()
            opt_disc.step()

            # generator step
            adv_f, _ = adversarial_loss(pair.hw_to_mp, pair.disc_mp,
                                        mp_noisy, mp_cls, hw_noisy, hw_cls)
            adv_g, _ = adversarial_loss(pair.mp_to_hw, pair.disc_hw,
                                        hw_noisy, hw_cls, mp_noisy, mp_cls)
            cyc = cycle_loss(pair, hw_noisy, hw_cls, mp_noisy, mp_cls)
            ident = identity_loss(pair, hw_noisy, hw_cls, mp_noisy, mp_cls)
            gen_obj = (adv_f + adv_g + hyper.lambda_cycle * cyc
                       + hyper.lambda_identity * ident)
            opt_gen.zero_grad()
            gen_obj.backward()
            opt_gen.step()

            history.append({
                "adv_hw_to_mp": float(adv_f), "adv_mp_to_hw": float(adv_g),
                "cycle": float(cyc), "identity": float(ident),
                "disc_hw_term": float(disc_hw_term), "disc_mp_term": float(disc_mp_term),
                "gp_hw": float(gp_hw), "gp_mp": float(gp_mp),
            })
        if log_every and (epoch + 1) % max(1, log_every // steps_per_epoch) == 0:
            last = history[-1]
            logger.info("conversion epoch %d/%d cycle %.3f identity %.3f",
                        epoch + 1, hyper.epochs, last["cycle"], last["identity"])

    if ddpm.fingerprint != fingerprint_before:
        raise RuntimeError("frozen denoiser parameters changed during conversion training")
    for _, module in pair._modules():
        module.eval()
    pair.meta = {"seed": seed, "epochs": hyper.epochs, "steps": len(history)}
    return pair, history


# ---------------------------------------------------------------------------
# Conversion procedures

def _resolve_classes(x0: ImageBatch, classes: torch.Tensor | None,
                     unconditional: bool) -> torch.Tensor | None:
    if unconditional:
        return None
    return x0.classes if classes is None else classes


def _diffuse_transform_denoise(x0: ImageBatch, t_start: int, target_domain: str,
                               transform, classes: torch.Tensor | None,
                               ddpm: DenoiserBundle, stream: TorchStream) -> ImageBatch:
    """Shared pipeline: forward-diffuse, optionally convert, then denoise.

    ``transform=None`` is the baseline path; with a conversion network the
    stream consumption is identical, so the two trajectories coincide
    whenever the network is an identity map.
    """
    schedule = ddpm.schedule
    if t_start == 0:
        return ImageBatch(x0.pixels.clone(), target_domain, x0.classes.clone())
    eps = stream.randn_like(x0.pixels)
    x_t = q_sample(x0.pixels, t_start, eps, schedule)
    if transform is not None:
        n = x_t.shape[0]
        idx = (torch.full((n,), NULL_CLASS, dtype=torch.long)
               if classes is None else classes.long())
        with torch.no_grad():
            x_t = transform(x_t, idx)
    cond = Condition(classes=classes, domain=target_domain)
    with torch.no_grad():
        out = denoise_from(ddpm.model, x_t, t_start, cond, schedule, stream)
    overshoot = float((out.abs() - 1.0).clamp_min(0.0).max()) if out.numel() else 0.0
    if overshoot > RANGE_SLACK:
        warnings.warn(f"denoised pixels exceed [-1, 1] by {overshoot:.3f}; clamping",
                      RuntimeWarning, stacklevel=2)
    return ImageBatch(out.clamp(-1.0, 1.0), target_domain, x0.classes.clone())


def convert(x0: ImageBatch, direction: str, pair: ConversionPair, ddpm: DenoiserBundle,
            stream: TorchStream, classes: torch.Tensor | None = None,
            unconditional: bool = False, t_star: int | None = None) -> ImageBatch:
    """Convert clean source-domain images into the other domain.

    Diffuses to the pair's ``t_star``, maps across with the direction's
    conversion network, then denoises under the target-domain condition.
    ``classes`` defaults to the batch's own labels; ``unconditional=True``
    uses the null token throughout instead.
    """
    if direction not in DIRECTIONS:
        raise ValueError(f"unknown direction {direction!r}")
    source, target = (HW, MP) if direction == HW_TO_MP else (MP, HW)
    if x0.domain != source:
        raise ValueError(f"direction {direction} expects {source} input, got {x0.domain}")
    if t_star is not None and t_star != pair.t_star:
        raise ValueError(f"pair was trained for t_star={pair.t_star}, called with {t_star}")
    if pair.ddpm_fingerprint and pair.ddpm_fingerprint != ddpm.fingerprint:
        raise ValueError("conversion pair was trained against a different denoiser checkpoint")
    cls = _resolve_classes(x0, classes, unconditional)
    return _diffuse_transform_denoise(x0, pair.t_star, target, pair.net_for(direction),
                                      cls, ddpm, stream)


def sdedit_convert(x0: ImageBatch, direction: str, t_start: int, ddpm: DenoiserBundle,
                   stream: TorchStream, classes: torch.Tensor | None = None,
                   unconditional: bool = False) -> ImageBatch:
    """Baseline conversion: diffuse the source image, then denoise it in the
    target domain with no conversion network in between.

    ``t_start == 0`` returns the input unchanged (relabeled to the target
    domain); ``t_start == T`` is pure target-domain generation.
    """
    if direction not in DIRECTIONS:
        raise ValueError(f"unknown direction {direction!r}")
    source, target = (HW, MP) if direction == HW_TO_MP else (MP, HW)
    if x0.domain != source:
        raise ValueError(f"direction {direction} expects {source} input, got {x0.domain}")
    t_start = int(t_start)
    if not 0 <= t_start <= ddpm.schedule.T:
        raise ValueError(f"t_start {t_start} outside [0, {ddpm.schedule.T}]")
    cls = _resolve_classes(x0, classes, unconditional)
    return _diffuse_transform_denoise(x0, t_start, target, None, cls, ddpm, stream)
