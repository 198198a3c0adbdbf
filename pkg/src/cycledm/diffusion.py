"""Conditional DDPM backbone: forward diffusion, training loss, and sampling.

The forward process corrupts an image ``x0`` to step ``t`` in closed form:

    x_t = sqrt(alpha_bar_t) * x0 + sqrt(1 - alpha_bar_t) * eps

and the learned reverse process removes the predicted noise one step at a
time:

    x_{t-1} = (x_t - (1 - alpha_t) / sqrt(1 - alpha_bar_t) * eps_hat)
              / sqrt(alpha_t) + sigma_t * z

``z`` is fresh Gaussian noise supplied by the caller; by convention it is
zero at the final step so that ``x_0`` comes out noise-free.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from . import checkpoint as ckpt
from .schedule import NoiseSchedule, make_schedule
from .seeding import TorchStream, derive_seed, init_module, numpy_stream
from .unet import NULL_CLASS, NUM_CLASSES, ConditionalDenoiser, SplitDenoiser

logger = logging.getLogger(__name__)

HW = "hw"
MP = "mp"
DOMAINS = (HW, MP)
DOMAIN_INDEX = {HW: 0, MP: 1}

# predictor signature: (x, t, class_idx, domain_idx) -> predicted noise
Predictor = Callable[[torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor], torch.Tensor]


@dataclass
class ImageBatch:
    """A batch of normalized glyph images from a single domain.

    ``pixels`` is (N, 1, H, W) float32 in [-1, 1]; ``classes`` is (N,) int64
    with values in 0..25.
    """

    pixels: torch.Tensor
    domain: str
    classes: torch.Tensor

    def __post_init__(self):
        if self.domain not in DOMAINS:
            raise ValueError(f"unknown domain {self.domain!r}")
        if self.pixels.ndim != 4 or self.pixels.shape[1] != 1:
            raise ValueError(f"pixels must be (N, 1, H, W), got {tuple(self.pixels.shape)}")
        if self.classes.shape != (self.pixels.shape[0],):
            raise ValueError("classes must be one index per image")
        if self.classes.numel() and not bool(((self.classes >= 0) & (self.classes < NUM_CLASSES)).all()):
            raise ValueError("class indices must lie in 0..25")
        bound = float(self.pixels.abs().max()) if self.pixels.numel() else 0.0
        if bound > 1.0 + 1e-5:
            raise ValueError(f"pixels must lie in [-1, 1], found magnitude {bound:.4f}")

    def __len__(self) -> int:
        return self.pixels.shape[0]


@dataclass(frozen=True)
class Condition:
    """Denoiser conditioning: character class (or the null token) and domain.

    ``classes`` is a per-item index tensor, or None to select the learned
    null token (the unconditional pathway) for every item.
    """

    classes: torch.Tensor | None
    domain: str

    def tokens(self, n: int) -> tuple[torch.Tensor, torch.Tensor]:
        if self.classes is None:
            class_idx = torch.full((n,), NULL_CLASS, dtype=torch.long)
        else:
            if self.classes.shape != (n,):
                raise ValueError(f"expected {n} class tokens, got {tuple(self.classes.shape)}")
            class_idx = self.classes.long()
        domain_idx = torch.full((n,), DOMAIN_INDEX[self.domain], dtype=torch.long)
        return class_idx, domain_idx


def _gather(table: np.ndarray, t: torch.Tensor | int, like: torch.Tensor) -> torch.Tensor:
    """Schedule lookup broadcast over the image dims, scalar or per-item t."""
    if isinstance(t, torch.Tensor) and t.ndim == 1:
        vals = torch.from_numpy(table[t.numpy()]).to(like.dtype)
        return vals.view(-1, *([1] * (like.ndim - 1)))
    return torch.tensor(float(table[int(t)]), dtype=like.dtype)


def q_sample(x0: torch.Tensor, t: torch.Tensor | int, eps: torch.Tensor,
             schedule: NoiseSchedule) -> torch.Tensor:
    """Diffuse ``x0`` to step ``t`` with the given noise draw (forward process)."""
    if eps.shape != x0.shape:
        raise ValueError(f"eps shape {tuple(eps.shape)} != x0 shape {tuple(x0.shape)}")
    if isinstance(t, torch.Tensor) and t.ndim == 1:
        if int(t.min()) < 1 or int(t.max()) > schedule.T:
            raise ValueError(f"timesteps outside [1, {schedule.T}]")
    else:
        schedule.check_t(t)
    ab = _gather(schedule.alpha_bars, t, x0)
    return torch.sqrt(ab) * x0 + torch.sqrt(1.0 - ab) * eps


def p_sample_step(model: Predictor, x_t: torch.Tensor, t: int, cond: Condition,
                  schedule: NoiseSchedule, z: torch.Tensor | None) -> torch.Tensor:
    """One reverse step from ``x_t`` to ``x_{t-1}``.

    ``z`` is the caller's noise draw; pass None (treated as zero) at the
    final step so the output is noise-free.
    """
    t = schedule.check_t(t)
    if z is not None and z.shape != x_t.shape:
        raise ValueError(f"z shape {tuple(z.shape)} != x_t shape {tuple(x_t.shape)}")
    n = x_t.shape[0]
    class_idx, domain_idx = cond.tokens(n)
    t_vec = torch.full((n,), t, dtype=torch.long)
    eps_hat = model(x_t, t_vec, class_idx, domain_idx)
    if eps_hat.shape != x_t.shape:
        raise ValueError("predictor output shape must match its input")

    alpha = float(schedule.alphas[t])
    alpha_bar = float(schedule.alpha_bars[t])
    mean = (x_t - (1.0 - alpha) / np.sqrt(1.0 - alpha_bar) * eps_hat) / np.sqrt(alpha)
    if z is None:
        return mean
    return mean + float(schedule.sigmas[t]) * z


def denoise_from(model: Predictor, x_t: torch.Tensor, t_start: int, cond: Condition,
                 schedule: NoiseSchedule, stream: TorchStream) -> torch.Tensor:
    """Run the reverse process from ``t_start`` down to 0.

    ``t_start == 0`` returns the input unchanged. The noise ``z`` for each
    step is drawn from ``stream`` (and forced to zero on the last step), so
    the full trajectory is a deterministic function of the stream's seed.
    """
    t_start = int(t_start)
    if not 0 <= t_start <= schedule.T:
        raise ValueError(f"t_start {t_start} outside [0, {schedule.T}]")
    x = x_t
    for t in range(t_start, 0, -1):
        z = stream.randn_like(x) if t > 1 else None
        x = p_sample_step(model, x, t, cond, schedule, z)
    return x


def ddpm_loss(model: Predictor, x0: torch.Tensor, class_idx: torch.Tensor,
              domain_idx: torch.Tensor, schedule: NoiseSchedule,
              stream: TorchStream) -> torch.Tensor:
    """Noise-prediction training objective.

    Per item: t ~ Uniform{1..T}, eps ~ N(0, 1), then the squared error
    between eps and the prediction at x_t, averaged over every element of
    the batch.
    """
    n = x0.shape[0]
    t = stream.randint(1, schedule.T + 1, (n,))
    eps = stream.randn_like(x0)
    x_t = q_sample(x0, t, eps, schedule)
    eps_hat = model(x_t, t, class_idx, domain_idx)
    return F.mse_loss(eps_hat, eps)


# ---------------------------------------------------------------------------
# Training

@dataclass
class DdpmTrainParams:
    steps: int = 1500
    batch_size: int = 16
    lr: float = 2e-3
    null_rate: float = 0.1          # probability of replacing the class token by null
    base_channels: int = 16
    emb_dim: int = 48
    joint_model: bool = True        # one domain-conditioned net, or one net per domain

    def arch(self) -> dict:
        return {
            "family": "cond_unet",
            "mode": "joint" if self.joint_model else "split",
            "base_channels": self.base_channels,
            "emb_dim": self.emb_dim,
            "num_classes": NUM_CLASSES,
        }


def build_denoiser(arch: dict) -> torch.nn.Module:
    if arch.get("family") != "cond_unet":
        raise ValueError(f"unknown denoiser family {arch.get('family')!r}")
    cls = ConditionalDenoiser if arch["mode"] == "joint" else SplitDenoiser
    return cls(base_channels=arch["base_channels"], emb_dim=arch["emb_dim"],
               num_classes=arch["num_classes"])


@dataclass
class DenoiserBundle:
    """A trained noise predictor plus everything needed to sample with it."""

    model: torch.nn.Module
    schedule: NoiseSchedule
    arch: dict
    meta: dict = field(default_factory=dict)

    @property
    def fingerprint(self) -> str:
        return ckpt.module_fingerprint(self.model)

    def predict(self, x, t, class_idx, domain_idx):
        with torch.no_grad():
            return self.model(x, t, class_idx, domain_idx)

    def save(self, path: str | Path) -> str:
        meta = dict(self.meta)
        meta["schedule"] = {
            "T": self.schedule.T,
            "beta_start": float(self.schedule.betas[1]),
            "beta_end": float(self.schedule.betas[self.schedule.T]),
        }
        return ckpt.save_checkpoint(path, "ddpm", self.arch, meta,
                                    ckpt.state_arrays(self.model))

    @classmethod
    def load(cls, path: str | Path) -> "DenoiserBundle":
        data = ckpt.load_checkpoint(path, expect_kind="ddpm")
        model = build_denoiser(data.arch)
        ckpt.load_state_arrays(model, data.arrays)
        model.eval()
        s = data.meta["schedule"]
        schedule = make_schedule(s["T"], s["beta_start"], s["beta_end"])
        return cls(model=model, schedule=schedule, arch=data.arch, meta=data.meta)


def train_ddpm(train_sets: Sequence, schedule: NoiseSchedule, params: DdpmTrainParams,
               seed: int, log_every: int = 200) -> tuple[DenoiserBundle, list[float]]:
    """Train the conditional denoiser jointly over the given domain datasets.

    The domain is an ordinary condition, so one run covers both domains.
    With probability ``null_rate`` an item's class token is replaced by the
    null token, which trains the unconditional mode alongside. Returns the
    bundle and the per-step loss trajectory.
    """
    pixels, class_idx, domain_idx = _stack_sets(train_sets)
    if pixels.shape[0] == 0:
        raise ValueError("training data is empty")

    model = init_module(build_denoiser(params.arch()), derive_seed(seed, "ddpm.init"))
    opt = torch.optim.Adam(model.parameters(), lr=params.lr)
    data_rng = numpy_stream(seed, "ddpm.data")
    noise = TorchStream(derive_seed(seed, "ddpm.noise"))

    history: list[float] = []
    for step in range(params.steps):
        idx = data_rng.choice(pixels.shape[0], size=min(params.batch_size, pixels.shape[0]),
                              replace=False)
        idx_t = torch.from_numpy(idx)
        cls = class_idx[idx_t].clone()
        if params.null_rate > 0:
            drop = noise.rand(len(idx)) < params.null_rate
            cls[drop] = NULL_CLASS
        loss = ddpm_loss(model, pixels[idx_t], cls, domain_idx[idx_t], schedule, noise)
        opt.zero_grad()
        loss.backward()
        opt.step()
        history.append(float(loss.detach()))
        if log_every and (step + 1) % log_every == 0:
            recent = float(np.mean(history[-log_every:]))
            logger.info("ddpm step %d/%d loss %.4f", step + 1, params.steps, recent)

    model.eval()
    bundle = DenoiserBundle(model=model, schedule=schedule, arch=params.arch(),
                            meta={"seed": seed, "steps": params.steps,
                                  "final_loss": history[-1]})
    return bundle, history


def _stack_sets(train_sets: Sequence) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    pixels, classes, domains = [], [], []
    for ds in train_sets:
        batch = ds.to_batch() if hasattr(ds, "to_batch") else ds
        pixels.append(batch.pixels)
        classes.append(batch.classes)
        domains.append(torch.full((len(batch),), DOMAIN_INDEX[batch.domain], dtype=torch.long))
    return torch.cat(pixels), torch.cat(classes), torch.cat(domains)


def smoothed(values: Sequence[float], window: int = 50) -> list[float]:
    """Trailing moving average used when reporting loss trajectories."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.size == 0:
        return []
    out = np.empty_like(arr)
    for i in range(arr.size):
        out[i] = arr[max(0, i - window + 1): i + 1].mean()
    return out.tolist()
