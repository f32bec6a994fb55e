"""Adversarial segmenter supervision for the layout diffusion model.

A per-pixel (K+1)-way segmenter plays the discriminator: real-style
images must be segmented into their K semantic classes (background is an
ordinary class, channel 0), while generator outputs must be assigned the
extra "fake" class K.  Class-balancing weights are inverse pixel
frequencies over the batch.  The generator is rewarded when the
discriminator classifies its pixels as their intended semantic class,
which is the pixel-level layout-alignment feedback.
"""

from __future__ import annotations

import csv
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import checkpoint as ckpt
from .diffusion import (
    ConvBlock,
    DenoiserNet,
    DiffusionConfig,
    NoiseSchedule,
    build_schedule,
    diffusion_loss,
    init_parameters,
    predict_x0,
    q_sample,
)
from .scenes import LayoutScene
from .seeding import torch_rng

PROB_CLAMP_MIN = 1e-7


class AdvConfigError(ValueError):
    pass


class LabelError(ValueError):
    pass


class TrainingDivergedError(RuntimeError):
    def __init__(self, step: int, losses: dict):
        super().__init__(f"non-finite loss at step {step}: {losses}")
        self.step = step
        self.losses = losses


@dataclass
class ClassWeights:
    """Inverse-frequency weights: gamma[c] * pixel_counts[c] = B*H*W."""

    gamma: np.ndarray
    pixel_counts: np.ndarray

    def tensor(self, like: torch.Tensor) -> torch.Tensor:
        return torch.as_tensor(self.gamma, dtype=like.dtype)


def _check_one_hot(labels: torch.Tensor) -> None:
    vals_ok = ((labels == 0) | (labels == 1)).all()
    sums_ok = (labels.sum(dim=1) == 1).all()
    if not bool(vals_ok and sums_ok):
        raise LabelError("labels must be one-hot per pixel over the class channels")


def class_weights(labels: torch.Tensor) -> ClassWeights:
    """Per-class inverse pixel frequency over a (B, K, H, W) one-hot batch.

    gamma[c] = B*H*W / count[c] for classes present in the batch, and 0
    for absent classes (which then contribute nothing to the losses).
    """
    if labels.dim() != 4:
        raise LabelError(f"expected (B, K, H, W) labels, got {tuple(labels.shape)}")
    _check_one_hot(labels)
    counts = labels.sum(dim=(0, 2, 3)).to(torch.int64).numpy()
    b, _, h, w = labels.shape
    total = b * h * w
    gamma = np.where(counts > 0, total / np.maximum(counts, 1), 0.0).astype(np.float64)
    return ClassWeights(gamma=gamma, pixel_counts=counts)


def _weighted_label_ce(probs: torch.Tensor, labels: torch.Tensor,
                       weights: ClassWeights) -> torch.Tensor:
    """Batch-mean of the pixel-summed, gamma-weighted cross entropy."""
    logp = torch.log(probs.clamp(PROB_CLAMP_MIN, 1.0))
    gamma = weights.tensor(probs).view(1, -1, 1, 1)
    per_item = -(gamma * labels.to(probs.dtype) * logp).sum(dim=(1, 2, 3))
    return per_item.mean()


def discriminator_loss(real_images: torch.Tensor, fake_images: torch.Tensor,
                       layouts: torch.Tensor, disc: nn.Module,
                       weights: ClassWeights | None = None) -> torch.Tensor:
    """Cross-entropy discriminator objective.

    Real pixels are scored against their one-hot layout labels with
    inverse-frequency class weights; fake pixels against the constant
    fake class (the last output channel), unweighted.  Per-pixel terms
    are summed, the batch dimension averaged.
    """
    if weights is None:
        weights = class_weights(layouts)
    p_real = disc(real_images)
    if p_real.shape[1] != layouts.shape[1] + 1:
        raise LabelError(
            f"discriminator emits {p_real.shape[1]} classes, labels have {layouts.shape[1]}")
    real_term = _weighted_label_ce(p_real[:, :-1], layouts, weights)
    p_fake = disc(fake_images)[:, -1]
    fake_term = -torch.log(p_fake.clamp(PROB_CLAMP_MIN, 1.0)).sum(dim=(1, 2)).mean()
    return real_term + fake_term


@contextmanager
def frozen(module: nn.Module):
    """Temporarily stop gradients from flowing into a module's parameters."""
    states = [p.requires_grad for p in module.parameters()]
    for p in module.parameters():
        p.requires_grad_(False)
    try:
        yield
    finally:
        for p, s in zip(module.parameters(), states):
            p.requires_grad_(s)


def generator_adv_loss(fake_images: torch.Tensor, layouts: torch.Tensor, disc: nn.Module,
                       weights: ClassWeights | None = None) -> torch.Tensor:
    """Weighted cross entropy of disc(fake) toward the intended layout.

    Zero when every generated pixel is classified as its layout class;
    the discriminator's parameters see no gradient.
    """
    if weights is None:
        weights = class_weights(layouts)
    with frozen(disc):
        p_fake = disc(fake_images)
    if p_fake.shape[1] != layouts.shape[1] + 1:
        raise LabelError(
            f"discriminator emits {p_fake.shape[1]} classes, labels have {layouts.shape[1]}")
    return _weighted_label_ce(p_fake[:, :-1], layouts, weights)


class SegBlock(nn.Module):
    def __init__(self, cin: int, cout: int):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.norm1 = nn.GroupNorm(4, cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.norm2 = nn.GroupNorm(4, cout)

    def forward(self, x):
        h = F.silu(self.norm1(self.conv1(x)))
        return F.silu(self.norm2(self.conv2(h)))


class SegmenterDiscriminator(nn.Module):
    """Encoder-decoder mapping an image to per-pixel (K+1)-class probabilities.

    Channels 0..K-1 are the semantic classes (0 = background), channel K
    is the fake class.
    """

    def __init__(self, num_classes: int, channels: int = 3, width: int = 16, seed: int = 0):
        super().__init__()
        if width % 4:
            raise AdvConfigError("width must be a multiple of 4")
        self.num_classes = num_classes
        self.channels = channels
        self.width = width
        self.enc1 = SegBlock(channels, width)
        self.enc2 = SegBlock(width, 2 * width)
        self.mid = SegBlock(2 * width, 2 * width)
        self.dec2 = SegBlock(4 * width, 2 * width)
        self.dec1 = SegBlock(3 * width, width)
        self.head = nn.Conv2d(width, num_classes + 1, 1)
        self.pool = nn.AvgPool2d(2)
        init_parameters(self, torch_rng(seed, "segmenter-init"))

    def forward(self, img: torch.Tensor) -> torch.Tensor:
        h1 = self.enc1(img)
        h2 = self.enc2(self.pool(h1))
        h3 = self.mid(self.pool(h2))
        u2 = self.dec2(torch.cat([F.interpolate(h3, scale_factor=2, mode="nearest"), h2], dim=1))
        u1 = self.dec1(torch.cat([F.interpolate(u2, scale_factor=2, mode="nearest"), h1], dim=1))
        return torch.softmax(self.head(u1), dim=1)


@dataclass(frozen=True)
class AdvConfig:
    lambda_adv: float = 0.1
    gen_lr: float = 2e-3
    disc_lr: float = 2e-3
    disc_steps_per_gen_step: int = 1
    epochs: int = 1
    batch_size: int = 16
    seed: int = 0
    style_drop_prob: float = 0.1
    disc_width: int = 16

    def validate(self) -> None:
        if self.gen_lr <= 0 or self.disc_lr <= 0:
            raise AdvConfigError("learning rates must be positive")
        if self.lambda_adv < 0:
            raise AdvConfigError("lambda_adv must be >= 0")
        if self.disc_steps_per_gen_step < 1:
            raise AdvConfigError("disc_steps_per_gen_step must be >= 1")
        if not (0.0 <= self.style_drop_prob < 1.0):
            raise AdvConfigError("style_drop_prob must lie in [0, 1)")

    def to_json(self) -> dict:
        return dict(self.__dict__)

    @staticmethod
    def from_json(d: dict) -> "AdvConfig":
        return AdvConfig(**d)


@dataclass
class LossRecord:
    step: int
    l_diff: float
    l_adv_gen: float
    l_dis: float


@dataclass
class TrainState:
    generator: DenoiserNet
    discriminator: SegmenterDiscriminator
    gen_opt: torch.optim.Adam
    disc_opt: torch.optim.Adam
    step: int = 0
    history: list[LossRecord] = field(default_factory=list)

    def validate(self) -> None:
        if self.step != len(self.history):
            raise AdvConfigError(f"step {self.step} != history length {len(self.history)}")


def init_train_state(diff_config: DiffusionConfig, adv_config: AdvConfig) -> TrainState:
    adv_config.validate()
    gen = DenoiserNet(diff_config)
    disc = SegmenterDiscriminator(
        num_classes=diff_config.layout_channels,
        channels=diff_config.channels,
        width=adv_config.disc_width,
        seed=adv_config.seed,
    )
    return TrainState(
        generator=gen,
        discriminator=disc,
        gen_opt=torch.optim.Adam(gen.parameters(), lr=adv_config.gen_lr),
        disc_opt=torch.optim.Adam(disc.parameters(), lr=adv_config.disc_lr),
    )


def _apply_style_drop(style_ids: torch.Tensor, null_id: int, prob: float,
                      rng: torch.Generator) -> torch.Tensor:
    # Drawn even when prob == 0 so rng consumption does not depend on it.
    u = torch.rand(style_ids.shape, generator=rng)
    return torch.where(u < prob, torch.full_like(style_ids, null_id), style_ids)


def train_step(batch, state: TrainState, config: AdvConfig, schedule: NoiseSchedule,
               rng_disc: torch.Generator, rng_gen: torch.Generator) -> TrainState:
    """One adversarial round: disc update(s), then one generator update.

    ``batch`` is (images, layouts, style_ids): real-style images in
    [-1, 1], one-hot layouts, and style token ids.  Fake images for the
    discriminator are single-step x0 estimates at a uniformly sampled
    timestep, detached from the generator.  Generator and discriminator
    consume separate rng streams, so the generator trajectory with
    lambda_adv = 0 is bit-identical to plain diffusion training.
    """
    x0, layouts, style_ids = batch
    gen, disc = state.generator, state.discriminator
    b = x0.shape[0]

    l_dis_value = 0.0
    for _ in range(config.disc_steps_per_gen_step):
        t = torch.randint(0, schedule.timesteps, (b,), generator=rng_disc)
        eps = torch.randn(x0.shape, generator=rng_disc, dtype=x0.dtype)
        with torch.no_grad():
            x_t = q_sample(x0, t, eps, schedule)
            fake = predict_x0(x_t, t, gen(x_t, t, layouts, style_ids), schedule)
        l_dis = discriminator_loss(x0, fake, layouts, disc)
        state.disc_opt.zero_grad()
        l_dis.backward()
        state.disc_opt.step()
        l_dis_value = float(l_dis.detach())

    eff_styles = _apply_style_drop(style_ids, gen.config.null_style_id,
                                   config.style_drop_prob, rng_gen)
    l_diff, aux = diffusion_loss(x0, layouts, eff_styles, gen, schedule, rng_gen,
                                 return_aux=True)
    if config.lambda_adv > 0:
        fake = predict_x0(aux["x_t"], aux["t"], aux["eps_hat"], schedule)
        l_adv = generator_adv_loss(fake, layouts, disc)
        total = l_diff + config.lambda_adv * l_adv
        l_adv_value = float(l_adv.detach())
    else:
        total = l_diff
        l_adv_value = 0.0
    state.gen_opt.zero_grad()
    total.backward()
    state.gen_opt.step()

    losses = {"l_diff": float(l_diff.detach()), "l_adv_gen": l_adv_value, "l_dis": l_dis_value}
    if not all(np.isfinite(v) for v in losses.values()):
        raise TrainingDivergedError(state.step, losses)
    state.history.append(LossRecord(state.step, losses["l_diff"], losses["l_adv_gen"],
                                    losses["l_dis"]))
    state.step += 1
    return state


@dataclass
class TrainExample:
    image: np.ndarray  # (H, W, 3) float in [-1, 1]
    scene: LayoutScene
    style: str


def _to_tensors(dataset: list[TrainExample], diff_config: DiffusionConfig):
    imgs = torch.stack([
        torch.from_numpy(np.ascontiguousarray(ex.image.transpose(2, 0, 1))).float()
        for ex in dataset])
    layouts = torch.stack([torch.from_numpy(ex.scene.one_hot()) for ex in dataset])
    styles = torch.tensor([diff_config.style_id(ex.style) for ex in dataset], dtype=torch.long)
    return imgs, layouts, styles


def train(dataset: list[TrainExample], diff_config: DiffusionConfig, adv_config: AdvConfig,
          out_dir: Path | None = None, resume_from: Path | None = None,
          max_steps: int | None = None) -> TrainState:
    """Adversarial training over seeded shuffled batches.

    Returns the final TrainState (its ``history`` is the per-step loss
    log).  With ``out_dir`` set, writes gen.ckpt / disc.ckpt / losses.csv.
    """
    if not dataset:
        raise AdvConfigError("empty training dataset")
    adv_config.validate()
    state = init_train_state(diff_config, adv_config)
    schedule = build_schedule(diff_config)
    if resume_from is not None:
        load_train_state(resume_from, state)

    imgs, layouts, styles = _to_tensors(dataset, diff_config)
    n = len(dataset)
    rng_shuffle = torch_rng(adv_config.seed, "train", "shuffle")
    rng_disc = torch_rng(adv_config.seed, "train", "disc")
    rng_gen = torch_rng(adv_config.seed, "train", "gen")

    done = False
    for _ in range(adv_config.epochs):
        perm = torch.randperm(n, generator=rng_shuffle)
        for lo in range(0, n, adv_config.batch_size):
            idx = perm[lo:lo + adv_config.batch_size]
            batch = (imgs[idx], layouts[idx], styles[idx])
            train_step(batch, state, adv_config, schedule, rng_disc, rng_gen)
            if max_steps is not None and state.step >= max_steps:
                done = True
                break
        if done:
            break

    state.validate()
    if out_dir is not None:
        save_train_state(Path(out_dir), state, schedule)
    return state


def save_train_state(out_dir: Path, state: TrainState, schedule: NoiseSchedule) -> dict:
    from .diffusion import save_denoiser

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    gen_path = out_dir / "gen.ckpt"
    disc_path = out_dir / "disc.ckpt"
    save_denoiser(gen_path, state.generator, schedule, state.step)
    arrays = ckpt.module_state_arrays(state.discriminator, "disc.")
    arrays.update(ckpt.optimizer_state_arrays(state.gen_opt, "gen_opt."))
    arrays.update(ckpt.optimizer_state_arrays(state.disc_opt, "disc_opt."))
    ckpt.save_checkpoint(disc_path, arrays, {
        "kind": "discriminator",
        "num_classes": state.discriminator.num_classes,
        "channels": state.discriminator.channels,
        "width": state.discriminator.width,
        "step": state.step,
    })
    log_path = out_dir / "losses.csv"
    write_loss_log(log_path, state.history)
    return {"gen": str(gen_path), "disc": str(disc_path), "losses": str(log_path)}


def load_train_state(run_dir: Path, state: TrainState) -> None:
    """Restore generator/discriminator/optimizers saved by save_train_state."""
    from .diffusion import load_denoiser

    run_dir = Path(run_dir)
    gen, _, step = load_denoiser(run_dir / "gen.ckpt")
    state.generator.load_state_dict(gen.state_dict())
    arrays, meta = ckpt.load_checkpoint(run_dir / "disc.ckpt")
    ckpt.load_module_state(state.discriminator, arrays, "disc.")
    ckpt.load_optimizer_state(state.gen_opt, arrays, "gen_opt.")
    ckpt.load_optimizer_state(state.disc_opt, arrays, "disc_opt.")
    state.step = step
    rows = read_loss_log(run_dir / "losses.csv") if (run_dir / "losses.csv").exists() else []
    state.history = rows[:step]


def load_discriminator(path: Path) -> SegmenterDiscriminator:
    arrays, meta = ckpt.load_checkpoint(path)
    if meta.get("kind") != "discriminator":
        raise ckpt.CheckpointError(f"{path} is not a discriminator checkpoint")
    disc = SegmenterDiscriminator(num_classes=meta["num_classes"], channels=meta["channels"],
                                  width=meta["width"])
    ckpt.load_module_state(disc, arrays, "disc.")
    return disc


def write_loss_log(path: Path, history: list[LossRecord]) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["step", "L_diff", "L_adv_gen", "L_Dis"])
        for rec in history:
            writer.writerow([rec.step, repr(rec.l_diff), repr(rec.l_adv_gen), repr(rec.l_dis)])


def read_loss_log(path: Path) -> list[LossRecord]:
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    return [LossRecord(int(r["step"]), float(r["L_diff"]), float(r["L_adv_gen"]),
                       float(r["L_Dis"])) for r in rows]


def train_segmenter(dataset: list[TrainExample], num_classes: int, *, width: int = 16,
                    steps: int = 600, lr: float = 2e-3, batch_size: int = 16,
                    seed: int = 0, channels: int = 3) -> SegmenterDiscriminator:
    """Train a plain segmenter (same architecture as the discriminator).

    Uses only the weighted real-class cross entropy, no fake term; used
    as a variant-neutral judge for layout-faithfulness evaluation.
    """
    if not dataset:
        raise AdvConfigError("empty segmenter dataset")
    seg = SegmenterDiscriminator(num_classes=num_classes, channels=channels, width=width,
                                 seed=seed)
    opt = torch.optim.Adam(seg.parameters(), lr=lr)
    imgs = torch.stack([
        torch.from_numpy(np.ascontiguousarray(ex.image.transpose(2, 0, 1))).float()
        for ex in dataset])
    layouts = torch.stack([torch.from_numpy(ex.scene.one_hot()) for ex in dataset])
    rng = torch_rng(seed, "segmenter", "batches")
    n = len(dataset)
    for _ in range(steps):
        idx = torch.randint(0, n, (min(batch_size, n),), generator=rng)
        probs = seg(imgs[idx])
        loss = _weighted_label_ce(probs[:, :-1], layouts[idx], class_weights(layouts[idx]))
        opt.zero_grad()
        loss.backward()
        opt.step()
    seg.eval()
    return seg
