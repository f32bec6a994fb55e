"""Layout-conditioned denoising diffusion model.

The generator is a small U-Net predicting the noise added by the forward
process.  Conditioning enters two ways: the one-hot semantic layout is
concatenated to the network input, and a discrete style token (plus the
timestep) is injected as a per-block feature bias.  Images live in
[-1, 1]; values are clamped only in ``predict_x0`` and at the end of
``sample``.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import checkpoint as ckpt
from .scenes import LayoutScene
from .seeding import torch_rng


class DiffusionConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DiffusionConfig:
    timesteps: int = 200
    beta_min: float = 1e-4
    beta_max: float = 0.02
    image_size: tuple[int, int] = (32, 32)
    channels: int = 3
    base_width: int = 16
    style_vocab: tuple[str, ...] = ("sim", "real")
    num_classes: int = 3
    seed: int = 0

    def validate(self) -> None:
        if not (0 < self.beta_min <= self.beta_max < 1):
            raise DiffusionConfigError(
                f"need 0 < beta_min <= beta_max < 1, got ({self.beta_min}, {self.beta_max})")
        if self.timesteps < 2:
            raise DiffusionConfigError("timesteps must be >= 2")
        h, w = self.image_size
        if h % 4 or w % 4:
            raise DiffusionConfigError("image size must be divisible by 4 (two downsamplings)")
        if self.base_width % 4:
            raise DiffusionConfigError("base_width must be a multiple of 4")
        if not self.style_vocab:
            raise DiffusionConfigError("style_vocab must be non-empty")

    @property
    def layout_channels(self) -> int:
        return self.num_classes + 1  # background channel 0 rides along

    @property
    def null_style_id(self) -> int:
        return len(self.style_vocab)

    def style_id(self, token: str) -> int:
        try:
            return self.style_vocab.index(token)
        except ValueError:
            raise DiffusionConfigError(f"style token {token!r} not in vocab {self.style_vocab}")

    def to_json(self) -> dict:
        d = dataclasses.asdict(self)
        d["image_size"] = list(self.image_size)
        d["style_vocab"] = list(self.style_vocab)
        return d

    @staticmethod
    def from_json(d: dict) -> "DiffusionConfig":
        d = dict(d)
        d["image_size"] = tuple(d["image_size"])
        d["style_vocab"] = tuple(d["style_vocab"])
        return DiffusionConfig(**d)


@dataclass(frozen=True)
class NoiseSchedule:
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bar: np.ndarray

    @property
    def timesteps(self) -> int:
        return len(self.betas)

    def validate(self) -> None:
        b = self.betas
        if not ((b > 0) & (b < 1)).all():
            raise DiffusionConfigError("betas must lie strictly in (0, 1)")
        if (np.diff(b) < 0).any():
            raise DiffusionConfigError("betas must be non-decreasing")
        if (np.diff(self.alpha_bar) >= 0).any():
            raise DiffusionConfigError("alpha_bar must be strictly decreasing")


def build_schedule(config: DiffusionConfig) -> NoiseSchedule:
    """Linear beta schedule with cumulative-product alpha_bar."""
    config.validate()
    betas = np.linspace(config.beta_min, config.beta_max, config.timesteps, dtype=np.float64)
    alphas = 1.0 - betas
    schedule = NoiseSchedule(betas=betas, alphas=alphas, alpha_bar=np.cumprod(alphas))
    schedule.validate()
    return schedule


def _coef(values: np.ndarray, t, like: torch.Tensor) -> torch.Tensor:
    """Index schedule coefficients at t, broadcastable over (B, C, H, W)."""
    table = torch.as_tensor(values, dtype=like.dtype)
    if torch.is_tensor(t):
        return table[t].view(-1, *([1] * (like.dim() - 1)))
    return table[int(t)]


def q_sample(x0: torch.Tensor, t, eps: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    """Forward process: sqrt(ab_t) * x0 + sqrt(1 - ab_t) * eps."""
    if x0.shape != eps.shape:
        raise ValueError(f"shape mismatch: x0 {tuple(x0.shape)} vs eps {tuple(eps.shape)}")
    ab = _coef(schedule.alpha_bar, t, x0)
    return torch.sqrt(ab) * x0 + torch.sqrt(1.0 - ab) * eps


def predict_x0(x_t: torch.Tensor, t, eps_hat: torch.Tensor, schedule: NoiseSchedule,
               clamp: bool = True) -> torch.Tensor:
    """Invert q_sample given a noise estimate; clamped to [-1, 1]."""
    ab = _coef(schedule.alpha_bar, t, x_t)
    x0 = (x_t - torch.sqrt(1.0 - ab) * eps_hat) / torch.sqrt(ab)
    return x0.clamp(-1.0, 1.0) if clamp else x0


def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    """Sinusoidal embedding, (B,) -> (B, dim)."""
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64) / half)
    args = t.double().view(-1, 1) * freqs.view(1, -1)
    return torch.cat([torch.sin(args), torch.cos(args)], dim=1)


class ConvBlock(nn.Module):
    """Two 3x3 convs with group norm, SiLU, and an additive feature bias."""

    def __init__(self, cin: int, cout: int, emb_dim: int):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.norm1 = nn.GroupNorm(4, cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.norm2 = nn.GroupNorm(4, cout)
        self.emb_proj = nn.Linear(emb_dim, cout)

    def forward(self, x, emb):
        h = F.silu(self.norm1(self.conv1(x)))
        h = h + self.emb_proj(emb).unsqueeze(-1).unsqueeze(-1)
        return F.silu(self.norm2(self.conv2(h)))


class DenoiserNet(nn.Module):
    """U-Net noise predictor conditioned on layout, timestep and style."""

    def __init__(self, config: DiffusionConfig):
        super().__init__()
        config.validate()
        self.config = config
        w = config.base_width
        emb = 4 * w
        self.emb_dim = emb
        cin = config.channels + config.layout_channels
        self.style_embed = nn.Embedding(len(config.style_vocab) + 1, emb)
        self.time_mlp = nn.Sequential(nn.Linear(emb, emb), nn.SiLU(), nn.Linear(emb, emb))
        self.enc1 = ConvBlock(cin, w, emb)
        self.enc2 = ConvBlock(w, 2 * w, emb)
        self.mid = ConvBlock(2 * w, 2 * w, emb)
        self.dec2 = ConvBlock(4 * w, 2 * w, emb)
        self.dec1 = ConvBlock(3 * w, w, emb)
        self.out = nn.Conv2d(w, config.channels, 3, padding=1)
        self.pool = nn.AvgPool2d(2)
        init_parameters(self, torch_rng(config.seed, "denoiser-init"), zero_out={"out.weight", "out.bias"})

    def forward(self, x_t, t, layout_onehot, style_ids):
        if not torch.is_tensor(t):
            t = torch.full((x_t.shape[0],), int(t), dtype=torch.long)
        temb = timestep_embedding(t, self.emb_dim).to(x_t.dtype)
        emb = self.time_mlp(temb + self.style_embed(style_ids).to(x_t.dtype))
        h1 = self.enc1(torch.cat([x_t, layout_onehot.to(x_t.dtype)], dim=1), emb)
        h2 = self.enc2(self.pool(h1), emb)
        h3 = self.mid(self.pool(h2), emb)
        u2 = self.dec2(torch.cat([F.interpolate(h3, scale_factor=2, mode="nearest"), h2], dim=1), emb)
        u1 = self.dec1(torch.cat([F.interpolate(u2, scale_factor=2, mode="nearest"), h1], dim=1), emb)
        return self.out(u1)


def init_parameters(module: nn.Module, gen: torch.Generator, zero_out: set[str] = frozenset()) -> None:
    """Deterministic He-style init driven by a named substream."""
    with torch.no_grad():
        for name, p in module.named_parameters():
            if name in zero_out:
                p.zero_()
            elif name.endswith("bias"):
                p.zero_()
            elif p.dim() == 1:  # norm scale
                p.fill_(1.0)
            elif "embed" in name:
                p.copy_(torch.randn(p.shape, generator=gen, dtype=torch.float64).to(p.dtype) * 0.02)
            else:
                fan_in = p.shape[1] * (p.shape[2] * p.shape[3] if p.dim() == 4 else 1)
                std = math.sqrt(2.0 / fan_in)
                p.copy_(torch.randn(p.shape, generator=gen, dtype=torch.float64).to(p.dtype) * std)


def layout_tensor(scene: LayoutScene, dtype=torch.float32) -> torch.Tensor:
    """(1, num_classes + 1, H, W) one-hot layout tensor."""
    return torch.from_numpy(scene.one_hot()).to(dtype).unsqueeze(0)


def _guided_eps(net: DenoiserNet, x_t, t, layout, style_ids, guidance_weight: float):
    eps = net(x_t, t, layout, style_ids)
    if guidance_weight == 0.0:
        return eps
    null_ids = torch.full_like(style_ids, net.config.null_style_id)
    eps_null = net(x_t, t, layout, null_ids)
    return (1.0 + guidance_weight) * eps - guidance_weight * eps_null


def denoise_step(x_t: torch.Tensor, t: int, layout: torch.Tensor, style_ids: torch.Tensor,
                 net: DenoiserNet, schedule: NoiseSchedule, rng: torch.Generator,
                 guidance_weight: float = 0.0) -> torch.Tensor:
    """One ancestral sampling step x_t -> x_{t-1}; no noise added at t=0."""
    eps_hat = _guided_eps(net, x_t, t, layout, style_ids, guidance_weight)
    beta = float(schedule.betas[t])
    alpha = float(schedule.alphas[t])
    ab = float(schedule.alpha_bar[t])
    mean = (x_t - beta / math.sqrt(1.0 - ab) * eps_hat) / math.sqrt(alpha)
    if t == 0:
        return mean
    noise = torch.randn(x_t.shape, generator=rng, dtype=x_t.dtype)
    return mean + math.sqrt(beta) * noise


@dataclass(frozen=True)
class SampleRequest:
    layout: LayoutScene
    style: str
    seed: int
    guidance_weight: float = 0.0


def sample_batch(requests: list[SampleRequest], net: DenoiserNet, schedule: NoiseSchedule,
                 dtype=torch.float32) -> torch.Tensor:
    """Reverse the full chain for a batch of requests; (B, C, H, W) in [-1, 1].

    Each request draws its noise from its own seeded stream, so results
    are independent of how requests are grouped into calls *of the same
    batching*; rerunning the same call is bit-identical.
    """
    cfg = net.config
    h, w = cfg.image_size
    gens = [torch_rng(r.seed, "sample") for r in requests]
    for r in requests:
        if r.guidance_weight < 0:
            raise DiffusionConfigError("guidance_weight must be >= 0")
        if r.guidance_weight != requests[0].guidance_weight:
            raise DiffusionConfigError("mixed guidance weights in one batch")
    for r in requests:
        if (r.layout.height, r.layout.width) != (h, w):
            raise DiffusionConfigError(
                f"layout is {r.layout.height}x{r.layout.width}, model expects {h}x{w}")
    layout = torch.cat([layout_tensor(r.layout, dtype) for r in requests], dim=0)
    style_ids = torch.tensor([cfg.style_id(r.style) for r in requests], dtype=torch.long)
    x = torch.stack([torch.randn((cfg.channels, h, w), generator=g, dtype=dtype) for g in gens])
    net.eval()
    with torch.no_grad():
        for t in range(schedule.timesteps - 1, -1, -1):
            eps_hat = _guided_eps(net, x, t, layout, style_ids, requests[0].guidance_weight)
            beta = float(schedule.betas[t])
            mean = (x - beta / math.sqrt(1.0 - float(schedule.alpha_bar[t])) * eps_hat) \
                / math.sqrt(float(schedule.alphas[t]))
            if t == 0:
                x = mean
            else:
                noise = torch.stack([
                    torch.randn((cfg.channels, h, w), generator=g, dtype=dtype) for g in gens])
                x = mean + math.sqrt(beta) * noise
    return x.clamp(-1.0, 1.0)


def sample(request: SampleRequest, net: DenoiserNet, schedule: NoiseSchedule,
           dtype=torch.float32) -> torch.Tensor:
    """Generate one image for a request; (C, H, W) in [-1, 1]."""
    return sample_batch([request], net, schedule, dtype)[0]


def diffusion_loss(x0: torch.Tensor, layout: torch.Tensor, style_ids: torch.Tensor,
                   net: DenoiserNet, schedule: NoiseSchedule, rng: torch.Generator,
                   return_aux: bool = False):
    """Epsilon-prediction MSE at a uniformly drawn timestep per element."""
    b = x0.shape[0]
    t = torch.randint(0, schedule.timesteps, (b,), generator=rng)
    eps = torch.randn(x0.shape, generator=rng, dtype=x0.dtype)
    x_t = q_sample(x0, t, eps, schedule)
    eps_hat = net(x_t, t, layout, style_ids)
    loss = ((eps_hat - eps) ** 2).mean()
    if return_aux:
        return loss, {"t": t, "eps": eps, "x_t": x_t, "eps_hat": eps_hat}
    return loss


def save_denoiser(path, net: DenoiserNet, schedule: NoiseSchedule, step: int) -> None:
    arrays = ckpt.module_state_arrays(net, "net.")
    arrays["schedule.betas"] = schedule.betas
    meta = {"kind": "denoiser", "config": net.config.to_json(), "step": int(step)}
    ckpt.save_checkpoint(path, arrays, meta)


def load_denoiser(path) -> tuple[DenoiserNet, NoiseSchedule, int]:
    arrays, meta = ckpt.load_checkpoint(path)
    if meta.get("kind") != "denoiser":
        raise ckpt.CheckpointError(f"{path} is not a denoiser checkpoint")
    config = DiffusionConfig.from_json(meta["config"])
    net = DenoiserNet(config)
    ckpt.load_module_state(net, arrays, "net.")
    betas = arrays["schedule.betas"].astype(np.float64)
    alphas = 1.0 - betas
    schedule = NoiseSchedule(betas=betas, alphas=alphas, alpha_bar=np.cumprod(alphas))
    return net, schedule, int(meta["step"])
