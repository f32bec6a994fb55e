"""Visualize the forward noising process and reverse sampling.

Trains nothing: shows q_sample at increasing timesteps on a real render,
then samples from an untrained net (pure schedule trajectory) to
illustrate the machinery.  Writes demos/out/diffusion_process.png.
"""

from pathlib import Path

import numpy as np
import torch
from PIL import Image

from simgrasp import (
    DenoiserNet,
    DiffusionConfig,
    SampleRequest,
    SceneSpec,
    build_schedule,
    generate_scene,
    q_sample,
    render,
    sample,
)
from simgrasp.seeding import torch_rng

OUT = Path(__file__).parent / "out"
OUT.mkdir(exist_ok=True)


def to_u8(chw):
    img = chw.permute(1, 2, 0).numpy() if torch.is_tensor(chw) else chw
    return np.clip((img + 1.0) * 127.5, 0, 255).astype(np.uint8)


def main():
    cfg = DiffusionConfig(timesteps=100, beta_min=1e-3, beta_max=0.05,
                          image_size=(32, 32), base_width=8, num_classes=3, seed=0)
    schedule = build_schedule(cfg)
    scene = generate_scene(SceneSpec(seed=3, clutter_level=0.4), seed=1)
    x0 = torch.from_numpy(render(scene, "real").transpose(2, 0, 1).copy()).unsqueeze(0)

    rng = torch_rng(0, "demo-noise")
    panels = []
    for t in (0, 25, 50, 75, 99):
        eps = torch.randn(x0.shape, generator=rng)
        panels.append(to_u8(q_sample(x0, t, eps, schedule)[0]))
        print(f"t={t}: alpha_bar={schedule.alpha_bar[t]:.4f}")

    net = DenoiserNet(cfg)  # untrained: zero output conv -> schedule-only reverse
    out = sample(SampleRequest(layout=scene, style="real", seed=5), net, schedule)
    panels.append(to_u8(out))

    grid = np.concatenate(panels, axis=1)
    big = Image.fromarray(grid).resize((grid.shape[1] * 4, grid.shape[0] * 4), Image.NEAREST)
    big.save(OUT / "diffusion_process.png")
    print(f"wrote {OUT / 'diffusion_process.png'} "
          "(noising at t=0,25,50,75,99; last panel = untrained reverse sample)")


if __name__ == "__main__":
    main()
