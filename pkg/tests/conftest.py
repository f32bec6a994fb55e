import dataclasses

from simgrasp.adversarial import AdvConfig
from simgrasp.control import ControllerConfig
from simgrasp.detector import DetectorConfig
from simgrasp.diffusion import DiffusionConfig
from simgrasp.pipeline import (
    GraspProtocol,
    JudgeConfig,
    PipelineConfig,
    SplitSizes,
)
from simgrasp.scenes import SceneSpec


def mini_config(seed=0, variant="adversarial", **overrides) -> PipelineConfig:
    """Seconds-scale pipeline config for plumbing tests."""
    cfg = PipelineConfig(
        seed=seed,
        variant=variant,
        scene=SceneSpec(seed=seed, image_size=(32, 32), num_classes=3,
                        object_count_range=(1, 2), min_object_separation=2,
                        clutter_level=0.5),
        splits=SplitSizes(train=12, val=4, test=4),
        diffusion=DiffusionConfig(timesteps=10, beta_min=1e-3, beta_max=0.08,
                                  image_size=(32, 32), base_width=4, num_classes=3,
                                  seed=seed),
        adv=AdvConfig(lambda_adv=0.1, epochs=2, batch_size=8, seed=seed, disc_width=4),
        detector=DetectorConfig(num_classes=3, input_size=(32, 32), stride=4, width=8,
                                lr=3e-3, epochs=2, batch_size=8, seed=seed),
        controller=ControllerConfig(),
        judge=JudgeConfig(width=4, steps=30, eval_samples=4),
        grasp=GraspProtocol(trials_per_tier=3),
        sample_batch_size=16,
    )
    if overrides:
        cfg = dataclasses.replace(cfg, **overrides)
    cfg.validate()
    return cfg
