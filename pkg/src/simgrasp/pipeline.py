"""End-to-end pipeline stages with run directories and provenance.

Stages: gen-scenes -> train-diffusion -> synthesize -> train-detector ->
run-grasp -> evaluate.  A run directory holds a frozen copy of the
config, a manifest with per-stage completion records, and every
artifact; all randomness derives from the single config seed via named
substreams, so any stage rerun with the same config is bit-identical.

Method variants: ``sim_only`` (detector trained directly on sim
renders), ``no_adv`` (diffusion without adversarial supervision,
lambda_adv = 0) and ``adversarial``.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import shutil
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
import torch

from . import checkpoint as ckpt
from .adversarial import AdvConfig, TrainExample, train, train_segmenter
from .control import (
    ControllerConfig,
    OracleDetector,
    RobotState,
    run_trial,
    load_trial_summaries,
    write_trial_logs,
)
from .dataset import export_dataset, load_dataset, write_json
from .detector import DetectorConfig, detect, load_detector, save_detector, train_detector
from .diffusion import DiffusionConfig, SampleRequest, load_denoiser, sample_batch
from .metrics import (
    MethodMetrics,
    average_precision,
    build_report,
    center_deviation,
    layout_miou,
    load_detections,
    match_detections,
    mean_ap_range,
    save_detections,
    success_rate,
)
from .scenes import STYLE_REAL, STYLE_SIM, SceneSpec, UnplaceableSceneError, generate_scene, render
from .seeding import np_rng, substream_seed

VARIANTS = ("sim_only", "no_adv", "adversarial")
STAGES = ("gen_scenes", "train_diffusion", "synthesize", "train_detector", "run_grasp",
          "evaluate")
CONFIG_SCHEMA_VERSION = "1"
_SPLIT_OFFSETS = {"train": 1_000_000, "val": 2_000_000, "test": 3_000_000}
_RETRY_OFFSET = 50_000_000


class ConfigError(ValueError):
    pass


class MissingStageError(RuntimeError):
    pass


class RunDirError(RuntimeError):
    pass


@dataclass(frozen=True)
class SplitSizes:
    train: int = 100
    val: int = 20
    test: int = 20


@dataclass(frozen=True)
class JudgeConfig:
    """Training budget for the variant-neutral evaluation segmenter."""
    width: int = 16
    steps: int = 500
    lr: float = 2e-3
    batch_size: int = 16
    eval_samples: int = 64  # synth images scored for layout mIoU


@dataclass(frozen=True)
class GraspProtocol:
    trials_per_tier: int = 20
    complex_clutter: float = 0.8
    object_count_range: tuple[int, int] = (2, 3)
    start_jitter: float = 2.0


@dataclass(frozen=True)
class PipelineConfig:
    seed: int = 0
    variant: str = "adversarial"
    scene: SceneSpec = field(default_factory=SceneSpec)
    splits: SplitSizes = field(default_factory=SplitSizes)
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)
    adv: AdvConfig = field(default_factory=AdvConfig)
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    controller: ControllerConfig = field(default_factory=ControllerConfig)
    judge: JudgeConfig = field(default_factory=JudgeConfig)
    grasp: GraspProtocol = field(default_factory=GraspProtocol)
    diffusion_styles: tuple[str, ...] = ("sim", "real")
    sample_guidance: float = 0.0
    sample_batch_size: int = 64

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        self.scene.validate()
        self.diffusion.validate()
        self.adv.validate()
        self.detector.validate()
        self.controller.validate()
        if tuple(self.diffusion.image_size) != tuple(self.scene.image_size):
            raise ConfigError("diffusion.image_size must match scene.image_size")
        if self.diffusion.num_classes != self.scene.num_classes:
            raise ConfigError("diffusion.num_classes must match scene.num_classes")
        if self.detector.num_classes != self.scene.num_classes:
            raise ConfigError("detector.num_classes must match scene.num_classes")
        for style in self.diffusion_styles:
            if style not in self.diffusion.style_vocab:
                raise ConfigError(f"training style {style!r} not in diffusion style vocab")
        if min(self.splits.train, self.splits.val, self.splits.test) < 1:
            raise ConfigError("every split must contain at least one scene")

    def to_json(self) -> dict:
        return {
            "schema_version": CONFIG_SCHEMA_VERSION,
            "seed": self.seed,
            "variant": self.variant,
            "scene": {**dataclasses.asdict(self.scene),
                      "image_size": list(self.scene.image_size),
                      "object_count_range": list(self.scene.object_count_range)},
            "splits": dataclasses.asdict(self.splits),
            "diffusion": self.diffusion.to_json(),
            "adv": self.adv.to_json(),
            "detector": self.detector.to_json(),
            "controller": self.controller.to_json(),
            "judge": dataclasses.asdict(self.judge),
            "grasp": {**dataclasses.asdict(self.grasp),
                      "object_count_range": list(self.grasp.object_count_range)},
            "diffusion_styles": list(self.diffusion_styles),
            "sample_guidance": self.sample_guidance,
            "sample_batch_size": self.sample_batch_size,
        }

    @staticmethod
    def from_json(d: dict) -> "PipelineConfig":
        if d.get("schema_version") != CONFIG_SCHEMA_VERSION:
            raise ConfigError(f"unsupported config schema {d.get('schema_version')!r}")
        scene = dict(d["scene"])
        scene["image_size"] = tuple(scene["image_size"])
        scene["object_count_range"] = tuple(scene["object_count_range"])
        grasp = dict(d["grasp"])
        grasp["object_count_range"] = tuple(grasp["object_count_range"])
        cfg = PipelineConfig(
            seed=int(d["seed"]),
            variant=d["variant"],
            scene=SceneSpec(**scene),
            splits=SplitSizes(**d["splits"]),
            diffusion=DiffusionConfig.from_json(d["diffusion"]),
            adv=AdvConfig.from_json(d["adv"]),
            detector=DetectorConfig.from_json(d["detector"]),
            controller=ControllerConfig.from_json(d["controller"]),
            judge=JudgeConfig(**d["judge"]),
            grasp=GraspProtocol(**grasp),
            diffusion_styles=tuple(d["diffusion_styles"]),
            sample_guidance=float(d["sample_guidance"]),
            sample_batch_size=int(d["sample_batch_size"]),
        )
        cfg.validate()
        return cfg

    def hash(self) -> str:
        return hashlib.sha256(
            json.dumps(self.to_json(), sort_keys=True).encode()).hexdigest()

    def with_overrides(self, seed: int | None = None, variant: str | None = None) -> "PipelineConfig":
        out = self
        if seed is not None:
            out = dataclasses.replace(
                out, seed=seed,
                scene=dataclasses.replace(out.scene, seed=seed),
                diffusion=dataclasses.replace(out.diffusion, seed=seed),
                adv=dataclasses.replace(out.adv, seed=seed),
                detector=dataclasses.replace(out.detector, seed=seed),
            )
        if variant is not None:
            out = dataclasses.replace(out, variant=variant)
        return out


def default_config(scale: str = "smoke", seed: int = 0, variant: str = "adversarial",
                   **overrides) -> PipelineConfig:
    """Coherent pipeline configs at two budgets.

    ``smoke``: minutes-scale, used for pipeline tests.  ``efficacy``:
    the budget used for the comparative (ordinal) evaluation.
    """
    if scale == "smoke":
        cfg = PipelineConfig(
            seed=seed,
            variant=variant,
            scene=SceneSpec(seed=seed, image_size=(32, 32), num_classes=3,
                            object_count_range=(2, 3), min_object_separation=2,
                            clutter_level=0.5, style_domain=STYLE_REAL),
            splits=SplitSizes(train=100, val=16, test=20),
            diffusion=DiffusionConfig(timesteps=60, beta_min=1e-3, beta_max=0.06,
                                      image_size=(32, 32), base_width=8, num_classes=3,
                                      seed=seed),
            adv=AdvConfig(lambda_adv=0.1, epochs=38, batch_size=16, seed=seed,
                          disc_width=8),
            detector=DetectorConfig(num_classes=3, input_size=(32, 32), stride=4,
                                    width=16, lr=3e-3, epochs=16, batch_size=16,
                                    seed=seed),
            controller=ControllerConfig(),
            judge=JudgeConfig(width=8, steps=300, eval_samples=32),
            grasp=GraspProtocol(trials_per_tier=20, complex_clutter=0.8),
        )
    elif scale == "efficacy":
        cfg = PipelineConfig(
            seed=seed,
            variant=variant,
            scene=SceneSpec(seed=seed, image_size=(32, 32), num_classes=3,
                            object_count_range=(2, 3), min_object_separation=2,
                            clutter_level=0.5, style_domain=STYLE_REAL),
            splits=SplitSizes(train=384, val=48, test=96),
            diffusion=DiffusionConfig(timesteps=120, beta_min=1e-3, beta_max=0.05,
                                      image_size=(32, 32), base_width=16, num_classes=3,
                                      seed=seed),
            adv=AdvConfig(lambda_adv=0.1, epochs=50, batch_size=16, seed=seed,
                          disc_width=16, gen_lr=2e-3, disc_lr=2e-3),
            detector=DetectorConfig(num_classes=3, input_size=(32, 32), stride=4,
                                    width=16, lr=3e-3, epochs=24, batch_size=16,
                                    seed=seed),
            controller=ControllerConfig(),
            judge=JudgeConfig(width=16, steps=800, eval_samples=96),
            grasp=GraspProtocol(trials_per_tier=20, complex_clutter=0.8),
        )
    else:
        raise ConfigError(f"unknown config scale {scale!r}")
    if overrides:
        cfg = dataclasses.replace(cfg, **overrides)
    cfg.validate()
    return cfg


# ---------------------------------------------------------------------------
# Run directory, manifest, locking


@dataclass
class StageRecord:
    complete: bool = False
    skipped: bool = False
    artifacts: dict = field(default_factory=dict)
    completed_at: str | None = None


@dataclass
class RunManifest:
    config_hash: str
    created_at: str
    stages: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "config_hash": self.config_hash,
            "created_at": self.created_at,
            "stages": {k: dataclasses.asdict(v) for k, v in self.stages.items()},
        }

    @staticmethod
    def from_json(d: dict) -> "RunManifest":
        m = RunManifest(config_hash=d["config_hash"], created_at=d["created_at"])
        m.stages = {k: StageRecord(**v) for k, v in d["stages"].items()}
        return m


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


def manifest_path(run_dir: Path) -> Path:
    return Path(run_dir) / "manifest.json"


def load_manifest(run_dir: Path) -> RunManifest:
    path = manifest_path(run_dir)
    if not path.exists():
        raise MissingStageError(f"no manifest in {run_dir}; run gen-scenes first")
    manifest = RunManifest.from_json(json.loads(path.read_text()))
    # A stage only counts as complete while its artifacts still exist.
    for record in manifest.stages.values():
        if record.complete and not record.skipped:
            for rel in record.artifacts.values():
                if not (Path(run_dir) / rel).exists():
                    record.complete = False
    return manifest


def save_manifest(run_dir: Path, manifest: RunManifest) -> None:
    write_json(manifest_path(run_dir), manifest.to_json())


def stage_complete(run_dir: Path, stage: str) -> bool:
    try:
        manifest = load_manifest(run_dir)
    except MissingStageError:
        return False
    record = manifest.stages.get(stage)
    return bool(record and record.complete)


def require_stage(run_dir: Path, stage: str) -> None:
    if not stage_complete(run_dir, stage):
        raise MissingStageError(f"stage {stage!r} has not completed in {run_dir}")


class run_lock:
    """One process owns a run directory at a time (lock file)."""

    def __init__(self, run_dir: Path, force: bool = False):
        self.path = Path(run_dir) / ".lock"
        self.force = force

    def __enter__(self):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        if self.path.exists() and self.force:
            self.path.unlink()
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise RunDirError(f"{self.path} exists; another process owns this run "
                              f"(use --force to break a stale lock)")
        with os.fdopen(fd, "w") as f:
            f.write(str(os.getpid()))
        return self

    def __exit__(self, *exc):
        if self.path.exists():
            self.path.unlink()
        return False


def _init_run_dir(config: PipelineConfig, run_dir: Path, force: bool) -> RunManifest:
    run_dir = Path(run_dir)
    config_path = run_dir / "config.json"
    if config_path.exists():
        existing = json.loads(config_path.read_text())
        if existing != config.to_json() and not force:
            raise RunDirError(f"{run_dir} was created with a different config "
                              f"(use --force to overwrite)")
    run_dir.mkdir(parents=True, exist_ok=True)
    write_json(config_path, config.to_json())
    if manifest_path(run_dir).exists() and not force:
        manifest = load_manifest(run_dir)
        if manifest.config_hash != config.hash():
            raise RunDirError(f"manifest in {run_dir} belongs to a different config")
        return manifest
    return RunManifest(config_hash=config.hash(), created_at=_now())


def _record_stage(run_dir: Path, manifest: RunManifest, stage: str,
                  artifacts: dict, skipped: bool = False) -> None:
    manifest.stages[stage] = StageRecord(
        complete=True, skipped=skipped,
        artifacts={k: str(v) for k, v in artifacts.items()},
        completed_at=_now())
    save_manifest(run_dir, manifest)


# ---------------------------------------------------------------------------
# Stage implementations


def _generate_split_scene(spec: SceneSpec, base_seed: int):
    """Generate one scene, retrying unplaceable seeds deterministically."""
    for attempt in range(4):
        try:
            return generate_scene(spec, base_seed + attempt * _RETRY_OFFSET)
        except UnplaceableSceneError:
            continue
    raise UnplaceableSceneError(f"no placeable scene near seed {base_seed}")


def cmd_gen_scenes(config: PipelineConfig, run_dir: Path, force: bool = False) -> RunManifest:
    """Generate train/val/test scene datasets with disjoint seed ranges.

    Train scenes carry both sim and real renders; val and test are
    rendered in the real (target-domain) style only.
    """
    config.validate()
    run_dir = Path(run_dir)
    data_dir = run_dir / "data"
    if data_dir.exists() and any(data_dir.iterdir()) and not force:
        raise RunDirError(f"{data_dir} is not empty (use --force to regenerate)")
    with run_lock(run_dir, force):
        manifest = _init_run_dir(config, run_dir, force)
        if data_dir.exists():
            shutil.rmtree(data_dir)
        artifacts = {}
        sizes = {"train": config.splits.train, "val": config.splits.val,
                 "test": config.splits.test}
        for split, count in sizes.items():
            scenes, images = [], []
            for i in range(count):
                scene = _generate_split_scene(config.scene, _SPLIT_OFFSETS[split] + i)
                pair = {"real": render(scene, STYLE_REAL)}
                pair["sim"] = render(scene, STYLE_SIM) if split == "train" else None
                scenes.append(scene)
                images.append(pair)
            export_dataset(scenes, images, data_dir / split)
            artifacts[split] = f"data/{split}/manifest.json"
        _record_stage(run_dir, manifest, "gen_scenes", artifacts)
    return manifest


def _load_split(run_dir: Path, split: str):
    return load_dataset(Path(run_dir) / "data" / split)


def cmd_train_diffusion(config: PipelineConfig, run_dir: Path, force: bool = False,
                        resume: bool = False) -> RunManifest:
    """Train the (optionally adversarial) layout diffusion model."""
    config.validate()
    run_dir = Path(run_dir)
    require_stage(run_dir, "gen_scenes")
    with run_lock(run_dir, force):
        manifest = load_manifest(run_dir)
        if config.variant == "sim_only":
            _record_stage(run_dir, manifest, "train_diffusion", {}, skipped=True)
            return manifest
        scenes, images, _ = _load_split(run_dir, "train")
        examples = []
        for scene, pair in zip(scenes, images):
            for style in config.diffusion_styles:
                if pair.get(style) is None:
                    raise MissingStageError(f"train split lacks {style!r} renders")
                examples.append(TrainExample(pair[style], scene, style))
        lambda_adv = config.adv.lambda_adv if config.variant == "adversarial" else 0.0
        adv_cfg = dataclasses.replace(config.adv, lambda_adv=lambda_adv)
        out = run_dir / "diffusion"
        resume_from = out if (resume and (out / "gen.ckpt").exists()) else None
        train(examples, config.diffusion, adv_cfg, out_dir=out, resume_from=resume_from)
        _record_stage(run_dir, manifest, "train_diffusion", {
            "generator": "diffusion/gen.ckpt",
            "discriminator": "diffusion/disc.ckpt",
            "losses": "diffusion/losses.csv",
        })
    return manifest


def cmd_synthesize(config: PipelineConfig, run_dir: Path, force: bool = False) -> RunManifest:
    """One synthesized training image per train layout (real style).

    The sim_only variant copies the sim renders unchanged instead.
    """
    config.validate()
    run_dir = Path(run_dir)
    require_stage(run_dir, "gen_scenes")
    with run_lock(run_dir, force):
        manifest = load_manifest(run_dir)
        scenes, images, _ = _load_split(run_dir, "train")
        synth_dir = run_dir / "synth"
        if synth_dir.exists():
            if any(synth_dir.iterdir()) and not force:
                raise RunDirError(f"{synth_dir} is not empty (use --force)")
            shutil.rmtree(synth_dir)
        if config.variant == "sim_only":
            pairs = [{"sim": pair["sim"], "real": None} for pair in images]
        else:
            record = manifest.stages.get("train_diffusion")
            if not (record and record.complete and not record.skipped):
                raise MissingStageError("train_diffusion has not completed")
            net, schedule, _ = load_denoiser(run_dir / "diffusion" / "gen.ckpt")
            outputs = []
            for lo in range(0, len(scenes), config.sample_batch_size):
                chunk = scenes[lo:lo + config.sample_batch_size]
                requests = [
                    SampleRequest(layout=s, style=STYLE_REAL,
                                  seed=substream_seed(config.seed, "synth", lo + k),
                                  guidance_weight=config.sample_guidance)
                    for k, s in enumerate(chunk)]
                batch = sample_batch(requests, net, schedule)
                outputs.extend(batch[k].numpy().transpose(1, 2, 0) for k in range(len(chunk)))
            pairs = [{"sim": None, "real": img} for img in outputs]
        export_dataset(scenes, pairs, synth_dir)
        _record_stage(run_dir, manifest, "synthesize", {"dataset": "synth/manifest.json"})
    return manifest


def _synth_training_images(config: PipelineConfig, run_dir: Path):
    scenes, images, _ = load_dataset(Path(run_dir) / "synth")
    key = "sim" if config.variant == "sim_only" else "real"
    return [(pair[key], scene) for scene, pair in zip(scenes, images)]


def _dump_detections(model, dataset, config: DetectorConfig, path: Path) -> dict:
    preds = {}
    for i, (img, _) in enumerate(dataset):
        preds[f"{i:06d}"] = detect(model, img, config)
    save_detections(path, preds)
    return preds


def _split_gts(scenes) -> dict:
    return {f"{i:06d}": list(s.objects) for i, s in enumerate(scenes)}


def cmd_train_detector(config: PipelineConfig, run_dir: Path, force: bool = False) -> RunManifest:
    """Train the detector on synthesized images; dump val/test detections."""
    config.validate()
    run_dir = Path(run_dir)
    require_stage(run_dir, "synthesize")
    with run_lock(run_dir, force):
        manifest = load_manifest(run_dir)
        train_set = _synth_training_images(config, run_dir)
        val_scenes, val_images, _ = _load_split(run_dir, "val")
        val_set = [(pair["real"], scene) for scene, pair in zip(val_scenes, val_images)]

        epoch_rows = []

        def on_epoch(epoch: int, model) -> None:
            preds = {f"{i:06d}": detect(model, img, config.detector)
                     for i, (img, _) in enumerate(val_set)}
            gts = _split_gts(val_scenes)
            m = match_detections(preds, gts, 0.5)
            ap = average_precision(preds, gts, 0.5)
            epoch_rows.append((epoch, m.precision(), m.recall(),
                               float("nan") if ap is None else ap))

        model = train_detector(train_set, config.detector, epoch_end=on_epoch)
        det_dir = run_dir / "detector"
        det_dir.mkdir(parents=True, exist_ok=True)
        save_detector(det_dir / "detector.ckpt", model)
        with open(det_dir / "losses.csv", "w") as f:
            f.write("step,loss\n")
            for i, v in enumerate(model.loss_history):
                f.write(f"{i},{v!r}\n")
        with open(det_dir / "epoch_metrics.csv", "w") as f:
            f.write("epoch,val_precision,val_recall,val_map50\n")
            for row in epoch_rows:
                f.write(",".join(repr(v) if isinstance(v, float) else str(v)
                                 for v in row) + "\n")
        _dump_detections(model, val_set, config.detector, det_dir / "detections_val.jsonl")
        test_scenes, test_images, _ = _load_split(run_dir, "test")
        test_set = [(pair["real"], scene) for scene, pair in zip(test_scenes, test_images)]
        _dump_detections(model, test_set, config.detector, det_dir / "detections_test.jsonl")
        _record_stage(run_dir, manifest, "train_detector", {
            "checkpoint": "detector/detector.ckpt",
            "losses": "detector/losses.csv",
            "epoch_metrics": "detector/epoch_metrics.csv",
            "detections_val": "detector/detections_val.jsonl",
            "detections_test": "detector/detections_test.jsonl",
        })
    return manifest


def _grasp_world(config: PipelineConfig, tier: str, index: int):
    clutter = 0.0 if tier == "plain" else config.grasp.complex_clutter
    spec = dataclasses.replace(
        config.scene, clutter_level=clutter,
        object_count_range=config.grasp.object_count_range)
    base_seed = substream_seed(config.seed, "grasp", tier, index) % 1_000_000 + 10_000_000
    return _generate_split_scene(spec, base_seed)


def cmd_run_grasp(config: PipelineConfig, run_dir: Path, force: bool = False,
                  oracle: bool = False) -> RunManifest:
    """Seeded grasp trials on two background tiers (plain / complex)."""
    config.validate()
    run_dir = Path(run_dir)
    if not oracle:
        require_stage(run_dir, "train_detector")
    with run_lock(run_dir, force):
        manifest = load_manifest(run_dir)
        if oracle:
            model, det_cfg = OracleDetector(), None
        else:
            model = load_detector(run_dir / "detector" / "detector.ckpt")
            det_cfg = model.config
        grasp_dir = run_dir / "grasp"
        grasp_dir.mkdir(parents=True, exist_ok=True)
        h, w = config.scene.image_size
        controller = dataclasses.replace(
            config.controller,
            grasp_reference_local=(w / 2.0, h / 2.0),
            grasp_reference_global=(w / 2.0, h / 2.0),
            crop_global=(h, w), crop_local=(h, w))
        artifacts = {}
        for tier in ("plain", "complex"):
            trials = []
            for i in range(config.grasp.trials_per_tier):
                world = _grasp_world(config, tier, i)
                rng = np_rng(config.seed, "grasp-start", tier, i)
                j = config.grasp.start_jitter
                start = (w / 2.0 + float(rng.uniform(-j, j)),
                         h / 2.0 + float(rng.uniform(-j, j)))
                target_class = world.objects[i % len(world.objects)].class_id
                robot = RobotState(base_position=start, target_class=target_class)
                trials.append(run_trial(world, robot, model, controller, det_cfg))
            rel = f"grasp/trials_{tier}.jsonl"
            write_trial_logs(run_dir / rel, trials)
            artifacts[tier] = rel
        _record_stage(run_dir, manifest, "run_grasp", artifacts)
    return manifest


def _variant_of(run_dir: Path) -> tuple[PipelineConfig, str]:
    config_path = Path(run_dir) / "config.json"
    if not config_path.exists():
        raise MissingStageError(f"no config.json in {run_dir}")
    config = PipelineConfig.from_json(json.loads(config_path.read_text()))
    return config, config.variant


def _train_judge(config: PipelineConfig, run_dir: Path, cache_dir: Path):
    """Variant-neutral segmenter trained on real renders of the train split."""
    from .adversarial import SegmenterDiscriminator, load_discriminator

    cache = cache_dir / "judge.ckpt"
    if cache.exists():
        return load_discriminator(cache)
    scenes, images, _ = _load_split(run_dir, "train")
    examples = [TrainExample(pair["real"], scene, STYLE_REAL)
                for scene, pair in zip(scenes, images)]
    judge = train_segmenter(
        examples, num_classes=config.scene.num_classes + 1,
        width=config.judge.width, steps=config.judge.steps, lr=config.judge.lr,
        batch_size=config.judge.batch_size,
        seed=substream_seed(config.seed, "judge"))
    from .adversarial import TrainState  # noqa: F401  (import kept local)
    arrays = ckpt.module_state_arrays(judge, "disc.")
    cache_dir.mkdir(parents=True, exist_ok=True)
    ckpt.save_checkpoint(cache, arrays, {
        "kind": "discriminator", "num_classes": judge.num_classes,
        "channels": judge.channels, "width": judge.width, "step": config.judge.steps})
    return judge


def evaluate_run(config: PipelineConfig, run_dir: Path, judge) -> MethodMetrics:
    """Metrics for one completed run directory."""
    run_dir = Path(run_dir)
    require_stage(run_dir, "train_detector")
    test_scenes, _, _ = _load_split(run_dir, "test")
    preds = load_detections(run_dir / "detector" / "detections_test.jsonl")
    gts = _split_gts(test_scenes)
    matches = match_detections(preds, gts, 0.5)
    dev = center_deviation(matches)
    ap50 = average_precision(preds, gts, 0.5)
    ap_range = mean_ap_range(preds, gts)

    synth_scenes, synth_images, _ = load_dataset(run_dir / "synth")
    key = "sim" if config.variant == "sim_only" else "real"
    n_eval = min(config.judge.eval_samples, len(synth_scenes))
    mious = [layout_miou(synth_scenes[i], synth_images[i][key], judge)
             for i in range(n_eval)]

    metrics = MethodMetrics(
        precision=matches.precision(),
        recall=matches.recall(),
        map50=ap50,
        map50_95=ap_range,
        center_deviation_mean=None if dev is None else dev.mean,
        center_deviation_median=None if dev is None else dev.median,
        layout_miou=float(np.mean(mious)) if mious else None,
    )
    grasp_dir = run_dir / "grasp"
    for tier, attr in (("plain", "grasp_success_plain"), ("complex", "grasp_success_complex")):
        path = grasp_dir / f"trials_{tier}.jsonl"
        if path.exists():
            setattr(metrics, attr, success_rate(load_trial_summaries(path)))
    return metrics


def cmd_evaluate(run_dirs: list[Path], out_dir: Path | None = None) -> dict:
    """Comparative report across one or more completed run directories."""
    if not run_dirs:
        raise MissingStageError("no run directories given")
    per_method = {}
    judge = None
    first_config = None
    for rd in run_dirs:
        config, variant = _variant_of(rd)
        if first_config is None:
            first_config = config
            judge = _train_judge(config, rd, Path(run_dirs[0]) / "eval")
        if variant in per_method:
            raise ConfigError(f"duplicate variant {variant!r} among run dirs")
        per_method[variant] = evaluate_run(config, rd, judge)
    target = Path(out_dir) if out_dir else Path(run_dirs[0]) / "report"
    report = build_report(per_method, target)
    for rd in run_dirs:
        manifest = load_manifest(rd)
        _record_stage(Path(rd), manifest, "evaluate", {})
    return {"report": report, "out_dir": target}


def run_all(config: PipelineConfig, run_dir: Path, force: bool = False) -> dict:
    """All five stages in order, then the single-run evaluation."""
    cmd_gen_scenes(config, run_dir, force)
    cmd_train_diffusion(config, run_dir, force)
    cmd_synthesize(config, run_dir, force)
    cmd_train_detector(config, run_dir, force)
    cmd_run_grasp(config, run_dir, force)
    return cmd_evaluate([Path(run_dir)])
