"""Anchor-free center-heatmap object detector.

A small convolutional network predicts, at 1/stride resolution, a
per-class center heatmap plus width/height and sub-cell offset
regressions.  Training uses a penalty-reduced focal loss on the heatmap
and L1 losses at object centers; decoding takes per-class local maxima,
reconstructs boxes, and applies greedy NMS.  The detector sits behind a
small, stable interface so a stronger model can be swapped in.
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
from .diffusion import init_parameters
from .scenes import LayoutScene
from .seeding import torch_rng


class DetectorConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Detection:
    class_id: int
    bbox: tuple[float, float, float, float]
    score: float

    def validate(self) -> None:
        x0, y0, x1, y1 = self.bbox
        if not (x0 < x1 and y0 < y1):
            raise DetectorConfigError(f"degenerate detection bbox {self.bbox}")
        if not (0.0 <= self.score <= 1.0):
            raise DetectorConfigError(f"score {self.score} outside [0, 1]")


@dataclass(frozen=True)
class DetectorConfig:
    num_classes: int = 3
    input_size: tuple[int, int] = (64, 64)  # (h, w); images resized before inference
    stride: int = 4
    top_k: int = 16
    score_threshold: float = 0.3
    nms_iou_threshold: float = 0.5
    width: int = 16
    lr: float = 2e-3
    epochs: int = 20
    batch_size: int = 16
    seed: int = 0

    def validate(self) -> None:
        h, w = self.input_size
        if h % self.stride or w % self.stride:
            raise DetectorConfigError(f"input_size {self.input_size} not divisible by stride {self.stride}")
        if self.num_classes < 1:
            raise DetectorConfigError("num_classes must be >= 1")
        if self.width % 4:
            raise DetectorConfigError("width must be a multiple of 4")

    @property
    def grid_size(self) -> tuple[int, int]:
        return (self.input_size[0] // self.stride, self.input_size[1] // self.stride)

    def to_json(self) -> dict:
        d = dataclasses.asdict(self)
        d["input_size"] = list(self.input_size)
        return d

    @staticmethod
    def from_json(d: dict) -> "DetectorConfig":
        d = dict(d)
        d["input_size"] = tuple(d["input_size"])
        return DetectorConfig(**d)


def iou(a, b) -> float:
    """Intersection over union of two (x_min, y_min, x_max, y_max) boxes."""
    ax0, ay0, ax1, ay1 = a
    bx0, by0, bx1, by1 = b
    if ax0 >= ax1 or ay0 >= ay1 or bx0 >= bx1 or by0 >= by1:
        raise DetectorConfigError(f"degenerate box in iou: {a}, {b}")
    ix = max(0.0, min(ax1, bx1) - max(ax0, bx0))
    iy = max(0.0, min(ay1, by1) - max(ay0, by0))
    inter = ix * iy
    union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter
    return inter / union


def nms(dets: list[Detection], iou_threshold: float) -> list[Detection]:
    """Greedy per-class suppression; output sorted by descending score.

    Ties sort by smaller x_min, then y_min; a kept box removes same-class
    boxes whose IoU with it strictly exceeds the threshold.
    """
    order = sorted(dets, key=lambda d: (-d.score, d.bbox[0], d.bbox[1], d.class_id))
    kept: list[Detection] = []
    removed = [False] * len(order)
    for i, d in enumerate(order):
        if removed[i]:
            continue
        kept.append(d)
        for j in range(i + 1, len(order)):
            if removed[j] or order[j].class_id != d.class_id:
                continue
            if iou(d.bbox, order[j].bbox) > iou_threshold:
                removed[j] = True
    return kept


class DetectorModel(nn.Module):
    """Image -> (per-class heatmap, size regression, offset regression)."""

    def __init__(self, config: DetectorConfig):
        super().__init__()
        config.validate()
        if config.stride != 4:
            raise DetectorConfigError("reference model supports stride 4 only")
        self.config = config
        w = config.width
        self.body = nn.Sequential(
            nn.Conv2d(3, w, 3, padding=1), nn.GroupNorm(4, w), nn.SiLU(),
            nn.Conv2d(w, w, 3, padding=1), nn.GroupNorm(4, w), nn.SiLU(),
            nn.Conv2d(w, 2 * w, 3, stride=2, padding=1), nn.GroupNorm(4, 2 * w), nn.SiLU(),
            nn.Conv2d(2 * w, 2 * w, 3, padding=1), nn.GroupNorm(4, 2 * w), nn.SiLU(),
            nn.Conv2d(2 * w, 2 * w, 3, stride=2, padding=1), nn.GroupNorm(4, 2 * w), nn.SiLU(),
            nn.Conv2d(2 * w, 2 * w, 3, padding=1), nn.GroupNorm(4, 2 * w), nn.SiLU(),
        )
        self.heat_head = nn.Conv2d(2 * w, config.num_classes, 1)
        self.wh_head = nn.Conv2d(2 * w, 2, 1)
        self.off_head = nn.Conv2d(2 * w, 2, 1)
        init_parameters(self, torch_rng(config.seed, "detector-init"))
        # Bias the heatmap towards "no object" at init, standard for focal training.
        with torch.no_grad():
            self.heat_head.bias.fill_(-2.19)

    def forward(self, images: torch.Tensor) -> dict:
        h = self.body(images)
        return {
            "heatmap": torch.sigmoid(self.heat_head(h)),
            "wh": self.wh_head(h),
            "offset": self.off_head(h),
        }


def resize_image(image: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Bilinear resize of an (H, W, 3) float image to (h, w)."""
    h, w = size
    if image.shape[:2] == (h, w):
        return image.astype(np.float32)
    t = torch.from_numpy(np.ascontiguousarray(image.transpose(2, 0, 1))).float().unsqueeze(0)
    out = F.interpolate(t, size=(h, w), mode="bilinear", align_corners=False)
    return out[0].numpy().transpose(1, 2, 0)


def encode_targets(scene: LayoutScene, config: DetectorConfig) -> dict:
    """Training targets on the stride grid for one scene.

    Each object contributes a Gaussian splat (peak 1 at its center) on
    its class heatmap with per-axis sigma proportional to the box size,
    plus width/height and sub-cell offset targets at the center cell.
    """
    config.validate()
    gh, gw = config.grid_size
    in_h, in_w = config.input_size
    sx = in_w / scene.width
    sy = in_h / scene.height
    heat = np.zeros((config.num_classes, gh, gw), dtype=np.float32)
    wh = np.zeros((2, gh, gw), dtype=np.float32)
    off = np.zeros((2, gh, gw), dtype=np.float32)
    mask = np.zeros((gh, gw), dtype=bool)

    cell_y, cell_x = np.meshgrid(np.arange(gh) + 0.5, np.arange(gw) + 0.5, indexing="ij")
    for obj in scene.objects:
        x0, y0, x1, y1 = obj.bbox
        cx = (x0 + x1) / 2 * sx / config.stride
        cy = (y0 + y1) / 2 * sy / config.stride
        bw = (x1 - x0) * sx / config.stride
        bh = (y1 - y0) * sy / config.stride
        sigx = max(0.5, 0.25 * bw)
        sigy = max(0.5, 0.25 * bh)
        gauss = np.exp(-(((cell_x - cx) ** 2) / (2 * sigx ** 2)
                         + ((cell_y - cy) ** 2) / (2 * sigy ** 2)))
        c = obj.class_id - 1
        heat[c] = np.maximum(heat[c], gauss.astype(np.float32))
        j = min(gw - 1, max(0, int(cx)))
        i = min(gh - 1, max(0, int(cy)))
        heat[c, i, j] = 1.0  # exact positive at the center cell
        wh[:, i, j] = (bw, bh)
        off[:, i, j] = (cx - j, cy - i)
        mask[i, j] = True
    return {"heatmap": heat, "wh": wh, "offset": off, "mask": mask}


def decode_outputs(heat: np.ndarray, wh: np.ndarray, off: np.ndarray,
                   config: DetectorConfig, original_size: tuple[int, int]) -> list[Detection]:
    """Peaks -> boxes in original image coordinates (before NMS)."""
    gh, gw = heat.shape[1:]
    in_h, in_w = config.input_size
    orig_h, orig_w = original_size
    heat_t = torch.from_numpy(heat).unsqueeze(0)
    peaks = (F.max_pool2d(heat_t, 3, stride=1, padding=1) == heat_t)[0].numpy()
    dets: list[Detection] = []
    for c in range(config.num_classes):
        candidates = []
        ys, xs = np.nonzero(peaks[c] & (heat[c] > config.score_threshold))
        for i, j in zip(ys.tolist(), xs.tolist()):
            candidates.append((-float(heat[c, i, j]), i, j))
        candidates.sort()
        for negscore, i, j in candidates[:config.top_k]:
            cx = (j + float(off[0, i, j])) * config.stride * orig_w / in_w
            cy = (i + float(off[1, i, j])) * config.stride * orig_h / in_h
            bw = float(wh[0, i, j]) * config.stride * orig_w / in_w
            bh = float(wh[1, i, j]) * config.stride * orig_h / in_h
            x0 = max(0.0, cx - bw / 2)
            y0 = max(0.0, cy - bh / 2)
            x1 = min(float(orig_w), cx + bw / 2)
            y1 = min(float(orig_h), cy + bh / 2)
            if x0 >= x1 or y0 >= y1:
                continue
            dets.append(Detection(class_id=c + 1, bbox=(x0, y0, x1, y1), score=-negscore))
    return dets


def detect(model: DetectorModel, image: np.ndarray, config: DetectorConfig | None = None) -> list[Detection]:
    """Run the detector on one (H, W, 3) image in [-1, 1]."""
    if config is None:
        config = model.config
    resized = resize_image(image, config.input_size)
    model.eval()
    with torch.no_grad():
        out = model(torch.from_numpy(resized.transpose(2, 0, 1).copy()).unsqueeze(0))
    heat = out["heatmap"][0].numpy()
    wh = out["wh"][0].numpy()
    off = out["offset"][0].numpy()
    dets = decode_outputs(heat, wh, off, config, image.shape[:2])
    return nms(dets, config.nms_iou_threshold)


def _focal_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Penalty-reduced focal loss for Gaussian heatmaps (CenterNet style)."""
    pred = pred.clamp(1e-6, 1 - 1e-6)
    pos = (target == 1.0).float()
    neg = 1.0 - pos
    pos_loss = -((1 - pred) ** 2) * torch.log(pred) * pos
    neg_loss = -((1 - target) ** 4) * (pred ** 2) * torch.log(1 - pred) * neg
    n_pos = pos.sum().clamp(min=1.0)
    return (pos_loss.sum() + neg_loss.sum()) / n_pos


def train_detector(dataset: list[tuple[np.ndarray, LayoutScene]],
                   config: DetectorConfig, epoch_end=None) -> DetectorModel:
    """Train the reference detector; seeded and deterministic.

    The per-step loss log is attached as ``model.loss_history``.
    ``epoch_end(epoch, model)``, when given, runs after each epoch (for
    validation metrics); it must not touch the training rng.
    """
    if not dataset:
        raise DetectorConfigError("empty detector dataset")
    config.validate()
    model = DetectorModel(config)
    opt = torch.optim.Adam(model.parameters(), lr=config.lr)

    images = torch.stack([
        torch.from_numpy(resize_image(img, config.input_size).transpose(2, 0, 1).copy())
        for img, _ in dataset])
    targets = [encode_targets(scene, config) for _, scene in dataset]
    heat_t = torch.stack([torch.from_numpy(t["heatmap"]) for t in targets])
    wh_t = torch.stack([torch.from_numpy(t["wh"]) for t in targets])
    off_t = torch.stack([torch.from_numpy(t["offset"]) for t in targets])
    mask_t = torch.stack([torch.from_numpy(t["mask"]) for t in targets]).unsqueeze(1)

    n = len(dataset)
    rng = torch_rng(config.seed, "detector", "shuffle")
    history: list[float] = []
    model.train()
    for epoch in range(config.epochs):
        perm = torch.randperm(n, generator=rng)
        for lo in range(0, n, config.batch_size):
            idx = perm[lo:lo + config.batch_size]
            out = model(images[idx])
            mask = mask_t[idx].float()
            n_pos = mask.sum().clamp(min=1.0)
            loss = _focal_loss(out["heatmap"], heat_t[idx])
            loss = loss + 0.1 * ((out["wh"] - wh_t[idx]).abs() * mask).sum() / n_pos
            loss = loss + ((out["offset"] - off_t[idx]).abs() * mask).sum() / n_pos
            opt.zero_grad()
            loss.backward()
            opt.step()
            value = float(loss.detach())
            if not math.isfinite(value):
                raise DetectorConfigError(f"non-finite detector loss at step {len(history)}")
            history.append(value)
        if epoch_end is not None:
            epoch_end(epoch, model)
            model.train()
    model.eval()
    model.loss_history = history
    return model


def save_detector(path, model: DetectorModel) -> None:
    arrays = ckpt.module_state_arrays(model, "net.")
    ckpt.save_checkpoint(path, arrays, {"kind": "detector", "config": model.config.to_json()})


def load_detector(path) -> DetectorModel:
    arrays, meta = ckpt.load_checkpoint(path)
    if meta.get("kind") != "detector":
        raise ckpt.CheckpointError(f"{path} is not a detector checkpoint")
    model = DetectorModel(DetectorConfig.from_json(meta["config"]))
    ckpt.load_module_state(model, arrays, "net.")
    model.eval()
    return model
