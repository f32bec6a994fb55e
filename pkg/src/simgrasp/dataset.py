"""Dataset directory layout: PNG images/labels plus a JSON manifest.

Layout (schema version "1")::

    images/{id}_sim.png    8-bit RGB, present when the sim render exists
    images/{id}_real.png   8-bit RGB, present when the real render exists
    labels/{id}_sem.png    8-bit single channel, class id per pixel (0 = bg)
    labels/{id}_inst.png   8-bit single channel, instance id per pixel
    manifest.json

Float images in [-1, 1] are stored quantized to 8 bits; ``load_image``
returns the dequantized float, so a dataset round-trips exactly after
the first quantization.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .scenes import LayoutScene, ObjectRecord

MANIFEST_SCHEMA_VERSION = "1"


class DatasetError(RuntimeError):
    pass


def encode_image_u8(img: np.ndarray) -> np.ndarray:
    """[-1, 1] float (H, W, 3) -> uint8."""
    return np.clip(np.round((np.asarray(img, dtype=np.float64) + 1.0) * 127.5), 0, 255).astype(np.uint8)


def decode_image_u8(u8: np.ndarray) -> np.ndarray:
    """uint8 -> [-1, 1] float32."""
    return (u8.astype(np.float32) / 127.5 - 1.0)


def save_image(path: Path, img: np.ndarray) -> None:
    Image.fromarray(encode_image_u8(img), mode="RGB").save(path, format="PNG")


def load_image(path: Path) -> np.ndarray:
    return decode_image_u8(np.asarray(Image.open(path).convert("RGB")))


def save_label(path: Path, grid: np.ndarray) -> None:
    if grid.max(initial=0) > 255:
        raise DatasetError("label values exceed 8-bit range")
    Image.fromarray(grid.astype(np.uint8), mode="L").save(path, format="PNG")


def load_label(path: Path) -> np.ndarray:
    return np.asarray(Image.open(path)).astype(np.uint8)


@dataclass
class ManifestEntry:
    id: str
    seed: int
    style_tag: str
    num_classes: int
    clutter_level: float
    sim_image: str | None
    real_image: str | None
    semantic_map: str
    instance_map: str
    objects: list[dict]

    def to_json(self) -> dict:
        return dict(self.__dict__)

    @staticmethod
    def from_json(d: dict) -> "ManifestEntry":
        return ManifestEntry(**d)


@dataclass
class Manifest:
    entries: list[ManifestEntry]
    schema_version: str = MANIFEST_SCHEMA_VERSION

    def to_json(self) -> dict:
        return {
            "schema_version": self.schema_version,
            "entries": [e.to_json() for e in self.entries],
        }

    @staticmethod
    def from_json(d: dict) -> "Manifest":
        if d.get("schema_version") != MANIFEST_SCHEMA_VERSION:
            raise DatasetError(f"unsupported manifest schema {d.get('schema_version')!r}")
        return Manifest([ManifestEntry.from_json(e) for e in d["entries"]])


def _object_to_json(obj: ObjectRecord) -> dict:
    return {
        "class_id": obj.class_id,
        "instance_id": obj.instance_id,
        "bbox": [float(v) for v in obj.bbox],
        "grasp_point": [float(v) for v in obj.grasp_point],
    }


def _object_from_json(d: dict) -> ObjectRecord:
    return ObjectRecord(
        class_id=int(d["class_id"]),
        instance_id=int(d["instance_id"]),
        bbox=tuple(float(v) for v in d["bbox"]),
        grasp_point=tuple(float(v) for v in d["grasp_point"]),
    )


def write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def export_dataset(
    scenes: list[LayoutScene],
    images: list[dict],
    out_dir: Path,
) -> Manifest:
    """Write scenes plus paired renders; returns the manifest.

    ``images[k]`` is a mapping with optional keys "sim" and "real" giving
    the renders of ``scenes[k]``.
    """
    if len(scenes) != len(images):
        raise DatasetError(f"{len(scenes)} scenes but {len(images)} image pairs")
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    (out_dir / "labels").mkdir(parents=True, exist_ok=True)

    entries = []
    for k, (scene, pair) in enumerate(zip(scenes, images)):
        sid = f"{k:06d}"
        paths = {}
        for style in ("sim", "real"):
            img = pair.get(style)
            if img is None:
                paths[style] = None
                continue
            rel = f"images/{sid}_{style}.png"
            save_image(out_dir / rel, img)
            paths[style] = rel
        sem_rel = f"labels/{sid}_sem.png"
        inst_rel = f"labels/{sid}_inst.png"
        save_label(out_dir / sem_rel, scene.semantic_map)
        save_label(out_dir / inst_rel, scene.instance_map)
        entries.append(ManifestEntry(
            id=sid,
            seed=scene.seed,
            style_tag=scene.style_tag,
            num_classes=scene.num_classes,
            clutter_level=scene.clutter_level,
            sim_image=paths["sim"],
            real_image=paths["real"],
            semantic_map=sem_rel,
            instance_map=inst_rel,
            objects=[_object_to_json(o) for o in scene.objects],
        ))

    manifest = Manifest(entries)
    write_json(out_dir / "manifest.json", manifest.to_json())
    return manifest


def load_dataset(root: Path) -> tuple[list[LayoutScene], list[dict], Manifest]:
    """Inverse of export_dataset."""
    root = Path(root)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise DatasetError(f"no manifest at {manifest_path}")
    manifest = Manifest.from_json(json.loads(manifest_path.read_text()))

    scenes, images = [], []
    for entry in manifest.entries:
        scene = LayoutScene(
            semantic_map=load_label(root / entry.semantic_map),
            instance_map=load_label(root / entry.instance_map),
            objects=tuple(_object_from_json(o) for o in entry.objects),
            style_tag=entry.style_tag,
            num_classes=entry.num_classes,
            seed=entry.seed,
            clutter_level=entry.clutter_level,
        )
        pair = {}
        for style, rel in (("sim", entry.sim_image), ("real", entry.real_image)):
            pair[style] = load_image(root / rel) if rel else None
        scenes.append(scene)
        images.append(pair)
    return scenes, images, manifest
