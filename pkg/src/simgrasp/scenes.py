"""Procedural labeled scenes and their renderers.

A scene is a planar desk: axis-aligned primitive objects (rectangles,
discs, triangles) placed without overlap on an H x W pixel grid, with
exact semantic/instance maps as ground truth.  Two render styles exist:
``sim`` (flat per-class colors, clean background) and ``real`` (per-
instance texture, illumination gradient, background clutter and sensor
noise) - the held-out target domain.  ``render_view`` produces camera
crops for the dual-view grasping robot.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from .seeding import np_rng, substream_seed

STYLE_SIM = "sim"
STYLE_REAL = "real"
STYLES = (STYLE_SIM, STYLE_REAL)

# Additive sensor noise used by the "real" style; exported so tests can
# reason about region-vs-background color margins.
SENSOR_NOISE_SIGMA = 0.04

_SIM_BG = np.array([0.55, 0.55, 0.55])
_REAL_BG = np.array([-0.15, -0.22, -0.32])

# Per-class base colors, index 1..6 (class 0 is background).  The real
# palette deliberately uses different hues from the sim palette so a
# detector trained on sim renders meets a genuine appearance gap.
_SIM_PALETTE = {
    1: (0.90, -0.70, -0.70),
    2: (-0.70, 0.90, -0.70),
    3: (-0.70, -0.70, 0.90),
    4: (0.90, 0.90, -0.70),
    5: (0.90, -0.70, 0.90),
    6: (-0.70, 0.90, 0.90),
}
_REAL_PALETTE = {
    1: (0.38, 0.02, -0.42),
    2: (-0.52, 0.28, 0.30),
    3: (0.30, -0.38, 0.38),
    4: (-0.05, 0.42, -0.35),
    5: (0.45, 0.30, 0.05),
    6: (-0.35, -0.05, 0.45),
}
_CLUTTER_COLORS = (
    (0.30, 0.22, -0.05),
    (-0.42, -0.38, -0.40),
    (0.05, -0.05, -0.18),
    (-0.10, 0.10, 0.02),
)


class SceneSpecError(ValueError):
    """Invalid scene specification."""


class UnplaceableSceneError(RuntimeError):
    """Object placement failed after bounded retries."""


class SceneValidationError(ValueError):
    """A LayoutScene violates one of its invariants."""


def class_color(class_id: int, style: str) -> np.ndarray:
    """Base RGB color (in [-1, 1]) of a class in the given style."""
    palette = _SIM_PALETTE if style == STYLE_SIM else _REAL_PALETTE
    base = palette[(class_id - 1) % len(palette) + 1]
    return np.array(base, dtype=np.float64)


def background_color(style: str) -> np.ndarray:
    return (_SIM_BG if style == STYLE_SIM else _REAL_BG).copy()


@dataclass(frozen=True)
class SceneSpec:
    """Parameters of the procedural scene generator."""

    seed: int = 0
    image_size: tuple[int, int] = (32, 32)  # (H, W)
    num_classes: int = 3
    object_count_range: tuple[int, int] = (2, 3)
    min_object_separation: int = 2
    clutter_level: float = 0.0
    style_domain: str = STYLE_REAL

    def validate(self) -> None:
        h, w = self.image_size
        lo, hi = self.object_count_range
        if h < 32 or w < 32:
            raise SceneSpecError(f"image_size must be >= 32, got {self.image_size}")
        if self.num_classes < 1:
            raise SceneSpecError("num_classes must be >= 1")
        if not (0 <= lo <= hi):
            raise SceneSpecError(f"bad object_count_range {self.object_count_range}")
        if self.min_object_separation < 0:
            raise SceneSpecError("min_object_separation must be >= 0")
        if not (0.0 <= self.clutter_level <= 1.0):
            raise SceneSpecError("clutter_level must lie in [0, 1]")
        if self.style_domain not in STYLES:
            raise SceneSpecError(f"unknown style_domain {self.style_domain!r}")


@dataclass(frozen=True)
class ObjectRecord:
    """One placed object: class, instance id, tight bbox, grasp point.

    ``bbox`` is (x_min, y_min, x_max, y_max) in pixels with exclusive
    max, i.e. the box spans columns [x_min, x_max).
    """

    class_id: int
    instance_id: int
    bbox: tuple[float, float, float, float]
    grasp_point: tuple[float, float]

    def validate(self, width: float, height: float) -> None:
        x0, y0, x1, y1 = self.bbox
        gx, gy = self.grasp_point
        if not (0 <= x0 < x1 <= width and 0 <= y0 < y1 <= height):
            raise SceneValidationError(f"bbox {self.bbox} out of bounds {width}x{height}")
        if not (x0 <= gx <= x1 and y0 <= gy <= y1):
            raise SceneValidationError(f"grasp point {self.grasp_point} outside bbox {self.bbox}")

    @property
    def center(self) -> tuple[float, float]:
        x0, y0, x1, y1 = self.bbox
        return ((x0 + x1) / 2.0, (y0 + y1) / 2.0)

    @property
    def area(self) -> float:
        x0, y0, x1, y1 = self.bbox
        return (x1 - x0) * (y1 - y0)


@dataclass
class LayoutScene:
    """Ground-truth layout: semantic + instance maps and object records."""

    semantic_map: np.ndarray  # (H, W) uint8, 0 = background
    instance_map: np.ndarray  # (H, W) uint8, 0 = no instance
    objects: tuple[ObjectRecord, ...]
    style_tag: str
    num_classes: int
    seed: int = 0
    clutter_level: float = 0.0

    @property
    def height(self) -> int:
        return int(self.semantic_map.shape[0])

    @property
    def width(self) -> int:
        return int(self.semantic_map.shape[1])

    def validate(self) -> None:
        sem, inst = self.semantic_map, self.instance_map
        if sem.shape != inst.shape or sem.ndim != 2:
            raise SceneValidationError("semantic/instance map shape mismatch")
        if ((sem != 0) != (inst != 0)).any():
            raise SceneValidationError("semantic and instance maps disagree on occupancy")
        if sem.max(initial=0) > self.num_classes:
            raise SceneValidationError("semantic map contains class id > num_classes")
        ids = sorted(int(v) for v in np.unique(inst) if v != 0)
        rec_ids = sorted(o.instance_id for o in self.objects)
        if ids != rec_ids or len(set(rec_ids)) != len(rec_ids):
            raise SceneValidationError(f"instance ids {rec_ids} != map ids {ids}")
        for obj in self.objects:
            obj.validate(self.width, self.height)
            mask = inst == obj.instance_id
            ys, xs = np.nonzero(mask)
            tight = (float(xs.min()), float(ys.min()), float(xs.max() + 1), float(ys.max() + 1))
            if tight != tuple(map(float, obj.bbox)):
                raise SceneValidationError(f"bbox {obj.bbox} is not tight (scan gives {tight})")
            if not (sem[mask] == obj.class_id).all():
                raise SceneValidationError(f"instance {obj.instance_id} has mixed classes")

    def one_hot(self, dtype=np.float32) -> np.ndarray:
        """(num_classes + 1, H, W) one-hot layout, channel 0 = background."""
        k = self.num_classes + 1
        out = np.zeros((k, self.height, self.width), dtype=dtype)
        rows, cols = np.indices(self.semantic_map.shape)
        out[self.semantic_map, rows, cols] = 1
        return out


def _rasterize(shape: str, cx: float, cy: float, sx: float, sy: float, h: int, w: int) -> np.ndarray:
    """Pixel mask of a primitive; pixel (i, j) has center (j+0.5, i+0.5)."""
    jj, ii = np.meshgrid(np.arange(w) + 0.5, np.arange(h) + 0.5)
    if shape == "rectangle":
        return (np.abs(jj - cx) <= sx / 2) & (np.abs(ii - cy) <= sy / 2)
    if shape == "disc":
        return ((jj - cx) / (sx / 2)) ** 2 + ((ii - cy) / (sy / 2)) ** 2 <= 1.0
    if shape == "triangle":
        # Isoceles, apex up: apex (cx, cy - sy/2), base y = cy + sy/2.
        top, bot = cy - sy / 2, cy + sy / 2
        frac = np.clip((ii - top) / (bot - top), 0.0, 1.0)
        inside_y = (ii >= top) & (ii <= bot)
        return inside_y & (np.abs(jj - cx) <= frac * sx / 2)
    raise ValueError(f"unknown shape {shape!r}")


_SHAPES = ("rectangle", "disc", "triangle")


def shape_for_class(class_id: int) -> str:
    """Fixed class-to-shape assignment (classes beyond 3 cycle)."""
    return _SHAPES[(class_id - 1) % len(_SHAPES)]


def _dilate(mask: np.ndarray, radius: int) -> np.ndarray:
    """Chebyshev dilation by integer radius."""
    if radius <= 0:
        return mask
    out = mask.copy()
    h, w = mask.shape
    for di in range(-radius, radius + 1):
        for dj in range(-radius, radius + 1):
            if di == 0 and dj == 0:
                continue
            src = mask[max(0, -di):h - max(0, di), max(0, -dj):w - max(0, dj)]
            out[max(0, di):h - max(0, -di), max(0, dj):w - max(0, -dj)] |= src
    return out


def generate_scene(spec: SceneSpec, seed: int) -> LayoutScene:
    """Generate one labeled scene, deterministically from (spec, seed).

    Objects are axis-aligned primitives with pairwise Chebyshev pixel
    separation >= ``spec.min_object_separation``.  Raises
    UnplaceableSceneError when placement cannot satisfy the spec.
    """
    spec.validate()
    rng = np_rng(spec.seed, "scene", seed)
    h, w = spec.image_size
    n_objects = int(rng.integers(spec.object_count_range[0], spec.object_count_range[1] + 1))

    sem = np.zeros((h, w), dtype=np.uint8)
    inst = np.zeros((h, w), dtype=np.uint8)
    # An object may not touch `blocked`; dilation radius sep-1 enforces a
    # Chebyshev gap >= sep between instance masks.
    blocked = np.zeros((h, w), dtype=bool)
    occupied = np.zeros((h, w), dtype=bool)
    records: list[ObjectRecord] = []

    scale = min(h, w)
    max_attempts = 60
    for idx in range(n_objects):
        placed = False
        for _ in range(max_attempts):
            class_id = int(rng.integers(1, spec.num_classes + 1))
            shape = shape_for_class(class_id)
            sx = float(rng.uniform(0.20, 0.40) * scale)
            sy = float(rng.uniform(0.20, 0.40) * scale)
            if shape == "disc":
                sy = sx
            cx = float(rng.uniform(sx / 2 + 1, w - sx / 2 - 1))
            cy = float(rng.uniform(sy / 2 + 1, h - sy / 2 - 1))
            mask = _rasterize(shape, cx, cy, sx, sy, h, w)
            if not mask.any() or (mask & blocked).any():
                continue
            instance_id = idx + 1
            sem[mask] = class_id
            inst[mask] = instance_id
            occupied |= mask
            blocked |= _dilate(mask, max(0, spec.min_object_separation - 1))
            blocked |= mask
            ys, xs = np.nonzero(mask)
            bbox = (float(xs.min()), float(ys.min()), float(xs.max() + 1), float(ys.max() + 1))
            grasp = (float(xs.mean() + 0.5), float(ys.mean() + 0.5))
            records.append(ObjectRecord(class_id, instance_id, bbox, grasp))
            placed = True
            break
        if not placed:
            raise UnplaceableSceneError(
                f"could not place object {idx + 1}/{n_objects} for seed {seed} "
                f"(image {h}x{w}, separation {spec.min_object_separation})"
            )

    scene = LayoutScene(
        semantic_map=sem,
        instance_map=inst,
        objects=tuple(records),
        style_tag=spec.style_domain,
        num_classes=spec.num_classes,
        seed=seed,
        clutter_level=spec.clutter_level,
    )
    scene.validate()
    return scene


def _smooth_noise(rng: np.random.Generator, h: int, w: int, cell: int = 4) -> np.ndarray:
    """Low-frequency noise field in roughly [-1, 1], (h, w, 3)."""
    gh, gw = h // cell + 2, w // cell + 2
    grid = rng.normal(0.0, 1.0, size=(gh, gw, 3))
    yy = np.arange(h) / cell
    xx = np.arange(w) / cell
    y0 = yy.astype(int)
    x0 = xx.astype(int)
    fy = (yy - y0)[:, None, None]
    fx = (xx - x0)[None, :, None]
    g00 = grid[y0][:, x0]
    g01 = grid[y0][:, x0 + 1]
    g10 = grid[y0 + 1][:, x0]
    g11 = grid[y0 + 1][:, x0 + 1]
    out = (g00 * (1 - fy) * (1 - fx) + g01 * (1 - fy) * fx
           + g10 * fy * (1 - fx) + g11 * fy * fx)
    return out * 0.6


def render(scene: LayoutScene, style: str, seed: int | None = None) -> np.ndarray:
    """Render a scene as an (H, W, 3) float32 image with values in [-1, 1].

    ``sim``: flat per-class colors on a uniform background.  ``real``:
    per-instance texture, illumination gradient, clutter proportional to
    the scene's clutter level, and additive sensor noise.  Both styles
    leave the semantic/instance maps exact.
    """
    if style not in STYLES:
        raise ValueError(f"unknown style {style!r}")
    h, w = scene.semantic_map.shape
    if style == STYLE_SIM:
        img = np.empty((h, w, 3), dtype=np.float64)
        img[:] = _SIM_BG
        for obj in scene.objects:
            img[scene.instance_map == obj.instance_id] = class_color(obj.class_id, style)
        return img.astype(np.float32)

    rng = np_rng(scene.seed if seed is None else seed, "render", style)
    img = np.empty((h, w, 3), dtype=np.float64)
    img[:] = _REAL_BG
    img += 0.10 * _smooth_noise(rng, h, w, cell=6)

    n_clutter = int(round(scene.clutter_level * 8))
    jj, ii = np.meshgrid(np.arange(w) + 0.5, np.arange(h) + 0.5)
    for _ in range(n_clutter):
        cx = rng.uniform(0, w)
        cy = rng.uniform(0, h)
        r = rng.uniform(1.5, 4.5)
        color = np.array(_CLUTTER_COLORS[int(rng.integers(len(_CLUTTER_COLORS)))])
        color = color + rng.normal(0.0, 0.08, size=3)
        blob = (jj - cx) ** 2 + (ii - cy) ** 2 <= r * r
        img[blob] = color

    for obj in scene.objects:
        mask = scene.instance_map == obj.instance_id
        color = class_color(obj.class_id, style) + rng.normal(0.0, 0.05, size=3)
        texture = 0.12 * _smooth_noise(rng, h, w, cell=3)
        img[mask] = color + texture[mask]

    theta = rng.uniform(0.0, 2 * np.pi)
    strength = rng.uniform(0.15, 0.35)
    proj = (jj * np.cos(theta) + ii * np.sin(theta))
    proj = (proj - proj.min()) / max(proj.max() - proj.min(), 1e-9)
    img *= (1.0 + strength * (proj - 0.5))[:, :, None]

    img += rng.normal(0.0, SENSOR_NOISE_SIGMA, size=img.shape)
    return np.clip(img, -1.0, 1.0).astype(np.float32)


@dataclass(frozen=True)
class CameraModel:
    """Affine world-to-pixel camera for one view.

    The projection of world point ``p`` with the camera anchored at
    ``anchor`` (the robot joint the camera is mounted on) is::

        pixel = offset + scale * (p - anchor)            (upright)
        pixel = offset + scale * (anchor - p)            (mirror=True)

    ``mirror=True`` models the overhead cameras being mounted rotated by
    180 degrees, which is what makes the controller's subtractive update
    law contract the error (see the control module).
    """

    view: str  # "global" | "local"
    scale: tuple[float, float] = (1.0, 1.0)  # (su, sv), pixels per world unit
    offset: tuple[float, float] = (0.0, 0.0)
    crop_size: tuple[int, int] = (32, 32)  # (h, w)
    mirror: bool = False

    def validate(self) -> None:
        su, sv = self.scale
        if su <= 0 or sv <= 0:
            raise SceneValidationError(f"camera scale must be positive, got {self.scale}")

    def world_to_pixel(self, pt, anchor=(0.0, 0.0)) -> tuple[float, float]:
        su, sv = self.scale
        ox, oy = self.offset
        sgn = -1.0 if self.mirror else 1.0
        return (ox + sgn * su * (pt[0] - anchor[0]), oy + sgn * sv * (pt[1] - anchor[1]))

    def pixel_to_world(self, px, anchor=(0.0, 0.0)) -> tuple[float, float]:
        su, sv = self.scale
        ox, oy = self.offset
        sgn = -1.0 if self.mirror else 1.0
        return (anchor[0] + sgn * (px[0] - ox) / su, anchor[1] + sgn * (px[1] - oy) / sv)


def render_view(
    scene: LayoutScene,
    camera: CameraModel,
    anchor=(0.0, 0.0),
    *,
    min_visibility: float = 0.25,
    style: str = STYLE_REAL,
) -> tuple[np.ndarray, list[ObjectRecord]]:
    """Render a camera crop plus ground-truth boxes in view coordinates.

    Boxes are clipped to the crop and dropped when the visible area falls
    below ``min_visibility`` of the full projected box.  Pixels outside
    the world are filled with the style's background color.
    """
    camera.validate()
    ch, cw = camera.crop_size
    full = render(scene, style)

    jj, ii = np.meshgrid(np.arange(cw) + 0.5, np.arange(ch) + 0.5)
    wx, wy = camera.pixel_to_world((jj, ii), anchor)
    src_x = np.floor(wx).astype(int)
    src_y = np.floor(wy).astype(int)
    inside = (src_x >= 0) & (src_x < scene.width) & (src_y >= 0) & (src_y < scene.height)
    img = np.empty((ch, cw, 3), dtype=np.float32)
    img[:] = background_color(style).astype(np.float32)
    img[inside] = full[src_y[inside], src_x[inside]]

    boxes: list[ObjectRecord] = []
    for obj in scene.objects:
        x0, y0, x1, y1 = obj.bbox
        pa = camera.world_to_pixel((x0, y0), anchor)
        pb = camera.world_to_pixel((x1, y1), anchor)
        vx0, vx1 = min(pa[0], pb[0]), max(pa[0], pb[0])
        vy0, vy1 = min(pa[1], pb[1]), max(pa[1], pb[1])
        full_area = (vx1 - vx0) * (vy1 - vy0)
        cx0, cy0 = max(vx0, 0.0), max(vy0, 0.0)
        cx1, cy1 = min(vx1, float(cw)), min(vy1, float(ch))
        if cx0 >= cx1 or cy0 >= cy1 or full_area <= 0:
            continue
        if (cx1 - cx0) * (cy1 - cy0) < min_visibility * full_area:
            continue
        gp = camera.world_to_pixel(obj.grasp_point, anchor)
        gp = (min(max(gp[0], cx0), cx1), min(max(gp[1], cy0), cy1))
        boxes.append(ObjectRecord(obj.class_id, obj.instance_id, (cx0, cy0, cx1, cy1), gp))
    return img, boxes
