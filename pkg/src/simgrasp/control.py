"""Simulated dual-camera robot and closed-loop grasp controller.

The robot is a planar base plus a gripper offset.  Two cameras are
rigidly mounted looking down at the desk, rotated 180 degrees (mirror
projection): the global camera rides on the base, the local camera on
the gripper.  With that mounting, the image-space error (detected box
center minus a calibrated reference point) of each view is
``scale * (mount - target)``, so the subtractive proportional update
contracts each view's error by exactly (1 - gain) per step.

A trial loops observe -> detect -> error -> step until both view errors
are inside the pixel tolerance (then the gripper closes and success is a
world-space distance test), the step budget runs out, or the target is
lost for too many consecutive frames.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .detector import Detection, DetectorModel, detect
from .scenes import CameraModel, LayoutScene, ObjectRecord, render_view


class ControllerConfigError(ValueError):
    pass


class InvalidObservationError(RuntimeError):
    """Raised when control_error is called on a flagged-invalid observation."""


@dataclass(frozen=True)
class RobotState:
    base_position: tuple[float, float]
    gripper_offset: tuple[float, float] = (0.0, 0.0)
    gripper_closed: bool = False
    target_class: int = 1

    @property
    def gripper_world(self) -> tuple[float, float]:
        return (self.base_position[0] + self.gripper_offset[0],
                self.base_position[1] + self.gripper_offset[1])


@dataclass(frozen=True)
class ControllerConfig:
    alpha: float = 0.5
    gain_global: float = 0.5
    gain_local: float = 0.5
    pixel_tolerance: float = 1.0  # tau, pixels
    grasp_tolerance: float = 3.0  # epsilon, world units
    max_steps: int = 50
    miss_limit: int = 5
    grasp_reference_local: tuple[float, float] = (16.0, 16.0)
    grasp_reference_global: tuple[float, float] = (16.0, 16.0)
    scale_global: tuple[float, float] = (1.0, 1.0)
    scale_local: tuple[float, float] = (1.0, 1.0)
    crop_global: tuple[int, int] = (32, 32)
    crop_local: tuple[int, int] = (32, 32)

    def validate(self) -> None:
        if not (0.0 <= self.alpha <= 1.0):
            raise ControllerConfigError(f"alpha {self.alpha} outside [0, 1]")
        for g in (self.gain_global, self.gain_local):
            if not (0.0 <= g <= 1.0):
                raise ControllerConfigError(f"gain {g} outside [0, 1]")
        if self.pixel_tolerance <= 0 or self.grasp_tolerance <= 0:
            raise ControllerConfigError("tolerances must be positive")
        if self.max_steps < 1 or self.miss_limit < 1:
            raise ControllerConfigError("max_steps and miss_limit must be >= 1")

    def to_json(self) -> dict:
        d = dict(self.__dict__)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    @staticmethod
    def from_json(d: dict) -> "ControllerConfig":
        d = dict(d)
        for k in ("grasp_reference_local", "grasp_reference_global", "scale_global",
                  "scale_local", "crop_global", "crop_local"):
            if k in d:
                d[k] = tuple(d[k])
        return ControllerConfig(**d)


def make_cameras(config: ControllerConfig) -> tuple[CameraModel, CameraModel]:
    """Base-mounted global camera and gripper-mounted local camera."""
    global_cam = CameraModel(view="global", scale=config.scale_global,
                             offset=config.grasp_reference_global,
                             crop_size=config.crop_global, mirror=True)
    local_cam = CameraModel(view="local", scale=config.scale_local,
                            offset=config.grasp_reference_local,
                            crop_size=config.crop_local, mirror=True)
    return global_cam, local_cam


@dataclass
class DualViewInput:
    global_image: np.ndarray
    local_image: np.ndarray
    gt_global: list[ObjectRecord] = field(default_factory=list)
    gt_local: list[ObjectRecord] = field(default_factory=list)


def observe(world: LayoutScene, robot: RobotState, config: ControllerConfig) -> DualViewInput:
    """Render both camera crops (real style) at the robot's current pose."""
    global_cam, local_cam = make_cameras(config)
    g_img, g_boxes = render_view(world, global_cam, anchor=robot.base_position)
    l_img, l_boxes = render_view(world, local_cam, anchor=robot.gripper_world)
    return DualViewInput(global_image=g_img, local_image=l_img,
                         gt_global=g_boxes, gt_local=l_boxes)


class OracleDetector:
    """Stand-in detector that reads the view's ground-truth boxes."""

    def detections(self, records: list[ObjectRecord]) -> list[Detection]:
        return [Detection(class_id=r.class_id, bbox=tuple(r.bbox), score=1.0)
                for r in records]


@dataclass
class GraspObservation:
    a: np.ndarray  # [x_l_min, y_l_min, x_l_max, y_l_max, x_g_min, y_g_min, x_g_max, y_g_max]
    valid_local: bool
    valid_global: bool

    def to_json(self) -> dict:
        return {"a": [None if not np.isfinite(v) else float(v) for v in self.a],
                "valid_local": self.valid_local, "valid_global": self.valid_global}


def _select(dets: list[Detection], target_class: int) -> Detection | None:
    """Highest score of the target class; ties broken by larger box area."""
    candidates = [d for d in dets if d.class_id == target_class]
    if not candidates:
        return None
    def area(d):
        return (d.bbox[2] - d.bbox[0]) * (d.bbox[3] - d.bbox[1])
    return min(candidates, key=lambda d: (-d.score, -area(d), d.bbox[0], d.bbox[1]))


def predict_observation(model, views: DualViewInput, target_class: int,
                        detector_config=None) -> GraspObservation:
    """Detect the target in both views and assemble the 8-vector."""
    if isinstance(model, OracleDetector):
        local_dets = model.detections(views.gt_local)
        global_dets = model.detections(views.gt_global)
    else:
        local_dets = detect(model, views.local_image, detector_config)
        global_dets = detect(model, views.global_image, detector_config)
    a = np.full(8, np.nan)
    best_local = _select(local_dets, target_class)
    best_global = _select(global_dets, target_class)
    if best_local is not None:
        a[0:4] = best_local.bbox
    if best_global is not None:
        a[4:8] = best_global.bbox
    return GraspObservation(a=a, valid_local=best_local is not None,
                            valid_global=best_global is not None)


def control_error(obs: GraspObservation, config: ControllerConfig):
    """Per-view center-minus-reference errors and their alpha blend."""
    if not (obs.valid_local and obs.valid_global):
        raise InvalidObservationError("no target in at least one view")
    lx = (obs.a[0] + obs.a[2]) / 2.0
    ly = (obs.a[1] + obs.a[3]) / 2.0
    gx = (obs.a[4] + obs.a[6]) / 2.0
    gy = (obs.a[5] + obs.a[7]) / 2.0
    e_local = np.array([lx - config.grasp_reference_local[0],
                        ly - config.grasp_reference_local[1]])
    e_global = np.array([gx - config.grasp_reference_global[0],
                         gy - config.grasp_reference_global[1]])
    blended = config.alpha * e_local + (1.0 - config.alpha) * e_global
    return e_local, e_global, blended


def step(robot: RobotState, e_local: np.ndarray, e_global: np.ndarray,
         config: ControllerConfig, bounds: tuple[float, float] | None = None) -> RobotState:
    """Proportional update: base follows the global view, gripper the local.

    ``bounds`` is the world extent (W, H); positions are clamped to it.
    """
    bx = robot.base_position[0] - config.gain_global * e_global[0] / config.scale_global[0]
    by = robot.base_position[1] - config.gain_global * e_global[1] / config.scale_global[1]
    ox = robot.gripper_offset[0] - config.gain_local * e_local[0] / config.scale_local[0]
    oy = robot.gripper_offset[1] - config.gain_local * e_local[1] / config.scale_local[1]
    if bounds is not None:
        w, h = bounds
        bx, by = min(max(bx, 0.0), w), min(max(by, 0.0), h)
        ox = min(max(bx + ox, 0.0), w) - bx
        oy = min(max(by + oy, 0.0), h) - by
    return replace(robot, base_position=(bx, by), gripper_offset=(ox, oy))


@dataclass
class TraceStep:
    step: int
    e_local: tuple[float, float] | None
    e_global: tuple[float, float] | None
    blended: tuple[float, float] | None
    a: list | None
    base_position: tuple[float, float]
    gripper_offset: tuple[float, float]
    valid: bool

    def to_json(self) -> dict:
        return {
            "step": self.step,
            "e_local": None if self.e_local is None else list(self.e_local),
            "e_global": None if self.e_global is None else list(self.e_global),
            "blended": None if self.blended is None else list(self.blended),
            "a": self.a,
            "base_position": list(self.base_position),
            "gripper_offset": list(self.gripper_offset),
            "valid": self.valid,
        }


FAILURE_NONE = "none"
FAILURE_MAX_STEPS = "max_steps"
FAILURE_LOST_TARGET = "lost_target"


@dataclass
class TrialResult:
    success: bool
    steps_taken: int
    error_trace: list[TraceStep]
    failure_reason: str
    final_state: RobotState | None = None
    grasp_distance: float | None = None

    def validate(self) -> None:
        if self.steps_taken != len(self.error_trace):
            raise ControllerConfigError("steps_taken != trace length")
        if self.failure_reason not in (FAILURE_NONE, FAILURE_MAX_STEPS, FAILURE_LOST_TARGET):
            raise ControllerConfigError(f"unknown failure reason {self.failure_reason!r}")


def _nearest_target_distance(world: LayoutScene, robot: RobotState) -> float:
    gx, gy = robot.gripper_world
    dists = [math.hypot(gx - o.grasp_point[0], gy - o.grasp_point[1])
             for o in world.objects if o.class_id == robot.target_class]
    return min(dists) if dists else math.inf


def run_trial(world: LayoutScene, robot0: RobotState, model, config: ControllerConfig,
              detector_config=None) -> TrialResult:
    """Closed-loop grasp attempt; failures are results, not errors.

    Success requires both view errors within the pixel tolerance and the
    closed gripper within the grasp tolerance of a target-class grasp
    point.  A converged-but-missed grasp reports failure_reason "none".
    """
    config.validate()
    if not any(o.class_id == robot0.target_class for o in world.objects):
        raise ControllerConfigError(
            f"world has no object of target class {robot0.target_class}")
    bounds = (float(world.width), float(world.height))
    robot = robot0
    misses = 0
    trace: list[TraceStep] = []
    for k in range(config.max_steps):
        views = observe(world, robot, config)
        obs = predict_observation(model, views, robot.target_class, detector_config)
        if not (obs.valid_local and obs.valid_global):
            misses += 1
            trace.append(TraceStep(k, None, None, None, None,
                                   robot.base_position, robot.gripper_offset, False))
            if misses >= config.miss_limit:
                result = TrialResult(False, len(trace), trace, FAILURE_LOST_TARGET,
                                     final_state=robot)
                result.validate()
                return result
            continue
        misses = 0
        e_local, e_global, blended = control_error(obs, config)
        trace.append(TraceStep(k, tuple(e_local), tuple(e_global), tuple(blended),
                               obs.to_json()["a"], robot.base_position,
                               robot.gripper_offset, True))
        if (np.linalg.norm(e_local) <= config.pixel_tolerance
                and np.linalg.norm(e_global) <= config.pixel_tolerance):
            robot = replace(robot, gripper_closed=True)
            dist = _nearest_target_distance(world, robot)
            result = TrialResult(dist <= config.grasp_tolerance, len(trace), trace,
                                 FAILURE_NONE, final_state=robot, grasp_distance=dist)
            result.validate()
            return result
        robot = step(robot, e_local, e_global, config, bounds)
    result = TrialResult(False, len(trace), trace, FAILURE_MAX_STEPS, final_state=robot,
                         grasp_distance=_nearest_target_distance(world, robot))
    result.validate()
    return result


def write_trial_logs(path: Path, trials: list[TrialResult]) -> None:
    """JSON lines: one line per step plus a summary line per trial."""
    with open(path, "w") as f:
        for i, trial in enumerate(trials):
            for ts in trial.error_trace:
                f.write(json.dumps({"trial": i, **ts.to_json()}, sort_keys=True) + "\n")
            f.write(json.dumps({
                "trial": i,
                "summary": {
                    "success": trial.success,
                    "steps_taken": trial.steps_taken,
                    "failure_reason": trial.failure_reason,
                    "grasp_distance": trial.grasp_distance,
                },
            }, sort_keys=True) + "\n")


@dataclass
class TrialSummary:
    success: bool
    steps_taken: int
    failure_reason: str
    grasp_distance: float | None


def load_trial_summaries(path: Path) -> list[TrialSummary]:
    out = []
    with open(path) as f:
        for line in f:
            d = json.loads(line)
            if "summary" in d:
                s = d["summary"]
                out.append(TrialSummary(s["success"], s["steps_taken"],
                                        s["failure_reason"], s["grasp_distance"]))
    return out
