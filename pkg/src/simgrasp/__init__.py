"""Desk-scale sim-to-real grasping pipeline.

Layout-conditioned diffusion with adversarial segmenter supervision,
an anchor-free detector trained on synthesized images, and a simulated
dual-camera robot driven by closed-loop visual servoing.
"""

from .scenes import (
    CameraModel,
    LayoutScene,
    ObjectRecord,
    SceneSpec,
    generate_scene,
    render,
    render_view,
)
from .dataset import export_dataset, load_dataset
from .diffusion import (
    DenoiserNet,
    DiffusionConfig,
    NoiseSchedule,
    SampleRequest,
    build_schedule,
    denoise_step,
    diffusion_loss,
    predict_x0,
    q_sample,
    sample,
)
from .adversarial import (
    AdvConfig,
    ClassWeights,
    SegmenterDiscriminator,
    TrainExample,
    class_weights,
    discriminator_loss,
    generator_adv_loss,
    train,
    train_step,
)
from .detector import (
    Detection,
    DetectorConfig,
    DetectorModel,
    detect,
    encode_targets,
    iou,
    nms,
    train_detector,
)
from .control import (
    ControllerConfig,
    GraspObservation,
    OracleDetector,
    RobotState,
    TrialResult,
    control_error,
    observe,
    predict_observation,
    run_trial,
    step,
)
from .metrics import (
    MetricsReport,
    MethodMetrics,
    average_precision,
    build_report,
    center_deviation,
    layout_miou,
    match_detections,
    mean_ap_range,
    success_rate,
)
from .pipeline import PipelineConfig, default_config, run_all

__version__ = "0.1.0"
