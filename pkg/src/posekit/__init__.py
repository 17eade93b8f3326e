"""Pose conditioning toolkit: skeleton retargeting and rescale augmentation,
a cross-attention pose-feature extractor with verified gradients, and a
desk-scale multi-task diffusion training simulator."""

from .epi import (
    AddPart,
    AnchorPool,
    DropPart,
    EpiConfig,
    RescalePlan,
    ScaleGroup,
    TransformRecord,
    apply_rescale,
    compute_bone_ratios,
    epi_transform,
    ratio_histogram,
    realign,
    sample_rescale_plan,
)
from .errors import (
    ConfigError,
    DataError,
    NumericalError,
    ParseError,
    PosekitError,
    SchemaError,
    ShapeError,
    UnalignableError,
    UnsupportedVersionError,
    UsageError,
)
from .ipi import (
    GradCheckReport,
    IpiConfig,
    IpiParams,
    encode_keypoints,
    grad_check,
    init_ipi_params,
    ipi_backward,
    ipi_forward,
    residual_inject,
    synthetic_clip_features,
)
from .pose_io import (
    CanvasSpec,
    ImageBuffer,
    encode_ppm,
    parse_pose_json,
    render_frame,
    write_pose_json,
)
from .skeleton import (
    BODY_18,
    BodyLayout,
    Keypoint2D,
    PoseFrame,
    PoseSequence,
    bone_metrics,
    from_coco_wholebody,
    stick_figure,
    validate_sequence,
)
from .trainsim import (
    Batch,
    ConditionBundle,
    EpiContext,
    NoiseSchedule,
    ParamPartition,
    SimReport,
    Task,
    TaskSamplerConfig,
    TrainSimConfig,
    build_condition,
    cfg_combine,
    ddim_step,
    diffusion_loss,
    forward_diffuse,
    make_schedule,
    run_sim,
    sample_task,
    train_step,
)

__version__ = "0.1.0"
