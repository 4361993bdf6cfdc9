"""Occlusion-aware radiance field reconstruction from masked multi-view images."""

from .cameras import CameraState, RayBatch, camera_gate, exp_so3
from .dataset import (
    DatasetError,
    PosedImageSet,
    SparsePointCloud,
    load_dataset,
    propagate_prompts,
    save_dataset,
)
from .field import (
    EncodingConfig,
    RadianceField,
    RenderConfig,
    RenderOutput,
    frequency_max,
    gradient_check,
    positional_encoding,
    sample_depths,
    volume_render,
)
from .losses import (
    S3IMConfig,
    ScheduleState,
    apply_ablation,
    masked_mse,
    occ_base,
    occ_loss,
    occ_weight,
    s3im,
    s3im_loss,
    schedule_coupling,
    ssim_patch,
    total_loss,
)
from .sampling import (
    PixelSampler,
    VisibilityHistogram,
    fit_longtail,
    patch_distribution,
    patch_visibility,
    sample_batch,
)
from .scene import (
    CameraRig,
    Primitive,
    SyntheticScene,
    occluder_mask,
    perturb_poses,
    pixel_visibility,
    render_oracle,
    scene_density_color,
    scene_from_json,
)
from .training import TrainConfig, TrainResult, render_view, train

__version__ = "0.1.0"
