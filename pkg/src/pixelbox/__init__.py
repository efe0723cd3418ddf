"""Pixel-aligned 3D bounding-box geometry toolkit.

Dense corner-heatmap supervision math with analytic gradients, the
image-plane and 3D evaluation protocol (corner errors, optimal-matching
corner distance, cuboid rectification, oriented-box IoU), dataset
preprocessing, and a seeded synthetic scene generator.
"""

from . import dataio, fields, geometry, losses, metrics, synth
from ._kernels import NUMBA_AVAILABLE, USING_NUMBA
from .dataio import (
    InstanceRecord,
    PredictionRecord,
    SceneAnnotation,
    filter_instances,
    parse_annotations,
    preprocess,
    read_predictions,
    rough_box_from_corners,
    write_annotations,
    write_predictions,
)
from .fields import (
    Grid,
    HeatField,
    TargetHeatmaps,
    adaptive_sigma2,
    bilinear_sample,
    box_keypoints,
    box_prior_at,
    box_prior_map,
    extract_corners,
    soft_argmax,
    target_heatmaps,
)
from .geometry import (
    Corner3DSet,
    CornerSet,
    Cuboid,
    Intrinsics,
    LetterboxTransform,
    canonicalize_image_order,
    cube_prior,
    cuboid_to_corners,
    letterbox_points,
    project_corners,
    unproject_corners,
    virtual_depth_convert,
)
from .losses import (
    FitConfig,
    FitResult,
    LossReport,
    LossTargets,
    LossWeights,
    PeakWeights,
    finite_diff_grad,
    fit_heatmaps,
    grad_total,
    loss_coarse,
    loss_depth,
    loss_fine,
    make_loss_targets,
    peak_weights,
    run_gradcheck,
    schedule,
    smooth_l1,
    total_loss,
)
from .metrics import (
    AssignmentResult,
    MetricsReport,
    evaluate,
    hungarian_assign,
    iou3d,
    iou3d_mc,
    kabsch_rectify,
    nhd,
    pag,
)
from .synth import NoiseSpec, SceneConfig, generate_scene, generate_scenes, perturb

__version__ = "0.1.0"
