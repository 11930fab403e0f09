"""Compact 4D Gaussian feature-field engine: SE(3) motion scaffolds driving
dynamic Gaussians, joint RGB + latent-feature rasterization, distillation of
task features into the scene, semantic querying, and language-configured
editing with a candidate-search agent."""

__version__ = "0.1.0"

from .se3 import DualQuaternion, Quaternion, SE3Pose, compose, dqb
from .scaffold import (
    GaussianBinding,
    ScaffoldGraph,
    TrajectoryNode,
    arap_loss,
    build_knn,
    interp_feature,
    interp_weights,
    nearest_node,
    smoothness_losses,
    trajectory_distance,
    warp_transform,
)
from .scene import (
    CameraModel,
    DepthMap,
    Gaussian3D,
    GaussianScene,
    RenderBatch,
    backproject,
    fuse,
    warp_dynamic,
)
from .rasterizer import (
    RenderOutput,
    SplatProjection,
    project_gaussian,
    rasterize,
    rasterize_backward,
    rasterize_reference,
)
from .distill import (
    AdamState,
    DecoderMLP,
    TaskSpec,
    TrainConfig,
    adam_step,
    decoder_backward,
    decoder_forward,
    feature_loss,
    photometric_loss,
    resize_area,
    resize_bilinear,
    train,
)
from .query import (
    EditConfig,
    LabelSet,
    ScoreMatrix,
    apply_edit,
    argmax_mask,
    hybrid_mask,
    miou_accuracy,
    score_gaussians,
    segment_feature_map,
    threshold_mask,
)
from .agent import IouScorer, PromptParse, Scorer, parse_prompt, run_agent
from .worldgen import SyntheticSceneSpec, default_desk_spec, generate, synth_encoder
from .sceneio import SceneBundle, load_scene, pca_visualize, save_scene, write_ppm
