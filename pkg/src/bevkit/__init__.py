"""Camera-to-BEV perception kernels.

Building blocks for an efficient convolutional bird's-eye-view detector:
augmentation-aware 2D->3D lifting with a precomputed lookup table, voxel
splatting, depth fusion, temporal BEV fusion, conv/BN structural
re-parameterization, circular NMS and FLOPs/latency analysis.
"""

from .errors import (
    BevkitError,
    BudgetExceededError,
    ConfigError,
    FormatError,
    GeometryError,
    NumericError,
    ShapeMismatchError,
    SingularTransformError,
    StaleLutError,
    VerificationError,
)
from .tensor import (
    BatchNormSpec,
    ConvSpec,
    add,
    as_tensor,
    batchnorm_forward,
    conv2d_forward,
    conv_output_shape,
    load_tensor,
    relu,
    save_tensor,
    softmax_channel,
)
from .geometry import (
    AugTransform,
    CameraExtrinsics,
    CameraIntrinsics,
    CameraRig,
    DepthBinSpec,
    RigCamera,
    build_frustum,
    compose_aug,
    ego_to_pixel,
    load_rig,
    pixel_to_ego,
    save_rig,
)
from .liftsplat import (
    BEVGridSpec,
    INVALID_VOXEL,
    LookupTable,
    compute_fingerprint,
    fuse_depth,
    lift,
    lut_equal,
    lut_load,
    lut_save,
    precompute_lut,
    splat,
    validate_depth_distribution,
)
from .depthnet import (
    DepthHeadWeights,
    ResidualBlock,
    depth_head_forward,
    encode_camera_params,
    init_depth_head_weights,
    load_depth_head_weights,
    save_depth_head_weights,
)
from .temporal import (
    BevEncoderWeights,
    EgoPose,
    FrameBuffer,
    align_and_concat,
    bev_encoder_forward,
    init_bev_encoder_weights,
    warp_bev,
)
from .reparam import (
    BranchBlock,
    EquivalenceReport,
    GraphDesc,
    MergeBudget,
    expand_1x1_to_kxk,
    forward_block,
    forward_graph,
    fuse_conv_bn,
    identity_to_conv,
    load_graph,
    merge_branches,
    merge_budget_n,
    reparam_graph,
    save_graph,
    verify_equivalence,
)
from .head import (
    Detection,
    HeadOutput,
    LossWeights,
    circular_nms,
    decode,
    gaussian_focal_loss,
    load_detections_jsonl,
    project_box_corners,
    save_detections_jsonl,
    smooth_l1,
    total_loss,
)
from .analysis import (
    BenchResult,
    FlopsReport,
    benchmark_pipeline,
    count_flops,
    mask_views,
)
from .pipeline import (
    Frame,
    CameraFrame,
    Pipeline,
    PipelineConfig,
    SyntheticScene,
    count_pipeline_flops,
    generate_scene,
    load_config,
    make_default_rig,
    run_pipeline,
)

__version__ = "0.1.0"
