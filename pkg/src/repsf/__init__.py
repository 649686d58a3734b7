"""repsf: deterministic reparameterized large-kernel crowd-counting pipeline.

A CPU numerics library and CLI covering the full inference stack: a minimal
4-D tensor engine with two interchangeable convolution paths, structural
reparameterization with machine-checkable equivalence, a large-kernel
backbone with ASPP/contrast-context fusion, density-map ground truth from
point annotations, MAE + entropic-OT losses with an exact assignment oracle,
and bit-exact binary formats.
"""

__version__ = "0.1.0"

from .backbone import (
    BackboneConfig,
    BackboneSpec,
    backbone_forward,
    build_backbone,
    count_macs,
    count_params,
)
from .density import (
    DensityMap,
    GaussianConfig,
    PointAnnotations,
    adaptive_sigmas,
    align_to_output,
    generate_density,
)
from .fusion import (
    AsppSpec,
    CanSpec,
    DensityHeadSpec,
    FusionConfig,
    aspp_forward,
    can_forward,
    effective_receptive_field,
    fusion_head,
)
from .loss import (
    LossReport,
    MetricsReport,
    OtResult,
    SinkhornConfig,
    count_loss,
    eval_metrics,
    exact_ot_oracle,
    ot_gradient,
    ot_loss,
    total_loss,
)
from .model import (
    ModelConfig,
    ModelSpec,
    build_model,
    load_model,
    merge_model,
    model_macs,
    model_params,
    repsfnet_forward,
    save_model,
)
from .reparam import (
    ConvBN,
    EquivalenceReport,
    RepBlockSpec,
    embed_kernel,
    equivalence_check,
    fold_bn,
    identity_as_conv,
    merge_parallel,
    merge_rep_block,
    rep_block_forward,
)
from .tensor import (
    BatchNormSpec,
    ConvSpec,
    Tensor4,
    batchnorm_infer,
    bilinear_upsample,
    concat_channels,
    conv2d,
    conv2d_gemm,
    conv2d_naive,
    global_avg_pool,
    output_shape,
    relu,
    sum_pool,
)
