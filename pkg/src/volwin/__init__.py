"""volwin: 3D windowed-attention segmentation networks built from scratch on
a numpy reverse-mode autodiff core.

The package provides dense tensors with gradients, volumetric kernels,
shifted-window attention, transformer blocks with convolutional
feed-forwards, an encoder/decoder segmentation model, synthetic data,
training utilities, and analysis tools (parameter accounting, gradient
checks, receptive-field probes).
"""

from .attention import (
    WindowAttention,
    WindowSpec,
    build_attention_mask,
    cyclic_shift,
    relative_position_index,
    tokens_to_volume,
    volume_to_tokens,
    w_mhsa,
    window_partition,
    window_reverse,
)
from .blocks import BranchWidths, DepthwiseFF, InceptionFF, MlpFF, TransformerBlock, branch_widths_for
from .checkpoint import LoadReport, load_arrays, load_model, save_arrays, save_model
from .config import RunConfig, TrainSettings, parse_config
from .data import SegSample, SyntheticSpec, gen_dataset
from .decoder import Decoder, ResidualBlock, SegModel, UpsampleBlock
from .diagnostics import (
    GradCheckReport,
    ProbeResult,
    build_probe_fragment,
    count_params,
    grad_check,
    model_grad_check,
    populate_batch_stats,
    receptive_field_probe,
    toy_model_config,
)
from .encoder import Encoder, FeaturePyramid, ModelConfig, PatchEmbed, PatchMergeConv, PatchMergeLinear
from .errors import (
    CheckpointError,
    ConfigError,
    ContractError,
    NumericError,
    ShapeError,
    StateError,
    VolwinError,
)
from .kernels import avg_pool3d, conv3d, conv_transpose3d, depthwise_conv3d, gelu, linear, norm_affine, prelu
from .metrics import Metrics, cross_entropy_loss, dice_ce_loss, dice_score, one_hot, soft_dice_loss
from .nn import BatchNorm3d, Conv3d, ConvTranspose3d, DepthwiseConv3d, InstanceNorm3d, LayerNorm, Linear, Module, PReLU
from .optim import AdamW, adamw_step
from .tensor import Tensor, no_grad, softmax

__version__ = "0.1.0"
