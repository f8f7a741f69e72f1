"""flowscale: unsupervised statistical downscaling of gridded climate fields
with invertible normalizing flows, plus the evaluation stack around it."""

from .align import (
    AlignFlowModel,
    LossRecord,
    TrainConfig,
    alignflow_total_loss,
    cross_map,
    generator_adv_loss,
    mle_loss,
    train,
    train_step,
    wgan_gp_critic_loss,
)
from .autodiff import Tensor, backward, conv2d, forward_op, grad, grad_check, no_grad
from .flows import ActNorm, AffineCoupling, FlowStack, GaussianPrior, InvConv1x1, flow_log_prob, squeeze
from .griddata import (
    CVFold,
    GridDataset,
    SynthConfig,
    block_downsample,
    cv_folds,
    nearest_upsample,
    normalize,
    read_grid,
    synth_dataset,
    write_grid,
)
from .metrics import (
    ClimdexReport,
    MetricReport,
    climatology_quantiles,
    climdex_compare,
    climdex_precipitation,
    climdex_temperature,
    pointwise_stats,
    sparse_stats,
)
from .bcsd import BcsdModel, bcsd_apply, bcsd_fit
from .params import ParameterStore, adam_step
from .sampling import InterpolationSpec, SamplingSpec, interpolate, sample_conditional, sample_unconditional, slerp

__version__ = "0.1.0"
