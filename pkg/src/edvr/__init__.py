"""Video restoration with deformable alignment and attention fusion, on numpy."""
from .deform import deform_conv2d
from .inference import restore_sequence, self_ensemble_infer, two_stage_infer
from .metrics import MetricReport, psnr, rgb_to_y, ssim
from .model import EDVR, EdvrConfig, edvr_forward
from .synth import SynthClipSpec, generate_synth_clip
from .tensor import Parameter, ShapeError, Tensor, no_grad
from .training import AdamState, TrainConfig, adam_step, charbonnier_loss, train, train_step

__all__ = [
    "AdamState", "EDVR", "EdvrConfig", "MetricReport", "Parameter", "ShapeError", "SynthClipSpec", "Tensor",
    "TrainConfig", "adam_step", "charbonnier_loss", "deform_conv2d", "edvr_forward", "generate_synth_clip",
    "no_grad", "psnr", "restore_sequence", "rgb_to_y", "self_ensemble_infer", "ssim", "train", "train_step",
    "two_stage_infer",
]
