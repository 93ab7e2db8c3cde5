"""Interleaved graph-attention / dilated-temporal network for lifting 2D
keypoint sequences to root-relative 3D poses."""
from .data import (Pose2DSequence, Pose3DSequence, downsample, horizontal_flip,
                   load_sequences, normalize, pad_for_receptive_field, save_sequences,
                   synth_dataset)
from .metrics import mpjpe, p_mpjpe, procrustes_align
from .model import (GastNet, GastNetConfig, StreamingPredictor, build_model, infer_sequence,
                    load_checkpoint, param_count, save_checkpoint)
from .skeleton import build_skeleton
from .temporal import receptive_field
from .tensor import Tensor, backward, no_grad
from .train import TrainConfig, amsgrad_step, lr_at_epoch, train

__all__ = [
    "Pose2DSequence", "Pose3DSequence", "downsample", "horizontal_flip", "load_sequences",
    "normalize", "pad_for_receptive_field", "save_sequences", "synth_dataset",
    "mpjpe", "p_mpjpe", "procrustes_align",
    "GastNet", "GastNetConfig", "StreamingPredictor", "build_model", "infer_sequence",
    "load_checkpoint", "param_count", "save_checkpoint",
    "build_skeleton", "receptive_field", "Tensor", "backward", "no_grad",
    "TrainConfig", "amsgrad_step", "lr_at_epoch", "train",
]

__version__ = "0.1.0"
