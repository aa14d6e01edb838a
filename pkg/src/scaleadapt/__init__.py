"""Self-supervised domain adaptation for semantic segmentation at desk scale.

Trains a small segmentation model on a synthetic source domain, then adapts
it to a shifted target domain through rounds of class-balanced image
selection, entropy-filtered pseudo-labels, and scale-invariance losses on
upscaled patches.
"""

from .entropy import ThresholdVector, filter_map, self_entropy
from .losses import LossConfig, LossValue, adaptation_loss, ce_loss, filtered_ce_loss, focal_loss
from .model import AdamState, ModelParams, adam_step, backward, forward, init_params
from .scale_examples import PatchConfig, Rect, ScaleExample, make_example, sample_rects
from .selection import SelectionConfig, SelectionResult, round_portion, run_selection, score_image
from .synth_data import DomainSpec, default_spec, generate_dataset, generate_scene
from .tensor import argmax_labels, crop_resize, read_tensor, softmax, write_tensor

__all__ = [
    "AdamState",
    "DomainSpec",
    "LossConfig",
    "LossValue",
    "ModelParams",
    "PatchConfig",
    "Rect",
    "ScaleExample",
    "SelectionConfig",
    "SelectionResult",
    "ThresholdVector",
    "adam_step",
    "adaptation_loss",
    "argmax_labels",
    "backward",
    "ce_loss",
    "crop_resize",
    "default_spec",
    "filter_map",
    "filtered_ce_loss",
    "focal_loss",
    "forward",
    "generate_dataset",
    "generate_scene",
    "init_params",
    "make_example",
    "read_tensor",
    "round_portion",
    "run_selection",
    "sample_rects",
    "score_image",
    "self_entropy",
    "softmax",
    "write_tensor",
]
