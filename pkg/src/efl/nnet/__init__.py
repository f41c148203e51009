"""Autodiff core, encoder, losses and optimizer."""

from .autodiff import Tensor, conv2d, softmax
from .losses import ce_loss, combined_loss, domain_con_loss, supcon_loss
from .model import (
    ConvLayer,
    EncoderConfig,
    attention_map,
    embed,
    encoder_forward,
    external_attention,
    head_logits,
    init_encoder,
    project,
    self_attention_reference,
)
from .optim import LossHistory, ParamStore, lambda_schedule, sgd_momentum_step

__all__ = [
    "Tensor", "conv2d", "softmax", "ce_loss", "combined_loss", "domain_con_loss", "supcon_loss",
    "ConvLayer", "EncoderConfig", "attention_map", "embed", "encoder_forward", "external_attention",
    "head_logits", "init_encoder", "project", "self_attention_reference", "LossHistory",
    "ParamStore", "lambda_schedule", "sgd_momentum_step",
]
