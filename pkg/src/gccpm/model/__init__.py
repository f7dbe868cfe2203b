"""Pose machine networks, their context modules and checkpoints."""

from gccpm.model.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from gccpm.model.context import (
    AsppConfig,
    ContextConfig,
    ContextKind,
    ContextPlacement,
    PyramidPoolingConfig,
    UShapedConfig,
    build_context_module,
)
from gccpm.model.layers import Conv2d, Layer, Module, OpKind, layer_hooks
from gccpm.model.network import (
    BottleneckStack,
    ModelConfig,
    PoseMachine,
    build_bottleneck_stack,
    build_model,
    images_to_batch,
)

__all__ = [
    "AsppConfig",
    "BottleneckStack",
    "CheckpointError",
    "ContextConfig",
    "ContextKind",
    "ContextPlacement",
    "Conv2d",
    "Layer",
    "Module",
    "ModelConfig",
    "OpKind",
    "PoseMachine",
    "PyramidPoolingConfig",
    "UShapedConfig",
    "build_bottleneck_stack",
    "build_context_module",
    "build_model",
    "images_to_batch",
    "layer_hooks",
    "load_checkpoint",
    "save_checkpoint",
]
