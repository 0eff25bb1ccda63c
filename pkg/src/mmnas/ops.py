"""Candidate cell operations. Every op maps [B,C,D,H,W] to the same shape."""
from __future__ import annotations

from typing import Mapping

import numpy as np

from . import tensor as T
from .tensor import Tensor

# canonical order; alpha vectors are indexed by position in this tuple
OP_KINDS = (
    "conv3", "conv5", "sep_conv3", "sep_conv5", "dil_conv3", "dil_conv5",
    "max_pool3", "avg_pool3", "skip", "zero",
)
OP_INDEX = {k: i for i, k in enumerate(OP_KINDS)}
DILATION = 2

_KERNEL = {"conv3": 3, "conv5": 5, "sep_conv3": 3, "sep_conv5": 5, "dil_conv3": 3, "dil_conv5": 5}


class OpParamError(ValueError):
    pass


def op_param_specs(kind: str, channels: int) -> list[tuple[str, tuple[int, ...]]]:
    if kind not in OP_INDEX:
        raise OpParamError(f"unknown op kind {kind!r}")
    C = channels
    if kind in ("conv3", "conv5", "dil_conv3", "dil_conv5"):
        k = _KERNEL[kind]
        return [("weight", (C, C, k, k, k)), ("gamma", (C,)), ("beta", (C,))]
    if kind in ("sep_conv3", "sep_conv5"):
        k = _KERNEL[kind]
        return [("depthwise", (C, 1, k, k, k)), ("pointwise", (C, C, 1, 1, 1)),
                ("gamma", (C,)), ("beta", (C,))]
    return []


def op_param_shapes(kind: str, channels: int) -> list[tuple[int, ...]]:
    return [shape for _, shape in op_param_specs(kind, channels)]


def init_kind(param_name: str) -> str:
    if param_name.endswith("gamma"):
        return "ones"
    if param_name.endswith("beta") or param_name.endswith("bias"):
        return "zeros"
    return "fan_in"


def _check_params(kind: str, channels: int, params: Mapping[str, Tensor]) -> None:
    specs = op_param_specs(kind, channels)
    if set(params) != {n for n, _ in specs}:
        raise OpParamError(f"{kind}: expected parameters {[n for n, _ in specs]}, got {sorted(params)}")
    for name, shape in specs:
        if params[name].shape != shape:
            raise OpParamError(f"{kind}/{name}: shape {params[name].shape} != expected {shape}")


def conv_block(x: Tensor, weight: Tensor, gamma: Tensor, beta: Tensor, dilation: int = 1) -> Tensor:
    """conv (same padding, stride 1) -> normalize3d -> relu"""
    k = weight.shape[2]
    y = T.conv3d(x, weight, stride=1, padding=(k // 2) * dilation, dilation=dilation)
    return T.relu(T.normalize3d(y, gamma, beta))


def apply_op(kind: str, x: Tensor, params: Mapping[str, Tensor] | None = None) -> Tensor:
    if x.data.ndim != 5 or min(x.shape[2:]) < 1:
        raise T.ShapeError(f"{kind}: expected [B,C,D,H,W] input, got {x.shape}")
    params = params or {}
    _check_params(kind, x.shape[1], params)
    if kind in ("conv3", "conv5"):
        return conv_block(x, params["weight"], params["gamma"], params["beta"])
    if kind in ("dil_conv3", "dil_conv5"):
        return conv_block(x, params["weight"], params["gamma"], params["beta"], dilation=DILATION)
    if kind in ("sep_conv3", "sep_conv5"):
        k = _KERNEL[kind]
        y = T.depthwise_conv3d(x, params["depthwise"], padding=k // 2)
        y = T.conv3d(y, params["pointwise"])
        return T.relu(T.normalize3d(y, params["gamma"], params["beta"]))
    if kind == "max_pool3":
        return T.pool3d("max", x, 3, 1, 1)
    if kind == "avg_pool3":
        return T.pool3d("avg", x, 3, 1, 1)
    if kind == "skip":
        return x
    return Tensor(np.zeros(x.shape))
