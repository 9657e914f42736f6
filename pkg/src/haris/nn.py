"""Shared layers: linear, MLP, 3x3 conv + batch norm + ReLU, bilinear x2 upsampling, attention."""

from __future__ import annotations

import math
from dataclasses import dataclass, fields, is_dataclass
from typing import Iterator

import numpy as np

from haris import kernels
from haris.tensor import (
    Buffer,
    DimensionError,
    Parameter,
    Tensor,
    add_bias,
    as_tensor,
    custom_op,
    gelu,
    layer_norm,
    matmul,
    relu,
    reshape,
    softmax_rows,
    transpose,
)

BN_EPS = 1e-5


def glorot(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


@dataclass(eq=False)
class LinearParams:
    weight: Parameter
    bias: Parameter | None = None

    @classmethod
    def create(cls, name, n_in, n_out, rng, bias=True) -> "LinearParams":
        w = Parameter(f"{name}.weight", glorot(rng, (n_in, n_out), n_in, n_out))
        b = Parameter(f"{name}.bias", np.zeros(n_out)) if bias else None
        return cls(w, b)


@dataclass(eq=False)
class LayerNormParams:
    gamma: Parameter
    beta: Parameter

    @classmethod
    def create(cls, name, n) -> "LayerNormParams":
        return cls(Parameter(f"{name}.gamma", np.ones(n)), Parameter(f"{name}.beta", np.zeros(n)))


@dataclass(eq=False)
class MLPParams:
    fc1: LinearParams
    fc2: LinearParams

    @classmethod
    def create(cls, name, width, rng, hidden_mult=4) -> "MLPParams":
        hidden = hidden_mult * width
        return cls(
            LinearParams.create(f"{name}.fc1", width, hidden, rng),
            LinearParams.create(f"{name}.fc2", hidden, width, rng),
        )


@dataclass(eq=False)
class ConvBAParams:
    """3x3 stride-1 convolution (no bias) followed by batch norm."""

    kernel: Parameter
    bn_scale: Parameter
    bn_shift: Parameter
    running_mean: Buffer
    running_var: Buffer

    @classmethod
    def create(cls, name, c_in, c_out, rng) -> "ConvBAParams":
        kernel = glorot(rng, (3, 3, c_in, c_out), 9 * c_in, 9 * c_out)
        return cls(
            Parameter(f"{name}.kernel", kernel),
            Parameter(f"{name}.bn_scale", np.ones(c_out)),
            Parameter(f"{name}.bn_shift", np.zeros(c_out)),
            Buffer(f"{name}.running_mean", np.zeros(c_out)),
            Buffer(f"{name}.running_var", np.ones(c_out)),
        )

    @property
    def c_in(self) -> int:
        return self.kernel.shape[2]

    @property
    def c_out(self) -> int:
        return self.kernel.shape[3]


@dataclass(eq=False)
class AttentionParams:
    """Single-head attention projections."""

    q: LinearParams
    k: LinearParams
    v: LinearParams
    o: LinearParams

    @classmethod
    def create(cls, name, width, rng) -> "AttentionParams":
        return cls(*(LinearParams.create(f"{name}.{s}", width, width, rng) for s in "qkvo"))


def walk(obj) -> Iterator[Parameter | Buffer]:
    """Yield every Parameter and Buffer inside nested dataclasses / lists, in field order."""
    if isinstance(obj, (Parameter, Buffer)):
        yield obj
    elif is_dataclass(obj):
        for f in fields(obj):
            yield from walk(getattr(obj, f.name))
    elif isinstance(obj, (list, tuple)):
        for item in obj:
            yield from walk(item)


# ---------------------------------------------------------------- ops


def linear(x, p: LinearParams) -> Tensor:
    x = as_tensor(x)
    if x.shape[-1] != p.weight.shape[0]:
        raise DimensionError(f"linear: input width {x.shape[-1]} vs weight {p.weight.shape}")
    y = matmul(x, p.weight)
    return add_bias(y, p.bias) if p.bias is not None else y


def mlp(x, p: MLPParams) -> Tensor:
    return linear(gelu(linear(x, p.fc1)), p.fc2)


def conv3x3(x, kernel) -> Tensor:
    """Zero-padded stride-1 3x3 convolution on channels-last ``[B, H, W, Cin]``."""
    x, kernel = as_tensor(x), as_tensor(kernel)
    if x.ndim != 4:
        raise DimensionError(f"conv3x3: expected [B, H, W, C], got {x.shape}")
    c_in, c_out = kernel.shape[2], kernel.shape[3]
    if kernel.shape[:2] != (3, 3) or x.shape[-1] != c_in:
        raise DimensionError(f"conv3x3: input {x.shape} does not fit kernel {kernel.shape}")
    cols = kernels.im2col3x3(np.ascontiguousarray(x.data))
    k2 = kernel.data.reshape(9 * c_in, c_out)
    out = cols @ k2

    def vjp(g, n):
        gx = gk = None
        if n[0]:
            gx = kernels.col2im3x3(np.ascontiguousarray(g @ k2.T), c_in)
        if n[1]:
            gk = (cols.reshape(-1, 9 * c_in).T @ g.reshape(-1, c_out)).reshape(3, 3, c_in, c_out)
        return gx, gk

    return custom_op("conv3x3", out, (x, kernel), vjp)


def batch_norm(x, p: ConvBAParams, training: bool, bn_updates: list | None = None) -> Tensor:
    """Per-channel normalisation over every leading axis.

    In training mode batch statistics are used and ``(params, mean, var)`` is
    appended to ``bn_updates`` so the caller can refresh running statistics.
    """
    x = as_tensor(x)
    c = x.shape[-1]
    flat = x.data.reshape(-1, c)
    m = flat.shape[0]
    if training:
        mean = flat.mean(axis=0)
        xc = flat - mean
        var = (xc * xc).mean(axis=0)
        if bn_updates is not None:
            bn_updates.append((p, mean, var, m))
    else:
        mean, var = p.running_mean.data, p.running_var.data
        xc = flat - mean
    inv = 1.0 / np.sqrt(var + BN_EPS)
    xhat = xc * inv
    gamma = p.bn_scale.data
    y = (xhat * gamma + p.bn_shift.data).reshape(x.shape)

    def vjp(g, needs):
        g2 = g.reshape(-1, c)
        gx = gg = gb = None
        if needs[0]:
            dxhat = g2 * gamma
            if training:
                gx = inv / m * (m * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))
            else:
                gx = dxhat * inv
            gx = gx.reshape(x.shape)
        if needs[1]:
            gg = (g2 * xhat).sum(axis=0)
        if needs[2]:
            gb = g2.sum(axis=0)
        return gx, gg, gb

    return custom_op("batch_norm", y, (x, p.bn_scale, p.bn_shift), vjp)


def conv_bn_act(x, p: ConvBAParams, training: bool, bn_updates: list | None = None) -> Tensor:
    """Conv 3x3 -> BatchNorm -> ReLU.  Accepts ``[H, W, C]`` or ``[B, H, W, C]``."""
    x = as_tensor(x)
    single = x.ndim == 3
    if single:
        x = reshape(x, (1,) + x.shape)
    if x.shape[-1] != p.c_in:
        raise DimensionError(f"conv_bn_act: {x.shape[-1]} input channels, kernel expects {p.c_in}")
    y = relu(batch_norm(conv3x3(x, p.kernel), p, training, bn_updates))
    if single:
        y = reshape(y, y.shape[1:])
    return y


def upsample_bilinear_x2(x) -> Tensor:
    """Bilinear x2 upsampling, half-pixel centres (align_corners=False), edge clamped."""
    x = as_tensor(x)
    single = x.ndim == 3
    data = x.data[None] if single else x.data
    out = kernels.upsample2x(np.ascontiguousarray(data))
    if single:
        out = out[0]

    def vjp(g, n):
        gg = g[None] if single else g
        gx = kernels.upsample2x_backward(np.ascontiguousarray(gg))
        return (gx[0] if single else gx,)

    return custom_op("upsample2x", out, (x,), vjp)


def attention(q_in, kv_in, p: AttentionParams) -> tuple[Tensor, Tensor]:
    """Single-head scaled dot-product attention; returns (output, weights)."""
    q = linear(q_in, p.q)
    k = linear(kv_in, p.k)
    v = linear(kv_in, p.v)
    width = q.shape[-1]
    w = softmax_rows(matmul(q, transpose(k)) * (1.0 / math.sqrt(width)))
    return linear(matmul(w, v), p.o), w


def apply_bn_updates(bn_updates, momentum: float) -> None:
    """Exponential running-average update (unbiased variance), PyTorch convention."""
    for p, mean, var, m in bn_updates:
        unbiased = var * m / (m - 1) if m > 1 else var
        p.running_mean.data = (1.0 - momentum) * p.running_mean.data + momentum * mean
        p.running_var.data = (1.0 - momentum) * p.running_var.data + momentum * unbiased


def layer_norm_p(x, p: LayerNormParams) -> Tensor:
    return layer_norm(x, p.gamma, p.beta)
