"""Graph-free forward pass on raw arrays.

``model_forward`` routes here whenever gradient recording is off. It performs
the same arithmetic in the same order as the traced operators, just without
wrapping every intermediate in a :class:`Tensor`, which dominates the cost of
small models (finite differencing evaluates the loss tens of thousands of
times). Tests pin this path to the traced one.
"""

from __future__ import annotations

import numpy as np

from .autodiff import UNARY_RULES
from .ssm import MambaBlock, conv_arrays, scan_arrays


def _unary(kind: str, x: np.ndarray) -> np.ndarray:
    return UNARY_RULES[kind][0](x)


def _rms_norm(x, gain, eps):
    inv_rms = 1.0 / np.sqrt((x * x).mean(axis=-1, keepdims=True) + eps)
    return x * inv_rms * gain


def _layer_norm(x, gain, bias, eps=1e-5):
    centered = x - x.mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    return centered * inv_std * gain + bias


def block_forward(e: np.ndarray, block: MambaBlock, scale) -> np.ndarray:
    core = block.core
    d_inner = block.d_inner
    xz = e @ block.in_proj.data
    x, gate = xz[..., :d_inner], xz[..., d_inner:]
    x = _unary("silu", conv_arrays(x, block.conv_weight.data, block.conv_bias.data)[0])
    pre = (x @ core.delta_down.data) @ core.delta_up.data + core.delta_bias.data
    delta = _unary("softplus", pre) * scale
    A = -_unary("exp", core.A_log.data)
    y = scan_arrays(x, delta, A, x @ core.B_proj.data, x @ core.C_proj.data, core.D.data)[0]
    out = (y * _unary("silu", gate)) @ block.out_proj.data
    return _rms_norm(out, block.norm_gain.data, block.norm_eps)


def resolve_scales(strategy, e: np.ndarray) -> np.ndarray:
    if strategy.kind == "fixed":
        return np.array(strategy.alphas)
    if strategy.kind == "learnable":
        return strategy.multipliers.data
    flat = e.reshape(-1, e.shape[-1] * e.shape[-2])
    hidden = _unary("relu", flat @ strategy.W1.data + strategy.b1.data)
    return _unary("softplus", hidden @ strategy.W2.data + strategy.b2.data).mean(axis=0)


def _directional(e, blocks, scales):
    total = None
    for i, block in enumerate(blocks):
        out = block_forward(e, block, scales[i])
        total = out if total is None else total + out
    return total * (1.0 / len(blocks)) if len(blocks) > 1 else total


def layer_forward(e: np.ndarray, layer, residual: bool) -> np.ndarray:
    mixer = layer.mixer
    scales = resolve_scales(mixer.strategy, e)
    mixer.last_scales = np.array(scales, copy=True)
    mixed = _directional(e, mixer.blocks_fwd, scales)
    if mixer.bidirectional:
        back = _directional(np.flip(e, axis=-2).copy(), mixer.blocks_bwd, scales)
        mixed = mixed + np.flip(back, axis=-2).copy()
    normed = _layer_norm(mixed, layer.ln_gain.data, layer.ln_bias.data)
    out = _unary("relu", normed @ layer.ff_w1.data + layer.ff_b1.data) @ layer.ff_w2.data + layer.ff_b2.data
    return out + e if residual else out


def forward(x: np.ndarray, model) -> np.ndarray:
    """``x[..., L, D]`` -> ``[..., T, D]`` without building a graph."""
    e = np.swapaxes(x, -1, -2) @ model.embed_w.data + model.embed_b.data
    for layer in model.layers:
        e = layer_forward(e, layer, model.config.residual)
    return np.swapaxes(e @ model.proj_w.data + model.proj_b.data, -1, -2)
