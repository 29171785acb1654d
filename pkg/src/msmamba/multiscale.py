"""Parallel Mamba blocks at several temporal scales, fused by averaging."""

from __future__ import annotations

import math
from collections.abc import Sequence
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, DimensionError
from .ssm import MambaBlock, mamba_block_forward

STRATEGIES = ("fixed", "learnable", "dynamic")


def default_alphas(n: int) -> tuple[float, ...]:
    """Powers of two starting at 1: (1, 2, 4, 8, ...)."""
    return tuple(float(2**i) for i in range(n))


@dataclass
class ScaleStrategy:
    """How the n per-block step-size multipliers are obtained.

    fixed: constant ``alphas``; learnable: trained ``multipliers``; dynamic: a
    two-layer ReLU MLP of the flattened layer input followed by softplus.
    """

    kind: str
    n: int
    alphas: tuple[float, ...] | None = None
    multipliers: Tensor | None = None
    W1: Tensor | None = None
    b1: Tensor | None = None
    W2: Tensor | None = None
    b2: Tensor | None = None

    def __post_init__(self):
        if self.kind not in STRATEGIES:
            raise ConfigError(f"unknown scale strategy {self.kind!r}; expected one of {STRATEGIES}")
        if self.n < 1:
            raise ConfigError(f"scale count must be >= 1, got {self.n}")
        if self.kind == "fixed":
            if self.alphas is None or len(self.alphas) != self.n:
                raise ConfigError(f"fixed strategy needs {self.n} alphas, got {self.alphas}")
            if not all(math.isfinite(a) and a > 0 for a in self.alphas):
                raise ConfigError(f"alphas must be finite and positive, got {self.alphas}")
            self.alphas = tuple(float(a) for a in self.alphas)

    @classmethod
    def fixed(cls, alphas: Sequence[float]) -> "ScaleStrategy":
        return cls("fixed", len(alphas), alphas=tuple(alphas))

    @classmethod
    def learnable(cls, n: int, rng: np.random.Generator, low: float = 1.0, high: float = 4.0) -> "ScaleStrategy":
        return cls("learnable", n, multipliers=Tensor(rng.uniform(low, high, size=n), requires_grad=True))

    @classmethod
    def dynamic(cls, n: int, input_size: int, hidden: int, rng: np.random.Generator) -> "ScaleStrategy":
        b1_bound = 1.0 / math.sqrt(input_size)
        b2_bound = 1.0 / math.sqrt(hidden)
        return cls(
            "dynamic",
            n,
            W1=Tensor(rng.uniform(-b1_bound, b1_bound, (input_size, hidden)), requires_grad=True),
            b1=Tensor(rng.uniform(-b1_bound, b1_bound, hidden), requires_grad=True),
            W2=Tensor(rng.uniform(-b2_bound, b2_bound, (hidden, n)), requires_grad=True),
            b2=Tensor(rng.uniform(-b2_bound, b2_bound, n), requires_grad=True),
        )

    def parameters(self, prefix: str = "") -> dict[str, Tensor]:
        if self.kind == "learnable":
            return {prefix + "multipliers": self.multipliers}
        if self.kind == "dynamic":
            return {prefix + k: getattr(self, k) for k in ("W1", "b1", "W2", "b2")}
        return {}


def resolve_scales(strategy: ScaleStrategy, embedding: Tensor | None = None) -> Tensor:
    """The n positive step-size multipliers for one layer call, as a ``(n,)`` tensor.

    A dynamic strategy evaluates its MLP on each batch element's flattened
    ``embedding[..., tokens, d_model]`` and averages the results over the batch.
    """
    if strategy.kind == "fixed":
        return Tensor(np.array(strategy.alphas))
    if strategy.kind == "learnable":
        return strategy.multipliers
    if embedding is None:
        raise ConfigError("dynamic scales need the layer input")
    embedding = ad._as_tensor(embedding)
    if embedding.ndim < 2:
        raise DimensionError(f"dynamic scales expect (..., tokens, d_model), got {embedding.shape}")
    flat_size = embedding.shape[-1] * embedding.shape[-2]
    if flat_size != strategy.W1.shape[0]:
        raise DimensionError(
            f"dynamic scale MLP expects flattened size {strategy.W1.shape[0]}, got {flat_size} from {embedding.shape}"
        )
    flat = ad.reshape(embedding, (-1, flat_size))
    hidden = ad.relu(flat @ strategy.W1 + strategy.b1)
    scales = ad.softplus(hidden @ strategy.W2 + strategy.b2)
    return ad.mean(scales, axis=0)


@dataclass
class MultiScaleLayer:
    """n forward blocks (plus n backward blocks when bidirectional) and a strategy."""

    blocks_fwd: list[MambaBlock]
    strategy: ScaleStrategy
    blocks_bwd: list[MambaBlock] | None = None
    bidirectional: bool = True
    last_scales: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        n = len(self.blocks_fwd)
        if n < 1:
            raise ConfigError("a multi-scale layer needs at least one block")
        if self.strategy.n != n:
            raise ConfigError(f"strategy resolves {self.strategy.n} scales for {n} blocks")
        if self.bidirectional and (self.blocks_bwd is None or len(self.blocks_bwd) != n):
            raise ConfigError("bidirectional layer needs one backward block per scale")
        dims = {(b.d_model, b.d_inner, b.core.d_state) for b in self.all_blocks()}
        if len(dims) != 1:
            raise ConfigError(f"all blocks must share dimensions, got {sorted(dims)}")

    @property
    def n(self) -> int:
        return len(self.blocks_fwd)

    def all_blocks(self) -> list[MambaBlock]:
        return list(self.blocks_fwd) + (list(self.blocks_bwd) if self.blocks_bwd else [])

    @classmethod
    def init(
        cls,
        rng: np.random.Generator,
        strategy: ScaleStrategy,
        d_model: int,
        bidirectional: bool = True,
        **block_kwargs,
    ) -> "MultiScaleLayer":
        fwd = [MambaBlock.init(rng, d_model, **block_kwargs) for _ in range(strategy.n)]
        bwd = [MambaBlock.init(rng, d_model, **block_kwargs) for _ in range(strategy.n)] if bidirectional else None
        return cls(fwd, strategy, bwd, bidirectional)

    def parameters(self, prefix: str = "") -> dict[str, Tensor]:
        params: dict[str, Tensor] = {}
        for i, block in enumerate(self.blocks_fwd):
            params.update(block.parameters(f"{prefix}fwd.{i}."))
        for i, block in enumerate(self.blocks_bwd or []):
            params.update(block.parameters(f"{prefix}bwd.{i}."))
        params.update(self.strategy.parameters(prefix + "scales."))
        return params


def multiscale_forward(
    e: Tensor,
    layer: MultiScaleLayer,
    direction: str = "fwd",
    scales: Tensor | None = None,
) -> Tensor:
    """Mean of the n block outputs; ``bwd`` runs the blocks on the token-reversed input."""
    if direction not in ("fwd", "bwd"):
        raise ValueError(f"direction must be 'fwd' or 'bwd', got {direction!r}")
    e = ad._as_tensor(e)
    if scales is None:
        scales = resolve_scales(layer.strategy, e)
    if direction == "fwd":
        blocks, tokens = layer.blocks_fwd, e
    else:
        if layer.blocks_bwd is None:
            raise ConfigError("layer has no backward blocks")
        blocks, tokens = layer.blocks_bwd, ad.flip(e, axis=-2)
    total = None
    for i, block in enumerate(blocks):
        out = mamba_block_forward(tokens, block, scales[i])
        total = out if total is None else total + out
    fused = total * (1.0 / len(blocks)) if len(blocks) > 1 else total
    return ad.flip(fused, axis=-2) if direction == "bwd" else fused


def bidirectional_forward(e: Tensor, layer: MultiScaleLayer) -> Tensor:
    """Sum of the forward and backward multi-scale passes; forward only when not bidirectional.

    Scales are resolved once from ``e`` and shared by both directions. The
    resolved values are kept on ``layer.last_scales`` for trajectory logging.
    """
    e = ad._as_tensor(e)
    scales = resolve_scales(layer.strategy, e)
    layer.last_scales = np.array(scales.data, copy=True)
    out = multiscale_forward(e, layer, "fwd", scales)
    if layer.bidirectional:
        out = out + multiscale_forward(e, layer, "bwd", scales)
    return out
