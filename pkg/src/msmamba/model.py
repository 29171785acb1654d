"""The full forecaster: inverted embedding, encoder stack, projection head."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

import numpy as np

from . import autodiff as ad
from . import inference
from ._io import atomic_write_bytes
from .autodiff import Tensor
from .errors import ConfigError, DataError, DimensionError
from .multiscale import MultiScaleLayer, ScaleStrategy, bidirectional_forward, default_alphas

CHECKPOINT_MAGIC = b"MSMAMBA-CKPT-v1\n"
BYTES_PER_PARAM = 8  # float64


@dataclass
class ModelConfig:
    lookback: int
    horizon: int
    n_variates: int
    d_model: int = 128
    n_layers: int = 1
    n_scales: int = 4
    strategy: str = "fixed"
    alphas: tuple[float, ...] | None = None
    dynamic_hidden: int | None = None
    d_state: int = 8
    conv_width: int = 4
    expand: int = 2
    dt_rank: int | None = None
    d_ff: int | None = None
    dt_min: float = 1e-3
    dt_max: float = 0.1
    bidirectional: bool = True
    residual: bool = True

    def __post_init__(self):
        for name in ("lookback", "horizon", "n_variates", "d_model", "n_layers", "n_scales", "d_state", "conv_width", "expand"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or value < 1:
                raise ConfigError(f"{name} must be an integer >= 1, got {value!r}")
        if self.strategy not in ("fixed", "learnable", "dynamic"):
            raise ConfigError(f"unknown strategy {self.strategy!r}")
        if self.strategy == "fixed":
            if self.alphas is None:
                self.alphas = default_alphas(self.n_scales)
            self.alphas = tuple(float(a) for a in self.alphas)
            if len(self.alphas) != self.n_scales:
                raise ConfigError(f"{len(self.alphas)} alphas given for {self.n_scales} scales")
            if not all(math.isfinite(a) and a > 0 for a in self.alphas):
                raise ConfigError(f"alphas must be finite and positive, got {self.alphas}")
        elif self.alphas is not None:
            raise ConfigError("alphas only apply to the fixed strategy")
        if self.dynamic_hidden is None:
            self.dynamic_hidden = self.d_model
        if self.dt_rank is None:
            self.dt_rank = math.ceil(self.d_model / 16)
        if self.d_ff is None:
            self.d_ff = self.d_model
        for name in ("dynamic_hidden", "dt_rank", "d_ff"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if not 0 < self.dt_min <= self.dt_max:
            raise ConfigError(f"need 0 < dt_min <= dt_max, got {self.dt_min}, {self.dt_max}")

    @property
    def d_inner(self) -> int:
        return self.expand * self.d_model

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        if d["alphas"] is not None:
            d["alphas"] = list(d["alphas"])
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        d = dict(d)
        if d.get("alphas") is not None:
            d["alphas"] = tuple(d["alphas"])
        return cls(**d)


@dataclass
class EncoderLayer:
    mixer: MultiScaleLayer
    ln_gain: Tensor
    ln_bias: Tensor
    ff_w1: Tensor
    ff_b1: Tensor
    ff_w2: Tensor
    ff_b2: Tensor

    def parameters(self, prefix: str = "") -> dict[str, Tensor]:
        params = self.mixer.parameters(prefix + "mixer.")
        for name in ("ln_gain", "ln_bias", "ff_w1", "ff_b1", "ff_w2", "ff_b2"):
            params[prefix + name] = getattr(self, name)
        return params


def _uniform(rng, fan_in, shape):
    bound = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


@dataclass
class ForecastModel:
    config: ModelConfig
    embed_w: Tensor
    embed_b: Tensor
    layers: list[EncoderLayer]
    proj_w: Tensor
    proj_b: Tensor
    _params: dict[str, Tensor] = field(default=None, init=False, repr=False)

    @classmethod
    def init(cls, config: ModelConfig, rng: np.random.Generator | int = 0) -> "ForecastModel":
        if not isinstance(rng, np.random.Generator):
            rng = np.random.default_rng(rng)
        c = config
        embed_w = _uniform(rng, c.lookback, (c.lookback, c.d_model))
        embed_b = _uniform(rng, c.lookback, (c.d_model,))
        layers = []
        for _ in range(c.n_layers):
            if c.strategy == "fixed":
                strategy = ScaleStrategy.fixed(c.alphas)
            elif c.strategy == "learnable":
                strategy = ScaleStrategy.learnable(c.n_scales, rng)
            else:
                strategy = ScaleStrategy.dynamic(c.n_scales, c.n_variates * c.d_model, c.dynamic_hidden, rng)
            mixer = MultiScaleLayer.init(
                rng,
                strategy,
                c.d_model,
                bidirectional=c.bidirectional,
                d_state=c.d_state,
                expand=c.expand,
                conv_width=c.conv_width,
                dt_rank=c.dt_rank,
                dt_min=c.dt_min,
                dt_max=c.dt_max,
            )
            layers.append(
                EncoderLayer(
                    mixer=mixer,
                    ln_gain=Tensor(np.ones(c.d_model), requires_grad=True),
                    ln_bias=Tensor(np.zeros(c.d_model), requires_grad=True),
                    ff_w1=_uniform(rng, c.d_model, (c.d_model, c.d_ff)),
                    ff_b1=_uniform(rng, c.d_model, (c.d_ff,)),
                    ff_w2=_uniform(rng, c.d_ff, (c.d_ff, c.d_model)),
                    ff_b2=_uniform(rng, c.d_ff, (c.d_model,)),
                )
            )
        proj_w = _uniform(rng, c.d_model, (c.d_model, c.horizon))
        proj_b = _uniform(rng, c.d_model, (c.horizon,))
        return cls(c, embed_w, embed_b, layers, proj_w, proj_b)

    def parameters(self) -> dict[str, Tensor]:
        """Named parameter tensors in a fixed, deterministic order."""
        if self._params is None:
            params = {"embed_w": self.embed_w, "embed_b": self.embed_b}
            for i, layer in enumerate(self.layers):
                params.update(layer.parameters(f"layers.{i}."))
            params["proj_w"] = self.proj_w
            params["proj_b"] = self.proj_b
            for name, p in params.items():
                p.name = name
            self._params = params
        return self._params

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters().values())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.parameters().items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = self.parameters()
        if set(state) != set(params):
            missing, extra = set(params) - set(state), set(state) - set(params)
            raise ConfigError(f"state mismatch; missing={sorted(missing)[:5]} extra={sorted(extra)[:5]}")
        for name, p in params.items():
            value = np.asarray(state[name], dtype=np.float64)
            if value.shape != p.shape:
                raise DimensionError(f"{name}: stored shape {value.shape} vs parameter {p.shape}")
            p.data[...] = value

    def scale_values(self, layer: int = 0) -> np.ndarray | None:
        """Current learnable multipliers, or the last resolved dynamic scales."""
        mixer = self.layers[layer].mixer
        if mixer.strategy.kind == "learnable":
            return mixer.strategy.multipliers.data.copy()
        if mixer.strategy.kind == "dynamic":
            return None if mixer.last_scales is None else mixer.last_scales.copy()
        return None

    def __call__(self, x) -> Tensor:
        return model_forward(x, self)


def _check_input(x: Tensor, c: ModelConfig) -> None:
    if x.ndim < 2 or x.shape[-2:] != (c.lookback, c.n_variates):
        raise ConfigError(f"input shape {x.shape} does not end in (L={c.lookback}, D={c.n_variates})")


def embed(x: Tensor, model: ForecastModel) -> Tensor:
    """``x[..., L, D]`` -> tokens ``[..., D, d_model]``: one shared affine map per variate history."""
    x = ad._as_tensor(x)
    _check_input(x, model.config)
    return ad.transpose(x) @ model.embed_w + model.embed_b


def encoder_layer_forward(e: Tensor, layer: EncoderLayer, residual: bool = True) -> Tensor:
    mixed = bidirectional_forward(e, layer.mixer)
    normed = ad.layer_norm(mixed, layer.ln_gain, layer.ln_bias)
    out = ad.relu(normed @ layer.ff_w1 + layer.ff_b1) @ layer.ff_w2 + layer.ff_b2
    return out + e if residual else out


def project(e: Tensor, model: ForecastModel) -> Tensor:
    """Tokens ``[..., D, d_model]`` -> forecast ``[..., T, D]``."""
    return ad.transpose(e @ model.proj_w + model.proj_b)


def model_forward(x, model: ForecastModel) -> Tensor:
    x = ad._as_tensor(x)
    if not np.all(np.isfinite(x.data)):
        raise DataError("model input contains non-finite values")
    if not ad.grad_enabled():
        _check_input(x, model.config)
        return Tensor._wrap(inference.forward(x.data, model))
    e = embed(x, model)
    for layer in model.layers:
        e = encoder_layer_forward(e, layer, model.config.residual)
    return project(e, model)


def mse_loss(yhat: Tensor, y) -> Tensor:
    """Mean squared error over every horizon step and variate (and batch element)."""
    yhat, y = ad._as_tensor(yhat), ad._as_tensor(y)
    if yhat.shape != y.shape:
        raise DimensionError(f"mse_loss: prediction {yhat.shape} vs target {y.shape}")
    diff = yhat - y
    return ad.mean(diff * diff)


# --------------------------------------------------------------------------
# cost accounting


@dataclass(frozen=True)
class CostReport:
    params: int
    macs: int
    memory_bytes: int
    precision: str = "float64"


def _block_params(c: ModelConfig) -> int:
    de, di, n, k, r = c.d_model, c.d_inner, c.d_state, c.conv_width, c.dt_rank
    in_proj = de * 2 * di
    conv = di * k + di
    ssm = di * n + di * r + r * di + di + 2 * di * n + di
    return in_proj + conv + ssm + di * de + de


def _block_macs(c: ModelConfig) -> int:
    s, de, di, n, k, r = c.n_variates, c.d_model, c.d_inner, c.d_state, c.conv_width, c.dt_rank
    affine = s * de * 2 * di + s * (di * r + r * di) + s * 2 * di * n + s * di * de
    conv = s * di * k
    # per step: h = a*h + b*x (2) and y += C*h (1) for every (channel, state); skip and gate per channel
    scan = s * di * n * 3 + s * di * 2
    return affine + conv + scan


def cost_report(config: ModelConfig) -> CostReport:
    """Parameter count, batch-1 MACs and parameter memory, from the config alone."""
    c = config
    blocks_per_layer = c.n_scales * (2 if c.bidirectional else 1)
    if c.strategy == "learnable":
        strategy_params = c.n_scales
    elif c.strategy == "dynamic":
        strategy_params = c.n_variates * c.d_model * c.dynamic_hidden + c.dynamic_hidden + c.dynamic_hidden * c.n_scales + c.n_scales
    else:
        strategy_params = 0
    ffn_params = c.d_model * c.d_ff + c.d_ff + c.d_ff * c.d_model + c.d_model
    layer_params = blocks_per_layer * _block_params(c) + strategy_params + 2 * c.d_model + ffn_params
    params = c.lookback * c.d_model + c.d_model + c.n_layers * layer_params + c.d_model * c.horizon + c.horizon

    s = c.n_variates
    strategy_macs = s * c.d_model * c.dynamic_hidden + c.dynamic_hidden * c.n_scales if c.strategy == "dynamic" else 0
    layer_macs = blocks_per_layer * _block_macs(c) + strategy_macs + 2 * s * c.d_model * c.d_ff
    macs = s * c.lookback * c.d_model + c.n_layers * layer_macs + s * c.d_model * c.horizon
    return CostReport(params=params, macs=macs, memory_bytes=params * BYTES_PER_PARAM)


# --------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path: str | Path, model: ForecastModel, meta: dict[str, Any] | None = None) -> None:
    """Magic line, one JSON header line, then the raw little-endian float64 parameters."""
    entries, blobs, offset = [], [], 0
    for name, p in model.parameters().items():
        blob = np.ascontiguousarray(p.data, dtype="<f8").tobytes()
        entries.append({"name": name, "shape": list(p.shape), "offset": offset})
        blobs.append(blob)
        offset += len(blob)
    header = {"config": model.config.to_dict(), "tensors": entries, "meta": meta or {}}
    line = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8") + b"\n"
    atomic_write_bytes(path, CHECKPOINT_MAGIC + line + b"".join(blobs))


def load_checkpoint(path: str | Path) -> tuple[ForecastModel, dict[str, Any]]:
    raw = Path(path).read_bytes()
    if not raw.startswith(CHECKPOINT_MAGIC):
        raise DataError(f"{path}: not an MSMAMBA-CKPT-v1 checkpoint")
    rest = raw[len(CHECKPOINT_MAGIC):]
    newline = rest.find(b"\n")
    if newline < 0:
        raise DataError(f"{path}: truncated checkpoint header")
    header = json.loads(rest[:newline])
    body = rest[newline + 1:]
    config = ModelConfig.from_dict(header["config"])
    model = ForecastModel.init(config, 0)
    state = {}
    for entry in header["tensors"]:
        count = math.prod(entry["shape"])
        start, stop = entry["offset"], entry["offset"] + 8 * count
        if stop > len(body):
            raise DataError(f"{path}: tensor {entry['name']} runs past end of file")
        state[entry["name"]] = np.frombuffer(body[start:stop], dtype="<f8").reshape(entry["shape"])
    model.load_state_dict(state)
    return model, header["meta"]
