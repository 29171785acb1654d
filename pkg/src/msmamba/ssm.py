"""Selective state-space machinery: ZOH discretization, selective scan, Mamba block.

The state matrix is diagonal per channel, stored as ``A_log`` with
``A = -exp(A_log)`` so it stays strictly negative under any update. The scan
runs along the token axis, which for inverted embeddings is the variate axis.
"""

from __future__ import annotations

import math
from collections.abc import Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from ._io import atomic_write_csv
from .autodiff import Tensor
from .errors import DimensionError, DomainError

# below this |delta * a| the input weight uses its Taylor series
ZOH_SERIES_THRESHOLD = 1e-6
_DPHI_SERIES_THRESHOLD = 1e-3


def discretize_zoh(a: float, b: float, delta: float) -> tuple[float, float]:
    """Zero-order-hold discretization of the scalar system ``h' = a h + b x``.

    Returns ``(exp(delta a), (delta a)^-1 (exp(delta a) - 1) delta b)``. When
    ``|delta a| < 1e-6`` the second term falls back to
    ``delta b (1 + delta a / 2 + (delta a)^2 / 6)``.
    """
    if not delta > 0:
        raise DomainError(f"delta must be positive, got {delta}")
    z = delta * a
    a_hat = math.exp(z)
    if abs(z) < ZOH_SERIES_THRESHOLD:
        b_hat = delta * b * (1.0 + z / 2.0 + z * z / 6.0)
    else:
        b_hat = math.expm1(z) / z * delta * b
    return a_hat, b_hat


def _zoh_terms(z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """exp(z) and phi(z) = (e^z - 1)/z, elementwise."""
    a_hat = np.exp(z)
    small = np.abs(z) < ZOH_SERIES_THRESHOLD
    if not small.any():
        return a_hat, np.expm1(z) / z
    safe = np.where(small, 1.0, z)
    return a_hat, np.where(small, 1.0 + z / 2.0 + z * z / 6.0, np.expm1(safe) / safe)


def _zoh_dphi(z: np.ndarray, a_hat: np.ndarray) -> np.ndarray:
    """phi'(z) = (z e^z - (e^z - 1)) / z^2, with a Taylor branch near 0."""
    tiny = np.abs(z) < _DPHI_SERIES_THRESHOLD
    if not tiny.any():
        return (z * a_hat - np.expm1(z)) / (z * z)
    safe = np.where(tiny, 1.0, z)
    return np.where(
        tiny,
        0.5 + z / 3.0 + z * z / 8.0 + z**3 / 30.0,
        (safe * a_hat - np.expm1(safe)) / (safe * safe),
    )


def scan_arrays(xv, dv, Av, Bv, Cv, Dv):
    """Forward recurrence on raw arrays; returns ``y`` and the saved intermediates."""
    if not np.all(dv > 0):
        raise DomainError("scan: every delta entry must be positive")
    seq = xv.shape[-2]
    z = dv[..., None] * Av
    a_hat, phi = _zoh_terms(z)
    dB = dv[..., None] * Bv[..., None, :]
    b_hat = phi * dB
    u = b_hat * xv[..., None]
    hs = np.empty_like(u)
    h = np.zeros(u.shape[:-3] + u.shape[-2:], dtype=u.dtype)
    for t in range(seq):
        h = a_hat[..., t, :, :] * h + u[..., t, :, :]
        hs[..., t, :, :] = h
    y = np.einsum("...tdn,...tn->...td", hs, Cv) + Dv * xv
    return y, (z, a_hat, phi, dB, b_hat, hs)


def scan(x: Tensor, delta: Tensor, A: Tensor, B: Tensor, C: Tensor, D: Tensor) -> Tensor:
    """Differentiable diagonal selective scan.

    Shapes: ``x, delta`` are ``(..., seq, d_inner)``; ``A`` is
    ``(d_inner, d_state)``; ``B, C`` are ``(..., seq, d_state)``; ``D`` is
    ``(d_inner,)``. With ``h_{-1} = 0``::

        h[t, i, j] = exp(delta[t,i] A[i,j]) h[t-1, i, j] + Bbar[t, i, j] x[t, i]
        y[t, i]    = sum_j C[t, j] h[t, i, j] + D[i] x[t, i]
    """
    x, delta, A, B, C, D = (ad._as_tensor(t) for t in (x, delta, A, B, C, D))
    xv, dv, Av, Bv, Cv, Dv = x.data, delta.data, A.data, B.data, C.data, D.data
    if xv.ndim < 2 or dv.shape != xv.shape:
        raise DimensionError(f"scan: x {xv.shape} and delta {dv.shape} must match")
    d_inner = xv.shape[-1]
    if Av.ndim != 2 or Av.shape[0] != d_inner:
        raise DimensionError(f"scan: A {Av.shape} does not match d_inner={d_inner}")
    d_state = Av.shape[1]
    expected = xv.shape[:-1] + (d_state,)
    if Bv.shape != expected or Cv.shape != expected:
        raise DimensionError(f"scan: B {Bv.shape} / C {Cv.shape}, expected {expected}")
    if Dv.shape != (d_inner,):
        raise DimensionError(f"scan: D {Dv.shape}, expected ({d_inner},)")
    y, (z, a_hat, phi, dB, b_hat, hs) = scan_arrays(xv, dv, Av, Bv, Cv, Dv)
    seq = xv.shape[-2]

    def grad_fn(gy):
        gC = np.einsum("...td,...tdn->...tn", gy, hs)
        gD = (gy * xv).reshape(-1, d_inner).sum(axis=0)
        gh = gy[..., None] * Cv[..., None, :]
        for t in range(seq - 2, -1, -1):
            gh[..., t, :, :] += a_hat[..., t + 1, :, :] * gh[..., t + 1, :, :]
        h_prev = np.zeros_like(hs)
        h_prev[..., 1:, :, :] = hs[..., :-1, :, :]
        g_ahat = gh * h_prev
        gx = (gh * b_hat).sum(axis=-1) + gy * Dv
        g_bhat = gh * xv[..., None]
        gz = g_ahat * a_hat + g_bhat * dB * _zoh_dphi(z, a_hat)
        g_dB = g_bhat * phi
        gdelta = (g_dB * Bv[..., None, :]).sum(axis=-1) + (gz * Av).sum(axis=-1)
        gB = (g_dB * dv[..., None]).sum(axis=-2)
        gA = (gz * dv[..., None]).reshape(-1, d_inner, d_state).sum(axis=0)
        return gx, gdelta, gA, gB, gC, gD

    return ad.traced("selective_scan", y, (x, delta, A, B, C, D), grad_fn)


def naive_scan_oracle(
    x: np.ndarray,
    delta: np.ndarray,
    A: np.ndarray,
    B: np.ndarray,
    C: np.ndarray,
    D: np.ndarray,
) -> np.ndarray:
    """Reference recurrence for one sequence, one scalar at a time.

    ``x, delta``: ``(seq, d_inner)``; ``A``: ``(d_inner, d_state)``;
    ``B, C``: ``(seq, d_state)``; ``D``: ``(d_inner,)``.
    """
    seq, d_inner = len(x), len(x[0])
    d_state = len(A[0])
    h = [[0.0] * d_state for _ in range(d_inner)]
    y = np.zeros((seq, d_inner))
    for t in range(seq):
        for i in range(d_inner):
            acc = 0.0
            for j in range(d_state):
                a_hat, b_hat = discretize_zoh(float(A[i][j]), float(B[t][j]), float(delta[t][i]))
                h[i][j] = a_hat * h[i][j] + b_hat * float(x[t][i])
                acc += float(C[t][j]) * h[i][j]
            y[t, i] = acc + float(D[i]) * float(x[t][i])
    return y


def conv_arrays(xv, wv, bv):
    """Causal depthwise convolution on raw arrays; returns the output and padded input."""
    channels, width = wv.shape
    seq = xv.shape[-2]
    pad = np.zeros(xv.shape[:-2] + (width - 1, channels), dtype=xv.dtype)
    xp = np.concatenate([pad, xv], axis=-2)
    out = bv + sum(xp[..., k : k + seq, :] * wv[:, k] for k in range(width))
    return out, xp


def causal_conv1d(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Depthwise causal convolution along the token axis.

    ``x``: ``(..., seq, channels)``; ``weight``: ``(channels, width)``, where
    the last tap multiplies the current token; ``bias``: ``(channels,)``.
    """
    x, weight, bias = ad._as_tensor(x), ad._as_tensor(weight), ad._as_tensor(bias)
    xv, wv = x.data, weight.data
    channels, width = wv.shape
    if xv.shape[-1] != channels or bias.shape != (channels,):
        raise DimensionError(f"causal_conv1d: x {xv.shape}, weight {wv.shape}, bias {bias.shape}")
    seq = xv.shape[-2]
    out, xp = conv_arrays(xv, wv, bias.data)

    def grad_fn(g):
        gxp = np.zeros_like(xp)
        gw = np.empty_like(wv)
        for k in range(width):
            gxp[..., k : k + seq, :] += g * wv[:, k]
            gw[:, k] = (g * xp[..., k : k + seq, :]).reshape(-1, channels).sum(axis=0)
        gb = g.reshape(-1, channels).sum(axis=0)
        return gxp[..., width - 1 :, :], gw, gb

    return ad.traced("causal_conv1d", out, (x, weight, bias), grad_fn)


def _uniform(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


@dataclass
class SsmCore:
    """Selective SSM parameters for one block.

    ``A = -exp(A_log)``, initialized to ``A[i, j] = -(j + 1)``. Delta uses a
    low-rank projection ``d_inner -> dt_rank -> d_inner`` plus a bias.
    """

    A_log: Tensor
    delta_down: Tensor
    delta_up: Tensor
    delta_bias: Tensor
    B_proj: Tensor
    C_proj: Tensor
    D: Tensor

    @classmethod
    def init(
        cls,
        rng: np.random.Generator,
        d_inner: int,
        d_state: int,
        dt_rank: int,
        dt_min: float = 1e-3,
        dt_max: float = 0.1,
    ) -> "SsmCore":
        if d_inner < 1 or d_state < 1 or dt_rank < 1:
            raise DomainError(f"d_inner={d_inner}, d_state={d_state}, dt_rank={dt_rank} must be >= 1")
        A = np.tile(np.arange(1, d_state + 1, dtype=np.float64), (d_inner, 1))
        # bias = softplus^-1(dt) with dt log-uniform in [dt_min, dt_max]
        dt = np.exp(rng.uniform(math.log(dt_min), math.log(dt_max), size=d_inner))
        bias = dt + np.log(-np.expm1(-dt))
        return cls(
            A_log=Tensor(np.log(A), requires_grad=True),
            delta_down=Tensor(_uniform(rng, d_inner, (d_inner, dt_rank)), requires_grad=True),
            delta_up=Tensor(_uniform(rng, dt_rank, (dt_rank, d_inner)), requires_grad=True),
            delta_bias=Tensor(bias, requires_grad=True),
            B_proj=Tensor(_uniform(rng, d_inner, (d_inner, d_state)), requires_grad=True),
            C_proj=Tensor(_uniform(rng, d_inner, (d_inner, d_state)), requires_grad=True),
            D=Tensor(np.ones(d_inner), requires_grad=True),
        )

    @property
    def d_inner(self) -> int:
        return self.A_log.shape[0]

    @property
    def d_state(self) -> int:
        return self.A_log.shape[1]

    def A(self) -> Tensor:
        return -ad.exp(self.A_log)

    def parameters(self, prefix: str = "") -> dict[str, Tensor]:
        names = ("A_log", "delta_down", "delta_up", "delta_bias", "B_proj", "C_proj", "D")
        return {prefix + n: getattr(self, n) for n in names}


def _check_scale(scale) -> None:
    value = scale.data if isinstance(scale, Tensor) else np.asarray(scale, dtype=np.float64)
    if value.shape != () or not np.isfinite(value) or not value > 0:
        raise DomainError(f"scale must be a finite positive scalar, got {value}")


def selective_params(x: Tensor, core: SsmCore, scale: float | Tensor = 1.0) -> tuple[Tensor, Tensor, Tensor]:
    """Input-dependent ``(delta, B, C)`` for a token sequence ``x[..., seq, d_inner]``.

    ``delta = scale * softplus(x W_down W_up + bias)``; ``B`` and ``C`` are
    linear in ``x``.
    """
    _check_scale(scale)
    pre = (x @ core.delta_down) @ core.delta_up + core.delta_bias
    delta = ad.softplus(pre) * scale
    return delta, x @ core.B_proj, x @ core.C_proj


def selective_scan(x: Tensor, core: SsmCore, delta: Tensor, B_seq: Tensor, C_seq: Tensor) -> Tensor:
    return scan(x, delta, core.A(), B_seq, C_seq, core.D)


@dataclass
class MambaBlock:
    """in-projection, causal conv, selective SSM, gated merge, out-projection, RMS norm."""

    in_proj: Tensor
    conv_weight: Tensor
    conv_bias: Tensor
    core: SsmCore
    out_proj: Tensor
    norm_gain: Tensor
    norm_eps: float = 1e-5

    @classmethod
    def init(
        cls,
        rng: np.random.Generator,
        d_model: int,
        d_state: int = 8,
        expand: int = 2,
        conv_width: int = 4,
        dt_rank: int | None = None,
        dt_min: float = 1e-3,
        dt_max: float = 0.1,
    ) -> "MambaBlock":
        d_inner = expand * d_model
        if dt_rank is None:
            dt_rank = math.ceil(d_model / 16)
        return cls(
            in_proj=Tensor(_uniform(rng, d_model, (d_model, 2 * d_inner)), requires_grad=True),
            conv_weight=Tensor(_uniform(rng, conv_width, (d_inner, conv_width)), requires_grad=True),
            conv_bias=Tensor(_uniform(rng, conv_width, (d_inner,)), requires_grad=True),
            core=SsmCore.init(rng, d_inner, d_state, dt_rank, dt_min, dt_max),
            out_proj=Tensor(_uniform(rng, d_inner, (d_inner, d_model)), requires_grad=True),
            norm_gain=Tensor(np.ones(d_model), requires_grad=True),
        )

    @property
    def d_model(self) -> int:
        return self.in_proj.shape[0]

    @property
    def d_inner(self) -> int:
        return self.core.d_inner

    def parameters(self, prefix: str = "") -> dict[str, Tensor]:
        params = {
            prefix + "in_proj": self.in_proj,
            prefix + "conv_weight": self.conv_weight,
            prefix + "conv_bias": self.conv_bias,
        }
        params.update(self.core.parameters(prefix))
        params[prefix + "out_proj"] = self.out_proj
        params[prefix + "norm_gain"] = self.norm_gain
        return params


def mamba_block_forward(e: Tensor, block: MambaBlock, scale: float | Tensor = 1.0, normalize: bool = True) -> Tensor:
    """Apply one block to tokens ``e[..., tokens, d_model]``."""
    e = ad._as_tensor(e)
    if e.shape[-1] != block.d_model:
        raise DimensionError(f"block expects d_model={block.d_model}, got input {e.shape}")
    d_inner = block.d_inner
    xz = e @ block.in_proj
    x = xz[..., :d_inner]
    gate = xz[..., d_inner:]
    x = ad.silu(causal_conv1d(x, block.conv_weight, block.conv_bias))
    delta, B_seq, C_seq = selective_params(x, block.core, scale)
    y = selective_scan(x, block.core, delta, B_seq, C_seq)
    out = (y * ad.silu(gate)) @ block.out_proj
    if not normalize:
        return out
    return ad.rms_norm(out, block.norm_gain, block.norm_eps)


@dataclass
class SpectralReport:
    """``|exp(delta * a)|`` for every (channel, state, delta) triple."""

    rows: list[tuple[int, int, float, float]]
    flagged: list[tuple[int, int, float]] = field(default_factory=list)

    def magnitudes(self, channel: int, state: int) -> list[float]:
        return [m for c, s, _, m in self.rows if c == channel and s == state]

    def to_csv(self, path: str | Path) -> None:
        atomic_write_csv(path, ["channel", "state", "delta", "magnitude"], ([c, s, repr(d), repr(m)] for c, s, d, m in self.rows))


def spectral_decay_report(core: SsmCore | np.ndarray, deltas: Sequence[float]) -> SpectralReport:
    """Decay magnitudes of the discretized transition over a grid of step sizes.

    For ``a < 0`` the magnitudes fall strictly as delta grows; entries with
    ``a >= 0`` are reported and listed in ``flagged``.
    """
    deltas = [float(d) for d in deltas]
    if not deltas or any(d <= 0 for d in deltas):
        raise DomainError("deltas must be non-empty and positive")
    if any(b <= a for a, b in zip(deltas, deltas[1:])):
        raise DomainError("deltas must be sorted strictly ascending")
    A = -np.exp(core.A_log.data) if isinstance(core, SsmCore) else np.atleast_2d(np.asarray(core, dtype=np.float64))
    report = SpectralReport(rows=[])
    for c in range(A.shape[0]):
        for s in range(A.shape[1]):
            a = float(A[c, s])
            if a >= 0:
                report.flagged.append((c, s, a))
            for d in deltas:
                report.rows.append((c, s, d, abs(math.exp(d * a))))
    return report
