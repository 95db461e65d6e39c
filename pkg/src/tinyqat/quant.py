"""Uniform fake-quantization: MinMax and clipped variants, STE backward.

Scale conventions (symmetric): alpha = max|x| / (2^(N-1) - 1), beta = 0, so the
largest-magnitude element is reproduced exactly (outliers are retained).
Asymmetric: alpha = (max - min) / (2^N - 1), beta = min.

Fixed choices, documented because they are not universal:
  * rounding is half-away-from-zero on every platform;
  * an all-constant group gets alpha := 1 (the formula would divide by zero)
    and is passed through unchanged;
  * the "statistical" clipped scale is a |x|-quantile (default 0.9995);
  * the learnable clipped scale follows the learned-step-size gradient.
"""

from __future__ import annotations

import re
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, NumericError
from .tensor import Parameter, Tensor

SYMMETRIC = "symmetric"
ASYMMETRIC = "asymmetric"


@dataclass(frozen=True)
class PerTensor:
    pass


@dataclass(frozen=True)
class PerChannel:
    axis: int = 0


@dataclass(frozen=True)
class PerToken:
    """One scale per position along all leading axes (groups = last-axis rows)."""


@dataclass(frozen=True)
class NoClip:
    pass


@dataclass(frozen=True)
class Statistical:
    fraction: float = 0.9995


@dataclass(frozen=True)
class Learnable:
    pass


@dataclass(frozen=True)
class QuantSpec:
    """Full description of one quantizer. bits=None means full precision."""

    bits: int | None
    symmetry: str = SYMMETRIC
    granularity: object = field(default_factory=PerTensor)
    clipping: object = field(default_factory=NoClip)

    @classmethod
    def full_precision(cls) -> "QuantSpec":
        return cls(bits=None)

    @property
    def is_full_precision(self) -> bool:
        return self.bits is None

    def bits_str(self) -> str:
        return "16" if self.bits is None else str(self.bits)

    def validate(self) -> None:
        if self.bits is not None and self.bits < 2:
            raise ContractError(f"bits must be >= 2, got {self.bits}")


def weight_spec(bits: int | None) -> QuantSpec:
    return QuantSpec(bits, SYMMETRIC, PerChannel(0), NoClip())


def act_spec(bits: int | None) -> QuantSpec:
    return QuantSpec(bits, SYMMETRIC, PerToken(), NoClip())


def kv_spec(bits: int | None) -> QuantSpec:
    return QuantSpec(bits, SYMMETRIC, PerToken(), NoClip())


_SCHEME_RE = re.compile(r"^(\d+)-(\d+)-(\d+)$")
_SCHEME_BITS = {2, 3, 4, 5, 6, 7, 8, 16}


@dataclass(frozen=True)
class QuantScheme:
    """Bit-width triple for weights, activations and the KV cache ("W-A-KV")."""

    weights: QuantSpec
    activations: QuantSpec
    kv: QuantSpec

    @classmethod
    def parse(cls, text: str) -> "QuantScheme":
        m = _SCHEME_RE.match(text)
        if not m:
            raise ConfigError(f"bad scheme string {text!r}, expected '<w>-<a>-<kv>'")
        vals = []
        for part in m.groups():
            b = int(part)
            if b not in _SCHEME_BITS:
                raise ConfigError(f"scheme field {b} not in {{2..8, 16}}")
            vals.append(None if b == 16 else b)
        w, a, kv = vals
        return cls(weight_spec(w), act_spec(a), kv_spec(kv))

    @classmethod
    def identity(cls) -> "QuantScheme":
        return cls.parse("16-16-16")

    def render(self) -> str:
        return "-".join(s.bits_str() for s in (self.weights, self.activations, self.kv))

    @property
    def is_identity(self) -> bool:
        return all(s.is_full_precision for s in (self.weights, self.activations, self.kv))


@dataclass
class SmoothingParams:
    """Per-input-channel rescale vector and its migration exponent."""

    s: np.ndarray
    a: float


@dataclass
class QuantizedView:
    """Fake-quantized values plus the grid parameters that generated them."""

    values: np.ndarray
    scales: np.ndarray       # one per group, broadcastable to values
    zero_points: np.ndarray  # 0 where symmetric
    codes: np.ndarray        # integer grid indices
    granularity: object


def round_half_away(x: np.ndarray) -> np.ndarray:
    return np.copysign(np.floor(np.abs(x) + 0.5), x)


def _reduce_axes(ndim: int, granularity) -> tuple:
    if isinstance(granularity, PerTensor):
        return tuple(range(ndim))
    if isinstance(granularity, PerChannel):
        ax = granularity.axis % ndim
        return tuple(i for i in range(ndim) if i != ax)
    if isinstance(granularity, PerToken):
        return (ndim - 1,)
    raise ContractError(f"unknown granularity {granularity!r}")


def _as_array(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def quantize_minmax(x, spec: QuantSpec) -> QuantizedView:
    """MinMax (non-clipping) quantization with per-group scales."""
    xd = _as_array(x)
    if not np.all(np.isfinite(xd)):
        raise NumericError("quantize_minmax: non-finite input")
    spec.validate()
    if not isinstance(spec.clipping, NoClip):
        raise ContractError("quantize_minmax requires clipping=NoClip")
    if spec.is_full_precision:
        return QuantizedView(xd.copy(), np.ones(1), np.zeros(1),
                             xd.copy(), spec.granularity)
    axes = _reduce_axes(xd.ndim, spec.granularity)
    n = spec.bits
    if spec.symmetry == SYMMETRIC:
        qmax = 2 ** (n - 1) - 1
        alpha = np.abs(xd).max(axis=axes, keepdims=True) / qmax
        beta = np.zeros_like(alpha)
    elif spec.symmetry == ASYMMETRIC:
        hi = xd.max(axis=axes, keepdims=True)
        lo = xd.min(axis=axes, keepdims=True)
        alpha = (hi - lo) / (2 ** n - 1)
        beta = lo
    else:
        raise ContractError(f"unknown symmetry {spec.symmetry!r}")
    degenerate = alpha == 0
    alpha = np.where(degenerate, 1.0, alpha)
    codes = round_half_away((xd - beta) / alpha)
    values = alpha * codes + beta
    return QuantizedView(values, alpha, beta, codes.astype(np.int64), spec.granularity)


class StatisticalScale:
    """Quantile-of-|x| clip range (stand-in for a statistics-only calibrator)."""

    def __init__(self, fraction: float = 0.9995):
        if not 0.0 < fraction <= 1.0:
            raise ContractError(f"clip fraction {fraction} not in (0, 1]")
        self.fraction = fraction

    def range_for(self, xd: np.ndarray, spec: QuantSpec, axes: tuple):
        if spec.symmetry == SYMMETRIC:
            m = np.quantile(np.abs(xd), self.fraction, axis=axes, keepdims=True)
            return 2.0 * m, -m
        hi = np.quantile(xd, self.fraction, axis=axes, keepdims=True)
        lo = np.quantile(xd, 1.0 - self.fraction, axis=axes, keepdims=True)
        return hi - lo, lo


class FixedScale:
    """Externally supplied clip range (alpha = full range, beta = low end)."""

    def __init__(self, alpha, beta=0.0):
        self.alpha = np.asarray(alpha, dtype=np.float64)
        self.beta = np.asarray(beta, dtype=np.float64)

    def range_for(self, xd, spec, axes):
        return self.alpha, self.beta


def quantize_clipped(x, spec: QuantSpec, scale_source) -> QuantizedView:
    """Clipping-based quantization: normalize to [0, 1], round to 2^N - 1 levels."""
    xd = _as_array(x)
    if not np.all(np.isfinite(xd)):
        raise NumericError("quantize_clipped: non-finite input")
    spec.validate()
    if spec.is_full_precision:
        return QuantizedView(xd.copy(), np.ones(1), np.zeros(1),
                             xd.copy(), spec.granularity)
    axes = _reduce_axes(xd.ndim, spec.granularity)
    alpha, beta = scale_source.range_for(xd, spec, axes)
    alpha = np.where(np.asarray(alpha) == 0, 1.0, alpha)
    if np.any(np.asarray(alpha) <= 0):
        raise ContractError("quantize_clipped: alpha must be positive")
    levels = 2 ** spec.bits - 1
    t = np.clip((xd - beta) / alpha, 0.0, 1.0)
    codes = round_half_away(t * levels)
    values = alpha * codes / levels + beta
    step = np.broadcast_to(np.asarray(alpha) / levels, np.shape(alpha)).copy()
    return QuantizedView(values, step, np.broadcast_to(beta, np.shape(alpha)).copy(),
                         codes.astype(np.int64), spec.granularity)


class SteFreeze:
    """Pins quantizer decisions so the straight-through surrogate is smooth.

    The first forward pass captures, per fake-quant call site, the quantized
    values, the offset (q(x0) - x0) and the pass-through mask. Replayed passes
    return ``where(mask, x + offset, q(x0))`` — the locally affine surrogate
    whose finite differences match the STE gradient. Used by gradient checks.
    """

    def __init__(self):
        self.records: list[tuple[np.ndarray, np.ndarray, np.ndarray]] = []
        self.capturing = True
        self.idx = 0

    def begin_pass(self) -> None:
        if self.records:
            self.capturing = False
        self.idx = 0


_FREEZE_STACK: list[SteFreeze] = []


@contextmanager
def ste_freeze():
    fz = SteFreeze()
    _FREEZE_STACK.append(fz)
    try:
        yield fz
    finally:
        _FREEZE_STACK.pop()


def _fq_site(x: Tensor, compute):
    """One fake-quant call site: honor an active SteFreeze, else just compute.

    ``compute`` returns (values, bool pass-through mask); returns the same,
    replayed from the frozen record when a freeze context is in replay mode.
    """
    fz = _FREEZE_STACK[-1] if _FREEZE_STACK else None
    if fz is None:
        return compute()
    if fz.capturing:
        values, mask = compute()
        fz.records.append((values, values - x.data, mask))
        fz.idx += 1
        return values, mask
    values0, offset, mask = fz.records[fz.idx]
    fz.idx += 1
    return np.where(mask, x.data + offset, values0), mask if mask is not None else None


def fake_quant_ste(x: Tensor, spec: QuantSpec,
                   scale_param: Parameter | None = None) -> Tensor:
    """Quantize-dequantize in the forward pass with a straight-through backward.

    MinMax: gradient passes through unchanged everywhere. Clipped variants:
    the upstream gradient is zeroed exactly where the input saturated the clip
    range. With ``scale_param`` (learnable symmetric step size) the step also
    receives the learned-step-size gradient: (round(v) - v) inside the range,
    the range endpoint outside.
    """
    spec.validate()
    if spec.is_full_precision:
        return x

    if isinstance(spec.clipping, NoClip):
        def compute():
            return quantize_minmax(x.data, spec).values, np.ones(x.data.shape, bool)

        out, _ = _fq_site(x, compute)
        return T._finish("fake_quant", out, (x,), lambda g: (g,))

    if isinstance(spec.clipping, Statistical):
        def compute():
            view = quantize_clipped(x.data, spec,
                                    StatisticalScale(spec.clipping.fraction))
            alpha = view.scales * (2 ** spec.bits - 1)
            t = (x.data - view.zero_points) / alpha
            return view.values, (t >= 0.0) & (t <= 1.0)

        out, mask = _fq_site(x, compute)
        fmask = mask.astype(x.data.dtype)
        return T._finish("fake_quant", out, (x,), lambda g: (g * fmask,))

    if isinstance(spec.clipping, Learnable):
        if spec.symmetry != SYMMETRIC:
            raise ContractError("learnable clipping supports symmetric specs only")
        if scale_param is None:
            raise ContractError("learnable clipping requires a scale Parameter")
        step = float(scale_param.value.data)
        if step <= 0:
            raise ContractError("learnable step size must be positive")
        qmax = 2 ** (spec.bits - 1) - 1
        v = x.data / step
        below = v < -qmax
        above = v > qmax
        inside = ~(below | above)
        vbar = np.clip(v, -qmax, qmax)
        rounded = round_half_away(vbar)
        out = rounded * step

        def bwd(g):
            gx = g * inside
            dstep = np.where(inside, rounded - v,
                             np.where(below, -float(qmax), float(qmax)))
            return gx, np.asarray((g * dstep).sum())

        return T._finish("fake_quant", out, (x, scale_param.value), bwd)

    raise ContractError(f"unknown clipping {spec.clipping!r}")


def smooth_rescale(weight, act_absmax, a: float = 0.5):
    """Migrate activation outliers into the weight via a per-channel rescale.

    s_j = act_absmax_j^a / colmax_j^(1-a); the returned weight is W * diag(s)
    and callers divide the activation channelwise by s before the matmul, so
    the full-precision product is unchanged.
    """
    wd = _as_array(weight)
    stats = np.asarray(act_absmax, dtype=np.float64)
    if not 0.0 <= a <= 1.0:
        raise ContractError(f"migration exponent {a} not in [0, 1]")
    if stats.ndim != 1 or stats.shape[0] != wd.shape[1]:
        raise ContractError(
            f"act stats length {stats.shape} vs weight input channels {wd.shape[1]}")
    if np.any(stats < 0):
        raise ContractError("activation stats must be non-negative")
    colmax = np.abs(wd).max(axis=0)
    s = np.where((stats == 0) | (colmax == 0), 1.0,
                 stats ** a / np.where(colmax == 0, 1.0, colmax) ** (1.0 - a))
    if not np.all(np.isfinite(s)) or np.any(s <= 0):
        raise NumericError("smooth_rescale produced an invalid scale vector")
    return wd * s[None, :], SmoothingParams(s=s, a=a)


def rtn_apply(model, scheme: QuantScheme):
    """Round-to-nearest PTQ: bake fake-quantized weights, no training.

    Returns a copy; activations and KV stay dynamically quantized at inference
    under the returned model's recorded scheme.
    """
    if isinstance(scheme, str):
        scheme = QuantScheme.parse(scheme)
    out = model.clone()
    if not scheme.weights.is_full_precision:
        for name in out.linear_sites():
            p = out.params[name]
            view = quantize_minmax(p.value.data, scheme.weights)
            p.value.data[...] = view.values
    out.trained_scheme = scheme.render()
    return out
