"""Symmetric per-vector fake quantization.

A vector ``v`` is stored as signed ``b``-bit codes plus one float scale::

    s     = max_j |v_j| / (2**(b-1) - 1)
    code  = clamp(round(v / s), -2**(b-1), 2**(b-1) - 1)
    v~    = s * code

The scale is float32 so that a stored vector (codes + scale) is exactly
what the crossbar sees.  An all-zero vector gets the sentinel scale 1.0.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import ConfigError, EmptyVector, NonFiniteInput, ShapeMismatch


class Rounding(str, Enum):
    HALF_AWAY = "half_away"  # round half away from zero
    HALF_EVEN = "half_even"  # banker's rounding, numpy's default
    IDENTITY = "identity"    # rounding disabled: differentiable surrogate


@dataclass(frozen=True)
class QuantConfig:
    bits: int = 8
    rounding: Rounding = Rounding.HALF_AWAY

    def __post_init__(self):
        if not 2 <= self.bits <= 8:
            raise ConfigError(f"bits must be in [2, 8], got {self.bits}")
        object.__setattr__(self, "rounding", Rounding(self.rounding))

    @property
    def qmax(self) -> int:
        return 2 ** (self.bits - 1) - 1

    @property
    def qmin(self) -> int:
        return -(2 ** (self.bits - 1))


INT8 = QuantConfig()


def round_values(x: np.ndarray, mode: Rounding) -> np.ndarray:
    if mode is Rounding.HALF_AWAY:
        return np.copysign(np.floor(np.abs(x) + 0.5), x)
    if mode is Rounding.HALF_EVEN:
        return np.rint(x)
    return x


@dataclass(frozen=True)
class CimVector:
    """One quantized vector: integer codes and its float32 scale."""

    codes: np.ndarray
    scale: np.float32

    def __len__(self) -> int:
        return self.codes.shape[0]


@dataclass(frozen=True)
class QuantizedSet:
    """Row-wise quantized matrix: ``codes`` is N x d int8, ``scales`` is N float32."""

    codes: np.ndarray
    scales: np.ndarray

    def __len__(self) -> int:
        return self.codes.shape[0]

    def __getitem__(self, i: int) -> CimVector:
        return CimVector(self.codes[i], self.scales[i])

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    @property
    def dim(self) -> int:
        return self.codes.shape[1]

    def dequantize(self) -> np.ndarray:
        return self.codes.astype(np.float32) * self.scales[:, None]


def row_scales(x: np.ndarray, cfg: QuantConfig = INT8) -> np.ndarray:
    """Per-row scale in ``x``'s float dtype; all-zero rows get 1.0."""
    maxabs = np.max(np.abs(x), axis=-1)
    s = maxabs / x.dtype.type(cfg.qmax)
    return np.where(maxabs > 0, s, x.dtype.type(1.0))


def _ratio(z: np.ndarray, s: np.ndarray) -> np.ndarray:
    """``z / s`` row-wise in float64: a float32 quotient can round onto a
    half-integer and flip the rounding direction."""
    return z.astype(np.float64) / s.astype(np.float64)[..., None]


def quantize_rows(x, cfg: QuantConfig = INT8) -> QuantizedSet:
    """Quantize every row of an N x d matrix to int codes with float32 scales."""
    x = np.asarray(x, dtype=np.float32)
    if x.ndim != 2:
        raise ShapeMismatch(f"expected a 2-D matrix, got shape {x.shape}")
    if x.shape[1] == 0:
        raise EmptyVector("cannot quantize zero-length vectors")
    if not np.isfinite(x).all():
        raise NonFiniteInput("cannot quantize non-finite values")
    if x.shape[0] == 0:
        return QuantizedSet(np.zeros(x.shape, np.int8), np.zeros(0, np.float32))
    mode = cfg.rounding
    if mode is Rounding.IDENTITY:
        raise ConfigError("integer codes need a rounding mode; identity is training-only")
    s = row_scales(x, cfg)
    codes = np.clip(round_values(_ratio(x, s), mode), cfg.qmin, cfg.qmax)
    return QuantizedSet(codes.astype(np.int8), s.astype(np.float32))


def quantize(v, cfg: QuantConfig = INT8) -> CimVector:
    v = np.asarray(v, dtype=np.float32)
    if v.ndim != 1:
        raise ShapeMismatch(f"expected a vector, got shape {v.shape}")
    if v.size == 0:
        raise EmptyVector("cannot quantize an empty vector")
    q = quantize_rows(v[None, :], cfg)
    return q[0]


def dequantize(q: CimVector) -> np.ndarray:
    return q.codes.astype(np.float32) * np.float32(q.scale)


def fake_quantize_parts(z: np.ndarray, cfg: QuantConfig = INT8, scale=None):
    """Forward fake quantization of each row of ``z``, in ``z``'s dtype.

    Returns ``(z_hat, mask, codes, scales)``.  ``mask`` is the clipped
    straight-through gradient mask (1 inside the clamp range, 0 where
    clamped); ``codes`` are the integer codes (always rounded, even in the
    identity-rounding surrogate, since the noise model needs cell states);
    ``scales`` has shape ``z.shape[:-1]`` and is a constant for backprop.
    With ``scale=None`` the scale is derived per row and nothing can clamp;
    pass an explicit scale to study saturation.
    """
    if scale is None:
        s = row_scales(z, cfg)
    else:
        s = np.broadcast_to(np.asarray(scale, dtype=z.dtype), z.shape[:-1])
    t = _ratio(z, s)
    if scale is None:
        # |t| <= qmax by construction; the row max can round one ulp past it
        mask = np.ones(z.shape, dtype=bool)
    else:
        mask = (t >= cfg.qmin) & (t <= cfg.qmax)
    mode = cfg.rounding
    rounded = np.clip(round_values(t, Rounding.HALF_AWAY if mode is Rounding.IDENTITY else mode),
                      cfg.qmin, cfg.qmax)
    if mode is Rounding.IDENTITY:
        out = s[..., None] * np.clip(t, cfg.qmin, cfg.qmax).astype(z.dtype)
    else:
        out = s[..., None] * rounded
    return out.astype(z.dtype, copy=False), mask, rounded.astype(np.int8), s


def fake_quantize_rows(z: np.ndarray, cfg: QuantConfig = INT8, scale=None):
    """``(z_hat, mask)`` from :func:`fake_quantize_parts`."""
    out, mask, _, _ = fake_quantize_parts(z, cfg, scale)
    return out, mask


def fake_quantize_with_grad(v, upstream_grad, cfg: QuantConfig = INT8, scale=None):
    """Fake-quantize ``v`` and push ``upstream_grad`` back through the clipped STE."""
    v = np.asarray(v)
    if not np.issubdtype(v.dtype, np.floating):
        v = v.astype(np.float64)
    g = np.asarray(upstream_grad, dtype=v.dtype)
    if v.shape != g.shape:
        raise ShapeMismatch(f"value shape {v.shape} != gradient shape {g.shape}")
    out, mask = fake_quantize_rows(v, cfg, scale)
    return out, np.where(mask, g, 0).astype(v.dtype)
