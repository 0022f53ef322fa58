"""Device-variation model for embeddings stored in a CiM crossbar.

An int8 code is offset to ``u = code + 128`` and written across four 2-bit
multi-level cells, ``u = sum_j c_j * 4**j``.  Reading cell ``j`` returns
``c_j + eps_j`` with ``eps_j ~ N(0, (sigma * sigma_v[c_j])**2)``: the spread
depends on the programmed state (L0..L3) and is scaled by a global factor
``sigma``.  The analog value ``scale * (sum_j (c_j + eps_j) * 4**j - 128)``
is returned without re-rounding.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import rng as rngmod
from .errors import ConfigError, DataError, ShapeMismatch, UnknownDevice
from .quantizer import CimVector, QuantizedSet

N_LEVELS = 4
N_CELLS = 4
_PLACE = np.array([1.0, 4.0, 16.0, 64.0])


@dataclass(frozen=True)
class DeviceProfile:
    name: str
    sigma_v: tuple[float, float, float, float]

    def __post_init__(self):
        sv = tuple(float(x) for x in self.sigma_v)
        if len(sv) != N_LEVELS:
            raise ConfigError(f"device {self.name!r}: need exactly {N_LEVELS} sigma_v levels, got {len(sv)}")
        if not all(math.isfinite(x) and x >= 0 for x in sv):
            raise ConfigError(f"device {self.name!r}: sigma_v must be finite and non-negative")
        object.__setattr__(self, "sigma_v", sv)


_BUILTIN = (
    DeviceProfile("Device-1", (0.0100, 0.0100, 0.0100, 0.0100)),  # RRAM
    DeviceProfile("Device-2", (0.0067, 0.0135, 0.0135, 0.0067)),  # FeFET
    DeviceProfile("Device-3", (0.0049, 0.0146, 0.0146, 0.0049)),  # FeFET
    DeviceProfile("Device-4", (0.0038, 0.0151, 0.0151, 0.0038)),  # RRAM
)
_ALIASES = {"RRAM1": "Device-1", "FeFET2": "Device-2", "FeFET3": "Device-3", "RRAM4": "Device-4"}


def builtin_profiles() -> list[DeviceProfile]:
    return list(_BUILTIN)


def get_profile(name: str) -> DeviceProfile:
    name = _ALIASES.get(name, name)
    for p in _BUILTIN:
        if p.name == name:
            return p
    valid = ", ".join(p.name for p in _BUILTIN)
    raise UnknownDevice(f"unknown device {name!r}; valid names: {valid} (or a profile JSON file)")


def load_profile(path) -> DeviceProfile:
    try:
        obj = json.loads(Path(path).read_text())
        return DeviceProfile(obj["name"], tuple(obj["sigma_v"]))
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise ConfigError(f"bad device profile file {path}: {exc}") from exc


def resolve_profile(device: str) -> DeviceProfile:
    """Accept a built-in name/alias or a path to a ``{name, sigma_v}`` JSON file."""
    if device.endswith(".json") or Path(device).is_file():
        return load_profile(device)
    return get_profile(device)


@dataclass(frozen=True)
class NoiseConfig:
    profile: DeviceProfile
    sigma_scale: float = 1.0
    noisy_fraction: float = 1.0
    seed: int = 0
    per_query: bool = False  # resample stored-document noise for every query

    def __post_init__(self):
        if not (math.isfinite(self.sigma_scale) and self.sigma_scale >= 0):
            raise ConfigError(f"sigma_scale must be finite and >= 0, got {self.sigma_scale}")
        if not 0.0 <= self.noisy_fraction <= 1.0:
            raise ConfigError(f"noisy_fraction must be in [0, 1], got {self.noisy_fraction}")

    def level_sigma(self) -> np.ndarray:
        return self.sigma_scale * np.asarray(self.profile.sigma_v, dtype=np.float64)


def slice_cells(codes) -> np.ndarray:
    """Split int8 codes into base-4 cell states; result has a trailing axis of 4 (LSB first)."""
    u = np.asarray(codes, dtype=np.int16) + 128
    if np.any((u < 0) | (u > 255)):
        raise DataError("codes must lie in [-128, 127]")
    shifts = np.arange(N_CELLS, dtype=np.int16) * 2
    return ((u[..., None] >> shifts) & 3).astype(np.uint8)


def join_cells(cells) -> np.ndarray:
    cells = np.asarray(cells, dtype=np.int16)
    return (cells * (4 ** np.arange(N_CELLS, dtype=np.int16))).sum(axis=-1) - 128


def code_noise(codes: np.ndarray, cfg: NoiseConfig, gen: np.random.Generator) -> np.ndarray:
    """Readout error in code units, ``sum_j eps_j * 4**j``, same shape as ``codes``."""
    cells = slice_cells(codes)
    sd = cfg.level_sigma()[cells]
    eps = gen.standard_normal(cells.shape) * sd
    return eps @ _PLACE


def perturb_document(q: CimVector, cfg: NoiseConfig, gen: np.random.Generator) -> np.ndarray:
    """Analog readout of one stored vector."""
    clean = q.codes.astype(np.float32) * np.float32(q.scale)
    if cfg.sigma_scale == 0:
        return clean
    noisy = float(q.scale) * (q.codes.astype(np.float64) + code_noise(q.codes, cfg, gen))
    return noisy.astype(np.float32)


def n_noisy(n: int, fraction: float) -> int:
    """Number of perturbed rows, ``fraction * n`` rounded half away from zero."""
    return int(math.floor(fraction * n + 0.5))


def select_noisy(n: int, cfg: NoiseConfig, salt: int = 0) -> np.ndarray:
    m = n_noisy(n, cfg.noisy_fraction)
    if m == 0:
        return np.zeros(0, dtype=np.int64)
    if m == n:
        return np.arange(n, dtype=np.int64)
    gen = rngmod.stream(cfg.seed, rngmod.SELECTION, salt)
    return np.sort(gen.choice(n, size=m, replace=False)).astype(np.int64)


def perturb_matrix(docs: QuantizedSet, cfg: NoiseConfig, query_index: int | None = None):
    """Read back a stored document matrix with a fraction of rows perturbed.

    Returns ``(matrix float32 N x d, noisy row indices)``.  Each document
    draws from its own substream ``(seed, doc)``, or ``(seed, doc, query)``
    when ``query_index`` is given, so the output does not depend on the
    order in which rows are processed.
    """
    if len(docs) == 0:
        raise ShapeMismatch("document set is empty")
    out = docs.dequantize()
    idx = select_noisy(len(docs), cfg)
    if cfg.sigma_scale == 0 or idx.size == 0:
        return out, idx
    extra = () if query_index is None else (query_index,)
    for i in idx:
        gen = rngmod.stream(cfg.seed, rngmod.DOC_NOISE, int(i), *extra)
        out[i] = perturb_document(docs[i], cfg, gen)
    return out, idx


def training_noise(values: np.ndarray, codes: np.ndarray, scales: np.ndarray,
                   cfg: NoiseConfig, gen: np.random.Generator) -> np.ndarray:
    """Add cell-level readout noise to fake-quantized training activations.

    ``values`` must be ``scales * codes`` (row-wise); the result is
    ``values + eta`` with ``eta`` drawn exactly as in :func:`perturb_document`.
    Gradients treat ``eta`` as a constant.
    """
    if values.shape != codes.shape:
        raise ShapeMismatch(f"values {values.shape} vs codes {codes.shape}")
    if cfg.sigma_scale == 0:
        return values
    scales = np.asarray(scales, dtype=np.float64)
    eta = code_noise(codes, cfg, gen) * (scales[..., None] if scales.ndim else scales)
    return (values + eta).astype(values.dtype, copy=False)


def levels_table(profiles: Sequence[DeviceProfile] | None = None) -> list[dict]:
    return [{"name": p.name, "sigma_v": list(p.sigma_v)} for p in (profiles or _BUILTIN)]
