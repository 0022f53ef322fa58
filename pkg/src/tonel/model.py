"""Projection + task predictor with hand-written forward and backward passes.

Forward for a batch ``X`` (B x d_in)::

    Z   = X @ W_proj + b_proj                 (affine arch)
    Z   = relu(X @ W_hid + b_hid) @ W_proj + b_proj   (mlp arch)
    Zq  = fake_quantize(Z)                    per-row scale, clipped STE
    Zn  = Zq + eta                            eta from the cell noise model
    L   = logits = Zn @ W_pred + b_pred

The loss is the batch mean of softmax cross-entropy.  Noise enters as an
additive constant and the quantization scale is not differentiated.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import rng as rngmod
from .embedding_store import _read_bytes, _write_bytes
from .errors import (
    BadHeader,
    BadLabel,
    BadMagic,
    ConfigError,
    NumericalError,
    ShapeMismatch,
    StaleCache,
    TruncatedPayload,
)
from .quantizer import INT8, QuantConfig, fake_quantize_parts

ARCHS = ("affine", "mlp")
D_OUT = 64


@dataclass
class TonelModel:
    d_in: int
    d_out: int
    n_classes: int
    params: dict[str, np.ndarray]
    arch: str = "affine"
    hidden: int = 0
    version: int = 0  # bumped on every parameter update; guards stale caches

    def __post_init__(self):
        if self.arch not in ARCHS:
            raise ConfigError(f"arch must be one of {ARCHS}, got {self.arch!r}")
        expected = param_shapes(self.d_in, self.d_out, self.n_classes, self.arch, self.hidden)
        if list(self.params) != list(expected):
            raise ShapeMismatch(f"parameter names {list(self.params)} != {list(expected)}")
        for name, shape in expected.items():
            if self.params[name].shape != shape:
                raise ShapeMismatch(f"{name}: shape {self.params[name].shape} != {shape}")

    @property
    def dtype(self):
        return self.params["W_proj"].dtype

    def copy(self) -> "TonelModel":
        return TonelModel(self.d_in, self.d_out, self.n_classes,
                          {k: v.copy() for k, v in self.params.items()},
                          self.arch, self.hidden, self.version)

    def all_finite(self) -> bool:
        return all(np.isfinite(p).all() for p in self.params.values())


def param_shapes(d_in, d_out, n_classes, arch="affine", hidden=0) -> dict[str, tuple]:
    shapes: dict[str, tuple] = {}
    if arch == "mlp":
        shapes["W_hid"] = (d_in, hidden)
        shapes["b_hid"] = (hidden,)
        shapes["W_proj"] = (hidden, d_out)
    else:
        shapes["W_proj"] = (d_in, d_out)
    shapes["b_proj"] = (d_out,)
    shapes["W_pred"] = (d_out, n_classes)
    shapes["b_pred"] = (n_classes,)
    return shapes


def init_model(d_in: int, n_classes: int, d_out: int = D_OUT, seed: int = 0,
               arch: str = "affine", hidden: int = 128, dtype=np.float32) -> TonelModel:
    """Weights ~ U(-a, a) with a = sqrt(6 / (fan_in + fan_out)); biases zero."""
    if min(d_in, d_out, n_classes) < 1:
        raise ConfigError("d_in, d_out and n_classes must be positive")
    if arch == "mlp" and hidden < 1:
        raise ConfigError("mlp arch needs hidden >= 1")
    shapes = param_shapes(d_in, d_out, n_classes, arch, hidden if arch == "mlp" else 0)
    params = {}
    for i, (name, shape) in enumerate(shapes.items()):
        if len(shape) == 2:
            a = np.sqrt(6.0 / (shape[0] + shape[1]))
            params[name] = rngmod.stream(seed, rngmod.INIT, i).uniform(-a, a, size=shape).astype(dtype)
        else:
            params[name] = np.zeros(shape, dtype=dtype)
    return TonelModel(d_in, d_out, n_classes, params, arch, hidden if arch == "mlp" else 0)


# -- forward --------------------------------------------------------------

def _check_width(x: np.ndarray, width: int, what: str) -> None:
    if x.shape[-1] != width:
        raise ShapeMismatch(f"{what}: expected last dim {width}, got {x.shape[-1]}")


def project(model: TonelModel, x) -> np.ndarray:
    """Projection only (no quantization); accepts a vector or a B x d_in batch."""
    x = np.asarray(x, dtype=model.dtype)
    _check_width(x, model.d_in, "project")
    p = model.params
    if model.arch == "mlp":
        x = np.maximum(x @ p["W_hid"] + p["b_hid"], 0)
    return x @ p["W_proj"] + p["b_proj"]


def predict_logits(model: TonelModel, z) -> np.ndarray:
    z = np.asarray(z, dtype=model.dtype)
    _check_width(z, model.d_out, "predict_logits")
    return z @ model.params["W_pred"] + model.params["b_pred"]


NoiseFn = Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]


@dataclass
class ForwardCache:
    version: int
    x: np.ndarray
    h_pre: np.ndarray | None
    h: np.ndarray | None
    z_noisy: np.ndarray
    ste_mask: np.ndarray | None


def forward(model: TonelModel, x, quant: QuantConfig | None = INT8,
            noise: NoiseFn | None = None) -> tuple[np.ndarray, ForwardCache]:
    """Batch forward pass.

    ``quant=None`` skips quantization entirely.  ``noise(values, codes,
    scales)`` returns the noisy activations; it is only called when
    quantization is on, because the cell model needs integer codes.
    """
    x = np.asarray(x, dtype=model.dtype)
    if x.ndim != 2:
        raise ShapeMismatch(f"forward expects a B x d_in batch, got shape {x.shape}")
    _check_width(x, model.d_in, "forward")
    p = model.params
    h_pre = h = None
    if model.arch == "mlp":
        h_pre = x @ p["W_hid"] + p["b_hid"]
        h = np.maximum(h_pre, 0)
        z = h @ p["W_proj"] + p["b_proj"]
    else:
        z = x @ p["W_proj"] + p["b_proj"]
    mask = None
    if quant is not None:
        z, mask, codes, scales = fake_quantize_parts(z, quant)
        if noise is not None:
            z = noise(z, codes, scales)
    logits = z @ p["W_pred"] + p["b_pred"]
    return logits, ForwardCache(model.version, x, h_pre, h, z, mask)


# -- loss -----------------------------------------------------------------

def ce_loss_and_grad(logits, label: int) -> tuple[float, np.ndarray]:
    """Softmax cross-entropy of one sample and its gradient w.r.t. the logits."""
    logits = np.asarray(logits, dtype=np.float64)
    if not 0 <= label < logits.shape[-1]:
        raise BadLabel(f"label {label} outside [0, {logits.shape[-1]})")
    if not np.isfinite(logits).all():
        raise NumericalError("non-finite logits")
    shifted = logits - logits.max()
    lse = np.log(np.exp(shifted).sum())
    loss = float(lse - shifted[label])
    grad = np.exp(shifted - lse)
    grad[label] -= 1.0
    return loss, grad


def softmax_cross_entropy(logits, labels) -> tuple[float, np.ndarray]:
    """Batch version: ``(mean loss, per-sample dlogits)``; accumulates in float64."""
    logits = np.asarray(logits)
    labels = np.asarray(labels, dtype=np.int64)
    b, c = logits.shape
    if labels.shape != (b,):
        raise ShapeMismatch(f"{labels.shape[0]} labels for {b} rows")
    if b and (labels.min() < 0 or labels.max() >= c):
        raise BadLabel(f"labels must lie in [0, {c})")
    z = logits.astype(np.float64)
    shifted = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(b)
    losses = lse - shifted[rows, labels]
    probs = np.exp(shifted - lse[:, None])
    probs[rows, labels] -= 1.0
    return float(losses.mean()) if b else 0.0, probs.astype(logits.dtype)


# -- backward -------------------------------------------------------------

GradientBundle = dict  # parameter name -> gradient array, same shapes and order as model.params


def backward(model: TonelModel, cache: ForwardCache, dlogits) -> GradientBundle:
    """Gradients of the batch-mean loss given per-sample ``dlogits`` (B x C)."""
    if cache.version != model.version:
        raise StaleCache("forward cache predates the last parameter update")
    dlogits = np.asarray(dlogits, dtype=model.dtype)
    b = dlogits.shape[0]
    if dlogits.shape != (cache.x.shape[0], model.n_classes):
        raise ShapeMismatch(f"dlogits shape {dlogits.shape} does not match the cached batch")
    p = model.params
    g = dlogits / model.dtype.type(max(b, 1))
    grads = {}
    grads["W_pred"] = cache.z_noisy.T @ g
    grads["b_pred"] = g.sum(axis=0)
    dz = g @ p["W_pred"].T
    if cache.ste_mask is not None:
        dz = dz * cache.ste_mask
    src = cache.h if model.arch == "mlp" else cache.x
    grads["W_proj"] = src.T @ dz
    grads["b_proj"] = dz.sum(axis=0)
    if model.arch == "mlp":
        dh = (dz @ p["W_proj"].T) * (cache.h_pre > 0)
        grads["W_hid"] = cache.x.T @ dh
        grads["b_hid"] = dh.sum(axis=0)
    return {k: grads[k] for k in p}


def zero_grads(model: TonelModel) -> GradientBundle:
    return {k: np.zeros_like(v) for k, v in model.params.items()}


# -- optimizers -----------------------------------------------------------

@dataclass
class OptimizerState:
    algorithm: str = "adam"
    lr: float = 1e-3
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.algorithm not in ("adam", "sgd"):
            raise ConfigError(f"optimizer must be 'adam' or 'sgd', got {self.algorithm!r}")
        if not self.lr > 0:
            raise ConfigError(f"learning rate must be positive, got {self.lr}")


def optimizer_step(model: TonelModel, grads: GradientBundle, state: OptimizerState) -> None:
    if list(grads) != list(model.params):
        raise ShapeMismatch(f"gradient names {list(grads)} != parameter names {list(model.params)}")
    for name, param in model.params.items():
        if grads[name].shape != param.shape:
            raise ShapeMismatch(f"{name}: gradient shape {grads[name].shape} != {param.shape}")
    state.step += 1
    t = state.step
    for name, param in model.params.items():
        g = grads[name].astype(np.float64)
        if state.weight_decay:
            g = g + state.weight_decay * param
        if state.algorithm == "sgd":
            buf = state.m.get(name)
            buf = g if buf is None else state.momentum * buf + g
            state.m[name] = buf
            update = state.lr * buf
        else:
            m = state.m.get(name, np.zeros(param.shape))
            v = state.v.get(name, np.zeros(param.shape))
            m = state.beta1 * m + (1 - state.beta1) * g
            v = state.beta2 * v + (1 - state.beta2) * g * g
            state.m[name], state.v[name] = m, v
            m_hat = m / (1 - state.beta1 ** t)
            v_hat = v / (1 - state.beta2 ** t)
            update = state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
        param -= update.astype(param.dtype)
    model.version += 1


# -- checkpoints ----------------------------------------------------------
# "TMDL" | u32 version | u32 d_in | u32 d_out | u32 C | u32 arch | u32 hidden | f32 tensors in param order

_CKPT = struct.Struct("<4sIIIIII")
CKPT_VERSION = 1


def save_model(model: TonelModel, path) -> None:
    header = _CKPT.pack(b"TMDL", CKPT_VERSION, model.d_in, model.d_out, model.n_classes,
                        ARCHS.index(model.arch), model.hidden)
    tensors = [np.ascontiguousarray(v, dtype="<f4").tobytes() for v in model.params.values()]
    _write_bytes(path, [header, *tensors])


def load_model(path) -> TonelModel:
    buf = _read_bytes(path)
    if buf[:4] != b"TMDL":
        raise BadMagic(f"{path}: expected magic b'TMDL' at byte 0")
    if len(buf) < _CKPT.size:
        raise TruncatedPayload(f"{path}: header truncated at byte {len(buf)}")
    _, version, d_in, d_out, c, arch, hidden = _CKPT.unpack_from(buf, 0)
    if version != CKPT_VERSION or arch >= len(ARCHS) or min(d_in, d_out, c) == 0:
        raise BadHeader(f"{path}: unsupported checkpoint header")
    shapes = param_shapes(d_in, d_out, c, ARCHS[arch], hidden)
    offset = _CKPT.size
    params = {}
    for name, shape in shapes.items():
        n = int(np.prod(shape))
        if offset + 4 * n > len(buf):
            raise TruncatedPayload(f"{path}: tensor {name} truncated at byte {len(buf)}")
        params[name] = np.frombuffer(buf, "<f4", n, offset).reshape(shape).astype(np.float32)
        offset += 4 * n
    if offset != len(buf):
        raise BadHeader(f"{path}: {len(buf) - offset} trailing bytes")
    return TonelModel(d_in, d_out, c, params, ARCHS[arch], hidden)
