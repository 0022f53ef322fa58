"""Noise-aware training of the projection model.

Every mini-batch runs ``project -> fake-quantize -> + cell noise ->
predict -> cross-entropy`` and one optimizer step.  Noise is redrawn for
every batch from the substream ``(seed, epoch, batch)``; row ``i`` of the
batch always consumes the same slice of that stream, so a draw is a pure
function of ``(seed, epoch, batch, row)``.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import rng as rngmod
from .cim_noise import NoiseConfig, resolve_profile, training_noise
from .embedding_store import LabeledSet
from .errors import ConfigError, DivergedTraining, MissingLabels, ShapeMismatch
from .model import (
    OptimizerState,
    TonelModel,
    backward,
    forward,
    init_model,
    optimizer_step,
    project,
    softmax_cross_entropy,
)
from .quantizer import QuantConfig, QuantizedSet, quantize_rows

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    label_source: str = "pseudo"      # "pseudo" (w/ PL) or "true" (w/ TL)
    device: str = "Device-2"
    sigma_scale: float = 1.0
    epochs: int = 30
    batch_size: int = 64
    optimizer: str = "adam"
    lr: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 0.0
    seed: int = 0
    val_fraction: float = 0.1
    d_out: int = 64
    arch: str = "affine"
    hidden: int = 128
    bits: int = 8
    rounding: str = "half_away"       # "identity" trains the rounding-free surrogate

    def __post_init__(self):
        if self.label_source not in ("pseudo", "true"):
            raise ConfigError(f"label_source must be 'pseudo' or 'true', got {self.label_source!r}")
        if not 0.0 <= self.val_fraction <= 0.5:
            raise ConfigError(f"val_fraction must be in [0, 0.5], got {self.val_fraction}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")
        if not (math.isfinite(self.sigma_scale) and self.sigma_scale >= 0):
            raise ConfigError(f"sigma_scale must be finite and >= 0, got {self.sigma_scale}")
        if self.d_out < 1:
            raise ConfigError("d_out must be positive")
        self.quant_config()

    def quant_config(self) -> QuantConfig:
        return QuantConfig(self.bits, self.rounding)

    @classmethod
    def from_dict(cls, obj: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(obj) - known
        if unknown:
            raise ConfigError(f"unknown train config field(s): {sorted(unknown)}")
        return cls(**obj)

    @classmethod
    def from_json(cls, path) -> "TrainConfig":
        try:
            obj = json.loads(Path(path).read_text())
        except (OSError, ValueError) as exc:
            raise ConfigError(f"cannot read train config {path}: {exc}") from exc
        return cls.from_dict(obj)


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    train_acc: float
    val_loss: float | None
    val_acc: float | None


@dataclass
class TrainReport:
    config: dict
    n_train: int
    n_val: int
    n_classes: int
    epochs: list[EpochStats] = field(default_factory=list)
    best_epoch: int = 0
    best_val_acc: float | None = None
    checkpoint: str | None = None
    wall_clock_s: float = 0.0  # kept out of to_dict so reports stay byte-stable

    def to_dict(self) -> dict:
        d = asdict(self)
        del d["wall_clock_s"]
        return d


def split_indices(n: int, val_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    n_val = int(math.floor(val_fraction * n + 0.5))
    perm = rngmod.stream(seed, rngmod.SPLIT).permutation(n)
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


def _evaluate(model: TonelModel, x, y, quant) -> tuple[float, float]:
    logits, _ = forward(model, x, quant)
    loss, _ = softmax_cross_entropy(logits, y)
    acc = float((np.argmax(logits, axis=1) == y).mean())
    return loss, acc


def train(data: LabeledSet, cfg: TrainConfig, model: TonelModel | None = None) -> tuple[TonelModel, TrainReport]:
    labels, n_classes = data.labels(cfg.label_source)
    if (labels < 0).any():
        raise MissingLabels(f"{int((labels < 0).sum())} documents lack a {cfg.label_source} label")
    if n_classes < 2:
        raise MissingLabels(f"need at least 2 {cfg.label_source} classes, found {n_classes}")
    x_all = data.embeddings.data
    quant = cfg.quant_config()
    noise_cfg = NoiseConfig(resolve_profile(cfg.device), cfg.sigma_scale, 1.0, cfg.seed)

    if model is None:
        model = init_model(x_all.shape[1], n_classes, cfg.d_out, cfg.seed, cfg.arch, cfg.hidden)
    elif model.d_in != x_all.shape[1] or model.n_classes != n_classes:
        raise ShapeMismatch("initial model does not match data dimension / class count")
    tr, va = split_indices(x_all.shape[0], cfg.val_fraction, cfg.seed)
    x_tr, y_tr = x_all[tr], labels[tr]
    x_va, y_va = x_all[va], labels[va]
    opt = OptimizerState(cfg.optimizer, cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    report = TrainReport(asdict(cfg), len(tr), len(va), n_classes)

    best = model.copy()
    best_score = (-math.inf, -math.inf)
    t0 = time.perf_counter()
    for epoch in range(cfg.epochs):
        order = rngmod.stream(cfg.seed, rngmod.SHUFFLE, epoch).permutation(len(tr))
        loss_sum = 0.0
        correct = 0
        for b, lo in enumerate(range(0, len(tr), cfg.batch_size)):
            rows = order[lo:lo + cfg.batch_size]
            gen = rngmod.stream(cfg.seed, rngmod.TRAIN_NOISE, epoch, b)

            def noise(values, codes, scales, gen=gen):
                return training_noise(values, codes, scales, noise_cfg, gen)

            logits, cache = forward(model, x_tr[rows], quant, noise if cfg.sigma_scale > 0 else None)
            loss, dlogits = softmax_cross_entropy(logits, y_tr[rows])
            if not math.isfinite(loss):
                report.wall_clock_s = time.perf_counter() - t0
                raise DivergedTraining(f"non-finite loss at epoch {epoch}, batch {b}", report)
            optimizer_step(model, backward(model, cache, dlogits), opt)
            if not model.all_finite():
                report.wall_clock_s = time.perf_counter() - t0
                raise DivergedTraining(f"non-finite parameters after epoch {epoch}, batch {b}", report)
            loss_sum += loss * len(rows)
            correct += int((np.argmax(logits, axis=1) == y_tr[rows]).sum())
        stats = EpochStats(epoch, loss_sum / max(len(tr), 1), correct / max(len(tr), 1), None, None)
        if len(va):
            stats.val_loss, stats.val_acc = _evaluate(model, x_va, y_va, quant)
        report.epochs.append(stats)
        # best validation accuracy; lower validation loss breaks ties
        score = (stats.val_acc, -stats.val_loss) if len(va) else (-stats.train_loss, 0.0)
        if not math.isfinite(score[1]):
            score = (score[0], -math.inf)
        if score > best_score:
            best_score, best = score, model.copy()
            report.best_epoch = epoch
            report.best_val_acc = stats.val_acc
        log.info("epoch %d loss %.4f acc %.4f val_acc %s", epoch, stats.train_loss, stats.train_acc, stats.val_acc)
    report.wall_clock_s = time.perf_counter() - t0
    if cfg.epochs == 0:
        return model, report
    best.version = 0
    return best, report


def embed_corpus(model: TonelModel, data, quant: QuantConfig | None = None) -> QuantizedSet:
    """Project and quantize every row; row order is preserved."""
    x = np.asarray(getattr(data, "data", data), dtype=np.float32)
    if x.ndim != 2 or x.shape[1] != model.d_in:
        raise ShapeMismatch(f"expected N x {model.d_in} embeddings, got shape {x.shape}")
    if x.shape[0] == 0:
        return QuantizedSet(np.zeros((0, model.d_out), np.int8), np.zeros(0, np.float32))
    return quantize_rows(project(model, x).astype(np.float32), quant or QuantConfig())
