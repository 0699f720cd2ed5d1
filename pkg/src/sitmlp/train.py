"""Optimization recipe, evaluation reports and score-level ensembling."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .data import DatasetManifest, iterate_batches, load_arrays
from .engine import ops
from .engine.tensor import Tape, Tensor
from .exceptions import ConfigError, ContractError, DataError, FormatError
from .network import ModelConfig, SitMlpModel

logger = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 90
    warmup_epochs: int = 5
    base_lr: float = 0.1
    end_lr: float = 0.0001
    momentum: float = 0.9
    weight_decay: float = 0.0004
    batch_size: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if not 0 <= self.warmup_epochs < self.epochs:
            raise ConfigError("warmup_epochs must be in [0, epochs)")
        if not self.base_lr > self.end_lr > 0:
            raise ConfigError("need base_lr > end_lr > 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not 0 <= self.momentum < 1 or self.weight_decay < 0:
            raise ConfigError("momentum must be in [0, 1) and weight_decay >= 0")

    @classmethod
    def from_dict(cls, mapping: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(mapping) - known
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**mapping)


def lr_at(cfg: TrainConfig, epoch: float) -> float:
    """Linear warmup from 0, then cosine annealing from base_lr to end_lr."""
    if epoch < cfg.warmup_epochs:
        return cfg.base_lr * epoch / cfg.warmup_epochs
    progress = (epoch - cfg.warmup_epochs) / (cfg.epochs - cfg.warmup_epochs)
    return cfg.end_lr + 0.5 * (cfg.base_lr - cfg.end_lr) * (1.0 + math.cos(math.pi * progress))


class OptimizerState:
    """Momentum buffers, one per learnable parameter, in parameter order."""

    def __init__(self, params: Sequence[Tensor]):
        self.params = list(params)
        self.buffers = [np.zeros_like(p.data) for p in self.params]
        self.steps = 0

    def state_dict(self) -> dict:
        return {f"momentum.{i}": b for i, b in enumerate(self.buffers)}


def sgd_step(params: Sequence[Tensor], grads: Optional[Sequence[np.ndarray]], state: OptimizerState,
             lr: float, cfg: TrainConfig) -> None:
    """Classical SGD with momentum; weight decay is added to the gradient.

    Parameters whose ``decay`` attribute is False are not decayed.
    """
    params = list(params)
    if len(params) != len(state.buffers):
        raise ContractError("optimizer state does not match the parameter list")
    if grads is None:
        grads = [p.grad for p in params]
    for i, (p, g, buf) in enumerate(zip(params, grads, state.buffers)):
        if g is None:
            raise ContractError(f"parameter {p.name or i} has no gradient")
        if getattr(p, "decay", True) and cfg.weight_decay:
            g = g + cfg.weight_decay * p.data
        buf *= cfg.momentum
        buf += g
        p.data -= (lr * buf).astype(p.dtype)
    state.steps += 1


def cross_entropy(logits: Tensor, labels) -> Tensor:
    return ops.cross_entropy(logits, labels)


@dataclass
class EpochLog:
    epoch: int
    lr: float
    loss: float
    acc: float


@dataclass
class FitResult:
    history: list
    final_checkpoint: Optional[Path] = None
    best_checkpoint: Optional[Path] = None

    @property
    def final_accuracy(self) -> float:
        return self.history[-1].acc


class TrainingError(ContractError):
    """Training diverged."""


def _batches(x, y, batch_size, seed, dtype):
    batches = list(iterate_batches(x, y, batch_size, seed, dtype))
    # batch statistics need two samples; fold a lone trailing sample into its neighbour
    if len(batches) > 1 and len(batches[-1][1]) == 1 and x.shape[1] == 1:
        (xa, ya), (xb, yb) = batches[-2], batches[-1]
        batches[-2:] = [(Tensor(np.concatenate([xa.data, xb.data])), np.concatenate([ya, yb]))]
    return batches


def train_epoch(model: SitMlpModel, x: np.ndarray, y: np.ndarray, state: OptimizerState,
                lr: float, cfg: TrainConfig, shuffle_seed, max_steps: Optional[int] = None) -> tuple:
    """One pass over ``(x, y)``; returns sample-weighted mean loss and accuracy."""
    model.train()
    params = state.params
    total_loss, correct, seen = 0.0, 0, 0
    for step, (xb, yb) in enumerate(_batches(x, y, cfg.batch_size, shuffle_seed, model.config.dtype)):
        if max_steps is not None and step >= max_steps:
            break
        for p in params:
            p.grad = None
        with Tape() as tape:
            logits = model(xb)
            loss = cross_entropy(logits, yb)
        value = loss.item()
        if not math.isfinite(value):
            raise TrainingError(
                f"non-finite loss {value} at step {state.steps} (lr={lr:.6g}); "
                f"max |logit| = {np.nanmax(np.abs(logits.data)):.3g}"
            )
        tape.backward(loss)
        sgd_step(params, None, state, lr, cfg)
        total_loss += value * len(yb)
        correct += int((logits.data.argmax(axis=1) == yb).sum())
        seen += len(yb)
    return total_loss / seen, correct / seen


def log_header(model_cfg: ModelConfig, cfg: TrainConfig, extra: Optional[dict] = None) -> list:
    lines = [f"# {k}={v}" for k, v in {**model_cfg.to_dict(), **asdict(cfg), **(extra or {})}.items()]
    return lines + ["epoch,lr,loss,acc"]


def fit(model: SitMlpModel, train, cfg: TrainConfig, out_dir=None, modality: str = "joint",
        graph=None, callback: Optional[Callable[[EpochLog], None]] = None) -> FitResult:
    """Train ``model`` in place.

    ``train`` is a :class:`DatasetManifest` or an ``(x, y)`` pair of arrays.
    With ``out_dir`` set, writes ``log.csv`` (``#``-prefixed config header, then
    ``epoch,lr,loss,acc``), ``final.ckpt`` and ``best.ckpt`` (lowest train loss).
    Epochs are numbered from 1 and epoch ``e`` uses ``lr_at(cfg, e)``.
    """
    mcfg = model.config
    if isinstance(train, DatasetManifest):
        x, y, _ = load_arrays(train, mcfg.frames, modality, graph, mcfg.persons)
    else:
        x, y = (np.asarray(a) for a in train)
    if len(x) == 0:
        raise DataError("no training samples")
    if y.max() >= mcfg.num_classes or y.min() < 0:
        raise ConfigError(f"labels exceed the model's {mcfg.num_classes} classes")

    state = OptimizerState(model.trainable_parameters())
    meta = {"model": mcfg.to_dict(), "train": asdict(cfg), "modality": modality}
    log_path = best_path = final_path = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        log_path = out_dir / "log.csv"
        log_path.write_text("\n".join(log_header(mcfg, cfg, {"modality": modality})) + "\n")
        best_path, final_path = out_dir / "best.ckpt", out_dir / "final.ckpt"

    history, best_loss = [], math.inf
    for epoch in range(1, cfg.epochs + 1):
        lr = lr_at(cfg, epoch)
        loss, acc = train_epoch(model, x, y, state, lr, cfg, [cfg.seed, epoch])
        row = EpochLog(epoch, lr, loss, acc)
        history.append(row)
        logger.info("epoch %d lr %.6g loss %.5f acc %.4f", epoch, lr, loss, acc)
        if callback is not None:
            callback(row)
        if log_path is not None:
            with open(log_path, "a") as fh:
                fh.write(f"{epoch},{lr!r},{loss!r},{acc!r}\n")
            if loss < best_loss:
                save_model(best_path, model, {**meta, "epoch": epoch})
        best_loss = min(best_loss, loss)
    if final_path is not None:
        save_model(final_path, model, {**meta, "epoch": cfg.epochs})
    return FitResult(history, final_path, best_path)


def save_model(path, model: SitMlpModel, meta: Optional[dict] = None) -> None:
    meta = dict(meta or {})
    meta.setdefault("model", model.config.to_dict())
    save_checkpoint(path, model.state_dict(), meta)


def load_model(path) -> tuple[SitMlpModel, dict]:
    tensors, meta = load_checkpoint(path)
    if "model" not in meta:
        raise FormatError(f"{path}: checkpoint carries no model config")
    model = SitMlpModel(ModelConfig.from_dict(meta["model"]))
    model.load_state_dict(tensors)
    model.eval()
    return model, meta


def predict_scores(model: SitMlpModel, x: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """Softmax probabilities ``[N, K]`` in eval mode; nothing is recorded."""
    model.eval()
    out = []
    for start in range(0, len(x), batch_size):
        xb = Tensor(np.asarray(x[start:start + batch_size], dtype=model.config.dtype))
        out.append(ops.softmax(model(xb), axis=1).data)
    return np.concatenate(out).astype(np.float64)


@dataclass
class EvalReport:
    accuracy: float
    per_class: list
    confusion: np.ndarray
    scores: np.ndarray
    labels: np.ndarray
    sample_ids: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "per_class": self.per_class,
            "confusion": self.confusion.tolist(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


def report_from_scores(scores: np.ndarray, labels, sample_ids=None,
                       num_classes: Optional[int] = None) -> EvalReport:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if scores.ndim != 2 or len(scores) != len(labels):
        raise DataError(f"scores {scores.shape} do not match {len(labels)} labels")
    k = num_classes or scores.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ConfigError(f"labels outside [0, {k})")
    pred = scores.argmax(axis=1)
    confusion = np.zeros((k, k), dtype=np.int64)
    np.add.at(confusion, (labels, pred), 1)
    counts = confusion.sum(axis=1)
    per_class = [float(confusion[i, i] / counts[i]) if counts[i] else None for i in range(k)]
    accuracy = float(np.trace(confusion) / len(labels)) if len(labels) else 0.0
    ids = list(sample_ids) if sample_ids is not None else [str(i) for i in range(len(labels))]
    return EvalReport(accuracy, per_class, confusion, scores, labels, ids)


def evaluate(model: SitMlpModel, test, modality: str = "joint", graph=None,
             batch_size: int = 64) -> EvalReport:
    """Score ``test`` (a manifest or ``(x, y[, ids])`` tuple) in eval mode."""
    mcfg = model.config
    if isinstance(test, DatasetManifest):
        x, y, ids = load_arrays(test, mcfg.frames, modality, graph, mcfg.persons)
    else:
        x, y, *rest = test
        ids = rest[0] if rest else None
    y = np.asarray(y)
    if len(y) and y.max() >= mcfg.num_classes:
        raise ConfigError(f"test labels exceed the model's {mcfg.num_classes} classes")
    scores = predict_scores(model, x, batch_size)
    return report_from_scores(scores, y, ids, mcfg.num_classes)


# -- score files -----------------------------------------------------------------


def write_scores(path, sample_ids: Sequence[str], scores: np.ndarray) -> None:
    scores = np.asarray(scores)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sample_id"] + [f"score_{k}" for k in range(scores.shape[1])])
        for sid, row in zip(sample_ids, scores):
            writer.writerow([sid] + [repr(float(v)) for v in row])


def read_scores(path) -> tuple[list, np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][0] != "sample_id":
        raise FormatError(f"{path}: missing 'sample_id,score_0,...' header")
    k = len(rows[0]) - 1
    ids, values = [], []
    for lineno, row in enumerate(rows[1:], 2):
        if len(row) != k + 1:
            raise FormatError(f"{path}:{lineno}: expected {k + 1} columns")
        ids.append(row[0])
        values.append([float(v) for v in row[1:]])
    return ids, np.array(values, dtype=np.float64).reshape(len(ids), k)


def write_labels(path, sample_ids: Sequence[str], labels) -> None:
    Path(path).write_text("".join(f"{s}\t{int(y)}\n" for s, y in zip(sample_ids, labels)))


def read_labels(path) -> dict:
    out = {}
    for line in Path(path).read_text().splitlines():
        if line.strip():
            sid, y = line.split("\t")
            out[sid] = int(y)
    return out


def ensemble(score_sets: Sequence, weights: Optional[Sequence[float]], labels) -> EvalReport:
    """Weighted average of per-model score matrices, then argmax.

    ``score_sets`` holds score-file paths or ``(sample_ids, scores)`` pairs;
    all must list the same samples in the same order. ``labels`` is a
    sequence aligned with the samples or a ``{sample_id: label}`` mapping.
    """
    sets = [read_scores(s) if isinstance(s, (str, Path)) else (list(s[0]), np.asarray(s[1])) for s in score_sets]
    if not sets:
        raise DataError("nothing to ensemble")
    weights = np.ones(len(sets)) if weights is None else np.asarray(weights, dtype=np.float64)
    if len(weights) != len(sets):
        raise ConfigError(f"{len(weights)} weights for {len(sets)} score sets")
    if np.any(weights < 0) or not np.any(weights > 0):
        raise ConfigError("weights must be non-negative and not all zero")
    ids, first = sets[0]
    for other_ids, other in sets[1:]:
        if other.shape != first.shape:
            raise DataError(f"score shapes differ: {first.shape} vs {other.shape}")
        if other_ids != ids:
            raise DataError("score files list different samples")
    combined = sum(w * s for w, (_, s) in zip(weights, sets)) / weights.sum()
    if isinstance(labels, dict):
        try:
            labels = [labels[s] for s in ids]
        except KeyError as err:
            raise DataError(f"no label for sample {err}") from None
    return report_from_scores(combined, labels, ids)
