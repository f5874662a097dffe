"""Echo-presence probe: a small MLP trained from scratch on embedding pairs.

The probe maps concat(question embedding, think-prefix embedding) through a
two-layer ReLU MLP to a single logit. Training uses weighted binary
cross-entropy on logits (positive class weighted by the negative:positive
ratio), AdamW, and early stopping on validation loss. Span detection walks
cumulative sentence prefixes with a hysteresis rule: enter on a high score,
extend while above a lower one.

Embeddings are inputs; this module never runs an embedding model itself.
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import (
    DimensionMismatch,
    EmptyPrefixList,
    NonFiniteLoss,
    NoPositives,
    SingleClassTestSet,
)
from . import stats
from .traces import DetectionSource, EchoSpan

SCHEMA_VERSION = 1

# AdamW internals (not externally specified); recorded in every TrainReport.
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

DEFAULT_ENTER = 0.6
DEFAULT_EXIT = 0.15

PREFIX_WORD_COUNT = 32
MIN_SENTENCE_WORDS = 3


@dataclass(frozen=True)
class ProbeSample:
    question_embedding: np.ndarray
    prefix_embedding: np.ndarray
    label: int

    def __post_init__(self):
        object.__setattr__(self, "question_embedding", np.asarray(self.question_embedding, float))
        object.__setattr__(self, "prefix_embedding", np.asarray(self.prefix_embedding, float))
        if self.label not in (0, 1):
            raise ValueError("label must be 0 or 1")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    weight_decay: float = 0.01
    batch_size: int = 64
    max_epochs: int = 200
    patience: int = 10
    split: tuple[float, float, float] = (0.70, 0.15, 0.15)
    seed: int = 0
    hidden_dim: int = 32

    def __post_init__(self):
        if abs(sum(self.split) - 1.0) > 1e-9:
            raise ValueError("split fractions must sum to 1")
        if self.patience >= self.max_epochs:
            raise ValueError("patience must be smaller than max_epochs")

    def digest(self) -> str:
        payload = json.dumps(self.__dict__, sort_keys=True, default=list)
        return hashlib.sha256(payload.encode()).hexdigest()[:16]


@dataclass(frozen=True)
class NormStats:
    mean: np.ndarray
    std: np.ndarray  # zero-variance features clamped to 1


@dataclass(frozen=True)
class ProbeModel:
    input_dim: int
    hidden_dim: int
    w1: np.ndarray  # [hidden, input]
    b1: np.ndarray  # [hidden]
    w2: np.ndarray  # [hidden]
    b2: float
    norm_stats: NormStats
    enter_threshold: float = DEFAULT_ENTER
    exit_threshold: float = DEFAULT_EXIT
    seed: int = 0
    train_config_hash: str = ""

    def __post_init__(self):
        if not (0.0 <= self.exit_threshold <= self.enter_threshold <= 1.0):
            raise ValueError("thresholds must satisfy 0 <= exit <= enter <= 1")


def build_features(sample: ProbeSample, norm_stats: NormStats | None = None) -> np.ndarray:
    """Concatenate the two embeddings, z-scoring when stats are given."""
    q, p = sample.question_embedding, sample.prefix_embedding
    if q.size == 0 or p.size == 0 or q.shape != p.shape:
        raise DimensionMismatch(f"embedding dims {q.shape} vs {p.shape}")
    features = np.concatenate([q, p])
    if norm_stats is not None:
        if norm_stats.mean.shape != features.shape:
            raise DimensionMismatch(
                f"{features.size} features vs normalization stats for {norm_stats.mean.size}"
            )
        features = (features - norm_stats.mean) / norm_stats.std
    return features


def pos_weight(labels: Sequence[int]) -> float:
    """Negative:positive ratio used to weight the positive-class loss term."""
    labels = np.asarray(labels)
    n_pos = int((labels == 1).sum())
    if n_pos == 0:
        raise NoPositives("training labels contain no positive class")
    return float((labels == 0).sum()) / n_pos


def _softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-np.asarray(x, dtype=float)))


def _forward(w1, b1, w2, b2, x: np.ndarray):
    pre = x @ w1.T + b1
    hidden = np.maximum(pre, 0.0)
    logits = hidden @ w2 + b2
    return logits, hidden, pre


def loss_and_gradients(w1, b1, w2, b2, x: np.ndarray, y: np.ndarray, weight: float):
    """Mean weighted BCE-with-logits loss and its exact gradients.

    Stable form: loss_i = w*y*softplus(-z) + (1-y)*softplus(z).
    """
    logits, hidden, pre = _forward(w1, b1, w2, b2, x)
    with np.errstate(invalid="ignore"):  # NaN inputs surface as NonFiniteLoss upstream
        losses = weight * y * _softplus(-logits) + (1.0 - y) * _softplus(logits)
    loss = float(losses.mean())
    n = x.shape[0]
    g_logit = ((1.0 - y) * _sigmoid(logits) - weight * y * _sigmoid(-logits)) / n
    grad_w2 = g_logit @ hidden
    grad_b2 = float(g_logit.sum())
    g_hidden = np.outer(g_logit, w2) * (pre > 0.0)
    grad_w1 = g_hidden.T @ x
    grad_b1 = g_hidden.sum(axis=0)
    return loss, (grad_w1, grad_b1, grad_w2, grad_b2)


def predict(probe: ProbeModel, features: np.ndarray) -> float:
    """Sigmoid probability of echo presence for one feature vector."""
    features = np.asarray(features, dtype=float)
    if features.shape != (probe.input_dim,):
        raise DimensionMismatch(f"expected {probe.input_dim} features, got {features.shape}")
    logits, _, _ = _forward(probe.w1, probe.b1, probe.w2, probe.b2, features[None, :])
    return float(_sigmoid(logits[0]))


@dataclass(frozen=True)
class TrainReport:
    train_losses: tuple[float, ...]
    val_losses: tuple[float, ...]
    stop_epoch: int
    best_epoch: int
    best_val_loss: float
    pos_weight: float
    optimizer: dict
    split_indices: tuple[tuple[int, ...], tuple[int, ...], tuple[int, ...]]
    seed: int


class _AdamW:
    def __init__(self, shapes, lr: float, weight_decay: float):
        self.lr = lr
        self.wd = weight_decay
        self.m = [np.zeros(s) for s in shapes]
        self.v = [np.zeros(s) for s in shapes]
        self.t = 0

    def step(self, params: list[np.ndarray], grads) -> None:
        self.t += 1
        correction1 = 1.0 - ADAM_BETA1**self.t
        correction2 = 1.0 - ADAM_BETA2**self.t
        for i, (p, g) in enumerate(zip(params, grads)):
            self.m[i] = ADAM_BETA1 * self.m[i] + (1.0 - ADAM_BETA1) * g
            self.v[i] = ADAM_BETA2 * self.v[i] + (1.0 - ADAM_BETA2) * g * g
            m_hat = self.m[i] / correction1
            v_hat = self.v[i] / correction2
            p -= self.lr * (m_hat / (np.sqrt(v_hat) + ADAM_EPS) + self.wd * p)


def train_probe(samples: Sequence[ProbeSample], cfg: TrainConfig) -> tuple[ProbeModel, TrainReport]:
    """Train deterministically from a fixed seed, early-stopping on val loss.

    The returned model is the best-validation-epoch checkpoint. Features are
    z-scored with statistics computed on the training split only.
    """
    labels = np.array([s.label for s in samples])
    if (labels == 1).sum() == 0 or (labels == 0).sum() == 0:
        raise NoPositives("need both classes present to train")

    rng = np.random.default_rng(cfg.seed)
    order = rng.permutation(len(samples))
    n_train = int(len(samples) * cfg.split[0])
    n_val = int(len(samples) * (cfg.split[0] + cfg.split[1]))
    idx_train, idx_val, idx_test = order[:n_train], order[n_train:n_val], order[n_val:]

    raw = np.vstack([build_features(s) for s in samples])
    mean = raw[idx_train].mean(axis=0)
    std = raw[idx_train].std(axis=0)
    std = np.where(std > 0.0, std, 1.0)
    norm = NormStats(mean=mean, std=std)
    feats = (raw - mean) / std
    y = labels.astype(float)

    x_train, y_train = feats[idx_train], y[idx_train]
    x_val, y_val = feats[idx_val], y[idx_val]
    weight = pos_weight(labels[idx_train])

    input_dim = feats.shape[1]
    hidden = cfg.hidden_dim
    w1 = rng.uniform(-1.0, 1.0, size=(hidden, input_dim)) * np.sqrt(6.0 / input_dim)
    b1 = np.zeros(hidden)
    w2 = rng.uniform(-1.0, 1.0, size=hidden) * np.sqrt(6.0 / hidden)
    b2 = np.zeros(1)

    params = [w1, b1, w2, b2]
    optimizer = _AdamW([p.shape for p in params], cfg.lr, cfg.weight_decay)

    def full_loss(x, y_true):
        loss, _ = loss_and_gradients(w1, b1, w2, b2[0], x, y_true, weight)
        return loss

    train_losses: list[float] = []
    val_losses: list[float] = []
    best_val = np.inf
    best_epoch = 0
    best_params = [p.copy() for p in params]
    since_best = 0
    epoch = 0

    for epoch in range(1, cfg.max_epochs + 1):
        batch_order = rng.permutation(len(idx_train))
        for start in range(0, len(batch_order), cfg.batch_size):
            batch = batch_order[start : start + cfg.batch_size]
            loss, grads = loss_and_gradients(
                w1, b1, w2, b2[0], x_train[batch], y_train[batch], weight
            )
            if not np.isfinite(loss):
                raise NonFiniteLoss(f"training diverged at epoch {epoch}")
            grads = (*grads[:3], np.array([grads[3]]))
            optimizer.step(params, grads)
        train_losses.append(full_loss(x_train, y_train))
        val_losses.append(full_loss(x_val, y_val))
        if not np.isfinite(val_losses[-1]):
            raise NonFiniteLoss(f"validation loss non-finite at epoch {epoch}")
        if val_losses[-1] < best_val:
            best_val = val_losses[-1]
            best_epoch = epoch
            best_params = [p.copy() for p in params]
            since_best = 0
        else:
            since_best += 1
            if since_best >= cfg.patience:
                break

    model = ProbeModel(
        input_dim=input_dim,
        hidden_dim=hidden,
        w1=best_params[0],
        b1=best_params[1],
        w2=best_params[2],
        b2=float(best_params[3][0]),
        norm_stats=norm,
        seed=cfg.seed,
        train_config_hash=cfg.digest(),
    )
    report = TrainReport(
        train_losses=tuple(train_losses),
        val_losses=tuple(val_losses),
        stop_epoch=epoch,
        best_epoch=best_epoch,
        best_val_loss=float(best_val),
        pos_weight=weight,
        optimizer={
            "name": "adamw",
            "lr": cfg.lr,
            "weight_decay": cfg.weight_decay,
            "beta1": ADAM_BETA1,
            "beta2": ADAM_BETA2,
            "eps": ADAM_EPS,
        },
        split_indices=(
            tuple(int(i) for i in idx_train),
            tuple(int(i) for i in idx_val),
            tuple(int(i) for i in idx_test),
        ),
        seed=cfg.seed,
    )
    return model, report


def evaluate_probe(
    probe: ProbeModel, samples: Sequence[ProbeSample], threshold: float = 0.5
) -> dict[str, float]:
    """Accuracy/precision/recall/F1/AUROC with >= threshold predicting positive."""
    if not samples:
        raise SingleClassTestSet("test set is empty")
    labels = np.array([s.label for s in samples])
    if len(set(labels.tolist())) < 2:
        raise SingleClassTestSet("test set needs both classes")
    scores = np.array([predict(probe, build_features(s, probe.norm_stats)) for s in samples])
    predicted = scores >= threshold
    tp = int(np.sum(predicted & (labels == 1)))
    fp = int(np.sum(predicted & (labels == 0)))
    fn = int(np.sum(~predicted & (labels == 1)))
    tn = int(np.sum(~predicted & (labels == 0)))
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return {
        "accuracy": (tp + tn) / len(samples),
        "precision": precision,
        "recall": recall,
        "f1": f1,
        "auroc": stats.auroc(scores[labels == 1], scores[labels == 0]),
    }


@dataclass(frozen=True)
class SentencePrefix:
    """One cumulative sentence prefix of the think content."""

    embedding: np.ndarray
    end_token: int  # exclusive trace-token offset of the prefix end


def detect_echo_span(
    probe: ProbeModel,
    question_embedding: np.ndarray,
    prefixes: Sequence[SentencePrefix],
) -> EchoSpan | None:
    """Hysteresis span detection over cumulative sentence prefixes.

    Enters the echo state only if the first prefix scores at or above the
    enter threshold; extends the span through prefixes scoring at or above
    the exit threshold; returns the token range of the last qualifying
    sentence boundary.
    """
    if not prefixes:
        raise EmptyPrefixList("need at least one sentence prefix")
    question_embedding = np.asarray(question_embedding, dtype=float)

    def score(prefix: SentencePrefix) -> float:
        sample = ProbeSample(question_embedding, prefix.embedding, label=0)
        return predict(probe, build_features(sample, probe.norm_stats))

    if score(prefixes[0]) < probe.enter_threshold:
        return None
    end = prefixes[0].end_token
    for prefix in prefixes[1:]:
        if score(prefix) < probe.exit_threshold:
            break
        end = prefix.end_token
    return EchoSpan(end_token=end, detection_source=DetectionSource.PROBE)


# --------------------------------------------------------------------------
# text helpers for sentence-granular detection
# --------------------------------------------------------------------------

_SENTENCE_BREAK = re.compile(r"[^.?!\n]*[.?!\n]+|[^.?!\n]+$")


def split_sentences(text: str) -> list[str]:
    """Split think content on ., ?, ! and newline, keeping the delimiters.

    Fragments shorter than three word tokens merge forward into the next
    sentence (a trailing short fragment merges backward).
    """
    pieces = [m.group(0) for m in _SENTENCE_BREAK.finditer(text) if m.group(0).strip()]
    sentences: list[str] = []
    buffer = ""
    for piece in pieces:
        buffer += piece
        if len(buffer.split()) >= MIN_SENTENCE_WORDS:
            sentences.append(buffer)
            buffer = ""
    if buffer:
        if sentences:
            sentences[-1] += buffer
        else:
            sentences.append(buffer)
    return sentences


def first_n_words(text: str, n: int = PREFIX_WORD_COUNT) -> str:
    """The leading whitespace-separated words used as the probe's prefix view."""
    return " ".join(text.split()[:n])


# --------------------------------------------------------------------------
# checkpoint io
# --------------------------------------------------------------------------


def save_probe(probe: ProbeModel, path: str | Path) -> None:
    payload = {
        "schema_version": SCHEMA_VERSION,
        "input_dim": probe.input_dim,
        "hidden_dim": probe.hidden_dim,
        "w1": probe.w1.tolist(),
        "b1": probe.b1.tolist(),
        "w2": probe.w2.tolist(),
        "b2": probe.b2,
        "norm_mean": probe.norm_stats.mean.tolist(),
        "norm_std": probe.norm_stats.std.tolist(),
        "thresholds": {"enter": probe.enter_threshold, "exit": probe.exit_threshold},
        "seed": probe.seed,
        "train_config_hash": probe.train_config_hash,
    }
    Path(path).write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n", encoding="utf-8")


def load_probe(path: str | Path) -> ProbeModel:
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    if payload.get("schema_version") != SCHEMA_VERSION:
        raise ValueError(f"unsupported probe schema_version {payload.get('schema_version')}")
    return ProbeModel(
        input_dim=payload["input_dim"],
        hidden_dim=payload["hidden_dim"],
        w1=np.asarray(payload["w1"], dtype=float),
        b1=np.asarray(payload["b1"], dtype=float),
        w2=np.asarray(payload["w2"], dtype=float),
        b2=float(payload["b2"]),
        norm_stats=NormStats(
            mean=np.asarray(payload["norm_mean"], dtype=float),
            std=np.asarray(payload["norm_std"], dtype=float),
        ),
        enter_threshold=payload["thresholds"]["enter"],
        exit_threshold=payload["thresholds"]["exit"],
        seed=payload["seed"],
        train_config_hash=payload.get("train_config_hash", ""),
    )
