"""Training over the four data regimes, chunked conversation prediction and evaluation."""
from __future__ import annotations

import contextlib
import dataclasses
import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autograd as ag
from .augmentation import (
    Batch, DcaConfig, collate, dca_conversations, dca_isolated, isolated_sequence,
    slice_conversation, utterances,
)
from .corpus import IGNORE, NUM_CLASSES, CapacityError, Conversation, align_labels_to_frames, speaker_index_assign
from .metrics import MetricsReport, f1_scores
from .model import EmotionTagger, ModelConfig, predict_labels

logger = logging.getLogger(__name__)

REGIMES = ("isolated", "conversations", "dca_isolated", "dca_conversations")
LR_DECAYS = ("constant", "linear")


class DivergenceError(RuntimeError):
    pass


@dataclass
class TrainerConfig:
    regime: str = "dca_conversations"
    epochs: int = 30
    batch_size: int = 6
    train_len: int = 2048
    learning_rate: float = 1e-3
    lr_decay: str = "constant"
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.0
    grad_clip: float = 1.0
    seed: int = 0
    eval_chunk_len: int | None = None
    eval_chunk_overlap: int = 0
    eval_every: int = 1
    diversity_greedy: bool = False
    reset_positions: bool = False
    strict_deterministic: bool = False

    def __post_init__(self):
        self.regime = self.regime.replace("-", "_")

    def validate(self) -> None:
        if self.regime not in REGIMES:
            raise ValueError(f"unknown regime {self.regime!r}; valid: {', '.join(REGIMES)}")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.lr_decay not in LR_DECAYS:
            raise ValueError(f"unknown lr_decay {self.lr_decay!r}; valid: {', '.join(LR_DECAYS)}")
        if self.train_len < 2 or self.train_len % 2:
            raise ValueError("train_len must be an even number >= 2")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        chunk = self.chunk_len
        if not 0 <= self.eval_chunk_overlap < chunk:
            raise ValueError("eval_chunk_overlap must be in [0, eval_chunk_len)")

    @property
    def chunk_len(self) -> int:
        return self.eval_chunk_len or self.train_len

    def dca(self) -> DcaConfig:
        mode = "isolated" if self.regime in ("isolated", "dca_isolated") else "conversations"
        return DcaConfig(batch_conversations=self.batch_size, slice_len=self.train_len // 2,
                         train_len=self.train_len, mode=mode, seed=self.seed,
                         diversity_greedy=self.diversity_greedy, reset_positions=self.reset_positions)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainerConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown TrainerConfig field(s): {sorted(extra)}")
        cfg = cls(**d)
        cfg.validate()
        return cfg


class Adam:
    """First-order adaptive-moment optimizer with optional decoupled weight decay."""

    def __init__(self, params: Sequence[ag.Tensor], lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8,
                 weight_decay=0.0, grad_clip: float | None = None):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.weight_decay = weight_decay
        self.grad_clip = grad_clip
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self) -> None:
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        if self.grad_clip:
            norm = math.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads))
            if norm > self.grad_clip:
                grads = [g * (self.grad_clip / norm) for g in grads]
        self.t += 1
        c1 = 1 - self.beta1 ** self.t
        c2 = 1 - self.beta2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            update = self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            if self.weight_decay:
                update = update + self.lr * self.weight_decay * p.data
            p.data = (p.data - update).astype(p.data.dtype)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


@contextlib.contextmanager
def deterministic_threads(enabled: bool):
    """Restrict BLAS to a single thread so reductions run in a fixed order."""
    if not enabled:
        yield
        return
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=1):
        yield


# ---------------------------------------------------------------------------
# batches


def _groups(items: Sequence, size: int, rng: np.random.Generator) -> list[list]:
    """Shuffle and cut into groups of ``size``, wrapping around to fill the last one."""
    order = [items[i] for i in rng.permutation(len(items))]
    n = math.ceil(len(order) / size)
    return [[order[(g * size + k) % len(order)] for k in range(size)] for g in range(n)]


def epoch_batches(convs: Sequence[Conversation], cfg: TrainerConfig, epoch: int,
                  pool=None) -> list[Batch]:
    """All batches for one epoch, deterministic in (convs, cfg.seed, epoch)."""
    rng = np.random.default_rng([cfg.seed, epoch])
    dca = cfg.dca()
    regime = cfg.regime
    if regime in ("conversations", "dca_conversations") and len(convs) < cfg.batch_size:
        raise ValueError(f"need at least {cfg.batch_size} training conversations, got {len(convs)}")
    batches = []
    if regime == "conversations":
        for group in _groups(convs, cfg.batch_size, rng):
            batches.append(collate([slice_conversation(c, cfg.train_len, rng) for c in group], cfg.train_len))
    elif regime == "dca_conversations":
        for group in _groups(convs, cfg.batch_size, rng):
            batches.append(collate(dca_conversations(group, dca, rng), cfg.train_len))
    else:
        pool = pool if pool is not None else utterances(convs)
        if regime == "isolated":
            for group in _groups(pool, cfg.batch_size, rng):
                batches.append(collate([isolated_sequence(u, cfg.train_len) for u in group]))
        else:
            # one epoch draws as many frames as the utterance pool holds
            pool_frames = sum(len(u.labels) for u in pool)
            n_batches = max(1, math.ceil(pool_frames / (cfg.train_len * cfg.batch_size)))
            for _ in range(n_batches):
                batches.append(collate([dca_isolated(pool, dca, rng) for _ in range(cfg.batch_size)], cfg.train_len))
    return batches


# ---------------------------------------------------------------------------
# prediction and evaluation


def chunk_starts(num_frames: int, chunk_len: int, overlap: int) -> list[int]:
    step = chunk_len - overlap
    starts = [0]
    while starts[-1] + chunk_len < num_frames:
        starts.append(starts[-1] + step)
    return starts


def conversation_logits(model: EmotionTagger, conv: Conversation, chunk_len: int | None = None,
                        overlap: int = 0) -> np.ndarray:
    """Per-frame logits, averaging over overlapping chunks.

    ``chunk_len=None`` feeds the conversation as a single sequence.
    """
    cfg = model.config
    aligned = align_labels_to_frames(conv)
    keys = [None if i < 0 else aligned.speaker_names[i] for i in aligned.speakers]
    T = conv.num_frames
    if cfg.use_interlocutor:
        speaker_index_assign(keys, cfg.max_speakers)
    if chunk_len is None:
        if T > cfg.max_positions:
            raise CapacityError(f"conversation {conv.id} has {T} frames, more than max_positions "
                                f"{cfg.max_positions}, and chunking is disabled")
        chunk_len = max(T, 1)
    if chunk_len > cfg.max_positions:
        raise CapacityError(f"chunk length {chunk_len} exceeds max_positions {cfg.max_positions}")
    total = np.zeros((T, cfg.num_classes), dtype=np.float64)
    count = np.zeros((T, 1))
    feats = conv.features.values
    with ag.no_grad():
        for s in chunk_starts(T, chunk_len, overlap):
            e = min(s + chunk_len, T)
            spk = speaker_index_assign(keys[s:e], cfg.max_speakers if cfg.use_interlocutor else None)
            logits = model.forward(feats[s:e], speaker_indices=spk)
            total[s:e] += logits.data
            count[s:e] += 1
    return total / count


def predict_conversation(model: EmotionTagger, conv: Conversation, chunk_len: int | None = None,
                         overlap: int = 0) -> np.ndarray:
    return predict_labels(conversation_logits(model, conv, chunk_len, overlap))


def evaluate(model: EmotionTagger, convs: Sequence[Conversation], chunk_len: int | None = None,
             overlap: int = 0) -> MetricsReport:
    refs, hyps, ignored = [], [], 0
    for conv in convs:
        labels = align_labels_to_frames(conv).labels
        pred = predict_conversation(model, conv, chunk_len, overlap)
        keep = labels != IGNORE
        ignored += int((~keep).sum())
        refs.append(labels[keep])
        hyps.append(pred[keep])
    return f1_scores(np.concatenate(refs), np.concatenate(hyps), ignored_frames=ignored)


def majority_baseline(train: Sequence[Conversation], test: Sequence[Conversation]) -> MetricsReport:
    """Scores of always predicting the most frequent training class."""
    counts = np.zeros(NUM_CLASSES)
    for c in train:
        lab = align_labels_to_frames(c).labels
        counts += np.bincount(lab[lab >= 0], minlength=NUM_CLASSES)
    majority = int(np.argmax(counts))
    refs = np.concatenate([align_labels_to_frames(c).labels for c in test])
    refs = refs[refs >= 0]
    return f1_scores(refs, np.full_like(refs, majority))


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    model: EmotionTagger
    history: list[dict] = field(default_factory=list)
    best_epoch: int | None = None


def train(train_convs: Sequence[Conversation], dev_convs: Sequence[Conversation],
          model_cfg: ModelConfig, trainer_cfg: TrainerConfig) -> TrainResult:
    """Minimize masked frame cross-entropy; keep the parameters with the best dev weighted f1."""
    trainer_cfg.validate()
    if trainer_cfg.train_len > model_cfg.max_positions:
        raise ValueError(f"train_len {trainer_cfg.train_len} exceeds max_positions {model_cfg.max_positions}")
    model = EmotionTagger(model_cfg)
    result = TrainResult(model)
    if trainer_cfg.epochs == 0:
        return result

    opt = Adam(model.parameters(), trainer_cfg.learning_rate, trainer_cfg.beta1, trainer_cfg.beta2,
               trainer_cfg.adam_eps, trainer_cfg.weight_decay, trainer_cfg.grad_clip)
    pool = utterances(train_convs) if "isolated" in trainer_cfg.regime else None
    best_score, best_state = -1.0, model.state_dict()
    with deterministic_threads(trainer_cfg.strict_deterministic):
        for epoch in range(trainer_cfg.epochs):
            drop_rng = np.random.default_rng([trainer_cfg.seed, epoch, 1])
            if trainer_cfg.lr_decay == "linear":
                # stepwise per epoch, reaching lr/epochs in the last one
                opt.lr = trainer_cfg.learning_rate * (trainer_cfg.epochs - epoch) / trainer_cfg.epochs
            losses = []
            for step, batch in enumerate(epoch_batches(train_convs, trainer_cfg, epoch, pool)):
                if not (batch.labels != IGNORE).any():
                    continue
                ag.get_tape().clear()
                logits = model.forward(batch.features, batch.speaker_indices, batch.real, batch.positions,
                                       training=True, rng=drop_rng)
                loss = ag.cross_entropy_masked(logits, batch.labels)
                value = float(loss.data)
                if not np.isfinite(value):
                    raise DivergenceError(f"loss became {value} at epoch {epoch}, step {step}")
                opt.zero_grad()
                ag.backward(loss)
                opt.step()
                losses.append(value)
            row = {"epoch": epoch, "loss": float(np.mean(losses)) if losses else float("nan")}
            last = epoch == trainer_cfg.epochs - 1
            if dev_convs and (epoch % trainer_cfg.eval_every == 0 or last):
                rep = evaluate(model, dev_convs, trainer_cfg.chunk_len, trainer_cfg.eval_chunk_overlap)
                row.update(dev_micro_f1=rep.micro_f1, dev_weighted_f1=rep.weighted_f1)
                if rep.weighted_f1 > best_score:
                    best_score, best_state, result.best_epoch = rep.weighted_f1, model.state_dict(), epoch
            logger.info("epoch %d loss %.4f dev wf1 %s", epoch, row["loss"], row.get("dev_weighted_f1"))
            result.history.append(row)
    if dev_convs:
        model.load_state_dict(best_state)
    return result
