"""Training-sequence construction: plain slices, isolated utterances and
diverse-category concatenation (DCA) of conversations or utterances."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .corpus import IGNORE, NUM_CLASSES, Conversation, align_labels_to_frames, speaker_index_assign


@dataclass
class TrainSequence:
    features: np.ndarray
    labels: np.ndarray
    speaker_keys: list
    speaker_indices: np.ndarray
    positions: np.ndarray
    real: np.ndarray
    provenance: list[tuple[str, int, int]] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.labels)


@dataclass
class DcaConfig:
    batch_conversations: int = 6
    slice_len: int = 1024
    train_len: int = 2048
    mode: str = "conversations"
    seed: int = 0
    diversity_greedy: bool = False
    reset_positions: bool = False
    reindex_speakers_per_slice: bool = False

    def __post_init__(self):
        if self.mode not in ("conversations", "isolated"):
            raise ValueError(f"mode must be 'conversations' or 'isolated', got {self.mode!r}")
        if self.mode == "conversations" and 2 * self.slice_len != self.train_len:
            raise ValueError(f"slice_len * 2 must equal train_len, got {self.slice_len} and {self.train_len}")
        if self.batch_conversations < 2:
            raise ValueError("batch_conversations must be >= 2")


@dataclass
class Utterance:
    conv_id: str
    start: int
    features: np.ndarray
    labels: np.ndarray
    speaker_key: str


class _FrameCache:
    """Aligned labels and global speaker keys per conversation, computed once."""

    def __init__(self):
        self._cache: dict[int, tuple[Conversation, np.ndarray, list]] = {}

    def get(self, conv: Conversation) -> tuple[np.ndarray, list]:
        hit = self._cache.get(id(conv))
        if hit is None or hit[0] is not conv:
            aligned = align_labels_to_frames(conv)
            keys = [None if i < 0 else aligned.speaker_names[i] for i in aligned.speakers]
            hit = self._cache[id(conv)] = (conv, aligned.labels, keys)
        return hit[1], hit[2]

    def clear(self) -> None:
        self._cache.clear()


_frames = _FrameCache()


def _cut(conv: Conversation, start: int, length: int) -> TrainSequence:
    labels, keys = _frames.get(conv)
    stop = min(start + length, conv.num_frames)
    n_real = stop - start
    feats = np.zeros((length, conv.features.num_features), dtype=np.float32)
    feats[:n_real] = conv.features.values[start:stop]
    lab = np.full(length, IGNORE, dtype=np.int64)
    lab[:n_real] = labels[start:stop]
    spk = list(keys[start:stop]) + [None] * (length - n_real)
    real = np.zeros(length, dtype=bool)
    real[:n_real] = True
    return TrainSequence(feats, lab, spk, speaker_index_assign(spk), np.arange(length),
                         real, [(conv.id, start, stop)])


def slice_conversation(conv: Conversation, length: int, rng: np.random.Generator) -> TrainSequence:
    """A contiguous window at a uniform random offset, right-padded when the conversation is short."""
    if length <= 0:
        raise ValueError(f"slice length must be positive, got {length}")
    if conv.num_frames < 1:
        raise ValueError(f"conversation {conv.id} has no frames")
    start = int(rng.integers(0, max(conv.num_frames - length, 0) + 1))
    return _cut(conv, start, length)


def concat(parts: Sequence[TrainSequence], reset_positions: bool = False,
           reindex_per_part: bool = False) -> TrainSequence:
    keys = [k for p in parts for k in p.speaker_keys]
    if reindex_per_part:
        indices = np.concatenate([speaker_index_assign(p.speaker_keys) for p in parts])
    else:
        indices = speaker_index_assign(keys)
    if reset_positions:
        positions = np.concatenate([np.arange(len(p)) for p in parts])
    else:
        positions = np.arange(sum(len(p) for p in parts))
    return TrainSequence(
        np.concatenate([p.features for p in parts]),
        np.concatenate([p.labels for p in parts]),
        keys,
        indices,
        positions,
        np.concatenate([p.real for p in parts]),
        [span for p in parts for span in p.provenance],
    )


def label_diversity_entropy(labels) -> float:
    """Shannon entropy in bits of the label distribution, Ignore frames excluded."""
    lab = np.asarray(labels)
    lab = lab[lab >= 0]
    if lab.size == 0:
        return 0.0
    p = np.bincount(lab, minlength=NUM_CLASSES) / lab.size
    p = p[p > 0]
    return float(-(p * np.log2(p)).sum()) + 0.0


def _pick_partner(i: int, slices: Sequence[TrainSequence], rng: np.random.Generator, greedy: bool) -> int:
    others = [j for j in range(len(slices)) if j != i]
    if not greedy:
        return others[int(rng.integers(len(others)))]
    scores = [label_diversity_entropy(np.concatenate([slices[i].labels, slices[j].labels])) for j in others]
    return others[int(np.argmax(scores))]


def dca_conversations(convs: Sequence[Conversation], cfg: DcaConfig, rng: np.random.Generator) -> list[TrainSequence]:
    """One sequence per conversation: its slice followed by a slice of a random other conversation."""
    if len(convs) != cfg.batch_conversations:
        raise ValueError(f"DCA batch needs exactly {cfg.batch_conversations} conversations, got {len(convs)}")
    if len({c.id for c in convs}) < 2:
        raise ValueError("DCA batch needs at least 2 distinct conversations")
    slices = [slice_conversation(c, cfg.slice_len, rng) for c in convs]
    out = []
    for i in range(len(convs)):
        j = _pick_partner(i, slices, rng, cfg.diversity_greedy)
        out.append(concat([slices[i], slices[j]], cfg.reset_positions, cfg.reindex_speakers_per_slice))
    return out


def utterances(convs: Sequence[Conversation]) -> list[Utterance]:
    """Each labeled segment as an isolated utterance; Ignore segments are skipped."""
    pool = []
    for conv in convs:
        labels, _ = _frames.get(conv)
        fm = conv.features
        centers = (np.arange(fm.num_frames) * fm.frame_shift_ms + fm.frame_length_ms / 2.0) / 1000.0
        for seg in conv.segments:
            lo = int(np.searchsorted(centers, seg.start_s, side="left"))
            hi = int(np.searchsorted(centers, seg.end_s, side="left"))
            if seg.label < 0 or hi <= lo:
                continue
            pool.append(Utterance(conv.id, lo, fm.values[lo:hi], labels[lo:hi], seg.speaker))
    return pool


def _utterance_seq(u: Utterance, length: int | None = None) -> TrainSequence:
    n = len(u.labels) if length is None else min(length, len(u.labels))
    keys = [u.speaker_key] * n
    return TrainSequence(u.features[:n].astype(np.float32), u.labels[:n].copy(), keys,
                         speaker_index_assign(keys), np.arange(n), np.ones(n, dtype=bool),
                         [(u.conv_id, u.start, u.start + n)])


def isolated_sequence(u: Utterance, train_len: int) -> TrainSequence:
    """A single utterance truncated to ``train_len`` (padding happens at batch collation)."""
    return _utterance_seq(u, train_len)


def dca_isolated(pool: Sequence[Utterance], cfg: DcaConfig, rng: np.random.Generator) -> TrainSequence:
    """Utterances drawn uniformly with replacement, concatenated to exactly ``train_len`` frames."""
    if len(pool) == 0:
        raise ValueError("utterance pool is empty")
    parts, total = [], 0
    while total < cfg.train_len:
        u = pool[int(rng.integers(len(pool)))]
        part = _utterance_seq(u, cfg.train_len - total)
        parts.append(part)
        total += len(part)
    return concat(parts, cfg.reset_positions, cfg.reindex_speakers_per_slice)


@dataclass
class Batch:
    features: np.ndarray
    labels: np.ndarray
    speaker_indices: np.ndarray
    positions: np.ndarray
    real: np.ndarray


def collate(seqs: Sequence[TrainSequence], length: int | None = None) -> Batch:
    """Stack sequences, right-padding to ``length`` (default: the longest) with masked frames."""
    L = length or max(len(s) for s in seqs)
    B, F = len(seqs), seqs[0].features.shape[1]
    feats = np.zeros((B, L, F), np.float32)
    labels = np.full((B, L), IGNORE, np.int64)
    spk = np.full((B, L), -1, np.int64)
    pos = np.tile(np.arange(L), (B, 1))
    real = np.zeros((B, L), bool)
    for b, s in enumerate(seqs):
        n = min(len(s), L)
        feats[b, :n] = s.features[:n]
        labels[b, :n] = s.labels[:n]
        spk[b, :n] = s.speaker_indices[:n]
        pos[b, :n] = s.positions[:n]
        real[b, :n] = s.real[:n]
    return Batch(feats, labels, spk, pos, real)
