"""Diarized, emotion-labeled conversations.

Segment ingestion from JSONL, frame-level label alignment, a synthetic corpus
generator with controllable emotional inertia, leave-one-session-out folds and
interlocutor index assignment.
"""
from __future__ import annotations

import dataclasses
import enum
import hashlib
import itertools
import json
import logging
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Hashable, Iterable, Sequence

import numpy as np

from .features import FeatureMatrix, read_features, write_features

logger = logging.getLogger(__name__)

NUM_CLASSES = 5
IGNORE = -1


class Emotion(enum.IntEnum):
    ANGRY = 0
    FRUSTRATION = 1
    HAPPY = 2
    NEUTRAL = 3
    SAD = 4
    IGNORE = -1

    @property
    def short(self) -> str:
        return _SHORT[self]


CLASS_NAMES = ("Angry", "Frustration", "Happy", "Neutral", "Sad")
_SHORT = {
    Emotion.ANGRY: "ang", Emotion.FRUSTRATION: "fru", Emotion.HAPPY: "hap",
    Emotion.NEUTRAL: "neu", Emotion.SAD: "sad", Emotion.IGNORE: "ign",
}
# Excitement is folded into Happy, as is customary for this label set.
_LABEL_ALIASES = {
    "angry": Emotion.ANGRY, "ang": Emotion.ANGRY, "anger": Emotion.ANGRY,
    "frustration": Emotion.FRUSTRATION, "fru": Emotion.FRUSTRATION, "frustrated": Emotion.FRUSTRATION,
    "happy": Emotion.HAPPY, "hap": Emotion.HAPPY, "happiness": Emotion.HAPPY,
    "excitement": Emotion.HAPPY, "excited": Emotion.HAPPY, "exc": Emotion.HAPPY,
    "neutral": Emotion.NEUTRAL, "neu": Emotion.NEUTRAL,
    "sad": Emotion.SAD, "sadness": Emotion.SAD,
    "ignore": Emotion.IGNORE,
}


def parse_label(text: str) -> Emotion | None:
    """Map a label string to an Emotion, or None when it is not one of the five classes."""
    return _LABEL_ALIASES.get(str(text).strip().lower())


class SegmentValidationError(ValueError):
    pass


class CapacityError(ValueError):
    """More distinct speakers/positions than the model can index."""


@dataclass(frozen=True)
class Segment:
    start_s: float
    end_s: float
    speaker: str
    label: Emotion

    def __post_init__(self):
        if not (0 <= self.start_s < self.end_s):
            raise SegmentValidationError(
                f"segment must satisfy 0 <= start < end, got [{self.start_s}, {self.end_s}]"
            )

    @property
    def duration(self) -> float:
        return self.end_s - self.start_s


@dataclass
class Conversation:
    id: str
    session: str
    segments: tuple[Segment, ...]
    features: FeatureMatrix | None = None

    def __post_init__(self):
        self.segments = tuple(sorted(self.segments, key=lambda s: s.start_s))
        for a, b in zip(self.segments, self.segments[1:]):
            if b.start_s < a.end_s:
                raise SegmentValidationError(
                    f"conversation {self.id}: overlapping segments "
                    f"[{a.start_s}, {a.end_s}] and [{b.start_s}, {b.end_s}]"
                )

    @property
    def speakers(self) -> list[str]:
        """Distinct speakers in order of first appearance."""
        return list(dict.fromkeys(s.speaker for s in self.segments))

    @property
    def num_frames(self) -> int:
        return 0 if self.features is None else self.features.num_frames


@dataclass
class FrameLabelSequence:
    labels: np.ndarray
    speakers: np.ndarray
    speaker_names: tuple[str, ...]

    def __len__(self) -> int:
        return len(self.labels)


@dataclass
class Corpus:
    conversations: list[Conversation]
    synth_config: "SynthConfig | None" = None

    def __iter__(self):
        return iter(self.conversations)

    def __len__(self) -> int:
        return len(self.conversations)

    @property
    def sessions(self) -> list[str]:
        return sorted({c.session for c in self.conversations})

    def by_session(self, sessions: Iterable[str]) -> list[Conversation]:
        wanted = set(sessions)
        return [c for c in self.conversations if c.session in wanted]

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for c in self.conversations:
            h.update(c.id.encode())
            h.update(c.session.encode())
            for s in c.segments:
                h.update(f"{s.start_s!r}|{s.end_s!r}|{s.speaker}|{int(s.label)}".encode())
            if c.features is not None:
                h.update(np.ascontiguousarray(c.features.values, dtype="<f4").tobytes())
        return h.hexdigest()


# ---------------------------------------------------------------------------
# ingestion


def parse_segments(path) -> list[Conversation]:
    """Read a segment JSONL file into conversations without features.

    Labels outside the five classes become ``Emotion.IGNORE``; the number of
    such segments is logged as a single warning.
    """
    grouped: dict[str, list[Segment]] = defaultdict(list)
    sessions: dict[str, str] = {}
    unknown: Counter = Counter()
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        rec = json.loads(line)
        try:
            conv, session = str(rec["conv"]), str(rec["session"])
            start, end = float(rec["start_s"]), float(rec["end_s"])
            speaker, raw_label = str(rec["speaker"]), rec["label"]
        except KeyError as exc:
            raise SegmentValidationError(f"line {lineno}: missing field {exc}") from None
        label = parse_label(raw_label)
        if label is None:
            unknown[str(raw_label)] += 1
            label = Emotion.IGNORE
        if conv in sessions and sessions[conv] != session:
            raise SegmentValidationError(f"line {lineno}: conversation {conv} listed under two sessions")
        sessions[conv] = session
        try:
            grouped[conv].append(Segment(start, end, speaker, label))
        except SegmentValidationError as exc:
            raise SegmentValidationError(f"line {lineno}: {exc}") from None
    if unknown:
        total = sum(unknown.values())
        logger.warning("%d segment(s) with unknown labels mapped to Ignore: %s", total, dict(unknown))
    return [Conversation(cid, sessions[cid], tuple(segs)) for cid, segs in grouped.items()]


def write_segments(path, conversations: Iterable[Conversation]) -> None:
    with open(path, "w") as fh:
        for c in conversations:
            for s in c.segments:
                label = "Ignore" if s.label == Emotion.IGNORE else CLASS_NAMES[s.label]
                fh.write(json.dumps({
                    "conv": c.id, "session": c.session, "start_s": s.start_s,
                    "end_s": s.end_s, "speaker": s.speaker, "label": label,
                }, sort_keys=True) + "\n")


def align_labels_to_frames(conv: Conversation, frame_length_ms: float | None = None) -> FrameLabelSequence:
    """Give each frame the label and speaker of the segment containing its center.

    Frame t is centered at t * shift + frame_length / 2. Frames whose center
    falls in no segment get Ignore and speaker -1.
    """
    if conv.features is None:
        raise ValueError(f"conversation {conv.id} has no features")
    fm = conv.features
    flen = fm.frame_length_ms if frame_length_ms is None else frame_length_ms
    centers = (np.arange(fm.num_frames) * fm.frame_shift_ms + flen / 2.0) / 1000.0
    labels = np.full(fm.num_frames, IGNORE, dtype=np.int64)
    speakers = np.full(fm.num_frames, -1, dtype=np.int64)
    names = conv.speakers
    spk_index = {n: i for i, n in enumerate(names)}
    for seg in conv.segments:
        lo = np.searchsorted(centers, seg.start_s, side="left")
        hi = np.searchsorted(centers, seg.end_s, side="left")
        labels[lo:hi] = int(seg.label)
        speakers[lo:hi] = spk_index[seg.speaker]
    return FrameLabelSequence(labels, speakers, tuple(names))


def speaker_index_assign(speakers: Sequence[Hashable], max_speakers: int | None = None) -> np.ndarray:
    """Index speakers 0, 1, ... by order of first appearance; -1/None stay -1."""
    order: dict = {}
    out = np.full(len(speakers), -1, dtype=np.int64)
    pos = 0
    # frame-level keys come in long runs, so work run by run
    for spk, run in itertools.groupby(speakers):
        n = len(list(run))
        if not (spk is None or (isinstance(spk, (int, np.integer)) and spk == -1)):
            if spk not in order:
                order[spk] = len(order)
            out[pos:pos + n] = order[spk]
        pos += n
    if max_speakers is not None and len(order) > max_speakers:
        raise CapacityError(
            f"{len(order)} distinct speakers exceed the interlocutor dictionary size of {max_speakers}"
        )
    return out


# ---------------------------------------------------------------------------
# cross-validation


@dataclass(frozen=True)
class Fold:
    train: tuple[str, ...]
    dev: str
    test: str


def loso_splits(sessions: Iterable[str] | Corpus) -> list[Fold]:
    """One fold per session as test; dev is the cyclic successor; the rest train."""
    if isinstance(sessions, Corpus):
        sessions = sessions.sessions
    names = sorted(set(sessions))
    if len(names) < 3:
        raise ValueError(f"leave-one-session-out needs at least 3 sessions, got {len(names)}")
    folds = []
    for k, test in enumerate(names):
        dev = names[(k + 1) % len(names)]
        folds.append(Fold(tuple(s for s in names if s not in (test, dev)), dev, test))
    return folds


# ---------------------------------------------------------------------------
# synthesis


@dataclass
class SynthConfig:
    num_sessions: int = 5
    conversations_per_session: int = 8
    speakers_per_conversation: int = 2
    turns_per_conversation: int = 16
    mean_segment_s: float = 0.4
    inertia: float = 0.95
    seed: int = 0
    feature_mode: str = "synthetic"
    num_features: int = 13
    frame_shift_ms: int = 10
    frame_length_ms: float = 25.0
    class_separation: float = 1.0
    noise_std: float = 2.5
    speaker_offset: float = 0.5
    speaker_conditioned: bool = False

    def validate(self) -> None:
        problems = []
        if not 0.0 <= self.inertia <= 1.0:
            problems.append(f"inertia must be in [0, 1], got {self.inertia}")
        for name in ("num_sessions", "conversations_per_session", "speakers_per_conversation",
                     "turns_per_conversation", "num_features", "frame_shift_ms"):
            if getattr(self, name) < 1:
                problems.append(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.mean_segment_s <= 0:
            problems.append(f"mean_segment_s must be positive, got {self.mean_segment_s}")
        if self.noise_std < 0 or self.speaker_offset < 0 or self.class_separation < 0:
            problems.append("noise_std, speaker_offset and class_separation must be non-negative")
        if self.feature_mode not in ("synthetic", "from-wav"):
            problems.append(f"feature_mode must be 'synthetic' or 'from-wav', got {self.feature_mode!r}")
        if problems:
            raise ValueError("; ".join(problems))

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown SynthConfig field(s): {sorted(extra)}")
        cfg = cls(**d)
        cfg.validate()
        return cfg


def _next_emotion(rng: np.random.Generator, current: int, inertia: float) -> int:
    if rng.random() < inertia:
        return current
    others = [e for e in range(NUM_CLASSES) if e != current]
    return int(others[rng.integers(len(others))])


def synth_corpus(cfg: SynthConfig) -> Corpus:
    """Generate a deterministic synthetic corpus.

    Each turn's emotion follows a first-order chain that keeps the current
    emotion with probability ``inertia`` and otherwise switches uniformly to
    one of the other four. With ``speaker_conditioned`` every speaker carries
    an independent chain advanced on their own turns. Frame features are the
    emotion's mean vector plus a per-speaker offset plus Gaussian noise.
    """
    cfg.validate()
    if cfg.feature_mode != "synthetic":
        raise ValueError("synth_corpus generates synthetic features only; use the featurize step for WAV input")
    rng = np.random.default_rng(cfg.seed)
    emotion_means = rng.standard_normal((NUM_CLASSES, cfg.num_features)) * cfg.class_separation
    shift_s = cfg.frame_shift_ms / 1000.0
    conversations = []
    for s in range(cfg.num_sessions):
        session = f"Ses{s + 1:02d}"
        pool = [f"{session}_spk{k}" for k in range(cfg.speakers_per_conversation)]
        offsets = {name: rng.standard_normal(cfg.num_features) * cfg.speaker_offset for name in pool}
        for c in range(cfg.conversations_per_session):
            order = list(rng.permutation(pool))
            state = {name: int(rng.integers(NUM_CLASSES)) for name in order}
            current = state[order[0]]
            segments = []
            t_frames = 0
            for turn in range(cfg.turns_per_conversation):
                speaker = order[turn % len(order)]
                if cfg.speaker_conditioned:
                    if turn >= len(order):
                        state[speaker] = _next_emotion(rng, state[speaker], cfg.inertia)
                    label = state[speaker]
                else:
                    if turn > 0:
                        current = _next_emotion(rng, current, cfg.inertia)
                    label = current
                frames = max(3, int(round(rng.gamma(4.0, cfg.mean_segment_s / 4.0) / shift_s)))
                segments.append(Segment(round(t_frames * shift_s, 6), round((t_frames + frames) * shift_s, 6),
                                        str(speaker), Emotion(label)))
                t_frames += frames
            conv = Conversation(f"{session}_c{c:02d}", session, tuple(segments))
            conv.features = FeatureMatrix(np.zeros((t_frames, cfg.num_features), np.float32),
                                          frame_shift_ms=cfg.frame_shift_ms,
                                          frame_length_ms=cfg.frame_length_ms)
            aligned = align_labels_to_frames(conv)
            names = conv.speakers
            values = rng.standard_normal((t_frames, cfg.num_features)) * cfg.noise_std
            real = aligned.labels >= 0
            values[real] += emotion_means[aligned.labels[real]]
            spk = aligned.speakers >= 0
            values[spk] += np.stack([offsets[names[i]] for i in aligned.speakers[spk]])
            conv.features.values = values.astype(np.float32)
            conversations.append(conv)
    return Corpus(conversations, synth_config=cfg)


# ---------------------------------------------------------------------------
# persistence


def save_corpus(corpus: Corpus, out_dir) -> Path:
    """Write segments.jsonl, one FMX file per conversation and manifest.json."""
    out = Path(out_dir)
    (out / "features").mkdir(parents=True, exist_ok=True)
    write_segments(out / "segments.jsonl", corpus.conversations)
    files = {}
    for c in corpus.conversations:
        rel = f"features/{c.id}.fmx"
        write_features(out / rel, c.features)
        files[c.id] = rel
    manifest = {
        "conversations": files,
        "frame_length_ms": corpus.conversations[0].features.frame_length_ms if corpus.conversations else 25.0,
        "synth_config": dataclasses.asdict(corpus.synth_config) if corpus.synth_config else None,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return out


def load_corpus(corpus_dir) -> Corpus:
    root = Path(corpus_dir)
    manifest = json.loads((root / "manifest.json").read_text())
    conversations = parse_segments(root / "segments.jsonl")
    flen = manifest.get("frame_length_ms", 25.0)
    missing = [c.id for c in conversations if c.id not in manifest["conversations"]]
    if missing:
        raise FileNotFoundError(f"no feature file listed for conversations: {missing}")
    for c in conversations:
        fm = read_features(root / manifest["conversations"][c.id])
        fm.frame_length_ms = flen
        c.features = fm
    synth = manifest.get("synth_config")
    return Corpus(conversations, synth_config=SynthConfig(**synth) if synth else None)


def label_marginals(conversations: Iterable[Conversation]) -> np.ndarray:
    """Frame-level class frequencies over non-Ignore frames."""
    counts = np.zeros(NUM_CLASSES)
    for c in conversations:
        lab = align_labels_to_frames(c).labels
        counts += np.bincount(lab[lab >= 0], minlength=NUM_CLASSES)
    return counts / max(counts.sum(), 1)
