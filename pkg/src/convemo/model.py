"""Frame-level emotion tagger: optional convolutional front-end, learned
positional and interlocutor embeddings, a pre-norm transformer encoder and a
per-frame linear classifier. Checkpoints use the CERC binary format."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .corpus import NUM_CLASSES, CapacityError

CHECKPOINT_MAGIC = b"CERC"
CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    input_dim: int = 13
    num_layers: int = 2
    num_heads: int = 4
    hidden_dim: int = 64
    ffn_dim: int = 128
    max_positions: int = 2048
    num_classes: int = NUM_CLASSES
    use_conv_front_end: bool = False
    conv_kernels: list[int] = field(default_factory=lambda: [5, 5])
    conv_channels: int = 64
    use_interlocutor: bool = False
    max_speakers: int = 4
    dropout: float = 0.1
    seed: int = 0

    def validate(self) -> None:
        if self.hidden_dim % self.num_heads:
            raise ValueError(f"hidden_dim {self.hidden_dim} is not divisible by num_heads {self.num_heads}")
        if self.max_speakers < 1:
            raise ValueError("max_speakers must be >= 1")
        if self.max_positions < 1 or self.input_dim < 1 or self.num_classes < 1:
            raise ValueError("max_positions, input_dim and num_classes must be positive")
        if any(k % 2 == 0 or k < 1 for k in self.conv_kernels):
            raise ValueError(f"conv kernels must be odd and positive, got {self.conv_kernels}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")

    @classmethod
    def paper(cls, input_dim: int = 13, **overrides) -> "ModelConfig":
        """BERT-base geometry: 12 layers, 12 heads, 768 hidden units."""
        base = dict(input_dim=input_dim, num_layers=12, num_heads=12, hidden_dim=768, ffn_dim=3072,
                    max_positions=2048, conv_channels=256, conv_kernels=[3] * 8)
        base.update(overrides)
        return cls(**base)

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown ModelConfig field(s): {sorted(extra)}")
        cfg = cls(**d)
        cfg.conv_kernels = list(cfg.conv_kernels)
        cfg.validate()
        return cfg


def _glorot(rng, fan_in, fan_out, shape=None):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape or (fan_in, fan_out))


class EmotionTagger:
    """Maps a (B, L, F) feature batch to (B, L, num_classes) logits."""

    def __init__(self, config: ModelConfig, dtype=np.float32):
        config.validate()
        self.config = config
        self.dtype = np.dtype(dtype)
        self.params: dict[str, Tensor] = {}
        rng = np.random.default_rng(config.seed)
        c = config
        d = c.hidden_dim

        def add(name, value):
            self.params[name] = Tensor(np.asarray(value, dtype=self.dtype), requires_grad=True, name=name)

        if c.use_conv_front_end:
            ch = c.conv_channels
            # pointwise stem so every block can be residual
            add("conv.stem.weight", _glorot(rng, c.input_dim, ch))
            add("conv.stem.bias", np.zeros(ch))
            for i, k in enumerate(c.conv_kernels):
                add(f"conv.{i}.weight", _glorot(rng, k * ch, ch, (k, ch, ch)))
                add(f"conv.{i}.bias", np.zeros(ch))
                add(f"conv.{i}.ln_gamma", np.ones(ch))
                add(f"conv.{i}.ln_beta", np.zeros(ch))
            add("front.weight", _glorot(rng, ch, d))
        else:
            add("front.weight", _glorot(rng, c.input_dim, d))
        add("front.bias", np.zeros(d))
        add("pos_emb", rng.normal(0.0, 0.02, (c.max_positions, d)))
        if c.use_interlocutor:
            # unit scale: at 0.02 the index vanishes next to unnormalized acoustic content
            add("spk_emb", rng.normal(0.0, 1.0, (c.max_speakers, d)))
        for i in range(c.num_layers):
            p = f"layers.{i}."
            add(p + "ln1_gamma", np.ones(d))
            add(p + "ln1_beta", np.zeros(d))
            for proj in ("q", "k", "v", "o"):
                add(p + f"w{proj}", _glorot(rng, d, d))
                # a key bias only shifts each score row uniformly, which softmax cancels
                if proj != "k":
                    add(p + f"b{proj}", np.zeros(d))
            add(p + "ln2_gamma", np.ones(d))
            add(p + "ln2_beta", np.zeros(d))
            add(p + "w1", _glorot(rng, d, c.ffn_dim))
            add(p + "b1", np.zeros(c.ffn_dim))
            add(p + "w2", _glorot(rng, c.ffn_dim, d))
            add(p + "b2", np.zeros(d))
        add("final_ln_gamma", np.ones(d))
        add("final_ln_beta", np.zeros(d))
        add("cls.weight", _glorot(rng, d, c.num_classes))
        add("cls.bias", np.zeros(c.num_classes))

    # -- parameter utilities -------------------------------------------------

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def astype(self, dtype) -> "EmotionTagger":
        clone = object.__new__(EmotionTagger)
        clone.config = self.config
        clone.dtype = np.dtype(dtype)
        clone.params = {k: Tensor(v.data.astype(dtype), requires_grad=True, name=k) for k, v in self.params.items()}
        return clone

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for k, v in state.items():
            self.params[k].data = np.array(v, dtype=self.dtype, copy=True)

    # -- components ---------------------------------------------------------

    def conv_front_end(self, x: Tensor, real: np.ndarray | None = None, trace: list | None = None,
                       training: bool = False, rng: np.random.Generator | None = None) -> Tensor:
        """Pointwise stem, then stride-1 residual conv blocks; output length equals input length, padded frames are zeroed."""
        c = self.config
        keep = None if real is None else real[..., None].astype(self.dtype)
        p = self.params
        h = x @ p["conv.stem.weight"] + p["conv.stem.bias"]
        for i in range(len(c.conv_kernels)):
            y = ag.conv1d(h, p[f"conv.{i}.weight"], p[f"conv.{i}.bias"])
            y = ag.gelu(ag.layer_norm(y, p[f"conv.{i}.ln_gamma"], p[f"conv.{i}.ln_beta"]))
            y = ag.dropout(y, c.dropout, rng, training)
            h = h + y
            if keep is not None:
                h = h * keep
            if trace is not None:
                trace.append(h)
        return h

    def embed_inputs(self, h: Tensor, positions: np.ndarray, speaker_indices: np.ndarray | None = None) -> Tensor:
        c = self.config
        positions = np.asarray(positions)
        if positions.size and (positions.max() >= c.max_positions or positions.min() < 0):
            raise CapacityError(f"position {positions.max()} exceeds the {c.max_positions} learned positions")
        out = h + ag.embedding(self.params["pos_emb"], positions)
        if c.use_interlocutor and speaker_indices is not None:
            idx = np.asarray(speaker_indices)
            if idx.size and idx.max() >= c.max_speakers:
                raise CapacityError(
                    f"speaker index {idx.max()} exceeds the interlocutor dictionary size of {c.max_speakers}"
                )
            out = out + ag.embedding(self.params["spk_emb"], idx)
        return out

    def _attention(self, x: Tensor, i: int, key_mask: np.ndarray | None, diag: dict | None) -> Tensor:
        c = self.config
        p = self.params
        pre = f"layers.{i}."
        B, L, d = x.shape
        H = c.num_heads
        dh = d // H

        def heads(t: Tensor) -> Tensor:
            return t.reshape(B, L, H, dh).transpose(0, 2, 1, 3)

        q = heads(x @ p[pre + "wq"] + p[pre + "bq"])
        k = heads(x @ p[pre + "wk"])
        v = heads(x @ p[pre + "wv"] + p[pre + "bv"])
        scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(dh))
        mask = None if key_mask is None else key_mask[:, None, None, :]
        w = ag.softmax(scores, axis=-1, mask=mask)
        if diag is not None:
            diag.setdefault("attention", []).append(w.data)
            diag.setdefault("attention_inputs", []).append(x.data)
        ctx = (w @ v).transpose(0, 2, 1, 3).reshape(B, L, d)
        return ctx @ p[pre + "wo"] + p[pre + "bo"]

    def transformer_encode(self, h: Tensor, key_mask: np.ndarray | None = None, training: bool = False,
                           rng: np.random.Generator | None = None, diag: dict | None = None) -> Tensor:
        c = self.config
        p = self.params
        if h.shape[1] > c.max_positions:
            raise CapacityError(f"sequence length {h.shape[1]} exceeds max_positions {c.max_positions}")
        for i in range(c.num_layers):
            pre = f"layers.{i}."
            a = ag.layer_norm(h, p[pre + "ln1_gamma"], p[pre + "ln1_beta"])
            h = h + ag.dropout(self._attention(a, i, key_mask, diag), c.dropout, rng, training)
            f = ag.layer_norm(h, p[pre + "ln2_gamma"], p[pre + "ln2_beta"])
            f = ag.gelu(f @ p[pre + "w1"] + p[pre + "b1"]) @ p[pre + "w2"] + p[pre + "b2"]
            h = h + ag.dropout(f, c.dropout, rng, training)
        return ag.layer_norm(h, p["final_ln_gamma"], p["final_ln_beta"])

    def classify_frames(self, h: Tensor) -> Tensor:
        return h @ self.params["cls.weight"] + self.params["cls.bias"]

    # -- full pass ----------------------------------------------------------

    def forward(self, features, speaker_indices=None, real=None, positions=None, training: bool = False,
                rng: np.random.Generator | None = None, diag: dict | None = None) -> Tensor:
        """Logits for a (L, F) sequence or a (B, L, F) batch.

        ``real`` marks non-padding frames; padding is excluded as an attention key.
        """
        x = np.asarray(features.data if isinstance(features, Tensor) else features, dtype=self.dtype)
        squeeze = x.ndim == 2
        if squeeze:
            x = x[None]
            speaker_indices = None if speaker_indices is None else np.asarray(speaker_indices)[None]
            real = None if real is None else np.asarray(real)[None]
            positions = None if positions is None else np.asarray(positions)[None]
        B, L, _ = x.shape
        if positions is None:
            positions = np.broadcast_to(np.arange(L), (B, L))
        if training and rng is None:
            raise ValueError("training mode needs an rng for dropout")

        h = Tensor(x, dtype=self.dtype)
        if self.config.use_conv_front_end:
            h = self.conv_front_end(h, real, training=training, rng=rng)
        h = h @ self.params["front.weight"] + self.params["front.bias"]
        h = self.embed_inputs(h, positions, speaker_indices)
        h = ag.dropout(h, self.config.dropout, rng, training)
        h = self.transformer_encode(h, real, training, rng, diag)
        logits = self.classify_frames(h)
        return logits.reshape(L, -1) if squeeze else logits

    __call__ = forward


def predict_labels(logits: np.ndarray) -> np.ndarray:
    """Argmax over classes; ties go to the lowest class index."""
    return np.argmax(logits, axis=-1)


# ---------------------------------------------------------------------------
# checkpoints


class CheckpointError(ValueError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointChecksumError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointConfigError(CheckpointError):
    pass


def _checksum(data: bytes) -> bytes:
    return hashlib.blake2b(data, digest_size=8).digest()


def checkpoint_bytes(model: EmotionTagger) -> bytes:
    cfg = model.config.to_json().encode()
    parts = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(cfg)), cfg,
             struct.pack("<I", len(model.params))]
    for name, t in model.params.items():
        raw = name.encode()
        parts.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", t.ndim))
        parts.append(struct.pack(f"<{t.ndim}I", *t.shape))
        parts.append(np.ascontiguousarray(t.data, dtype="<f4").tobytes())
    body = b"".join(parts)
    return body + _checksum(body)


def save_checkpoint(path, model: EmotionTagger) -> None:
    Path(path).write_bytes(checkpoint_bytes(model))


class _Reader:
    def __init__(self, raw: bytes, end: int):
        self.raw, self.pos, self.end = raw, 0, end

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > self.end:
            raise CheckpointTruncatedError(
                f"truncated while reading {what} at offset {self.pos}: need {n} bytes, {self.end - self.pos} left"
            )
        out = self.raw[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def load_checkpoint(path, expect: dict | None = None) -> EmotionTagger:
    """Load a CERC checkpoint.

    ``expect`` maps config fields to required values; a mismatch raises
    :class:`CheckpointConfigError`.
    """
    raw = Path(path).read_bytes()
    if len(raw) < 8 + len(CHECKPOINT_MAGIC):
        raise CheckpointTruncatedError(f"file of {len(raw)} bytes is too short for a checkpoint")
    r = _Reader(raw, len(raw) - 8)
    if r.take(4, "magic") != CHECKPOINT_MAGIC:
        raise CheckpointError(f"bad magic, expected {CHECKPOINT_MAGIC!r}")
    (version,) = r.unpack("<I", "version")
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(f"unsupported checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    (cfg_len,) = r.unpack("<I", "config length")
    try:
        cfg = ModelConfig.from_dict(json.loads(r.take(cfg_len, "config").decode()))
    except (ValueError, TypeError) as exc:
        raise CheckpointConfigError(f"invalid model config: {exc}") from None
    (count,) = r.unpack("<I", "tensor count")
    tensors = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H", "tensor name length")
        name = r.take(nlen, "tensor name").decode()
        (rank,) = r.unpack("<B", f"rank of {name}")
        dims = r.unpack(f"<{rank}I", f"dims of {name}")
        n = int(np.prod(dims, dtype=np.int64))
        data = r.take(4 * n, f"data of tensor {name!r}")
        tensors[name] = np.frombuffer(data, dtype="<f4").reshape(dims)
    if r.pos != r.end:
        raise CheckpointError(f"{r.end - r.pos} unexpected bytes before the checksum at offset {r.pos}")
    if raw[-8:] != _checksum(raw[:-8]):
        raise CheckpointChecksumError("checksum mismatch: checkpoint is corrupted")

    for key, want in (expect or {}).items():
        have = getattr(cfg, key, None)
        if have != want:
            raise CheckpointConfigError(f"config field {key!r} is {have!r} in checkpoint, expected {want!r}")

    model = EmotionTagger(cfg)
    expected_shapes = {k: v.shape for k, v in model.params.items()}
    got_shapes = {k: v.shape for k, v in tensors.items()}
    if expected_shapes != got_shapes:
        raise CheckpointConfigError("tensor table does not match the stored model config")
    model.load_state_dict(tensors)
    return model
