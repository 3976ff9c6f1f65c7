"""Seed-replicated comparisons of training variants on one LOSO fold."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .corpus import Corpus, loso_splits
from .model import ModelConfig
from .train import TrainerConfig, evaluate, train

logger = logging.getLogger(__name__)

# desk geometry for the directional experiments; one run takes about a minute on one core
DESK_MODEL = dict(hidden_dim=32, ffn_dim=64, num_heads=4, num_layers=2, max_positions=256, dropout=0.1)
DESK_TRAINER = dict(epochs=100, train_len=256, learning_rate=6e-3, lr_decay="linear", eval_every=5,
                    strict_deterministic=True)


@dataclass
class Variant:
    model: dict = field(default_factory=dict)
    trainer: dict = field(default_factory=dict)


@dataclass
class Comparison:
    scores: dict[str, list[float]]
    seconds: float

    def median(self, name: str) -> float:
        return float(np.median(self.scores[name]))

    def gain(self, better: str, base: str) -> float:
        """Median difference in absolute weighted-f1 points."""
        return 100.0 * (self.median(better) - self.median(base))


def compare(corpus: Corpus, variants: dict[str, Variant], seeds: int = 5, fold: int = 0) -> Comparison:
    """Test weighted f1 of every variant for seeds 0..seeds-1 on one fold."""
    split = loso_splits(corpus)[fold]
    tr, dev, test = corpus.by_session(split.train), corpus.by_session([split.dev]), corpus.by_session([split.test])
    input_dim = corpus.conversations[0].features.num_features
    scores: dict[str, list[float]] = {name: [] for name in variants}
    start = time.time()
    for seed in range(seeds):
        for name, v in variants.items():
            mcfg = ModelConfig(**{**DESK_MODEL, "input_dim": input_dim, "seed": seed, **v.model})
            tcfg = TrainerConfig(**{**DESK_TRAINER, "seed": seed, **v.trainer})
            result = train(tr, dev, mcfg, tcfg)
            wf1 = evaluate(result.model, test, tcfg.chunk_len, tcfg.eval_chunk_overlap).weighted_f1
            scores[name].append(wf1)
            logger.info("%s seed %d test weighted_f1 %.4f", name, seed, wf1)
    return Comparison(scores, time.time() - start)


def describe(cmp: Comparison) -> str:
    parts = [f"{name} median {cmp.median(name):.3f} [{' '.join(f'{x:.3f}' for x in xs)}]"
             for name, xs in cmp.scores.items()]
    return "; ".join(parts) + f" ({cmp.seconds:.0f} s)"
