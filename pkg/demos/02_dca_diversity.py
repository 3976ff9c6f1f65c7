"""Why concatenation helps attention: label diversity and the averaging effect.

Run: python demos/02_dca_diversity.py
"""
import argparse

import numpy as np

from convemo import autograd as ag
from convemo.cli import diversity_by_window
from convemo.corpus import SynthConfig, synth_corpus


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--samples", type=int, default=500)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args()

    # on a constant sequence attention weights are uniform and every output is the input row
    row = np.random.default_rng(args.seed).normal(size=8)
    diag = ag.attention_unprojected(ag.Tensor(np.tile(row, (6, 1)), dtype=np.float64))
    print("constant sequence, attention row 0:", diag.weights.data[0].round(3).tolist())
    print("max |output - input|:", float(np.abs(diag.output.data - row).max()))

    # two clusters of frames: attention stays mostly inside each cluster
    rng = np.random.default_rng(args.seed + 1)
    a, b = rng.normal(size=8) * 2, rng.normal(size=8) * 2
    x = np.vstack([a + 0.1 * rng.normal(size=(3, 8)), b + 0.1 * rng.normal(size=(3, 8))])
    w = ag.attention_unprojected(ag.Tensor(x, dtype=np.float64)).weights.data
    print(f"two-emotion sequence, weight kept within own cluster: {w[:3, :3].sum(axis=1).mean():.3f}")

    corpus = synth_corpus(SynthConfig(inertia=0.95, seed=args.seed))
    print("\nmean label entropy (bits) per training window")
    print(f"{'window':>7s} {'plain':>7s} {'dca':>7s}")
    for window in (256, 512, 1024, 2048):
        d = diversity_by_window(corpus.conversations, window, args.samples, args.seed)
        print(f"{window:7d} {d['plain_mean_bits']:7.3f} {d['dca_conversations_mean_bits']:7.3f}")


if __name__ == "__main__":
    main()
