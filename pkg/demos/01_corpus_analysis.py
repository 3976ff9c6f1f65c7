"""Emotional inertia and trigram heterogeneity on a synthetic corpus.

Run: python demos/01_corpus_analysis.py --inertia 0.95
"""
import argparse

import numpy as np

from convemo.corpus import CLASS_NAMES, SynthConfig, label_marginals, synth_corpus
from convemo.metrics import heterogeneous_fraction, inertia_report, trigram_probs


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--inertia", type=float, default=0.95)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args()

    corpus = synth_corpus(SynthConfig(inertia=args.inertia, seed=args.seed, num_features=1))
    convs = corpus.conversations
    print(f"{len(convs)} conversations in {len(corpus.sessions)} sessions, inertia {args.inertia}")
    print("frame marginals:", " ".join(f"{n}={m:.2f}" for n, m in zip(CLASS_NAMES, label_marginals(convs))))

    # how often one emotion holds more than 75% of a conversation's duration
    rep = inertia_report(convs)
    print(f"\nconversations dominated by one emotion: {rep.flagged_fraction:.1%}")
    shares = sorted(r.fraction for r in rep.rows)
    print(f"dominant share quartiles: {np.percentile(shares, [25, 50, 75]).round(2).tolist()}")

    # (neighbor, central, neighbor) windows whose neighbors agree
    table = trigram_probs(convs)
    het = heterogeneous_fraction(table)
    print("\ncentral     " + " ".join(f"{n[:5]:>6s}" for n in CLASS_NAMES) + "   heterogeneous")
    for name, row, h in zip(CLASS_NAMES, table, het):
        tail = "     n/a" if np.isnan(h) else f"    {h:.1%}"
        print(f"{name:<11s} " + " ".join(f"{x:6.2f}" for x in row) + tail)


if __name__ == "__main__":
    main()
