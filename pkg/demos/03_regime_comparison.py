"""Train the four data regimes on one fold and compare test weighted f1.

The full comparison (5 seeds) lives in the acceptance tests; this demo
defaults to one seed and takes about five minutes. DCA batches give only a
few optimizer steps per epoch, so cutting --epochs much below 100 leaves the
DCA regimes under-trained and reverses the comparison.
Run: python demos/03_regime_comparison.py --seeds 1
"""
import argparse
import logging

from convemo.corpus import SynthConfig, synth_corpus
from convemo.experiments import Variant, compare

REGIMES = ("isolated", "dca_isolated", "conversations", "dca_conversations")


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--seeds", type=int, default=1)
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--segment-s", type=float, default=0.25, help="mean segment duration of the corpus")
    p.add_argument("-v", "--verbose", action="store_true")
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)

    corpus = synth_corpus(SynthConfig(inertia=0.95, noise_std=6.0, mean_segment_s=args.segment_s,
                                      turns_per_conversation=24, seed=1))
    variants = {r: Variant(trainer={"regime": r, "epochs": args.epochs}) for r in REGIMES}
    cmp = compare(corpus, variants, seeds=args.seeds)
    for r in REGIMES:
        print(f"{r:<18s} median weighted f1 {cmp.median(r):.3f}  runs {[round(x, 3) for x in cmp.scores[r]]}")
    print(f"\ndca_conversations vs conversations: {cmp.gain('dca_conversations', 'conversations'):+.1f} points")
    print(f"dca_isolated vs isolated:           {cmp.gain('dca_isolated', 'isolated'):+.1f} points")
    print(f"({cmp.seconds:.0f} s)")


if __name__ == "__main__":
    main()
