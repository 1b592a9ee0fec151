"""Render a synthetic Grid-grammar corpus, train a scaled-down network with CTC, and score it.

Run: python demos/03_train_synthetic.py [--train 200] [--test 50] [--epochs 40]
A small run (--train 40 --epochs 5) takes a couple of minutes on one core.
"""
import argparse
import logging
from fractions import Fraction

from lipread import (
    GRID, NetworkConfig, RenderConfig, TrainConfig, build_network, evaluate, make_alphabet, synthetic_corpus,
    train,
)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--train", type=int, default=200)
    ap.add_argument("--test", type=int, default=50)
    ap.add_argument("--epochs", type=int, default=40)
    ap.add_argument("--mode", choices=["char", "word"], default="char")
    ap.add_argument("--curriculum", action="store_true")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    # train and test share the four synthetic speakers ("seen" split)
    render = RenderConfig(noise=0.02)
    train_set = synthetic_corpus(args.train, GRID, render, args.seed, prefix="train")
    test_set = synthetic_corpus(args.test, GRID, render, args.seed, prefix="test")
    print(f"example sentence: {train_set[0].text!r}, clip {train_set[0].frames.shape}")

    alphabet = make_alphabet(args.mode, [s.transcript for s in train_set] + [GRID.vocabulary])
    net = build_network(NetworkConfig(len(alphabet), width_scale=Fraction(1, 8)), seed=args.seed)
    print(f"{alphabet.mode} alphabet of {len(alphabet)} labels; {net.parameter_count():,} parameters")

    # small batches and a larger step than the library default get past the
    # initial CTC plateau within a desk-sized budget
    config = TrainConfig(learning_rate=3e-3, batch_size=4, max_epochs=args.epochs, seed=args.seed,
                         label_mode=args.mode, curriculum=args.curriculum, patience=args.epochs)
    result = train(net, train_set, config, alphabet, val_dataset=test_set[:10])
    losses = [round(r["loss"], 1) for r in result.curve if r["split"] == "train"]
    print(f"train loss by epoch: {losses}")

    report = evaluate(net, test_set, alphabet, beam_width=50, spell=True)
    print(report.summary())
    for ref, hyp in list(zip(report.references, report.hypotheses))[:5]:
        print(f"  {ref:<32} -> {hyp}")


if __name__ == "__main__":
    main()
