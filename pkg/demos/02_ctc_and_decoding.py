"""CTC loss, greedy decoding and prefix beam search on a hand-made emission matrix.

Run: python demos/02_ctc_and_decoding.py
"""
import numpy as np

from lipread import GRID, ctc


def main():
    alphabet = ctc.char_alphabet()
    print(f"char alphabet: {len(alphabet)} labels, blank index {alphabet.blank_index}")

    # a confident emission spelling "bin" with blanks in between
    path = [1, 1, 27, 8, 27, 13, 13, 27]
    lp = np.full((len(path), len(alphabet)), np.log(0.02 / 27))
    lp[np.arange(len(path)), path] = np.log(0.98)
    target = alphabet.encode("bin")
    loss, grad = ctc.ctc_loss(lp, target)
    print(f"\nloss of 'bin' on its own emission: {loss:.4f}")
    print(f"gradient rows sum to zero: {np.allclose(grad.sum(axis=1), 0)}")
    print(f"greedy: {ctc.greedy_decode(lp, alphabet)!r}   beam(8): {ctc.beam_decode(lp, alphabet, 8)!r}")

    # greedy picks the best single path; the beam sums over all paths of a prefix.
    # Two frames over labels {a, b, blank} show where that matters.
    lp = np.log([[0.6, 0.05, 0.35], [0.3, 0.4, 0.3]])
    greedy = ctc.best_path(lp, blank=2)
    ranked = ctc.prefix_beam_search(lp, beam_width=9, blank=2)
    print(f"\ngreedy best path: {greedy}")
    for prefix, score in ranked[:3]:
        print(f"  beam prefix {prefix}: p = {np.exp(score):.3f}")

    # spelling correction snaps each hypothesised word to the nearest dictionary entry
    print(f"\nspell-corrected: {ctc.spell_correct('sett bleu att x fiv agian', GRID.vocabulary)!r}")


if __name__ == "__main__":
    main()
