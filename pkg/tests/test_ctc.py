import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lipread import ctc
from lipread.ctc import (
    BLANK, SPACE, Alphabet, CTCInfeasibleError, beam_decode, best_path, build_word_alphabet,
    char_alphabet, ctc_batch_loss, ctc_loss, greedy_decode, levenshtein, min_frames,
    prefix_beam_search, spell_correct,
)
from lipread.data import GRID
from lipread.tensor import parameter, precision

from oracles import collapsed_distribution, ctc_bruteforce_nll, levenshtein_table, random_log_probs


def onehot_log(path, n_labels, p=0.97):
    rest = (1 - p) / (n_labels - 1)
    lp = np.full((len(path), n_labels), math.log(rest))
    lp[np.arange(len(path)), path] = math.log(p)
    return lp


class TestAlphabet:
    def test_char_alphabet(self):
        a = char_alphabet()
        assert len(a) == 28
        assert a.blank_index == 27 and a.labels[27] == BLANK
        assert a.labels[26] == SPACE

    def test_word_alphabet_grid(self):
        a = build_word_alphabet([GRID.vocabulary])
        assert len(a) == 53
        assert a.labels[:51] == sorted(GRID.vocabulary)

    def test_word_alphabet_empty(self):
        a = build_word_alphabet([])
        assert a.labels == [SPACE, BLANK]

    def test_duplicates_once(self):
        a = build_word_alphabet(["bin red", "set red", ["bin"]])
        assert a.labels == ["bin", "red", "set", SPACE, BLANK]

    def test_encode_char(self):
        a = char_alphabet()
        seq = a.encode("set red")
        assert seq.targets == [18, 4, 19, 26, 17, 4, 3]
        assert a.decode(seq.targets) == "set red"

    def test_encode_word_inserts_spaces(self):
        a = build_word_alphabet(["bin blue at"])
        seq = a.encode(["bin", "blue", "at"])
        sp = a.space_index
        assert seq.targets == [a.index("bin"), sp, a.index("blue"), sp, a.index("at")]
        assert a.decode(seq.targets) == "bin blue at"

    def test_unknown_symbol(self):
        with pytest.raises(KeyError, match="zebra"):
            build_word_alphabet(["bin"]).encode("zebra")

    def test_invalid(self):
        with pytest.raises(ValueError):
            Alphabet(["a", "a", BLANK], 2)
        with pytest.raises(ValueError):
            Alphabet(["a", "b"], 1)

    def test_descriptor_round_trip(self):
        a = build_word_alphabet(["bin red"])
        assert Alphabet.from_descriptor(a.descriptor()) == a

    @given(st.lists(st.sampled_from(sorted(GRID.vocabulary)), min_size=1, max_size=8))
    def test_text_round_trip(self, words):
        for a in (char_alphabet(), build_word_alphabet([GRID.vocabulary])):
            assert a.decode(a.encode(words).targets) == " ".join(words)


class TestLoss:
    def test_single_frame(self):
        lp = np.log([[0.3, 0.7]])
        loss, _ = ctc_loss(lp, [0], blank=1)
        assert loss == pytest.approx(-math.log(0.3))

    def test_two_frame_uniform(self):
        loss, _ = ctc_loss(np.log(np.full((2, 2), 0.5)), [0], blank=1)
        assert loss == pytest.approx(-math.log(0.75), abs=1e-12)
        assert loss == pytest.approx(0.28768, abs=1e-5)

    def test_matches_enumeration(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            t, n = rng.integers(1, 6), rng.integers(2, 5)
            tg = list(rng.integers(0, n - 1, rng.integers(0, 4)))
            lp = random_log_probs(rng, t, n)
            if t < min_frames(tg):
                continue
            assert ctc_loss(lp, tg)[0] == pytest.approx(ctc_bruteforce_nll(lp, tg, n - 1), abs=1e-9)

    def test_empty_target(self):
        lp = np.log(np.full((3, 3), 1 / 3))
        assert ctc_loss(lp, [])[0] == pytest.approx(3 * math.log(3))

    def test_infeasible(self):
        lp = np.zeros((2, 3))
        with pytest.raises(CTCInfeasibleError):
            ctc_loss(lp, [0, 1, 0])
        with pytest.raises(CTCInfeasibleError):
            ctc_loss(lp, [1, 1])  # repeat needs a separating blank
        assert min_frames([1, 1]) == 3

    def test_blank_in_target(self):
        with pytest.raises(ValueError):
            ctc_loss(np.zeros((3, 3)), [2])

    def test_gradient_rows_sum_to_zero(self):
        rng = np.random.default_rng(3)
        _, g = ctc_loss(random_log_probs(rng, 12, 6), [0, 3, 3, 1])
        np.testing.assert_allclose(g.sum(axis=1), 0, atol=1e-12)

    def test_relabelling_invariance(self):
        rng = np.random.default_rng(4)
        lp = random_log_probs(rng, 8, 5)
        perm = np.array([2, 0, 3, 1])  # non-blank labels only
        full = np.append(perm, 4)
        relabelled = np.empty_like(lp)
        relabelled[:, full] = lp
        tg = [0, 1, 1, 3]
        a = ctc_loss(lp, tg)[0]
        b = ctc_loss(relabelled, [int(perm[k]) for k in tg])[0]
        assert a == pytest.approx(b, abs=1e-12)

    def test_no_nan_for_extreme_inputs(self):
        lp = np.full((6, 3), -1e4)
        lp[:, 2] = 0.0
        loss, g = ctc_loss(lp, [0, 1])
        assert np.isfinite(loss) and np.all(np.isfinite(g))

    def test_batch_loss_is_mean_and_backprops(self):
        rng = np.random.default_rng(5)
        with precision(np.float64):
            z = parameter(rng.standard_normal((2, 5, 4)))
            tg = [[0, 1], [2]]
            loss = ctc_batch_loss(z, tg, blank=3)
            expected = np.mean([ctc_loss(z.data[b], tg[b], 3)[0] for b in range(2)])
            assert float(loss.data) == pytest.approx(expected)
            loss.backward()
            np.testing.assert_allclose(z.grad[1], ctc_loss(z.data[1], tg[1], 3)[1] / 2)


class TestGreedy:
    def test_collapse(self):
        a = Alphabet(["a", "b", BLANK], 2)
        lp = onehot_log([0, 0, 2, 1], 3)
        assert greedy_decode(lp, a) == "ab"

    def test_all_blank(self):
        a = Alphabet(["a", "b", BLANK], 2)
        assert greedy_decode(onehot_log([2, 2, 2], 3), a) == ""

    def test_blank_separates_repeats(self):
        assert best_path(onehot_log([0, 2, 0, 0, 1], 3), 2) == [0, 0, 1]


class TestBeam:
    def test_default_width(self):
        import inspect
        assert inspect.signature(beam_decode).parameters["beam_width"].default == 200

    def test_invalid_width(self):
        with pytest.raises(ValueError):
            prefix_beam_search(np.zeros((2, 3)), 0)

    def test_exhaustive_match(self):
        rng = np.random.default_rng(6)
        for _ in range(25):
            lp = random_log_probs(rng, 3, 3, sharpness=2.0)
            dist = collapsed_distribution(lp, 2)
            best = max(dist, key=lambda k: (dist[k], tuple(-x for x in k)))
            prefix, score = prefix_beam_search(lp, 27, 2)[0]
            assert prefix == best
            assert score == pytest.approx(math.log(dist[best]), abs=1e-9)

    def test_full_ranking_matches_enumeration(self):
        lp = random_log_probs(np.random.default_rng(7), 4, 3)
        dist = collapsed_distribution(lp, 2)
        ranked = prefix_beam_search(lp, 1000, 2)
        assert {p for p, _ in ranked} == set(dist)
        for p, s in ranked:
            assert s == pytest.approx(math.log(dist[p]), abs=1e-9)

    def test_tie_break_lexicographic(self):
        lp = np.log(np.array([[0.5, 0.5, 1e-12]]))
        ranked = prefix_beam_search(lp, 5, 2)
        assert ranked[0][0] == (0,) and ranked[1][0] == (1,)

    def test_width_one_confident_equals_greedy(self):
        a = char_alphabet()
        lp = onehot_log([7, 7, 27, 4, 27, 11, 11, 27, 11, 14], 28, p=0.95)
        assert beam_decode(lp, a, 1) == greedy_decode(lp, a) == "hello"

    def test_width_one_can_differ_from_greedy(self):
        # blank and 'a' split one frame; together they outweigh 'b', which wins the argmax
        lp = np.log(np.array([[0.6, 0.05, 0.35], [0.3, 0.4, 0.3]]))
        assert best_path(lp, 2) == [0, 1]
        assert prefix_beam_search(lp, 1, 2)[0][0] == (0,)

    def test_score_is_lower_bound_of_exact_probability(self):
        rng = np.random.default_rng(9)
        for _ in range(30):
            lp = random_log_probs(rng, 6, 4, sharpness=1.5)
            for width in (1, 2, 4):
                prefix, score = prefix_beam_search(lp, width, 3)[0]
                exact = -ctc_loss(lp, list(prefix), 3)[0]
                assert score <= exact + 1e-9

    def test_exhaustive_width_dominates(self):
        rng = np.random.default_rng(10)
        for _ in range(30):
            lp = random_log_probs(rng, 5, 3, sharpness=2.0)
            top = prefix_beam_search(lp, 10_000, 2)[0][1]
            for width in (1, 2, 4, 8):
                assert prefix_beam_search(lp, width, 2)[0][1] <= top + 1e-12

    def test_score_not_always_monotone_in_width(self):
        # pinned counterexample: a wider beam keeps different intermediate prefixes
        lp = np.array([[-3.0, 0.6, 0.3], [-3.9, -0.3, 2.2], [-0.1, -0.1, -2.3],
                       [1.4, -1.4, -1.1], [2.3, -2.0, -0.4], [-0.0, 0.8, 3.1]])
        s2 = prefix_beam_search(lp, 2, 2)[0][1]
        s4 = prefix_beam_search(lp, 4, 2)[0][1]
        assert s4 < s2

    def test_beam_decode_text(self):
        a = char_alphabet()
        lp = onehot_log([1, 8, 13, 26, 27, 17, 4, 3], 28, p=0.9)
        assert beam_decode(lp, a, 10) == "bin red"


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(0, 3), min_size=1, max_size=10), st.integers(0, 10_000))
def test_width_one_equals_greedy_on_confident_frames(path, seed):
    """With every frame's argmax above 0.9 the width-1 beam follows the best path."""
    rng = np.random.default_rng(seed)
    lp = np.log(np.full((len(path), 4), 1e-3))
    for t, k in enumerate(path):
        row = rng.dirichlet(np.ones(4)) * (1 - 0.92)
        row[k] += 0.92
        lp[t] = np.log(row)
    assert list(prefix_beam_search(lp, 1, 3)[0][0]) == best_path(lp, 3)


class TestSpelling:
    def test_bluee(self):
        assert spell_correct("bluee", GRID.vocabulary) == "blue"

    def test_in_dictionary_unchanged(self):
        assert spell_correct("red", GRID.vocabulary) == "red"

    def test_tie_alphabetical(self):
        assert spell_correct("st", ["set", "sat"]) == "sat"

    def test_empty_dictionary(self):
        assert spell_correct("xyz abc", []) == "xyz abc"

    def test_sentence(self):
        assert spell_correct("bim bleu at f twoo soom", GRID.vocabulary) == "bin blue at f two soon"

    def test_exhaustive_oracle(self):
        rng = np.random.default_rng(11)
        vocab = sorted(GRID.vocabulary)
        for _ in range(30):
            tok = "".join(rng.choice(list("abcdefghijklmnoprstuvwxyz"), rng.integers(1, 7)))
            scores = sorted((levenshtein_table(tok, w), w) for w in vocab)
            assert spell_correct(tok, vocab) == scores[0][1]

    @given(st.text("abcde", max_size=7), st.text("abcde", max_size=7))
    def test_levenshtein_oracle(self, a, b):
        assert levenshtein(a, b) == levenshtein_table(a, b)


def test_module_sentinel_is_finite():
    assert np.isfinite(ctc.NEG_INF) and ctc.NEG_INF < -1e20
