"""CTC loss, decoders, label alphabets and dictionary spell correction."""
from __future__ import annotations

import math
import string
from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor

# log(0) stand-in; finite so arithmetic never yields NaN
NEG_INF = -1e30
SPACE = " "
BLANK = "<b>"


class CTCInfeasibleError(ValueError):
    """The target cannot be aligned to so few frames."""


@dataclass
class Alphabet:
    labels: list
    blank_index: int
    mode: str = "character"
    dictionary: list | None = None
    _index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        self.labels = list(self.labels)
        if len(set(self.labels)) != len(self.labels):
            raise ValueError("alphabet labels must be unique")
        if self.labels.count(BLANK) != 1 or self.labels[self.blank_index] != BLANK:
            raise ValueError("alphabet needs exactly one blank at blank_index")
        if self.mode not in ("character", "word"):
            raise ValueError(f"unknown alphabet mode {self.mode!r}")
        self._index = {s: i for i, s in enumerate(self.labels)}

    def __len__(self):
        return len(self.labels)

    @property
    def space_index(self):
        return self._index[SPACE]

    def index(self, symbol):
        try:
            return self._index[symbol]
        except KeyError:
            raise KeyError(f"symbol {symbol!r} is not in the {self.mode} alphabet") from None

    def encode(self, text) -> LabelSequence:
        """Target indices for a transcript (string or word list)."""
        words = text.split() if isinstance(text, str) else list(text)
        targets = []
        for k, word in enumerate(words):
            if k:
                targets.append(self.space_index)
            if self.mode == "word":
                targets.append(self.index(word))
            else:
                targets.extend(self.index(ch) for ch in word)
        return LabelSequence(targets, " ".join(words))

    def decode(self, indices) -> str:
        """Map non-blank label indices back to text."""
        syms = [self.labels[i] for i in indices if i != self.blank_index]
        if self.mode == "word":
            out, cur = [], []
            for s in syms:
                if s == SPACE:
                    if cur:
                        out.append(" ".join(cur))
                    cur = []
                else:
                    cur.append(s)
            if cur:
                out.append(" ".join(cur))
            return " ".join(out)
        return " ".join("".join(syms).split())

    def descriptor(self) -> dict:
        return {"labels": self.labels, "blank_index": self.blank_index,
                "mode": self.mode, "dictionary": self.dictionary}

    @classmethod
    def from_descriptor(cls, d) -> Alphabet:
        return cls(d["labels"], d["blank_index"], d["mode"], d.get("dictionary"))


@dataclass
class LabelSequence:
    targets: list
    text: str = ""

    def __len__(self):
        return len(self.targets)


def char_alphabet(dictionary=None) -> Alphabet:
    """26 letters, space, then blank (28 labels)."""
    labels = list(string.ascii_lowercase) + [SPACE, BLANK]
    return Alphabet(labels, len(labels) - 1, "character", sorted(dictionary) if dictionary else None)


def build_word_alphabet(transcripts) -> Alphabet:
    """Sorted unique words, space, then blank."""
    words = set()
    for t in transcripts:
        words.update(t.split() if isinstance(t, str) else t)
    vocab = sorted(words)
    labels = vocab + [SPACE, BLANK]
    return Alphabet(labels, len(labels) - 1, "word", vocab)


# ---------------------------------------------------------------------------
# loss


def _targets(targets):
    return list(targets.targets if isinstance(targets, LabelSequence) else targets)


def min_frames(targets) -> int:
    """Fewest frames that can carry ``targets`` (repeats need a blank between)."""
    t = _targets(targets)
    return len(t) + sum(1 for a, b in zip(t, t[1:]) if a == b)


def _lse2(a, b):
    m = np.maximum(a, b)
    return m + np.log(np.exp(a - m) + np.exp(b - m))


def ctc_loss(log_probs, targets, blank=None):
    """Negative log-likelihood of ``targets`` under per-frame ``log_probs`` (T x L).

    Returns ``(loss, grad)``; ``grad`` is the derivative with respect to the
    pre-softmax scores (so rows sum to zero). Passing log-probabilities as
    those scores is equivalent because log-softmax is idempotent on them.
    """
    lp = np.asarray(log_probs, dtype=np.float64)
    t_len, n_labels = lp.shape
    blank = n_labels - 1 if blank is None else blank
    tg = _targets(targets)
    if blank in tg:
        raise ValueError("targets must not contain the blank label")
    if t_len < min_frames(tg):
        raise CTCInfeasibleError(f"target of length {len(tg)} needs {min_frames(tg)} frames, got {t_len}")
    # normalise so arbitrary scores are treated as logits
    lp = lp - np.logaddexp.reduce(lp, axis=1, keepdims=True)

    ext = np.full(2 * len(tg) + 1, blank, dtype=np.int64)
    ext[1::2] = tg
    s_len = len(ext)
    # skip transition s-2 -> s allowed onto non-blank labels differing from s-2
    skip = np.zeros(s_len, dtype=bool)
    skip[2:] = (ext[2:] != blank) & (ext[2:] != ext[:-2])

    emit = lp[:, ext]  # T x S
    alpha = np.full((t_len, s_len), NEG_INF)
    alpha[0, 0] = emit[0, 0]
    if s_len > 1:
        alpha[0, 1] = emit[0, 1]
    for t in range(1, t_len):
        prev = alpha[t - 1]
        acc = prev.copy()
        acc[1:] = _lse2(acc[1:], prev[:-1])
        acc[2:] = np.where(skip[2:], _lse2(acc[2:], prev[:-2]), acc[2:])
        alpha[t] = acc + emit[t]

    beta = np.full((t_len, s_len), NEG_INF)
    beta[-1, -1] = emit[-1, -1]
    if s_len > 1:
        beta[-1, -2] = emit[-1, -2]
    skip_from = np.zeros(s_len, dtype=bool)
    skip_from[:-2] = skip[2:]
    for t in range(t_len - 2, -1, -1):
        nxt = beta[t + 1]
        acc = nxt.copy()
        acc[:-1] = _lse2(acc[:-1], nxt[1:])
        acc[:-2] = np.where(skip_from[:-2], _lse2(acc[:-2], nxt[2:]), acc[:-2])
        beta[t] = acc + emit[t]

    tail = alpha[-1, -1] if s_len == 1 else _lse2(alpha[-1, -1], alpha[-1, -2])
    log_like = float(tail)
    if log_like <= NEG_INF / 2:
        raise CTCInfeasibleError("no alignment has non-zero probability")

    # occupancy: alpha*beta double counts the emission at t
    occ = alpha + beta - emit - log_like
    post = np.zeros((t_len, n_labels))
    np.add.at(post.T, ext, np.exp(occ).T)
    grad = np.exp(lp) - post
    return -log_like, grad


def ctc_batch_loss(logits: Tensor, targets, blank=None) -> Tensor:
    """Mean CTC loss over a ``(B, T, L)`` batch, as a differentiable scalar."""
    data = logits.data
    if data.ndim == 2:
        data = data[None]
        targets = [targets]
    losses = []
    grads = np.empty(data.shape, dtype=np.float64)
    for b in range(data.shape[0]):
        loss, g = ctc_loss(data[b], targets[b], blank)
        losses.append(loss)
        grads[b] = g
    bsz = data.shape[0]

    def backward(g):
        logits.accumulate((grads * (g / bsz)).reshape(logits.shape))

    return Tensor(np.mean(losses), _parents=(logits,), _backward=backward, _op="ctc_loss")


# ---------------------------------------------------------------------------
# decoding


def best_path(log_probs, blank):
    """Per-frame argmax, repeats collapsed, blanks dropped."""
    path = np.asarray(log_probs).argmax(axis=1)
    out = []
    prev = None
    for k in path:
        k = int(k)
        if k != prev and k != blank:
            out.append(k)
        prev = k
    return out


def greedy_decode(log_probs, alphabet: Alphabet) -> str:
    return alphabet.decode(best_path(log_probs, alphabet.blank_index))


def _lse(a, b):
    if a < b:
        a, b = b, a
    if b <= NEG_INF:
        return a
    return a + math.log1p(math.exp(b - a))


def prefix_beam_search(log_probs, beam_width=200, blank=None):
    """CTC prefix beam search.

    Returns ``[(prefix, log_prob), ...]`` best first. Probability mass of
    alignments collapsing to the same prefix is merged; ties keep the
    lexicographically smaller prefix first.
    """
    if beam_width < 1:
        raise ValueError("beam_width must be >= 1")
    lp = np.asarray(log_probs, dtype=np.float64)
    t_len, n_labels = lp.shape
    blank = n_labels - 1 if blank is None else blank
    lp = lp - np.logaddexp.reduce(lp, axis=1, keepdims=True)
    # prefix -> [log P(ends in blank), log P(ends in non-blank)]
    beams = {(): [0.0, NEG_INF]}
    labels = [k for k in range(n_labels) if k != blank]
    for t in range(t_len):
        row = lp[t].tolist()
        p_blank = row[blank]
        nxt = {}
        for prefix, (pb, pnb) in beams.items():
            total = _lse(pb, pnb)
            entry = nxt.setdefault(prefix, [NEG_INF, NEG_INF])
            entry[0] = _lse(entry[0], total + p_blank)
            last = prefix[-1] if prefix else None
            if last is not None:
                entry[1] = _lse(entry[1], pnb + row[last])
            for k in labels:
                ext = prefix + (k,)
                e = nxt.setdefault(ext, [NEG_INF, NEG_INF])
                # a repeated label only extends from a blank-terminated path
                e[1] = _lse(e[1], (pb if k == last else total) + row[k])
        # prefixes no alignment can produce (e.g. a repeat with no blank yet) are dropped
        ranked = sorted(((p, v) for p, v in nxt.items() if _lse(*v) > NEG_INF / 2),
                        key=lambda kv: (-_lse(*kv[1]), kv[0]))
        beams = dict(ranked[:beam_width])
    ranked = sorted(((p, _lse(*v)) for p, v in beams.items()), key=lambda kv: (-kv[1], kv[0]))
    return ranked


def beam_decode(log_probs, alphabet: Alphabet, beam_width=200) -> str:
    best, _ = prefix_beam_search(log_probs, beam_width, alphabet.blank_index)[0]
    return alphabet.decode(best)


# ---------------------------------------------------------------------------
# spelling


def levenshtein(a, b) -> int:
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, 1):
        cur = [i]
        for j, y in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (x != y)))
        prev = cur
    return prev[-1]


def closest_word(token, dictionary):
    best = None
    for word in dictionary:
        key = (levenshtein(token, word), word)
        if best is None or key < best:
            best = key
    return best[1]


def spell_correct(text: str, dictionary) -> str:
    """Replace each token by its nearest dictionary word (ties: alphabetical)."""
    dictionary = sorted(set(dictionary or ()))
    if not dictionary:
        return text
    vocab = set(dictionary)
    return " ".join(w if w in vocab else closest_word(w, dictionary) for w in text.split())
