"""ADAM, the CTC training loop, decoding-based evaluation and WER/CER."""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import ctc
from .ctc import Alphabet
from .data import CurriculumSchedule, augment, curriculum_sample
from .network import (Checkpoint, Network, checkpoint_from_model, load_into, save_checkpoint)

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# optimiser


def adam_step(params, grads, state, lr=1e-4, t=None, beta1=0.9, beta2=0.999, eps=1e-8):
    """Bias-corrected ADAM update, in place.

    ``params``/``grads`` map names to arrays; ``state`` holds ``m``, ``v``
    (dicts of arrays) and the step counter ``t``.
    """
    m = state.setdefault("m", {})
    v = state.setdefault("v", {})
    t = state.get("t", 0) + 1 if t is None else t
    state["t"] = t
    c1 = 1 - beta1 ** t
    c2 = 1 - beta2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        mi = m.setdefault(name, np.zeros_like(p))
        vi = v.setdefault(name, np.zeros_like(p))
        mi *= beta1
        mi += (1 - beta1) * g
        vi *= beta2
        vi += (1 - beta2) * g * g
        p -= (lr * (mi / c1) / (np.sqrt(vi / c2) + eps)).astype(p.dtype)
    return params, state


# ---------------------------------------------------------------------------
# metrics


def edit_distance(a, b):
    """Unit-cost Levenshtein distance with a substitution/deletion/insertion breakdown.

    ``a`` is the reference, ``b`` the hypothesis.
    """
    a, b = list(a), list(b)
    n, m = len(a), len(b)
    d = np.zeros((n + 1, m + 1), dtype=np.int64)
    d[:, 0] = np.arange(n + 1)
    d[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            d[i, j] = min(d[i - 1, j] + 1, d[i, j - 1] + 1, d[i - 1, j - 1] + (a[i - 1] != b[j - 1]))
    ops = {"S": 0, "D": 0, "I": 0}
    i, j = n, m
    while i or j:
        if i and j and d[i, j] == d[i - 1, j - 1] + (a[i - 1] != b[j - 1]):
            ops["S"] += a[i - 1] != b[j - 1]
            i, j = i - 1, j - 1
        elif i and d[i, j] == d[i - 1, j] + 1:
            ops["D"] += 1
            i -= 1
        else:
            ops["I"] += 1
            j -= 1
    return int(d[n, m]), ops


def word_error_rate(references, hypotheses):
    errs = sum(edit_distance(r.split(), h.split())[0] for r, h in zip(references, hypotheses))
    total = sum(len(r.split()) for r in references)
    return errs / max(total, 1)


def char_error_rate(references, hypotheses):
    errs = sum(edit_distance(r, h)[0] for r, h in zip(references, hypotheses))
    total = sum(len(r) for r in references)
    return errs / max(total, 1)


def format_wer(rate):
    return f"{100 * rate:.1f}%"


@dataclass
class EvalReport:
    wer: float
    cer: float
    references: list
    hypotheses: list
    ids: list = field(default_factory=list)
    ops: list = field(default_factory=list)

    def summary(self):
        return f"WER {format_wer(self.wer)}  CER {format_wer(self.cer)}  ({len(self.references)} utterances)"

    def to_records(self, epoch=None, split="test"):
        head = {"epoch": epoch, "split": split, "loss": None, "wer": self.wer, "cer": self.cer}
        rows = [head]
        for uid, r, h, o in zip(self.ids, self.references, self.hypotheses, self.ops):
            rows.append({"id": uid, "ref": r, "hyp": h, **o})
        return rows


def report_from_texts(references, hypotheses, ids=None):
    ops = [edit_distance(r.split(), h.split())[1] for r, h in zip(references, hypotheses)]
    return EvalReport(word_error_rate(references, hypotheses), char_error_rate(references, hypotheses),
                      list(references), list(hypotheses), list(ids or []), ops)


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 32
    max_epochs: int = 40
    seed: int = 0
    label_mode: str = "char"
    curriculum: bool = False
    beam_width: int = 200
    mirror: bool = True
    perturb_p: float = 0.05
    clip_norm: float | None = None
    patience: int = 5
    target_loss: float | None = None

    def __post_init__(self):
        if self.label_mode not in ("char", "word"):
            raise ValueError("label_mode must be 'char' or 'word'")
        for name in ("learning_rate", "batch_size", "max_epochs", "beam_width"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    curve: list
    epochs_run: int


def make_alphabet(label_mode, transcripts) -> Alphabet:
    """Character (28 labels) or word (V + 2 labels) alphabet for a corpus."""
    vocab = sorted({w for t in transcripts for w in (t.split() if isinstance(t, str) else t)})
    if label_mode in ("char", "character"):
        return ctc.char_alphabet(vocab)
    return ctc.build_word_alphabet(transcripts)


def _length_groups(samples):
    groups = {}
    for s in samples:
        groups.setdefault(s.num_frames, []).append(s)
    return [groups[n] for n in sorted(groups)]


def _stack(samples):
    return np.stack([s.frames for s in samples])


def batch_loss_and_grad(model: Network, samples, alphabet: Alphabet, batch_id=None):
    """Forward/backward over a batch of variable-length clips.

    Equal-length clips share a tensor; nothing is padded. Gradients are
    accumulated on the parameters for the batch-mean CTC loss.
    """
    total = len(samples)
    losses = []
    for group in _length_groups(samples):
        targets = [alphabet.encode(s.transcript) for s in group]
        try:
            logits = model.logits(_stack(group), training=True)
            loss = ctc.ctc_batch_loss(logits, targets, alphabet.blank_index)
            value = float(loss.data)
            if not np.isfinite(value):
                raise FloatingPointError("loss")
            loss.backward(np.asarray(len(group) / total))
        except FloatingPointError as exc:
            raise TrainingError(f"non-finite values in batch {batch_id}: {exc}") from exc
        losses.extend([value] * len(group))
    return float(np.mean(losses))


def sequence_loss(model: Network, samples, alphabet: Alphabet):
    """Mean inference-mode CTC loss (no gradient)."""
    losses = []
    for group in _length_groups(samples):
        lp = model.forward(_stack(group), training=False).data
        for row, s in zip(lp, group):
            losses.append(ctc.ctc_loss(row, alphabet.encode(s.transcript), alphabet.blank_index)[0])
    return float(np.mean(losses))


def _clip_gradients(params, max_norm):
    norm = np.sqrt(sum(float((p.grad.astype(np.float64) ** 2).sum()) for p in params if p.grad is not None))
    if norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad *= scale
    return norm


def _optim_tensors(state):
    out = {}
    for key in ("m", "v"):
        for name, arr in state.get(key, {}).items():
            out[f"optim.{key}.{name}"] = arr
    return out


def _optim_from_tensors(tensors, t):
    state = {"m": {}, "v": {}, "t": int(t)}
    for name, arr in tensors.items():
        for key in ("m", "v"):
            prefix = f"optim.{key}."
            if name.startswith(prefix):
                state[key][name[len(prefix):]] = np.array(arr)
    return state


def train(model: Network, dataset, config: TrainConfig, alphabet: Alphabet | None = None,
          val_dataset=None, out=None, log_path=None, resume: Checkpoint | None = None) -> TrainResult:
    """CTC training with ADAM; returns the final checkpoint and the loss curve.

    ``val_dataset`` (optional) is scored every epoch: inference-mode loss
    and greedy-decoding WER, used for the ``target_loss`` stop and the
    patience-based early stop.
    """
    dataset = list(dataset)
    if alphabet is None:
        alphabet = make_alphabet(config.label_mode, [s.transcript for s in dataset])
    if alphabet.labels and len(alphabet) != model.config.label_count:
        raise TrainingError(f"alphabet has {len(alphabet)} labels, network outputs {model.config.label_count}")
    schedule = CurriculumSchedule()
    opt_state = {}
    start = 0
    curve = []
    if resume is not None:
        load_into(model, resume)
        opt_state = _optim_from_tensors(resume.tensors, resume.meta.get("adam_t", 0))
        start = resume.epoch + 1
        curve = list(resume.meta.get("curve", []))
    log_file = open(log_path, "a", encoding="utf-8") if log_path else None
    best_wer, best_vloss, stale = np.inf, np.inf, 0
    epoch = start - 1
    ckpt = None
    try:
        for epoch in range(start, config.max_epochs):
            rng = np.random.default_rng([config.seed, epoch])
            items = curriculum_sample(dataset, epoch, schedule, config.seed) if config.curriculum else list(dataset)
            order = rng.permutation(len(items))
            epoch_losses = []
            for b0 in range(0, len(order), config.batch_size):
                batch = []
                for i in order[b0:b0 + config.batch_size]:
                    mirror = config.mirror and bool(rng.random() < 0.5)
                    batch.append(augment(items[i], mirror=mirror, perturb_p=config.perturb_p,
                                         seed=int(rng.integers(2 ** 31))))
                batch = [s for s in batch if s.num_frames >= ctc.min_frames(alphabet.encode(s.transcript))]
                if not batch:
                    continue
                model.zero_grad()
                batch_id = f"epoch{epoch}/batch{b0 // config.batch_size}"
                loss = batch_loss_and_grad(model, batch, alphabet, batch_id)
                if config.clip_norm:
                    _clip_gradients(model.params.values(), config.clip_norm)
                adam_step({k: p.data for k, p in model.params.items()},
                          {k: p.grad for k, p in model.params.items()}, opt_state, config.learning_rate)
                epoch_losses.extend([loss] * len(batch))
            rec = {"epoch": epoch, "split": "train", "loss": float(np.mean(epoch_losses)), "wer": None, "cer": None}
            curve.append(rec)
            records = [rec]
            stop = False
            if val_dataset:
                vloss = sequence_loss(model, val_dataset, alphabet)
                report = evaluate(model, val_dataset, alphabet, beam_width=None, spell=False)
                vrec = {"epoch": epoch, "split": "val", "loss": vloss, "wer": report.wer, "cer": report.cer}
                curve.append(vrec)
                records.append(vrec)
                # a plateau means neither WER nor validation loss improved
                if report.wer < best_wer - 1e-12 or vloss < best_vloss - 1e-6:
                    stale = 0
                else:
                    stale += 1
                best_wer, best_vloss = min(best_wer, report.wer), min(best_vloss, vloss)
                if config.target_loss is not None and vloss <= config.target_loss:
                    stop = True
                if stale >= config.patience:
                    stop = True
            log.info("epoch %d: %s", epoch, records)
            if log_file:
                for r in records:
                    log_file.write(json.dumps(r, sort_keys=True) + "\n")
                log_file.flush()
            ckpt = _checkpoint(model, epoch, alphabet, opt_state, config, curve)
            if out:
                save_checkpoint(out, ckpt)
            if stop:
                break
    finally:
        if log_file:
            log_file.close()
    if ckpt is None:
        ckpt = _checkpoint(model, epoch, alphabet, opt_state, config, curve)
    return TrainResult(ckpt, curve, epoch + 1 - start)


def _checkpoint(model, epoch, alphabet, opt_state, config, curve):
    meta = {"adam_t": int(opt_state.get("t", 0)), "train_config": asdict(config), "curve": curve}
    return checkpoint_from_model(model, epoch, alphabet.descriptor(), _optim_tensors(opt_state), meta)


# ---------------------------------------------------------------------------
# evaluation


def decode_dataset(model: Network, dataset, alphabet: Alphabet, beam_width=200):
    """Hypothesis text per clip; ``beam_width=None`` selects greedy best-path decoding."""
    hyps = {}
    for group in _length_groups(list(dataset)):
        lp = model.forward(_stack(group), training=False).data
        for row, s in zip(lp, group):
            if beam_width is None:
                hyps[s.id] = ctc.greedy_decode(row, alphabet)
            else:
                hyps[s.id] = ctc.beam_decode(row, alphabet, beam_width)
    return [hyps[s.id] for s in dataset]


def evaluate(model: Network, dataset, alphabet: Alphabet, beam_width=200, spell=True) -> EvalReport:
    """Decode every clip and score WER/CER.

    Spell correction (nearest dictionary word) applies to character mode only.
    """
    dataset = list(dataset)
    hyps = decode_dataset(model, dataset, alphabet, beam_width)
    if spell and alphabet.mode == "character" and alphabet.dictionary:
        hyps = [ctc.spell_correct(h, alphabet.dictionary) for h in hyps]
    refs = [s.text for s in dataset]
    return report_from_texts(refs, hyps, [s.id for s in dataset])


def write_records(path, records):
    with open(path, "a", encoding="utf-8") as f:
        for r in records:
            f.write(json.dumps(r, sort_keys=True) + "\n")


def save_report(path, report: EvalReport):
    Path(path).write_text(json.dumps(asdict(report), sort_keys=True, indent=1), encoding="utf-8")
