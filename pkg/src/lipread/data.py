"""Grid-grammar sentences, synthetic lip video, augmentation, curriculum and dataset I/O."""
from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

HEIGHT, WIDTH, CHANNELS = 100, 50, 3
FPS = 25
CLIP_MAGIC = b"LVID"
CLIP_VERSION = 1
MANIFEST = "manifest.jsonl"


class DatasetError(RuntimeError):
    pass


@dataclass
class VideoSample:
    id: str
    frames: np.ndarray  # N x H x W x C, values in [0, 1]
    transcript: list
    word_spans: list | None = None  # per-word (start, end), end exclusive
    speaker: int | None = None

    def __post_init__(self):
        if self.frames.ndim != 4 or self.frames.shape[0] < 1:
            raise ValueError(f"{self.id}: frames must be N x H x W x C with N >= 1")
        if self.word_spans is not None:
            self.word_spans = [tuple(int(v) for v in s) for s in self.word_spans]
            prev = 0
            for start, end in self.word_spans:
                if not (prev <= start <= end <= self.num_frames):
                    raise ValueError(f"{self.id}: word spans must be ordered, disjoint and inside the clip")
                prev = end

    @property
    def num_frames(self):
        return self.frames.shape[0]

    @property
    def text(self):
        return " ".join(self.transcript)


@dataclass(frozen=True)
class GridGrammar:
    commands: tuple = ("bin", "lay", "place", "set")
    colors: tuple = ("blue", "green", "red", "white")
    prepositions: tuple = ("at", "by", "in", "with")
    letters: tuple = tuple("abcdefghijklmnopqrstuvxyz")  # no 'w'
    digits: tuple = ("zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine")
    adverbs: tuple = ("again", "now", "please", "soon")

    @property
    def slots(self):
        return (self.commands, self.colors, self.prepositions, self.letters, self.digits, self.adverbs)

    @property
    def vocabulary(self):
        return sorted({w for slot in self.slots for w in slot})

    def slot_of(self, word):
        for k, slot in enumerate(self.slots):
            if word in slot:
                return k
        raise KeyError(word)

    def is_valid(self, words):
        return len(words) == 6 and all(w in slot for w, slot in zip(words, self.slots))


GRID = GridGrammar()


def generate_sentence(grammar: GridGrammar = GRID, seed=0):
    rng = np.random.default_rng(seed)
    return [slot[int(rng.integers(len(slot)))] for slot in grammar.slots]


def sample_rng(seed, key):
    """Independent stream per (global seed, sample id)."""
    return np.random.default_rng([int(seed), zlib.crc32(str(key).encode("utf-8"))])


# ---------------------------------------------------------------------------
# synthetic rendering


@dataclass
class RenderConfig:
    frames_per_word: int = 12
    lead_in: int = 2
    lead_out: int = 1
    noise: float = 0.0
    homopheme_map: dict = field(default_factory=dict)
    height: int = HEIGHT
    width: int = WIDTH

    def clip_length(self, n_words):
        return self.lead_in + n_words * self.frames_per_word + self.lead_out


BLOBS = 3


def _glyph_params(key):
    rng = np.random.default_rng(zlib.crc32(key.encode("utf-8")))
    return {
        "row": rng.uniform(25, 75, BLOBS),
        "row_amp": rng.uniform(6, 16, BLOBS),
        "offset": rng.uniform(2, 16, BLOBS),
        "offset_amp": rng.uniform(2, 7, BLOBS),
        "size": rng.uniform(4, 8, BLOBS),
        "size_amp": rng.uniform(0, 3, BLOBS),
        "freq": rng.choice([0.5, 1.0, 1.5], BLOBS),
        "phase": rng.uniform(0, 2 * np.pi, BLOBS),
        "color": rng.uniform(-0.45, 0.45, (BLOBS, 3)),
    }


_NEUTRAL = {
    "row": np.array([40.0, 50.0, 60.0]),
    "offset": np.array([10.0, 14.0, 10.0]),
    "size": np.array([5.0, 4.0, 5.0]),
    "color": np.array([[-0.2, -0.25, -0.2], [-0.3, -0.3, -0.3], [-0.2, -0.25, -0.2]]),
}


def _speaker_style(speaker):
    rng = np.random.default_rng([7919, int(speaker or 0)])
    return rng.uniform(0.45, 0.65, 3), rng.uniform(-3, 3)


def _draw(rows, offsets, sizes, colors, base, shift, height, width):
    """Mirror-symmetric Gaussian blob pairs; arrays are frames x blobs."""
    yy = np.arange(height, dtype=np.float64)[None, None, :, None]
    xx = np.arange(width, dtype=np.float64)[None, None, None, :]
    centre = (width - 1) / 2.0
    r = (rows + shift)[:, :, None, None]
    s2 = 2.0 * (sizes ** 2)[:, :, None, None]
    dy = (yy - r) ** 2
    left = np.exp(-(dy + (xx - (centre - offsets[:, :, None, None])) ** 2) / s2)
    right = np.exp(-(dy + (xx - (centre + offsets[:, :, None, None])) ** 2) / s2)
    mask = left + right  # frames x blobs x H x W
    img = np.einsum("kbhw,kbc->khwc", mask, colors)
    return img + base


def render_word(word, n_frames, config: RenderConfig = RenderConfig(), speaker=None):
    """Frames for one word; homophemes share their glyph via ``homopheme_map``."""
    key = config.homopheme_map.get(word, word)
    g = _glyph_params(key)
    s = (np.arange(n_frames) + 0.5) / n_frames
    ang = 2 * np.pi * np.outer(s, g["freq"]) + g["phase"]
    rows = g["row"] + g["row_amp"] * np.sin(ang)
    offsets = g["offset"] + g["offset_amp"] * np.cos(ang)
    sizes = g["size"] + g["size_amp"] * np.sin(ang + 1.0)
    colors = np.broadcast_to(g["color"], (n_frames, BLOBS, 3))
    base, shift = _speaker_style(speaker)
    return _draw(rows, offsets, sizes, colors, base, shift, config.height, config.width)


def _render_neutral(n_frames, config, speaker):
    base, shift = _speaker_style(speaker)
    tile = lambda a: np.broadcast_to(a, (n_frames, *a.shape))  # noqa: E731
    return _draw(tile(_NEUTRAL["row"]), tile(_NEUTRAL["offset"]), tile(_NEUTRAL["size"]),
                 tile(_NEUTRAL["color"]), base, shift, config.height, config.width)


def render_clip(sentence, config: RenderConfig = RenderConfig(), noise_seed=0, sample_id=None,
                speaker=None) -> VideoSample:
    """Deterministic synthetic clip: neutral lead-in, one glyph trajectory per word, lead-out."""
    if config.frames_per_word < 1:
        raise ValueError("frames_per_word must be >= 1")
    words = list(sentence)
    parts = [_render_neutral(config.lead_in, config, speaker)] if config.lead_in else []
    spans = []
    pos = config.lead_in
    for w in words:
        parts.append(render_word(w, config.frames_per_word, config, speaker))
        spans.append((pos, pos + config.frames_per_word))
        pos += config.frames_per_word
    if config.lead_out:
        parts.append(_render_neutral(config.lead_out, config, speaker))
    frames = np.concatenate(parts, axis=0)
    if config.noise > 0:
        rng = np.random.default_rng(noise_seed)
        frames = frames + config.noise * rng.standard_normal(frames.shape)
    frames = np.clip(frames, 0.0, 1.0).astype(np.float32)
    sid = sample_id if sample_id is not None else "-".join(words)
    return VideoSample(sid, frames, words, spans, speaker)


def make_homopheme_map(grammar: GridGrammar = GRID, rate=0.0, seed=0):
    """Pair up about ``rate`` of the vocabulary into glyph-sharing homophemes.

    Partners always come from different grammar slots, so sentence context
    can still tell them apart. Returns ``{word: glyph key}`` for collided words.
    """
    vocab = grammar.vocabulary
    k = int(round(rate * len(vocab)))
    if k < 2:
        return {}
    rng = np.random.default_rng(seed)
    order = [vocab[i] for i in rng.permutation(len(vocab))]
    chosen = []
    for w in order:
        if len(chosen) >= k - (k % 2):
            break
        chosen.append(w)
    mapping = {}
    pool = list(chosen)
    while len(pool) >= 2:
        a = pool.pop(0)
        partner = next((b for b in pool if grammar.slot_of(b) != grammar.slot_of(a)), None)
        if partner is None:
            break
        pool.remove(partner)
        mapping[a] = a
        mapping[partner] = a
    return mapping


# ---------------------------------------------------------------------------
# augmentation


def augment(sample: VideoSample, mirror=False, perturb_p=0.05, seed=0) -> VideoSample:
    """Horizontal mirroring plus random frame drop/repeat.

    Each frame is picked with probability ``perturb_p``; a picked frame is
    dropped or duplicated with equal chance. Word spans follow the frames.
    """
    frames = sample.frames[:, :, ::-1] if mirror else sample.frames
    n = sample.num_frames
    counts = np.ones(n, dtype=np.int64)
    if perturb_p > 0:
        rng = sample_rng(seed, sample.id)
        picked = rng.random(n) < perturb_p
        repeat = rng.random(n) < 0.5
        counts[picked & repeat] = 2
        counts[picked & ~repeat] = 0
        if counts.sum() == 0:
            counts[0] = 1
    if (counts == 1).all():
        out = np.ascontiguousarray(frames)
        spans = sample.word_spans
    else:
        out = np.repeat(frames, counts, axis=0)
        pos = np.concatenate([[0], np.cumsum(counts)])
        spans = None if sample.word_spans is None else [(int(pos[s]), int(pos[e])) for s, e in sample.word_spans]
    return VideoSample(sample.id, out, list(sample.transcript), spans, sample.speaker)


# ---------------------------------------------------------------------------
# curriculum


@dataclass(frozen=True)
class CurriculumSchedule:
    horizon: int = 20

    def probability(self, epoch):
        if epoch < 0:
            raise ValueError("epoch must be >= 0")
        return max(0.0, 1.0 - epoch / self.horizon)


def segment_words(sample: VideoSample):
    if sample.word_spans is None:
        raise DatasetError(f"{sample.id}: curriculum needs word spans")
    out = []
    for k, ((start, end), word) in enumerate(zip(sample.word_spans, sample.transcript)):
        if end > start:
            out.append(VideoSample(f"{sample.id}#w{k}", sample.frames[start:end], [word],
                                   [(0, end - start)], sample.speaker))
    return out


def curriculum_sample(dataset, epoch, schedule: CurriculumSchedule = CurriculumSchedule(), seed=0):
    """Training items for one epoch.

    Epoch 0 has segmented words only; later epochs have every full sentence
    plus each segmented word independently with probability p(epoch).
    """
    p = schedule.probability(epoch)
    rng = np.random.default_rng([int(seed), int(epoch), 104729])
    items = [] if epoch == 0 else list(dataset)
    for sample in dataset:
        for seg in segment_words(sample):
            if epoch == 0 or rng.random() < p:
                items.append(seg)
    return items


# ---------------------------------------------------------------------------
# files


def write_clip(path, frames):
    arr = np.ascontiguousarray(frames, dtype="<f4")
    if arr.ndim != 4:
        raise ValueError("clip must be N x H x W x C")
    with open(path, "wb") as f:
        f.write(CLIP_MAGIC)
        f.write(struct.pack("<H4I", CLIP_VERSION, *arr.shape))
        f.write(arr.tobytes())


def read_clip(path):
    with open(path, "rb") as f:
        if f.read(4) != CLIP_MAGIC:
            raise DatasetError(f"{path}: not a clip file")
        version, *dims = struct.unpack("<H4I", f.read(18))
        if version != CLIP_VERSION:
            raise DatasetError(f"{path}: unsupported clip version {version}")
        raw = f.read()
    count = int(np.prod(dims))
    if len(raw) != 4 * count:
        raise DatasetError(f"{path}: truncated clip")
    return np.frombuffer(raw, dtype="<f4").reshape(dims).astype(np.float32)


def save_dataset(directory, splits):
    """Write ``{split: [VideoSample, ...]}`` as clip files plus a manifest."""
    directory = Path(directory)
    (directory / "clips").mkdir(parents=True, exist_ok=True)
    lines = []
    for split, samples in splits.items():
        for s in samples:
            rel = f"clips/{s.id}.lvid"
            write_clip(directory / rel, s.frames)
            rec = {"id": s.id, "clip": rel, "transcript": list(s.transcript), "split": split}
            if s.word_spans is not None:
                rec["spans"] = [list(sp) for sp in s.word_spans]
            if s.speaker is not None:
                rec["speaker"] = s.speaker
            lines.append(json.dumps(rec, sort_keys=True))
    path = directory / MANIFEST
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def load_dataset(path, split=None):
    """Load samples from a manifest file (or a directory containing one)."""
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST
    if not path.exists():
        raise DatasetError(f"manifest not found: {path}")
    samples = []
    for line in path.read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        if split is not None and rec.get("split") != split:
            continue
        clip = path.parent / rec["clip"]
        if not clip.exists():
            raise DatasetError(f"sample {rec['id']!r}: clip file {clip} is missing")
        samples.append(VideoSample(rec["id"], read_clip(clip), rec["transcript"],
                                   rec.get("spans"), rec.get("speaker")))
    return samples


def split_by_speakers(samples, held_out):
    """Unseen-speaker split: every clip of a held-out speaker goes to test."""
    held = set(held_out)
    train = [s for s in samples if s.speaker not in held]
    test = [s for s in samples if s.speaker in held]
    return train, test


def split_seen(samples, per_speaker, seed=0):
    """Seen-speaker split: ``per_speaker`` random clips of each speaker go to test."""
    rng = np.random.default_rng(seed)
    by_speaker = {}
    for i, s in enumerate(samples):
        by_speaker.setdefault(s.speaker, []).append(i)
    test_idx = set()
    for spk in sorted(by_speaker, key=str):
        idx = by_speaker[spk]
        take = min(per_speaker, len(idx))
        test_idx.update(idx[j] for j in rng.choice(len(idx), size=take, replace=False))
    train = [s for i, s in enumerate(samples) if i not in test_idx]
    test = [s for i, s in enumerate(samples) if i in test_idx]
    return train, test


def synthetic_corpus(n, grammar: GridGrammar = GRID, config: RenderConfig = RenderConfig(), seed=0,
                     speakers=4, prefix="utt"):
    """``n`` rendered Grid sentences with ids ``{prefix}{k:05d}``."""
    out = []
    for k in range(n):
        sid = f"{prefix}{k:05d}"
        rng = sample_rng(seed, sid)
        words = generate_sentence(grammar, rng.integers(2 ** 31))
        out.append(render_clip(words, config, noise_seed=int(rng.integers(2 ** 31)), sample_id=sid,
                               speaker=k % speakers if speakers else None))
    return out
