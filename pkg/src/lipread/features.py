"""Feature chain for the hybrid (BLSTM-HMM) model.

bottleneck or DCT frames -> duplicate x4 -> CMVN -> splice +-5 -> LDA (40-d)
-> append deltas and delta-deltas (120-d).
"""
from __future__ import annotations

import json
import struct
import warnings
from dataclasses import dataclass

import numpy as np
import scipy.fft
import scipy.linalg

LUMA = np.array([0.299, 0.587, 0.114])
DCT_BLOCK = 10
DUPLICATION = 4
SPLICE_RADIUS = 5
LDA_DIM = 40
DELTA_WINDOW = 2
CMVN_EPS = 1e-10


@dataclass
class FeatureSequence:
    frames: np.ndarray
    frame_rate: float = 25.0
    provenance: str = "bottleneck"

    def __post_init__(self):
        self.frames = np.atleast_2d(np.asarray(self.frames))
        if self.frames.ndim != 2 or self.frames.shape[0] < 1:
            raise ValueError("a feature sequence needs at least one frame of fixed dimension")

    def __len__(self):
        return self.frames.shape[0]

    @property
    def dim(self):
        return self.frames.shape[1]


@dataclass
class LdaTransform:
    projection: np.ndarray  # out_dim x in_dim, rows by descending eigenvalue
    mean: np.ndarray
    class_count: int
    splice_radius: int = SPLICE_RADIUS
    eigenvalues: np.ndarray | None = None

    @property
    def out_dim(self):
        return self.projection.shape[0]

    def apply(self, spliced):
        return (np.asarray(spliced) - self.mean) @ self.projection.T

    def tensors(self):
        """Named arrays for storage in the checkpoint tensor format."""
        return {
            "lda.projection": self.projection,
            "lda.mean": self.mean,
            "lda.meta": np.array([self.class_count, self.splice_radius], dtype=np.float32),
        }

    @classmethod
    def from_tensors(cls, t):
        classes, radius = (int(v) for v in t["lda.meta"])
        return cls(np.asarray(t["lda.projection"], dtype=np.float64),
                   np.asarray(t["lda.mean"], dtype=np.float64), classes, radius)


def to_grayscale(image):
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 3:
        if image.shape[-1] != 3:
            raise ValueError(f"expected an RGB image, got {image.shape[-1]} channels")
        return image @ LUMA
    return image


def dct_features(image, block=DCT_BLOCK, shape=(100, 50)):
    """Top-left ``block x block`` coefficients of the orthonormal 2-D DCT-II."""
    gray = to_grayscale(image)
    if gray.shape != tuple(shape):
        raise ValueError(f"expected a {shape[0]}x{shape[1]} image, got {gray.shape}")
    coeffs = scipy.fft.dctn(gray, type=2, norm="ortho")
    return coeffs[:block, :block].reshape(-1)


def clip_dct_features(frames, block=DCT_BLOCK) -> FeatureSequence:
    rows = [dct_features(f, block, shape=np.shape(f)[:2]) for f in frames]
    return FeatureSequence(np.stack(rows), provenance="dct")


def duplicate_frames(seq, factor=DUPLICATION):
    """Repeat every frame ``factor`` times in place, so length l becomes factor*l."""
    if factor < 1:
        raise ValueError("factor must be >= 1")
    return np.repeat(np.asarray(seq), factor, axis=0)


def cmvn(seq, eps=CMVN_EPS):
    """Per-utterance mean/variance normalisation; constant dimensions map to 0."""
    x = np.asarray(seq, dtype=np.float64)
    centred = x - x.mean(axis=0)
    var = (centred ** 2).mean(axis=0)
    scale = np.where(var > eps, 1.0 / np.sqrt(np.maximum(var, eps)), 0.0)
    return centred * scale


def splice(seq, radius=SPLICE_RADIUS):
    """Stack each frame with ``radius`` neighbours per side, edges repeated."""
    x = np.asarray(seq)
    n = x.shape[0]
    idx = np.clip(np.arange(n)[:, None] + np.arange(-radius, radius + 1)[None, :], 0, n - 1)
    return x[idx].reshape(n, -1)


def _scatter(x, y):
    classes = np.unique(y)
    mean = x.mean(axis=0)
    d = x.shape[1]
    sw = np.zeros((d, d))
    sb = np.zeros((d, d))
    for c in classes:
        xc = x[y == c]
        mc = xc.mean(axis=0)
        dc = xc - mc
        sw += dc.T @ dc
        diff = (mc - mean)[:, None]
        sb += len(xc) * (diff @ diff.T)
    return sw, sb, mean, len(classes)


def fit_lda(spliced, labels, out_dim=LDA_DIM, splice_radius=SPLICE_RADIUS, ridge=1e-6) -> LdaTransform:
    """Fisher LDA: generalized eigenvectors of between- vs within-class scatter.

    Projection rows are Sw-orthonormal (P Sw P^T = I).
    """
    x = np.asarray(spliced, dtype=np.float64)
    y = np.asarray(labels)
    if x.shape[0] != y.shape[0]:
        raise ValueError("one label per frame required")
    sw, sb, mean, n_classes = _scatter(x, y)
    d = x.shape[1]
    sw = sw + ridge * np.trace(sw) / d * np.eye(d)
    limit = min(n_classes - 1, d)
    if out_dim > limit:
        warnings.warn(f"LDA output reduced from {out_dim} to {limit} "
                      f"({n_classes} classes, {d} input dims)", stacklevel=2)
        out_dim = limit
    evals, evecs = scipy.linalg.eigh(sb, sw)
    order = np.argsort(evals)[::-1][:out_dim]
    proj = evecs[:, order].T
    # fix sign so the largest-magnitude entry of each row is positive
    signs = np.sign(proj[np.arange(out_dim), np.abs(proj).argmax(axis=1)])
    proj *= signs[:, None]
    return LdaTransform(proj, mean, n_classes, splice_radius, evals[order])


def fisher_criterion(x, labels, projection=None):
    """trace(Sw^-1 Sb) of (optionally projected) data."""
    x = np.asarray(x, dtype=np.float64)
    if projection is not None:
        x = x @ np.asarray(projection).T
    sw, sb, _, _ = _scatter(x, np.asarray(labels))
    return float(np.trace(np.linalg.solve(sw, sb)))


def add_deltas(seq, window=DELTA_WINDOW):
    """Append regression deltas and delta-deltas: [static, delta, delta-delta]."""
    x = np.asarray(seq, dtype=np.float64)
    d1 = _delta(x, window)
    d2 = _delta(d1, window)
    return np.concatenate([x, d1, d2], axis=1)


def _delta(x, window):
    n = x.shape[0]
    denom = 2 * sum(k * k for k in range(1, window + 1))
    out = np.zeros_like(x)
    idx = np.arange(n)
    for k in range(1, window + 1):
        out += k * (x[np.minimum(idx + k, n - 1)] - x[np.maximum(idx - k, 0)])
    return out / denom


def prepare_for_lda(seq, factor=DUPLICATION, radius=SPLICE_RADIUS):
    """duplicate -> CMVN -> splice; the LDA input for one utterance."""
    return splice(cmvn(duplicate_frames(seq, factor)), radius)


def fit_hybrid_lda(sequences, frame_labels, out_dim=LDA_DIM, factor=DUPLICATION,
                   radius=SPLICE_RADIUS) -> LdaTransform:
    """Fit the LDA stage on a corpus of (unduplicated) frame sequences.

    ``frame_labels`` gives one class id per original frame; labels are
    duplicated alongside the frames.
    """
    xs = [prepare_for_lda(np.asarray(s.frames if isinstance(s, FeatureSequence) else s), factor, radius)
          for s in sequences]
    ys = [np.repeat(np.asarray(lab), factor) for lab in frame_labels]
    return fit_lda(np.concatenate(xs), np.concatenate(ys), out_dim, radius)


def hybrid_prep(seq, lda: LdaTransform, factor=DUPLICATION) -> FeatureSequence:
    """bottleneck sequence (l x D) -> final (factor*l x 3*lda_dim) features."""
    if isinstance(seq, FeatureSequence):
        rate = seq.frame_rate
        seq = seq.frames
    else:
        rate = 25.0
    spliced = prepare_for_lda(seq, factor, lda.splice_radius)
    if spliced.shape[1] != lda.projection.shape[1]:
        raise ValueError(f"spliced dim {spliced.shape[1]} does not match LDA input {lda.projection.shape[1]}")
    return FeatureSequence(add_deltas(lda.apply(spliced)), rate * factor, "final")


# ---------------------------------------------------------------------------
# feature archive

ARCHIVE_MAGIC = b"LFEA"
ARCHIVE_VERSION = 1


def write_archive(path, items):
    """``items``: iterable of (utterance id, l x D array)."""
    items = list(items)
    with open(path, "wb") as f:
        f.write(ARCHIVE_MAGIC)
        f.write(struct.pack("<HI", ARCHIVE_VERSION, len(items)))
        for uid, frames in items:
            arr = np.ascontiguousarray(frames, dtype="<f4")
            raw = uid.encode("utf-8")
            f.write(struct.pack("<H", len(raw)))
            f.write(raw)
            f.write(struct.pack("<II", *arr.shape))
            f.write(arr.tobytes())


def read_archive(path):
    out = []
    with open(path, "rb") as f:
        if f.read(4) != ARCHIVE_MAGIC:
            raise ValueError(f"{path}: not a feature archive")
        version, count = struct.unpack("<HI", f.read(6))
        if version != ARCHIVE_VERSION:
            raise ValueError(f"{path}: unsupported archive version {version}")
        for _ in range(count):
            (n,) = struct.unpack("<H", f.read(2))
            uid = f.read(n).decode("utf-8")
            rows, dim = struct.unpack("<II", f.read(8))
            arr = np.frombuffer(f.read(4 * rows * dim), dtype="<f4").reshape(rows, dim)
            out.append((uid, arr.astype(np.float32)))
    return out


def save_lda(path, lda: LdaTransform):
    """Store an LDA transform in the checkpoint container format."""
    from .network import FORMAT_VERSION, MAGIC, write_tensors

    blob = json.dumps({"kind": "lda", "out_dim": lda.out_dim}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<HI", FORMAT_VERSION, len(blob)))
        f.write(blob)
        write_tensors(f, lda.tensors())


def load_lda(path) -> LdaTransform:
    from .network import _read_header, read_tensors

    with open(path, "rb") as f:
        header = _read_header(f)
        if header.get("kind") != "lda":
            raise ValueError(f"{path}: not an LDA transform")
        return LdaTransform.from_tensors(read_tensors(f))
