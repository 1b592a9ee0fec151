"""Turn per-frame network bottleneck outputs into 120-d features for an HMM back end.

Chain: bottleneck -> duplicate x4 -> CMVN -> splice +-5 -> LDA 40-d -> deltas.
Run: python demos/04_hybrid_features.py
"""
import numpy as np

from lipread import GRID, NetworkConfig, RenderConfig, build_network, synthetic_corpus
from lipread.features import clip_dct_features, fit_hybrid_lda, hybrid_prep


def frame_labels(sample, classes):
    # word identity per frame, silence elsewhere
    labels = np.full(sample.num_frames, classes["<sil>"])
    for (start, end), word in zip(sample.word_spans, sample.transcript):
        labels[start:end] = classes[word]
    return labels


def main():
    corpus = synthetic_corpus(60, GRID, RenderConfig(noise=0.02), seed=1)
    net = build_network(NetworkConfig(28), seed=0)  # full width: 48-d bottleneck
    feats = [net.bottleneck(s.frames) for s in corpus]
    print(f"bottleneck per clip: {feats[0].shape}")
    print(f"DCT baseline per clip: {clip_dct_features(corpus[0].frames).frames.shape}")

    classes = {w: k for k, w in enumerate(GRID.vocabulary + ["<sil>"])}
    lda = fit_hybrid_lda(feats, [frame_labels(s, classes) for s in corpus])
    print(f"LDA: {lda.projection.shape[1]}-d spliced input -> {lda.out_dim}-d, "
          f"{lda.class_count} classes")
    print(f"top LDA eigenvalues: {np.round(lda.eigenvalues[:5], 2)}")

    final = hybrid_prep(feats[0], lda)
    print(f"final features: {final.frames.shape} at {final.frame_rate:g} frames/s")


if __name__ == "__main__":
    main()
