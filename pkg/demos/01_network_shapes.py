"""Walk a clip through the 3D-2D-CNN-BLSTM network and print every layer's output size.

Run: python demos/01_network_shapes.py [--frames 75] [--scale 1]
"""
import argparse
from fractions import Fraction

import numpy as np

from lipread import NetworkConfig, build_network


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--frames", type=int, default=75)
    ap.add_argument("--scale", type=Fraction, default=Fraction(1))
    ap.add_argument("--labels", type=int, default=28)
    args = ap.parse_args()

    config = NetworkConfig(args.labels, width_scale=args.scale)
    net = build_network(config, seed=0)
    print(f"scale {config.width_scale}: conv widths {config.widths}, LSTM hidden {config.hidden}, "
          f"bottleneck {config.bottleneck_dim}-d")
    print(f"trainable parameters: {net.parameter_count():,}")

    # the network sees one clip of N frames; taps collects intermediate outputs
    clip = np.random.default_rng(0).random((args.frames, 100, 50, 3), dtype=np.float32)
    taps = {}
    out = net.forward(clip, taps=taps)
    print(f"\n{'layer':<10} output size")
    for name, value in taps.items():
        print(f"{name:<10} {' x '.join(map(str, value.shape[1:]))}")

    # each row of the output is a distribution over labels (blank last)
    rows = np.exp(out.data).sum(axis=-1)
    print(f"\nrows sum to 1: {np.allclose(rows, 1, atol=1e-5)}")


if __name__ == "__main__":
    main()
