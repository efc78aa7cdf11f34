#!/usr/bin/env python3
"""Convert the digits bundled with the npm `mnist` package into IDX files.

Offline fallback for machines without the canonical MNIST archives. The npm
package ships 10,000 real MNIST digits as JSON, normalized to [0, 1] and
rounded to three decimals; rounding back to bytes recovers the originals.

The last `--test-per-class` digits of every class form the test split, the
rest form the train split. Output names follow the canonical layout, so the
result can be passed to `featloss --data-dir`.

    npm pack mnist && tar xzf mnist-*.tgz
    python3 scripts/mnist_from_npm.py package/src/digits data/mnist
"""

import argparse
import json
import struct
from pathlib import Path


def write_idx(out: Path, split: str, images, labels):
    prefix = "train" if split == "train" else "t10k"
    with open(out / f"{prefix}-images-idx3-ubyte", "wb") as f:
        f.write(struct.pack(">IIII", 0x00000803, len(images), 28, 28))
        for img in images:
            f.write(bytes(img))
    with open(out / f"{prefix}-labels-idx1-ubyte", "wb") as f:
        f.write(struct.pack(">II", 0x00000801, len(labels)))
        f.write(bytes(labels))


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("digits_dir", type=Path)
    ap.add_argument("out_dir", type=Path)
    ap.add_argument("--test-per-class", type=int, default=100)
    args = ap.parse_args()

    per_class = []
    for digit in range(10):
        data = json.loads((args.digits_dir / f"{digit}.json").read_text())["data"]
        assert len(data) % 784 == 0
        imgs = [
            [min(255, max(0, round(v * 255))) for v in data[i : i + 784]]
            for i in range(0, len(data), 784)
        ]
        per_class.append(imgs)

    # Interleave classes so a prefix of either split is roughly balanced.
    def interleave(groups):
        images, labels = [], []
        longest = max(len(g) for g in groups)
        for i in range(longest):
            for digit, g in enumerate(groups):
                if i < len(g):
                    images.append(g[i])
                    labels.append(digit)
        return images, labels

    k = args.test_per_class
    train = interleave([imgs[:-k] for imgs in per_class])
    test = interleave([imgs[-k:] for imgs in per_class])

    args.out_dir.mkdir(parents=True, exist_ok=True)
    write_idx(args.out_dir, "train", *train)
    write_idx(args.out_dir, "test", *test)
    print(f"train={len(train[1])} test={len(test[1])} -> {args.out_dir}")


if __name__ == "__main__":
    main()
