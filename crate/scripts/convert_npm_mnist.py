"""Convert the digit JSON files shipped in the `mnist` npm package (10,000
MNIST digits, 28x28, values in [0,1]) into gzipped IDX files laid out like
the upstream MNIST distribution: 8000 training and 2000 test samples.

usage: python3 scripts/convert_npm_mnist.py <npm-package-dir> <out-dir>
"""
import gzip
import json
import random
import struct
import sys
from pathlib import Path


def main(src: Path, out: Path) -> None:
    samples = []
    for digit in range(10):
        flat = json.loads((src / "src" / "digits" / f"{digit}.json").read_text())["data"]
        assert len(flat) % 784 == 0
        for i in range(len(flat) // 784):
            pixels = bytes(min(255, max(0, round(v * 255))) for v in flat[i * 784:(i + 1) * 784])
            samples.append((pixels, digit))
    random.Random(0).shuffle(samples)
    train, test = samples[:8000], samples[8000:]
    out.mkdir(parents=True, exist_ok=True)
    for prefix, part in (("train", train), ("t10k", test)):
        with gzip.GzipFile(out / f"{prefix}-images-idx3-ubyte.gz", "wb", mtime=0) as f:
            f.write(struct.pack(">IIII", 0x803, len(part), 28, 28))
            for pixels, _ in part:
                f.write(pixels)
        with gzip.GzipFile(out / f"{prefix}-labels-idx1-ubyte.gz", "wb", mtime=0) as f:
            f.write(struct.pack(">II", 0x801, len(part)))
            f.write(bytes(label for _, label in part))
    print(f"wrote {len(train)} train / {len(test)} test samples to {out}")


if __name__ == "__main__":
    main(Path(sys.argv[1]), Path(sys.argv[2]))
