#!/usr/bin/env python3
"""Build an IDX-format MNIST subset from the 10,000 digits shipped in the `mnist` npm package.

Writes train/t10k image and label files into <root>/mnist/ in the layout the
loader expects. The split is a seeded shuffle, so reruns are byte-identical.
"""

import argparse
import json
import random
import struct
import subprocess
import sys
import tarfile
import tempfile
from pathlib import Path

PACKAGE = "mnist@1.1.0"
PIXELS = 28 * 28


def fetch_digits(workdir: Path) -> list[tuple[bytes, int]]:
    subprocess.run(["npm", "pack", PACKAGE, "--silent"], cwd=workdir, check=True, stdout=subprocess.DEVNULL)
    archive = next(workdir.glob("mnist-*.tgz"))
    samples = []
    with tarfile.open(archive) as tar:
        for label in range(10):
            member = tar.extractfile(f"package/src/digits/{label}.json")
            values = json.load(member)["data"]
            if len(values) % PIXELS:
                sys.exit(f"digit file {label} has {len(values)} values, not a multiple of {PIXELS}")
            for start in range(0, len(values), PIXELS):
                img = bytes(min(255, max(0, round(v * 255))) for v in values[start:start + PIXELS])
                samples.append((img, label))
    return samples


def write_idx(prefix: Path, samples: list[tuple[bytes, int]]) -> None:
    with open(f"{prefix}-images-idx3-ubyte", "wb") as f:
        f.write(struct.pack(">IIII", 0x803, len(samples), 28, 28))
        for img, _ in samples:
            f.write(img)
    with open(f"{prefix}-labels-idx1-ubyte", "wb") as f:
        f.write(struct.pack(">II", 0x801, len(samples)))
        f.write(bytes(label for _, label in samples))


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--root", default="data", help="data root; files go to <root>/mnist")
    ap.add_argument("--test", type=int, default=2000, help="images held out for the test split")
    ap.add_argument("--seed", type=int, default=20200611)
    args = ap.parse_args()

    with tempfile.TemporaryDirectory() as tmp:
        samples = fetch_digits(Path(tmp))
    random.Random(args.seed).shuffle(samples)
    if not 0 < args.test < len(samples):
        sys.exit(f"--test must be in (0, {len(samples)})")
    out = Path(args.root) / "mnist"
    out.mkdir(parents=True, exist_ok=True)
    write_idx(out / "train", samples[args.test:])
    write_idx(out / "t10k", samples[:args.test])
    print(f"wrote {len(samples) - args.test} train / {args.test} test images to {out}")


if __name__ == "__main__":
    main()
