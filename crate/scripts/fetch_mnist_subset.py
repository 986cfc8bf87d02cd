#!/usr/bin/env python3
"""Write a 5000-image MNIST subset as IDX files.

The images come from the `mlxtend` wheel on PyPI, which bundles the first
5000 MNIST training digits as a gzipped CSV (784 pixels + label per row).

    python3 scripts/fetch_mnist_subset.py [OUT_DIR]

Produces OUT_DIR/images-idx3-ubyte and OUT_DIR/labels-idx1-ubyte
(default OUT_DIR: data/mnist-5k).
"""
import gzip
import pathlib
import struct
import subprocess
import sys
import tempfile
import zipfile

MEMBER = "mlxtend/data/data/mnist_5k.csv.gz"


def main() -> None:
    out = pathlib.Path(sys.argv[1] if len(sys.argv) > 1 else "data/mnist-5k")
    out.mkdir(parents=True, exist_ok=True)
    with tempfile.TemporaryDirectory() as tmp:
        subprocess.run(
            [sys.executable, "-m", "pip", "download", "--no-deps", "-q",
             "-d", tmp, "mlxtend==0.24.0"],
            check=True,
        )
        wheel = next(pathlib.Path(tmp).glob("mlxtend-*.whl"))
        csv = gzip.decompress(zipfile.ZipFile(wheel).read(MEMBER)).decode()

    rows = [list(map(int, line.split(","))) for line in csv.strip().splitlines()]
    pixels = bytearray()
    labels = bytearray()
    for row in rows:
        assert len(row) == 785
        pixels.extend(row[:784])
        labels.append(row[784])

    n = len(rows)
    (out / "images-idx3-ubyte").write_bytes(struct.pack(">IIII", 0x803, n, 28, 28) + pixels)
    (out / "labels-idx1-ubyte").write_bytes(struct.pack(">II", 0x801, n) + labels)
    print(f"wrote {n} images to {out}")


if __name__ == "__main__":
    main()
