"""Write the 5,000-image MNIST excerpt shipped inside the mlxtend wheel as IDX files.

Full MNIST is not reachable from the sandbox this project was built in; PyPI is.
mlxtend bundles ``mnist_5k.csv.gz`` (5,000 MNIST training images, 784 pixel
columns followed by the label).  This script pulls the wheel with pip (or uses
``--wheel``) and emits gzip'd IDX files the regular loader reads.

    python scripts/build_mnist5k.py --out data/mnist5k
"""

import argparse
import gzip
import io
import subprocess
import sys
import tempfile
import zipfile
from pathlib import Path

import numpy as np

from rotinv.ingest import write_idx

MEMBER = "mlxtend/data/data/mnist_5k.csv.gz"


def fetch_wheel(dest: Path) -> Path:
    subprocess.run([sys.executable, "-m", "pip", "download", "mlxtend", "--no-deps", "-q", "-d", str(dest)],
                   check=True)
    return next(dest.glob("mlxtend-*.whl"))


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--wheel", type=Path, help="local mlxtend wheel (downloaded when omitted)")
    ap.add_argument("--out", type=Path, default=Path("data/mnist5k"))
    ap.add_argument("--shuffle-seed", type=int, default=0)
    args = ap.parse_args(argv)

    with tempfile.TemporaryDirectory() as tmp:
        wheel = args.wheel or fetch_wheel(Path(tmp))
        raw = gzip.decompress(zipfile.ZipFile(wheel).read(MEMBER))
    table = np.loadtxt(io.BytesIO(raw), delimiter=",")
    images = table[:, :-1].reshape(-1, 28, 28).astype(np.uint8)
    labels = table[:, -1].astype(np.uint8)
    # the CSV is sorted by digit; a fixed shuffle makes file-order prefixes class-mixed like MNIST proper
    order = np.random.Generator(np.random.PCG64(args.shuffle_seed)).permutation(len(labels))
    images, labels = images[order], labels[order]

    args.out.mkdir(parents=True, exist_ok=True)
    for name, arr in (("train-images-idx3-ubyte.gz", images), ("train-labels-idx1-ubyte.gz", labels)):
        # mtime=0 keeps the gzip bytes reproducible
        (args.out / name).write_bytes(gzip.compress(write_idx(arr), mtime=0))
    print(f"wrote {len(labels)} images to {args.out} (class counts {np.bincount(labels).tolist()})")


if __name__ == "__main__":
    main()
