"""Write a synthetic ``<root>/<identity>/<n>.pgm`` tree for exercising the face loader.

The images are smooth random blobs, not faces; they exist so the crop, pad
and identity-split path can be run end to end without the real corpus.

    python scripts/make_face_tree.py --out /tmp/faces --identities 40
"""

import argparse
from pathlib import Path

import numpy as np

from rotinv.ingest import write_pgm


def blob_image(rng, side):
    yy, xx = np.mgrid[:side, :side] / side
    img = np.zeros((side, side))
    for _ in range(6):
        cy, cx = rng.uniform(0.25, 0.75, 2)
        w = rng.uniform(0.03, 0.12)
        img += rng.uniform(0.3, 1.0) * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * w * w))
    return np.clip(0.05 + img / img.max(), 0, 1)


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--identities", type=int, default=40)
    p.add_argument("--max-per-identity", type=int, default=6)
    p.add_argument("--side", type=int, default=250)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args(argv)

    rng = np.random.default_rng(args.seed)
    total = 0
    for k in range(args.identities):
        d = args.out / f"person_{k:04d}"
        d.mkdir(parents=True, exist_ok=True)
        for j in range(int(rng.integers(1, args.max_per_identity + 1))):
            write_pgm(d / f"{j:04d}.pgm", blob_image(rng, args.side))
            total += 1
    print(f"wrote {total} images for {args.identities} identities under {args.out}")


if __name__ == "__main__":
    main()
