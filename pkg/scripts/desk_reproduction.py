"""Run the desk-scale experiments through the CLI and print a results table.

Digits come from ``data/mnist5k`` unless ``--data-dir`` holds ``mnist/``;
the cross-dataset and face runs happen only when ``fashion-mnist/`` and
``lfw/`` are present there as well.

    python scripts/desk_reproduction.py --out runs/desk
"""

import argparse
import json
from pathlib import Path

from rotinv import cli, ingest

REPO = Path(__file__).resolve().parents[1]


def idx_entry(root, limit=10_000):
    if root.is_dir() and ingest.find_idx_corpus(root) is not None:
        return {"format": "idx-dir", "root": str(root), "limit": limit}
    return None


def run(m, *commands):
    out = Path(m["out"])
    out.mkdir(parents=True, exist_ok=True)
    path = out / "desk-manifest.json"
    path.write_text(json.dumps(m, indent=1))
    for cmd in commands:
        code = cli.main([cmd[0], "--manifest", str(path), *cmd[1:]])
        if code:
            raise SystemExit(f"rotinv {' '.join(cmd)} failed with exit code {code}")
    return out


def aucs(out):
    return {mk: json.loads((out / "eval" / mk / "summary.json").read_text())["auc"] for mk in ("vanilla", "invariant")}


TRAIN = [("train", "--model", "vanilla"), ("train", "--model", "invariant")]


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", type=Path, default=REPO / "runs" / "desk")
    p.add_argument("--data-dir", type=Path, default=REPO / "data" / "external")
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--skip-sweep", action="store_true")
    args = p.parse_args(argv)

    out = args.out.resolve()
    digits = idx_entry(args.data_dir / "mnist") or {"format": "idx-dir", "root": str(REPO / "data" / "mnist5k")}
    base = {"seed": args.seed, "datasets": {"digits": digits},
            "split": {"mode": "by-class-list", "train_classes": [0, 1, 2, 3, 4]},
            "train": {"dataset": "digits", "epochs": args.epochs, "latent_dim": 10},
            "eval": {"n_pos": 10_000, "n_neg": 10_000}}
    rows = []

    a = aucs(run({**base, "experiment": "digits", "out": str(out / "digits")}, *TRAIN, ("eval",)))
    rows.append(("unseen digits 5-9", a))

    if not args.skip_sweep:
        m = {**base, "experiment": "sweep", "out": str(out / "sweep"), "sweep": {"n_train_classes": [1, 2, 3, 4, 5]}}
        run(m, ("sweep",))
        print((out / "sweep" / "sweep" / "series.csv").read_text())

    m = {**base, "experiment": "latent2", "out": str(out / "latent2"), "viz": {"n": 2000},
         "train": {**base["train"], "latent_dim": 2}}
    run(m, *TRAIN, ("viz",))
    for s in json.loads((out / "latent2" / "figures" / "latent2" / "latent_stats.json").read_text()):
        print(f"latent2 {s['model']:9s} {s['domain']}: angle corr {s['angle_correlation']:.3f}, "
              f"silhouette {s['silhouette']:.3f}")

    fashion = idx_entry(args.data_dir / "fashion-mnist")
    if fashion is not None:
        for src, dst in (("digits", "fashion"), ("fashion", "digits")):
            m = {"experiment": f"{src}_to_{dst}", "out": str(out / f"{src}_to_{dst}"), "seed": args.seed,
                 "datasets": {"digits": digits, "fashion": fashion},
                 "train": {"dataset": src, "epochs": args.epochs, "latent_dim": 10},
                 "eval": {"dataset": dst, "n_pos": 10_000, "n_neg": 10_000}}
            rows.append((f"{src} -> {dst}", aucs(run(m, *TRAIN, ("eval",)))))

    lfw = args.data_dir / "lfw"
    if lfw.is_dir():
        m = {"experiment": "faces", "out": str(out / "faces"), "seed": args.seed,
             "datasets": {"lfw": {"format": "faces", "root": str(lfw), "limit": 3000}},
             "split": {"mode": "by-identity-fraction", "test_fraction": "1/10"},
             "train": {"dataset": "lfw", "input_side": 72, "epochs": args.epochs, "latent_dim": 10},
             "eval": {"n_pos": 10_000, "n_neg": 10_000}}
        rows.append(("unseen face identities", aucs(run(m, *TRAIN, ("eval",)))))

    print(f"{'condition':28s} {'invariant':>10s} {'vanilla':>10s}")
    for name, a in rows:
        print(f"{name:28s} {a['invariant']:10.4f} {a['vanilla']:10.4f}")


if __name__ == "__main__":
    main()
