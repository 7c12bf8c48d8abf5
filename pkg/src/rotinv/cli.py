"""Command-line entry point: ``rotinv {prepare,train,eval,sweep,viz} --manifest M``.

A run is described by one JSON manifest; flags only override fields of it.
Output layout under ``out``::

    cache/<dataset>.ivlb (+ .hash)            prepared datasets
    train/<model>/checkpoint.ivck, log.jsonl
    eval/<model>/scores.csv, roc.csv, summary.json
    sweep/L<k>/<model>/...                    per-point checkpoints and scores
    figures/<experiment>/<model>/<domain>/<artifact>.svg (+ .csv)

Every directory written also holds ``manifest.json`` (the resolved manifest)
and ``version.json``.  Exit codes: 0 ok, 2 invalid input, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import sys
from fractions import Fraction
from pathlib import Path

import jsonschema
import numpy as np

from . import __version__
from . import evalharness as ev
from . import ingest, report, trainer
from .groupact import AngleSampler
from .models import VaeConfig

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 2, 3


class ManifestError(ValueError):
    pass


_num = {"type": "number"}
_int0 = {"type": "integer", "minimum": 0}
_int1 = {"type": "integer", "minimum": 1}

_DATASET = {
    "oneOf": [
        {"type": "object", "additionalProperties": False, "required": ["format", "images", "labels"],
         "properties": {"format": {"const": "idx"}, "images": {"type": "string"}, "labels": {"type": "string"},
                        "limit": _int1}},
        {"type": "object", "additionalProperties": False, "required": ["format", "root"],
         "properties": {"format": {"const": "idx-dir"}, "root": {"type": "string"}, "limit": _int1}},
        {"type": "object", "additionalProperties": False, "required": ["format", "root"],
         "properties": {"format": {"const": "faces"}, "root": {"type": "string"}, "min_images": _int1,
                        "limit": _int1, "crop_fraction": _num, "target_side": _int1, "pad_to": _int1}},
        {"type": "object", "additionalProperties": False, "required": ["format", "path"],
         "properties": {"format": {"const": "cache"}, "path": {"type": "string"}}},
    ]
}

MANIFEST_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["experiment", "datasets", "train"],
    "properties": {
        "experiment": {"type": "string", "pattern": "^[A-Za-z0-9_.-]+$"},
        "seed": _int0,
        "out": {"type": "string"},
        "threads": _int1,
        "datasets": {"type": "object", "minProperties": 1,
                     "propertyNames": {"pattern": "^[A-Za-z0-9_.-]+$"}, "additionalProperties": _DATASET},
        "split": {
            "type": "object", "additionalProperties": False, "required": ["mode"],
            "properties": {"mode": {"enum": [ingest.BY_CLASS, ingest.BY_IDENTITY]},
                           "train_classes": {"type": "array", "items": {"type": ["integer", "string"]}},
                           "test_fraction": {"type": ["string", "number"]}, "seed": _int0},
        },
        "train": {
            "type": "object", "additionalProperties": False, "required": ["dataset"],
            "properties": {"dataset": {"type": "string"}, "model": {"enum": ["vanilla", "invariant"]},
                           "epochs": _int1, "batch_size": _int1, "lr": _num, "beta1": _num, "beta2": _num,
                           "adam_eps": _num, "consistency_weight": _num, "latent_dim": _int1,
                           "input_side": _int1, "conv_channels": {"type": "array", "items": _int1,
                                                                  "minItems": 2, "maxItems": 2},
                           "hidden": _int1, "kl_weight": _num},
        },
        "eval": {
            "type": "object", "additionalProperties": False,
            "properties": {"dataset": {"type": "string"}, "n_pos": _int1, "n_neg": _int1,
                           "rotate_negatives": {"type": "boolean"},
                           "positive_mode": {"enum": ["same-image", "same-class"]}, "seed": _int0},
        },
        "sweep": {
            "type": "object", "additionalProperties": False, "required": ["n_train_classes"],
            "properties": {"n_train_classes": {"type": "array", "items": _int1, "minItems": 1}},
        },
        "viz": {
            "type": "object", "additionalProperties": False,
            "properties": {"n": _int0},
        },
    },
}


# -- manifest -------------------------------------------------------------------------------

def load_manifest(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise ManifestError(f"manifest {path} does not exist")
    try:
        m = json.loads(path.read_text())
    except json.JSONDecodeError as err:
        raise ManifestError(f"{path}: not valid JSON ({err})") from None
    validate_manifest(m)
    base = path.resolve().parent
    for d in m["datasets"].values():
        for key in ("images", "labels", "root", "path"):
            if key in d and not Path(d[key]).is_absolute():
                d[key] = str(base / d[key])
    if "out" in m and not Path(m["out"]).is_absolute():
        m["out"] = str(base / m["out"])
    return m


def validate_manifest(m: dict) -> None:
    try:
        jsonschema.validate(m, MANIFEST_SCHEMA)
    except jsonschema.ValidationError as err:
        where = "/".join(map(str, err.absolute_path)) or "<root>"
        raise ManifestError(f"manifest invalid at {where}: {err.message}") from None
    names = set(m["datasets"])
    if m["train"]["dataset"] not in names:
        raise ManifestError(f"train.dataset {m['train']['dataset']!r} is not declared in datasets")
    ed = m.get("eval", {}).get("dataset")
    if ed is not None and ed not in names:
        raise ManifestError(f"eval.dataset {ed!r} is not declared in datasets")
    if ed is None and "split" not in m:
        raise ManifestError("without eval.dataset a split is needed to define the unseen domain")
    if "sweep" in m and m.get("split", {}).get("mode") != ingest.BY_CLASS:
        raise ManifestError("sweep needs a by-class-list split")
    side = m["train"].get("input_side", 28)
    if side % 4:
        raise ManifestError(f"train.input_side must be a multiple of 4, got {side}")


def apply_overrides(m: dict, args) -> dict:
    m = copy.deepcopy(m)
    if args.seed is not None:
        m["seed"] = args.seed
    if args.out is not None:
        m["out"] = str(Path(args.out).resolve())
    if args.threads is not None:
        m["threads"] = args.threads
    for flag, key in (("model", "model"), ("epochs", "epochs"), ("latent_dim", "latent_dim")):
        v = getattr(args, flag, None)
        if v is not None:
            m["train"][key] = v
    m.setdefault("seed", 0)
    m.setdefault("out", str(Path("runs").resolve() / m["experiment"]))
    validate_manifest(m)
    return m


def check_sources(m: dict, names=None) -> None:
    for name, d in m["datasets"].items():
        if names is not None and name not in names:
            continue
        if d["format"] == "idx":
            paths = [d["images"], d["labels"]]
        elif d["format"] == "cache":
            paths = [d["path"]]
        else:
            paths = [d["root"]]
        for p in paths:
            if not Path(p).exists():
                raise ManifestError(f"dataset {name!r}: {p} does not exist")
        if d["format"] == "idx-dir" and ingest.find_idx_corpus(d["root"]) is None:
            raise ManifestError(f"dataset {name!r}: no {' / '.join(ingest.IDX_TRAIN_FILES)} under {d['root']}")


def version_stamp() -> dict:
    return {"tool": "rotinv", "version": __version__, "numpy": np.__version__,
            "checkpoint_format": trainer.CKPT_VERSION, "cache_format": ingest.CACHE_VERSION}


def stamp(dirpath, m: dict) -> Path:
    d = Path(dirpath)
    d.mkdir(parents=True, exist_ok=True)
    (d / "manifest.json").write_text(json.dumps(m, indent=2, sort_keys=True) + "\n")
    (d / "version.json").write_text(json.dumps(version_stamp(), indent=2, sort_keys=True) + "\n")
    return d


def _log(msg: str) -> None:
    print(msg, flush=True)


# -- datasets ----------------------------------------------------------------------------------

def _sha256_file(path, h) -> None:
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)


def source_hash(entry: dict) -> str:
    """Hash of the dataset entry plus the bytes of every file it reads."""
    h = hashlib.sha256(json.dumps(entry, sort_keys=True).encode())
    if entry["format"] == "idx":
        files = [Path(entry["images"]), Path(entry["labels"])]
    elif entry["format"] == "idx-dir":
        files = list(ingest.find_idx_corpus(entry["root"]))
    elif entry["format"] == "cache":
        files = [Path(entry["path"])]
    else:
        files = sorted(p for p in Path(entry["root"]).rglob("*") if p.is_file())
    for f in files:
        h.update(str(f.relative_to(entry["root"]) if entry["format"] == "faces" else f.name).encode())
        _sha256_file(f, h)
    return h.hexdigest()


def build_dataset(name: str, entry: dict) -> ingest.RawDataset:
    fmt = entry["format"]
    if fmt == "idx":
        ds = ingest.load_idx_dataset(entry["images"], entry["labels"], name, entry.get("limit"))
    elif fmt == "idx-dir":
        imgs, labs = ingest.find_idx_corpus(entry["root"])
        ds = ingest.load_idx_dataset(imgs, labs, name, entry.get("limit"))
    elif fmt == "cache":
        ds = ingest.with_name(ingest.load_dataset(entry["path"]), name)
    else:
        cfg = ingest.PreprocessConfig(entry.get("crop_fraction", 0.6), entry.get("target_side", 50),
                                      entry.get("pad_to", 72))
        ds = ingest.load_face_dir(entry["root"], cfg, name, entry.get("min_images", 1))
        if "limit" in entry:
            ds = ingest.take_first(ds, entry["limit"])
    return ds


def cache_path(m: dict, name: str) -> Path:
    return Path(m["out"]) / "cache" / f"{name}.ivlb"


def prepare_one(m: dict, name: str) -> bool:
    """Build the cache for one dataset; returns False when the existing cache is current."""
    entry = m["datasets"][name]
    path = cache_path(m, name)
    side = path.with_name(path.name + ".hash")
    src = source_hash(entry)
    if path.is_file() and side.is_file():
        rec = json.loads(side.read_text())
        if rec.get("source") == src and rec.get("cache") == hashlib.sha256(path.read_bytes()).hexdigest():
            _log(f"prepare {name}: cache up to date ({path})")
            return False
    ds = build_dataset(name, entry)
    path.parent.mkdir(parents=True, exist_ok=True)
    raw = ingest.dataset_to_bytes(ds)
    path.write_bytes(raw)
    side.write_text(json.dumps({"source": src, "cache": hashlib.sha256(raw).hexdigest()}, sort_keys=True) + "\n")
    _log(f"prepare {name}: {len(ds)} images of {ds.side}x{ds.side} -> {path}")
    return True


def dataset(m: dict, name: str) -> ingest.RawDataset:
    prepare_one(m, name)
    return ingest.with_name(ingest.load_dataset(cache_path(m, name)), name)


def split_spec(m: dict, train_classes=None) -> ingest.SplitSpec | None:
    s = m.get("split")
    if s is None:
        return None
    tc = s.get("train_classes", []) if train_classes is None else train_classes
    return ingest.SplitSpec(s["mode"], frozenset(tc), Fraction(str(s.get("test_fraction", "1/10"))),
                            s.get("seed", m["seed"]))


def domains(m: dict, train_classes=None) -> tuple[ingest.RawDataset, ingest.RawDataset]:
    """(X1, X2): training domain and the unseen evaluation domain."""
    ds = dataset(m, m["train"]["dataset"])
    spec = split_spec(m, train_classes)
    if spec is not None:
        if spec.mode == ingest.BY_CLASS and ds.labels.dtype.kind in "iu":
            spec = ingest.SplitSpec(spec.mode, frozenset(int(c) for c in spec.train_classes),
                                    spec.test_fraction, spec.seed)
        X1, X2 = ingest.split(ds, spec)
    else:
        X1, X2 = ds.subset(np.arange(len(ds)), side="X1", train_labels=sorted(set(ds.labels.tolist()), key=str)), None
    ed = m.get("eval", {}).get("dataset")
    if ed is not None and ed != m["train"]["dataset"]:
        X2 = dataset(m, ed)
        X2 = X2.subset(np.arange(len(X2)), side="X2")
    return X1, X2


# -- training ----------------------------------------------------------------------------------------

def train_config(m: dict, model: str) -> trainer.TrainConfig:
    t = m["train"]
    vae = VaeConfig(input_side=t.get("input_side", 28), latent_dim=t.get("latent_dim", 10),
                    conv_channels=tuple(t.get("conv_channels", (16, 32))), hidden=t.get("hidden", 128),
                    kl_weight=t.get("kl_weight", 1.0))
    return trainer.TrainConfig(model=model, vae=vae, epochs=t.get("epochs", 100), batch_size=t.get("batch_size", 128),
                               lr=t.get("lr", 1e-3), beta1=t.get("beta1", 0.9), beta2=t.get("beta2", 0.999),
                               adam_eps=t.get("adam_eps", 1e-8), seed=m["seed"],
                               consistency_weight=t.get("consistency_weight", 1.0), dataset=t["dataset"],
                               split=m.get("split"))


def train_one(m: dict, model: str, X1: ingest.RawDataset, outdir: Path, split_override=None) -> trainer.Checkpoint:
    cfg = train_config(m, model)
    if split_override is not None:
        cfg.split = split_override
    stamp(outdir, m)
    ckpath = outdir / "checkpoint.ivck"
    resume = None
    if ckpath.is_file():
        resume = trainer.load_checkpoint(ckpath)
        _log(f"train {model}: resuming at epoch {resume.epoch}/{cfg.epochs}")
    ck = trainer.train(cfg, X1, resume=resume, log_path=outdir / "log.jsonl", checkpoint_path=ckpath)
    if not ckpath.is_file():
        trainer.save_checkpoint(ck, ckpath)
    last = ck.history[-1] if ck.history else {}
    _log(f"train {model}: epoch {ck.epoch}, loss {last.get('total', float('nan')):.3f} -> {ckpath}")
    return ck


def models_of(m: dict) -> list[str]:
    return ["vanilla", "invariant"]


def experiment_kind(m: dict) -> str:
    ed = m.get("eval", {}).get("dataset")
    if ed is not None and ed != m["train"]["dataset"]:
        return "cross-dataset"
    if m.get("split", {}).get("mode") == ingest.BY_IDENTITY:
        return "face"
    return "split-eval"


def evaluate(m: dict, kind: str, conds: list[ev.Condition]) -> ev.ExperimentReport:
    e = m.get("eval", {})
    return ev.run_experiment(kind, conds, e.get("n_pos", 10_000), e.get("n_neg", 10_000), e.get("seed", m["seed"]),
                             e.get("rotate_negatives", False), e.get("positive_mode", "same-image"))


def figure(m: dict, model: str, domain: str, artifact: str) -> Path:
    d = stamp(Path(m["out"]) / "figures" / m["experiment"] / model / domain, m)
    return d / f"{artifact}.svg"


def emit_roc(m: dict, model: str, roc: ev.RocCurve) -> Path:
    svg = figure(m, model, "X2", "roc")
    ev.write_roc_csv(roc, svg.with_suffix(".csv"))
    report.write_figure(report.render_roc([(model, roc)], f"{m['experiment']}: {model} ROC"), svg)
    return svg


# -- commands -------------------------------------------------------------------------------------

def cmd_prepare(m: dict) -> None:
    check_sources(m)
    stamp(Path(m["out"]), m)
    for name in m["datasets"]:
        prepare_one(m, name)


def cmd_train(m: dict) -> None:
    check_sources(m)
    stamp(Path(m["out"]), m)
    X1, _ = domains(m)
    model = m["train"].get("model", "invariant")
    train_one(m, model, X1, Path(m["out"]) / "train" / model)


def _load_trained(m: dict, base: Path) -> dict:
    cks = {}
    for mk in models_of(m):
        p = base / mk / "checkpoint.ivck"
        if not p.is_file():
            raise trainer.TrainingError(f"missing checkpoint {p}; run `rotinv train --model {mk}` first")
        cks[mk] = trainer.load_checkpoint(p)
    return cks


def cmd_eval(m: dict) -> None:
    check_sources(m)
    out = Path(m["out"])
    stamp(out, m)
    _, X2 = domains(m)
    cks = _load_trained(m, out / "train")
    rep = evaluate(m, experiment_kind(m), [ev.Condition({}, cks, X2)])
    for r in rep.results:
        d = stamp(out / "eval" / r.model, m)
        summ = ev.write_eval_outputs(r.scores, r.roc, d)
        emit_roc(m, r.model, r.roc)
        _log(f"eval {r.model}: AUC {summ['auc']:.4f} on {X2.name} ({summ['n_pos']}+{summ['n_neg']} pairs)")


def cmd_sweep(m: dict) -> None:
    check_sources(m)
    out = Path(m["out"])
    stamp(out, m)
    ds = dataset(m, m["train"]["dataset"])
    classes = sorted(set(ds.labels.tolist()), key=lambda v: (str(type(v)), v))
    series = []
    for k in m["sweep"]["n_train_classes"]:
        if not 1 <= k < len(classes):
            raise ManifestError(f"sweep point {k} leaves no unseen class ({len(classes)} classes)")
        L = classes[:k]
        X1, X2 = domains(m, L)
        split = {**m["split"], "train_classes": L}
        cks = {mk: train_one(m, mk, X1, out / "sweep" / f"L{k}" / mk, split) for mk in models_of(m)}
        rep = evaluate(m, "sweep", [ev.Condition({"n_train_classes": k}, cks, X2)])
        for r in rep.results:
            ev.write_eval_outputs(r.scores, r.roc, stamp(out / "sweep" / f"L{k}" / r.model / "eval", m))
            _log(f"sweep |L|={k} {r.model}: AUC {r.roc.auc:.4f}")
        series += rep.sweep_series()
    series.sort()
    d = stamp(out / "sweep", m)
    report.write_sweep_csv(series, d / "series.csv")
    svg = figure(m, "all", "X2", "auc_sweep")
    report.write_sweep_csv(series, svg.with_suffix(".csv"))
    report.write_figure(report.render_sweep(series, f"{m['experiment']}: AUC vs |L|"), svg)


def cmd_viz(m: dict) -> None:
    check_sources(m)
    out = Path(m["out"])
    stamp(out, m)
    X1, X2 = domains(m)
    cks = _load_trained(m, out / "train")
    n_req = m.get("viz", {}).get("n", 2000)
    stats = []
    for mk, ck in cks.items():
        for domain, ds in (("X1", X1), ("X2", X2)):
            n = min(n_req, len(ds))
            sheet = report.latent_scatter(ck.model(), ds, AngleSampler(m["seed"] + 7), n, m["seed"], domain)
            for style in ("class", "angle"):
                svg = figure(m, mk, domain, f"latent_{style}")
                report.write_scatter_csv(sheet, svg.with_suffix(".csv"))
                report.write_figure(report.render_scatter(sheet, style), svg)
            st = report.sheet_stats(sheet)
            stats.append(st)
            _log(f"viz {mk} {domain}: n={n} angle-corr {st['angle_correlation']:.3f} "
                 f"silhouette {st['silhouette']:.3f}")
    d = stamp(out / "figures" / m["experiment"], m)
    (d / "latent_stats.json").write_text(json.dumps(stats, indent=2, sort_keys=True) + "\n")


COMMANDS = {"prepare": cmd_prepare, "train": cmd_train, "eval": cmd_eval, "sweep": cmd_sweep, "viz": cmd_viz}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rotinv", description="Rotation-invariant VAE experiments.")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--manifest", required=True, help="experiment manifest (JSON)")
        s.add_argument("--seed", type=int, help="override the global seed")
        s.add_argument("--threads", type=int, help="cap BLAS worker threads")
        s.add_argument("--out", help="override the output directory")
        if name == "train":
            s.add_argument("--model", choices=["vanilla", "invariant"])
        if name in ("train", "sweep"):
            s.add_argument("--epochs", type=int)
            s.add_argument("--latent-dim", dest="latent_dim", type=int)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        m = apply_overrides(load_manifest(args.manifest), args)
    except ManifestError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_INVALID
    from threadpoolctl import threadpool_limits

    try:
        with threadpool_limits(limits=m.get("threads")):
            COMMANDS[args.command](m)
    except ManifestError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_INVALID
    except (OSError, ValueError, RuntimeError, ArithmeticError, KeyError) as err:
        print(f"error: {type(err).__name__}: {err}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
