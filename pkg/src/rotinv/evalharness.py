"""Pair-matching evaluation on an unseen domain.

Positive pairs are an image and a rotated copy of it; negative pairs are two
images with different labels.  A frozen encoder maps both members to their
posterior means, the pair is scored by cosine similarity, and the score set is
summarized by an exact ROC curve (one step per distinct score) and its area.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .groupact import AngleSampler, GroupElement, rotate_image
from .ingest import RawDataset
from .models import VAE

SAME, DIFFERENT = "same", "different"


class UndefinedSimilarityError(ZeroDivisionError):
    pass


class ProvenanceError(ValueError):
    pass


class EvalError(ValueError):
    pass


# -- pairs ----------------------------------------------------------------------------

@dataclass(frozen=True)
class PairSample:
    img_a: np.ndarray
    img_b: np.ndarray
    is_same: bool
    label_a: object = None
    label_b: object = None
    pose: GroupElement | None = None


@dataclass
class PairSet:
    """Pairs held as indices into ``dataset`` plus the rotation applied to ``b``.

    Materializing 20,000 image pairs up front would dominate memory for the
    72x72 face corpus, so images are produced on demand.
    """

    dataset: RawDataset
    index_a: np.ndarray
    index_b: np.ndarray
    poses: np.ndarray        # (n, 2) cos/sin applied to member b
    rotated: np.ndarray      # bool: whether member b is rotated at all
    is_same: np.ndarray
    seed: int = 0

    def __len__(self) -> int:
        return len(self.is_same)

    def images_a(self, rows=slice(None)) -> np.ndarray:
        return self.dataset.images[self.index_a[rows]]

    def images_b(self, rows=slice(None)) -> np.ndarray:
        idx = np.arange(len(self))[rows]
        out = self.dataset.images[self.index_b[idx]].copy()
        rot = self.rotated[idx]
        if rot.any():
            out[rot] = rotate_image(out[rot], self.poses[idx][rot].astype(out.dtype))
        return out

    def __getitem__(self, i: int) -> PairSample:
        a, b = int(self.index_a[i]), int(self.index_b[i])
        g = GroupElement(float(self.poses[i, 0]), float(self.poses[i, 1])) if self.rotated[i] else None
        img_b = self.dataset.images[b]
        if g is not None:
            img_b = rotate_image(img_b, np.asarray([[g.c, g.s]], dtype=img_b.dtype))
        labels = self.dataset.labels
        return PairSample(self.dataset.images[a], img_b, bool(self.is_same[i]), labels[a], labels[b], g)

    def __iter__(self) -> Iterator[PairSample]:
        for i in range(len(self)):
            yield self[i]


NEGATIVE_MODES = ("cross-class", "distinct-image")


def gen_pairs(X2: RawDataset, n_pos: int = 10_000, n_neg: int = 10_000, sampler: AngleSampler | None = None,
              seed: int = 0, rotate_negatives: bool = False, positive_mode: str = "same-image",
              negative_mode: str = "cross-class") -> PairSet:
    """Balanced-by-default pair set: ``n_pos`` positives followed by ``n_neg`` negatives.

    ``positive_mode="same-class"`` pairs two distinct images sharing a label
    instead of an image with itself.  ``negative_mode="distinct-image"`` only
    asks negatives to be two different images, for a domain with one class.
    """
    if n_pos < 1 or n_neg < 1:
        raise EvalError("pair counts must be >= 1")
    if negative_mode not in NEGATIVE_MODES:
        raise EvalError(f"unknown negative_mode {negative_mode!r}")
    labels = np.asarray([str(v) for v in X2.labels.tolist()])
    classes, inverse = np.unique(labels, return_inverse=True)
    if negative_mode == "distinct-image":
        if len(X2) < 2:
            raise EvalError(f"{X2.name}: negative pairs need at least two images")
        inverse = np.arange(len(X2))
    elif len(classes) < 2:
        raise EvalError(f"{X2.name}: negative pairs need at least two classes")
    sampler = sampler if sampler is not None else AngleSampler(seed + 1)
    rng = np.random.Generator(np.random.PCG64(seed))
    n = len(X2)

    class_of = np.unique(labels, return_inverse=True)[1]
    pa = rng.integers(0, n, n_pos)
    if positive_mode == "same-image":
        pb = pa.copy()
    elif positive_mode == "same-class":
        members = [np.flatnonzero(class_of == k) for k in range(len(classes))]
        if any(len(m) < 2 for m in members):
            raise EvalError("same-class positives need two images in every class")
        pb = np.empty_like(pa)
        for t, a in enumerate(pa):
            m = members[class_of[a]]
            pick = m[rng.integers(0, len(m) - 1)]
            pb[t] = pick if pick != a else m[-1]
    else:
        raise EvalError(f"unknown positive_mode {positive_mode!r}")

    na, nb = [], []
    need = n_neg
    while need > 0:
        a = rng.integers(0, n, 2 * need + 16)
        b = rng.integers(0, n, 2 * need + 16)
        keep = inverse[a] != inverse[b]
        na.append(a[keep][:need])
        nb.append(b[keep][:need])
        need -= len(na[-1])
    na, nb = np.concatenate(na), np.concatenate(nb)

    poses = np.zeros((n_pos + n_neg, 2))
    poses[:, 0] = 1.0
    poses[:n_pos] = sampler.poses(n_pos)
    rotated = np.zeros(n_pos + n_neg, dtype=bool)
    rotated[:n_pos] = True
    if rotate_negatives:
        poses[n_pos:] = sampler.poses(n_neg)
        rotated[n_pos:] = True
    is_same = np.r_[np.ones(n_pos, dtype=bool), np.zeros(n_neg, dtype=bool)]
    return PairSet(X2, np.r_[pa, na], np.r_[pb, nb], poses, rotated, is_same, seed)


# -- scoring ---------------------------------------------------------------------------

def embed(model: VAE, img: np.ndarray) -> np.ndarray:
    """Posterior mean of one image (pose, if any, is discarded)."""
    img = np.asarray(img)
    if img.shape != (model.cfg.input_side,) * 2:
        raise EvalError(f"image of shape {img.shape} does not match model input side {model.cfg.input_side}")
    return model.embed(img[None])[0]


def cosine_similarity(u, v) -> float:
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0 or nv == 0:
        raise UndefinedSimilarityError("cosine similarity is undefined for a zero vector")
    return float(np.clip(u @ v / (nu * nv), -1.0, 1.0))


def cosine_rows(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    na, nb = np.linalg.norm(A, axis=1), np.linalg.norm(B, axis=1)
    if np.any(na == 0) or np.any(nb == 0):
        raise UndefinedSimilarityError("cosine similarity is undefined for a zero embedding")
    return np.clip((A * B).sum(axis=1) / (na * nb), -1.0, 1.0)


def classify_pair(score: float, tau: float) -> str:
    return SAME if score > tau else DIFFERENT


@dataclass
class ScoreSet:
    scores: np.ndarray
    labels: np.ndarray
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=bool)
        if self.scores.shape != self.labels.shape:
            raise EvalError("scores and labels differ in length")
        if not np.all(np.isfinite(self.scores)):
            raise EvalError("non-finite score")


def score_pairs(model: VAE, pairs: PairSet, batch_size: int = 512, provenance: dict | None = None) -> ScoreSet:
    """Embed every pair member in fixed batches and score by cosine similarity."""
    base = model.embed(pairs.dataset.images, batch_size)
    za = base[pairs.index_a]
    zb = base[pairs.index_b].copy()
    rot = np.flatnonzero(pairs.rotated)
    for s in range(0, len(rot), batch_size):
        rows = rot[s:s + batch_size]
        zb[rows] = model.embed(pairs.images_b(rows), batch_size)
    return ScoreSet(cosine_rows(za, zb), pairs.is_same.copy(), dict(provenance or {}))


# -- ROC ----------------------------------------------------------------------------------

@dataclass
class RocCurve:
    thresholds: np.ndarray
    fpr: np.ndarray
    tpr: np.ndarray
    auc: float
    top_score: float = math.inf   # largest score; +inf stands in for it as the first threshold

    def point(self, tau: float) -> tuple[float, float]:
        """(FPR, TPR) of the classifier ``score > tau``, read off the curve."""
        if tau >= self.top_score:
            return float(self.fpr[0]), float(self.tpr[0])
        # thresholds descend; the first entry <= tau defines the operating point
        k = int(np.searchsorted(-self.thresholds, -tau, side="left"))
        k = min(max(k, 1), len(self.thresholds) - 1)
        return float(self.fpr[k]), float(self.tpr[k])


def roc_auc(s: ScoreSet) -> RocCurve:
    """Exact ROC over every distinct score, trapezoidal area.

    The point attached to threshold t is the rate of ``score > t``.  Thresholds
    are +inf, then each distinct score except the largest, then -inf, so
    consecutive points step over exactly one group of tied scores and the
    trapezoid gives tied positive/negative pairs half credit.
    """
    y = s.labels
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    if n_pos == 0 or n_neg == 0:
        raise EvalError("ROC needs at least one positive and one negative")
    order = np.argsort(-s.scores, kind="stable")
    sc, yy = s.scores[order], y[order]
    distinct, start = np.unique(-sc, return_index=True)   # ascending in -score
    ends = np.r_[start[1:], len(sc)]
    tp = np.r_[0, np.cumsum(yy)[ends - 1]]
    fp = np.r_[0, np.cumsum(~yy)[ends - 1]]
    thr = np.r_[np.inf, -distinct[1:], -np.inf]
    # integer trapezoid; one division at the end
    area2 = int(np.sum(np.diff(fp) * (tp[1:] + tp[:-1])))
    auc = area2 / (2 * n_pos * n_neg)
    return RocCurve(thr, fp / n_neg, tp / n_pos, auc, float(sc[0]))


# -- serialization --------------------------------------------------------------------------

def write_scores_csv(s: ScoreSet, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["score", "is_same"])
        for v, lab in zip(s.scores.tolist(), s.labels.tolist()):
            w.writerow([repr(v), int(lab)])


def read_scores_csv(path) -> ScoreSet:
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    return ScoreSet([float(r["score"]) for r in rows], [r["is_same"] == "1" for r in rows])


def write_roc_csv(roc: RocCurve, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["threshold", "fpr", "tpr"])
        for t, a, b in zip(roc.thresholds.tolist(), roc.fpr.tolist(), roc.tpr.tolist()):
            w.writerow([repr(t), repr(a), repr(b)])


def read_roc_csv(path, auc: float | None = None) -> RocCurve:
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    thr = np.array([float(r["threshold"]) for r in rows])
    fpr = np.array([float(r["fpr"]) for r in rows])
    tpr = np.array([float(r["tpr"]) for r in rows])
    if auc is None:
        auc = float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1])) / 2)
    return RocCurve(thr, fpr, tpr, auc)


def summary(s: ScoreSet, roc: RocCurve) -> dict:
    p = s.provenance
    return {"auc": roc.auc, "n_pos": int(s.labels.sum()), "n_neg": int((~s.labels).sum()),
            "model": p.get("model"), "dataset": p.get("dataset"), "seed": p.get("seed")}


def write_eval_outputs(s: ScoreSet, roc: RocCurve, outdir) -> dict:
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    write_scores_csv(s, outdir / "scores.csv")
    write_roc_csv(roc, outdir / "roc.csv")
    summ = summary(s, roc)
    (outdir / "summary.json").write_text(json.dumps(summ, indent=2, sort_keys=True) + "\n")
    return summ


# -- experiments ------------------------------------------------------------------------------

def check_provenance(train_prov: dict, X2: RawDataset) -> None:
    """Reject evaluating a model on labels it was trained on.

    Cross-corpus evaluation (different dataset names) is always allowed.
    """
    if "dataset" not in train_prov:
        raise ProvenanceError("checkpoint carries no training-dataset provenance")
    if train_prov["dataset"] != X2.name:
        return
    trained = set(map(str, train_prov.get("train_labels") or []))
    overlap = trained & set(map(str, X2.labels.tolist()))
    if overlap:
        raise ProvenanceError(f"evaluation domain {X2.name} shares labels with the training domain: "
                              f"{sorted(overlap)[:5]}")


@dataclass
class ConditionResult:
    condition: dict
    model: str
    scores: ScoreSet
    roc: RocCurve


@dataclass
class ExperimentReport:
    kind: str
    results: list[ConditionResult] = field(default_factory=list)

    def auc(self, model: str, **cond) -> float:
        hits = [r.roc.auc for r in self.results
                if r.model == model and all(r.condition.get(k) == v for k, v in cond.items())]
        if len(hits) != 1:
            raise KeyError(f"{len(hits)} results match model={model} {cond}")
        return hits[0]

    def sweep_series(self, key: str = "n_train_classes") -> list[tuple[int, float, str]]:
        return sorted((int(r.condition[key]), r.roc.auc, r.model) for r in self.results if key in r.condition)


EXPERIMENT_KINDS = ("split-eval", "sweep", "cross-dataset", "face")


@dataclass
class Condition:
    """One evaluation cell: a set of trained checkpoints and the domain to test on."""

    params: dict
    checkpoints: dict            # model kind -> trainer.Checkpoint
    X2: RawDataset


def run_experiment(kind: str, conditions: list[Condition], n_pos: int = 10_000, n_neg: int = 10_000,
                   seed: int = 0, rotate_negatives: bool = False, positive_mode: str = "same-image") -> ExperimentReport:
    """Score every checkpoint of every condition on identical pairs.

    ``kind`` is one of split-eval, sweep (conditions carry n_train_classes),
    cross-dataset, face.  Both model kinds are required in every condition.
    """
    if kind not in EXPERIMENT_KINDS:
        raise EvalError(f"unknown experiment kind {kind!r}")
    report = ExperimentReport(kind)
    for cond in conditions:
        missing = {"vanilla", "invariant"} - set(cond.checkpoints)
        if missing:
            raise EvalError(f"condition {cond.params} lacks checkpoints for {sorted(missing)}")
        if kind == "sweep" and "n_train_classes" not in cond.params:
            raise EvalError("sweep conditions need n_train_classes")
        # a sweep with |L| = K - 1 leaves one unseen class; negatives then only differ by image
        single = len(set(map(str, cond.X2.labels.tolist()))) < 2
        neg_mode = "distinct-image" if kind == "sweep" and single else "cross-class"
        pairs = gen_pairs(cond.X2, n_pos, n_neg, AngleSampler(seed + 1), seed, rotate_negatives, positive_mode,
                          neg_mode)
        for mk in ("vanilla", "invariant"):
            ck = cond.checkpoints[mk]
            if ck.config.model != mk:
                raise EvalError(f"checkpoint registered as {mk} is a {ck.config.model} model")
            check_provenance(ck.provenance, cond.X2)
            prov = {"model": mk, "dataset": cond.X2.name, "seed": seed,
                    "train_dataset": ck.provenance.get("dataset"), "negative_mode": neg_mode, **cond.params}
            s = score_pairs(ck.model(), pairs, provenance=prov)
            report.results.append(ConditionResult(dict(cond.params), mk, s, roc_auc(s)))
    return report


def standard_error(auc: float, n_pos: int, n_neg: int) -> float:
    """Hanley-McNeil standard error of an AUC estimate."""
    q1 = auc / (2 - auc)
    q2 = 2 * auc * auc / (1 + auc)
    v = (auc * (1 - auc) + (n_pos - 1) * (q1 - auc * auc) + (n_neg - 1) * (q2 - auc * auc)) / (n_pos * n_neg)
    return math.sqrt(max(v, 0.0))
