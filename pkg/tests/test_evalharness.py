import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from numpy.testing import assert_array_equal

from rotinv import evalharness as ev
from rotinv.groupact import AngleSampler, rotate_image
from rotinv.ingest import RawDataset
from rotinv.models import VAE, VaeConfig
from rotinv.trainer import TrainConfig, new_checkpoint


def mann_whitney(scores, labels):
    """P(score_pos > score_neg) + 0.5 P(tie), by enumerating every pair."""
    pos = [s for s, y in zip(scores, labels) if y]
    neg = [s for s, y in zip(scores, labels) if not y]
    wins = 0.0
    for p in pos:
        for n in neg:
            wins += 1.0 if p > n else 0.5 if p == n else 0.0
    return wins / (len(pos) * len(neg))


def random_scoreset(r, n_max=200):
    n = int(r.integers(2, n_max))
    labels = r.random(n) < r.uniform(0.1, 0.9)
    labels[0], labels[1] = True, False
    scores = np.round(r.normal(labels * r.uniform(0, 2), 1.0), int(r.integers(0, 3)))  # rounding forces ties
    return ev.ScoreSet(scores, labels)


def toy_domain(n=40, classes=4, side=8, seed=0):
    r = np.random.default_rng(seed)
    labels = np.arange(n) % classes
    return RawDataset(r.random((n, side, side)).astype(np.float32), labels + 5, "toy", {"side": "X2"})


# -- AUC --------------------------------------------------------------------------------

def test_auc_worked_example():
    roc = ev.roc_auc(ev.ScoreSet([0.9, 0.8, 0.4, 0.3], [True, True, False, True]))
    assert roc.auc == pytest.approx(2 / 3, abs=1e-15)


def test_auc_perfect_and_degenerate():
    assert ev.roc_auc(ev.ScoreSet([0.9, 0.8, 0.1], [True, True, False])).auc == 1.0
    roc = ev.roc_auc(ev.ScoreSet([0.5] * 6, [True, False] * 3))
    assert roc.auc == 0.5
    assert roc.fpr.tolist() == [0.0, 1.0] and roc.tpr.tolist() == [0.0, 1.0]


def test_auc_needs_both_classes():
    with pytest.raises(ev.EvalError):
        ev.roc_auc(ev.ScoreSet([0.1, 0.2], [True, True]))


@pytest.mark.parametrize("seed", range(20))
def test_auc_equals_mann_whitney(seed):
    s = random_scoreset(np.random.default_rng(seed))
    assert abs(ev.roc_auc(s).auc - mann_whitney(s.scores, s.labels)) < 1e-12


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.integers(-5, 5), st.booleans()), min_size=2, max_size=60))
def test_auc_oracle_with_heavy_ties(pairs):
    scores = [p[0] / 2 for p in pairs]
    labels = [p[1] for p in pairs]
    if all(labels) or not any(labels):
        return
    roc = ev.roc_auc(ev.ScoreSet(scores, labels))
    assert abs(roc.auc - mann_whitney(scores, labels)) < 1e-12
    assert np.all(np.diff(roc.fpr) >= 0) and np.all(np.diff(roc.tpr) >= 0)
    assert (roc.fpr[0], roc.tpr[0], roc.fpr[-1], roc.tpr[-1]) == (0.0, 0.0, 1.0, 1.0)
    assert np.all(np.diff(roc.thresholds) < 0)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2 ** 32), st.floats(-3, 3))
def test_threshold_classifier_lies_on_curve(seed, tau):
    s = random_scoreset(np.random.default_rng(seed), 80)
    roc = ev.roc_auc(s)
    for t in [tau, *s.scores[:5].tolist()]:
        same = np.array([ev.classify_pair(v, t) == ev.SAME for v in s.scores])
        point = ((same & ~s.labels).sum() / (~s.labels).sum(), (same & s.labels).sum() / s.labels.sum())
        assert roc.point(t) == pytest.approx(point, abs=0)
        assert any(f == point[0] and p == point[1] for f, p in zip(roc.fpr, roc.tpr))


@given(st.integers(0, 2 ** 32), st.floats(0.01, 100))
def test_cosine_scores_scale_invariant(seed, c):
    r = np.random.default_rng(seed)
    A, B = r.standard_normal((30, 4)), r.standard_normal((30, 4))
    labels = np.arange(30) % 2 == 0
    s1, s2 = ev.cosine_rows(A, B), ev.cosine_rows(c * A, c * B)
    assert np.allclose(s1, s2, atol=1e-14, rtol=0)
    r1, r2 = ev.roc_auc(ev.ScoreSet(s1, labels)), ev.roc_auc(ev.ScoreSet(s2, labels))
    # the ordering of the scores, hence the curve, is what AUC depends on
    if np.array_equal(np.argsort(s1, kind="stable"), np.argsort(s2, kind="stable")):
        assert r1.auc == r2.auc


def test_standard_error_at_default_counts():
    assert ev.standard_error(0.9, 10_000, 10_000) < 0.01
    assert ev.standard_error(0.5, 10_000, 10_000) < 0.01


# -- similarity and classification ----------------------------------------------------------------

def test_cosine_basics():
    v = np.array([3.0, -1.0, 2.0])
    assert ev.cosine_similarity(v, v) == pytest.approx(1.0)
    assert ev.cosine_similarity([1, 0], [0, 1]) == 0.0
    assert ev.cosine_similarity(v, -v) == pytest.approx(-1.0)
    with pytest.raises(ev.UndefinedSimilarityError):
        ev.cosine_similarity([0, 0], [1, 0])
    with pytest.raises(ev.UndefinedSimilarityError):
        ev.cosine_rows(np.zeros((1, 2)), np.ones((1, 2)))


def test_classify_pair_is_strict():
    assert ev.classify_pair(0.9, 0.5) == ev.SAME
    assert ev.classify_pair(0.5, 0.5) == ev.DIFFERENT
    assert ev.classify_pair(-1.0, -1.0) == ev.DIFFERENT
    assert ev.classify_pair(-0.99, -1.0) == ev.SAME


# -- pairs ------------------------------------------------------------------------------------------

def test_gen_pairs_counts_and_hygiene():
    X2 = toy_domain()
    pairs = ev.gen_pairs(X2, 50, 70, AngleSampler(1), seed=4)
    assert len(pairs) == 120
    assert pairs.is_same.sum() == 50
    labels = X2.labels
    neg = ~pairs.is_same
    assert np.all(labels[pairs.index_a[neg]] != labels[pairs.index_b[neg]])
    for p in list(pairs)[:50]:
        assert p.is_same and p.pose is not None
        assert_array_equal(p.img_b, rotate_image(p.img_a, np.array([[p.pose.c, p.pose.s]], dtype=np.float32)))
    b = pairs.images_b()
    for i in range(0, 120, 7):
        assert_array_equal(b[i], pairs[i].img_b)


def test_gen_pairs_deterministic():
    X2 = toy_domain()
    a = ev.gen_pairs(X2, 20, 20, AngleSampler(2), seed=1)
    b = ev.gen_pairs(X2, 20, 20, AngleSampler(2), seed=1)
    assert_array_equal(a.index_a, b.index_a)
    assert_array_equal(a.index_b, b.index_b)
    assert_array_equal(a.poses, b.poses)


def test_gen_pairs_modes_and_errors():
    X2 = toy_domain()
    same_class = ev.gen_pairs(X2, 30, 10, seed=0, positive_mode="same-class")
    pos = same_class.is_same
    assert np.all(X2.labels[same_class.index_a[pos]] == X2.labels[same_class.index_b[pos]])
    assert np.all(same_class.index_a[pos] != same_class.index_b[pos])
    rot = ev.gen_pairs(X2, 5, 5, seed=0, rotate_negatives=True)
    assert rot.rotated.all()
    single = RawDataset(X2.images, np.zeros(len(X2), dtype=np.int64), "one")
    with pytest.raises(ev.EvalError):
        ev.gen_pairs(single, 5, 5)
    d = ev.gen_pairs(single, 5, 15, seed=0, negative_mode="distinct-image")
    neg = ~d.is_same
    assert np.all(d.index_a[neg] != d.index_b[neg])
    with pytest.raises(ev.EvalError):
        ev.gen_pairs(X2, 0, 5)


def test_default_pair_counts_balanced():
    X2 = toy_domain(200)
    pairs = ev.gen_pairs(X2)
    assert pairs.is_same.sum() == 10_000 and (~pairs.is_same).sum() == 10_000


# -- scoring with a model -----------------------------------------------------------------------------

def small_model(kind="invariant", seed=0):
    return VAE.create(VaeConfig(input_side=8, latent_dim=3, conv_channels=(2, 3), hidden=8), kind, seed)


def test_embed_contract():
    X2 = toy_domain()
    for kind in ("vanilla", "invariant"):
        m = small_model(kind)
        z = ev.embed(m, X2.images[0])
        assert z.shape == (3,)
        assert_array_equal(z, ev.embed(m, X2.images[0].copy()))
    with pytest.raises(ev.EvalError):
        ev.embed(small_model(), np.zeros((9, 9)))


def test_default_latent_is_ten():
    X = np.zeros((28, 28), np.float32)
    assert ev.embed(VAE.create(VaeConfig(), "invariant", 0), X).shape == (10,)


def test_score_pairs_matches_per_pair_embedding():
    X2 = toy_domain()
    m = small_model()
    pairs = ev.gen_pairs(X2, 10, 10, AngleSampler(3), seed=2)
    s = ev.score_pairs(m, pairs, batch_size=7)
    for i in (0, 5, 12, 19):
        p = pairs[i]
        expect = ev.cosine_similarity(ev.embed(m, p.img_a), ev.embed(m, p.img_b))
        assert s.scores[i] == pytest.approx(expect, abs=1e-6)


def test_csv_round_trip(tmp_path):
    s = random_scoreset(np.random.default_rng(0))
    roc = ev.roc_auc(s)
    summ = ev.write_eval_outputs(s, roc, tmp_path)
    back = ev.read_scores_csv(tmp_path / "scores.csv")
    assert_array_equal(back.scores, s.scores)
    assert_array_equal(back.labels, s.labels)
    r2 = ev.read_roc_csv(tmp_path / "roc.csv", roc.auc)
    assert_array_equal(r2.thresholds, roc.thresholds)
    assert_array_equal(r2.tpr, roc.tpr)
    assert (tmp_path / "scores.csv").read_text().splitlines()[0] == "score,is_same"
    assert (tmp_path / "roc.csv").read_text().splitlines()[0] == "threshold,fpr,tpr"
    assert set(json.loads((tmp_path / "summary.json").read_text())) == {"auc", "n_pos", "n_neg", "model",
                                                                         "dataset", "seed"}
    assert summ["auc"] == roc.auc


def test_roc_csv_infinite_sentinels(tmp_path):
    roc = ev.roc_auc(ev.ScoreSet([0.3, 0.1], [True, False]))
    ev.write_roc_csv(roc, tmp_path / "r.csv")
    t = ev.read_roc_csv(tmp_path / "r.csv").thresholds
    assert t[0] == math.inf and t[-1] == -math.inf


# -- experiments ------------------------------------------------------------------------------------

def _ck(kind, X1):
    cfg = TrainConfig(model=kind, vae=VaeConfig(input_side=8, latent_dim=3, conv_channels=(2, 3), hidden=8),
                      epochs=1)
    return new_checkpoint(cfg, X1)


def test_run_experiment_scores_both_models_on_same_pairs():
    X1 = RawDataset(toy_domain(seed=1).images, np.arange(40) % 3, "toy", {"side": "X1"})
    X2 = toy_domain()
    cks = {k: _ck(k, X1) for k in ("vanilla", "invariant")}
    rep = ev.run_experiment("split-eval", [ev.Condition({"L": "0-2"}, cks, X2)], 30, 30, seed=5)
    assert [r.model for r in rep.results] == ["vanilla", "invariant"]
    assert_array_equal(rep.results[0].scores.labels, rep.results[1].scores.labels)
    assert rep.results[0].scores.provenance["train_dataset"] == "toy"
    assert 0 <= rep.auc("invariant") <= 1


def test_run_experiment_rejects_overlap_and_missing():
    X1 = RawDataset(toy_domain(seed=1).images, np.arange(40) % 6, "toy", {"side": "X1"})
    X2 = toy_domain()          # labels 5..8 overlap label 5
    cks = {k: _ck(k, X1) for k in ("vanilla", "invariant")}
    with pytest.raises(ev.ProvenanceError):
        ev.run_experiment("split-eval", [ev.Condition({}, cks, X2)], 5, 5)
    with pytest.raises(ev.EvalError):
        ev.run_experiment("split-eval", [ev.Condition({}, {"vanilla": cks["vanilla"]}, X2)], 5, 5)
    with pytest.raises(ev.EvalError):
        ev.run_experiment("sweep", [ev.Condition({}, cks, X2)], 5, 5)


def test_cross_corpus_is_allowed():
    X1 = RawDataset(toy_domain(seed=1).images, np.arange(40) % 6, "other", {"side": "X1"})
    ev.check_provenance(_ck("vanilla", X1).provenance, toy_domain())


def test_sweep_series_single_unseen_class():
    X1 = RawDataset(toy_domain(seed=1).images, np.arange(40) % 3, "toy", {"side": "X1"})
    X2 = RawDataset(toy_domain().images, np.full(40, 9), "toy", {"side": "X2"})
    cks = {k: _ck(k, X1) for k in ("vanilla", "invariant")}
    rep = ev.run_experiment("sweep", [ev.Condition({"n_train_classes": 3}, cks, X2)], 10, 10)
    assert [m for _, _, m in rep.sweep_series()] == ["invariant", "vanilla"]
    assert rep.results[0].scores.provenance["negative_mode"] == "distinct-image"
