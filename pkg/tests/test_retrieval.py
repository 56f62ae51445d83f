import numpy as np
import pytest

from adfuse.manifest import PairRow
from adfuse.retrieval import (
    CandidateSet,
    EvalProtocol,
    RetrievalError,
    build_candidates,
    evaluate,
    score,
)
from helpers import random_unit


def rows_for(n_images, texts_per_image=1, split="test"):
    rows = []
    for i in range(n_images):
        for t in range(texts_per_image):
            rows.append(
                PairRow(
                    image_id=f"im{i:04d}",
                    label_text_id=f"tx{i:04d}_{t}",
                    split=split,
                )
            )
    return rows


def feature_maps(rows, d=16, seed=0):
    rng = np.random.default_rng(seed)
    imgs = {r.image_id: random_unit(rng, d) for r in rows}
    txts = {r.label_text_id: random_unit(rng, d) for r in rows}
    return imgs, txts


def test_score_fixtures():
    v = np.array([0.6, 0.8])
    assert score(v, [v]) == [pytest.approx(1.0)]
    assert score(np.array([1.0, 0.0]), [np.array([0.0, 1.0])]) == [0.0]
    assert score(np.array([0.6, 0.8]), [np.array([1.0, 0.0])]) == [pytest.approx(0.6)]
    with pytest.raises(RetrievalError):
        score(np.zeros(3), [np.zeros(4)])


def test_k_candidate_shapes_and_determinism():
    rows = rows_for(100)
    protocol = EvalProtocol("k_candidate", k=20, seed=5)
    sets = build_candidates(protocol, rows)
    assert len(sets) == 100
    for cs in sets:
        assert len(cs.positives) == 1
        assert len(cs.negatives) == 19
    again = build_candidates(protocol, rows)
    assert sets == again


def test_negatives_never_from_own_image():
    rows = rows_for(100, texts_per_image=3)
    owner = {r.label_text_id: r.image_id for r in rows}
    total = 0
    for seed in range(100):
        sets = build_candidates(EvalProtocol("k_candidate", k=100, seed=seed), rows)
        for cs in sets:
            total += 1
            assert all(owner[t] != cs.image_id for t in cs.negatives)
    assert total >= 10_000


def test_official_protocol_shape():
    rows = rows_for(30, texts_per_image=3)
    sets = build_candidates(EvalProtocol("official", seed=0), rows)
    for cs in sets:
        assert len(cs.positives) == 3
        assert len(cs.negatives) == 12
    with pytest.raises(RetrievalError):
        build_candidates(EvalProtocol("official", seed=0), rows_for(30, texts_per_image=2))


def test_metric_hand_fixture():
    # 2 images with positive ranks {1,3} and {2,4} among 4 candidates
    sets = [
        CandidateSet("a", ("p1", "p2"), ("n1", "n2")),
        CandidateSet("b", ("q1", "q2"), ("m1", "m2")),
    ]
    e = np.eye(4)

    def vec(weights):
        v = np.asarray(weights, dtype=np.float64)
        return v / np.linalg.norm(v)

    imgs = {"a": vec([1, 0, 0, 0]), "b": vec([0, 1, 0, 0])}
    # image a: p1 rank 1, p2 rank 3; image b: q1 rank 2, q2 rank 4
    txts = {
        "p1": vec([0.9, 0.1, 0.1, 0.1]),
        "n1": vec([0.8, 0.2, 0.1, 0.1]),
        "p2": vec([0.7, 0.3, 0.1, 0.1]),
        "n2": vec([0.6, 0.4, 0.1, 0.1]),
        "m1": vec([0.1, 0.9, 0.1, 0.1]),
        "q1": vec([0.2, 0.8, 0.1, 0.1]),
        "m2": vec([0.3, 0.7, 0.1, 0.1]),
        "q2": vec([0.4, 0.6, 0.1, 0.1]),
    }
    m = evaluate(imgs, txts, sets)
    assert m.accuracy == 50.0
    assert m.rank == 1.5
    assert m.mean_rank == 2.5
    assert m.n_images == 2


def test_perfect_scorer_metrics():
    rows = rows_for(20, texts_per_image=3)
    sets = build_candidates(EvalProtocol("official", seed=1), rows)
    rng = np.random.default_rng(3)
    d = 8
    imgs = {r.image_id: random_unit(rng, d) for r in rows}
    txts = {}
    for r in rows:
        # positives collinear with their image; negatives orthogonal-ish
        txts[r.label_text_id] = imgs[r.image_id]
    m = evaluate(imgs, txts, sets)
    assert m.accuracy == 100.0
    assert m.rank == 1.0


def test_rank_never_exceeds_mean_rank_property():
    rng = np.random.default_rng(11)
    rows = rows_for(40, texts_per_image=2)
    for seed in range(50):
        sets = build_candidates(EvalProtocol("k_candidate", k=10, seed=seed), rows)
        imgs, txts = feature_maps(rows, seed=seed)
        m = evaluate(imgs, txts, sets)
        assert m.rank <= m.mean_rank + 1e-12


def test_metrics_invariant_under_increasing_transform():
    rows = rows_for(60)
    sets = build_candidates(EvalProtocol("k_candidate", k=20, seed=2), rows)
    imgs, txts = feature_maps(rows, seed=4)
    base = evaluate(imgs, txts, sets)
    scaled_imgs = {k: 7.3 * v for k, v in imgs.items()}  # mimics exp(logit_scale)
    m = evaluate(scaled_imgs, txts, sets)
    assert (m.accuracy, m.rank, m.mean_rank) == (base.accuracy, base.rank, base.mean_rank)


def test_accuracy_non_increasing_in_k_nested_pools():
    # nested negative pools: larger K strictly adds negatives
    rng = np.random.default_rng(0)
    d = 16
    n = 1500
    hits = {20: 0, 100: 0}
    for i in range(n):
        img = random_unit(rng, d)
        pos = random_unit(rng, d)
        negs = random_unit(rng, 100 - 1, d)
        scores_all = negs @ img
        pos_score = pos @ img
        if pos_score > scores_all[:19].max():
            hits[20] += 1
        if pos_score > scores_all.max():
            hits[100] += 1
    assert hits[100] <= hits[20]
    assert hits[20] / n > 2 * hits[100] / n  # clearly separated at these sizes


def test_unresolvable_ids():
    sets = [CandidateSet("a", ("p",), ("n",))]
    with pytest.raises(RetrievalError):
        evaluate({}, {"p": np.ones(2), "n": np.ones(2)}, sets)
    with pytest.raises(RetrievalError):
        evaluate({"a": np.ones(2)}, {"p": np.ones(2)}, sets)
