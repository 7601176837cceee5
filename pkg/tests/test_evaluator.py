import csv
import json

import numpy as np
import pytest
import torch

from dpmkit.errors import ShapeError
from dpmkit.evaluator import (distance_matrix, evaluate, evaluate_distances, head_correlation_from_attention,
                              mean_offdiag, write_matrix_csv)
from oracles import brute_retrieval, random_ranking_instance


def test_hand_example():
    # gallery sorted by distance: [g1 (id 1), g0 (id 0), g2 (id 0)]
    dist = np.array([[0.5, 0.1, 0.9]])
    rep = evaluate_distances(dist, [0], [0, 1, 0], [0], [1, 1, 1], max_rank=3)
    assert rep.cmc.tolist() == [0.0, 1.0, 1.0]
    assert rep.map == pytest.approx((1 / 2 + 2 / 3) / 2)


def test_same_camera_match_excluded():
    dist = np.array([[0.0, 1.0, 2.0]])
    rep = evaluate_distances(dist, [7], [7, 3, 7], [0], [0, 1, 1], max_rank=2)
    # g0 is dropped; g2 becomes rank 2
    assert rep.cmc.tolist() == [0.0, 1.0] and rep.map == pytest.approx(0.5)


def test_query_without_valid_match_is_excluded():
    rep = evaluate_distances(np.array([[1.0], [1.0]]), [0, 1], [0], [0, 0], [0])
    assert rep.excluded_queries == [0, 1] and rep.map == 0.0
    rep = evaluate_distances(np.array([[1.0, 2.0], [1.0, 2.0]]), [0, 1], [0, 1], [0, 0], [0, 1])
    assert rep.excluded_queries == [0] and rep.map == 0.5


def test_ties_keep_gallery_order():
    rep = evaluate_distances(np.array([[1.0, 1.0]]), [0], [1, 0], [0], [1, 1])
    assert rep.cmc[0] == 0.0


@pytest.mark.parametrize("seed", range(10))
def test_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    for _ in range(20):
        inst = random_ranking_instance(rng)
        max_rank = inst[0].shape[1]
        rep = evaluate_distances(*inst, max_rank=max_rank)
        valid = len(inst[1]) - len(rep.excluded_queries)
        if valid == 0:
            continue
        cmc, mAP, n = brute_retrieval(*inst, max_rank)
        assert n == valid
        assert abs(rep.map - mAP) <= 1e-9
        assert np.abs(rep.cmc - cmc).max() <= 1e-9
        assert (np.diff(rep.cmc) >= 0).all()


def test_oracle_features_perfect():
    q_ids, g_ids = np.array([0, 1, 2]), np.array([2, 1, 0, 0, 1, 2])
    eye = np.eye(3)
    rep = evaluate(eye[q_ids], eye[g_ids], q_ids, g_ids, [0, 0, 0], [1] * 6)
    assert rep.map == 1.0 and rep.rank(1) == 1.0


def test_distance_matrix():
    q, g = np.array([[0.0, 0.0], [3.0, 4.0]]), np.array([[0.0, 0.0], [6.0, 8.0]])
    np.testing.assert_allclose(distance_matrix(q, g), [[0, 10], [5, 5]])
    np.testing.assert_allclose(distance_matrix(q[1:], g[1:], "cosine"), [[0.0]], atol=1e-12)
    with pytest.raises(ShapeError):
        distance_matrix(q, np.zeros((1, 3)))
    with pytest.raises(ValueError):
        distance_matrix(q, g, "manhattan")


def test_empty_gallery():
    with pytest.raises(ShapeError):
        evaluate_distances(np.zeros((1, 0)), [0], [], [0], [])


def test_report_files(tmp_path):
    rep = evaluate_distances(np.array([[0.5, 0.1]]), [0], [1, 0], [0], [1, 1], max_rank=2)
    p = rep.write(tmp_path / "r.json")
    d = json.loads(p.read_text())
    assert d["cmc"] == [1.0, 1.0] and d["ranks"] == [1, 2] and d["map"] == 1.0
    rows = list(csv.reader(open(tmp_path / "r.cmc.csv")))
    assert rows[0] == ["rank", "rate"] and len(rows) == 3


def test_head_correlation():
    a = torch.tensor([[[1.0, 0.0], [0.0, 1.0]], [[1.0, 0.0], [1.0, 0.0]]])
    m = head_correlation_from_attention(a)
    np.testing.assert_allclose(m, [[1.0, 0.5], [0.5, 1.0]])
    assert mean_offdiag(m) == 0.5
    assert mean_offdiag(np.ones((1, 1))) == 0.0


def test_matrix_csv(tmp_path):
    p = write_matrix_csv(np.array([[1.0, 0.25]]), tmp_path / "m.csv")
    assert p.read_text().strip() == "1.0,0.25"
