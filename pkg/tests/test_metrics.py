"""Pairwise linkage scores against a brute-force pair enumeration."""

from itertools import combinations
from math import isclose
from random import Random

from lucasim.metrics import pair_set_scores, pairs_of, pairwise_scores


def _brute_force(clusters, labels):
    ids = sorted(labels)
    true_pairs = {
        frozenset(p) for p in combinations(ids, 2) if labels[p[0]] == labels[p[1]]
    }
    predicted = set()
    for cluster in clusters:
        for p in combinations(sorted(cluster), 2):
            predicted.add(frozenset(p))
    tp = len(predicted & true_pairs)
    precision = tp / len(predicted) if predicted else 1.0
    recall = tp / len(true_pairs) if true_pairs else 1.0
    return precision, recall


def test_pairwise_scores_match_brute_force_on_random_partitions():
    rng = Random(123)
    for _ in range(50):
        n = rng.randint(1, 40)
        ids = [f"r{i:03d}" for i in range(n)]
        labels = {rid: f"u{rng.randrange(1, 8)}" for rid in ids}
        # Random clustering: shuffle then cut into chunks.
        shuffled = ids[:]
        rng.shuffle(shuffled)
        clusters, cursor = [], 0
        while cursor < n:
            size = rng.randint(1, 6)
            clusters.append(shuffled[cursor : cursor + size])
            cursor += size
        scores = pairwise_scores(clusters, labels)
        precision, recall = _brute_force(clusters, labels)
        assert isclose(scores["precision"], precision)
        assert isclose(scores["recall"], recall)


def test_degenerate_conventions():
    assert pairwise_scores([], {"a": "u1"})["precision"] == 1.0
    assert pairwise_scores([["a", "b"]], {"a": "u1", "b": "u2"})["recall"] == 1.0


def test_pair_set_scores():
    predicted = pairs_of([["a", "b", "c"]])
    truth = pairs_of([["a", "b"], ["c", "d"]])
    scores = pair_set_scores(predicted, truth)
    assert scores["true_positive"] == 1
    assert scores["pairs_predicted"] == 3
    assert scores["pairs_true"] == 2
