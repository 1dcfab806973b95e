import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fedni.masking import bfs_tree, is_connected, mask_leaves, random_mask

from .helpers import (graph_from_adjacency, path_adjacency, random_connected_adjacency,
                      star_adjacency)
from .oracles import brute_connected, brute_depths


def test_bfs_path_depths():
    depth, parent = bfs_tree(path_adjacency(3), 0)
    assert depth.tolist() == [0, 1, 2]
    assert parent.tolist() == [-1, 0, 1]


def test_bfs_star_depths():
    depth, _ = bfs_tree(star_adjacency(6), 0)
    assert depth[0] == 0 and np.all(depth[1:] == 1)


def test_bfs_unreachable_flagged():
    A = np.zeros((3, 3))
    A[0, 1] = A[1, 0] = 1
    depth, parent = bfs_tree(A, 0)
    assert depth[2] == -1 and parent[2] == -1


def test_bfs_bad_root():
    with pytest.raises(IndexError):
        bfs_tree(np.eye(3), 5)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.05, 0.5))
def test_bfs_matches_shortest_paths(seed, p):
    rng = np.random.default_rng(seed)
    R = np.triu(rng.random((12, 12)) < p, 1)
    A = (R | R.T).astype(float)
    root = int(rng.integers(12))
    assert bfs_tree(A, root)[0].tolist() == brute_depths(A, root)


def test_mask_star_center_root():
    ep = mask_leaves(graph_from_adjacency(star_adjacency(10)), 0, 0.15, rng_seed=0)
    assert 1 <= len(ep.masked) <= 2
    assert 0 in ep.retained
    assert is_connected(ep.corrupted.A)


def test_mask_path_removes_far_end():
    ep = mask_leaves(graph_from_adjacency(path_adjacency(3)), 0, 0.3, rng_seed=0)
    assert ep.masked.tolist() == [2]
    assert [h.tolist() for h in ep.hidden] == [[], [2]]
    np.testing.assert_allclose(ep.masked_count, [0.0, 0.2])


def test_mask_target_out_of_range():
    G = graph_from_adjacency(path_adjacency(4))
    with pytest.raises(ValueError):
        mask_leaves(G, 0, 0.5)
    with pytest.raises(ValueError):
        mask_leaves(G, 0, 0.0)


def test_mask_unreachable_target_is_flagged():
    # a two-node graph can lose at most its single non-root node
    G = graph_from_adjacency(path_adjacency(2))
    ep = mask_leaves(G, 0, 0.45, rng_seed=0)
    assert ep.reached_target
    ep = mask_leaves(graph_from_adjacency(star_adjacency(3)), 1, 0.45, rng_seed=0)
    assert len(ep.masked) == 2 and ep.reached_target


def test_mask_flag_when_tree_too_shallow():
    # two isolated nodes besides the root: nothing reachable to remove
    A = np.zeros((4, 4))
    A[0, 1] = A[1, 0] = 1
    ep = mask_leaves(graph_from_adjacency(A), 0, 0.45, rng_seed=0)
    assert not ep.reached_target
    assert ep.masked_fraction < 0.45


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 100_000))
def test_mask_leaves_invariants(seed):
    rng = np.random.default_rng(seed)
    A = random_connected_adjacency(rng, 50)
    G = graph_from_adjacency(A, seed=seed)
    root = int(rng.integers(50))
    ep = mask_leaves(G, root, 0.12, rng_seed=seed)
    keep = np.ones(50, dtype=bool)
    keep[ep.masked] = False
    assert 0.10 <= ep.masked_fraction <= 0.15
    assert root not in ep.masked
    assert brute_connected(A, keep)
    # exact ground truth
    assert sorted(ep.retained.tolist() + ep.masked.tolist()) == list(range(50))
    np.testing.assert_array_equal(ep.corrupted.X, G.X[ep.retained])
    for i, r in enumerate(ep.retained):
        expect = [m for m in ep.masked if A[r, m] != 0]
        assert ep.hidden[i].tolist() == sorted(expect)
        np.testing.assert_array_equal(ep.hidden_features(i), G.X[ep.hidden[i]])
    # every masked node has a retained parent
    parents, targets = ep.parent_slots()
    assert set(targets.tolist()) == set(ep.masked.tolist())
    assert np.all(ep.masked_count >= 0) and np.all(ep.masked_count <= 1)


def test_masked_nodes_absent_from_corrupted_graph():
    rng = np.random.default_rng(3)
    G = graph_from_adjacency(random_connected_adjacency(rng, 30))
    ep = mask_leaves(G, 0, 0.2, rng_seed=1)
    np.testing.assert_array_equal(ep.corrupted.A, G.A[np.ix_(ep.retained, ep.retained)])


def test_masked_count_clipped():
    ep = mask_leaves(graph_from_adjacency(star_adjacency(20)), 0, 0.4, rng_seed=0)
    assert ep.masked_count[0] == 1.0


def test_random_mask_target_zero():
    ep = random_mask(graph_from_adjacency(path_adjacency(5)), 0.0, rng_seed=0)
    assert len(ep.masked) == 0


def test_masking_deterministic():
    rng = np.random.default_rng(4)
    G = graph_from_adjacency(random_connected_adjacency(rng, 40))
    for fn in (lambda s: mask_leaves(G, 3, 0.125, s), lambda s: random_mask(G, 0.125, s)):
        a, b = fn(7), fn(7)
        np.testing.assert_array_equal(a.masked, b.masked)
        np.testing.assert_array_equal(a.masked_count, b.masked_count)


def test_random_mask_disconnects_more_often():
    rng = np.random.default_rng(5)
    bfs_bad = rand_bad = 0
    for t in range(50):
        A = random_connected_adjacency(rng, 50)
        G = graph_from_adjacency(A)
        bfs_bad += not is_connected(mask_leaves(G, int(rng.integers(50)), 0.12, t).corrupted.A)
        rand_bad += not is_connected(random_mask(G, 0.12, t).corrupted.A)
    assert bfs_bad == 0
    assert rand_bad > bfs_bad
