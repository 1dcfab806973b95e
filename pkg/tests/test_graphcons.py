import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fedni.graphcons import (CATEGORICAL, CONTINUOUS, PhenotypeField, PhenotypeTable,
                             SchemaError, build_adjacency, construct_graph, feature_similarity,
                             pca_reduce, phenotype_similarity)

from .oracles import brute_adjacency, brute_feature_similarity, brute_phenotype_similarity


def table(rng, n, n_cat=1, n_cont=1, cat_size=2):
    fields, cols = [], {}
    for i in range(n_cat):
        fields.append(PhenotypeField(f"c{i}", CATEGORICAL, tuple(range(cat_size))))
        cols[f"c{i}"] = rng.integers(0, cat_size, n)
    for i in range(n_cont):
        fields.append(PhenotypeField(f"a{i}", CONTINUOUS))
        cols[f"a{i}"] = rng.integers(60, 70, n).astype(float)
    return PhenotypeTable(fields, cols)


# ----------------------------------------------------------------------- pca

def test_pca_identical_rows_gives_zero():
    H, _, _ = pca_reduce(np.tile([1.0, 2.0, 3.0], (6, 1)), 2)
    assert np.all(H == 0)


def test_pca_line_direction():
    t = np.linspace(-3, 3, 11)
    _, basis, _ = pca_reduce(np.column_stack([t, t]), 1)
    np.testing.assert_allclose(basis[:, 0], [1 / math.sqrt(2), 1 / math.sqrt(2)], atol=1e-6)


def test_pca_reconstruction_error_equals_dropped_eigenvalues():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(20, 10))
    H, basis, mu = pca_reduce(X, 3)
    resid = X - mu - H @ basis.T
    err = (resid ** 2).sum() / (20 - 1)
    evals = np.sort(np.linalg.eigvalsh(np.cov(X, rowvar=False)))[::-1]
    assert abs(err - evals[3:].sum()) / evals[3:].sum() < 1e-6


def test_pca_rank_error():
    with pytest.raises(ValueError, match="achievable rank"):
        pca_reduce(np.ones((3, 5)), 4)


# ---------------------------------------------------------------- similarity

def test_feature_similarity_values():
    sigma = 1.5
    H = np.array([[0.0, 0.0], [0.0, 0.0], [math.sqrt(2) * sigma, 0.0]])
    S = feature_similarity(H, sigma)
    assert S[0, 1] == 1.0
    assert abs(S[0, 2] - math.exp(-1)) < 1e-6


def test_feature_similarity_brute_force():
    rng = np.random.default_rng(1)
    H = rng.normal(size=(5, 3))
    np.testing.assert_allclose(feature_similarity(H, 0.8), brute_feature_similarity(H, 0.8), atol=1e-12)


def test_feature_similarity_bad_sigma():
    with pytest.raises(ValueError):
        feature_similarity(np.ones((2, 2)), 0.0)


def test_phenotype_similarity_cases():
    f = [PhenotypeField("sex", CATEGORICAL, ("F", "M")), PhenotypeField("age", CONTINUOUS)]
    U = PhenotypeTable(f, {"sex": [0, 0, 1], "age": [30.0, 31.0, 40.0]})
    S = phenotype_similarity(U, 2.0)
    assert S[0, 1] == 2
    assert S[0, 2] == 0


def test_phenotype_similarity_brute_force():
    rng = np.random.default_rng(2)
    U = table(rng, 9, n_cat=2, n_cont=1, cat_size=3)
    np.testing.assert_array_equal(phenotype_similarity(U, 2.0), brute_phenotype_similarity(U, 2.0))


def test_unknown_field_kind():
    with pytest.raises(SchemaError):
        PhenotypeField("x", "ordinal")


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 1000), st.floats(0.5, 5.0), st.floats(0.0, 5.0))
def test_phenotype_similarity_monotone_in_gamma(seed, gamma, extra):
    U = table(np.random.default_rng(seed), 8)
    assert np.all(phenotype_similarity(U, gamma + extra) >= phenotype_similarity(U, gamma))


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 1000))
def test_similarities_permutation_equivariant(seed):
    rng = np.random.default_rng(seed)
    H = rng.normal(size=(7, 3))
    U = table(rng, 7)
    p = rng.permutation(7)
    np.testing.assert_allclose(feature_similarity(H[p], 1.0), feature_similarity(H, 1.0)[np.ix_(p, p)])
    np.testing.assert_array_equal(phenotype_similarity(U.subset(p), 2.0),
                                  phenotype_similarity(U, 2.0)[np.ix_(p, p)])


# ----------------------------------------------------------------- adjacency

def test_annihilating_hadamard_gives_identity():
    A = build_adjacency(np.ones((4, 4)), np.zeros((4, 4)), 2)
    np.testing.assert_array_equal(A, np.eye(4))


def test_top1_keeps_heavier_edge():
    S = np.array([[1.0, 0.9, 0.1], [0.9, 1.0, 0.0], [0.1, 0.0, 1.0]])
    A = build_adjacency(S, np.ones((3, 3)), 1)
    # row 0 keeps only 0.9; node 2 keeps its own best edge (0.1 to node 0), restored by symmetrization
    assert A[0, 1] == 0.9
    assert A[2, 0] == 0.1 and A[0, 2] == 0.1


def test_adjacency_brute_force():
    rng = np.random.default_rng(3)
    S = rng.random((8, 8))
    S = (S + S.T) / 2
    St = rng.integers(0, 3, (8, 8)).astype(float)
    St = np.maximum(St, St.T)
    np.testing.assert_array_equal(build_adjacency(S, St, 3), brute_adjacency(S, St, 3))


def test_adjacency_k_too_large_warns():
    with pytest.warns(UserWarning):
        A = build_adjacency(np.full((3, 3), 0.5), np.ones((3, 3)), 5)
    assert np.count_nonzero(A) == 9


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 6))
def test_adjacency_invariants(seed, k):
    rng = np.random.default_rng(seed)
    n = 9
    S = feature_similarity(rng.normal(size=(n, 2)), 1.0)
    St = phenotype_similarity(table(rng, n), 2.0)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        A = build_adjacency(S, St, k)
    assert np.array_equal(A, A.T)
    assert np.all(A >= 0)
    assert np.all(np.diag(A) >= 1)
    assert np.all(A.sum(1) > 0)


def test_construct_graph_pipeline():
    rng = np.random.default_rng(4)
    X = rng.normal(size=(30, 6))
    G = construct_graph(X, table(rng, 30), rng.integers(0, 2, 30), np.ones(30, bool))
    assert G.H.shape == (30, 6)
    assert G.params.sigma > 0 and not G.params.sigma_fixed
    assert np.array_equal(G.A, G.A.T)
    np.testing.assert_allclose(G.A_norm, G.A_norm.T)
