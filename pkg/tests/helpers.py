import numpy as np

from fedni.graphcons import (CATEGORICAL, CONTINUOUS, PhenotypeField, PhenotypeTable,
                             PopulationGraph)

FIELDS = [PhenotypeField("sex", CATEGORICAL, ("F", "M")), PhenotypeField("age", CONTINUOUS)]


def random_table(rng, n):
    return PhenotypeTable(list(FIELDS), {"sex": rng.integers(0, 2, n),
                                         "age": rng.normal(70, 5, n)})


def graph_from_adjacency(A, d=3, seed=0):
    """Wrap a bare adjacency in a PopulationGraph with random payloads."""
    rng = np.random.default_rng(seed)
    A = np.asarray(A, dtype=np.float64)
    n = A.shape[0]
    A = A.copy()
    np.fill_diagonal(A, 1.0)
    return PopulationGraph(X=rng.normal(size=(n, d)), U=random_table(rng, n), A=A,
                           y=rng.integers(0, 2, n), labeled_mask=np.ones(n, dtype=bool))


def random_connected_adjacency(rng, n, extra=0.02):
    """Random spanning tree plus sparse extra edges."""
    A = np.zeros((n, n))
    order = rng.permutation(n)
    for i in range(1, n):
        u, v = order[i], order[rng.integers(0, i)]
        A[u, v] = A[v, u] = 1.0
    R = np.triu(rng.random((n, n)) < extra, 1)
    A = np.maximum(A, (R | R.T).astype(float))
    return A


def path_adjacency(n):
    A = np.zeros((n, n))
    for i in range(n - 1):
        A[i, i + 1] = A[i + 1, i] = 1.0
    return A


def star_adjacency(leaves):
    A = np.zeros((leaves + 1, leaves + 1))
    A[0, 1:] = A[1:, 0] = 1.0
    return A
