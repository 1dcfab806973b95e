"""Population graph construction from features and phenotypes."""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

logger = logging.getLogger(__name__)

CATEGORICAL = "categorical"
CONTINUOUS = "continuous"


class SchemaError(ValueError):
    pass


@dataclass(frozen=True)
class PhenotypeField:
    name: str
    kind: str
    domain: tuple = ()  # categorical values, in code order

    def __post_init__(self):
        object.__setattr__(self, "domain", tuple(str(v) for v in self.domain))
        if self.kind not in (CATEGORICAL, CONTINUOUS):
            raise SchemaError(f"unknown phenotype kind {self.kind!r} for field {self.name!r}")
        if self.kind == CATEGORICAL and len(self.domain) < 2:
            raise SchemaError(f"categorical field {self.name!r} needs a domain of >= 2 values")


@dataclass
class PhenotypeTable:
    """Per-node phenotype records. Categorical columns store domain codes."""

    fields: list[PhenotypeField]
    columns: dict[str, np.ndarray]

    def __post_init__(self):
        lengths = {len(self.columns[f.name]) for f in self.fields}
        if len(lengths) > 1:
            raise SchemaError("phenotype columns have different lengths")
        for f in self.fields:
            col = self.columns[f.name]
            if f.kind == CATEGORICAL:
                col = np.asarray(col, dtype=np.int64)
                if col.size and (col.min() < 0 or col.max() >= len(f.domain)):
                    raise SchemaError(f"field {f.name!r} has codes outside its domain")
            else:
                col = np.asarray(col, dtype=np.float64)
            self.columns[f.name] = col

    def __len__(self):
        return len(self.columns[self.fields[0].name]) if self.fields else 0

    def subset(self, idx) -> "PhenotypeTable":
        idx = np.asarray(idx, dtype=np.int64)
        return PhenotypeTable(list(self.fields), {f.name: self.columns[f.name][idx] for f in self.fields})

    def concat(self, other: "PhenotypeTable") -> "PhenotypeTable":
        return PhenotypeTable(list(self.fields), {
            f.name: np.concatenate([self.columns[f.name], other.columns[f.name]])
            for f in self.fields})


@dataclass
class GraphParams:
    """Construction parameters retained with a graph so generated nodes reuse them."""

    k: int = 10
    sigma: float | None = None
    gamma: float = 2.0
    d_h: int = 64
    sigma_fixed: bool = False  # False: sigma was derived from the data

    def requested(self) -> "GraphParams":
        """Parameters to rebuild with on a different node set."""
        return GraphParams(self.k, self.sigma if self.sigma_fixed else None, self.gamma,
                           self.d_h, self.sigma_fixed)


@dataclass
class PopulationGraph:
    X: np.ndarray
    U: PhenotypeTable
    A: np.ndarray
    y: np.ndarray
    labeled_mask: np.ndarray
    H: np.ndarray | None = None
    generated: np.ndarray | None = None  # provenance flag, True for generated nodes
    params: GraphParams = field(default_factory=GraphParams)
    pca_basis: np.ndarray | None = None
    pca_mean: np.ndarray | None = None
    node_ids: np.ndarray | None = None  # ids local to the owning silo
    _a_norm: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        n = self.X.shape[0]
        if self.generated is None:
            self.generated = np.zeros(n, dtype=bool)
        if self.node_ids is None:
            self.node_ids = np.arange(n)

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def A_norm(self) -> np.ndarray:
        if self._a_norm is None:
            from .numerics import normalize_adjacency
            self._a_norm = normalize_adjacency(self.A)
        return self._a_norm


def pca_reduce(X: np.ndarray, d_h: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Project onto the top ``d_h`` principal directions.

    Column signs are fixed so each basis column's largest-magnitude entry is positive.
    Returns ``(H, basis, mean)``.
    """
    X = np.asarray(X, dtype=np.float64)
    n, d = X.shape
    if d_h > min(n, d):
        raise ValueError(f"d_h={d_h} exceeds achievable rank min(n, d)={min(n, d)}")
    mean = X.mean(axis=0)
    Xc = X - mean
    cov = Xc.T @ Xc / max(n - 1, 1)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1][:d_h]
    basis = evecs[:, order]
    pivot = np.abs(basis).argmax(axis=0)
    signs = np.sign(basis[pivot, np.arange(d_h)])
    signs[signs == 0] = 1.0
    basis = basis * signs
    return Xc @ basis, basis, mean


def pairwise_sq_dists(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    sq = (A ** 2).sum(1)[:, None] + (B ** 2).sum(1)[None, :] - 2.0 * A @ B.T
    return np.maximum(sq, 0.0)


def default_sigma(H: np.ndarray) -> float:
    """Mean pairwise Euclidean distance between distinct nodes."""
    n = H.shape[0]
    if n < 2:
        return 1.0
    d = np.sqrt(pairwise_sq_dists(H, H))
    s = d[np.triu_indices(n, 1)].mean()
    return float(s) if s > 0 else 1.0


def feature_similarity(H: np.ndarray, sigma: float, H_other: np.ndarray | None = None) -> np.ndarray:
    """Gaussian kernel exp(-||h_i - h_j||^2 / (2 sigma^2))."""
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    other = H if H_other is None else H_other
    S = np.exp(-pairwise_sq_dists(H, other) / (2.0 * sigma ** 2))
    if H_other is None:
        np.fill_diagonal(S, 1.0)
    return S


def phenotype_similarity(U: PhenotypeTable, gamma: float, U_other: PhenotypeTable | None = None) -> np.ndarray:
    """Count of phenotype fields on which two nodes agree."""
    other = U if U_other is None else U_other
    S = np.zeros((len(U), len(other)))
    for f in U.fields:
        a, b = U.columns[f.name], other.columns[f.name]
        if f.kind == CATEGORICAL:
            S += a[:, None] == b[None, :]
        elif f.kind == CONTINUOUS:
            if not gamma > 0:
                raise ValueError("gamma must be positive for continuous fields")
            S += np.abs(a[:, None] - b[None, :]) <= gamma
        else:
            raise SchemaError(f"unknown phenotype kind {f.kind!r}")
    return S


def top_k_mask(W: np.ndarray, k: int, exclude: np.ndarray | None = None) -> np.ndarray:
    """Boolean mask of the k largest positive entries per row, ties to lower column index."""
    n, m = W.shape
    W = W.copy()
    if exclude is not None:
        W[exclude] = -np.inf
    keep = np.zeros((n, m), dtype=bool)
    k = min(k, m)
    # stable sort on -W keeps lower indices first among equal weights
    order = np.argsort(-W, axis=1, kind="stable")[:, :k]
    rows = np.repeat(np.arange(n), k)
    keep[rows, order.ravel()] = True
    return keep & (W > 0)


def build_adjacency(S: np.ndarray, S_tilde: np.ndarray, k: int) -> np.ndarray:
    """Fuse, sparsify to top-k per row, symmetrize by max, add self-loops."""
    if S.shape != S_tilde.shape:
        raise ValueError(f"similarity shapes differ: {S.shape} vs {S_tilde.shape}")
    if k < 1:
        raise ValueError("k must be >= 1")
    n = S.shape[0]
    if k >= n:
        warnings.warn(f"k={k} >= n={n}; keeping all off-diagonal entries", stacklevel=2)
    A0 = S * S_tilde
    keep = top_k_mask(A0, k, exclude=np.eye(n, dtype=bool))
    A = np.where(keep, A0, 0.0)
    A = np.maximum(A, A.T)
    return A + np.eye(n)


def construct_graph(X: np.ndarray, U: PhenotypeTable, y: np.ndarray, labeled_mask: np.ndarray,
                    params: GraphParams | None = None) -> PopulationGraph:
    """Full pipeline: PCA, both similarities, fusion and sparsification."""
    params = GraphParams(**vars(params)) if params is not None else GraphParams()
    n, d = X.shape
    d_h = min(params.d_h, n, d)
    H, basis, mu = pca_reduce(X, d_h)
    if params.sigma is not None:
        params.sigma_fixed = True
        sigma = params.sigma
    else:
        sigma = params.sigma = default_sigma(H)
    params.d_h = d_h
    S = feature_similarity(H, sigma)
    St = phenotype_similarity(U, params.gamma)
    A = build_adjacency(S, St, params.k) if n > 1 else np.eye(n)
    return PopulationGraph(X=np.asarray(X, dtype=np.float64), U=U, A=A, y=np.asarray(y),
                           labeled_mask=np.asarray(labeled_mask, dtype=bool), H=H,
                           params=params, pca_basis=basis, pca_mean=mu)


def induced_subgraph(G: PopulationGraph, idx: Sequence[int]) -> PopulationGraph:
    idx = np.asarray(idx, dtype=np.int64)
    return PopulationGraph(X=G.X[idx], U=G.U.subset(idx), A=G.A[np.ix_(idx, idx)], y=G.y[idx],
                           labeled_mask=G.labeled_mask[idx],
                           H=None if G.H is None else G.H[idx],
                           generated=G.generated[idx], params=GraphParams(**vars(G.params)),
                           pca_basis=G.pca_basis, pca_mean=G.pca_mean,
                           node_ids=np.arange(len(idx)))
