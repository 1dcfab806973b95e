"""Synthetic population cohorts, client partitioning, and the dataset file format."""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .graphcons import (CATEGORICAL, CONTINUOUS, GraphParams, PhenotypeField, PhenotypeTable,
                        PopulationGraph, construct_graph, induced_subgraph)

MAGIC = b"FNI1"
FORMAT_VERSION = 1
LABELED_RATE = 0.8


class DatasetFormatError(ValueError):
    pass


@dataclass
class PhenoFieldSpec:
    """One phenotype with a class-conditional distribution.

    Categorical: ``class_probs[c]`` is the distribution over ``domain`` for class c.
    Continuous: normal with ``class_means[c]`` and ``std``.
    """

    name: str
    kind: str
    domain: tuple = ()
    class_probs: tuple = ()
    class_means: tuple = (0.0, 0.0)
    std: float = 1.0

    def field(self) -> PhenotypeField:
        return PhenotypeField(self.name, self.kind, self.domain)


def default_pheno_spec() -> list[PhenoFieldSpec]:
    return [
        PhenoFieldSpec("sex", CATEGORICAL, ("F", "M"), class_probs=((0.45, 0.55), (0.35, 0.65))),
        PhenoFieldSpec("age", CONTINUOUS, class_means=(70.0, 80.0), std=4.0),
    ]


@dataclass
class CohortSpec:
    n: int = 500
    d: int = 50
    class_sep: float = 2.5
    pheno_spec: list[PhenoFieldSpec] = field(default_factory=default_pheno_spec)
    label_balance: float = 0.5
    seed: int = 0
    labeled_rate: float = LABELED_RATE
    k: int = 10
    gamma: float = 2.0
    d_h: int = 64
    sigma: float | None = None

    def validate(self, min_clients: int = 1) -> None:
        if self.n < 2 * min_clients:
            raise ValueError(f"n={self.n} is too small for {min_clients} clients")
        if self.d < 1:
            raise ValueError("d must be positive")
        if self.class_sep < 0:
            raise ValueError("class_sep must be nonnegative")
        if not 0 < self.label_balance < 1:
            raise ValueError("label_balance must lie in (0, 1)")
        if not 0 < self.labeled_rate <= 1:
            raise ValueError("labeled_rate must lie in (0, 1]")
        for f in self.pheno_spec:
            if f.kind == CATEGORICAL and len(f.class_probs) != 2:
                raise ValueError(f"categorical field {f.name!r} needs one distribution per class")

    def graph_params(self) -> GraphParams:
        return GraphParams(k=self.k, sigma=self.sigma, gamma=self.gamma, d_h=self.d_h)


def zscore(X: np.ndarray) -> np.ndarray:
    sd = X.std(axis=0)
    sd[sd == 0] = 1.0
    return (X - X.mean(axis=0)) / sd


def generate_population(spec: CohortSpec) -> PopulationGraph:
    """Two unit-covariance Gaussian classes ``class_sep`` apart, then z-scored; graph built on top."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    n1 = int(round(spec.label_balance * spec.n))
    y = np.zeros(spec.n, dtype=np.int64)
    y[:n1] = 1
    y = y[rng.permutation(spec.n)]
    direction = rng.standard_normal(spec.d)
    direction /= np.linalg.norm(direction)
    X = rng.standard_normal((spec.n, spec.d)) + np.outer(y, direction) * spec.class_sep
    X = zscore(X)
    cols = {}
    for f in spec.pheno_spec:
        if f.kind == CATEGORICAL:
            probs = np.asarray(f.class_probs, dtype=np.float64)
            cols[f.name] = np.array([rng.choice(len(f.domain), p=probs[c]) for c in y])
        else:
            means = np.asarray(f.class_means, dtype=np.float64)
            cols[f.name] = rng.normal(means[y], f.std)
    U = PhenotypeTable([f.field() for f in spec.pheno_spec], cols)
    labeled = np.zeros(spec.n, dtype=bool)
    labeled[rng.permutation(spec.n)[:int(round(spec.labeled_rate * spec.n))]] = True
    return construct_graph(X, U, y, labeled, spec.graph_params())


def partition_indices(n: int, M: int, seed) -> list[np.ndarray]:
    """Uniform random split into M parts whose sizes differ by at most one."""
    if M < 1:
        raise ValueError("M must be >= 1")
    perm = np.random.default_rng(seed).permutation(n)
    return [np.sort(part) for part in np.array_split(perm, M)]


def partition_clients(G: PopulationGraph, M: int, seed, rebuild: bool = True
                      ) -> list[PopulationGraph]:
    """Split nodes across M silos. By default each silo rebuilds its own graph."""
    parts = partition_indices(G.n, M, seed)
    out = []
    for idx in parts:
        if rebuild:
            out.append(construct_graph(G.X[idx], G.U.subset(idx), G.y[idx], G.labeled_mask[idx],
                                       G.params.requested()))
        else:
            out.append(induced_subgraph(G, idx))
    return out


# ----------------------------------------------------------------- file I/O

def _section(tag: bytes, payload: bytes) -> bytes:
    return tag + struct.pack("<Q", len(payload)) + payload


def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<H", len(raw)) + raw


def save_dataset(G: PopulationGraph, path) -> None:
    n, d = G.X.shape
    feat = struct.pack("<II", n, d) + G.X.astype("<f8").tobytes()
    phen = [struct.pack("<H", len(G.U.fields))]
    for f in G.U.fields:
        phen.append(_pack_str(f.name))
        phen.append(struct.pack("<B", 0 if f.kind == CATEGORICAL else 1))
        phen.append(struct.pack("<H", len(f.domain)))
        phen.extend(_pack_str(v) for v in f.domain)
        col = G.U.columns[f.name]
        phen.append(col.astype("<u4").tobytes() if f.kind == CATEGORICAL else col.astype("<f8").tobytes())
    labels = struct.pack("<I", n) + G.y.astype("<u1").tobytes()
    masks = (struct.pack("<I", n) + np.packbits(G.labeled_mask.astype(np.uint8), bitorder="little").tobytes()
             + np.packbits(G.generated.astype(np.uint8), bitorder="little").tobytes())
    p = G.params
    sigma = p.sigma if p.sigma_fixed else math.nan
    parm = struct.pack("<IddIB", p.k, sigma, p.gamma, p.d_h, int(p.sigma_fixed))
    body = (MAGIC + struct.pack("<B", FORMAT_VERSION)
            + _section(b"FEAT", feat) + _section(b"PHEN", b"".join(phen))
            + _section(b"LABL", labels) + _section(b"MASK", masks) + _section(b"PARM", parm))
    Path(path).write_bytes(body)


class _Reader:
    def __init__(self, buf: bytes, what: str):
        self.buf, self.off, self.what = buf, 0, what

    def take(self, fmt: str):
        try:
            vals = struct.unpack_from(fmt, self.buf, self.off)
        except struct.error:
            raise DatasetFormatError(f"truncated {self.what} section") from None
        self.off += struct.calcsize(fmt)
        return vals

    def raw(self, nbytes: int) -> bytes:
        if self.off + nbytes > len(self.buf):
            raise DatasetFormatError(f"truncated {self.what} section")
        out = self.buf[self.off:self.off + nbytes]
        self.off += nbytes
        return out

    def string(self) -> str:
        (ln,) = self.take("<H")
        return self.raw(ln).decode("utf-8")


def load_dataset(path) -> PopulationGraph:
    """Read a dataset file and rebuild its graph with the stored construction parameters."""
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise DatasetFormatError(f"bad magic {buf[:4]!r}; not a dataset file")
    if len(buf) < 5:
        raise DatasetFormatError("truncated header")
    if buf[4] != FORMAT_VERSION:
        raise DatasetFormatError(f"unsupported dataset version {buf[4]}")
    sections = {}
    off = 5
    while off < len(buf):
        if off + 12 > len(buf):
            raise DatasetFormatError("truncated section header")
        tag = buf[off:off + 4]
        (ln,) = struct.unpack_from("<Q", buf, off + 4)
        off += 12
        if off + ln > len(buf):
            raise DatasetFormatError(f"section {tag!r} is truncated")
        sections[tag] = buf[off:off + ln]
        off += ln
    for tag in (b"FEAT", b"PHEN", b"LABL", b"MASK", b"PARM"):
        if tag not in sections:
            raise DatasetFormatError(f"missing section {tag.decode()}")

    r = _Reader(sections[b"FEAT"], "FEAT")
    n, d = r.take("<II")
    X = np.frombuffer(r.raw(8 * n * d), dtype="<f8").reshape(n, d).astype(np.float64)

    r = _Reader(sections[b"PHEN"], "PHEN")
    (q,) = r.take("<H")
    fields, cols = [], {}
    for _ in range(q):
        name = r.string()
        (kind,) = r.take("<B")
        if kind not in (0, 1):
            raise DatasetFormatError(f"unknown phenotype kind code {kind}")
        (nd,) = r.take("<H")
        domain = tuple(r.string() for _ in range(nd))
        if kind == 0:
            fields.append(PhenotypeField(name, CATEGORICAL, domain))
            cols[name] = np.frombuffer(r.raw(4 * n), dtype="<u4").astype(np.int64)
        else:
            fields.append(PhenotypeField(name, CONTINUOUS, domain))
            cols[name] = np.frombuffer(r.raw(8 * n), dtype="<f8").astype(np.float64)
    U = PhenotypeTable(fields, cols)

    r = _Reader(sections[b"LABL"], "LABL")
    (nl,) = r.take("<I")
    if nl != n:
        raise DatasetFormatError(f"label count {nl} does not match {n} nodes")
    y = np.frombuffer(r.raw(n), dtype="<u1").astype(np.int64)

    r = _Reader(sections[b"MASK"], "MASK")
    (nm,) = r.take("<I")
    if nm != n:
        raise DatasetFormatError(f"mask length {nm} does not match {n} nodes")
    nb = (n + 7) // 8
    labeled = np.unpackbits(np.frombuffer(r.raw(nb), dtype=np.uint8), bitorder="little")[:n].astype(bool)
    generated = np.unpackbits(np.frombuffer(r.raw(nb), dtype=np.uint8), bitorder="little")[:n].astype(bool)

    r = _Reader(sections[b"PARM"], "PARM")
    k, sigma, gamma, d_h, fixed = r.take("<IddIB")
    params = GraphParams(k=k, sigma=sigma if fixed else None, gamma=gamma, d_h=d_h)
    G = construct_graph(X, U, y, labeled, params)
    G.generated = generated
    return G
