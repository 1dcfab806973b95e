"""Missing-node generator, SN discriminator, their losses, and graph merge."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .graphcons import (CATEGORICAL, CONTINUOUS, PhenotypeTable, PopulationGraph,
                        feature_similarity, phenotype_similarity, top_k_mask)
from .masking import DEFAULT_N_MAX, DEFAULT_TARGET, MaskEpisode, mask_leaves, random_mask
from .numerics import BatchNorm, GraphConv, Linear, Module, SNLinear, Tensor

logger = logging.getLogger(__name__)


@dataclass
class InpaintConfig:
    alpha: float = 1.0
    beta: float = 1.0
    lr: float = 1e-3
    n_max: int = DEFAULT_N_MAX
    mask_target: float = DEFAULT_TARGET
    masking: str = "bfs"
    use_discriminator: bool = True
    disc_interval: int = 1  # 0 disables discriminator updates
    use_edge_prediction: bool = True
    k_prime: int | None = None


class GeneratorState(Module):
    """GCN encoder with count, feature and phenotype heads."""

    def __init__(self, in_dim: int, pheno_fields, rng: np.random.Generator,
                 enc_dims=(256, 64), feat_dims=(128, 256), pheno_hidden: int = 32,
                 noise_dim: int = 4):
        self.in_dim = in_dim
        self.noise_dim = noise_dim
        self.pheno_fields = list(pheno_fields)
        self.enc1 = GraphConv(in_dim, enc_dims[0], rng)
        self.enc2 = GraphConv(enc_dims[0], enc_dims[1], rng)
        self.count_head = Linear(enc_dims[1], 1, rng)
        self.feat1 = Linear(enc_dims[1] + noise_dim, feat_dims[0], rng)
        self.bn1 = BatchNorm(feat_dims[0])
        self.feat2 = Linear(feat_dims[0], feat_dims[1], rng)
        self.bn2 = BatchNorm(feat_dims[1])
        self.feat_out = Linear(feat_dims[1], in_dim, rng)
        self.pheno_hidden = Linear(in_dim, pheno_hidden, rng)
        for f in self.pheno_fields:
            width = len(f.domain) if f.kind == CATEGORICAL else 1
            setattr(self, "pheno_" + f.name, Linear(pheno_hidden, width, rng))

    def encode(self, X: np.ndarray, A_norm: np.ndarray) -> Tensor:
        h = self.enc1(Tensor(X), A_norm, "elu")
        return self.enc2(h, A_norm, "elu")

    def count_logits(self, Z: Tensor) -> Tensor:
        return self.count_head(Z)

    def decode(self, z_rows: Tensor, noise: np.ndarray, training: bool) -> Tensor:
        h = nx.concat([z_rows, Tensor(noise)], axis=1)
        h = self.bn1(nx.relu(self.feat1(h)), training)
        h = self.bn2(nx.relu(self.feat2(h)), training)
        return nx.tanh(self.feat_out(h))

    def phenotype_outputs(self, x_tilde: Tensor) -> dict[str, Tensor]:
        h = nx.relu(self.pheno_hidden(x_tilde))
        return {f.name: getattr(self, "pheno_" + f.name)(h) for f in self.pheno_fields}


class DiscriminatorState(Module):
    def __init__(self, in_dim: int, rng: np.random.Generator, hidden=(128, 32), power_iters: int = 1):
        self.sn1 = SNLinear(in_dim, hidden[0], rng, power_iters)
        self.sn2 = SNLinear(hidden[0], hidden[1], rng, power_iters)
        self.sn3 = SNLinear(hidden[1], 1, rng, power_iters)

    def layers(self) -> list[SNLinear]:
        return [self.sn1, self.sn2, self.sn3]

    def logits(self, x) -> Tensor:
        h = nx.relu(self.sn1(x))
        h = nx.relu(self.sn2(h))
        return self.sn3(h)

    def freeze_sigma(self, frozen: bool = True) -> None:
        """Pin each layer's current singular-value estimate (for gradient checks)."""
        for layer in self.layers():
            layer.frozen_sigma = layer.sigma() if frozen else None


@dataclass
class PhenoStats:
    """Client-local standardization for continuous phenotypes."""

    mean: dict[str, float] = field(default_factory=dict)
    std: dict[str, float] = field(default_factory=dict)

    @classmethod
    def from_table(cls, U: PhenotypeTable) -> "PhenoStats":
        st = cls()
        for f in U.fields:
            if f.kind == CONTINUOUS:
                col = U.columns[f.name]
                st.mean[f.name] = float(col.mean()) if col.size else 0.0
                s = float(col.std()) if col.size else 1.0
                st.std[f.name] = s if s > 0 else 1.0
        return st


@dataclass
class GeneratorOutput:
    Z: Tensor
    count_logits: Tensor
    count: np.ndarray
    parents: np.ndarray
    targets: np.ndarray  # source-graph index of the aligned true hidden neighbor, -1 at inference
    x_tilde: Tensor | None
    pheno: dict[str, Tensor]


def greedy_align(pred: np.ndarray, true: np.ndarray) -> np.ndarray:
    """Greedy nearest-pair matching; returns a permutation ``p`` with pred[i] ~ true[p[i]]."""
    m = len(pred)
    if m <= 1:
        return np.arange(m)
    d = ((pred[:, None, :] - true[None, :, :]) ** 2).sum(-1)
    perm = np.full(m, -1, dtype=np.int64)
    for _ in range(m):
        i, j = np.unravel_index(np.argmin(d), d.shape)
        perm[i] = j
        d[i, :] = np.inf
        d[:, j] = np.inf
    return perm


def generator_forward(ep: MaskEpisode, gen: GeneratorState, rng: np.random.Generator,
                      training: bool = True, noise: np.ndarray | None = None) -> GeneratorOutput:
    """Encode the corrupted graph and emit one generated neighbor per true hidden neighbor."""
    G = ep.corrupted
    Z = gen.encode(G.X, G.A_norm)
    logits = gen.count_logits(Z)
    count = nx._sigmoid(logits.value[:, 0])
    parents, targets = ep.parent_slots()
    if len(parents) == 0:
        return GeneratorOutput(Z, logits, count, parents, targets, None, {})
    if noise is None:
        noise = rng.standard_normal((len(parents), gen.noise_dim))
    x_tilde = gen.decode(nx.take_rows(Z, parents), noise, training)
    # align slots to hidden neighbors per parent, in feature space
    order = np.empty_like(targets)
    for i in np.unique(parents):
        rows = np.flatnonzero(parents == i)
        perm = greedy_align(x_tilde.value[rows], ep.source.X[targets[rows]])
        order[rows] = targets[rows][perm]
    pheno = gen.phenotype_outputs(x_tilde)
    return GeneratorOutput(Z, logits, count, parents, order, x_tilde, pheno)


def discriminator_prob(disc: DiscriminatorState, x) -> np.ndarray:
    return nx._sigmoid(disc.logits(x).value[:, 0])


def inpaint_losses(ep: MaskEpisode, out: GeneratorOutput, disc: DiscriminatorState | None,
                   cfg: InpaintConfig, stats: PhenoStats | None = None) -> dict[str, Tensor]:
    """All generator-side losses; each value keeps its tape."""
    stats = stats or PhenoStats.from_table(ep.source.U)
    zero = Tensor(0.0)
    probs = nx.sigmoid(out.count_logits)
    l_num = nx.sum(nx.square(probs - ep.masked_count[:, None]))
    if out.x_tilde is None:
        logger.debug("episode has no hidden nodes; reconstruction and phenotype losses are zero")
        losses = {"L_num": l_num, "L_rec": zero, "L_gen": zero, "L_pheno": zero, "L_fea": zero}
        losses["empty"] = True
        return losses
    x_true = ep.source.X[out.targets]
    l_rec = nx.sum(nx.square(out.x_tilde - x_true))
    if disc is not None and cfg.beta != 0:
        # -E[1 - log D(x~)]
        l_gen = nx.mean(nx.log_sigmoid(disc.logits(out.x_tilde))) - 1.0
    else:
        l_gen = zero
    l_pheno = zero
    U = ep.source.U
    for f in U.fields:
        pred = out.pheno[f.name]
        truth = U.columns[f.name][out.targets]
        if f.kind == CATEGORICAL:
            onehot = np.eye(len(f.domain))[truth]
            l_pheno = l_pheno - nx.sum(nx.log_softmax(pred) * onehot)
        else:
            target = (truth - stats.mean[f.name]) / stats.std[f.name]
            l_pheno = l_pheno + nx.sum(nx.square(pred - target[:, None]))
    l_fea = cfg.alpha * l_rec + cfg.beta * l_gen if cfg.beta != 0 else cfg.alpha * l_rec
    return {"L_num": l_num, "L_rec": l_rec, "L_gen": l_gen, "L_pheno": l_pheno, "L_fea": l_fea}


def discriminator_loss(real_feats: np.ndarray, fake_feats: np.ndarray, disc: DiscriminatorState) -> Tensor:
    """-E_real[1 - log D(x)] - E_fake[log D(x~)], D = sigmoid of the discriminator logit."""
    if len(real_feats) == 0 or len(fake_feats) == 0:
        raise ValueError("discriminator loss needs nonempty real and fake batches")
    real = nx.log_sigmoid(disc.logits(Tensor(real_feats)))
    fake = nx.log_sigmoid(disc.logits(Tensor(fake_feats)))
    return (nx.mean(real) - 1.0) - nx.mean(fake)


def sample_episode(G: PopulationGraph, cfg: InpaintConfig, rng: np.random.Generator) -> MaskEpisode:
    seed = int(rng.integers(2 ** 63))
    if cfg.masking == "bfs":
        root = int(rng.integers(G.n))
        return mask_leaves(G, root, cfg.mask_target, seed, cfg.n_max)
    if cfg.masking == "random":
        return random_mask(G, cfg.mask_target, seed, cfg.n_max)
    raise ValueError(f"unknown masking {cfg.masking!r}")


def local_inpaint_train_step(G: PopulationGraph, gen: GeneratorState, disc: DiscriminatorState,
                             cfg: InpaintConfig, rng: np.random.Generator, step: int = 0,
                             stats: PhenoStats | None = None) -> dict[str, float]:
    """One episode: generator update, then (on schedule) a discriminator update."""
    ep = sample_episode(G, cfg, rng)
    out = generator_forward(ep, gen, rng, training=True)
    use_disc = cfg.use_discriminator
    losses = inpaint_losses(ep, out, disc if use_disc else None, cfg, stats)
    total = losses["L_num"] + losses["L_fea"] + losses["L_pheno"]
    for p in gen.params():
        p.zero_grad()
    total.backward()
    nx.adam_step(gen.params(), cfg.lr)
    report = {k: float(v.value) for k, v in losses.items() if isinstance(v, Tensor)}
    report["masked_fraction"] = ep.masked_fraction
    if use_disc and cfg.disc_interval > 0 and step % cfg.disc_interval == 0 and out.x_tilde is not None:
        l_dis = discriminator_loss(ep.source.X[out.targets], out.x_tilde.value, disc)
        dparams = disc.params()
        for p in dparams:
            p.zero_grad()
        l_dis.backward()
        nx.adam_step(dparams, cfg.lr)
        report["L_dis"] = float(l_dis.value)
    else:
        for p in disc.params():
            p.zero_grad()
    return report


# --------------------------------------------------------------- graph merge

@dataclass
class FusedGraph(PopulationGraph):
    parent: np.ndarray | None = None  # parent real node of each node, -1 for real nodes
    empty_generation: bool = False

    @property
    def n_real(self) -> int:
        return int((~self.generated).sum())


def predict_counts(G: PopulationGraph, gen: GeneratorState, n_max: int) -> np.ndarray:
    Z = gen.encode(G.X, G.A_norm)
    prob = nx._sigmoid(gen.count_logits(Z).value[:, 0])
    return np.clip(np.rint(prob * n_max), 0, n_max).astype(np.int64)


def generate_nodes(G: PopulationGraph, gen: GeneratorState, counts: np.ndarray,
                   rng: np.random.Generator, stats: PhenoStats | None = None
                   ) -> tuple[np.ndarray, np.ndarray, PhenotypeTable]:
    """Features, parents and phenotypes of generated neighbors for every real node."""
    stats = stats or PhenoStats.from_table(G.U)
    parents = np.repeat(np.arange(G.n), counts)
    if len(parents) == 0:
        empty = PhenotypeTable(list(G.U.fields), {f.name: G.U.columns[f.name][:0] for f in G.U.fields})
        return np.zeros((0, G.X.shape[1])), parents, empty
    Z = gen.encode(G.X, G.A_norm)
    noise = rng.standard_normal((len(parents), gen.noise_dim))
    x_tilde = gen.decode(nx.take_rows(Z, parents), noise, training=False)
    outs = gen.phenotype_outputs(x_tilde)
    cols = {}
    for f in G.U.fields:
        v = outs[f.name].value
        if f.kind == CATEGORICAL:
            cols[f.name] = v.argmax(axis=1)
        else:
            cols[f.name] = v[:, 0] * stats.std[f.name] + stats.mean[f.name]
    return x_tilde.value, parents, PhenotypeTable(list(G.U.fields), cols)


def attach_nodes(G: PopulationGraph, X_new: np.ndarray, parents: np.ndarray, U_new: PhenotypeTable,
                 k_prime: int, use_edge_prediction: bool = True) -> FusedGraph:
    """Append nodes to ``G`` with similarity-derived edges plus a mandatory parent edge."""
    n, g = G.n, len(parents)
    if g == 0:
        logger.info("no nodes generated; fused graph equals the base graph")
        return FusedGraph(X=G.X, U=G.U, A=G.A, y=G.y, labeled_mask=G.labeled_mask, H=G.H,
                          generated=G.generated.copy(), params=G.params, pca_basis=G.pca_basis,
                          pca_mean=G.pca_mean, parent=np.full(n, -1), empty_generation=True)
    N = n + g
    A = np.zeros((N, N))
    A[:n, :n] = G.A
    H_new = (X_new - G.pca_mean) @ G.pca_basis
    H_all = np.vstack([G.H, H_new])
    U_all = G.U.concat(U_new)
    rows = np.arange(g)
    if use_edge_prediction:
        S = feature_similarity(H_new, G.params.sigma, H_all)
        St = phenotype_similarity(U_new, G.params.gamma, U_all)
        W = S * St
        self_cols = np.zeros((g, N), dtype=bool)
        self_cols[rows, n + rows] = True
        keep = top_k_mask(W, k_prime, exclude=self_cols)
        block = np.where(keep, W, 0.0)
        parent_w = np.maximum(W[rows, parents], S[rows, parents])
        block[rows, parents] = parent_w
    else:
        block = np.zeros((g, N))
        block[rows, parents] = 1.0
    A[n:, :] = block
    A = np.maximum(A, A.T)
    A[n + rows, n + rows] += 1.0
    y = np.concatenate([G.y, np.zeros(g, dtype=G.y.dtype)])
    labeled = np.concatenate([G.labeled_mask, np.zeros(g, dtype=bool)])
    generated = np.concatenate([G.generated, np.ones(g, dtype=bool)])
    parent = np.concatenate([np.full(n, -1), parents])
    return FusedGraph(X=np.vstack([G.X, X_new]), U=U_all, A=A, y=y, labeled_mask=labeled, H=H_all,
                      generated=generated, params=G.params, pca_basis=G.pca_basis,
                      pca_mean=G.pca_mean, parent=parent)


def graph_merge(G: PopulationGraph, gen: GeneratorState, cfg: InpaintConfig,
                rng: np.random.Generator, counts: np.ndarray | None = None) -> FusedGraph:
    """Inpaint a full local graph with the trained generator."""
    if counts is None:
        counts = predict_counts(G, gen, cfg.n_max)
    X_new, parents, U_new = generate_nodes(G, gen, counts, rng)
    k_prime = cfg.k_prime if cfg.k_prime is not None else G.params.k
    return attach_nodes(G, X_new, parents, U_new, k_prime, cfg.use_edge_prediction)


def random_inpaint(G: PopulationGraph, counts: np.ndarray, rng: np.random.Generator,
                   k_prime: int | None = None) -> FusedGraph:
    """Stand-in inpainting: same node counts, features from a fitted normal, random edges."""
    k_prime = k_prime if k_prime is not None else G.params.k
    parents = np.repeat(np.arange(G.n), counts)
    g = len(parents)
    mu, sd = G.X.mean(axis=0), G.X.std(axis=0)
    X_new = rng.normal(mu, sd, size=(g, G.X.shape[1]))
    cols = {f.name: G.U.columns[f.name][rng.integers(G.n, size=g)] for f in G.U.fields}
    U_new = PhenotypeTable(list(G.U.fields), cols)
    fused = attach_nodes(G, X_new, parents, U_new, k_prime, use_edge_prediction=False)
    if g == 0:
        return fused
    # discard the parent structure; wire each node to random real nodes instead
    n, N = G.n, G.n + g
    A = np.zeros((N, N))
    A[:n, :n] = G.A
    weights = G.A[~np.eye(n, dtype=bool) & (G.A > 0)]
    w = float(weights.mean()) if weights.size else 1.0
    for j in range(g):
        nbrs = rng.choice(n, size=min(k_prime, n), replace=False)
        A[n + j, nbrs] = w
    A = np.maximum(A, A.T)
    A[np.arange(n, N), np.arange(n, N)] += 1.0
    fused.A = A
    fused._a_norm = None
    return fused


def frechet_distance(a: np.ndarray, b: np.ndarray) -> float:
    """Frechet distance between Gaussians fitted to the rows of ``a`` and ``b``."""
    from scipy import linalg

    mu1, mu2 = a.mean(0), b.mean(0)
    c1 = np.cov(a, rowvar=False)
    c2 = np.cov(b, rowvar=False)
    covmean = linalg.sqrtm(c1 @ c2)
    covmean = np.real(covmean)
    return float(((mu1 - mu2) ** 2).sum() + np.trace(c1 + c2 - 2.0 * covmean))
