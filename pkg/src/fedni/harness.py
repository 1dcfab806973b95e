"""Experiment configuration, baseline pipelines, cross-validation and ablations."""
from __future__ import annotations

import dataclasses
import itertools
import json
import logging
import math
import os
from dataclasses import dataclass
from typing import Any

import numpy as np
from scipy import stats

from .classifier import (METRIC_NAMES, ClassifierState, MetricsReport, aggregate_reports,
                         classifier_forward, evaluate_metrics, train_local)
from .datagen import CohortSpec, generate_population, partition_clients
from .federation import (ClassifierClient, FedConfig, InpaintClient, RoundLog, run_phase1,
                         run_phase2)
from .graphcons import PopulationGraph
from .inpaint import (DiscriminatorState, GeneratorState, InpaintConfig, frechet_distance,
                      generator_forward, graph_merge, predict_counts, random_inpaint, sample_episode)

logger = logging.getLogger(__name__)

MODES = ("fedni", "fedgcn", "localgcn", "centralgcn", "random_inpaint")
INPAINT_MODES = ("fedni", "random_inpaint")
SEED_ENV = "FEDNI_SEED"


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    """Every knob of a run. Defaults follow the published settings."""

    mode: str = "fedni"
    inpaint_fl: str = "fl_g"
    masking: str = "bfs"
    use_discriminator: bool = True
    use_edge_prediction: bool = True
    alpha: float = 1.0
    beta: float = 1.0
    k: int = 10
    k_prime: int | None = None
    gamma: float = 2.0
    sigma: float | None = None
    n_max: int = 5
    mask_target: float = 0.125
    disc_interval: int = 1
    remerge_each_round: bool = False  # experimental: fresh graph merge before every phase-two round
    M: int = 5
    E1: int = 10
    T1: int = 30
    E2: int = 10
    T2: int = 10
    central_epochs: int = 100
    lr: float = 1e-3
    optimizer: str = "adam"
    sigma_dp: float = 0.01
    folds: int = 5
    repeats: int = 5
    seed: int = 0
    wire: bool = False
    gen_enc_dims: tuple = (256, 64)
    gen_feat_dims: tuple = (128, 256)
    clf_hidden: tuple = (64, 32)

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if self.mode not in INPAINT_MODES:
            defaults = ExperimentConfig()
            touched = [k for k in ("inpaint_fl", "masking", "use_discriminator", "use_edge_prediction",
                                   "remerge_each_round")
                       if getattr(self, k) != getattr(defaults, k)]
            if touched:
                raise ConfigError(f"mode {self.mode!r} has no inpainting stage; unexpected {touched}")
        if self.inpaint_fl not in ("fl_g", "fl_d", "fl_d_g", "nofl_d_g"):
            raise ConfigError(f"unknown inpaint_fl {self.inpaint_fl!r}")
        if self.masking not in ("bfs", "random"):
            raise ConfigError(f"unknown masking {self.masking!r}")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        for name in ("M", "E1", "T1", "E2", "T2", "folds", "repeats", "k", "n_max", "central_epochs"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.folds < 2:
            raise ConfigError("folds must be >= 2")
        if self.sigma_dp < 0:
            raise ConfigError("sigma_dp must be nonnegative")

    def inpaint_config(self) -> InpaintConfig:
        return InpaintConfig(alpha=self.alpha, beta=self.beta, lr=self.lr, n_max=self.n_max,
                             mask_target=self.mask_target, masking=self.masking,
                             use_discriminator=self.use_discriminator,
                             disc_interval=self.disc_interval,
                             use_edge_prediction=self.use_edge_prediction, k_prime=self.k_prime)

    def fed_config(self) -> FedConfig:
        return FedConfig(sigma_dp=self.sigma_dp, inpaint_fl=self.inpaint_fl, wire=self.wire,
                         optimizer=self.optimizer, lr=self.lr)

    def replace(self, **kw) -> "ExperimentConfig":
        return dataclasses.replace(self, **kw)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in dataclasses.asdict(self).items()}


# ----------------------------------------------------------- config parsing

def _coerce(name: str, raw: str, fields: dict[str, dataclasses.Field], defaults) -> Any:
    if name not in fields:
        raise ConfigError(f"unknown config key {name!r}")
    default = getattr(defaults, name)
    raw = raw.strip()
    if raw.lower() in ("none", "null", ""):
        return None
    if isinstance(default, bool):
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{name}: expected a boolean, got {raw!r}")
    if isinstance(default, tuple):
        return tuple(int(v) for v in raw.replace(",", " ").split())
    try:
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float) or default is None:
            return float(raw)
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {raw!r}") from None
    return raw


def parse_kv(text: str, cls=ExperimentConfig):
    """Flat ``key = value`` text (``#`` comments) into a dataclass instance."""
    defaults = cls()
    fields = {f.name: f for f in dataclasses.fields(cls)}
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, raw = (s.strip() for s in line.split("=", 1))
        values[key] = _coerce(key, raw, fields, defaults)
    return dataclasses.replace(defaults, **values)


def load_config(path) -> ExperimentConfig:
    with open(path, encoding="utf-8") as fh:
        cfg = parse_kv(fh.read())
    if os.environ.get(SEED_ENV):
        cfg = cfg.replace(seed=int(os.environ[SEED_ENV]))
    cfg.validate()
    return cfg


def derive_seed(master: int, *keys: int) -> int:
    """Independent per-cell seed from the master seed and a key path."""
    ss = np.random.SeedSequence(entropy=master, spawn_key=tuple(int(k) for k in keys))
    return int(ss.generate_state(1, dtype=np.uint64)[0])


# stream identifiers for derive_seed
_PARTITION, _FOLDS, _PHASE1, _MERGE, _CLF_INIT, _DP, _EVAL = range(7)


def fold_masks(labeled: np.ndarray, folds: int, seed: int) -> list[np.ndarray]:
    """Split the labeled nodes into ``folds`` disjoint test masks."""
    idx = np.flatnonzero(labeled)
    idx = idx[np.random.default_rng(seed).permutation(len(idx))]
    out = []
    for part in np.array_split(idx, folds):
        m = np.zeros(len(labeled), dtype=bool)
        m[part] = True
        out.append(m)
    return out


def _pad_mask(mask: np.ndarray, n_total: int) -> np.ndarray:
    out = np.zeros(n_total, dtype=bool)
    out[:len(mask)] = mask
    return out


# ---------------------------------------------------------------- phase one

@dataclass
class InpaintResult:
    clients: list[InpaintClient]
    logs: list[RoundLog]
    fused: list[PopulationGraph]
    counts: list[np.ndarray]


def train_inpainting(graphs: list[PopulationGraph], cfg: ExperimentConfig, repeat: int) -> InpaintResult:
    """Phase one for one repeat. It never reads labels, so folds can share it."""
    icfg = cfg.inpaint_config()
    D = graphs[0].X.shape[1]
    fields = graphs[0].U.fields
    init_seed = derive_seed(cfg.seed, repeat, _PHASE1)
    clients = []
    for m, G in enumerate(graphs):
        # common initial weights, as if broadcast by the server
        gen = GeneratorState(D, fields, np.random.default_rng(init_seed), cfg.gen_enc_dims, cfg.gen_feat_dims)
        disc = DiscriminatorState(D, np.random.default_rng(init_seed + 1))
        clients.append(InpaintClient(m, G, gen, disc, icfg,
                                     np.random.default_rng(derive_seed(cfg.seed, repeat, _PHASE1, m)),
                                     np.random.default_rng(derive_seed(cfg.seed, repeat, _DP, 1, m))))
    logs = run_phase1(clients, cfg.T1, cfg.E1, cfg.fed_config())
    fused, counts = [], []
    for c in clients:
        rng = np.random.default_rng(derive_seed(cfg.seed, repeat, _MERGE, c.client_id))
        cnt = predict_counts(c.graph, c.gen, icfg.n_max)
        counts.append(cnt)
        fused.append(merge_client(cfg, c, cnt, rng))
    return InpaintResult(clients, logs, fused, counts)


def merge_client(cfg: ExperimentConfig, c: InpaintClient, counts: np.ndarray,
                 rng: np.random.Generator) -> PopulationGraph:
    if cfg.mode == "random_inpaint":
        return random_inpaint(c.graph, counts, rng, c.cfg.k_prime)
    return graph_merge(c.graph, c.gen, c.cfg, rng, counts=counts)


def inpainting_quality(clients: list[InpaintClient], episodes: int, seed: int) -> dict[str, float]:
    """Held-out episodes: reconstruction MSE and Frechet distance of generated vs true hidden features."""
    fake, real, sq = [], [], []
    for c in clients:
        rng = np.random.default_rng(derive_seed(seed, _EVAL, c.client_id))
        for _ in range(episodes):
            ep = sample_episode(c.graph, c.cfg, rng)
            out = generator_forward(ep, c.gen, rng, training=False)
            if out.x_tilde is None:
                continue
            truth = ep.source.X[out.targets]
            fake.append(out.x_tilde.value)
            real.append(truth)
            sq.append(((out.x_tilde.value - truth) ** 2).sum(axis=1))
    fake_a, real_a = np.vstack(fake), np.vstack(real)
    return {"rec_mse": float(np.concatenate(sq).mean()),
            "frechet": frechet_distance(fake_a, real_a)}


# ---------------------------------------------------------------- phase two

def _new_classifier(D: int, cfg: ExperimentConfig, repeat: int, fold: int) -> ClassifierState:
    return ClassifierState(D, np.random.default_rng(derive_seed(cfg.seed, repeat, fold, _CLF_INIT)),
                           cfg.clf_hidden)


def _pooled_report(graphs, clfs, test_masks) -> MetricsReport:
    probs, ys, masks = [], [], []
    for G, clf, tm in zip(graphs, clfs, test_masks):
        probs.append(classifier_forward(G, clf).value)
        ys.append(G.y)
        masks.append(tm)
    return evaluate_metrics(np.vstack(probs), np.concatenate(ys), np.concatenate(masks))


def _remerge_hook(cfg: ExperimentConfig, inpaint: InpaintResult, repeat: int, fold: int):
    def hook(t: int, clients: list[ClassifierClient]) -> None:
        if t == 0:
            return
        for c in clients:
            ic = inpaint.clients[c.client_id]
            n_real = ic.graph.n
            rng = np.random.default_rng(derive_seed(cfg.seed, repeat, fold, _MERGE, t, c.client_id))
            c.graph = merge_client(cfg, ic, inpaint.counts[c.client_id], rng)
            c.train_mask = _pad_mask(c.train_mask[:n_real], c.graph.n)
    return hook


def run_fold(cfg: ExperimentConfig, graphs: list[PopulationGraph], train_masks, test_masks,
             repeat: int, fold: int, inpaint: InpaintResult | None = None
             ) -> tuple[MetricsReport, list[RoundLog]]:
    D = graphs[0].X.shape[1]
    if cfg.mode in ("localgcn", "centralgcn"):
        clfs = []
        for G, tr in zip(graphs, train_masks):
            clf = _new_classifier(D, cfg, repeat, fold)
            train_local(G, clf, tr, cfg.central_epochs, cfg.lr, cfg.optimizer)
            clfs.append(clf)
        return _pooled_report(graphs, clfs, test_masks), []
    clients = [ClassifierClient(m, G, tr, _new_classifier(D, cfg, repeat, fold),
                                np.random.default_rng(derive_seed(cfg.seed, repeat, fold, _DP, 2, m)))
               for m, (G, tr) in enumerate(zip(graphs, train_masks))]
    hook = _remerge_hook(cfg, inpaint, repeat, fold) if cfg.remerge_each_round and inpaint else None
    logs = run_phase2(clients, cfg.T2, cfg.E2, cfg.fed_config(), round_hook=hook)
    final = [c.graph for c in clients]
    if hook is not None:
        # real nodes always come first, so the evaluation mask only needs repadding
        test_masks = [_pad_mask(tm[:int((~g.generated).sum())], f.n)
                      for tm, g, f in zip(test_masks, graphs, final)]
    return _pooled_report(final, [c.clf for c in clients], test_masks), logs


# ---------------------------------------------------------------- top level

def _client_graphs(cfg: ExperimentConfig, G: PopulationGraph, repeat: int) -> list[PopulationGraph]:
    M = 1 if cfg.mode == "centralgcn" else cfg.M
    return partition_clients(G, M, derive_seed(cfg.seed, repeat, _PARTITION))


def _log_dict(log: RoundLog) -> dict:
    # wall time stays out of reports so identical runs serialize identically
    return {"round": log.round, "phase": log.phase, "server_loss": log.server_loss,
            "client_losses": {str(k): v for k, v in log.client_losses.items()}}


def run_experiment(cfg: ExperimentConfig, dataset: PopulationGraph | CohortSpec,
                   quality_episodes: int = 0) -> dict:
    """Cross-validated run of one configuration; returns a JSON-ready report."""
    cfg.validate()
    G = generate_population(dataset) if isinstance(dataset, CohortSpec) else dataset
    cells, phase1_logs, phase2_logs, quality = [], [], [], []
    for r in range(cfg.repeats):
        graphs = _client_graphs(cfg, G, r)
        base, res = graphs, None
        if cfg.mode in INPAINT_MODES:
            res = train_inpainting(graphs, cfg, r)
            graphs = res.fused
            phase1_logs.append([_log_dict(x) for x in res.logs])
            if quality_episodes:
                quality.append(inpainting_quality(res.clients, quality_episodes,
                                                  derive_seed(cfg.seed, r, _EVAL)))
        per_client_folds = [fold_masks(B.labeled_mask, cfg.folds, derive_seed(cfg.seed, r, _FOLDS, m))
                            for m, B in enumerate(base)]
        for f in range(cfg.folds):
            test = [_pad_mask(fm[f], g.n) for fm, g in zip(per_client_folds, graphs)]
            train = [_pad_mask(B.labeled_mask & ~fm[f], g.n)
                     for B, fm, g in zip(base, per_client_folds, graphs)]
            rep, logs = run_fold(cfg, graphs, train, test, r, f, res)
            cells.append({"repeat": r, "fold": f, "metrics": rep.as_dict()})
            phase2_logs.append([_log_dict(x) for x in logs])
    reports = [MetricsReport(**c["metrics"]) for c in cells]
    out = {
        "config": cfg.to_dict(),
        "seeds": {"master": cfg.seed,
                  "partition": [derive_seed(cfg.seed, r, _PARTITION) for r in range(cfg.repeats)]},
        "aggregate": aggregate_reports(reports),
        "cells": cells,
        "round_logs": {"phase1": phase1_logs, "phase2": phase2_logs},
    }
    if quality:
        out["inpaint_quality"] = {k: float(np.mean([q[k] for q in quality])) for k in quality[0]}
        out["inpaint_quality_per_repeat"] = quality
    return out


def two_sample_ttest(a, b) -> tuple[float, float]:
    """Pooled-variance two-sample t-test; identical samples give (0, 1)."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if len(a) < 2 or len(b) < 2:
        return math.nan, math.nan
    if np.array_equal(np.sort(a), np.sort(b)):
        return 0.0, 1.0
    res = stats.ttest_ind(a, b, equal_var=True)
    t, p = float(res.statistic), float(res.pvalue)
    if math.isnan(t):
        return 0.0, 1.0
    return t, p


def run_ablation(matrix: list[tuple[str, ExperimentConfig]], dataset, quality_episodes: int = 0) -> dict:
    """Run every named configuration and t-test each metric between every pair."""
    if len(matrix) < 2:
        raise ConfigError("an ablation needs at least two configurations")
    G = generate_population(dataset) if isinstance(dataset, CohortSpec) else dataset
    results = {name: run_experiment(cfg, G, quality_episodes) for name, cfg in matrix}
    table = {name: res["aggregate"] for name, res in results.items()}
    tests = []
    for (na, ra), (nb, rb) in itertools.combinations(results.items(), 2):
        for metric in METRIC_NAMES:
            va = [c["metrics"][metric] for c in ra["cells"] if c["metrics"][metric] is not None]
            vb = [c["metrics"][metric] for c in rb["cells"] if c["metrics"][metric] is not None]
            t, p = two_sample_ttest(va, vb)
            tests.append({"a": na, "b": nb, "metric": metric, "t": t, "p": p})
    return {"table": table, "tests": tests, "runs": results}


def sweep(base: ExperimentConfig, key: str, values) -> list[tuple[str, ExperimentConfig]]:
    """Matrix entries varying one knob, e.g. ``sweep(cfg, "k", [3, 5, 10])``."""
    return [(f"{key}={v}", base.replace(**{key: v})) for v in values]


def parse_matrix(text: str) -> list[tuple[str, ExperimentConfig]]:
    """Ablation matrix: ``[name]`` headers, each followed by key = value overrides of a base.

    Keys before the first header form the shared base.
    """
    base_lines, blocks, current = [], [], None
    for line in text.splitlines():
        s = line.split("#", 1)[0].strip()
        if s.startswith("[") and s.endswith("]"):
            current = (s[1:-1].strip(), [])
            blocks.append(current)
        elif current is None:
            base_lines.append(line)
        else:
            current[1].append(line)
    base_text = "\n".join(base_lines)
    out = []
    for name, lines in blocks:
        cfg = parse_kv(base_text + "\n" + "\n".join(lines))
        if os.environ.get(SEED_ENV):
            cfg = cfg.replace(seed=int(os.environ[SEED_ENV]))
        cfg.validate()
        out.append((name, cfg))
    return out


def dumps_report(report: dict) -> str:
    return json.dumps(report, indent=2, sort_keys=True, allow_nan=True)


def report_rows(report: dict) -> list[dict]:
    """Flat per-cell rows carrying the resolved config, for CSV output."""
    cfg = json.dumps(report["config"], sort_keys=True)
    rows = []
    for c in report["cells"]:
        row = {"repeat": c["repeat"], "fold": c["fold"], **c["metrics"], "config": cfg}
        rows.append(row)
    return rows
