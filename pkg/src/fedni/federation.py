"""FedAvg over an audited in-process transport, with DP noise on every upload."""
from __future__ import annotations

import logging
import struct
import time
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .classifier import ClassifierState, ce_loss, classifier_forward
from .graphcons import PopulationGraph
from .inpaint import (DiscriminatorState, GeneratorState, InpaintConfig, PhenoStats,
                      local_inpaint_train_step)
from .numerics import Module

logger = logging.getLogger(__name__)

WIRE_VERSION = 1
GEN_PREFIX = "generator."
DISC_PREFIX = "discriminator."
CLF_PREFIX = "classifier."
INPAINT_FL_MODES = ("fl_g", "fl_d", "fl_d_g", "nofl_d_g")


class ProtocolError(RuntimeError):
    pass


class PrivacyViolation(ProtocolError):
    pass


class WireFormatError(ValueError):
    pass


# -------------------------------------------------------------- weight vectors

@dataclass
class WeightVector:
    """Flat float64 parameters plus an ordered (name, shape) manifest."""

    manifest: list[tuple[str, tuple[int, ...]]]
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64).ravel()
        expected = sum(int(np.prod(s)) for _, s in self.manifest)
        if expected != self.values.size:
            raise WireFormatError(f"manifest describes {expected} values, got {self.values.size}")

    @property
    def names(self) -> list[str]:
        return [name for name, _ in self.manifest]

    def same_layout(self, other: "WeightVector") -> bool:
        return self.manifest == other.manifest

    def copy(self) -> "WeightVector":
        return WeightVector(list(self.manifest), self.values.copy())

    def to_bytes(self) -> bytes:
        parts = [struct.pack("<BI", WIRE_VERSION, len(self.manifest))]
        for name, shape in self.manifest:
            raw = name.encode("utf-8")
            parts.append(struct.pack("<H", len(raw)) + raw)
            parts.append(struct.pack("<B", len(shape)) + struct.pack(f"<{len(shape)}I", *shape))
        parts.append(self.values.astype("<f8").tobytes())
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, buf: bytes) -> "WeightVector":
        try:
            version, count = struct.unpack_from("<BI", buf, 0)
            if version != WIRE_VERSION:
                raise WireFormatError(f"unsupported weight-vector version {version}")
            off = 5
            manifest = []
            for _ in range(count):
                (ln,) = struct.unpack_from("<H", buf, off)
                off += 2
                name = buf[off:off + ln].decode("utf-8")
                off += ln
                (nd,) = struct.unpack_from("<B", buf, off)
                off += 1
                shape = struct.unpack_from(f"<{nd}I", buf, off)
                off += 4 * nd
                manifest.append((name, tuple(shape)))
        except struct.error as exc:
            raise WireFormatError(f"truncated weight-vector header: {exc}") from None
        total = sum(int(np.prod(s)) for _, s in manifest)
        if len(buf) - off != 8 * total:
            raise WireFormatError(f"expected {8 * total} payload bytes, found {len(buf) - off}")
        values = np.frombuffer(buf, dtype="<f8", count=total, offset=off).astype(np.float64)
        return cls(manifest, values)


def pack(module: Module, prefix: str) -> WeightVector:
    """Serialize parameters then buffers of ``module`` in declaration order."""
    entries = [(prefix + n, p.value) for n, p in module.named_params()]
    entries += [(prefix + n, b) for n, b in module.named_buffers()]
    manifest = [(n, tuple(int(s) for s in np.shape(v))) for n, v in entries]
    values = np.concatenate([np.ravel(v) for _, v in entries]) if entries else np.zeros(0)
    return WeightVector(manifest, values)


def unpack(module: Module, wv: WeightVector, prefix: str) -> None:
    """Load ``wv`` into ``module``; the manifest must match the module exactly."""
    expected = pack(module, prefix)
    if not expected.same_layout(wv):
        raise ProtocolError("weight-vector manifest does not match the target model")
    params = dict(module.named_params())
    off = 0
    for name, shape in wv.manifest:
        size = int(np.prod(shape))
        chunk = wv.values[off:off + size].reshape(shape).copy()
        off += size
        local = name[len(prefix):]
        if local in params:
            params[local].value = chunk
        else:
            module.set_buffer(local, chunk)


def fedavg_aggregate(weights: list[WeightVector], senders: list | None = None) -> WeightVector:
    """Unweighted elementwise mean via a sequential running-mean fold.

    The running form returns identical inputs unchanged bit for bit.
    """
    if not weights:
        raise ProtocolError("nothing to aggregate")
    ref = weights[0]
    for i, w in enumerate(weights[1:], start=1):
        if not w.same_layout(ref):
            who = senders[i] if senders is not None else i
            raise ProtocolError(f"client {who} sent a manifest that differs from client "
                                f"{senders[0] if senders is not None else 0}")
    acc = ref.values.copy()
    for k, w in enumerate(weights[1:], start=2):
        acc += (w.values - acc) / k
    return WeightVector(list(ref.manifest), acc)


def dp_perturb(w: WeightVector, sigma_dp: float, rng: np.random.Generator) -> WeightVector:
    """Add N(0, sigma_dp^2) to every element; sigma_dp = 0 returns an exact copy."""
    if sigma_dp < 0:
        raise ValueError("sigma_dp must be nonnegative")
    if sigma_dp == 0:
        return w.copy()
    return WeightVector(list(w.manifest), w.values + rng.normal(0.0, sigma_dp, size=w.values.size))


# ------------------------------------------------------------------ transport

@dataclass(frozen=True)
class Upload:
    client_id: int
    round: int
    kind: str
    weights: WeightVector


@dataclass(frozen=True)
class LossReport:
    client_id: int
    round: int
    phase: int
    loss: float


@dataclass(frozen=True)
class Broadcast:
    round: int
    kind: str
    weights: WeightVector


class Transport:
    """Simulated client/server channel that audits every message.

    Only weight vectors and scalar loss summaries may travel. In wire mode
    weight vectors are round-tripped through their byte encoding.
    """

    def __init__(self, wire: bool = False, forbidden_prefixes: tuple[str, ...] = ()):
        self.wire = wire
        self.forbidden_prefixes = forbidden_prefixes
        self.server_inbox: list = []
        self.client_inbox: dict[int, list] = {}
        self.audit_log: list[tuple[str, str, int]] = []

    def _audit(self, msg) -> None:
        if isinstance(msg, (Upload, Broadcast)):
            if type(msg.weights) is not WeightVector:
                raise PrivacyViolation(f"{type(msg).__name__} carries a non-weight payload")
            for name in msg.weights.names:
                if self.forbidden_prefixes and name.startswith(self.forbidden_prefixes):
                    raise ProtocolError(f"{name!r} may not cross the transport")
                if not name.startswith((GEN_PREFIX, DISC_PREFIX, CLF_PREFIX)):
                    raise PrivacyViolation(f"unrecognized payload entry {name!r}")
        elif isinstance(msg, LossReport):
            if not isinstance(msg.loss, float):
                raise PrivacyViolation("loss reports must be scalar floats")
        else:
            raise PrivacyViolation(f"message type {type(msg).__name__} is not allowed")

    def _carry(self, msg):
        if self.wire and isinstance(msg, (Upload, Broadcast)):
            wv = WeightVector.from_bytes(msg.weights.to_bytes())
            return type(msg)(**{**msg.__dict__, "weights": wv})
        return msg

    def send_to_server(self, msg) -> None:
        self._audit(msg)
        self.audit_log.append(("up", type(msg).__name__, getattr(msg, "client_id", -1)))
        self.server_inbox.append(self._carry(msg))

    def send_to_client(self, client_id: int, msg) -> None:
        self._audit(msg)
        self.audit_log.append(("down", type(msg).__name__, client_id))
        self.client_inbox.setdefault(client_id, []).append(self._carry(msg))

    def drain_server(self) -> list:
        msgs, self.server_inbox = self.server_inbox, []
        return msgs

    def drain_client(self, client_id: int) -> list:
        return self.client_inbox.pop(client_id, [])


@dataclass
class RoundLog:
    round: int
    phase: int
    client_losses: dict[int, dict[str, float]]
    server_loss: float | None = None
    metrics: dict | None = None
    wall_time: float = 0.0


@dataclass
class FedConfig:
    sigma_dp: float = 0.01
    inpaint_fl: str = "fl_g"
    wire: bool = False
    optimizer: str = "adam"
    lr: float = 1e-3


# -------------------------------------------------------------------- clients

@dataclass
class InpaintClient:
    client_id: int
    graph: PopulationGraph
    gen: GeneratorState
    disc: DiscriminatorState
    cfg: InpaintConfig
    rng: np.random.Generator
    dp_rng: np.random.Generator
    steps_done: int = 0
    stats: PhenoStats | None = None

    def __post_init__(self):
        if self.stats is None:
            self.stats = PhenoStats.from_table(self.graph.U)

    def local_train(self, epochs: int) -> dict[str, float]:
        reports = []
        for _ in range(epochs):
            reports.append(local_inpaint_train_step(self.graph, self.gen, self.disc, self.cfg,
                                                    self.rng, self.steps_done, self.stats))
            self.steps_done += 1
        keys = reports[0].keys()
        return {k: float(np.mean([r[k] for r in reports if k in r])) for k in keys}


@dataclass
class ClassifierClient:
    client_id: int
    graph: PopulationGraph
    train_mask: np.ndarray
    clf: ClassifierState
    dp_rng: np.random.Generator

    def train_loss(self) -> float:
        return float(ce_loss(classifier_forward(self.graph, self.clf), self.graph.y, self.train_mask).value)

    def local_train(self, epochs: int, lr: float, optimizer: str) -> list[float]:
        step = nx.adam_step if optimizer == "adam" else nx.sgd_step
        params = self.clf.params()
        out = []
        for _ in range(epochs):
            loss = ce_loss(classifier_forward(self.graph, self.clf), self.graph.y, self.train_mask)
            loss.backward()
            step(params, lr)
            out.append(float(loss.value))
        return out


def _shared_kinds(mode: str) -> list[tuple[str, str]]:
    if mode not in INPAINT_FL_MODES:
        raise ValueError(f"unknown inpaint FL mode {mode!r}")
    kinds = []
    if mode in ("fl_g", "fl_d_g"):
        kinds.append(("gen", GEN_PREFIX))
    if mode in ("fl_d", "fl_d_g"):
        kinds.append(("disc", DISC_PREFIX))
    return kinds


def _model(client, kind: str) -> Module:
    return {"gen": getattr(client, "gen", None), "disc": getattr(client, "disc", None),
            "clf": getattr(client, "clf", None)}[kind]


def _fedavg_round(transport: Transport, clients: list, kinds: list[tuple[str, str]], t: int,
                  sigma_dp: float) -> None:
    for c in clients:
        for kind, prefix in kinds:
            w = dp_perturb(pack(_model(c, kind), prefix), sigma_dp, c.dp_rng)
            transport.send_to_server(Upload(c.client_id, t, kind, w))
    inbox = transport.drain_server()
    for kind, _ in kinds:
        ups = [m for m in inbox if isinstance(m, Upload) and m.kind == kind]
        if len(ups) != len(clients):
            raise ProtocolError(f"round {t}: expected {len(clients)} {kind} uploads, got {len(ups)}")
        avg = fedavg_aggregate([u.weights for u in ups], [u.client_id for u in ups])
        for c in clients:
            transport.send_to_client(c.client_id, Broadcast(t, kind, avg))
    for c in clients:
        for msg in transport.drain_client(c.client_id):
            prefix = dict(kinds)[msg.kind]
            unpack(_model(c, msg.kind), msg.weights, prefix)


def _drop_empty(clients: list) -> list:
    keep = []
    for c in clients:
        if c.graph.n == 0:
            logger.warning("client %s has an empty graph; excluded", c.client_id)
        else:
            keep.append(c)
    if not keep:
        raise ProtocolError("no clients with data")
    return keep


def run_phase1(clients: list[InpaintClient], T: int = 30, E: int = 10,
               cfg: FedConfig | None = None, transport: Transport | None = None) -> list[RoundLog]:
    """Federated inpainting: local generator/discriminator steps, then FedAvg of shared parts."""
    cfg = cfg or FedConfig()
    clients = _drop_empty(clients)
    kinds = _shared_kinds(cfg.inpaint_fl)
    if transport is None:
        forbidden = (DISC_PREFIX,) if cfg.inpaint_fl == "fl_g" else ()
        transport = Transport(wire=cfg.wire, forbidden_prefixes=forbidden)
    logs = []
    for t in range(T):
        start = time.perf_counter()
        losses = {c.client_id: c.local_train(E) for c in clients}
        if kinds:
            _fedavg_round(transport, clients, kinds, t, cfg.sigma_dp)
        logs.append(RoundLog(t, 1, losses, wall_time=time.perf_counter() - start))
    return logs


def run_phase2(clients: list[ClassifierClient], T: int = 10, E: int = 10,
               cfg: FedConfig | None = None, transport: Transport | None = None,
               federated: bool = True, round_hook=None) -> list[RoundLog]:
    """Federated GCN classification; after each broadcast clients report the global model's loss.

    ``round_hook(t, clients)``, if given, runs at the start of every round (e.g. to remerge graphs).
    """
    cfg = cfg or FedConfig()
    clients = _drop_empty(clients)
    transport = transport or Transport(wire=cfg.wire)
    logs = []
    for t in range(T):
        start = time.perf_counter()
        if round_hook is not None:
            round_hook(t, clients)
        losses = {c.client_id: {"L_ce": float(np.mean(c.local_train(E, cfg.lr, cfg.optimizer)))}
                  for c in clients}
        server_loss = None
        if federated:
            _fedavg_round(transport, clients, [("clf", CLF_PREFIX)], t, cfg.sigma_dp)
            for c in clients:
                transport.send_to_server(LossReport(c.client_id, t, 2, c.train_loss()))
            reports = [m for m in transport.drain_server() if isinstance(m, LossReport)]
            server_loss = float(np.mean([r.loss for r in reports]))
        logs.append(RoundLog(t, 2, losses, server_loss=server_loss,
                             wall_time=time.perf_counter() - start))
    return logs
