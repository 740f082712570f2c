"""Peer-to-peer secure model recombination over a simulated message bus.

Each repetition has four stages per client:

1. draw ``n`` uniformly from ``[n_low, n_high]``, pick ``n`` distinct layers and
   send each to a uniformly chosen peer (never to itself);
2. buffer every received layer and remember ``(sender, layer index)``;
3. for each remembered entry, return a uniformly chosen element of that index's
   buffer to the sender;
4. buffer the returned layers; every buffer now holds exactly one layer, which
   becomes the client's model.

Stages are separated by barriers: all messages of stage 1 are delivered before
any client starts stage 3. Within a stage the bus delivers either FIFO or in a
seeded random interleaving.
"""

from __future__ import annotations

import json
import logging
import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Protocol, Sequence

import numpy as np

from .errors import InvalidBoundsError, InvariantViolation, RoutingError
from .model import ArchitectureSpec, LayerBlock, LayeredModel, check_same_arch
from .seeding import derive_seed

log = logging.getLogger(__name__)

_CLIENT_STREAM, _BUS_STREAM = 10, 11


@dataclass(frozen=True, eq=False)
class SealedLayer:
    layer_index: int
    shape: tuple[int, ...]
    payload: bytes = field(repr=False)
    nonce: int = 0

    @property
    def nbytes(self) -> int:
        return len(self.payload)


class Sealer(Protocol):
    def seal(self, block: LayerBlock, nonce: int) -> SealedLayer: ...

    def unseal(self, sealed: SealedLayer) -> LayerBlock: ...


class IdentitySealer:
    """Tags the raw little-endian values with a nonce; no encryption."""

    def seal(self, block: LayerBlock, nonce: int) -> SealedLayer:
        return SealedLayer(block.layer_index, block.shape, block.values.astype("<f8").tobytes(), nonce)

    def unseal(self, sealed: SealedLayer) -> LayerBlock:
        vals = np.frombuffer(sealed.payload, dtype="<f8").astype(np.float64)
        return LayerBlock(sealed.layer_index, sealed.shape, vals)


@dataclass(frozen=True)
class SecureConfig:
    repeats: int = 1
    n_low: int = 1
    n_high: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.repeats < 0:
            raise InvalidBoundsError("repeats must be >= 0")
        if self.n_low < 0 or self.n_low > self.n_high:
            raise InvalidBoundsError(f"need 0 <= n_low <= n_high, got [{self.n_low}, {self.n_high}]")


@dataclass(frozen=True)
class ProtocolMessage:
    kind: str  # "send" | "return"
    src: int
    dst: int
    layer: SealedLayer
    rep: int
    stage: int

    def __post_init__(self):
        if self.src == self.dst:
            raise RoutingError(f"client {self.src} cannot message itself")

    def event(self) -> dict:
        return {
            "rep": self.rep,
            "stage": self.stage,
            "kind": self.kind,
            "from": self.src,
            "to": self.dst,
            "layer_index": self.layer.layer_index,
            "nonce": self.layer.nonce,
            "bytes": self.layer.nbytes,
        }


class MessageBus:
    """In-memory queue. ``policy`` is ``"fifo"`` or ``"random"`` (seeded interleaving)."""

    def __init__(self, policy: str = "fifo", seed: int = 0, record: bool = True):
        if policy not in ("fifo", "random"):
            raise ValueError(f"unknown delivery policy {policy!r}")
        self.policy = policy
        self.rng = np.random.default_rng(derive_seed(seed, _BUS_STREAM))
        self.record = record
        self.trace: list[dict] = []
        self._queue: list[ProtocolMessage] = []
        self._clients: set[int] = set()

    def register(self, client_ids: Iterable[int]) -> None:
        self._clients.update(client_ids)

    def post(self, msg: ProtocolMessage) -> None:
        if msg.dst not in self._clients:
            raise RoutingError(f"no client {msg.dst} on the bus")
        self._queue.append(msg)

    def drain(self) -> list[ProtocolMessage]:
        """Everything posted so far, in delivery order."""
        msgs, self._queue = self._queue, []
        if self.policy == "random" and len(msgs) > 1:
            msgs = [msgs[i] for i in self.rng.permutation(len(msgs))]
        if self.record:
            self.trace.extend(m.event() for m in msgs)
        return msgs


class ClientProtocolState:
    """State machine of one participant."""

    def __init__(self, client_id: int, layers: Sequence[SealedLayer], seed: int):
        self.client_id = client_id
        self.layers: list[SealedLayer] = list(layers)
        self.buffers: list[list[SealedLayer]] = []
        self.pending: list[tuple[int, int]] = []
        self.phase = "done"
        self.rng = np.random.default_rng(derive_seed(seed, _CLIENT_STREAM, client_id))
        self.sent = 0
        self.received_back = 0

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    def stage1(self, rep: int, n_low: int, n_high: int, peers: Sequence[int]) -> list[ProtocolMessage]:
        n = int(self.rng.integers(n_low, n_high + 1))
        self.buffers = [[layer] for layer in self.layers]
        self.pending = []
        self.sent = n
        self.received_back = 0
        self.phase = "stage1"
        chosen = self.rng.choice(self.n_layers, size=n, replace=False) if n else []
        out = []
        for j in chosen:
            peer = int(peers[self.rng.integers(len(peers))])
            layer = self.buffers[j].pop()
            out.append(ProtocolMessage("send", self.client_id, peer, layer, rep, 1))
        self.phase = "stage2"
        return out

    def on_send(self, msg: ProtocolMessage) -> None:
        j = msg.layer.layer_index
        self.buffers[j].append(msg.layer)
        self.pending.append((msg.src, j))

    def stage3(self, rep: int) -> list[ProtocolMessage]:
        self.phase = "stage3"
        out = []
        for peer, j in self.pending:
            buf = self.buffers[j]
            layer = buf.pop(int(self.rng.integers(len(buf))))
            out.append(ProtocolMessage("return", self.client_id, peer, layer, rep, 3))
        self.pending = []
        self.phase = "stage4"
        return out

    def on_return(self, msg: ProtocolMessage) -> None:
        self.buffers[msg.layer.layer_index].append(msg.layer)
        self.received_back += 1

    def finish(self) -> None:
        for j, buf in enumerate(self.buffers):
            if len(buf) != 1:
                raise InvariantViolation(
                    f"client {self.client_id}: buffer {j} holds {len(buf)} layers at completion"
                )
        if self.received_back != self.sent:
            raise InvariantViolation(
                f"client {self.client_id}: sent {self.sent} layers, got {self.received_back} back"
            )
        self.layers = [buf[0] for buf in self.buffers]
        self.buffers = []
        self.phase = "done"


@dataclass
class TrafficReport:
    sends: list[int] = field(default_factory=list)
    returns: list[int] = field(default_factory=list)
    bytes: list[int] = field(default_factory=list)
    trace: list[dict] = field(default_factory=list)

    @property
    def messages(self) -> int:
        return sum(self.sends) + sum(self.returns)

    @property
    def total_bytes(self) -> int:
        return sum(self.bytes)

    @property
    def mean_bytes(self) -> float:
        return float(np.mean(self.bytes)) if self.bytes else 0.0


def make_states(
    models: Sequence[LayeredModel],
    seed: int = 0,
    sealer: Sealer | None = None,
) -> list[ClientProtocolState]:
    """Seal every layer (nonce = client * n_layers + layer) and wrap each model in a state machine."""
    check_same_arch(models)
    sealer = sealer or IdentitySealer()
    n = models[0].n_layers
    states = []
    for k, m in enumerate(models):
        sealed = [sealer.seal(b, k * n + j) for j, b in enumerate(m.layers)]
        states.append(ClientProtocolState(k, sealed, seed))
    return states


def secure_round(
    states: Sequence[ClientProtocolState],
    cfg: SecureConfig,
    bus: MessageBus | None = None,
) -> TrafficReport:
    """Run ``cfg.repeats`` repetitions of the four-stage exchange, updating ``states``."""
    report = TrafficReport()
    if not states:
        return report
    n_layers = states[0].n_layers
    if cfg.n_high > n_layers:
        raise InvalidBoundsError(f"n_high={cfg.n_high} exceeds the layer count {n_layers}")
    if len(states) < 2:
        return report
    bus = bus or MessageBus("fifo", cfg.seed)
    by_id = {s.client_id: s for s in states}
    bus.register(by_id)
    ids = sorted(by_id)
    peers = {c: [p for p in ids if p != c] for c in ids}
    start_trace = len(bus.trace)

    for rep in range(cfg.repeats):
        for s in states:
            for msg in s.stage1(rep, cfg.n_low, cfg.n_high, peers[s.client_id]):
                bus.post(msg)
        sends = bus.drain()
        for msg in sends:
            by_id[msg.dst].on_send(msg)
        for s in states:
            for msg in s.stage3(rep):
                bus.post(msg)
        returns = bus.drain()
        for msg in returns:
            by_id[msg.dst].on_return(msg)
        for s in states:
            s.finish()
        report.sends.append(len(sends))
        report.returns.append(len(returns))
        report.bytes.append(sum(m.layer.nbytes for m in sends) + sum(m.layer.nbytes for m in returns))
        log.debug("secure rep %d: %d sends, %d returns", rep, len(sends), len(returns))
    report.trace = bus.trace[start_trace:]
    return report


def materialize(states: Sequence[ClientProtocolState], sealer: Sealer | None = None) -> list[LayeredModel]:
    sealer = sealer or IdentitySealer()
    out = []
    for s in states:
        blocks = tuple(sealer.unseal(layer) for layer in s.layers)
        out.append(LayeredModel.from_arrays([b.array() for b in blocks]))
    return out


def secure_recombine(
    models: Sequence[LayeredModel],
    cfg: SecureConfig,
    policy: str = "fifo",
    record: bool = True,
) -> tuple[list[LayeredModel], TrafficReport]:
    states = make_states(models, cfg.seed)
    bus = MessageBus(policy, cfg.seed, record=record)
    report = secure_round(states, cfg, bus)
    return materialize(states), report


def nonce_multiset(states: Sequence[ClientProtocolState]) -> dict[int, Counter]:
    """Per layer index, the multiset of nonces held across all clients."""
    out: dict[int, Counter] = defaultdict(Counter)
    for s in states:
        for layer in s.layers:
            out[layer.layer_index][layer.nonce] += 1
    return dict(out)


def model_bytes(model: LayeredModel | ArchitectureSpec, sealer: Sealer | None = None) -> list[int]:
    """Sealed payload size of every layer."""
    if isinstance(model, ArchitectureSpec):
        return [8 * math.prod(s) for s in model.block_shapes()]
    sealer = sealer or IdentitySealer()
    return [sealer.seal(b, 0).nbytes for b in model.layers]


def expected_overhead(cfg: SecureConfig, K: int, model: LayeredModel | ArchitectureSpec) -> float:
    """Expected bytes moved in one repetition: ``(n_high + n_low) * K / len(w) * size(w)``.

    Exact when all layers have the same size.
    """
    sizes = model_bytes(model)
    return (cfg.n_high + cfg.n_low) * K / len(sizes) * sum(sizes)


@dataclass(frozen=True)
class CollusionReport:
    per_client: dict[int, int]
    max_identifiable: int


def collusion_probe(trace: Iterable[dict], colluders: Iterable[int]) -> CollusionReport:
    """Layers of each honest client whose owner the colluders can name.

    Only first-repetition stage-1 sends arriving at a colluder reveal their
    origin; everything later has already been mixed.
    """
    colluders = set(colluders)
    counts: Counter = Counter()
    honest: set[int] = set()
    for ev in trace:
        for c in (ev["from"], ev["to"]):
            if c not in colluders:
                honest.add(c)
        if ev["rep"] == 0 and ev["kind"] == "send" and ev["to"] in colluders and ev["from"] not in colluders:
            counts[ev["from"]] += 1
    per_client = {c: counts.get(c, 0) for c in sorted(honest)}
    return CollusionReport(per_client, max(per_client.values(), default=0))


def write_trace(trace: Iterable[dict], path: str | Path) -> None:
    with open(path, "w") as fh:
        for ev in trace:
            fh.write(json.dumps(ev) + "\n")


def read_trace(path: str | Path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]
