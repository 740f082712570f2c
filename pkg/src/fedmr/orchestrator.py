"""Round loop for FedMR and the baseline strategies.

Strategies
----------
fedmr   K models circulate; after local training the server recombines them
        layer-wise (or segment-wise when ``granularity`` is set). The first
        ``stage_switch`` rounds run FedAvg instead, after which the global model
        is replicated K times to seed the model list.
fedavg  One global model, replaced each round by the mean of the uploads.
fedprox fedavg plus a proximal term pulling local weights to the dispatched global.
indep   K models circulate and are shuffled whole between rounds, never mixed.

Every random draw is keyed by (run seed, purpose, round, ...) so client updates
can run in any order or in parallel with identical results.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .errors import DegenerateNormError, FedMRError, InvalidKError, InvariantViolation, RunAborted
from .model import (
    ArchitectureSpec,
    LayeredModel,
    aggregate_mean,
    init_model,
    pairwise_cosine_mean,
    sum_models,
)
from .recombine import plan_for, recombine
from .seeding import derive_seed
from .train import LocalTrainConfig, client_update, evaluate

log = logging.getLogger(__name__)

STRATEGIES = ("fedmr", "fedavg", "fedprox", "indep")
CSV_SCHEMA = "# fedmr-metrics v1"
SUM_GAP_TOL = 1e-9

_INIT, _SELECT, _PLAN, _CLIENT = 0, 1, 2, 3


def client_seed(seed: int, rnd: int, client_id: int) -> int:
    """Seed of the local-training batch order for ``client_id`` in round ``rnd``."""
    return derive_seed(seed, _CLIENT, rnd, client_id)


@dataclass(frozen=True)
class RunConfig:
    rounds: int
    num_clients: int
    clients_per_round: int
    strategy: str = "fedmr"
    hidden: tuple[int, ...] = (64, 64, 64)
    granularity: float | None = None
    stage_switch: int = 0
    prox_mu: float = 0.01
    local: LocalTrainConfig = field(default_factory=LocalTrainConfig)
    eval_every: int = 1
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.strategy not in STRATEGIES:
            raise ValueError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        if self.rounds < 0:
            raise ValueError("rounds must be >= 0")
        if not 1 <= self.clients_per_round <= self.num_clients:
            raise InvalidKError(
                f"clients_per_round={self.clients_per_round} must lie in [1, num_clients={self.num_clients}]"
            )
        if not 0 <= self.stage_switch <= self.rounds:
            raise ValueError("stage_switch must lie in [0, rounds]")
        if self.granularity is not None and not 0.0 < self.granularity <= 1.0:
            raise ValueError("granularity must lie in (0, 1]")
        if self.eval_every < 1:
            raise ValueError("eval_every must be >= 1")
        if self.strategy == "fedprox" and not self.prox_mu > 0:
            raise ValueError("fedprox needs prox_mu > 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        if "local" in d and isinstance(d["local"], dict):
            d["local"] = LocalTrainConfig(**d["local"])
        if "hidden" in d:
            d["hidden"] = tuple(d["hidden"])
        return cls(**d)


@dataclass(frozen=True)
class RoundRecord:
    round: int
    phase: str
    selected_clients: tuple[int, ...]
    global_loss: float
    global_acc: float
    local_acc_mean: float
    cosine_mean: float
    lemma1_sum_gap: float
    bytes_up: int
    bytes_down: int


@dataclass
class RunResult:
    records: list[RoundRecord]
    global_model: LayeredModel
    models: list[LayeredModel]


def sample_clients(N: int, K: int, seed: int, rnd: int) -> list[int]:
    """K distinct client ids, uniform without replacement, keyed by (seed, round)."""
    if not 1 <= K <= N:
        raise InvalidKError(f"cannot select K={K} clients from N={N}")
    rng = np.random.default_rng(derive_seed(seed, _SELECT, rnd))
    return [int(c) for c in rng.choice(N, size=K, replace=False)]


def final_global(models: Sequence[LayeredModel]) -> LayeredModel:
    g = aggregate_mean(models)
    log.info("final global model: mean of %d models", len(models))
    return g


def build_arch(cfg: RunConfig, dim: int, num_classes: int) -> ArchitectureSpec:
    return ArchitectureSpec.from_sizes([dim, *cfg.hidden, num_classes])


def _cosine(models: Sequence[LayeredModel]) -> float:
    if len(models) < 2:
        return math.nan
    try:
        return pairwise_cosine_mean(models)
    except DegenerateNormError:
        return math.nan


def run(
    cfg: RunConfig,
    shards: Sequence,
    test_set,
    threads: int = 1,
    on_eval: Callable[[RoundRecord, LayeredModel], None] | None = None,
) -> RunResult:
    """Execute ``cfg.rounds`` rounds and return the evaluation records."""
    if len(shards) != cfg.num_clients:
        raise ValueError(f"config has {cfg.num_clients} clients but {len(shards)} shards given")
    arch = build_arch(cfg, test_set.X.shape[1], test_set.num_classes)
    K = cfg.clients_per_round
    recombining = cfg.strategy in ("fedmr", "indep")

    glob: LayeredModel | None = None
    L_m: list[LayeredModel] = []
    if recombining and cfg.stage_switch == 0:
        L_m = [init_model(arch, derive_seed(cfg.seed, _INIT, i)) for i in range(K)]
    else:
        glob = init_model(arch, derive_seed(cfg.seed, _INIT, 0))

    records: list[RoundRecord] = []
    nbytes = arch_nbytes(arch)
    gap_window = 0.0
    phase = None
    pool = ThreadPoolExecutor(max_workers=threads) if threads > 1 else None
    try:
        for r in range(1, cfg.rounds + 1):
            selected = sample_clients(cfg.num_clients, K, cfg.seed, r)
            averaging = not recombining or r <= cfg.stage_switch
            if averaging:
                dispatched = [glob] * K
                ref = glob if cfg.strategy == "fedprox" else None
            else:
                if not L_m:
                    log.info("round %d: switching to recombination stage", r)
                    L_m = [glob] * K
                dispatched = L_m
                ref = None
            local = cfg.local
            if cfg.strategy == "fedprox":
                local = replace(local, prox_mu=cfg.prox_mu)

            def work(i: int) -> LayeredModel:
                c = selected[i]
                lc = replace(local, seed=client_seed(cfg.seed, r, c))
                try:
                    return client_update(dispatched[i], shards[c], lc, ref)
                except FedMRError as exc:
                    raise RunAborted(r, c, exc) from exc

            uploads = list(pool.map(work, range(K))) if pool else [work(i) for i in range(K)]
            cos = _cosine(uploads)

            if averaging:
                glob = aggregate_mean(uploads)
                eval_locals = uploads
                phase = "avg"
                gap = math.nan
            else:
                plan = plan_for(uploads, 1.0 if cfg.strategy == "indep" else cfg.granularity,
                                derive_seed(cfg.seed, _PLAN, r))
                L_m = recombine(uploads, plan)
                s_before = sum_models(uploads).flatten()
                s_after = sum_models(L_m).flatten()
                gap = float(np.max(np.abs(s_before - s_after)))
                if gap > SUM_GAP_TOL:
                    raise InvariantViolation(f"round {r}: model sum changed by {gap:g} in recombination")
                glob = aggregate_mean(L_m)
                eval_locals = L_m
                phase = "indep" if cfg.strategy == "indep" else "mr"
            if not math.isnan(gap):
                gap_window = max(gap_window, gap)

            if r % cfg.eval_every == 0 or r == cfg.rounds:
                ev = evaluate(glob, test_set)
                local_acc = float(np.mean([evaluate(m, test_set).accuracy for m in eval_locals]))
                rec = RoundRecord(
                    round=r,
                    phase=phase,
                    selected_clients=tuple(selected),
                    global_loss=ev.loss,
                    global_acc=ev.accuracy,
                    local_acc_mean=local_acc,
                    cosine_mean=cos,
                    lemma1_sum_gap=gap_window if phase != "avg" else math.nan,
                    bytes_up=K * nbytes,
                    bytes_down=K * nbytes,
                )
                gap_window = 0.0
                records.append(rec)
                log.info("round %d [%s] acc=%.4f loss=%.4f cos=%.4f", r, phase, ev.accuracy, ev.loss, cos)
                if on_eval is not None:
                    on_eval(rec, glob)
    finally:
        if pool is not None:
            pool.shutdown()

    if L_m and (glob is None or phase != "avg"):
        return RunResult(records, final_global(L_m), list(L_m))
    return RunResult(records, glob, [glob])


def arch_nbytes(arch: ArchitectureSpec) -> int:
    return 8 * sum(math.prod(s) for s in arch.block_shapes())


# ---------------------------------------------------------------------------
# metrics I/O
# ---------------------------------------------------------------------------

CSV_COLUMNS = [
    "round",
    "phase",
    "selected_clients",
    "global_loss",
    "global_acc",
    "local_acc_mean",
    "cosine_mean",
    "lemma1_sum_gap",
    "bytes_up",
    "bytes_down",
]


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, tuple):
        return " ".join(str(x) for x in v)
    return str(v)


def metrics_csv(records: Sequence[RoundRecord]) -> str:
    buf = io.StringIO()
    buf.write(CSV_SCHEMA + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for rec in records:
        w.writerow([_fmt(getattr(rec, c)) for c in CSV_COLUMNS])
    return buf.getvalue()


def write_metrics_csv(records: Sequence[RoundRecord], path: str | Path) -> None:
    Path(path).write_text(metrics_csv(records))


def read_metrics_csv(path: str | Path) -> list[RoundRecord]:
    lines = Path(path).read_text().splitlines()
    if not lines or not lines[0].startswith("# fedmr-metrics"):
        raise ValueError(f"{path}: missing schema header")
    out = []
    for row in csv.DictReader(lines[1:]):
        out.append(
            RoundRecord(
                round=int(row["round"]),
                phase=row["phase"],
                selected_clients=tuple(int(x) for x in row["selected_clients"].split()),
                global_loss=float(row["global_loss"]),
                global_acc=float(row["global_acc"]),
                local_acc_mean=float(row["local_acc_mean"]),
                cosine_mean=float(row["cosine_mean"]),
                lemma1_sum_gap=float(row["lemma1_sum_gap"]),
                bytes_up=int(row["bytes_up"]),
                bytes_down=int(row["bytes_down"]),
            )
        )
    return out


def write_metrics_jsonl(records: Sequence[RoundRecord], path: str | Path) -> None:
    with open(path, "w") as fh:
        for rec in records:
            d = asdict(rec)
            d["selected_clients"] = list(rec.selected_clients)
            for k, v in d.items():
                if isinstance(v, float) and math.isnan(v):
                    d[k] = None
            fh.write(json.dumps(d) + "\n")
