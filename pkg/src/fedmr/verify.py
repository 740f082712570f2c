"""Property suites behind ``fedmr verify``. Each returns a JSON-serializable report."""

from __future__ import annotations

import time
from collections import Counter
from typing import Callable

import numpy as np

from .data import PartitionSpec, Samples, heterogeneity_report, make_blobs, partition
from .model import ArchitectureSpec, LayeredModel, aggregate_mean, init_model
from .recombine import check_lemma1, plan_for, recombine
from .secure import (
    MessageBus,
    SecureConfig,
    make_states,
    materialize,
    nonce_multiset,
    secure_round,
)
from .train import backward, forward

SUM_TOL = 1e-9
SQDIST_TOL = 1e-12
GRAD_TOL = 1e-5
FD_STEP = 1e-5


def random_models(rng: np.random.Generator, K: int, n_layers: int, max_width: int = 6) -> list[LayeredModel]:
    shapes = [tuple(int(d) for d in rng.integers(1, max_width + 1, size=rng.integers(1, 3))) for _ in range(n_layers)]
    scale = 10.0 ** rng.uniform(-2, 2)
    return [
        LayeredModel.from_arrays([scale * rng.standard_normal(s) for s in shapes]) for _ in range(K)
    ]


def lemma1_case(rng: np.random.Generator) -> dict:
    """One random recombination and its conservation gaps."""
    K = int(rng.integers(2, 21))
    n_layers = int(rng.integers(2, 13))
    models = random_models(rng, K, n_layers)
    gran = None if rng.random() < 0.5 else float(rng.choice([1.0, 0.5, 0.34, 0.25, 0.2, 0.1]))
    plan = plan_for(models, gran, int(rng.integers(2**32)))
    after = recombine(models, plan)
    x = models[0].unflatten(rng.standard_normal(models[0].size))
    rep = check_lemma1(models, after, x)
    mean_gap = float(np.max(np.abs(aggregate_mean(models).flatten() - aggregate_mean(after).flatten())))
    return {
        "K": K,
        "n_layers": n_layers,
        "granularity": gran,
        "sum_gap": rep.sum_gap,
        "sqdist_gap": rep.sqdist_gap,
        "mean_gap": mean_gap,
    }


def suite_lemma1(n_cases: int = 200, seed: int = 0) -> dict:
    rng = np.random.default_rng(seed)
    cases = [lemma1_case(rng) for _ in range(n_cases)]
    worst = {k: max(c[k] for c in cases) for k in ("sum_gap", "sqdist_gap", "mean_gap")}
    passed = worst["sum_gap"] <= SUM_TOL and worst["sqdist_gap"] <= SQDIST_TOL and worst["mean_gap"] <= SUM_TOL
    return {"suite": "lemma1", "passed": passed, "cases": n_cases, "worst": worst}


def finite_difference_grad(model: LayeredModel, batch, h: float = FD_STEP) -> np.ndarray:
    w = model.flatten()
    out = np.empty_like(w)
    for i in range(w.size):
        wp = w.copy()
        wp[i] += h
        wm = w.copy()
        wm[i] -= h
        out[i] = (forward(model.unflatten(wp), batch).loss - forward(model.unflatten(wm), batch).loss) / (2 * h)
    return out


def gradient_rel_error(model: LayeredModel, batch, h: float = FD_STEP) -> float:
    """Max per-parameter relative error of the analytic gradient.

    The denominator is ``max(|analytic|, |numeric|, h)``: gradients smaller than
    the step are below what central differences can resolve.
    """
    g = backward(model, batch).flatten()
    fd = finite_difference_grad(model, batch, h)
    den = np.maximum(np.maximum(np.abs(g), np.abs(fd)), h)
    return float(np.max(np.abs(g - fd) / den))


def random_net_and_batch(rng: np.random.Generator, max_hidden: int = 3) -> tuple[LayeredModel, Samples]:
    n_hidden = int(rng.integers(0, max_hidden + 1))
    sizes = [int(rng.integers(2, 7))] + [int(rng.integers(2, 9)) for _ in range(n_hidden)] + [int(rng.integers(2, 6))]
    m = init_model(ArchitectureSpec.from_sizes(sizes), int(rng.integers(2**32)))
    # non-zero biases so every block gets a generic gradient
    m = m.unflatten(m.flatten() + rng.normal(0.0, 0.3, m.size))
    B = int(rng.integers(1, 13))
    batch = Samples(rng.standard_normal((B, sizes[0])), rng.integers(0, sizes[-1], B), sizes[-1])
    return m, batch


def suite_gradcheck(n_cases: int = 20, seed: int = 0) -> dict:
    rng = np.random.default_rng(seed)
    errs = [gradient_rel_error(*random_net_and_batch(rng)) for _ in range(n_cases)]
    return {"suite": "gradcheck", "passed": max(errs) <= GRAD_TOL, "cases": n_cases, "max_rel_error": max(errs)}


def secure_case(rng: np.random.Generator, policy: str | None = None) -> dict:
    K = int(rng.integers(2, 11))
    n_layers = int(rng.integers(1, 9))
    repeats = int(rng.integers(1, 4))
    n_high = int(rng.integers(0, n_layers + 1))
    n_low = int(rng.integers(0, n_high + 1))
    cfg = SecureConfig(repeats, n_low, n_high, int(rng.integers(2**31)))
    models = random_models(rng, K, n_layers)
    states = make_states(models, cfg.seed)
    before = nonce_multiset(states)
    bus = MessageBus(policy or str(rng.choice(["fifo", "random"])), cfg.seed)
    report = secure_round(states, cfg, bus)
    complete = all(len(s.layers) == n_layers and s.phase == "done" for s in states)
    out_models = materialize(states)
    complete = complete and all(m.shapes == models[0].shapes for m in out_models)
    sent = Counter(e["from"] for e in report.trace if e["kind"] == "send")
    back = Counter(e["to"] for e in report.trace if e["kind"] == "return")
    return {
        "K": K,
        "repeats": repeats,
        "n_low": n_low,
        "n_high": n_high,
        "conserved": before == nonce_multiset(states),
        "complete": complete,
        "balanced": report.sends == report.returns and sent == back,
    }


def suite_secure(n_cases: int = 500, seed: int = 0) -> dict:
    rng = np.random.default_rng(seed)
    cases = [secure_case(rng) for _ in range(n_cases)]
    checks = {k: all(c[k] for c in cases) for k in ("conserved", "complete", "balanced")}
    return {"suite": "secure", "passed": all(checks.values()), "cases": n_cases, **checks}


def suite_partition(seed: int = 0, n_seeds: int = 20) -> dict:
    ds = make_blobs(10, 16, 100, 0.5, seed)
    exact = True
    deterministic = True
    ent: dict[str, list[float]] = {"0.1": [], "1.0": [], "iid": []}
    for s in range(n_seeds):
        for key in ent:
            spec = (
                PartitionSpec(20, "iid", seed=s)
                if key == "iid"
                else PartitionSpec(20, "dirichlet", float(key), seed=s)
            )
            shards = partition(ds.train, spec)
            idx = np.concatenate([sh.indices for sh in shards])
            exact &= len(idx) == len(ds.train) and len(np.unique(idx)) == len(idx)
            again = partition(ds.train, spec)
            deterministic &= all(np.array_equal(a.indices, b.indices) for a, b in zip(shards, again))
            ent[key].append(heterogeneity_report(shards).mean_entropy)
    means = {k: float(np.mean(v)) for k, v in ent.items()}
    ordered = means["0.1"] < means["1.0"] < means["iid"]
    return {
        "suite": "partition",
        "passed": bool(exact and deterministic and ordered),
        "exact": bool(exact),
        "deterministic": bool(deterministic),
        "mean_entropy": means,
    }


SUITES: dict[str, Callable[[], dict]] = {
    "lemma1": suite_lemma1,
    "gradcheck": suite_gradcheck,
    "secure": suite_secure,
    "partition": suite_partition,
}


def run_suite(name: str) -> dict:
    t0 = time.perf_counter()
    report = SUITES[name]()
    report["seconds"] = round(time.perf_counter() - t0, 3)
    return report
