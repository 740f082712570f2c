"""Command-line entry point: ``fedmr run | compare | verify``.

Log level comes from the ``FEDMR_LOG_LEVEL`` environment variable (default WARNING).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

from .data import (
    PartitionSpec,
    data_fingerprint,
    default_min_shard_size,
    make_blobs,
    partition,
    write_jsonl,
    write_partition_map,
)
from .errors import FedMRError, IncompatibleRunsError, ManifestError
from .model import save_model
from .orchestrator import (
    RunConfig,
    read_metrics_csv,
    run,
    write_metrics_csv,
    write_metrics_jsonl,
)
from .train import LocalTrainConfig
from .verify import SUITES, run_suite

log = logging.getLogger("fedmr")

_DATASET_KEYS = {"num_classes", "dim", "per_class", "spread", "seed", "test_fraction"}
_PARTITION_KEYS = {"num_clients", "mode", "alpha", "min_shard_size", "seed"}
_RUN_KEYS = {
    "name", "strategy", "rounds", "clients_per_round", "hidden", "granularity",
    "stage_switch", "prox_mu", "local", "eval_every", "seed", "num_clients",
}
_LOCAL_KEYS = {"epochs", "batch_size", "lr", "momentum", "prox_mu", "seed"}


def _require(d: dict, key: str, where: str):
    if key not in d:
        raise ManifestError(f"{where}.{key}", "missing")
    return d[key]


def _unknown(d: dict, allowed: set[str], where: str) -> None:
    extra = sorted(set(d) - allowed)
    if extra:
        raise ManifestError(f"{where}.{extra[0]}", "unknown field")


def resolve_manifest(doc: dict, seed_override: int | None = None) -> dict:
    """Validate a manifest and fill every default, including all seeds."""
    if not isinstance(doc, dict):
        raise ManifestError("<root>", "manifest must be a JSON object")
    _unknown(doc, {"seed", "out", "dataset", "partition", "runs"}, "<root>")
    base_seed = int(doc.get("seed", 0))

    ds = dict(_require(doc, "dataset", "<root>"))
    _unknown(ds, _DATASET_KEYS, "dataset")
    for k in ("num_classes", "dim", "per_class", "spread"):
        _require(ds, k, "dataset")
    ds.setdefault("seed", base_seed)
    ds.setdefault("test_fraction", 0.2)

    pt = dict(_require(doc, "partition", "<root>"))
    _unknown(pt, _PARTITION_KEYS, "partition")
    _require(pt, "num_clients", "partition")
    pt.setdefault("mode", "iid")
    pt.setdefault("alpha", None)
    pt.setdefault("min_shard_size", None)
    pt.setdefault("seed", base_seed)

    runs = _require(doc, "runs", "<root>")
    if not isinstance(runs, list) or not runs:
        raise ManifestError("runs", "must be a non-empty list")
    resolved_runs = []
    names = set()
    for i, r in enumerate(runs):
        where = f"runs[{i}]"
        r = dict(r)
        _unknown(r, _RUN_KEYS, where)
        local = dict(r.pop("local", {}))
        _unknown(local, _LOCAL_KEYS, f"{where}.local")
        name = r.pop("name", r.get("strategy", "run") + f"_{i}")
        if name in names:
            raise ManifestError(f"{where}.name", f"duplicate run name {name!r}")
        names.add(name)
        _require(r, "rounds", where)
        _require(r, "clients_per_round", where)
        r.setdefault("seed", base_seed)
        if seed_override is not None:
            r["seed"] = seed_override
        K, N = r["clients_per_round"], pt["num_clients"]
        if r.pop("num_clients", N) != N:
            raise ManifestError(f"{where}.num_clients", f"must equal partition.num_clients={N}")
        if not isinstance(K, int) or not 1 <= K <= N:
            raise ManifestError(f"{where}.clients_per_round", f"K={K} must lie in [1, N={N}]")
        try:
            cfg = RunConfig.from_dict({**r, "num_clients": N, "local": LocalTrainConfig(**local)})
        except (TypeError, ValueError) as exc:
            raise ManifestError(where, str(exc)) from exc
        resolved_runs.append({"name": name, **cfg.to_dict()})

    if pt["min_shard_size"] is None:
        n_train = ds["num_classes"] * (ds["per_class"] - int(round(ds["test_fraction"] * ds["per_class"])))
        batch = min(r["local"]["batch_size"] for r in resolved_runs)
        pt["min_shard_size"] = default_min_shard_size(batch, n_train, pt["num_clients"])
    try:
        PartitionSpec(**pt)
    except (TypeError, ValueError) as exc:
        raise ManifestError("partition", str(exc)) from exc
    return {"seed": base_seed, "dataset": ds, "partition": pt, "runs": resolved_runs}


def config_hash(run_cfg: dict) -> str:
    """Hash of a resolved run config with every seed removed."""
    d = {k: v for k, v in run_cfg.items() if k not in ("seed", "name")}
    d["local"] = {k: v for k, v in d["local"].items() if k != "seed"}
    return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


def cmd_run(args) -> int:
    path = Path(args.manifest)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        print(f"error: {path}:{exc.lineno}:{exc.colno}: {exc.msg}", file=sys.stderr)
        return 2
    try:
        res = resolve_manifest(doc, args.seed_override)
    except ManifestError as exc:
        print(f"error: {path}: invalid field {exc}", file=sys.stderr)
        return 2
    out = Path(args.out or doc.get("out") or "runs")
    out.mkdir(parents=True, exist_ok=True)
    (out / "resolved_manifest.json").write_text(json.dumps(res, indent=2, sort_keys=True))

    ds_cfg = res["dataset"]
    blobs = make_blobs(**ds_cfg)
    spec = PartitionSpec(**res["partition"])
    shards = partition(blobs.train, spec)
    fingerprint = data_fingerprint(blobs.train, blobs.test, shards)
    data_dir = out / "data"
    data_dir.mkdir(exist_ok=True)
    write_jsonl(blobs.train, data_dir / "train.jsonl")
    write_jsonl(blobs.test, data_dir / "test.jsonl")
    write_partition_map(shards, data_dir / "partition.json")

    for rc in res["runs"]:
        name = rc["name"]
        cfg = RunConfig.from_dict({k: v for k, v in rc.items() if k != "name"})
        rdir = out / name
        ckpt = rdir / "checkpoints"
        ckpt.mkdir(parents=True, exist_ok=True)

        def on_eval(rec, model, ckpt=ckpt):
            save_model(model, ckpt / f"round_{rec.round:05d}.fmr")

        log.info("run %s (%s, %d rounds)", name, cfg.strategy, cfg.rounds)
        result = run(cfg, shards, blobs.test, threads=args.threads, on_eval=on_eval)
        write_metrics_csv(result.records, rdir / "metrics.csv")
        write_metrics_jsonl(result.records, rdir / "metrics.jsonl")
        save_model(result.global_model, rdir / "final.fmr")
        snapshot = {
            "name": name,
            "config": rc,
            "config_hash": config_hash(rc),
            "dataset": ds_cfg,
            "partition": res["partition"],
            "data_fingerprint": fingerprint,
        }
        (rdir / "resolved_config.json").write_text(json.dumps(snapshot, indent=2, sort_keys=True))
        final = result.records[-1].global_acc if result.records else float("nan")
        print(f"{name}: {len(result.records)} records, final acc {final:.4f} -> {rdir}")
    return 0


def rounds_to_target(records, target: float) -> int | None:
    for rec in records:
        if rec.global_acc >= target:
            return rec.round
    return None


def compare_runs(run_dirs: list[Path], target: float) -> list[dict]:
    rows = []
    fingerprint = None
    for d in run_dirs:
        snap = json.loads((d / "resolved_config.json").read_text())
        if fingerprint is None:
            fingerprint = snap["data_fingerprint"]
        elif snap["data_fingerprint"] != fingerprint:
            raise IncompatibleRunsError(f"{d} was trained on different data than {run_dirs[0]}")
        recs = read_metrics_csv(d / "metrics.csv")
        accs = [r.global_acc for r in recs]
        rows.append(
            {
                "run": str(d),
                "strategy": snap["config"]["strategy"],
                "config_hash": snap["config_hash"],
                "final_acc": accs[-1] if accs else None,
                "best_acc": max(accs) if accs else None,
                "rounds_to_target": rounds_to_target(recs, target),
            }
        )
    base = rows[0]["final_acc"]
    for r in rows:
        r["delta_final"] = None if base is None or r["final_acc"] is None else r["final_acc"] - base
    return rows


def cmd_compare(args) -> int:
    try:
        rows = compare_runs([Path(d) for d in args.run_dirs], args.target)
    except IncompatibleRunsError as exc:
        print(f"error: incompatible runs: {exc}", file=sys.stderr)
        return 3
    if args.json:
        print(json.dumps(rows, indent=2))
        return 0
    print(f"{'run':<30} {'strategy':<8} {'final':>7} {'best':>7} {'delta':>8} {'to_target':>9}")
    for r in rows:
        ttt = "-" if r["rounds_to_target"] is None else str(r["rounds_to_target"])
        print(
            f"{r['run'][-30:]:<30} {r['strategy']:<8} {r['final_acc']:>7.4f} "
            f"{r['best_acc']:>7.4f} {r['delta_final']:>+8.4f} {ttt:>9}"
        )
    return 0


def cmd_verify(args) -> int:
    report = run_suite(args.suite)
    print(json.dumps(report, indent=2, sort_keys=True))
    return 0 if report["passed"] else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fedmr", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run every experiment in a manifest")
    r.add_argument("--manifest", required=True)
    r.add_argument("--out", default=None, help="output directory (overrides manifest 'out')")
    r.add_argument("--seed-override", type=int, default=None, help="replace every run seed")
    r.add_argument("--threads", type=int, default=1, help="parallel client updates per round")
    r.set_defaults(func=cmd_run)

    c = sub.add_parser("compare", help="summarize finished runs side by side")
    c.add_argument("run_dirs", nargs="+")
    c.add_argument("--target", type=float, default=0.5, help="accuracy for rounds-to-target")
    c.add_argument("--json", action="store_true")
    c.set_defaults(func=cmd_compare)

    v = sub.add_parser("verify", help="run a property suite")
    v.add_argument("--suite", required=True, choices=sorted(SUITES))
    v.set_defaults(func=cmd_verify)
    return p


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(
        level=os.environ.get("FEDMR_LOG_LEVEL", "WARNING").upper(),
        format="%(levelname)s %(name)s: %(message)s",
    )
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except FedMRError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
