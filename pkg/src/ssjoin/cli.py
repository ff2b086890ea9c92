"""Command-line entry point: one subcommand per phase plus ``pipeline``."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .bucket_graph import BucketGraph, PruneBudget, build_graph
from .bucketizer import BucketStore, assign_and_layout, default_num_buckets, select_centers
from .center_index import CenterIndex, build_index
from .config import JoinConfig, parse_size
from .dataset import gen_synthetic, load_all, open_dataset
from .errors import PlanMismatch, SSJoinError
from .evaluator import PairSet, brute_force_join, calibrate_epsilon, check_precision, recall
from .executor import PairWriter, read_pairs, run_join
from .orchestrator import capacity_in_buckets, load_plan, orchestrate, save_plan, simulate_policy
from .pipeline import run_pipeline, write_pairset

log = logging.getLogger("ssjoin")

LOG_ENV = "SSJOIN_LOG_LEVEL"


def _setup_logging() -> None:
    level = os.environ.get(LOG_ENV, "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), stream=sys.stderr,
                        format="%(asctime)s %(levelname)s %(name)s %(message)s")


def _store_bytes(store: BucketStore) -> int:
    return store.N * store.dim * 4


# -- subcommands -------------------------------------------------------------

def cmd_gen_data(a) -> int:
    h = gen_synthetic(a.n, a.dim, a.clusters, a.spread, a.seed, a.out, spread_max=a.spread_max, box=a.box,
                     outliers=a.outliers)
    print(f"wrote {h.count} x {h.dim} to {h.path}")
    return 0


def cmd_calibrate(a) -> int:
    h = open_dataset(a.data)
    cal = calibrate_epsilon(h, a.target_neighbors, min(a.sample_size, h.count), a.seed)
    print(f"epsilon={cal.epsilon!r}")
    print(f"achieved_avg={cal.achieved_avg:.4f}")
    print(f"sample_size={cal.sample_size}")
    return 0


def cmd_bucketize(a) -> int:
    h = open_dataset(a.data)
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    M = a.num_buckets or default_num_buckets(h.count)
    budget = parse_size(a.memory_budget, h.payload_bytes)
    cache = parse_size(a.cache_bytes, h.payload_bytes) if a.cache_bytes else budget
    cids, centers = select_centers(h, M, a.seed)
    index = build_index(centers, a.graph_degree, a.ef_construction, a.seed)
    store = assign_and_layout(h, index, budget, out, "store", max(4096, cache // 4), a.ef_search, cids)
    index.save(out / "centers.cidx")
    (out / "layout.json").write_text(json.dumps(store.layout_stats, indent=2))
    print(json.dumps(store.layout_stats, indent=2))
    return 0


def _index_for(store_path: Path, index_path) -> CenterIndex:
    return CenterIndex.load(index_path or store_path.with_name("centers.cidx"))


def cmd_graph(a) -> int:
    store = BucketStore.open(a.store)
    index = _index_for(Path(a.store), a.index)
    g = build_graph(store, index, a.epsilon, PruneBudget(a.lam, store.dim, not a.no_mu), a.L,
                    combine=a.combine)
    g.save(a.out)
    g.write_stats_csv(a.stats or str(a.out) + ".csv")
    print(json.dumps(g.stats, indent=2))
    return 0


def cmd_orchestrate(a) -> int:
    store = BucketStore.open(a.store)
    g = BucketGraph.load(a.graph)
    C = capacity_in_buckets(parse_size(a.cache_bytes, _store_bytes(store)), store.max_bucket_bytes)
    sched, plan = orchestrate(g, C, not a.no_reorder)
    save_plan(a.out, sched, plan)
    print(f"capacity={C} tasks={len(sched.tasks)} misses={plan.misses} hit_rate={plan.hit_rate:.4f}")
    return 0


def cmd_simulate_cache(a) -> int:
    if bool(a.plan) == bool(a.seq):
        raise ValueError("give exactly one of --plan or --seq")
    if a.plan:
        sched, plan = load_plan(a.plan)
        seq, C, paired = sched.access_seq, a.capacity or plan.capacity, True
    else:
        seq = np.loadtxt(a.seq, dtype=np.int64, ndmin=1)
        if not a.capacity:
            raise ValueError("--capacity is required with --seq")
        C, paired = a.capacity, a.paired
    print("policy,capacity,accesses,misses,hits,hit_rate")
    for pol in a.policies.split(","):
        r = simulate_policy(seq, C, pol, paired)
        print(f"{pol},{C},{len(seq)},{r.misses},{r.hits},{r.hit_rate:.6f}")
    return 0


def cmd_join(a) -> int:
    store = BucketStore.open(a.store)
    if a.data:
        h = open_dataset(a.data)
        if (h.count, h.dim) != (store.N, store.dim):
            raise PlanMismatch(f"dataset {h.count}x{h.dim} does not match store {store.N}x{store.dim}")
    g = BucketGraph.load(a.graph)
    if a.lam is not None and abs(a.lam - g.lam) > 1e-12:
        raise PlanMismatch(f"graph was built with lambda={g.lam}, not {a.lam}")
    if a.epsilon > g.epsilon * (1 + 1e-12):
        log.warning("epsilon %.6g exceeds the graph's %.6g; recall may drop", a.epsilon, g.epsilon)
    sched, plan = load_plan(a.plan)
    cache = parse_size(a.cache_bytes, _store_bytes(store))
    # verification runs on one thread, so output order is always deterministic
    with PairWriter(str(a.out) + ".tmp", a.epsilon, store.N) as sink:
        stats = run_join(store, sched, plan, a.epsilon, sink, cache, a.prefetch_depth, g.digest(),
                         direct=not a.buffered)
    os.replace(str(a.out) + ".tmp", a.out)
    print(stats.to_text())
    if a.stats_csv:
        new = not Path(a.stats_csv).exists()
        with open(a.stats_csv, "a") as f:
            if new:
                f.write(",".join(stats.CSV_FIELDS) + "\n")
            f.write(",".join(str(v) for v in stats.csv_row()) + "\n")
    return 0


def cmd_oracle(a) -> int:
    h = open_dataset(a.data)
    ps = brute_force_join(h, a.epsilon, a.max_n, a.method)
    write_pairset(a.out, ps, a.epsilon, h.count)
    print(f"pairs={len(ps)}")
    return 0


def cmd_eval(a) -> int:
    eps_e, n_e, recs_e = read_pairs(a.engine)
    eps_o, n_o, recs_o = read_pairs(a.oracle)
    engine = PairSet.from_records(recs_e, "engine")
    oracle = PairSet.from_records(recs_o, "oracle")
    print(f"engine_pairs={len(engine)}")
    print(f"oracle_pairs={len(oracle)}")
    print(f"recall={recall(engine, oracle):.6f}")
    if a.data:
        rep = check_precision(engine, load_all(open_dataset(a.data)), eps_e)
        print(f"precision={rep.precision:.6f}")
        print(f"violations={rep.violations}")
    else:
        extra = np.setdiff1d(engine.keys, oracle.keys, assume_unique=True)
        print(f"not_in_oracle={len(extra)}")
    return 0


def cmd_pipeline(a) -> int:
    cfg = JoinConfig.load(a.config) if a.config else JoinConfig()
    cfg = cfg.override(epsilon=a.epsilon, target_neighbors=a.target_neighbors, lam=a.lam,
                       memory_budget=a.memory_budget, cache_bytes=a.cache_bytes,
                       num_buckets=a.num_buckets, L=a.L, seed=a.seed, prefetch_depth=a.prefetch_depth,
                       combine=a.combine,
                       apply_mu=False if a.no_mu else None, reorder=False if a.no_reorder else None,
                       evaluate=True if a.eval else None)
    res = run_pipeline(cfg, a.data, a.out)
    print(f"epsilon={res.epsilon!r}")
    if res.skipped:
        print(f"skipped={','.join(res.skipped)}")
    print(res.stats.to_text())
    if res.recall is not None:
        print(f"recall={res.recall:.6f}")
        print(f"precision={res.precision:.6f}")
    return 0


# -- parser ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ssjoin", description="Disk-resident vector similarity self-join.")
    sub = p.add_subparsers(dest="cmd", required=True)

    s = sub.add_parser("gen-data", help="write a synthetic clustered dataset")
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--dim", type=int, required=True)
    s.add_argument("--clusters", type=int, default=100)
    s.add_argument("--spread", type=float, default=0.05)
    s.add_argument("--spread-max", type=float, default=None, help="log-uniform per-cluster spread upper end")
    s.add_argument("--box", type=float, default=1.0, help="side of the cube holding cluster centres")
    s.add_argument("--outliers", type=float, default=0.0, help="fraction of uniform background vectors")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_gen_data)

    s = sub.add_parser("calibrate", help="pick epsilon for a target neighbour count")
    s.add_argument("--data", required=True)
    s.add_argument("--target-neighbors", type=float, required=True)
    s.add_argument("--sample-size", type=int, default=1000)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(fn=cmd_calibrate)

    s = sub.add_parser("bucketize", help="sample centres, assign vectors, write the bucket store")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--num-buckets", type=int)
    s.add_argument("--memory-budget", default="10%")
    s.add_argument("--cache-bytes", help="join cache size; buckets above a quarter of it are split")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--graph-degree", type=int, default=16)
    s.add_argument("--ef-construction", type=int, default=200)
    s.add_argument("--ef-search", type=int, default=64)
    s.set_defaults(fn=cmd_bucketize)

    s = sub.add_parser("graph", help="build the bucket dependency graph")
    s.add_argument("--store", required=True)
    s.add_argument("--index", help="centre index (default: centers.cidx next to the store)")
    s.add_argument("--epsilon", type=float, required=True)
    s.add_argument("--lambda", dest="lam", type=float, default=0.9)
    s.add_argument("--L", type=int, default=256)
    s.add_argument("--no-mu", action="store_true")
    s.add_argument("--combine", choices=("both", "either"), default="both")
    s.add_argument("--out", required=True)
    s.add_argument("--stats", help="per-bucket stats CSV (default: <out>.csv)")
    s.set_defaults(fn=cmd_graph)

    s = sub.add_parser("orchestrate", help="reorder tasks and plan cache evictions")
    s.add_argument("--store", required=True)
    s.add_argument("--graph", required=True)
    s.add_argument("--cache-bytes", required=True)
    s.add_argument("--no-reorder", action="store_true")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_orchestrate)

    s = sub.add_parser("simulate-cache", help="replay an access sequence under several policies")
    s.add_argument("--plan")
    s.add_argument("--seq", help="text file, one bucket id per line")
    s.add_argument("--capacity", type=int)
    s.add_argument("--policies", default="belady,lru,fifo")
    s.add_argument("--paired", action="store_true", help="treat the sequence as task pairs")
    s.set_defaults(fn=cmd_simulate_cache)

    s = sub.add_parser("join", help="execute a plan and write result pairs")
    s.add_argument("--data")
    s.add_argument("--store", required=True)
    s.add_argument("--graph", required=True)
    s.add_argument("--plan", required=True)
    s.add_argument("--epsilon", type=float, required=True)
    s.add_argument("--lambda", dest="lam", type=float)
    s.add_argument("--cache-bytes", required=True)
    s.add_argument("--prefetch-depth", type=int, default=2)
    s.add_argument("--buffered", action="store_true", help="skip O_DIRECT")
    s.add_argument("--deterministic", action="store_true",
                   help="accepted for compatibility; output order is always deterministic")
    s.add_argument("--stats-csv")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_join)

    s = sub.add_parser("oracle", help="exact brute-force self-join")
    s.add_argument("--data", required=True)
    s.add_argument("--epsilon", type=float, required=True)
    s.add_argument("--method", choices=("blocked", "naive"), default="blocked")
    s.add_argument("--max-n", type=int, default=200_000)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_oracle)

    s = sub.add_parser("eval", help="recall (and precision with --data) of engine pairs")
    s.add_argument("--engine", required=True)
    s.add_argument("--oracle", required=True)
    s.add_argument("--data")
    s.set_defaults(fn=cmd_eval)

    s = sub.add_parser("pipeline", help="all phases end to end")
    s.add_argument("--config")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--epsilon", type=float)
    s.add_argument("--target-neighbors", type=float)
    s.add_argument("--lambda", dest="lam", type=float)
    s.add_argument("--memory-budget")
    s.add_argument("--cache", "--cache-bytes", dest="cache_bytes")
    s.add_argument("--num-buckets", type=int)
    s.add_argument("--L", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--prefetch-depth", type=int)
    s.add_argument("--combine", choices=("both", "either"))
    s.add_argument("--no-mu", action="store_true")
    s.add_argument("--no-reorder", action="store_true")
    s.add_argument("--eval", action="store_true")
    s.set_defaults(fn=cmd_pipeline)
    return p


def main(argv=None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (SSJoinError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
