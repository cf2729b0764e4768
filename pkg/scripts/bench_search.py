"""Search latency on a synthetic index.

Times ``search`` (query embedding + exact top-k) over a synthetic registry and
reports the median, p95 and max per query.

    python scripts/bench_search.py --tools 20000 --dimension 1024 --queries 100
"""

from __future__ import annotations

import argparse
import json
import random
import statistics
import time

from toolgate.retrieval import EmbedderConfig, HashingEmbedder, RetrievalQuery, build_index, search
from toolgate.synthetic import ACTIONS, RESOURCES, synthetic_registry


def bench(n_tools: int, dimension: int, n_queries: int, k: int = 10, seed: int = 0) -> dict:
    t = time.perf_counter()
    registry = synthetic_registry(n_tools, seed=seed)
    compile_s = time.perf_counter() - t
    cfg = EmbedderConfig(dimension=dimension, seed=seed)
    t = time.perf_counter()
    index = build_index(registry, cfg)
    index_s = time.perf_counter() - t
    embedder = HashingEmbedder(cfg)
    rng = random.Random(seed)
    queries = [f"{rng.choice(ACTIONS)} the {rng.choice(RESOURCES).replace('_', ' ')} {i}" for i in range(n_queries)]
    search(index, RetrievalQuery(queries[0], k), embedder)  # warm-up
    latencies = []
    for q in queries:
        t = time.perf_counter()
        search(index, RetrievalQuery(q, k), embedder)
        latencies.append((time.perf_counter() - t) * 1000)
    latencies.sort()
    return {
        "tools": n_tools,
        "dimension": dimension,
        "queries": n_queries,
        "k": k,
        "median_ms": round(statistics.median(latencies), 3),
        "p95_ms": round(latencies[int(0.95 * (len(latencies) - 1))], 3),
        "max_ms": round(latencies[-1], 3),
        "compile_s": round(compile_s, 3),
        "index_s": round(index_s, 3),
    }


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--tools", type=int, default=20_000)
    ap.add_argument("--dimension", type=int, default=1024)
    ap.add_argument("--queries", type=int, default=100)
    ap.add_argument("-k", type=int, default=10)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    print(json.dumps(bench(args.tools, args.dimension, args.queries, args.k, args.seed), indent=2))


if __name__ == "__main__":
    main()
