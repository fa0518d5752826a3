"""Random matching instances and an exact-vs-heuristic solver benchmark."""

import time
from dataclasses import dataclass, field

import numpy as np

from .affinity import AffinitySet
from .core import make_rng
from .graph import knn_graph
from .matcher import Scorer, SolverCfg, gm_solve, solve_exact

EXACT_LIMIT = 10


def random_instance(rng, N, k, dim=4, noise=0.3):
    """Non-negative affinities on kNN graphs of a point cloud and a noisy permuted copy."""
    zs = rng.standard_normal((N, dim))
    zt = zs[rng.permutation(N)] + noise * rng.standard_normal((N, dim))
    gs, gt = knn_graph(zs, k), knn_graph(zt, k)
    cv = rng.uniform(0.0, 1.0, (N, N))
    ce = rng.uniform(0.0, 1.0, (gs.num_edges, gt.num_edges))
    return AffinitySet(cv, ce, gs.edges, gt.edges)


@dataclass
class BenchConfig:
    min_n: int = 4
    max_n: int = 10
    k: int = 3
    instances: int = 10
    seed: int = 0
    solver: SolverCfg = field(default_factory=SolverCfg)

    def validate(self):
        if not 3 <= self.min_n <= self.max_n:
            raise ValueError("need 3 <= min_n <= max_n")
        if not 1 <= self.k < self.min_n:
            raise ValueError("need 1 <= k < min_n")
        if self.instances < 1:
            raise ValueError("instances must be >= 1")
        self.solver.validate()


BENCH_COLUMNS = ["N", "method", "instances", "score", "optimal_ratio"]


def solver_bench(cfg):
    """One row per (N, method) with the mean score over instances.

    ``optimal_ratio`` is the mean of heuristic/exact score and is filled
    whenever N <= solver.exact_threshold (the exact solve is affordable);
    ``millis`` is the mean wall time per solve.
    """
    cfg.validate()
    rows = []
    for N in range(cfg.min_n, cfg.max_n + 1):
        rng = make_rng(cfg.seed, N)
        has_exact = N <= min(cfg.solver.exact_threshold, EXACT_LIMIT)
        stats = {"exact": ([], []), "heuristic": ([], [])}
        ratios = []
        for _ in range(cfg.instances):
            affs = random_instance(rng, N, cfg.k)
            scorer = Scorer(affs)
            t0 = time.perf_counter()
            h = gm_solve(affs, cfg.solver, rng, force_heuristic=True)
            stats["heuristic"][1].append((time.perf_counter() - t0) * 1e3)
            hs = scorer.score(h.perm)
            stats["heuristic"][0].append(hs)
            if has_exact:
                t0 = time.perf_counter()
                e = solve_exact(affs)
                stats["exact"][1].append((time.perf_counter() - t0) * 1e3)
                es = scorer.score(e.perm)
                stats["exact"][0].append(es)
                ratios.append(hs / es if es > 0 else 1.0)
        for method in ("exact", "heuristic"):
            scores, millis = stats[method]
            if not scores:
                continue
            if method == "exact":
                ratio = 1.0
            else:
                ratio = float(np.mean(ratios)) if ratios else ""
            rows.append(
                {
                    "N": N,
                    "method": method,
                    "instances": len(scores),
                    "score": float(np.mean(scores)),
                    "optimal_ratio": ratio,
                    "millis": float(np.mean(millis)),
                }
            )
    return rows
