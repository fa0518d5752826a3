"""Self-supervised graph-matching training loop, Adam, metrics and sweeps."""

import csv
import io
import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import affinity, encoder
from .blackbox import hamming_loss_and_grad, solver_grad
from .config import to_dict
from .core import NumericError, atomic_write_text, check_finite, clip_global_norm, global_norm, make_rng
from .graph import knn_graph
from .matcher import Matching, SolverCfg, gm_solve
from .optim import AdamState, adam_update
from .synth import DataConfig, list_batches, load_batch, make_batch

log = logging.getLogger(__name__)


INIT_MODES = ("centered", "random", "identity")


@dataclass
class TrainConfig:
    N: int = 16
    k: int = 5
    lam: float = field(default=80.0, metadata={"key": "lambda"})
    alpha: float = 0.8
    gamma: int = 10
    F: int = 128
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    steps: int = 300
    seed: int = 0
    clip_norm: float = 1.0
    gumbel_scale: float = 1.0
    knn_metric: str = "euclidean"
    init: str = "centered"
    dataset: Optional[str] = None
    solver: SolverCfg = field(default_factory=SolverCfg)
    data: DataConfig = field(default_factory=DataConfig)

    def validate(self):
        if self.N < 2:
            raise ValueError("N must be >= 2")
        if not 1 <= self.k < self.N:
            raise ValueError(f"k must satisfy 1 <= k < N (N={self.N}), got {self.k}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        for name in ("lam", "lr", "eps", "clip_norm"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{'lambda' if name == 'lam' else name} must be > 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("adam betas must lie in [0, 1)")
        if self.gamma < 1 or self.F < 1:
            raise ValueError("gamma and F must be >= 1")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.gumbel_scale < 0:
            raise ValueError("gumbel_scale must be >= 0")
        if self.knn_metric not in ("euclidean", "cosine"):
            raise ValueError("knn_metric must be 'euclidean' or 'cosine'")
        if self.init not in INIT_MODES:
            raise ValueError(f"init must be one of {', '.join(INIT_MODES)}")
        self.solver.validate()
        self.data.validate()


@dataclass
class MetricsRecord:
    step: int
    loss: float
    matching_accuracy: float
    grad_norm_pre_clip: float
    wall_ms: float = 0.0

    def deterministic_dict(self):
        d = asdict(self)
        d.pop("wall_ms")
        return d


def matching_accuracy(m):
    perm = m.perm if isinstance(m, Matching) else np.asarray(m)
    return float(np.mean(perm == np.arange(len(perm))))


# --- forward / backward through the whole chain ----------------------------

@dataclass
class Forward:
    affs: affinity.AffinitySet
    aff_cache: affinity.AffinityCache
    gs: object
    gt: object
    caches: dict


def forward(xs, xt, params, cfg, graphs=None, local_cache=None):
    """Views -> encoder -> pool/project -> kNN graphs -> GNN -> affinities."""
    ys, enc_s = encoder.encoder_forward(xs.y, params.encoder)
    yt, enc_t = encoder.encoder_forward(xt.y, params.encoder)
    check_finite("encoder", ys, yt)
    zs, pp_s = encoder.pool_project_forward(ys, params.projector)
    zt, pp_t = encoder.pool_project_forward(yt, params.projector)
    check_finite("projector", zs, zt)
    if graphs is None:
        gs, gt = knn_graph(zs, cfg.k, cfg.knn_metric), knn_graph(zt, cfg.k, cfg.knn_metric)
    else:
        gs, gt = graphs
    hs, gnn_s = encoder.gnn_forward(gs, zs, params.gnn)
    ht, gnn_t = encoder.gnn_forward(gt, zt, params.gnn)
    check_finite("gnn", hs, ht)
    affs, acache = affinity.build_affinities(
        hs, ht, ys, yt, xs.pos, xt.pos, gs, gt, cfg.alpha, cfg.gamma, local_cache=local_cache
    )
    check_finite("affinity", affs.cv, affs.ce)
    caches = dict(enc_s=enc_s, enc_t=enc_t, pp_s=pp_s, pp_t=pp_t, gnn_s=gnn_s, gnn_t=gnn_t)
    return Forward(affs, acache, gs, gt, caches)


def backward(fw, dcv, dce):
    """Parameter gradients of sum(dcv * cv) + sum(dce * ce), discrete choices frozen."""
    c = fw.caches
    dhs, dht, dys, dyt = affinity.affinity_backward(dcv, dce, fw.affs, fw.aff_cache)
    dzs, g_gnn_s = encoder.gnn_backward(dhs, c["gnn_s"])
    dzt, g_gnn_t = encoder.gnn_backward(dht, c["gnn_t"])
    dys2, g_pp_s = encoder.pool_project_backward(dzs, c["pp_s"])
    dyt2, g_pp_t = encoder.pool_project_backward(dzt, c["pp_t"])
    _, g_enc_s = encoder.encoder_backward(dys + dys2, c["enc_s"])
    _, g_enc_t = encoder.encoder_backward(dyt + dyt2, c["enc_t"])
    grads = {
        "encoder.W": g_enc_s["W"] + g_enc_t["W"],
        "encoder.b": g_enc_s["b"] + g_enc_t["b"],
        "projector.W": g_pp_s["W"] + g_pp_t["W"],
        "projector.b": g_pp_s["b"] + g_pp_t["b"],
    }
    for li in range(2):
        grads[f"gnn{li}.W"] = g_gnn_s[li]["W"] + g_gnn_t[li]["W"]
        grads[f"gnn{li}.b"] = g_gnn_s[li]["b"] + g_gnn_t[li]["b"]
    return grads


def ssl_step(xs, xt, params, cfg, rng, step=0):
    """One pass of the matching objective. Returns (loss, grads, MetricsRecord)."""
    t0 = time.perf_counter()
    fw = forward(xs, xt, params, cfg)
    noisy = affinity.perturb(fw.affs, rng, cfg.gumbel_scale)
    check_finite("perturb", noisy.cv, noisy.ce)

    def solve(a):
        return gm_solve(a, cfg.solver, rng)

    m_hat = solve(noisy)
    n = xs.n
    loss, dLdv = hamming_loss_and_grad(m_hat.v, np.eye(n))
    dcv, dce, _ = solver_grad(noisy, m_hat, dLdv, cfg.lam, solve)
    grads = backward(fw, dcv, dce)
    for name, g in grads.items():
        check_finite(f"backward:{name}", g)
    rec = MetricsRecord(
        step=step,
        loss=loss,
        matching_accuracy=matching_accuracy(m_hat),
        grad_norm_pre_clip=global_norm(list(grads.values())),
        wall_ms=(time.perf_counter() - t0) * 1e3,
    )
    return loss, grads, rec


# --- training runs -----------------------------------------------------------

def _batches(cfg, rng):
    if cfg.dataset:
        dirs = list_batches(cfg.dataset)
        i = 0
        while True:
            xs, xt = load_batch(dirs[i % len(dirs)])
            i += 1
            yield xs, xt
    while True:
        yield make_batch(rng, cfg.N, cfg.data)


def initial_params(cfg, rng):
    """Random or identity stack; "centered" additionally shifts the last GNN
    bias so that output embeddings of one warm-up batch have zero mean."""
    params = encoder.init_params(rng, cfg.data.D, cfg.F, identity=cfg.init == "identity")
    if cfg.init == "centered":
        xs, xt = make_batch(rng, cfg.N, cfg.data)
        fw = forward(xs, xt, params, cfg)
        mean = np.concatenate([fw.aff_cache.zs, fw.aff_cache.zt]).mean(axis=0)
        params.gnn[1].b = (params.gnn[1].b - mean).astype(np.float32)
    return params


def train_run(cfg, out_dir=None, on_record=None, timings=False):
    """Train from scratch. Returns (params, records).

    With ``out_dir``: writes metrics.jsonl, config.json and the final
    checkpoint under checkpoint/ (plus timings.jsonl if ``timings``). On a
    numeric failure the checkpoint of the last good step is written and the
    NumericError re-raised.
    """
    cfg.validate()
    init_rng = make_rng(cfg.seed, 0)
    data_rng = make_rng(cfg.seed, 1)
    step_rng = make_rng(cfg.seed, 2)
    params = initial_params(cfg, init_rng)
    state = AdamState()
    records = []
    batches = _batches(cfg, data_rng)
    failure = None
    for step in range(cfg.steps):
        xs, xt = next(batches)
        try:
            _, grads, rec = ssl_step(xs, xt, params, cfg, step_rng, step)
        except NumericError as exc:
            failure = exc
            log.error("step %d: %s", step, exc)
            break
        names = list(grads)
        clipped = dict(zip(names, clip_global_norm([grads[n] for n in names], cfg.clip_norm)))
        new, state = adam_update(params.named(), clipped, state, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
        params = encoder.ModelParams.from_named(new)
        records.append(rec)
        if on_record is not None:
            on_record(rec)
    if out_dir is not None:
        write_run(out_dir, cfg, params, records, timings)
    if failure is not None:
        raise failure
    return params, records


def write_run(out_dir, cfg, params, records, timings=False):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lines = "".join(json.dumps(r.deterministic_dict(), sort_keys=True) + "\n" for r in records)
    atomic_write_text(out / "metrics.jsonl", lines)
    if timings:
        lines = "".join(json.dumps({"step": r.step, "wall_ms": round(r.wall_ms, 3)}) + "\n" for r in records)
        atomic_write_text(out / "timings.jsonl", lines)
    atomic_write_text(out / "config.json", json.dumps(to_dict(cfg), indent=2, sort_keys=True) + "\n")
    encoder.save_checkpoint(out / "checkpoint", params, {"steps_completed": len(records)})


# --- sweeps ------------------------------------------------------------------

@dataclass
class SweepConfig:
    base: TrainConfig = field(default_factory=lambda: TrainConfig(steps=60))
    N: list[int] = field(default_factory=lambda: [8, 16, 32])
    k: list[int] = field(default_factory=lambda: [5])
    lam: list[float] = field(default_factory=lambda: [80.0], metadata={"key": "lambda"})
    alpha: list[float] = field(default_factory=lambda: [0.7, 0.8, 0.9])
    gamma: list[int] = field(default_factory=lambda: [10])
    tail: int = 10

    def validate(self):
        for name in ("N", "k", "lam", "alpha", "gamma"):
            if not getattr(self, name):
                raise ValueError(f"sweep axis {name} is empty")
        if self.tail < 1:
            raise ValueError("tail must be >= 1")
        self.base.validate()

    def cells(self):
        for N in self.N:
            for k in self.k:
                for lam in self.lam:
                    for alpha in self.alpha:
                        for gamma in self.gamma:
                            yield replace(self.base, N=N, k=k, lam=lam, alpha=alpha, gamma=gamma)


SWEEP_COLUMNS = ["N", "k", "lambda", "alpha", "gamma", "steps", "status", "final_loss", "final_matching_accuracy"]


def run_cell(cfg, tail=10):
    t0 = time.perf_counter()
    row = {"N": cfg.N, "k": cfg.k, "lambda": cfg.lam, "alpha": cfg.alpha, "gamma": cfg.gamma, "steps": cfg.steps}
    try:
        cfg.validate()
        _, recs = train_run(cfg)
        tail_recs = recs[-tail:] if recs else []
        row["status"] = "ok"
        row["final_loss"] = float(np.mean([r.loss for r in tail_recs])) if tail_recs else ""
        row["final_matching_accuracy"] = (
            float(np.mean([r.matching_accuracy for r in tail_recs])) if tail_recs else ""
        )
    except (ValueError, NumericError) as exc:
        row.update(status=f"error: {exc}", final_loss="", final_matching_accuracy="")
    return row, (time.perf_counter() - t0) * 1e3


def sweep_run(sweep, threads=1):
    """Run every grid cell. Returns (rows, wall_ms per row); failing cells are recorded, not raised."""
    cells = list(sweep.cells())
    if threads > 1 and len(cells) > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run_cell, cells, [sweep.tail] * len(cells)))
    else:
        results = [run_cell(c, sweep.tail) for c in cells]
    return [r for r, _ in results], [w for _, w in results]


def rows_to_csv(rows, columns):
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=columns, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({c: _fmt(r.get(c, "")) for c in columns})
    return buf.getvalue()


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v
