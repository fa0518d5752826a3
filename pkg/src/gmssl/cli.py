"""Command-line entry point: ``gmssl <command> [options]``.

Exit codes: 0 ok, 2 configuration error, 3 numeric failure, 4 I/O error.
"""

import argparse
import csv
import io
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .affinity import perturb
from .bench import BENCH_COLUMNS, BenchConfig, solver_bench
from .blackbox import hamming_loss_and_grad
from .config import ConfigError, dumps, from_dict, schema_hash
from .core import NumericError, TensorFormatError, atomic_write_text, make_rng, save_tensor
from .encoder import load_checkpoint
from .matcher import gm_solve
from .synth import DataConfig, list_batches, load_batch, make_batch, save_batch
from .trainer import (
    SWEEP_COLUMNS,
    SweepConfig,
    TrainConfig,
    forward,
    initial_params,
    matching_accuracy,
    rows_to_csv,
    sweep_run,
    train_run,
)
from .uncertainty import ShiftSpec, UQConfig, eval_ood, load_head, save_head, train_uq, write_report

log = logging.getLogger("gmssl")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4


@dataclass
class GenDataConfig:
    N: int = 16
    batches: int = 4
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)

    def validate(self):
        if self.N < 2:
            raise ValueError("N must be >= 2")
        if self.batches < 1:
            raise ValueError("batches must be >= 1")
        self.data.validate()


CONFIG_CLASSES = {
    "gen-data": GenDataConfig,
    "train-ssl": TrainConfig,
    "eval-match": TrainConfig,
    "sweep": SweepConfig,
    "solver-bench": BenchConfig,
    "train-uq": UQConfig,
    "eval-ood": UQConfig,
}


def config_schema_hash():
    return schema_hash(GenDataConfig, TrainConfig, SweepConfig, BenchConfig, UQConfig)


# --- config loading ----------------------------------------------------------

def _set_path(d, dotted, value):
    keys = dotted.split(".")
    for k in keys[:-1]:
        d = d.setdefault(k, {})
        if not isinstance(d, dict):
            raise ConfigError(dotted, "cannot set a key below a non-object value")
    d[keys[-1]] = value


def load_config(cls, path=None, overrides=(), seed=None, base=None):
    """JSON file (optional) + ``key.path=value`` overrides + --seed, strictly typed."""
    data = dict(base or {})
    if path is not None:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError("", f"cannot read config {path}: {exc.strerror}") from None
        try:
            loaded = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError("", f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})") from None
        if not isinstance(loaded, dict):
            raise ConfigError("", f"{path}: top level must be a JSON object")
        data = _merge(data, loaded)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(item, "override must look like key.path=value")
        key, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        _set_path(data, key.strip(), value)
    if seed is not None:
        if cls is SweepConfig:
            data.setdefault("base", {})["seed"] = seed
        else:
            data["seed"] = seed
    return from_dict(cls, data)


def _merge(a, b):
    out = dict(a)
    for k, v in b.items():
        out[k] = _merge(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) else v
    return out


# --- commands ----------------------------------------------------------------

def cmd_gen_data(args, cfg):
    out = _require_out(args)
    rng = make_rng(cfg.seed)
    for b in range(cfg.batches):
        xs, xt = make_batch(rng, cfg.N, cfg.data)
        save_batch(out / f"batch_{b:03d}", xs, xt, cfg.seed, cfg.data)
    atomic_write_text(out / "config.json", dumps(cfg))
    print(json.dumps({"batches": cfg.batches, "out": str(out)}))
    return EXIT_OK


def cmd_train_ssl(args, cfg):
    out = _require_out(args)
    if args.dataset:
        cfg.dataset = args.dataset

    def show(rec):
        if args.verbose and (rec.step % 10 == 0 or rec.step == cfg.steps - 1):
            log.info("step %d loss %.1f acc %.3f", rec.step, rec.loss, rec.matching_accuracy)

    _, records = train_run(cfg, out, on_record=show, timings=args.timings)
    tail = records[-20:]
    summary = {
        "steps": len(records),
        "final_matching_accuracy": float(np.mean([r.matching_accuracy for r in tail])) if tail else None,
        "final_loss": float(np.mean([r.loss for r in tail])) if tail else None,
    }
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def _edges_csv(edges):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["i", "j"])
    w.writerows(edges.tolist())
    return buf.getvalue()


def _ce_csv(affs):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["i", "j", "a", "b", "value"])
    ce = np.asarray(affs.ce, dtype=np.float32)
    for e, (i, j) in enumerate(affs.es.tolist()):
        for f, (a, b) in enumerate(affs.et.tolist()):
            w.writerow([i, j, a, b, repr(float(ce[e, f]))])
    return buf.getvalue()


def cmd_eval_match(args, cfg):
    if args.checkpoint:
        params = load_checkpoint(args.checkpoint)
    else:
        params = initial_params(cfg, make_rng(cfg.seed, 0))
    source = args.batch or args.dataset or cfg.dataset
    if source:
        batches = [load_batch(d) for d in list_batches(source)]
    else:
        batches = [make_batch(make_rng(cfg.seed, 3), cfg.N, cfg.data)]
    rng = make_rng(cfg.seed, 4)
    losses, accs = [], []
    for bi, (xs, xt) in enumerate(batches):
        fw = forward(xs, xt, params, cfg)
        affs = perturb(fw.affs, rng, cfg.gumbel_scale) if args.perturb else fw.affs
        m = gm_solve(affs, cfg.solver, rng)
        loss, _ = hamming_loss_and_grad(m.v, np.eye(xs.n))
        losses.append(loss)
        accs.append(matching_accuracy(m))
        if args.out and bi == 0:
            out = Path(args.out)
            if args.dump_graph:
                atomic_write_text(out / "graph_source.csv", _edges_csv(fw.gs.edges))
                atomic_write_text(out / "graph_target.csv", _edges_csv(fw.gt.edges))
            if args.dump_affinities:
                save_tensor(out / "cv.gmt", fw.affs.cv)
                atomic_write_text(out / "ce.csv", _ce_csv(fw.affs))
    result = {"loss": float(np.mean(losses)), "matching_accuracy": float(np.mean(accs)), "batches": len(batches)}
    if args.out:
        atomic_write_text(Path(args.out) / "eval.json", json.dumps(result, indent=2, sort_keys=True) + "\n")
    print(json.dumps(result, sort_keys=True))
    return EXIT_OK


def _with_timing(rows, columns, times, name, enabled):
    if not enabled:
        return rows, columns
    rows = [dict(r, **{name: round(t, 3)}) for r, t in zip(rows, times)]
    return rows, columns + [name]


def cmd_sweep(args, cfg):
    out = _require_out(args, is_file=True)
    rows, wall = sweep_run(cfg, threads=args.threads)
    rows, cols = _with_timing(rows, SWEEP_COLUMNS, wall, "wall_ms", args.timings)
    atomic_write_text(out, rows_to_csv(rows, cols))
    bad = [r for r in rows if r["status"] != "ok"]
    print(json.dumps({"rows": len(rows), "failed": len(bad), "out": str(out)}))
    return EXIT_OK


def cmd_solver_bench(args, cfg):
    out = _require_out(args, is_file=True)
    if args.max_n is not None:
        cfg.max_n = args.max_n
        cfg.min_n = min(cfg.min_n, cfg.max_n)
        cfg.validate()
    rows = solver_bench(cfg)
    rows, cols = _with_timing(rows, BENCH_COLUMNS, [r["millis"] for r in rows], "millis", args.timings)
    atomic_write_text(out, rows_to_csv(rows, cols))
    print(json.dumps({"rows": len(rows), "out": str(out)}))
    return EXIT_OK


def cmd_train_uq(args, cfg):
    out = _require_out(args)
    head, history = train_uq(cfg)
    save_head(out, head, cfg, history)
    lines = "".join(json.dumps({"epoch": i, "loss": h}) + "\n" for i, h in enumerate(history))
    atomic_write_text(out / "history.jsonl", lines)
    print(json.dumps({"epochs": len(history), "final_loss": history[-1] if history else None}))
    return EXIT_OK


def load_grid(path):
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError("grid", f"{path}: invalid JSON ({exc.msg})") from None
    if isinstance(data, dict):
        data = data.get("shifts", data)
    if not isinstance(data, list) or not data:
        raise ConfigError("grid", "expected a non-empty list of shift specs (or {\"shifts\": [...]})")
    return [from_dict(ShiftSpec, s, prefix=f"grid[{i}].") for i, s in enumerate(data)]


def cmd_eval_ood(args, cfg):
    out = _require_out(args, is_file=True)
    head, _ = load_head(args.head)
    shifts = load_grid(args.grid) if args.grid else None
    report = eval_ood(head, cfg, shifts)
    write_report(out, report)
    print(json.dumps({"pearson_area_dice": report["pearson_area_dice"], "out": str(out)}))
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-ssl": cmd_train_ssl,
    "eval-match": cmd_eval_match,
    "sweep": cmd_sweep,
    "solver-bench": cmd_solver_bench,
    "train-uq": cmd_train_uq,
    "eval-ood": cmd_eval_ood,
}

HELP = {
    "gen-data": "write synthetic two-view batches (GMT0 tensors)",
    "train-ssl": "train the graph-matching objective on synthetic batches",
    "eval-match": "match one or more batches with a checkpoint and report loss/accuracy",
    "sweep": "grid of short training runs, one CSV row per cell",
    "solver-bench": "exact vs heuristic solver on random instances",
    "train-uq": "fit the per-pixel uncertainty head on clean synthetic images",
    "eval-ood": "uncertain area vs Dice across synthetic shift levels",
}


def _require_out(args, is_file=False):
    if not args.out:
        raise ConfigError("--out", f"{args.command} needs --out")
    out = Path(args.out)
    (out.parent if is_file else out).mkdir(parents=True, exist_ok=True)
    return out


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key (JSON value)")
    common.add_argument("--seed", type=int, help="overrides the config seed")
    common.add_argument("--out", help="output file or directory")
    common.add_argument("--threads", type=int, default=os.cpu_count() or 1, help="worker pool size")
    common.add_argument("--print-config", action="store_true", help="print the resolved config and exit")
    common.add_argument("--timings", action="store_true", help="also record wall-clock times (not reproducible)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="gmssl", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"gmssl {__version__} (config schema {config_schema_hash()})")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name, parents=[common], help=HELP[name])
        if name == "train-ssl":
            sp.add_argument("--dataset", help="directory of saved batches instead of fresh ones")
        if name == "eval-match":
            sp.add_argument("--checkpoint", help="checkpoint directory (default: seeded initialisation)")
            sp.add_argument("--batch", help="saved batch directory")
            sp.add_argument("--dataset", help="directory of saved batches")
            sp.add_argument("--perturb", action="store_true", help="add Gumbel noise before solving")
            sp.add_argument("--dump-graph", action="store_true", help="write kNN edge lists as CSV into --out")
            sp.add_argument("--dump-affinities", action="store_true", help="write cv (GMT0) and ce (CSV) into --out")
        if name == "solver-bench":
            sp.add_argument("--max-n", type=int, help="largest N to benchmark")
        if name == "eval-ood":
            sp.add_argument("--head", required=True, help="directory written by train-uq")
            sp.add_argument("--grid", help="JSON list of shift specs")
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    cls = CONFIG_CLASSES[args.command]
    try:
        base = None
        if args.command == "eval-ood" and not args.config:
            # default to the config the head was trained with
            _, manifest = load_head(args.head)
            base = manifest.get("config")
        cfg = load_config(cls, args.config, args.set, args.seed, base)
        if args.threads < 1:
            raise ConfigError("--threads", "must be >= 1")
        if args.print_config:
            sys.stdout.write(dumps(cfg))
            return EXIT_OK
        return COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, TensorFormatError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"invalid input: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
