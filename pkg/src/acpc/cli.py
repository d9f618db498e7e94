"""Command line entry point: ``acpc gen|train|eval|export-sim|oracle|bench``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import alignment as al
from . import core_math as cm
from . import data as dt
from . import evaluation as ev
from . import oracles
from . import train as tr
from .core_math import Tensor
from .model import PredictionHeads

log = logging.getLogger("acpc")


def _spec_and_seed(path: str | None) -> tuple[dt.SyntheticSpec, int]:
    if path is None:
        return dt.SyntheticSpec(), 0
    return tr.load_spec(path)


def cmd_gen(args) -> int:
    spec, seed = _spec_and_seed(args.spec)
    if args.seed is not None:
        seed = args.seed
    dataset = dt.generate(spec, seed)
    dt.write_dataset(dataset, args.out)
    print(f"wrote {len(dataset)} sequences to {args.out}")
    return 0


def _probe_fn(cfg: tr.RunConfig):
    def probe(model, dataset):
        ids = np.linspace(0, len(dataset) - 1, min(cfg.eval_sequences, len(dataset))).astype(int)
        _, val = ev.linear_probe(ev.extract_features(model, dataset, "c", ids), seed=cfg.train_seed)
        return val

    return probe


def cmd_train(args) -> int:
    cfg = tr.load_config(args.config)
    if args.out_dir:
        cfg.out_dir = args.out_dir
    tr.tune_allocator()
    state = None
    if args.resume:
        state, saved = tr.load_checkpoint(args.resume)
        if tr.config_to_text(saved) != tr.config_to_text(cfg):
            log.warning("resuming with a config that differs from the checkpoint's")
    out = Path(cfg.out_dir)
    metrics = tr.MetricsLog.read(out / "metrics.csv") if args.resume and (out / "metrics.csv").exists() else None
    if metrics is not None:
        metrics.rows = [r for r in metrics.rows if r["step"] <= state.global_step]
    dataset = tr.load_or_generate(cfg)
    state, metrics = tr.train(cfg, dataset, state, out, metrics, _probe_fn(cfg))
    tr.save_checkpoint(out / "final.ckpt", state, cfg)
    print(f"trained {state.epoch} epochs, {state.global_step} steps, final loss {metrics.rows[-1]['loss']:.4f}")
    return 0


def _load_model(ckpt: str):
    state, cfg = tr.load_checkpoint(ckpt)
    return state.model, cfg


def _select(dataset: dt.Dataset, count: int | None) -> list[int] | None:
    if not count or count >= len(dataset):
        return None
    return np.linspace(0, len(dataset) - 1, count).astype(int).tolist()


def cmd_eval(args) -> int:
    model, _ = _load_model(args.ckpt)
    dataset = dt.read_dataset(args.data)
    report = ev.evaluate(model, dataset, seed=args.seed, sequences=_select(dataset, args.sequences),
                         abx_triples=args.abx_triples)
    report.write_csv(args.out)
    if args.hist_dir:
        report.write_histograms(args.hist_dir)
    for name, split, value in report.rows:
        print(f"{name:28s} {split:6s} {value:.6f}")
    return 0


def cmd_export_sim(args) -> int:
    model, _ = _load_model(args.ckpt)
    dataset = dt.read_dataset(args.data)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for i in args.sequence:
        if not 0 <= i < len(dataset):
            raise IndexError(f"sequence {i} out of range (dataset has {len(dataset)})")
        table = ev.extract_features(model, dataset, args.kind, [i])
        matrix, bounds = ev.self_similarity_matrix(table.features, table.labels)
        path = out / f"sim_{args.kind}_{i:05d}.bin"
        ev.write_similarity(path, matrix, bounds)
        print(f"wrote {path} ({matrix.shape[0]} frames, {len(bounds)} boundaries)")
    return 0


def cmd_oracle(args) -> int:
    failed = 0
    for name, suite in oracles.SUITES.items():
        result = suite()
        print(result.line())
        failed += not result.passed
    print("all oracle suites passed" if not failed else f"{failed} oracle suite(s) failed")
    return 0 if not failed else 1


def _loss_runner(K: int, M: int, N: int, batch: int, frames: int, dim: int, seed: int):
    rng = np.random.default_rng(seed)
    z = Tensor(rng.normal(size=(batch, frames, dim)).astype(cm.get_dtype()))
    c = Tensor(rng.normal(size=(batch, frames, dim)).astype(cm.get_dtype()))
    heads = PredictionHeads(Tensor(rng.normal(size=(K, dim, dim)) * 0.1), Tensor(np.zeros((K, dim))))
    gid = dt.group_assignment(batch, 2 if batch >= 4 else 1)
    neg = al.sample_negatives(gid, frames, frames - M, N, rng)

    def run() -> float:
        al.SCORE_EVALUATIONS.reset()
        t0 = time.perf_counter()
        if K == M:
            al.cpc_loss(z, c, heads, neg)
        else:
            al.acpc_loss(z, c, heads, neg, M)
        return time.perf_counter() - t0

    return run


def bench_losses(settings: list[tuple[int, int, int]], batch: int = 8, frames: int = 126, dim: int = 32,
                 repeats: int = 15, seed: int = 0) -> list[dict]:
    """Median wall time of one loss evaluation for each (K, M, N) on synthetic latents.

    Settings are timed in interleaved rounds so that drift in machine speed
    affects all of them alike; the first round is a warm-up.
    """
    runners = [_loss_runner(K, M, N, batch, frames, dim, seed) for K, M, N in settings]
    times = [[] for _ in settings]
    counts = [0] * len(settings)
    for _ in range(repeats + 1):
        for i, run in enumerate(runners):
            times[i].append(run())
            counts[i] = al.SCORE_EVALUATIONS.reset()
    out = []
    for (K, M, N), t, count in zip(settings, times, counts):
        positions = batch * (frames - M)
        out.append({"K": K, "M": M, "N": N, "ms": 1e3 * float(np.median(t[1:])), "score_evaluations": count,
                    "per_position": count / positions, "formula": al.count_score_evaluations(K, M, N)})
    return out


def bench_loss(K: int, M: int, N: int, **opts) -> dict:
    return bench_losses([(K, M, N)], **opts)[0]


def cmd_bench(args) -> int:
    values = tr.parse_key_values(Path(args.config).read_text()) if args.config else {}
    unknown = set(values) - {"N", "M", "K", "batch", "frames", "dim", "repeats", "seed"}
    if unknown:
        raise tr.ConfigError(f"unknown bench keys: {', '.join(sorted(unknown))}")
    M = int(values.get("M", 12))
    N = int(values.get("N", 128))
    K = int(values.get("K", 4))
    opts = {k: int(values[k]) for k in ("batch", "frames", "dim", "repeats", "seed") if k in values}
    tr.tune_allocator()
    with cm.precision("train"):
        fast, full = bench_losses([(K, M, N), (M, M, N)], **opts)
    ratio = fast["ms"] / full["ms"]
    expected = fast["formula"] / full["formula"]
    result = {"acpc": fast, "cpc": full, "time_ratio": ratio, "count_ratio": expected}
    print(json.dumps(result, indent=1))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="acpc", description="Aligned contrastive predictive coding on synthetic data")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="write a synthetic dataset")
    g.add_argument("--spec", help="key = value corpus settings (optional 'seed' key)")
    g.add_argument("--seed", type=int, help="overrides the corpus file's seed")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train from a run config")
    t.add_argument("--config", required=True)
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--out-dir", help="overrides the config's out_dir")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="analysis battery on a checkpoint")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True, help="report CSV")
    e.add_argument("--hist-dir", help="directory for histogram CSVs")
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--sequences", type=int, default=200, help="number of sequences analysed (0 = all)")
    e.add_argument("--abx-triples", type=int, default=2000)
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("export-sim", help="self-similarity matrices for plotting")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out-dir", required=True)
    s.add_argument("--sequence", type=int, nargs="+", default=[0])
    s.add_argument("--kind", choices=("z", "c"), default="z")
    s.set_defaults(func=cmd_export_sim)

    o = sub.add_parser("oracle", help="run the brute-force reference suites")
    o.set_defaults(func=cmd_oracle)

    b = sub.add_parser("bench", help="time the loss for a reduced K against K = M")
    b.add_argument("--config", help="key = value settings: K, M, N, batch, frames, dim, repeats, seed")
    b.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        return args.func(args)
    except (FileNotFoundError, IsADirectoryError, PermissionError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (tr.ConfigError, dt.DatasetFormatError, ValueError, IndexError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
