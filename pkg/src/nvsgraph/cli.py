"""``nvsgraph`` command line: synth, sample, build-graphs, train, eval, flops, export-clip.

Exit status is 0 on success, 1 on a usage error and 2 on a runtime error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import diffengine as de
from .checkpoint import load_checkpoint
from .complexity import read_stats, report_model
from .config import load_model_config
from .datasets import build_graph_dir, load_samples, load_sequences, read_manifest, write_synth
from .event_io import read_stream, write_stream
from .graph2grid import graph_to_grid, save_clip, stack_clip
from .graph_build import load_sequence
from .sampling import SamplingParams, non_uniform_sample
from .synth import load_synth_spec
from .train import evaluate, train_model


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _parser() -> argparse.ArgumentParser:
    p = _Parser(prog="nvsgraph", description="Event-graph learning pipeline")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="generate a labelled synthetic event dataset")
    s.add_argument("--spec", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)

    s = sub.add_parser("sample", help="non-uniformly sample one window of a stream")
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--t0", type=int, default=None, help="window start (us), default first event")
    s.add_argument("--t1", type=int, default=None, help="window end (us, exclusive), default after last event")
    s.add_argument("--k-max", type=int, default=8)
    s.add_argument("--seed", type=int, default=0)

    s = sub.add_parser("build-graphs", help="segment streams into graph sequences")
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--config", required=True)
    s.add_argument("--s", type=int, default=None, help="graphs per stream (default from config)")
    s.add_argument("--seed", type=int, default=0)

    s = sub.add_parser("train", help="train a model")
    s.add_argument("--config", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--epochs", type=int, default=None)
    s.add_argument("--workers", type=int, default=0, help="threads preparing batches (0 = inline)")

    s = sub.add_parser("eval", help="evaluate a checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--split", choices=("train", "val", "all"), default="val")
    s.add_argument("--seed", type=int, default=0)

    s = sub.add_parser("flops", help="per-layer FLOPs and parameter report")
    s.add_argument("--config", required=True)
    s.add_argument("--stats", required=True)
    s.add_argument("--format", choices=("csv", "table"), default="csv")

    s = sub.add_parser("export-clip", help="write the Graph2Grid clip of one graph sequence")
    s.add_argument("--graphs", required=True, help="a .grf file or a graph directory")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--index", type=int, default=0, help="row of the manifest when --graphs is a directory")
    return p


def _cmd_synth(a) -> None:
    spec = load_synth_spec(a.spec)
    streams = write_synth(spec, a.out, a.seed)
    print(f"wrote {len(streams)} streams to {a.out}")


def _cmd_sample(a) -> None:
    stream = read_stream(a.inp)
    t0 = a.t0 if a.t0 is not None else (int(stream.t[0]) if len(stream) else 0)
    t1 = a.t1 if a.t1 is not None else (int(stream.t[-1]) + 1 if len(stream) else 1)
    out = non_uniform_sample(stream, (t0, t1), SamplingParams(a.k_max, a.seed))
    write_stream(out, a.out)
    print(f"kept {len(out)} of {len(stream.window(t0, t1))} events")


def _cmd_build_graphs(a) -> None:
    cfg = load_model_config(a.config)
    stats = build_graph_dir(a.inp, a.out, cfg, a.seed, a.s)
    print("stage,n_node,n_edge")
    for k, (n, e) in enumerate(zip(stats.n_node, stats.n_edge)):
        print(f"{k},{n:.3f},{e:.3f}")


def _cmd_train(a) -> None:
    cfg = load_model_config(a.config)
    tc = replace(cfg.train, rng_seed=a.seed, epochs=a.epochs or cfg.train.epochs)
    cfg = replace(cfg, train=tc)
    train, val = load_samples(a.data, cfg, a.seed)

    def show(row):
        print(f"epoch {row['epoch']:4d} lr {row['lr']:.1e} train {row['train_loss']:.4f}/{row['train_acc']:.3f}"
              f" val {row['val_loss']:.4f}/{row['val_acc']:.3f}", flush=True)

    result = train_model(train, val, cfg, tc, out_dir=a.out, workers=a.workers, progress=show)
    best = result.metrics[result.best_epoch - 1]
    print(f"best epoch {result.best_epoch}: train_acc {best['train_acc']:.4f} val_acc {best['val_acc']:.4f}")


def _cmd_eval(a) -> None:
    model, cfg, _ = load_checkpoint(a.checkpoint)
    train, val = load_samples(a.data, cfg, a.seed)
    data = {"train": train, "val": val, "all": train + val}[a.split]
    res = evaluate(model, data, cfg.num_classes)
    print(f"accuracy {res.accuracy:.4f} ({int(np.trace(res.confusion))}/{res.total})")
    print(f"loss {res.loss:.6f}")
    print("confusion (rows = true, columns = predicted)")
    for i, row in enumerate(res.confusion):
        print(f"{i:3d}: " + " ".join(f"{v:5d}" for v in row))


def _cmd_flops(a) -> None:
    cfg = load_model_config(a.config)
    report = report_model(cfg, read_stats(a.stats))
    sys.stdout.write(report.to_csv() if a.format == "csv" else report.to_table() + "\n")


def _cmd_export_clip(a) -> None:
    model, cfg, _ = load_checkpoint(a.checkpoint)
    src = Path(a.graphs)
    if src.is_dir():
        rows = read_manifest(src)
        if not 0 <= a.index < len(rows):
            raise IndexError(f"index {a.index} outside manifest of {len(rows)} rows")
        seq = load_sequences(src)[a.index][0]
    else:
        seq = load_sequence(src)
    grids = []
    with de.no_grad():
        for g in seq.graphs:
            coarse, x = model.spatial(g)
            grids.append(graph_to_grid(coarse, x))
    clip = stack_clip(grids)
    save_clip(clip, a.out)
    print(f"clip {tuple(clip.shape)} written to {a.out}")


COMMANDS = {
    "synth": _cmd_synth,
    "sample": _cmd_sample,
    "build-graphs": _cmd_build_graphs,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "flops": _cmd_flops,
    "export-clip": _cmd_export_clip,
}


def run(argv: list[str] | None = None) -> int:
    try:
        args = _parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    if args.verbose:
        logging.basicConfig(level=logging.INFO, format="%(message)s")
    try:
        COMMANDS[args.command](args)
    except Exception as exc:  # noqa: BLE001 - every runtime failure maps to exit status 2
        print(f"nvsgraph {args.command}: error: {exc}", file=sys.stderr)
        return 2
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
