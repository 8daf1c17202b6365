"""On-disk datasets: a directory of stream or graph files listed in ``manifest.csv`` (file,label,split)."""

from __future__ import annotations

import csv
from dataclasses import replace
from pathlib import Path

from .complexity import GraphStats, measure_stats, write_stats
from .config import ModelConfig
from .event_io import EventStream, read_stream, write_stream
from .graph_build import GraphSequence, load_sequence, save_sequence
from .synth import SynthSpec, split_names, synth_dataset
from .train import build_dataset, split_dataset

MANIFEST = "manifest.csv"
SPLITS = ("train", "val", "test")


def write_manifest(directory, rows: list[tuple[str, int, str]]) -> None:
    with open(Path(directory) / MANIFEST, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["file", "label", "split"])
        writer.writerows(rows)


def read_manifest(directory) -> list[tuple[str, int, str]]:
    path = Path(directory) / MANIFEST
    if not path.is_file():
        raise FileNotFoundError(f"{path} not found")
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        for r in csv.DictReader(fh):
            split = (r.get("split") or "train").strip()
            if split not in SPLITS:
                raise ValueError(f"{path}: unknown split {split!r}")
            rows.append((r["file"], int(r["label"]), split))
    if not rows:
        raise ValueError(f"{path}: empty dataset")
    return rows


def write_synth(spec: SynthSpec, out_dir, seed: int) -> list[EventStream]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    streams = synth_dataset(spec, seed)
    splits = split_names(spec)
    rows = []
    per_class = spec.total_per_class
    for k, (stream, split) in enumerate(zip(streams, splits)):
        ci, i = divmod(k, per_class)
        name = f"{spec.classes[ci].name or f'class{ci}'}_{i:04d}.bin"
        write_stream(stream, out / name)
        rows.append((name, stream.label, split))
    write_manifest(out, rows)
    return streams


def load_streams(directory) -> list[tuple[EventStream, str]]:
    d = Path(directory)
    return [(read_stream(d / f, label=label), split) for f, label, split in read_manifest(d)]


def build_graph_dir(in_dir, out_dir, cfg: ModelConfig, seed: int, s_count: int | None = None) -> GraphStats:
    """Segment every stream into graphs, save one GRF1 file per stream plus manifest and level statistics."""
    if s_count is not None and s_count != cfg.s_count:
        cfg = replace(cfg, s_count=s_count, task=cfg.task)
    items = load_streams(in_dir)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    seqs = build_dataset([s for s, _ in items], cfg, seed)
    rows = []
    for k, (seq, (stream, split)) in enumerate(zip(seqs, items)):
        name = f"{k:05d}.grf"
        save_sequence(seq, out / name)
        rows.append((name, stream.label, split))
    write_manifest(out, rows)
    stats = measure_stats([g for s in seqs for g in s.graphs], cfg)
    write_stats(out / "stats.csv", stats)
    return stats


def load_sequences(directory) -> list[tuple[GraphSequence, str]]:
    d = Path(directory)
    out = []
    for f, label, split in read_manifest(d):
        seq = load_sequence(d / f)
        seq.label = label
        out.append((seq, split))
    return out


def load_samples(directory, cfg: ModelConfig, seed: int) -> tuple[list[GraphSequence], list[GraphSequence]]:
    """(train, val) graph sequences from a graph directory or, failing that, an event directory.

    Without an explicit validation split, a seeded 80/20 split of the training
    rows is used.
    """
    rows = read_manifest(directory)
    if all(f.endswith(".grf") for f, _, _ in rows):
        items = load_sequences(directory)
    else:
        streams = load_streams(directory)
        seqs = build_dataset([s for s, _ in streams], cfg, seed)
        items = list(zip(seqs, [sp for _, sp in streams]))
    train = [s for s, sp in items if sp == "train"]
    val = [s for s, sp in items if sp == "val"]
    if not val and train:
        tr_idx, va_idx = split_dataset(len(train), cfg.train.val_fraction, seed)
        train, val = [train[i] for i in tr_idx], [train[i] for i in va_idx]
    return train, val
