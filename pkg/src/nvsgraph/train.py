"""Augmentation, softmax cross-entropy, Adam, and the train / evaluate loops."""

from __future__ import annotations

import csv
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import diffengine as de
from .config import AugmentParams, ModelConfig, TrainConfig
from .diffengine import DiffArray
from .event_io import EventStream
from .gnn import aggregation_matrix
from .graph_build import EventGraph, GraphSequence, batch_graphs, segment_stream
from .graph_pool import pool_structure
from .layers import Module
from .models import build_model, pool_params

__all__ = [
    "AugmentParams", "TrainConfig", "Transform", "draw_transform", "apply_transform", "augment_graph",
    "augment_sequence", "cross_entropy_softmax", "AdamState", "adam_step", "Adam", "build_dataset",
    "split_dataset", "TrainingDiverged", "EvalResult", "TrainResult", "evaluate", "train_model",
    "METRIC_COLUMNS",
]

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("epoch", "lr", "train_loss", "train_acc", "val_loss", "val_acc")


# --- augmentation ---------------------------------------------------------------

@dataclass(frozen=True)
class Transform:
    scale: float = 1.0
    flip_x: bool = False
    flip_y: bool = False
    angle_deg: float = 0.0


def draw_transform(params: AugmentParams, rng: np.random.Generator) -> Transform:
    lo, hi = params.scale
    return Transform(
        scale=float(rng.uniform(lo, hi)) if hi > lo else float(lo),
        flip_x=bool(rng.random() < params.flip_x),
        flip_y=bool(rng.random() < params.flip_y),
        angle_deg=float(rng.uniform(0.0, params.rotate_deg)) if params.rotate_deg > 0 else 0.0,
    )


def apply_transform(graph: EventGraph, tf: Transform, clip: bool = True) -> EventGraph:
    """Scale, mirror and rotate node (x, y) about the sensor centre; time, edges and features untouched.

    Mirroring maps ``x -> W - 1 - x`` (and likewise for y). With ``clip`` the
    result is clamped to the sensor so every node keeps a valid grid cell.
    """
    h, w = graph.sensor
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    x = (graph.pos[:, 0] - cx) * tf.scale
    y = (graph.pos[:, 1] - cy) * tf.scale
    if tf.flip_x:
        x = -x
    if tf.flip_y:
        y = -y
    if tf.angle_deg:
        a = math.radians(tf.angle_deg)
        x, y = math.cos(a) * x - math.sin(a) * y, math.sin(a) * x + math.cos(a) * y
    pos = graph.pos.copy()
    pos[:, 0] = x + cx
    pos[:, 1] = y + cy
    if clip:
        pos[:, 0] = np.clip(pos[:, 0], 0.0, w - 1)
        pos[:, 1] = np.clip(pos[:, 1], 0.0, h - 1)
    return graph.with_pos(pos)


def augment_graph(graph: EventGraph, params: AugmentParams, rng: np.random.Generator) -> EventGraph:
    return apply_transform(graph, draw_transform(params, rng))


def augment_sequence(seq: GraphSequence, params: AugmentParams, rng: np.random.Generator) -> GraphSequence:
    """One transform shared by every graph of the sequence."""
    tf = draw_transform(params, rng)
    return GraphSequence([apply_transform(g, tf) for g in seq.graphs], seq.label)


# --- loss and optimiser -----------------------------------------------------------

def cross_entropy_softmax(logits, labels) -> DiffArray:
    """Mean of ``-log softmax(logits)[label]`` over rows; a 1-D ``logits`` is one sample."""
    logits = de.as_diff(logits)
    if logits.ndim == 1:
        logits = de.reshape(logits, (1, logits.shape[0]))
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    n, q = logits.shape
    if len(labels) != n:
        raise ValueError(f"{len(labels)} labels for {n} rows of logits")
    if (labels < 0).any() or (labels >= q).any():
        raise ValueError(f"label out of range [0, {q})")
    shifted = logits - logits.data.max(axis=1, keepdims=True)
    lse = de.log(de.reduce_sum(de.exp(shifted), axis=1))
    picked = de.getitem(shifted, (np.arange(n), labels))
    return de.reduce_mean(lse - picked)


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params, grads, state: AdamState, lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> None:
    """Bias-corrected Adam update applied in place to the ``.data`` of each parameter."""
    params = list(params)
    grads = list(grads)
    if len(params) != len(grads):
        raise ValueError("params and grads differ in length")
    state.step += 1
    c1 = 1.0 - beta1**state.step
    c2 = 1.0 - beta2**state.step
    for i, (p, g) in enumerate(zip(params, grads)):
        data = p.data if isinstance(p, DiffArray) else p
        g = np.zeros_like(data) if g is None else np.asarray(g, dtype=np.float64)
        if g.shape != data.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {data.shape}")
        m = state.m.get(i)
        v = state.v.get(i)
        m = (1 - beta1) * g if m is None else beta1 * m + (1 - beta1) * g
        v = (1 - beta2) * g * g if v is None else beta2 * v + (1 - beta2) * g * g
        state.m[i], state.v[i] = m, v
        data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


class Adam:
    def __init__(self, params, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.state = AdamState()

    def step(self, lr: float) -> None:
        adam_step(self.params, [p.grad for p in self.params], self.state, lr, self.beta1, self.beta2, self.eps)


# --- datasets -----------------------------------------------------------------------

def build_dataset(streams: list[EventStream], cfg: ModelConfig, seed: int) -> list[GraphSequence]:
    """One graph sequence per stream; stream ``i`` uses segmentation seed derived from (seed, i)."""
    out = []
    for i, stream in enumerate(streams):
        sub = int(np.random.SeedSequence([seed, i]).generate_state(1)[0])
        out.append(segment_stream(stream, cfg.s_count, cfg.graph, cfg.sampling, sub))
    return out


def split_dataset(n: int, val_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Seeded shuffle into (train indices, validation indices)."""
    order = np.random.default_rng(seed).permutation(n)
    n_val = int(round(n * val_fraction))
    return np.sort(order[n_val:]), np.sort(order[:n_val])


def warm_structure(graph: EventGraph, cfg: ModelConfig) -> None:
    """Precompute the coordinate-only operators (spline aggregation, pooling maps) of a batch."""
    shortcut = (1,) * len(cfg.kernel_size)
    for spec in cfg.spatial:
        if spec.kind == "pool":
            graph = pool_structure(graph, pool_params(spec)).coarse
        else:
            aggregation_matrix(graph, cfg.kernel_size, cfg.degree)
            if spec.kind == "res":
                aggregation_matrix(graph, shortcut, cfg.degree)


def _pack(seqs: list[GraphSequence]) -> tuple[EventGraph, np.ndarray]:
    graphs = [g for s in seqs for g in s.graphs]
    labels = np.array([s.label for s in seqs], dtype=np.int64)
    return batch_graphs(graphs), labels


# --- loops --------------------------------------------------------------------------

class TrainingDiverged(RuntimeError):
    pass


@dataclass
class EvalResult:
    accuracy: float
    loss: float
    confusion: np.ndarray  # [true, predicted] counts
    predictions: np.ndarray

    @property
    def total(self) -> int:
        return int(self.confusion.sum())


@dataclass
class TrainResult:
    model: Module
    metrics: list[dict]
    best_epoch: int
    best_state: dict


def _batches(n: int, size: int, order=None):
    order = np.arange(n) if order is None else order
    return [order[i:i + size] for i in range(0, n, size)]


def evaluate(model: Module, dataset: list[GraphSequence], num_classes: int | None = None,
             batch_size: int = 64, packed=None) -> EvalResult:
    """Top-1 accuracy, mean loss and confusion counts in eval mode."""
    if not dataset:
        raise ValueError("cannot evaluate on an empty dataset")
    q = num_classes if num_classes is not None else model.cfg.num_classes
    was_training = model.training
    model.eval()
    preds, losses = [], []
    labels_all = np.array([s.label for s in dataset], dtype=np.int64)
    if packed is None:
        packed = [_pack([dataset[i] for i in idx]) for idx in _batches(len(dataset), batch_size)]
    with de.no_grad():
        for graph, labels in packed:
            logits = model(graph)
            losses.append(cross_entropy_softmax(logits, labels).item() * len(labels))
            preds.append(np.argmax(logits.data, axis=1))
    model.train(was_training)
    pred = np.concatenate(preds)
    confusion = np.zeros((q, q), dtype=np.int64)
    np.add.at(confusion, (labels_all, pred), 1)
    return EvalResult(float(np.mean(pred == labels_all)), float(np.sum(losses) / len(dataset)), confusion, pred)


def _write_metrics(path: Path, rows: list[dict]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(METRIC_COLUMNS)
        for r in rows:
            writer.writerow([r["epoch"], repr(r["lr"])] + [repr(r[k]) for k in METRIC_COLUMNS[2:]])


def train_model(train_set: list[GraphSequence], val_set: list[GraphSequence] | None, cfg: ModelConfig,
                train_cfg: TrainConfig | None = None, out_dir=None, workers: int = 0,
                progress=None) -> TrainResult:
    """Adam on softmax cross-entropy with step decay; keeps the state with best (val_acc, -val_loss).

    Every batch draws its augmentation from a generator seeded by
    (seed, epoch, batch), so batch preparation can run on ``workers`` threads
    without changing the result. Metrics are written to ``out_dir/metrics.csv``
    and the best checkpoint to ``out_dir/best.ckp`` when ``out_dir`` is given.
    """
    from .checkpoint import save_checkpoint

    tc = train_cfg or cfg.train
    if not train_set:
        raise ValueError("training set is empty")
    for s in list(train_set) + list(val_set or []):
        if s.label is None or not 0 <= s.label < cfg.num_classes:
            raise ValueError(f"sample label {s.label!r} outside [0, {cfg.num_classes})")
        if s.s_count != cfg.s_count:
            raise ValueError(f"sample has {s.s_count} graphs, config expects S={cfg.s_count}")
    model = build_model(cfg, tc.rng_seed)
    opt = Adam(model.parameters())
    aug = cfg.augment if tc.augment else AugmentParams.identity()
    eval_bs = max(tc.batch_size, 64)
    train_eval = [_pack([train_set[i] for i in idx]) for idx in _batches(len(train_set), eval_bs)]
    val_eval = [_pack([val_set[i] for i in idx]) for idx in _batches(len(val_set), eval_bs)] if val_set else None
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    def prepare(epoch: int, b: int, idx: np.ndarray):
        rng = np.random.default_rng(np.random.SeedSequence([tc.rng_seed, epoch, b]))
        seqs = [augment_sequence(train_set[i], aug, rng) for i in idx]
        graph, labels = _pack(seqs)
        warm_structure(graph, cfg)
        return graph, labels

    rows: list[dict] = []
    best_key, best_epoch, best_state = None, 0, model.state_dict()
    best_state = {k: v.copy() for k, v in best_state.items()}
    pool = ThreadPoolExecutor(max_workers=workers) if workers > 0 else None
    try:
        for epoch in range(1, tc.epochs + 1):
            lr = tc.lr_at(epoch)
            order = np.random.default_rng(np.random.SeedSequence([tc.rng_seed, epoch])).permutation(len(train_set))
            chunks = _batches(len(train_set), tc.batch_size, order)
            if pool is not None:
                prepared = pool.map(lambda a: prepare(epoch, a[0], a[1]), list(enumerate(chunks)))
            else:
                prepared = (prepare(epoch, b, idx) for b, idx in enumerate(chunks))
            model.train()
            for graph, labels in prepared:
                model.zero_grad()
                loss = cross_entropy_softmax(model(graph), labels)
                if not np.isfinite(loss.data).all():
                    raise TrainingDiverged(f"loss became {loss.item()} at epoch {epoch} (lr {lr})")
                de.backward(loss)
                opt.step(lr)
            tr = evaluate(model, train_set, cfg.num_classes, packed=train_eval)
            va = evaluate(model, val_set, cfg.num_classes, packed=val_eval) if val_set else None
            if not math.isfinite(tr.loss):
                raise TrainingDiverged(f"training loss became {tr.loss} at epoch {epoch}")
            row = {"epoch": epoch, "lr": lr, "train_loss": tr.loss, "train_acc": tr.accuracy,
                   "val_loss": va.loss if va else float("nan"), "val_acc": va.accuracy if va else float("nan")}
            rows.append(row)
            key = (va.accuracy, -va.loss) if va else (tr.accuracy, -tr.loss)
            if best_key is None or key > best_key:
                best_key, best_epoch = key, epoch
                best_state = {k: v.copy() for k, v in model.state_dict().items()}
                if out is not None:
                    save_checkpoint(out / "best.ckp", model, cfg, {"epoch": epoch, **row})
            if out is not None:
                _write_metrics(out / "metrics.csv", rows)
            if progress is not None:
                progress(row)
            log.info("epoch %d lr %.1e train %.4f/%.3f val %s", epoch, lr, tr.loss, tr.accuracy,
                     f"{va.loss:.4f}/{va.accuracy:.3f}" if va else "-")
    finally:
        if pool is not None:
            pool.shutdown()
    if out is not None:
        save_checkpoint(out / "last.ckp", model, cfg, {"epoch": tc.epochs})
    return TrainResult(model, rows, best_epoch, best_state)
