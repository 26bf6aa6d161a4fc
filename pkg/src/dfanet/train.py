"""Training loop, evaluation metrics, ablation grids and report files."""

from __future__ import annotations

import csv
import hashlib
import io
import math
import os
import time
import xml.etree.ElementTree as ET
from dataclasses import asdict, dataclass, field
from itertools import product
from typing import Sequence

import numpy as np

from .autodiff import Tape, backward, cross_entropy, sgd_momentum_step
from .checkpoint import load_state_arrays, state_arrays
from .data import AugmentPolicy, PointCloud, augment
from .knn import NonFiniteError
from .models import CLS, PARTSEG, SEMSEG, ModelConfig, build_model


class DivergenceError(FloatingPointError):
    def __init__(self, epoch: int, batch: int, loss: float):
        self.epoch, self.batch, self.loss = epoch, batch, loss
        super().__init__(f"non-finite loss ({loss}) at epoch {epoch}, batch {batch}")


@dataclass
class TrainConfig:
    lr: float = 0.1
    lr_min: float = 1e-3
    schedule: str = "cosine"
    momentum: float = 0.9
    dropout: float = 0.5
    batch_size: int | None = None  # 32 for classification, 16 for segmentation
    epochs: int = 200
    seed: int = 0
    precision: int = 32
    val_fraction: float = 0.1
    augment: bool = True

    def __post_init__(self):
        if not self.lr >= 0:
            raise ValueError(f"lr must be >= 0, got {self.lr}")
        if self.batch_size is not None and self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 (batch norm needs two samples)")
        if self.schedule not in ("cosine", "constant"):
            raise ValueError(f"unknown lr schedule {self.schedule!r}")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if not 0 <= self.val_fraction < 1:
            raise ValueError("val_fraction must lie in [0, 1)")

    def batch_for(self, task: str) -> int:
        if self.batch_size is not None:
            return self.batch_size
        return 32 if task == CLS else 16

    def lr_at(self, epoch: int) -> float:
        """Cosine decay from ``lr`` at epoch 0 towards ``lr_min`` at the end."""
        if self.schedule == "constant" or self.epochs <= 1 or self.lr == 0:
            return self.lr
        t = epoch / (self.epochs - 1)
        return self.lr_min + 0.5 * (self.lr - self.lr_min) * (1 + math.cos(math.pi * t))


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    loss: float
    train_metric: float
    val_metric: float
    wall_clock: float


@dataclass
class MetricReport:
    task: str
    epochs: list[EpochRecord] = field(default_factory=list)
    oa: float | None = None
    macc: float | None = None
    miou: float | None = None
    per_class: list[float] = field(default_factory=list)
    best_epoch: int | None = None
    wall_clock: float = 0.0
    fingerprint: str = ""


@dataclass
class TrainResult:
    config: ModelConfig
    model: object
    report: MetricReport
    rng_state: dict


# ---------------------------------------------------------------------------
# Batching
# ---------------------------------------------------------------------------


def _category(cloud: PointCloud) -> int:
    return 0 if cloud.category is None else int(cloud.category)


def _check_labels(config: ModelConfig, data: Sequence[PointCloud]) -> None:
    if not data:
        raise ValueError("dataset is empty")
    n = data[0].num_points
    for i, c in enumerate(data):
        if c.num_points != n:
            raise ValueError(f"cloud {i} has {c.num_points} points, expected {n}")
        if c.features.shape[1] != config.input_dim:
            raise ValueError(f"cloud {i} has {c.features.shape[1]} channels, model expects {config.input_dim}")
        if config.task == CLS:
            if c.class_label is None or not 0 <= c.class_label < config.num_classes:
                raise ValueError(f"cloud {i} class label {c.class_label} not in [0, {config.num_classes})")
        else:
            if c.part_labels is None:
                raise ValueError(f"cloud {i} has no per-point labels")
            if c.part_labels.min() < 0 or c.part_labels.max() >= config.num_outputs:
                raise ValueError(f"cloud {i} has point labels outside [0, {config.num_outputs})")


def _batches(order: np.ndarray, size: int) -> list[np.ndarray]:
    """Consecutive slices; a trailing single sample joins the previous batch."""
    out = [order[i:i + size] for i in range(0, len(order), size)]
    if len(out) > 1 and len(out[-1]) == 1:
        last = out.pop()
        out[-1] = np.concatenate([out[-1], last])
    return out


def _stack(config: ModelConfig, clouds: Sequence[PointCloud]):
    X = np.stack([c.features for c in clouds]).astype(config.dtype)
    if config.task == CLS:
        y = np.array([c.class_label for c in clouds], dtype=np.int64)
    else:
        y = np.stack([c.part_labels for c in clouds]).astype(np.int64)
    cats = np.array([_category(c) for c in clouds]) if config.use_category_vector else None
    return X, y, cats


def _forward(model, config: ModelConfig, X, cats, training: bool, rng=None):
    if config.task == CLS:
        return model(X, training=training, rng=rng)
    return model(X, cats, training=training, rng=rng)


def predict(model, config: ModelConfig, data: Sequence[PointCloud], batch_size: int = 32) -> np.ndarray:
    """Eval-mode logits for every cloud, stacked on the first axis."""
    outs = []
    for start in range(0, len(data), batch_size):
        X, _, cats = _stack(config, data[start:start + batch_size])
        outs.append(_forward(model, config, X, cats, training=False).data)
    return np.concatenate(outs)


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


def confusion_matrix(true: np.ndarray, pred: np.ndarray, num_classes: int) -> np.ndarray:
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(true), np.asarray(pred)), 1)
    return cm


def classification_scores(cm: np.ndarray) -> tuple[float, float, list[float]]:
    """OA, mAcc and per-class accuracy (NaN for absent classes) from a confusion matrix."""
    total = cm.sum()
    if total == 0:
        raise ValueError("cannot score an empty dataset")
    support = cm.sum(axis=1)
    per_class = [float(cm[i, i] / support[i]) if support[i] else float("nan") for i in range(len(cm))]
    present = [a for a, s in zip(per_class, support) if s]
    return float(np.trace(cm) / total), float(np.mean(present)), per_class


def evaluate_classification(model, config: ModelConfig, data: Sequence[PointCloud], batch_size: int = 32):
    """Returns ``(oa, macc, per_class)``; classes absent from ``data`` are left out of mAcc."""
    if not data:
        raise ValueError("cannot evaluate an empty dataset")
    pred = predict(model, config, data, batch_size).argmax(axis=-1)
    true = np.array([c.class_label for c in data])
    return classification_scores(confusion_matrix(true, pred, config.num_classes))


def shape_iou(pred: np.ndarray, gt: np.ndarray, parts: Sequence[int]) -> float:
    """Mean part IoU over ``parts``; a part absent from both counts as 1."""
    ious = []
    for p in parts:
        inter = np.sum((pred == p) & (gt == p))
        union = np.sum((pred == p) | (gt == p))
        ious.append(1.0 if union == 0 else inter / union)
    return float(np.mean(ious))


def evaluate_part_segmentation(model, config: ModelConfig, data: Sequence[PointCloud],
                               part_sets: dict[int, Sequence[int]] | None = None, batch_size: int = 16):
    """Instance-averaged mIoU and a per-category breakdown.

    Predictions are restricted to the parts of each cloud's category.
    ``part_sets`` maps category to its part labels; by default every
    category owns all ``num_outputs`` labels.
    """
    if not data:
        raise ValueError("cannot evaluate an empty dataset")
    logits = predict(model, config, data, batch_size)
    per_cat: dict[int, list[float]] = {}
    all_parts = list(range(config.num_outputs))
    for cloud, lg in zip(data, logits):
        cat = _category(cloud)
        parts = list(part_sets[cat]) if part_sets is not None else all_parts
        gt = np.asarray(cloud.part_labels)
        stray = np.setdiff1d(np.unique(gt), parts)
        if stray.size:
            raise ValueError(f"labels {stray.tolist()} are not parts of category {cat}")
        pred = np.asarray(parts)[np.argmax(lg[:, parts], axis=-1)]
        per_cat.setdefault(cat, []).append(shape_iou(pred, gt, parts))
    ious = [v for vs in per_cat.values() for v in vs]
    return float(np.mean(ious)), {c: float(np.mean(v)) for c, v in sorted(per_cat.items())}


def _score(model, config: ModelConfig, data: Sequence[PointCloud]) -> float:
    if config.task == CLS:
        return evaluate_classification(model, config, data)[0]
    if config.task == PARTSEG:
        return evaluate_part_segmentation(model, config, data)[0]
    logits = predict(model, config, data, 16)
    return float(np.mean(logits.argmax(-1) == np.stack([c.part_labels for c in data])))


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


def fingerprint(config: ModelConfig, tc: TrainConfig) -> str:
    blob = config.to_json() + repr(sorted(asdict(tc).items()))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def split_validation(n: int, fraction: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    perm = rng.permutation(n)
    n_val = int(round(n * fraction))
    if n - n_val < 2:
        n_val = 0
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


def train(config: ModelConfig, data: Sequence[PointCloud], tc: TrainConfig | None = None,
          policy: AugmentPolicy | None = None, log=None) -> TrainResult:
    """Train a fresh model; the returned model holds the best-validation weights.

    Each epoch shuffles, augments, runs forward and backward passes and a
    momentum SGD step per batch.  The checkpoint is selected by validation
    OA (mIoU for part segmentation), ties broken by the later epoch only when
    validation loss improves.  Without a validation split the last epoch wins.
    """
    tc = tc or TrainConfig()
    config = config.with_(dropout=tc.dropout, precision=tc.precision)
    data = list(data)
    _check_labels(config, data)
    rng = np.random.default_rng(tc.seed)
    model = build_model(config, seed=tc.seed)
    params = model.param_set()
    train_idx, val_idx = split_validation(len(data), tc.val_fraction, rng)
    if len(train_idx) < 2:
        raise ValueError("need at least two training clouds")
    train_set = [data[i] for i in train_idx]
    val_set = [data[i] for i in val_idx]
    bs = tc.batch_for(config.task)
    report = MetricReport(task=config.task, fingerprint=fingerprint(config, tc))
    best_key, best_state = None, None
    t0 = time.perf_counter()

    for epoch in range(tc.epochs):
        lr = tc.lr_at(epoch)
        losses, correct, seen = [], 0, 0
        for b, idx in enumerate(_batches(rng.permutation(len(train_set)), bs)):
            clouds = [train_set[i] for i in idx]
            if tc.augment:
                clouds = [augment(c, rng, policy) for c in clouds]
            X, y, cats = _stack(config, clouds)
            params.zero_grad()
            try:
                with Tape() as tape:
                    logits = _forward(model, config, X, cats, training=True, rng=rng)
                    loss = cross_entropy(logits, y)
            except NonFiniteError:
                raise DivergenceError(epoch, b, float("nan")) from None
            value = float(loss.data)
            if not math.isfinite(value):
                raise DivergenceError(epoch, b, value)
            backward(loss, tape, params.tensors())
            sgd_momentum_step(params, lr, tc.momentum)
            if not all(np.isfinite(p.data).all() for p in params.tensors()):
                raise DivergenceError(epoch, b, float("nan"))
            losses.append(value * len(idx))
            correct += int(np.sum(logits.data.argmax(-1) == y))
            seen += y.size
        mean_loss = float(np.sum(losses) / len(train_set))
        if val_set:
            val_metric = _score(model, config, val_set)
            X, y, cats = _stack(config, val_set)
            val_loss = float(cross_entropy(_forward(model, config, X, cats, False), y).data)
            key = (val_metric, -val_loss)
        else:
            val_metric = float("nan")
            key = (epoch,)
        if best_key is None or key > best_key:
            best_key = key
            best_state = {k: v.copy() for k, v in state_arrays(model).items()}
            report.best_epoch = epoch
        rec = EpochRecord(epoch, lr, mean_loss, correct / max(seen, 1), val_metric,
                          time.perf_counter() - t0)
        report.epochs.append(rec)
        if log:
            log(rec)

    if best_state is not None:
        load_state_arrays(model, best_state)
    report.wall_clock = time.perf_counter() - t0
    return TrainResult(config, model, report, {"seed": tc.seed, "best_epoch": report.best_epoch})


def score_into(report: MetricReport, model, config: ModelConfig, data: Sequence[PointCloud]) -> MetricReport:
    """Fill ``report``'s final metrics from ``data``."""
    if config.task == CLS:
        report.oa, report.macc, report.per_class = evaluate_classification(model, config, data)
    elif config.task == PARTSEG:
        report.miou, per_cat = evaluate_part_segmentation(model, config, data)
        report.per_class = list(per_cat.values())
    else:
        report.oa = _score(model, config, data)
    return report


# ---------------------------------------------------------------------------
# Ablation
# ---------------------------------------------------------------------------

ABLATION_AXES = ("k", "aggregation", "graph_domain", "use_position_encoding", "use_low_dim_global")

ABLATION_COLUMNS = ("task",) + ABLATION_AXES + ("seed", "oa", "macc", "miou", "wall_clock")

# Full-scale neighbour-count sweep on the 40-class benchmark: k -> OA (%)
REFERENCE_K_SWEEP = {10: 93.3, 20: 93.7, 40: 94.0, 60: 93.3}


def run_ablation(grid: dict[str, Sequence], base: ModelConfig, train_set: Sequence[PointCloud],
                 test_set: Sequence[PointCloud], tc: TrainConfig | None = None,
                 seeds: Sequence[int] = (0,), log=None) -> list[dict]:
    """One row per grid cell and seed; every cell shares the same seeds."""
    tc = tc or TrainConfig()
    unknown = [a for a in grid if a not in ABLATION_AXES]
    if unknown:
        raise ValueError(f"unknown ablation axis {unknown[0]!r}; expected a subset of {ABLATION_AXES}")
    axes = list(grid)
    rows = []
    for values in product(*(grid[a] for a in axes)):
        cfg = base.with_(**dict(zip(axes, values)))
        for seed in seeds:
            t = TrainConfig(**{**asdict(tc), "seed": seed})
            res = train(cfg, train_set, t, log=log)
            rep = score_into(res.report, res.model, res.config, test_set)
            row = {"task": cfg.task, **{a: getattr(cfg, a) for a in ABLATION_AXES}, "seed": seed,
                   "oa": rep.oa, "macc": rep.macc, "miou": rep.miou, "wall_clock": rep.wall_clock}
            rows.append(row)
    return rows


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_ablation_csv(rows: Sequence[dict], dest) -> None:
    _write_csv(dest, ABLATION_COLUMNS, [[_fmt(r[c]) for c in ABLATION_COLUMNS] for r in rows])


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

EPOCH_COLUMNS = ("epoch", "lr", "loss", "train_metric", "val_metric", "wall_clock")


def _write_csv(dest, header, rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    if hasattr(dest, "write"):
        dest.write(buf.getvalue())
    else:
        with open(dest, "w", encoding="utf-8", newline="") as fh:
            fh.write(buf.getvalue())


def metrics_csv(report: MetricReport, dest) -> None:
    _write_csv(dest, EPOCH_COLUMNS,
               [[_fmt(getattr(r, c)) for c in EPOCH_COLUMNS] for r in report.epochs])


def metrics_svg(report: MetricReport, dest, width: int = 640, height: int = 360) -> None:
    """Loss and training/validation metric curves over epochs."""
    pad = 48
    svg = ET.Element("svg", xmlns="http://www.w3.org/2000/svg", width=str(width), height=str(height),
                     viewBox=f"0 0 {width} {height}")
    ET.SubElement(svg, "rect", x="0", y="0", width=str(width), height=str(height), fill="white")
    ET.SubElement(svg, "line", x1=str(pad), y1=str(height - pad), x2=str(width - pad), y2=str(height - pad),
                  stroke="black")
    ET.SubElement(svg, "line", x1=str(pad), y1=str(pad), x2=str(pad), y2=str(height - pad), stroke="black")
    title = ET.SubElement(svg, "text", x=str(pad), y=str(pad - 16), **{"font-size": "14"})
    title.text = f"{report.task} training ({len(report.epochs)} epochs)"
    n = len(report.epochs)
    series = [("loss", "#d62728"), ("train_metric", "#1f77b4"), ("val_metric", "#2ca02c")]
    for i, (name, colour) in enumerate(series):
        label = ET.SubElement(svg, "text", x=str(width - pad - 110), y=str(pad + 16 * i),
                              fill=colour, **{"font-size": "12"})
        label.text = name
        vals = np.array([getattr(r, name) for r in report.epochs], dtype=float)
        finite = vals[np.isfinite(vals)]
        if finite.size == 0:
            continue
        top = max(1.0, float(finite.max()))
        pts = []
        for j, v in enumerate(vals):
            if not np.isfinite(v):
                continue
            x = pad + (width - 2 * pad) * (j / max(n - 1, 1))
            y = height - pad - (height - 2 * pad) * (v / top)
            pts.append(f"{x:.2f},{y:.2f}")
        ET.SubElement(svg, "polyline", points=" ".join(pts), fill="none", stroke=colour,
                      **{"stroke-width": "1.5"})
    data = ET.tostring(svg, encoding="unicode")
    text = '<?xml version="1.0" encoding="UTF-8"?>\n' + data + "\n"
    if hasattr(dest, "write"):
        dest.write(text)
    else:
        with open(dest, "w", encoding="utf-8") as fh:
            fh.write(text)


def emit_report(report: MetricReport, dest, fmt: str | None = None) -> None:
    """Write ``report`` as ``csv`` or ``svg`` (inferred from the suffix when omitted)."""
    if fmt is None:
        fmt = os.path.splitext(str(dest))[1].lstrip(".").lower() if not hasattr(dest, "write") else "csv"
    if fmt == "csv":
        metrics_csv(report, dest)
    elif fmt == "svg":
        metrics_svg(report, dest)
    else:
        raise ValueError(f"unknown report format {fmt!r}; expected csv or svg")
