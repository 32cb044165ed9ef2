"""Confusion-matrix metrics, split evaluation, the variant ablation, and image exports.

Metrics CSV header: ``variant,seed,subset,class,acc,iou,macc,miou`` with one
row per class and one ``__mean__`` row per (variant, seed, subset). The
ablation CSV adds per-variant ``__median__`` rows (seed column).
"""

from __future__ import annotations

import csv
import hashlib
import io
import logging
import os
import statistics
from dataclasses import dataclass, field

import numpy as np

from .data import SegDataset, SegSample
from .model import DooDLeNet, FUSION_VARIANTS, ModelConfig, VARIANTS
from .netpbm import ensure_dir, to_uint8, write_pgm, write_ppm
from .tensor import no_grad

log = logging.getLogger(__name__)

CSV_HEADER = ("variant", "seed", "subset", "class", "acc", "iou", "macc", "miou")

# overlay colours; class 0 is left transparent
PALETTE = np.array([
    (0, 0, 0),
    (220, 20, 60),
    (0, 0, 142),
    (250, 170, 30),
    (0, 255, 255),
    (119, 11, 32),
    (107, 142, 35),
    (255, 0, 255),
    (128, 64, 128),
], dtype=np.uint8)


class ConfusionMatrix:
    """K x K counts; entry [t, p] counts pixels of true class t predicted as p."""

    def __init__(self, num_classes: int, counts: np.ndarray | None = None):
        self.num_classes = num_classes
        self.counts = (np.zeros((num_classes, num_classes), dtype=np.int64)
                       if counts is None else np.asarray(counts, dtype=np.int64).copy())

    def update(self, pred: np.ndarray, true: np.ndarray) -> None:
        pred, true = np.asarray(pred), np.asarray(true)
        if pred.shape != true.shape:
            raise ValueError(f"prediction {pred.shape} and label {true.shape} shapes differ")
        k = self.num_classes
        for name, arr in (("prediction", pred), ("label", true)):
            if arr.size and (arr.min() < 0 or arr.max() >= k):
                raise ValueError(f"{name} outside [0, {k})")
        idx = true.astype(np.int64).ravel() * k + pred.astype(np.int64).ravel()
        self.counts += np.bincount(idx, minlength=k * k).reshape(k, k)

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.num_classes, self.counts + other.counts)

    __add__ = merge

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def update_confusion(cm: ConfusionMatrix, pred_labels, true_labels) -> None:
    cm.update(pred_labels, true_labels)


def predict_labels(logits: np.ndarray) -> np.ndarray:
    """Argmax over the class axis; ties resolve to the lowest class index."""
    return np.argmax(logits, axis=1)


@dataclass
class MetricsReport:
    acc: list
    iou: list
    macc: float
    miou: float
    subset: str = "all"
    samples: int = 0
    config_digest: str = ""
    no_data: bool = False

    def rows(self, variant: str, seed) -> list[list]:
        out = []
        for c, (a, i) in enumerate(zip(self.acc, self.iou)):
            out.append([variant, seed, self.subset, c, _fmt(a), _fmt(i), "", ""])
        out.append([variant, seed, self.subset, "__mean__", "", "", _fmt(self.macc), _fmt(self.miou)])
        return out


def _fmt(x) -> str:
    return "" if x is None or (isinstance(x, float) and np.isnan(x)) else f"{x:.6f}"


def metrics_from_confusion(cm: ConfusionMatrix, subset: str = "all", samples: int = 0,
                           config_digest: str = "") -> MetricsReport:
    """Per-class recall and IoU; means skip classes whose denominator is zero."""
    counts = cm.counts.astype(np.float64)
    k = cm.num_classes
    if cm.total == 0:
        nan = [float("nan")] * k
        return MetricsReport(nan, nan, float("nan"), float("nan"), subset, samples,
                             config_digest, no_data=True)
    tp = np.diag(counts)
    rows = counts.sum(axis=1)
    cols = counts.sum(axis=0)
    union = rows + cols - tp
    acc = [float(tp[c] / rows[c]) if rows[c] > 0 else float("nan") for c in range(k)]
    iou = [float(tp[c] / union[c]) if union[c] > 0 else float("nan") for c in range(k)]
    defined_acc = [a for a in acc if not np.isnan(a)]
    defined_iou = [v for v in iou if not np.isnan(v)]
    return MetricsReport(acc, iou,
                         float(np.mean(defined_acc)) if defined_acc else float("nan"),
                         float(np.mean(defined_iou)) if defined_iou else float("nan"),
                         subset, samples, config_digest)


def config_digest(config: ModelConfig) -> str:
    return hashlib.sha256(config.to_text().encode("utf-8")).hexdigest()[:12]


def predict_samples(model: DooDLeNet, samples: list[SegSample], batch_size: int = 16) -> np.ndarray:
    """Predicted label maps for a list of samples (no augmentation)."""
    dt = model.config.np_dtype
    preds = []
    with no_grad():
        for start in range(0, len(samples), batch_size):
            chunk = samples[start:start + batch_size]
            color = np.stack([s.color for s in chunk]).astype(dt, copy=False)
            thermal = np.stack([s.thermal for s in chunk]).astype(dt, copy=False)
            out = model(color, thermal)
            preds.append(predict_labels(out.y_final.data))
    return np.concatenate(preds) if preds else np.zeros((0,), dtype=np.int64)


def confusion_for(model: DooDLeNet, samples: list[SegSample]) -> ConfusionMatrix:
    cm = ConfusionMatrix(model.config.num_classes)
    if samples:
        preds = predict_samples(model, samples)
        for s, p in zip(samples, preds):
            cm.update(p, s.labels)
    return cm


def evaluate_split(model: DooDLeNet, data: SegDataset, split: str, subset: str = "all") -> MetricsReport:
    if subset not in ("all", "day", "night"):
        raise ValueError(f"unknown subset {subset!r}")
    samples = data.samples(split, subset)
    cm = confusion_for(model, samples)
    return metrics_from_confusion(cm, subset, len(samples), config_digest(model.config))


def evaluate_subsets(model: DooDLeNet, data: SegDataset, split: str) -> dict[str, MetricsReport]:
    """Day, night and combined reports from one pass; the combined matrix is day + night."""
    cms = {}
    for subset in ("day", "night"):
        cms[subset] = confusion_for(model, data.samples(split, subset))
    digest = config_digest(model.config)
    reports = {s: metrics_from_confusion(cms[s], s, len(data.samples(split, s)), digest)
               for s in ("day", "night")}
    reports["all"] = metrics_from_confusion(cms["day"] + cms["night"], "all",
                                            len(data.samples(split, "all")), digest)
    return reports


def write_metrics_csv(path: str, rows: list[list]) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    w.writerows(rows)
    with open(path, "w", encoding="utf-8", newline="") as f:
        f.write(buf.getvalue())


def read_metrics_csv(path: str) -> list[dict]:
    with open(path, encoding="utf-8") as f:
        reader = csv.DictReader(f)
        if tuple(reader.fieldnames or ()) != CSV_HEADER:
            raise ValueError(f"{path}: unexpected header {reader.fieldnames}")
        return list(reader)


# ---------------------------------------------------------------------------
# ablation
# ---------------------------------------------------------------------------

@dataclass
class AblationRow:
    variant: str
    seed: object
    reports: dict = field(default_factory=dict)
    status: str = "ok"

    def summary(self) -> dict:
        out = {"variant": self.variant, "seed": self.seed, "status": self.status}
        for subset in ("day", "night", "all"):
            r = self.reports.get(subset)
            out[f"{subset}_macc"] = r.macc if r else float("nan")
            out[f"{subset}_miou"] = r.miou if r else float("nan")
        return out


SUMMARY_FIELDS = ("variant", "seed", "day_macc", "day_miou", "night_macc", "night_miou",
                  "all_macc", "all_miou", "status")


def run_ablation(data: SegDataset, variants, seeds, train_cfg, out_dir: str,
                 model_overrides: dict | None = None) -> list[dict]:
    """Train every variant per seed with identical settings and evaluate on test.

    Returns one summary dict per (variant, seed) followed by one median row
    per variant. Writes ``ablation.csv`` (metrics format with ``__median__``
    rows) and ``ablation_summary.csv`` into ``out_dir``. A failed run is
    recorded in its row's ``status`` instead of aborting the table.
    """
    from dataclasses import replace as dc_replace
    from .train import fit

    if not seeds:
        raise ValueError("at least one seed is required")
    for v in variants:
        if v not in VARIANTS:
            raise ValueError(f"unknown variant {v!r}")
    ensure_dir(out_dir)
    size = data.manifest.size or 64
    results: list[AblationRow] = []
    for variant in variants:
        for seed in seeds:
            row = AblationRow(variant, seed)
            try:
                cfg = ModelConfig(num_classes=data.num_classes, height=size, width=size,
                                  variant=variant, seed=seed, **(model_overrides or {}))
                model = DooDLeNet(cfg)
                tcfg = dc_replace(train_cfg, seed=seed)
                fit(model, data, tcfg, os.path.join(out_dir, f"{variant}_s{seed}.ddlf"))
                row.reports = evaluate_subsets(model, data, "test")
            except (FloatingPointError, ValueError) as exc:
                log.warning("ablation run %s/%s failed: %s", variant, seed, exc)
                row.status = f"error: {exc}"
            results.append(row)
            log.info("ablation %s seed %s -> %s", variant, seed,
                     {k: round(v.miou, 4) for k, v in row.reports.items()})

    detail: list[list] = []
    for row in results:
        for subset in ("day", "night", "all"):
            if subset in row.reports:
                detail += row.reports[subset].rows(row.variant, row.seed)
    table = [r.summary() for r in results]
    for variant in variants:
        mine = [r for r in table if r["variant"] == variant]
        med = {"variant": variant, "seed": "__median__", "status": "ok"}
        for key in SUMMARY_FIELDS[2:-1]:
            vals = [r[key] for r in mine if not np.isnan(r[key])]
            med[key] = statistics.median(vals) if vals else float("nan")
        table.append(med)
        for subset in ("day", "night", "all"):
            detail.append([variant, "__median__", subset, "__mean__", "", "",
                           _fmt(med[f"{subset}_macc"]), _fmt(med[f"{subset}_miou"])])
    write_metrics_csv(os.path.join(out_dir, "ablation.csv"), detail)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SUMMARY_FIELDS)
    for r in table:
        w.writerow([r["variant"], r["seed"]] + [_fmt(r[k]) for k in SUMMARY_FIELDS[2:-1]]
                   + [r["status"]])
    with open(os.path.join(out_dir, "ablation_summary.csv"), "w", encoding="utf-8", newline="") as f:
        f.write(buf.getvalue())
    return table


def median_table(table: list[dict]) -> dict[str, dict]:
    return {r["variant"]: r for r in table if r["seed"] == "__median__"}


# ---------------------------------------------------------------------------
# visual exports
# ---------------------------------------------------------------------------

def _rescale(m: np.ndarray) -> np.ndarray:
    lo, hi = float(m.min()), float(m.max())
    if hi - lo <= 0:
        return np.zeros(m.shape, dtype=np.uint8)
    return to_uint8((m - lo) / (hi - lo))


def export_mean_feature_maps(model: DooDLeNet, sample: SegSample, out_dir: str,
                             tag: str = "") -> list[str]:
    """Channel-mean activation of every encoder tap, written as P5 graymaps.

    Files are named ``<id>[_<tag>]_<modality>_tap{a,b}.pgm`` where tap a is the
    1/4 scale tap and tap b the 1/16 scale one.
    """
    ensure_dir(out_dir)
    dt = model.config.np_dtype
    with no_grad():
        out = model(sample.color[None].astype(dt), sample.thermal[None].astype(dt), keep_taps=True)
    paths = []
    prefix = sample.id + (f"_{tag}" if tag else "")
    for (modality, tap), feat in out.taps.items():
        mean_map = feat.data[0].mean(axis=0)
        path = os.path.join(out_dir, f"{prefix}_{modality}_tap{tap}.pgm")
        write_pgm(path, _rescale(mean_map))
        paths.append(path)
    return paths


def overlay_image(color: np.ndarray, pred: np.ndarray) -> np.ndarray:
    """Blend class colours at 50% over the colour image; class 0 stays untouched."""
    base = to_uint8(color.transpose(1, 2, 0)).astype(np.uint16)
    tint = PALETTE[pred % len(PALETTE)].astype(np.uint16)
    blended = ((base + tint + 1) // 2).astype(np.uint8)
    out = base.astype(np.uint8).copy()
    mask = pred > 0
    out[mask] = blended[mask]
    return out


def export_overlay(model: DooDLeNet, sample: SegSample, out_path: str) -> str:
    pred = predict_samples(model, [sample])[0]
    parent = os.path.dirname(out_path)
    if parent:
        ensure_dir(parent)
    write_ppm(out_path, overlay_image(sample.color, pred))
    return out_path
