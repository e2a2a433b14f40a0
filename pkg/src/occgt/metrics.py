"""Binary and semantic occupancy metrics.

Semantic evaluation builds a K x (K+1) confusion matrix ``counts[gt][pred]``;
the extra last column counts labeled ground-truth voxels predicted empty
(class 255), so they lower that class's IoU. Ground-truth 255 voxels are only
tallied in ``ignored``.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .dataset import UNLABELED
from .errors import ValidationError
from .occupancy import OccupancyGrid, OccupancyGrid4D, SemanticGrid, resolve_threads

# Column order of the 17-class occupancy benchmark.
OCC3D_CLASSES = (
    "others",
    "barrier",
    "bicycle",
    "bus",
    "car",
    "construction_vehicle",
    "motorcycle",
    "pedestrian",
    "traffic_cone",
    "trailer",
    "truck",
    "driveable_surface",
    "other_flat",
    "sidewalk",
    "terrain",
    "manmade",
    "vegetation",
)


@dataclass(frozen=True, eq=False)
class ConfusionMatrix:
    k: int
    counts: np.ndarray  # int64 (k, k + 1); last column = predicted empty
    ignored: int = 0

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, ConfusionMatrix)
            and self.k == other.k
            and self.ignored == other.ignored
            and np.array_equal(self.counts, other.counts)
        )

    def __add__(self, other: ConfusionMatrix) -> ConfusionMatrix:
        if self.k != other.k:
            raise ValidationError("cannot add confusion matrices with different class counts")
        return ConfusionMatrix(self.k, self.counts + other.counts, self.ignored + other.ignored)


def _check_same_spec(a, b) -> None:
    if a.spec != b.spec:
        raise ValidationError(f"grid specs differ: {a.spec} vs {b.spec}")


def binary_iou(pred: OccupancyGrid, gt: OccupancyGrid) -> float:
    """TP / (TP + FP + FN); 1.0 when both grids are empty."""
    _check_same_spec(pred, gt)
    tp = int(np.count_nonzero(pred.bits & gt.bits))
    union = int(np.count_nonzero(pred.bits | gt.bits))
    return 1.0 if union == 0 else tp / union


def binary_counts(pred: OccupancyGrid, gt: OccupancyGrid) -> dict:
    _check_same_spec(pred, gt)
    p, g = pred.bits, gt.bits
    return {
        "tp": int(np.count_nonzero(p & g)),
        "fp": int(np.count_nonzero(p & ~g)),
        "fn": int(np.count_nonzero(~p & g)),
        "tn": int(np.count_nonzero(~p & ~g)),
    }


def temporal_iou(pred: OccupancyGrid4D, gt: OccupancyGrid4D) -> list[float]:
    """Per-timestep binary IoU."""
    if pred.spec != gt.spec or pred.m != gt.m:
        raise ValidationError(f"4D grids differ in spec or length ({pred.m} vs {gt.m} timesteps)")
    return [binary_iou(p, g) for p, g in zip(pred.frames, gt.frames)]


def _confusion_chunk(pred: np.ndarray, gt: np.ndarray, k: int) -> tuple[np.ndarray, int]:
    labeled = gt != UNLABELED
    g = gt[labeled].astype(np.int64)
    p = pred[labeled].astype(np.int64)
    p[p == UNLABELED] = k
    counts = np.bincount(g * (k + 1) + p, minlength=k * (k + 1)).reshape(k, k + 1)
    return counts, int(labeled.size - np.count_nonzero(labeled))


def confusion(pred: SemanticGrid, gt: SemanticGrid, k: int, threads: Optional[int] = 1) -> ConfusionMatrix:
    """Confusion counts over all voxels; integer partial sums make threading exact."""
    _check_same_spec(pred, gt)
    if not 1 <= k < UNLABELED:
        raise ValidationError(f"class count must be in [1, {UNLABELED - 1}], got {k}")
    p_flat, g_flat = pred.classes.reshape(-1), gt.classes.reshape(-1)
    for name, arr in (("prediction", p_flat), ("ground truth", g_flat)):
        bad = (arr >= k) & (arr != UNLABELED)
        if bad.any():
            raise ValidationError(f"{name} class id {int(arr[bad][0])} >= k={k}")

    n_threads = min(resolve_threads(threads), max(1, len(g_flat)))
    if n_threads == 1:
        parts = [_confusion_chunk(p_flat, g_flat, k)]
    else:
        bounds = np.linspace(0, len(g_flat), n_threads + 1).astype(int)
        with ThreadPoolExecutor(n_threads) as pool:
            parts = list(pool.map(lambda ab: _confusion_chunk(p_flat[ab[0]:ab[1]], g_flat[ab[0]:ab[1]], k),
                                  zip(bounds, bounds[1:])))
    counts = sum((c for c, _ in parts), np.zeros((k, k + 1), dtype=np.int64))
    return ConfusionMatrix(k, counts, sum(i for _, i in parts))


def confusion_4d(pred: OccupancyGrid4D, gt: OccupancyGrid4D, k: int, threads: Optional[int] = 1) -> ConfusionMatrix:
    if pred.semantics is None or gt.semantics is None:
        raise ValidationError("both grids need a semantic payload")
    if pred.spec != gt.spec or pred.m != gt.m:
        raise ValidationError("4D grids differ in spec or length")
    cms = [confusion(p, g, k, threads) for p, g in zip(pred.semantic_frames(), gt.semantic_frames())]
    return sum(cms[1:], cms[0])


def per_class_iou(cm: ConfusionMatrix) -> np.ndarray:
    """IoU per class; NaN marks classes absent from both prediction and ground truth."""
    k = cm.k
    diag = np.diag(cm.counts[:, :k]).astype(np.float64)
    gt_total = cm.counts.sum(axis=1)
    pred_total = cm.counts[:, :k].sum(axis=0)
    denom = gt_total + pred_total - diag
    out = np.full(k, np.nan)
    present = denom > 0
    out[present] = diag[present] / denom[present]
    return out


def miou(per_class: Sequence[float]) -> float:
    """Mean over present (non-NaN) classes."""
    values = np.asarray(per_class, dtype=np.float64)
    present = ~np.isnan(values)
    if not present.any():
        raise ValidationError("mIoU undefined: every class is absent")
    return float(values[present].mean())


def metrics_report(
    pred: OccupancyGrid4D,
    gt: OccupancyGrid4D,
    semantic: bool = False,
    k: int = len(OCC3D_CLASSES),
    class_names: Optional[Sequence[str]] = None,
    threads: Optional[int] = 1,
) -> dict:
    """JSON-ready report: binary and per-timestep IoU, counts, and optionally semantic IoUs."""
    per_t = temporal_iou(pred, gt)
    counts = [binary_counts(p, g) for p, g in zip(pred.frames, gt.frames)]
    total = {key: sum(c[key] for c in counts) for key in counts[0]}
    union = total["tp"] + total["fp"] + total["fn"]
    report = {
        "m": pred.m,
        "dims": list(pred.spec.dims),
        "binary_iou": 1.0 if union == 0 else total["tp"] / union,
        "temporal_iou": per_t,
        "voxel_counts": {
            "total": pred.m * pred.spec.n_voxels,
            "pred_occupied": int(pred.bits.sum()),
            "gt_occupied": int(gt.bits.sum()),
            **total,
        },
    }
    if semantic:
        cm = confusion_4d(pred, gt, k, threads)
        ious = per_class_iou(cm)
        names = list(class_names) if class_names is not None else (
            list(OCC3D_CLASSES) if k == len(OCC3D_CLASSES) else [str(i) for i in range(k)]
        )
        report["per_class_iou"] = {n: (None if np.isnan(v) else float(v)) for n, v in zip(names, ious)}
        report["miou"] = miou(ious) if (~np.isnan(ious)).any() else None
        report["confusion"] = {"counts": cm.counts.tolist(), "ignored": cm.ignored, "empty_column": k}
    return report
