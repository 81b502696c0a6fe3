"""Lesion-wise and volumetric Dice, detection rate, and report assembly.

Lesion-wise scoring follows the BraTS-style convention: ground-truth
lesions are 26-connected components (size-filtered), each is dilated for
matching, overlapping prediction components are pooled per lesion, and
every unmatched prediction component contributes a zero term to the mean.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict

import numpy as np
from scipy import ndimage

from .volcore import LabelVolume, ShapeMismatchError

REGIONS = ("ET", "NET", "SNFH", "TC", "WT")


@dataclass
class MetricsParams:
    dilation_radius: int = 0
    min_lesion_voxels: int = 0
    connectivity: int = 26
    detection_rate_on: str = "lesionwise"  # "lesionwise" | "volumetric"

    def __post_init__(self):
        if self.dilation_radius < 0 or self.min_lesion_voxels < 0:
            raise ValueError("dilation_radius and min_lesion_voxels must be >= 0")
        if self.detection_rate_on not in ("lesionwise", "volumetric"):
            raise ValueError(f"unknown detection_rate_on {self.detection_rate_on!r}")


@dataclass
class LesionMatch:
    lesion_id: int
    voxels: int
    matched_pred_ids: list[int]
    dice: float


@dataclass
class LesionMatchTable:
    lesions: list[LesionMatch] = field(default_factory=list)
    false_positive_ids: list[int] = field(default_factory=list)


def _check_shapes(pred, gt):
    if pred.shape != gt.shape:
        raise ShapeMismatchError("pred vs gt", pred.shape, gt.shape)


def volumetric_dice(pred: np.ndarray, gt: np.ndarray) -> float:
    """2|P&G| / (|P|+|G|); empty vs empty scores 1.0 by convention."""
    _check_shapes(pred, gt)
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    denom = int(pred.sum()) + int(gt.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((pred & gt).sum()) / denom


def _label_components(mask: np.ndarray, connectivity: int):
    if connectivity == 26:
        structure = np.ones((3, 3, 3), dtype=bool)
    else:
        structure = ndimage.generate_binary_structure(3, 1)
    return ndimage.label(np.asarray(mask, dtype=bool), structure=structure)


def lesionwise_dice(
    pred: np.ndarray,
    gt: np.ndarray,
    dilation_radius: int = 0,
    min_lesion_voxels: int = 0,
    connectivity: int = 26,
):
    """Mean per-lesion Dice with false-positive components counted as zeros.

    Matching uses the Chebyshev dilation of each ground-truth lesion; the
    per-lesion Dice compares the undilated lesion against the union of its
    matched prediction components. Returns (score, LesionMatchTable).
    """
    _check_shapes(pred, gt)
    gt_labels, gt_n = _label_components(gt, connectivity)
    pred_labels, pred_n = _label_components(pred, connectivity)
    gt_sizes = np.bincount(gt_labels.ravel(), minlength=gt_n + 1)
    lesion_ids = [i for i in range(1, gt_n + 1) if gt_sizes[i] >= max(min_lesion_voxels, 1)]

    table = LesionMatchTable()
    matched_pred: set[int] = set()
    scores: list[float] = []
    for lesion_id in lesion_ids:
        lesion = gt_labels == lesion_id
        if dilation_radius > 0:
            size = 2 * dilation_radius + 1
            probe = ndimage.binary_dilation(lesion, np.ones((size, size, size), dtype=bool))
        else:
            probe = lesion
        pred_ids = sorted(int(i) for i in np.unique(pred_labels[probe]) if i != 0)
        if pred_ids:
            union_pred = np.isin(pred_labels, pred_ids)
            dice = volumetric_dice(union_pred, lesion)
        else:
            dice = 0.0
        matched_pred.update(pred_ids)
        scores.append(dice)
        table.lesions.append(
            LesionMatch(
                lesion_id=lesion_id,
                voxels=int(gt_sizes[lesion_id]),
                matched_pred_ids=pred_ids,
                dice=dice,
            )
        )
    table.false_positive_ids = [i for i in range(1, pred_n + 1) if i not in matched_pred]
    scores.extend(0.0 for _ in table.false_positive_ids)
    if not scores:
        return 1.0, table  # nothing to find and nothing predicted
    return float(np.mean(scores)), table


def auroc(scores, labels) -> float:
    """Area under the ROC curve via the rank-sum statistic (ties averaged)."""
    from scipy.stats import rankdata

    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    n_pos = int(labels.sum())
    n_neg = int((~labels).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("auroc needs at least one positive and one negative")
    ranks = rankdata(scores)
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def detection_rate(per_case_wt_dsc: list[float]) -> float:
    """Fraction of cases whose whole-tumor score is strictly positive."""
    if not per_case_wt_dsc:
        raise ValueError("detection_rate needs at least one case")
    return sum(1 for d in per_case_wt_dsc if d > 0) / len(per_case_wt_dsc)


def evaluate_case(pred: LabelVolume, gt: LabelVolume, params: MetricsParams | None = None) -> dict:
    """Lesion-wise and volumetric DSC for the five BraTS regions."""
    params = params or MetricsParams()
    _check_shapes(pred.data, gt.data)
    scores = {}
    for region in REGIONS:
        pred_mask = pred.region_mask(region)
        gt_mask = gt.region_mask(region)
        lw, _ = lesionwise_dice(
            pred_mask,
            gt_mask,
            dilation_radius=params.dilation_radius,
            min_lesion_voxels=params.min_lesion_voxels,
            connectivity=params.connectivity,
        )
        scores[region] = {
            "lesionwise_dice": lw,
            "volumetric_dice": volumetric_dice(pred_mask, gt_mask),
        }
    return scores


@dataclass
class MetricsReport:
    per_case: dict  # case name -> {region: {"lesionwise_dice", "volumetric_dice"}}
    aggregates: dict  # region -> {"lesionwise_dice", "volumetric_dice"}
    detection_rate: float
    params: MetricsParams

    def to_json_dict(self) -> dict:
        return {
            "per_case": self.per_case,
            "aggregates": self.aggregates,
            "detection_rate": self.detection_rate,
            "params": asdict(self.params),
        }


def build_report(case_scores: dict, params: MetricsParams | None = None) -> MetricsReport:
    """Aggregate per-case region scores into a report.

    case_scores maps case name -> the evaluate_case output for that case.
    """
    params = params or MetricsParams()
    if not case_scores:
        raise ValueError("no cases to report")
    aggregates = {}
    for region in REGIONS:
        aggregates[region] = {
            "lesionwise_dice": float(
                np.mean([case_scores[c][region]["lesionwise_dice"] for c in case_scores])
            ),
            "volumetric_dice": float(
                np.mean([case_scores[c][region]["volumetric_dice"] for c in case_scores])
            ),
        }
    key = "lesionwise_dice" if params.detection_rate_on == "lesionwise" else "volumetric_dice"
    dr = detection_rate([case_scores[c]["WT"][key] for c in case_scores])
    return MetricsReport(
        per_case=case_scores, aggregates=aggregates, detection_rate=dr, params=params
    )


def format_report_table(report: MetricsReport, method: str = "MViT-AE") -> str:
    """Aligned text table with the usual DSC columns plus detection rate."""
    header = ["Method", "DSC ET", "DSC NET", "DSC SNFH", "DSC TC", "DSC WT", "DR %"]
    agg = report.aggregates
    row = [method] + [f"{agg[r]['lesionwise_dice']:.3f}" for r in REGIONS] + [
        f"{100.0 * report.detection_rate:.1f}"
    ]
    widths = [max(len(h), len(v)) for h, v in zip(header, row)]
    lines = [
        "  ".join(h.ljust(w) for h, w in zip(header, widths)),
        "  ".join("-" * w for w in widths),
        "  ".join(v.ljust(w) for v, w in zip(row, widths)),
    ]
    return "\n".join(lines)


def write_report(report: MetricsReport, json_path, table_path=None, method: str = "MViT-AE"):
    with open(json_path, "w") as fh:
        json.dump(report.to_json_dict(), fh, indent=1, sort_keys=True)
    table = format_report_table(report, method=method)
    if table_path is not None:
        with open(table_path, "w") as fh:
            fh.write(table + "\n")
    return table
