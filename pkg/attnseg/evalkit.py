"""Segmentation/detection metrics, study-level folds, paired tests and report tables."""
import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from PIL import Image
from scipy import stats
from sklearn.metrics import roc_auc_score
from sklearn.model_selection import KFold

from .errors import ConfigError, CoverageError, DegenerateInputError, InputError
from .file_utils import get_report_local, save_report_local
from .shared_constants import METHOD_ORDER, METHOD_TAGS

logger = logging.getLogger(__name__)

DETECTION_KEYS = ("accuracy", "auc", "precision", "recall", "specificity", "f1")


# --- Pixel metrics ---

def _check_pair(a, b) -> Tuple[np.ndarray, np.ndarray]:
    a, b = np.asarray(a) > 0, np.asarray(b) > 0
    if a.shape != b.shape:
        raise InputError(f"mask shapes differ: {a.shape} vs {b.shape}")
    return a, b


def dice(a, b) -> float:
    """2|a∩b| / (|a| + |b|); two empty masks agree perfectly (1.0)."""
    a, b = _check_pair(a, b)
    total = np.count_nonzero(a) + np.count_nonzero(b)
    if total == 0:
        return 1.0
    return 2.0 * np.count_nonzero(a & b) / total


def iou(a, b) -> float:
    a, b = _check_pair(a, b)
    union = np.count_nonzero(a | b)
    if union == 0:
        return 1.0
    return np.count_nonzero(a & b) / union


# --- Detection metrics ---

def _ratio(num: int, den: int) -> Optional[float]:
    return num / den if den else None


def detection_metrics(preds: Sequence[int], gts: Sequence[int]) -> Dict[str, Optional[float]]:
    """Confusion-matrix metrics; ratios with a zero denominator are None."""
    preds = np.asarray(preds).astype(bool)
    gts = np.asarray(gts).astype(bool)
    if preds.shape != gts.shape:
        raise InputError(f"{len(preds)} predictions for {len(gts)} labels")
    if preds.size == 0:
        raise InputError("detection metrics need at least one prediction")
    tp = int(np.count_nonzero(preds & gts))
    tn = int(np.count_nonzero(~preds & ~gts))
    fp = int(np.count_nonzero(preds & ~gts))
    fn = int(np.count_nonzero(~preds & gts))
    return {
        "accuracy": (tp + tn) / preds.size,
        "precision": _ratio(tp, tp + fp),
        "recall": _ratio(tp, tp + fn),
        "specificity": _ratio(tn, tn + fp),
        "f1": _ratio(2 * tp, 2 * tp + fp + fn),
    }


def auc_roc(scores: Sequence[float], gts: Sequence[int]) -> Optional[float]:
    """Mann-Whitney AUC (ties count one half); None when only one class is present."""
    gts = np.asarray(gts).astype(int)
    scores = np.asarray(scores, dtype=np.float64)
    if len(scores) != len(gts):
        raise InputError(f"{len(scores)} scores for {len(gts)} labels")
    if len(np.unique(gts)) < 2:
        return None
    return float(roc_auc_score(gts, scores))


# --- Folds ---

@dataclass(frozen=True)
class FoldSplit:
    k: int
    folds: Tuple[Tuple[str, ...], ...]  # study ids per fold
    seed: int

    def fold_of(self, study_id: str) -> int:
        for index, fold in enumerate(self.folds):
            if study_id in fold:
                return index
        raise KeyError(study_id)

    def studies(self) -> List[str]:
        return [s for fold in self.folds for s in fold]

    def save(self, file_path) -> str:
        file_path = Path(file_path)
        return save_report_local({"k": self.k, "seed": self.seed, "folds": self.folds},
                                 file_path.stem, file_path.parent)

    @classmethod
    def load(cls, file_path) -> "FoldSplit":
        data = get_report_local(file_path)
        return cls(k=int(data["k"]), folds=tuple(tuple(f) for f in data["folds"]), seed=int(data["seed"]))


def make_folds(study_ids, k: int = 5, seed: int = 0) -> FoldSplit:
    """Study-level k-fold partition, deterministic per seed.

    Accepts a SliceCatalog or any iterable of study ids.
    """
    if hasattr(study_ids, "studies"):
        study_ids = study_ids.studies().keys()
    studies = np.array(sorted(set(study_ids)))
    if len(studies) < k:
        raise ConfigError(f"{len(studies)} studies cannot fill {k} folds")
    kfold = KFold(n_splits=k, shuffle=True, random_state=seed)
    folds = tuple(tuple(sorted(studies[test].tolist())) for _, test in kfold.split(studies))
    return FoldSplit(k=k, folds=folds, seed=seed)


# --- Paired t-test ---

def paired_ttest(x: Sequence[float], y: Sequence[float]) -> Dict[str, float]:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.size < 2:
        raise InputError(f"paired t-test needs two equal-length samples of size >= 2, got {x.size} and {y.size}")
    differences = x - y
    if np.all(differences == differences[0]):
        raise DegenerateInputError("paired differences have zero variance")
    result = stats.ttest_rel(x, y)
    return {"t": float(result.statistic), "p": float(result.pvalue), "df": int(x.size - 1)}


# --- Method evaluation ---

@dataclass(frozen=True)
class SliceResult:
    mask: Optional[np.ndarray]
    score: float
    detected: bool


@dataclass(frozen=True)
class GroundTruth:
    mask: Optional[np.ndarray]
    positive: bool


@dataclass
class MetricSummary:
    mean: Optional[float]
    std: Optional[float]
    n: int

    @classmethod
    def of(cls, values: Sequence[float]) -> "MetricSummary":
        if not len(values):
            return cls(None, None, 0)
        return cls(float(np.mean(values)), float(np.std(values)), len(values))

    def format(self) -> str:
        if self.mean is None:
            return "n/a"
        return f"{self.mean:.3f} ± {self.std:.3f}"


@dataclass
class FoldMetrics:
    fold: int
    n_slices: int
    n_positive: int
    dice: MetricSummary
    iou: MetricSummary
    detection: Dict[str, Optional[float]]


@dataclass
class FoldReport:
    method: str
    folds: List[FoldMetrics]
    aggregate: FoldMetrics
    per_slice_dice: Dict[str, float] = field(default_factory=dict)
    per_slice_iou: Dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        def fold_dict(m: FoldMetrics):
            return {"fold": m.fold, "n_slices": m.n_slices, "n_positive": m.n_positive,
                    "dice": vars(m.dice), "iou": vars(m.iou), "detection": m.detection}
        return {
            "method": self.method,
            "folds": [fold_dict(m) for m in self.folds],
            "aggregate": fold_dict(self.aggregate),
            "per_slice_dice": self.per_slice_dice,
            "per_slice_iou": self.per_slice_iou,
        }


def _study_of(slice_id: str) -> str:
    return slice_id.rpartition("_")[0]


def _fold_metrics(fold: int, ids: Sequence[str], outputs, gts, per_dice, per_iou) -> FoldMetrics:
    positive_ids = [i for i in ids if gts[i].positive and gts[i].mask is not None]
    dice_values = [per_dice[i] for i in positive_ids]
    iou_values = [per_iou[i] for i in positive_ids]
    labels = [int(gts[i].positive) for i in ids]
    detection = detection_metrics([int(outputs[i].detected) for i in ids], labels) if ids else {}
    if ids:
        detection["auc"] = auc_roc([outputs[i].score for i in ids], labels)
    return FoldMetrics(fold=fold, n_slices=len(ids), n_positive=sum(labels),
                       dice=MetricSummary.of(dice_values), iou=MetricSummary.of(iou_values),
                       detection=detection)


def evaluate_method(outputs: Mapping[str, SliceResult], split: FoldSplit, gts: Mapping[str, GroundTruth],
                    method: str) -> FoldReport:
    """Per-fold and pooled metrics. Dice/IoU use ICH-positive slices; detection uses all slices."""
    covered = set(split.studies())
    ids = sorted(i for i in gts if _study_of(i) in covered)
    missing = [i for i in ids if i not in outputs]
    if missing:
        raise CoverageError(f"{method}: {len(missing)} slices have no output", missing)

    per_dice, per_iou = {}, {}
    for i in ids:
        if gts[i].positive and gts[i].mask is not None and outputs[i].mask is not None:
            per_dice[i] = dice(outputs[i].mask, gts[i].mask)
            per_iou[i] = iou(outputs[i].mask, gts[i].mask)
        elif gts[i].positive and gts[i].mask is not None:
            per_dice[i] = per_iou[i] = 0.0

    folds = []
    for index in range(split.k):
        fold_studies = set(split.folds[index])
        fold_ids = [i for i in ids if _study_of(i) in fold_studies]
        folds.append(_fold_metrics(index + 1, fold_ids, outputs, gts, per_dice, per_iou))
    aggregate = _fold_metrics(0, ids, outputs, gts, per_dice, per_iou)
    return FoldReport(method=method, folds=folds, aggregate=aggregate,
                      per_slice_dice=per_dice, per_slice_iou=per_iou)


def compare_methods(reports: Mapping[str, FoldReport], reference: str = "hgi-sam") -> Dict[str, Dict]:
    """Two-sided paired t-tests of the reference against every other method on per-slice Dice and IoU."""
    if reference not in reports:
        return {}
    results = {}
    ref = reports[reference]
    for method, report in reports.items():
        if method == reference:
            continue
        common = sorted(set(ref.per_slice_dice) & set(report.per_slice_dice))
        entry = {}
        for metric in ("dice", "iou"):
            ref_values = getattr(ref, f"per_slice_{metric}")
            other = getattr(report, f"per_slice_{metric}")
            try:
                entry[metric] = paired_ttest([ref_values[i] for i in common], [other[i] for i in common])
            except (DegenerateInputError, InputError) as e:
                entry[metric] = {"error": str(e)}
        results[method] = entry
    return results


# --- Report output ---

def _ordered(reports: Mapping[str, FoldReport]) -> List[str]:
    known = [m for m in METHOD_ORDER if m in reports]
    return known + sorted(m for m in reports if m not in known)


def _fmt(value: Optional[float]) -> str:
    return "n/a" if value is None else f"{value:.3f}"


def write_report_tables(reports: Mapping[str, FoldReport], output_dir,
                        comparisons: Optional[Mapping[str, Dict]] = None) -> Dict[str, str]:
    """Write segmentation.csv and detection.csv (one row per fold, one column per method) plus summary.txt."""
    output_dir = Path(output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)
    methods = _ordered(reports)
    k = max(len(r.folds) for r in reports.values()) if reports else 0
    headers = [METHOD_TAGS.get(m, m) for m in methods]

    seg_path = output_dir / "segmentation.csv"
    with open(seg_path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        for metric in ("dice", "iou"):
            writer.writerow([f"Fold ({'Dice Coefficient' if metric == 'dice' else 'Intersection over Union'})",
                             *headers])
            for index in range(k):
                writer.writerow([index + 1, *[getattr(reports[m].folds[index], metric).format() for m in methods]])
            writer.writerow(["mean ± std", *[getattr(reports[m].aggregate, metric).format() for m in methods]])

    det_path = output_dir / "detection.csv"
    with open(det_path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["Fold", "Method", *[key.upper() if key == "auc" else key.capitalize()
                                             for key in DETECTION_KEYS]])
        for index in range(k):
            for m in methods:
                det = reports[m].folds[index].detection
                writer.writerow([index + 1, METHOD_TAGS.get(m, m), *[_fmt(det.get(key)) for key in DETECTION_KEYS]])
        for m in methods:
            det = reports[m].aggregate.detection
            writer.writerow(["all", METHOD_TAGS.get(m, m), *[_fmt(det.get(key)) for key in DETECTION_KEYS]])

    lines = ["Segmentation (subject-wise mean ± std over ICH-positive slices)"]
    for m in methods:
        agg = reports[m].aggregate
        lines.append(f"  {METHOD_TAGS.get(m, m):<24} Dice {agg.dice.format():<16} IoU {agg.iou.format()}")
    lines.append("Detection (all folds pooled)")
    for m in methods:
        det = reports[m].aggregate.detection
        lines.append(f"  {METHOD_TAGS.get(m, m):<24} " +
                     " ".join(f"{key}={_fmt(det.get(key))}" for key in DETECTION_KEYS))
    if comparisons:
        lines.append("Paired t-tests against the reference method")
        for m, entry in comparisons.items():
            for metric, result in entry.items():
                if "error" in result:
                    lines.append(f"  {METHOD_TAGS.get(m, m):<24} {metric}: {result['error']}")
                else:
                    lines.append(f"  {METHOD_TAGS.get(m, m):<24} {metric}: t={result['t']:.3f} "
                                 f"p={result['p']:.4f} df={result['df']}")
    summary_path = output_dir / "summary.txt"
    summary_path.write_text("\n".join(lines) + "\n")
    return {"segmentation": str(seg_path), "detection": str(det_path), "summary": str(summary_path)}


def render_overlay(image: np.ndarray, prediction: Optional[np.ndarray], ground_truth: Optional[np.ndarray],
                   file_path, alpha: float = 0.5) -> str:
    """Greyscale slice with ground truth in green and the prediction in red on top."""
    base = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    rgb = np.repeat(base[..., None], 3, axis=-1)
    for mask, colour in ((ground_truth, (0.0, 1.0, 0.0)), (prediction, (1.0, 0.0, 0.0))):
        if mask is None:
            continue
        region = np.asarray(mask) > 0
        rgb[region] = (1 - alpha) * rgb[region] + alpha * np.array(colour)
    file_path = Path(file_path)
    file_path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray((rgb * 255).round().astype(np.uint8), mode="RGB").save(file_path)
    return str(file_path)
