"""Fused saliency -> binary lesion masks: brain gating, thresholds, detection readout."""
import logging
from dataclasses import dataclass, replace
from typing import List, Sequence, Tuple

import numpy as np

from .attention_maps import FusedMap, max_normalize
from .config import ThresholdGrid
from .errors import InputError, ParameterError, UsageError
from .evalkit import dice
from .file_utils import save_array_with_sidecar
from .shared_constants import MIN_DETECTION_PIXELS, UNET_THRESHOLD

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SegMask:
    mask: np.ndarray  # uint8 {0, 1}
    threshold_used: float
    method: str
    foreground_pixels: int


@dataclass(frozen=True)
class ThresholdSearchResult:
    threshold: float
    mean_dice: float
    scores: Tuple[Tuple[float, float], ...]  # (threshold, mean Dice) for every grid point


def gate_by_brain(fused: FusedMap, brain_mask: np.ndarray) -> FusedMap:
    """Zeroes saliency outside the brain and re-max-normalises."""
    if fused.values.shape != np.shape(brain_mask):
        raise InputError(f"map shape {fused.values.shape} != brain mask shape {np.shape(brain_mask)}")
    gated, peak = max_normalize(fused.values * (np.asarray(brain_mask) > 0))
    return replace(fused, values=gated, norm_max=fused.norm_max * peak)


def binarize(fused: FusedMap, threshold: float) -> SegMask:
    if not 0.0 <= threshold <= 1.0:
        raise ParameterError(f"threshold must lie in [0, 1], got {threshold}")
    mask = (fused.values >= threshold).astype(np.uint8)
    return SegMask(mask=mask, threshold_used=float(threshold), method=fused.method,
                   foreground_pixels=int(np.count_nonzero(mask)))


def threshold_values(grid: ThresholdGrid) -> np.ndarray:
    """Grid points start, start + step, ... up to stop inclusive."""
    count = int(np.floor((grid.stop - grid.start) / grid.step + 1e-9)) + 1
    return np.round(grid.start + grid.step * np.arange(count), 10)


def grid_search_threshold(pairs: Sequence[Tuple[FusedMap, np.ndarray]],
                          grid: ThresholdGrid = ThresholdGrid()) -> ThresholdSearchResult:
    """Exhaustive scan for the threshold with the best mean Dice; ties go to the smallest threshold."""
    if not pairs:
        raise UsageError("threshold search needs at least one validation (map, mask) pair")
    scores: List[Tuple[float, float]] = []
    best_t, best_score = None, -1.0
    for t in threshold_values(grid):
        mean_dice = float(np.mean([dice(binarize(fused, t).mask, gt) for fused, gt in pairs]))
        scores.append((float(t), mean_dice))
        if mean_dice > best_score:
            best_t, best_score = float(t), mean_dice
    return ThresholdSearchResult(threshold=best_t, mean_dice=best_score, scores=tuple(scores))


def detect_from_mask(mask: SegMask, min_pixels: int = MIN_DETECTION_PIXELS) -> bool:
    """Positive iff the mask has at least `min_pixels` foreground pixels."""
    return mask.foreground_pixels >= min_pixels


def probability_to_mask(probabilities: np.ndarray, threshold: float = UNET_THRESHOLD,
                        method: str = "unet") -> SegMask:
    """U-Net probability maps use the same discretisation contract at a fixed cut."""
    fused = FusedMap(values=np.asarray(probabilities, dtype=np.float64), method=method)
    return binarize(fused, threshold)


def save_seg_mask(seg: SegMask, file_path, source_ref=None, min_pixels: int = MIN_DETECTION_PIXELS) -> str:
    return save_array_with_sidecar(seg.mask, file_path, {
        "threshold": seg.threshold_used,
        "method": seg.method,
        "foreground_pixels": seg.foreground_pixels,
        "min_pixels": min_pixels,
        "source_ref": list(source_ref) if source_ref else None,
    })
