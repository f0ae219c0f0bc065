"""Synthetic head-CT-like slices with exact lesion masks, for desk-scale runs and tests."""
import logging
from typing import List, Tuple

import numpy as np

from .config import SynthConfig
from .imaging_io import CategoricalLabel, CtSlice, SliceCatalog
from .shared_constants import SUBTYPE_NAMES

logger = logging.getLogger(__name__)

AIR_HU = -1000.0
BRAIN_HU = 32.0
SKULL_HU = 1100.0


def _ellipse(side: int, rng: np.random.Generator) -> Tuple[np.ndarray, Tuple[float, float, float, float]]:
    cy = side / 2.0 + rng.uniform(-0.03, 0.03) * side
    cx = side / 2.0 + rng.uniform(-0.03, 0.03) * side
    ry = side * rng.uniform(0.32, 0.38)
    rx = side * rng.uniform(0.26, 0.32)
    yy, xx = np.mgrid[0:side, 0:side].astype(np.float64)
    inside = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
    return inside, (cy, cx, ry, rx)


def _skull_ring(side: int, geometry, thickness: float) -> np.ndarray:
    cy, cx, ry, rx = geometry
    yy, xx = np.mgrid[0:side, 0:side].astype(np.float64)
    inner = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 > 1.0
    outer = ((yy - cy) / (ry + thickness)) ** 2 + ((xx - cx) / (rx + thickness)) ** 2 <= 1.0
    return inner & outer


def _add_blobs(hu, brain, geometry, count, config, rng):
    """Gaussian blobs centred well inside the ellipse; mask = support above half max."""
    side = hu.shape[0]
    cy, cx, ry, rx = geometry
    yy, xx = np.mgrid[0:side, 0:side].astype(np.float64)
    mask = np.zeros(hu.shape, dtype=bool)
    for _ in range(count):
        sigma = rng.uniform(*config.blob_sigma_range)
        amplitude = rng.uniform(*config.blob_intensity_range)
        # rejection-sample a centre so the half-max disk stays inside the brain
        half_max_radius = sigma * np.sqrt(2.0 * np.log(2.0))
        for _attempt in range(100):
            angle = rng.uniform(0.0, 2.0 * np.pi)
            radius = np.sqrt(rng.uniform(0.0, 1.0)) * 0.7
            by = cy + radius * ry * np.sin(angle)
            bx = cx + radius * rx * np.cos(angle)
            if min(ry, rx) * (1.0 - radius) > half_max_radius + 1.0:
                break
        blob = amplitude * np.exp(-((yy - by) ** 2 + (xx - bx) ** 2) / (2.0 * sigma ** 2))
        hu += blob * brain
        mask |= blob >= amplitude / 2.0
    mask &= brain
    return mask


def synth_slice(study_id: str, slice_index: int, positive: bool, config: SynthConfig,
                rng: np.random.Generator) -> CtSlice:
    side = config.side
    brain, geometry = _ellipse(side, rng)
    hu = np.full((side, side), AIR_HU)
    hu[brain] = BRAIN_HU
    hu[_skull_ring(side, geometry, thickness=max(2.0, side / 40.0))] = SKULL_HU

    if positive:
        count = int(rng.integers(config.blob_count_range[0], config.blob_count_range[1] + 1))
        gt_mask = _add_blobs(hu, brain, geometry, count, config, rng)
        n_subtypes = int(rng.integers(1, 3))
        chosen = rng.choice(len(SUBTYPE_NAMES), size=n_subtypes, replace=False)
        subtypes = tuple(int(i in chosen) for i in range(len(SUBTYPE_NAMES)))
        labels = CategoricalLabel(1, subtypes)
    else:
        gt_mask = np.zeros((side, side), dtype=bool)
        labels = CategoricalLabel(0)

    if config.noise_sigma > 0:
        hu = hu + rng.normal(0.0, config.noise_sigma, size=hu.shape)
    hu = np.clip(np.round(hu), -1024, 3071).astype(np.int16)
    return CtSlice(study_id=study_id, slice_index=slice_index, hu=hu, labels=labels,
                   pixel_spacing=(0.5, 0.5), gt_mask=gt_mask.astype(np.uint8))


def synth_generate(config: SynthConfig, seed: int) -> SliceCatalog:
    """Deterministic synthetic dataset with exactly round(n * positive_fraction) positives."""
    rng = np.random.default_rng(seed)
    n_positive = int(round(config.n_slices * config.positive_fraction))
    positive_ids = set(rng.permutation(config.n_slices)[:n_positive].tolist())
    slices: List[CtSlice] = []
    for i in range(config.n_slices):
        study_id = f"SYN{i // config.slices_per_study:05d}"
        slices.append(synth_slice(study_id, i % config.slices_per_study, i in positive_ids, config, rng))
    logger.info("Synthesized %d slices (%d positive, seed %d)", len(slices), n_positive, seed)
    return SliceCatalog.from_slices(slices)
