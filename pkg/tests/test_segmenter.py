import numpy as np
import pytest

from attnseg.attention_maps import FusedMap
from attnseg.config import ThresholdGrid
from attnseg.errors import InputError, ParameterError, UsageError
from attnseg.segmenter import (
    binarize,
    detect_from_mask,
    gate_by_brain,
    grid_search_threshold,
    probability_to_mask,
    threshold_values,
)
from attnseg.evalkit import dice


def _fused(values, method="hgi-sam"):
    return FusedMap(values=np.asarray(values, dtype=np.float64), method=method, norm_max=1.0)


def test_gate_by_brain_cases(rng):
    fused = _fused(rng.uniform(size=(16, 16)) / 2)
    fused.values[3, 3] = 0.5

    kept = gate_by_brain(fused, np.ones((16, 16), dtype=np.uint8))
    np.testing.assert_allclose(kept.values, fused.values / 0.5)

    gone = gate_by_brain(fused, np.zeros((16, 16), dtype=np.uint8))
    assert not gone.values.any()

    # hotspot outside the brain disappears and the in-brain part is rescaled to peak 1
    brain = np.zeros((16, 16), dtype=np.uint8)
    brain[8:, 8:] = 1
    fused.values[0, 0] = 10.0
    gated = gate_by_brain(fused, brain)
    assert gated.values[0, 0] == 0.0
    assert gated.values.max() == pytest.approx(1.0)
    assert not gated.values[:8].any()

    with pytest.raises(InputError):
        gate_by_brain(fused, np.ones((8, 8)))


def test_threshold_values_grid():
    np.testing.assert_allclose(threshold_values(ThresholdGrid(start=0.1, stop=0.9, step=0.1)),
                               np.round(np.arange(1, 10) * 0.1, 10))
    assert len(threshold_values(ThresholdGrid())) == 19


def test_grid_search_examples():
    grid = ThresholdGrid(start=0.1, stop=0.9, step=0.1)
    gt = np.zeros((8, 8), dtype=np.uint8)
    gt[2:5, 2:5] = 1

    exact = grid_search_threshold([(_fused(gt.astype(float)), gt)], grid)
    assert exact.threshold == pytest.approx(0.1)
    assert exact.mean_dice == pytest.approx(1.0)
    assert len(exact.scores) == 9

    uniform = grid_search_threshold([(_fused(np.full((8, 8), 0.5)), gt)], grid)
    assert uniform.threshold == pytest.approx(0.1)

    # every threshold gives an empty mask against an empty truth: all ties, smallest wins
    empty = grid_search_threshold([(_fused(np.zeros((8, 8))), np.zeros((8, 8), dtype=np.uint8))], grid)
    assert empty.threshold == pytest.approx(0.1)
    assert empty.mean_dice == pytest.approx(1.0)

    with pytest.raises(UsageError):
        grid_search_threshold([], grid)


def test_grid_search_matches_brute_force(rng):
    grid = ThresholdGrid(start=0.1, stop=0.9, step=0.1)
    candidates = threshold_values(grid)
    for _ in range(1000):
        pairs = []
        for _ in range(2):
            values = rng.uniform(size=(4, 4))
            gt = (values + rng.normal(scale=0.2, size=values.shape) > 0.7).astype(np.uint8)
            pairs.append((_fused(values), gt))
        result = grid_search_threshold(pairs, grid)
        scores = [np.mean([dice(f.values >= t, g) for f, g in pairs]) for t in candidates]
        best = candidates[int(np.argmax(scores))]  # first maximum is the smallest threshold
        assert result.threshold == pytest.approx(best, abs=1e-9)
        assert result.mean_dice == pytest.approx(max(scores), abs=1e-9)


def test_binarize_example_and_range():
    seg = binarize(_fused([[0.1, 0.5], [0.49, 0.9]]), 0.5)
    np.testing.assert_array_equal(seg.mask, [[0, 1], [0, 1]])
    assert seg.foreground_pixels == 2 and seg.threshold_used == 0.5 and seg.mask.dtype == np.uint8
    with pytest.raises(ParameterError):
        binarize(_fused([[0.1]]), 1.5)


def test_binarize_is_monotone_in_threshold(rng):
    fused = _fused(rng.uniform(size=(20, 20)))
    counts = [binarize(fused, t).foreground_pixels for t in np.linspace(0, 1, 21)]
    assert counts == sorted(counts, reverse=True)


def test_detect_from_mask_boundary():
    values = np.zeros((10, 10))
    values[0, :9] = 1.0
    assert not detect_from_mask(binarize(_fused(values), 0.5))
    values[1, 0] = 1.0
    assert detect_from_mask(binarize(_fused(values), 0.5))
    assert detect_from_mask(binarize(_fused(values), 0.5), min_pixels=0)


def test_probability_to_mask_uses_fixed_cut():
    seg = probability_to_mask(np.array([[0.49, 0.5], [0.51, 0.0]]))
    np.testing.assert_array_equal(seg.mask, [[0, 1], [1, 0]])
    assert seg.method == "unet" and seg.threshold_used == 0.5
