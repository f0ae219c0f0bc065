import numpy as np
import pytest

from attnseg.errors import DataError, LabelConsistencyError, LabelParseError, ParameterError
from attnseg.imaging_io import (
    CategoricalLabel,
    CtSlice,
    WindowSpec,
    apply_hu_window,
    compute_brain_mask,
    load_catalog,
    make_slice_id,
    parse_slice_id,
    prepare_input,
    read_label_table,
    resize_normalize,
    stack_windows,
    write_catalog,
)


def _slice(hu, **kwargs):
    return CtSlice(study_id="S1", slice_index=0, hu=np.asarray(hu), labels=CategoricalLabel(0), **kwargs)


def test_apply_hu_window_examples():
    spec = WindowSpec(40, 80)
    out = apply_hu_window(np.array([0.0, 40.0, 200.0, -1000.0]), spec)
    np.testing.assert_allclose(out, [0.0, 0.5, 1.0, 0.0])


def test_apply_hu_window_is_monotone(rng):
    hu = np.sort(rng.uniform(-1024, 3071, size=500))
    out = apply_hu_window(hu, WindowSpec(80, 200))
    assert np.all(np.diff(out) >= 0)
    assert out.min() >= 0.0 and out.max() <= 1.0


def test_window_width_must_be_positive():
    with pytest.raises(ParameterError):
        WindowSpec(40, 0)


def test_stack_windows_ramp_and_order():
    hu = np.tile(np.linspace(0, 80, 9), (9, 1))
    channels = stack_windows(_slice(hu))
    assert channels.shape == (3, 9, 9)
    np.testing.assert_allclose(channels[0, 0], np.linspace(0, 1, 9))

    same = stack_windows(_slice(hu), [WindowSpec(40, 80)] * 3)
    np.testing.assert_array_equal(same[0], same[1])
    np.testing.assert_array_equal(same[1], same[2])


def test_resize_normalize_constant_and_side_check():
    assert not resize_normalize(np.full((3, 40, 40), 7.0), 32, multiple=32).any()
    with pytest.raises(ParameterError):
        resize_normalize(np.zeros((3, 40, 40)), 100)


def test_resize_normalize_checkerboard_area_average():
    board = (np.indices((768, 768)).sum(axis=0) % 2).astype(np.float64)
    channels = np.stack([board, board, board])
    channels[0, 0, 0] = 2.0  # keeps min != max after downsampling
    out = resize_normalize(channels, 384)
    assert out.shape == (3, 384, 384)
    # the bulk of the 2x2 blocks average to 0.5, which is the minimum after rescale
    assert np.isclose(out[1, 10:, 10:], out[1].min()).all()


def test_brain_mask_cases():
    yy, xx = np.mgrid[0:64, 0:64]
    radius = np.hypot(yy - 32, xx - 32)
    hu = np.full((64, 64), -1000.0)
    assert not compute_brain_mask(_slice(hu)).any()

    hu[radius <= 15] = 30.0
    disk = compute_brain_mask(_slice(hu))
    assert disk.sum() == np.count_nonzero(radius <= 15)

    hu[(radius > 15) & (radius <= 19)] = 1000.0
    ringed = compute_brain_mask(_slice(hu)).astype(bool)
    assert ringed[radius <= 15].all()
    assert not ringed[radius > 16].any()
    assert np.all(hu[ringed.astype(bool)] > -500)


def test_ct_slice_rejects_bad_mask():
    with pytest.raises(DataError):
        _slice(np.zeros((4, 4)), gt_mask=np.zeros((3, 4), dtype=np.uint8))
    with pytest.raises(DataError):
        _slice(np.zeros((4, 4)), gt_mask=np.full((4, 4), 2, dtype=np.uint8))


def test_slice_ids_round_trip():
    assert parse_slice_id(make_slice_id("ID_abc_7", 12)) == ("ID_abc_7", 12)
    with pytest.raises(ValueError):
        parse_slice_id("no-index")


def test_prepare_input(tiny_catalog):
    ct_slice = tiny_catalog.load(tiny_catalog.ids[0])
    model_input = prepare_input(ct_slice, 64, multiple=32)
    assert model_input.pixels.shape == (3, 64, 64)
    assert model_input.brain_mask.shape == (64, 64)
    assert 0.0 <= model_input.pixels.min() and model_input.pixels.max() <= 1.0
    assert model_input.source_ref == (ct_slice.study_id, ct_slice.slice_index)
    assert tuple(model_input.as_tensor().shape) == (1, 3, 64, 64)


def test_catalog_round_trip(tmp_path, tiny_catalog):
    write_catalog((tiny_catalog.load(i) for i in tiny_catalog.ids), tmp_path)
    reloaded = load_catalog(tmp_path)
    assert sorted(reloaded.ids) == sorted(tiny_catalog.ids)
    assert reloaded.positive_count == tiny_catalog.positive_count
    assert reloaded.has_masks
    for slice_id in tiny_catalog.ids:
        original, loaded = tiny_catalog.load(slice_id), reloaded.load(slice_id)
        assert loaded.labels == original.labels
        np.testing.assert_array_equal(loaded.hu, original.hu)
        np.testing.assert_array_equal(loaded.gt_mask, original.gt_mask)


def test_empty_label_file_gives_empty_catalog(tmp_path):
    (tmp_path / "labels.csv").write_text("")
    assert len(load_catalog(tmp_path)) == 0


def test_missing_slice_files_are_reported(tmp_path):
    (tmp_path / "labels.csv").write_text("id,any,ivh,iph,sah,edh,sdh\nA_0,1,1,0,0,0,0\nA_1,0,0,0,0,0,0\n")
    catalog = load_catalog(tmp_path)
    assert len(catalog) == 0
    assert catalog.missing == ("A_0", "A_1")


def test_positive_count(tmp_path):
    write_catalog([
        CtSlice("A", 0, np.zeros((4, 4), dtype=np.int16), CategoricalLabel(1, (0, 1, 0, 0, 0))),
        CtSlice("A", 1, np.zeros((4, 4), dtype=np.int16), CategoricalLabel(0)),
    ], tmp_path)
    assert load_catalog(tmp_path).positive_count == 1


def test_label_consistency_error_lists_ids(tmp_path):
    path = tmp_path / "labels.csv"
    path.write_text("id,any,ivh,iph,sah,edh,sdh\nA_0,0,0,1,0,0,0\nA_1,0,0,0,0,0,0\n")
    with pytest.raises(LabelConsistencyError) as info:
        read_label_table(path)
    assert info.value.ids == ["A_0"]


def test_positive_label_without_subtype_is_inconsistent(tmp_path):
    path = tmp_path / "labels.csv"
    path.write_text("id,any,ivh,iph,sah,edh,sdh\nA_0,1,0,0,0,0,0\nA_1,1,0,0,1,0,0\n")
    with pytest.raises(LabelConsistencyError) as info:
        read_label_table(path)
    assert info.value.ids == ["A_0"]


def test_label_parse_error_carries_line_number(tmp_path):
    path = tmp_path / "labels.csv"
    path.write_text("id,any,ivh,iph,sah,edh,sdh\nA_0,0,0,0,0,0,0\nA_1,yes,0,0,0,0,0\n")
    with pytest.raises(LabelParseError) as info:
        read_label_table(path)
    assert info.value.line_number == 3


def test_long_format_labels(tmp_path):
    path = tmp_path / "labels.csv"
    path.write_text("ID,Label\nID_S9_4_any,1\nID_S9_4_sdh,1\nID_S9_4_ivh,0\nID_S9_5_any,0\n")
    labels = read_label_table(path)
    assert labels["S9_4"] == CategoricalLabel(1, (0, 0, 0, 0, 1))
    assert labels["S9_5"] == CategoricalLabel(0)
