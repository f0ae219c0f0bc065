"""CT slice ingestion: HU windowing, model inputs, brain masks and dataset catalogs.

Directory layout of a dataset root::

    <root>/slices/<study_id>_<slice_index>.arr   HU grid (.npy format)
    <root>/masks/<study_id>_<slice_index>.arr    optional binary gt mask
    <root>/labels.csv                            id,any,ivh,iph,sah,edh,sdh
    <root>/spacing.csv                           optional id,row_mm,col_mm

Clinical formats (DICOM/NIfTI) plug in by converting to HU grids and calling
`write_catalog`; nothing here depends on them.
"""
import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from scipy import ndimage

from .errors import DataError, LabelConsistencyError, LabelParseError, ParameterError
from .file_utils import load_array, save_array
from .shared_constants import (
    AIR_HU_CUTOFF,
    BRAIN_HU_RANGE,
    DEFAULT_WINDOWS,
    LABEL_COLUMNS,
    SUBTYPE_NAMES,
    WINDOW_ORDER,
)

logger = logging.getLogger(__name__)

SLICE_DIR = "slices"
MASK_DIR = "masks"
LABEL_FILE = "labels.csv"
SPACING_FILE = "spacing.csv"
ARRAY_SUFFIX = ".arr"


@dataclass(frozen=True)
class CategoricalLabel:
    any_ich: int
    subtypes: Tuple[int, int, int, int, int] = (0, 0, 0, 0, 0)

    def __post_init__(self):
        if self.any_ich not in (0, 1) or any(flag not in (0, 1) for flag in self.subtypes):
            raise DataError(f"label flags must be 0/1, got any={self.any_ich} subtypes={self.subtypes}")
        if len(self.subtypes) != len(SUBTYPE_NAMES):
            raise DataError(f"expected {len(SUBTYPE_NAMES)} subtype flags, got {len(self.subtypes)}")

    @property
    def is_consistent(self) -> bool:
        return self.any_ich == int(any(self.subtypes))

    def as_vector(self) -> List[int]:
        """Flags in LABEL_COLUMNS order (any first)."""
        return [self.any_ich, *self.subtypes]


@dataclass(frozen=True)
class CtSlice:
    study_id: str
    slice_index: int
    hu: np.ndarray
    labels: CategoricalLabel
    pixel_spacing: Tuple[float, float] = (1.0, 1.0)
    gt_mask: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.hu.ndim != 2 or self.hu.size == 0:
            raise DataError(f"slice {self.slice_id}: hu grid must be 2D and non-empty, got shape {self.hu.shape}")
        if self.gt_mask is not None:
            if self.gt_mask.shape != self.hu.shape:
                raise DataError(
                    f"slice {self.slice_id}: mask shape {self.gt_mask.shape} != slice shape {self.hu.shape}")
            if not np.isin(self.gt_mask, (0, 1)).all():
                raise DataError(f"slice {self.slice_id}: gt mask values must be 0/1")

    @property
    def slice_id(self) -> str:
        return make_slice_id(self.study_id, self.slice_index)


@dataclass(frozen=True)
class WindowSpec:
    center: float
    width: float

    def __post_init__(self):
        if not self.width > 0:
            raise ParameterError(f"window width must be positive, got {self.width}")


DEFAULT_WINDOW_SPECS = tuple(WindowSpec(*DEFAULT_WINDOWS[name]) for name in WINDOW_ORDER)


@dataclass(frozen=True)
class ModelInput:
    pixels: np.ndarray  # (3, S, S) float32 in [0, 1]
    brain_mask: np.ndarray  # (S, S) uint8
    source_ref: Tuple[str, int]

    @property
    def side(self) -> int:
        return self.pixels.shape[-1]

    def as_tensor(self) -> torch.Tensor:
        """Batch of one, ready for a model forward pass."""
        return torch.from_numpy(np.ascontiguousarray(self.pixels)).unsqueeze(0)


def make_slice_id(study_id: str, slice_index: int) -> str:
    return f"{study_id}_{slice_index}"


def parse_slice_id(slice_id: str) -> Tuple[str, int]:
    study_id, sep, index = slice_id.rpartition("_")
    if not sep or not study_id or not index.isdigit():
        raise ValueError(f"slice id must look like <study_id>_<slice_index>, got {slice_id!r}")
    return study_id, int(index)


# --- Intensity windowing ---

def apply_hu_window(hu: np.ndarray, spec: WindowSpec) -> np.ndarray:
    """Linear ramp of [center - width/2, center + width/2] onto [0, 1], clamped."""
    if not spec.width > 0:
        raise ParameterError(f"window width must be positive, got {spec.width}")
    low = spec.center - spec.width / 2.0
    return np.clip((np.asarray(hu, dtype=np.float64) - low) / spec.width, 0.0, 1.0)


def stack_windows(ct_slice: CtSlice, specs: Sequence[WindowSpec] = DEFAULT_WINDOW_SPECS) -> np.ndarray:
    """(3, H, W) stack in (brain, subdural, bone) order."""
    if len(specs) != 3:
        raise ParameterError(f"exactly three window specs are required, got {len(specs)}")
    return np.stack([apply_hu_window(ct_slice.hu, spec) for spec in specs], axis=0)


def _resample(grid: torch.Tensor, side: int, mode: str) -> torch.Tensor:
    height, width = grid.shape[-2:]
    if (height, width) == (side, side):
        return grid
    if mode == "nearest":
        return F.interpolate(grid, size=(side, side), mode="nearest")
    if height >= side and width >= side:
        return F.interpolate(grid, size=(side, side), mode="area")
    return F.interpolate(grid, size=(side, side), mode="bilinear", align_corners=False)


def resize_normalize(channels: np.ndarray, side: int, multiple: int = 96) -> np.ndarray:
    """Resamples to side x side (area averaging when shrinking) and min-max scales to [0, 1].

    Constant images map to all zeros.
    """
    if side <= 0 or side % multiple:
        raise ParameterError(f"side {side} must be a positive multiple of {multiple}")
    grid = torch.from_numpy(np.asarray(channels, dtype=np.float64)).unsqueeze(0)
    resized = _resample(grid, side, mode="area")[0].numpy()
    low, high = resized.min(), resized.max()
    if high == low:
        return np.zeros_like(resized, dtype=np.float32)
    return ((resized - low) / (high - low)).astype(np.float32)


def compute_brain_mask(ct_slice: CtSlice, hu_range=BRAIN_HU_RANGE, closing_iterations: int = 2) -> np.ndarray:
    """Soft-tissue brain region: HU threshold, closing, largest component, holes filled."""
    hu = ct_slice.hu
    tissue = (hu >= hu_range[0]) & (hu <= hu_range[1])
    if not tissue.any():
        return np.zeros(hu.shape, dtype=np.uint8)
    structure = ndimage.generate_binary_structure(2, 1)
    closed = ndimage.binary_closing(tissue, structure=structure, iterations=closing_iterations)
    labeled, count = ndimage.label(closed, structure=structure)
    if count == 0:
        return np.zeros(hu.shape, dtype=np.uint8)
    sizes = ndimage.sum_labels(closed, labeled, index=np.arange(1, count + 1))
    largest = labeled == (int(np.argmax(sizes)) + 1)
    filled = ndimage.binary_fill_holes(largest)
    # never extend into air, whatever the morphology did
    filled &= hu > AIR_HU_CUTOFF
    return filled.astype(np.uint8)


def prepare_input(ct_slice: CtSlice, side: int, specs: Sequence[WindowSpec] = DEFAULT_WINDOW_SPECS,
                  multiple: int = 96) -> ModelInput:
    """Windowed, resized, normalized 3-channel input plus the brain mask at the same size."""
    pixels = resize_normalize(stack_windows(ct_slice, specs), side, multiple=multiple)
    brain = compute_brain_mask(ct_slice)
    brain = _resample(torch.from_numpy(brain.astype(np.float32))[None, None], side, mode="nearest")
    return ModelInput(
        pixels=pixels,
        brain_mask=brain[0, 0].numpy().astype(np.uint8),
        source_ref=(ct_slice.study_id, ct_slice.slice_index),
    )


def resize_mask(mask: np.ndarray, side: int) -> np.ndarray:
    grid = torch.from_numpy(np.asarray(mask, dtype=np.float32))[None, None]
    return _resample(grid, side, mode="nearest")[0, 0].numpy().astype(np.uint8)


# --- Catalogs ---

@dataclass(frozen=True)
class CatalogEntry:
    slice_id: str
    labels: CategoricalLabel
    slice_path: Optional[Path] = None
    mask_path: Optional[Path] = None
    pixel_spacing: Tuple[float, float] = (1.0, 1.0)
    # in-memory catalogs (synthetic data) carry the slice itself
    ct_slice: Optional[CtSlice] = field(default=None, compare=False, repr=False)

    @property
    def study_id(self) -> str:
        return parse_slice_id(self.slice_id)[0]

    @property
    def slice_index(self) -> int:
        return parse_slice_id(self.slice_id)[1]


@dataclass(frozen=True)
class SliceCatalog:
    """Immutable mapping of slice ids to loadable CtSlices."""

    entries: Tuple[CatalogEntry, ...]
    root: Optional[Path] = None
    missing: Tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "_index", {entry.slice_id: entry for entry in self.entries})

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, slice_id) -> bool:
        return slice_id in self._index

    @property
    def ids(self) -> List[str]:
        return [entry.slice_id for entry in self.entries]

    @property
    def positive_count(self) -> int:
        return sum(entry.labels.any_ich for entry in self.entries)

    @property
    def has_masks(self) -> bool:
        return all(entry.mask_path is not None or
                   (entry.ct_slice is not None and entry.ct_slice.gt_mask is not None)
                   for entry in self.entries)

    def entry(self, slice_id: str) -> CatalogEntry:
        return self._index[slice_id]

    def label(self, slice_id: str) -> CategoricalLabel:
        return self._index[slice_id].labels

    def studies(self) -> Dict[str, List[str]]:
        grouped: Dict[str, List[str]] = {}
        for entry in self.entries:
            grouped.setdefault(entry.study_id, []).append(entry.slice_id)
        return grouped

    def subset(self, slice_ids: Iterable[str]) -> "SliceCatalog":
        wanted = set(slice_ids)
        return SliceCatalog(tuple(e for e in self.entries if e.slice_id in wanted), self.root)

    def subset_studies(self, study_ids: Iterable[str]) -> "SliceCatalog":
        wanted = set(study_ids)
        return SliceCatalog(tuple(e for e in self.entries if e.study_id in wanted), self.root)

    def load(self, slice_id: str) -> CtSlice:
        entry = self._index[slice_id]
        if entry.ct_slice is not None:
            return entry.ct_slice
        study_id, slice_index = parse_slice_id(slice_id)
        hu = load_array(entry.slice_path)
        gt_mask = load_array(entry.mask_path).astype(np.uint8) if entry.mask_path else None
        return CtSlice(study_id=study_id, slice_index=slice_index, hu=hu, labels=entry.labels,
                       pixel_spacing=entry.pixel_spacing, gt_mask=gt_mask)

    @classmethod
    def from_slices(cls, slices: Iterable[CtSlice]) -> "SliceCatalog":
        entries = tuple(CatalogEntry(slice_id=s.slice_id, labels=s.labels, pixel_spacing=s.pixel_spacing,
                                     ct_slice=s) for s in slices)
        return cls(entries)


def _parse_flag(value: str, line_number: int, column: str) -> int:
    value = value.strip()
    if value not in ("0", "1"):
        raise LabelParseError(f"column {column!r} must be 0 or 1, got {value!r}", line_number)
    return int(value)


def _read_wide_labels(reader, header, label_file) -> Dict[str, List[int]]:
    expected = ["id", *LABEL_COLUMNS]
    if [h.strip().lower() for h in header] != expected:
        raise LabelParseError(f"header must be {','.join(expected)} in {label_file}", 1)
    rows: Dict[str, List[int]] = {}
    for line_number, row in enumerate(reader, start=2):
        if not row or not "".join(row).strip():
            continue
        if len(row) != len(expected):
            raise LabelParseError(f"expected {len(expected)} columns, got {len(row)}", line_number)
        slice_id = row[0].strip()
        try:
            parse_slice_id(slice_id)
        except ValueError as e:
            raise LabelParseError(str(e), line_number) from e
        if slice_id in rows:
            raise LabelParseError(f"duplicate id {slice_id!r}", line_number)
        rows[slice_id] = [_parse_flag(v, line_number, c) for v, c in zip(row[1:], LABEL_COLUMNS)]
    return rows


def _read_long_labels(reader, label_file) -> Dict[str, List[int]]:
    """Rows of `<slice id>_<subtype>,<flag>` (the header row names id/subtype/flag columns)."""
    rows: Dict[str, List[int]] = {}
    for line_number, row in enumerate(reader, start=2):
        if not row or not "".join(row).strip():
            continue
        if len(row) == 3:
            slice_id, subtype, flag = (v.strip() for v in row)
        elif len(row) == 2:
            slice_id, _, subtype = row[0].strip().rpartition("_")
            flag = row[1].strip()
        else:
            raise LabelParseError(f"expected 2 or 3 columns, got {len(row)}", line_number)
        subtype = subtype.lower()
        if subtype not in LABEL_COLUMNS:
            raise LabelParseError(f"unknown subtype {subtype!r}", line_number)
        if slice_id.upper().startswith("ID_"):
            slice_id = slice_id[3:]
        try:
            parse_slice_id(slice_id)
        except ValueError as e:
            raise LabelParseError(str(e), line_number) from e
        flags = rows.setdefault(slice_id, [0] * len(LABEL_COLUMNS))
        flags[LABEL_COLUMNS.index(subtype)] = _parse_flag(flag, line_number, "flag")
    return rows


def read_label_table(label_file) -> Dict[str, CategoricalLabel]:
    """Parses a wide or long label table and checks any/subtype consistency."""
    with open(label_file, newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header is None:
            return {}
        if len(header) == len(LABEL_COLUMNS) + 1:
            rows = _read_wide_labels(reader, header, label_file)
        elif len(header) in (2, 3):
            rows = _read_long_labels(reader, label_file)
        else:
            raise LabelParseError(f"unrecognised header {header!r}", 1)
    labels = {slice_id: CategoricalLabel(flags[0], tuple(flags[1:])) for slice_id, flags in rows.items()}
    inconsistent = [slice_id for slice_id, label in labels.items() if not label.is_consistent]
    if inconsistent:
        raise LabelConsistencyError(sorted(inconsistent))
    return labels


def _read_spacing(spacing_file) -> Dict[str, Tuple[float, float]]:
    spacing = {}
    if not Path(spacing_file).exists():
        return spacing
    with open(spacing_file, newline="") as f:
        reader = csv.reader(f)
        next(reader, None)
        for line_number, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                spacing[row[0].strip()] = (float(row[1]), float(row[2]))
            except (IndexError, ValueError) as e:
                raise LabelParseError(f"bad spacing row {row!r}", line_number) from e
    return spacing


def load_catalog(root, label_file=None) -> SliceCatalog:
    """Catalogs every labeled slice under `root`; labeled rows without a slice file are reported."""
    root = Path(root)
    label_file = Path(label_file) if label_file else root / LABEL_FILE
    if not label_file.exists():
        raise FileNotFoundError(f"Label file not found: {label_file}")
    labels = read_label_table(label_file)
    spacing = _read_spacing(root / SPACING_FILE)

    entries, missing = [], []
    for slice_id in sorted(labels):
        slice_path = root / SLICE_DIR / f"{slice_id}{ARRAY_SUFFIX}"
        if not slice_path.exists():
            missing.append(slice_id)
            continue
        mask_path = root / MASK_DIR / f"{slice_id}{ARRAY_SUFFIX}"
        if mask_path.exists():
            slice_shape = load_array(slice_path, mmap=True).shape
            mask_shape = load_array(mask_path, mmap=True).shape
            if slice_shape != mask_shape:
                raise DataError(f"slice {slice_id}: mask shape {mask_shape} != slice shape {slice_shape}")
        else:
            mask_path = None
        entries.append(CatalogEntry(slice_id=slice_id, labels=labels[slice_id], slice_path=slice_path,
                                    mask_path=mask_path, pixel_spacing=spacing.get(slice_id, (1.0, 1.0))))
    if missing:
        logger.warning("Catalog %s: %d labeled slices have no slice file: %s",
                       root, len(missing), ", ".join(missing[:10]))
    logger.info("Catalog %s: %d slices (%d positive)", root, len(entries),
                sum(e.labels.any_ich for e in entries))
    return SliceCatalog(tuple(entries), root=root, missing=tuple(missing))


def write_catalog(slices: Iterable[CtSlice], root) -> Path:
    """Writes slices in the catalog directory layout; `load_catalog(root)` reads them back."""
    root = Path(root)
    (root / SLICE_DIR).mkdir(parents=True, exist_ok=True)
    rows, spacing_rows = [], []
    for ct_slice in slices:
        slice_id = ct_slice.slice_id
        save_array(ct_slice.hu, root / SLICE_DIR / f"{slice_id}{ARRAY_SUFFIX}")
        if ct_slice.gt_mask is not None:
            save_array(ct_slice.gt_mask.astype(np.uint8), root / MASK_DIR / f"{slice_id}{ARRAY_SUFFIX}")
        rows.append([slice_id, *ct_slice.labels.as_vector()])
        spacing_rows.append([slice_id, *ct_slice.pixel_spacing])
    with open(root / LABEL_FILE, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["id", *LABEL_COLUMNS])
        writer.writerows(sorted(rows))
    with open(root / SPACING_FILE, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["id", "row_mm", "col_mm"])
        writer.writerows(sorted(spacing_rows))
    return root
