"""Pipeline stages: synth, ingest, train, finetune, extract, segment, evaluate, overlay.

Every stage writes its artifacts under one output directory and a manifest
recording status, config hash, seed, input hashes, outputs and non-fatal errors.
"""
import logging
import traceback
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
from joblib import Parallel, delayed

from .attention_maps import FusedMap, grad_cam_map, saliency_map, save_fused_map, save_layer_maps
from .checkpoints import load_checkpoint, save_checkpoint
from .config import RunConfig, UNetConfig
from .errors import DependencyError, UsageError
from .evalkit import (
    FoldSplit,
    GroundTruth,
    SliceResult,
    compare_methods,
    evaluate_method,
    make_folds,
    render_overlay,
    write_report_tables,
)
from .file_utils import (
    get_report_local,
    hash_config,
    hash_path,
    load_array,
    load_sidecar,
    save_report_local,
)
from .imaging_io import LABEL_FILE, SliceCatalog, load_catalog, prepare_input, resize_mask, write_catalog
from .segmenter import (
    binarize,
    detect_from_mask,
    gate_by_brain,
    grid_search_threshold,
    probability_to_mask,
    save_seg_mask,
)
from .shared_constants import LABEL_COLUMNS, METHOD_MODEL, METHOD_ORDER
from .synth import synth_generate
from .trainer import finetune_two_logit, split_train_val, train_classifier, train_unet
from .unet import unet_forward

logger = logging.getLogger(__name__)

MODE_CHECKPOINT = {
    "binary_one_logit": "one_logit",
    "binary_two_logit": "two_logit",
    "multi_label": "multi_label",
}


@dataclass(frozen=True)
class ArtifactLayout:
    """Where each stage reads and writes, relative to the run's output directory."""

    root: Path

    @property
    def manifests(self) -> Path:
        return self.root / "manifests"

    @property
    def folds(self) -> Path:
        return self.root / "folds.json"

    @property
    def reports(self) -> Path:
        return self.root / "reports"

    def checkpoint(self, name: str, fold: Optional[int] = None) -> Path:
        suffix = f"_fold{fold}" if fold is not None else ""
        return self.root / "checkpoints" / f"{name}{suffix}.safetensors"

    def history(self, name: str, fold: Optional[int] = None) -> Path:
        suffix = f"_fold{fold}" if fold is not None else ""
        return self.root / "checkpoints" / f"{name}{suffix}_history.csv"

    def maps(self, method: str) -> Path:
        return self.root / "maps" / method

    def masks(self, method: str) -> Path:
        return self.root / "masks" / method

    def overlays(self, method: str) -> Path:
        return self.root / "overlays" / method


def _require(path: Path, hint: str) -> Path:
    if not Path(path).exists():
        raise DependencyError(path, hint)
    return Path(path)


def run_stage(stage: str, config: RunConfig, inputs: Dict[str, Path], body: Callable[[List[str]], dict],
              layout: ArtifactLayout, reuse: bool = True) -> dict:
    """Runs one stage and records its manifest; a completed stage with the same hashes is not re-run."""
    config_hash = hash_config(config.model_dump())
    input_hashes = {name: hash_path(path) for name, path in sorted(inputs.items()) if Path(path).exists()}
    run_id = f"{stage}-{config_hash[:8]}"
    manifest_path = layout.manifests / f"{stage}.json"

    if reuse and manifest_path.exists():
        previous = get_report_local(manifest_path)
        if (previous.get("status") == "COMPLETED" and previous.get("config_hash") == config_hash
                and previous.get("inputs") == input_hashes
                and all(Path(p).exists() for p in previous.get("artifacts", []))):
            logger.info("Run %s: up to date, reusing %s", run_id, manifest_path)
            return previous

    logger.info("Run %s: starting (seed %d)", run_id, config.seed)
    errors: List[str] = []
    manifest = {"stage": stage, "run_id": run_id, "config_hash": config_hash, "seed": config.seed,
                "inputs": input_hashes, "errors": errors}
    try:
        outputs = body(errors)
    except Exception as e:
        logger.error("Run %s: failed: %s", run_id, traceback.format_exc())
        manifest.update(status="FAILED", error=str(e)[:1000])
        save_report_local(manifest, manifest_path.stem, layout.manifests)
        raise
    manifest.update(status="COMPLETED", **outputs)
    if errors:
        logger.warning("Run %s: completed with %d non-fatal errors", run_id, len(errors))
    save_report_local(manifest, manifest_path.stem, layout.manifests)
    logger.info("Run %s: completed", run_id)
    return manifest


# --- Data stages ---

def stage_synth(config: RunConfig, data_root, seed: Optional[int] = None, name: str = "synth") -> dict:
    seed = config.seed if seed is None else seed
    data_root = Path(data_root)
    layout = ArtifactLayout(Path(config.output_dir))

    def body(errors):
        catalog = synth_generate(config.synth, seed)
        write_catalog((catalog.load(i) for i in catalog.ids), data_root)
        return {"data_root": str(data_root), "slices": len(catalog), "positives": catalog.positive_count,
                "synth_seed": seed, "artifacts": [str(data_root / LABEL_FILE)]}

    return run_stage(name, config, {}, body, layout, reuse=False)


def stage_ingest(config: RunConfig, data_root) -> dict:
    """Validates a dataset directory and writes a catalog summary."""
    layout = ArtifactLayout(Path(config.output_dir))
    data_root = Path(data_root)

    def body(errors):
        catalog = load_catalog(data_root)
        errors.extend(f"labeled slice without slice file: {i}" for i in catalog.missing)
        counts = {column: 0 for column in LABEL_COLUMNS}
        for slice_id in catalog.ids:
            for column, flag in zip(LABEL_COLUMNS, catalog.label(slice_id).as_vector()):
                counts[column] += flag
        summary = {"slices": len(catalog), "studies": len(catalog.studies()), "label_counts": counts,
                   "has_masks": catalog.has_masks, "missing": list(catalog.missing)}
        path = save_report_local(summary, "catalog_summary", layout.reports)
        return {"summary": summary, "artifacts": [path]}

    return run_stage("ingest", config, {"labels": data_root / LABEL_FILE}, body, layout)


def ensure_folds(config: RunConfig, catalog: SliceCatalog, layout: ArtifactLayout) -> FoldSplit:
    """Loads the shared fold file, creating it once per output directory."""
    if layout.folds.exists():
        return FoldSplit.load(layout.folds)
    split = make_folds(catalog, k=config.evaluate.k, seed=config.seed)
    split.save(layout.folds)
    logger.info("Wrote %d-fold split over %d studies to %s", split.k, len(split.studies()), layout.folds)
    return split


# --- Training stages ---

def stage_train(config: RunConfig, data_root, mode: str, progress: bool = True) -> dict:
    """Trains a classifier mode, or one U-Net per fold of the shared split."""
    layout = ArtifactLayout(Path(config.output_dir))
    data_root = Path(data_root)
    train_config = config.train_for(mode)
    inputs = {"labels": data_root / LABEL_FILE}
    if mode == "unet":
        ensure_folds(config, load_catalog(data_root), layout)
        inputs["folds"] = layout.folds

    def body(errors):
        catalog = load_catalog(data_root)
        if mode == "unet":
            return _train_unet_folds(config, catalog, layout, progress)
        train, val = split_train_val(catalog, train_config.val_fraction, train_config.seed)
        name = MODE_CHECKPOINT[mode]
        result = train_classifier(train, val, config.swin_for(1), train_config,
                                  history_path=layout.history(name), progress=progress)
        path = save_checkpoint(result.model, layout.checkpoint(name), train_mode=mode,
                               extra={"best_epoch": result.best_epoch})
        return {"checkpoint": path, "best_epoch": result.best_epoch, "best_val_loss": result.best_val_loss,
                "history": result.history, "artifacts": [path]}

    return run_stage(f"train_{mode}", config, inputs, body, layout)


def _train_unet_folds(config: RunConfig, catalog: SliceCatalog, layout: ArtifactLayout, progress: bool) -> dict:
    split = ensure_folds(config, catalog, layout)
    train_config = config.train_for("unet")
    side = config.swin_for(1).input_side
    paths, best_epochs = [], []
    for fold in range(split.k):
        held_out = set(split.folds[fold])
        rest = catalog.subset_studies(s for s in split.studies() if s not in held_out)
        train, val = split_train_val(rest, train_config.val_fraction, train_config.seed)
        result = train_unet(train, val, config.unet or UNetConfig(), train_config, side,
                            history_path=layout.history("unet", fold), progress=progress)
        paths.append(save_checkpoint(result.model, layout.checkpoint("unet", fold), train_mode="unet",
                                     extra={"fold": fold, "side": side}))
        best_epochs.append(result.best_epoch)
    return {"checkpoints": paths, "best_epochs": best_epochs, "artifacts": paths + [str(layout.folds)]}


def stage_finetune(config: RunConfig, data_root, base_checkpoint=None, progress: bool = True) -> dict:
    layout = ArtifactLayout(Path(config.output_dir))
    data_root = Path(data_root)
    base = _require(Path(base_checkpoint) if base_checkpoint else layout.checkpoint("one_logit"),
                    "run `train --mode binary_one_logit` first")
    train_config = config.train_for("binary_two_logit")

    def body(errors):
        catalog = load_catalog(data_root)
        train, val = split_train_val(catalog, train_config.val_fraction, train_config.seed)
        result = finetune_two_logit(base, train, val, train_config,
                                    history_path=layout.history("two_logit"), progress=progress)
        path = save_checkpoint(result.model, layout.checkpoint("two_logit"), train_mode="binary_two_logit",
                               extra={"base": str(base), "best_epoch": result.best_epoch})
        return {"checkpoint": path, "best_epoch": result.best_epoch, "history": result.history,
                "artifacts": [path]}

    return run_stage("finetune", config, {"labels": data_root / LABEL_FILE, "base": base}, body, layout)


# --- Maps ---

def _extract_one(model, catalog: SliceCatalog, slice_id: str, method: str, config: RunConfig, out_dir: Path):
    ct_slice = catalog.load(slice_id)
    side = model.config.input_side if method != "unet" else config.swin_for(1).input_side
    multiple = model.config.side_multiple if method != "unet" else 2 ** model.config.hierarchies
    model_input = prepare_input(ct_slice, side, multiple=multiple)
    if method == "grad-cam":
        fused, score = grad_cam_map(model, model_input)
    elif method == "unet":
        probabilities = unet_forward(model, model_input).numpy().astype(np.float64)
        fused = FusedMap(values=probabilities, method="unet", source_ref=model_input.source_ref)
        if config.evaluate.unet_auc_score == "max_prob":
            score = float(probabilities.max())
        else:
            score = float((probabilities >= config.segment.unet_threshold).mean())
    else:
        fused, score = saliency_map(model, model_input, method, config.segment.fused_layers,
                                    config.segment.norm_mode)
    save_fused_map(fused, out_dir / f"{slice_id}.arr")
    if config.segment.save_layer_maps and fused.layer_maps:
        save_layer_maps(fused, out_dir / "layers", slice_id)
    return slice_id, score


def stage_extract(config: RunConfig, data_root, method: str, checkpoint=None) -> dict:
    """Per-slice saliency (or U-Net probability) maps plus the slice-level detection score."""
    layout = ArtifactLayout(Path(config.output_dir))
    data_root = Path(data_root)
    out_dir = layout.maps(method)
    if method == "unet":
        folds_path = _require(layout.folds, "run `train --mode unet` first")
        split = FoldSplit.load(folds_path)
        checkpoints = [_require(layout.checkpoint("unet", f), "run `train --mode unet` first")
                       for f in range(split.k)]
    else:
        checkpoints = [_require(Path(checkpoint) if checkpoint else layout.checkpoint(METHOD_MODEL[method]),
                                f"train the {METHOD_MODEL[method]} classifier first")]
    inputs = {"labels": data_root / LABEL_FILE, **{f"checkpoint{i}": p for i, p in enumerate(checkpoints)}}
    if method == "unet":
        inputs["folds"] = layout.folds

    def body(errors):
        catalog = load_catalog(data_root)
        errors.extend(f"labeled slice without slice file: {i}" for i in catalog.missing)
        if method == "unet":
            jobs = [(load_checkpoint(checkpoints[f], expect_kind="unet").model,
                     [i for i in catalog.ids if catalog.entry(i).study_id in set(split.folds[f])])
                    for f in range(split.k)]
        else:
            model = load_checkpoint(checkpoints[0], expect_kind="swin").model
            jobs = [(model, catalog.ids)]
        scores = {}
        for model, ids in jobs:
            results = Parallel(n_jobs=config.num_workers, prefer="threads")(
                delayed(_extract_one)(model, catalog, slice_id, method, config, out_dir) for slice_id in ids)
            scores.update(dict(results))
        scores_path = save_report_local(scores, "scores", out_dir)
        logger.info("Extracted %d %s maps into %s", len(scores), method, out_dir)
        return {"maps_dir": str(out_dir), "slices": len(scores), "artifacts": [scores_path]}

    return run_stage(f"extract_{method}", config, inputs, body, layout)


# --- Segmentation ---

def _load_fused(path: Path) -> FusedMap:
    meta = load_sidecar(path)
    return FusedMap(values=load_array(path).astype(np.float64), method=meta["method"],
                    layers_used=tuple(meta.get("layers_used") or ()), norm_max=meta.get("norm_max", 0.0),
                    source_ref=tuple(meta["source_ref"]) if meta.get("source_ref") else None)


def _pooled_threshold(maps, gts, seg, fold: int, errors: List[str]) -> float:
    """Threshold searched over every masked positive slice, for folds whose training folds have none."""
    pairs = [(maps[i], gts[i]) for i in gts]
    if pairs:
        message = f"fold {fold + 1}: no masked positive slices in the training folds, using the pooled threshold"
    else:
        message = f"fold {fold + 1}: no masked positive slices, using the fixed cut {seg.unet_threshold}"
    logger.warning(message)
    errors.append(message)
    return grid_search_threshold(pairs, seg.grid).threshold if pairs else seg.unet_threshold


def stage_segment(config: RunConfig, data_root, method: str) -> dict:
    """Binary masks per slice; attention-map thresholds are chosen on the other folds."""
    layout = ArtifactLayout(Path(config.output_dir))
    data_root = Path(data_root)
    maps_dir = layout.maps(method)
    scores_path = _require(maps_dir / "scores.json", f"run `extract --method {method}` first")
    seg = config.segment
    split = ensure_folds(config, load_catalog(data_root), layout)

    def body(errors):
        catalog = load_catalog(data_root)
        scores = get_report_local(scores_path)
        maps, gts = {}, {}
        for slice_id in catalog.ids:
            path = maps_dir / f"{slice_id}.arr"
            if not path.exists():
                errors.append(f"no {method} map for {slice_id}")
                continue
            fused = _load_fused(path)
            ct_slice = catalog.load(slice_id)
            side = fused.values.shape[0]
            if method != "unet" and seg.gate_by_brain:
                brain = prepare_input(ct_slice, side, multiple=side).brain_mask
                fused = gate_by_brain(fused, brain)
            maps[slice_id] = fused
            if ct_slice.labels.any_ich and ct_slice.gt_mask is not None:
                gts[slice_id] = resize_mask(ct_slice.gt_mask, side)

        thresholds = {}
        index = {}
        for fold in range(split.k):
            fold_studies = set(split.folds[fold])
            fold_ids = [i for i in maps if catalog.entry(i).study_id in fold_studies]
            if method == "unet":
                thresholds[fold] = seg.unet_threshold
            else:
                pairs = [(maps[i], gts[i]) for i in gts if catalog.entry(i).study_id not in fold_studies]
                if pairs:
                    thresholds[fold] = grid_search_threshold(pairs, seg.grid).threshold
                else:
                    thresholds[fold] = _pooled_threshold(maps, gts, seg, fold, errors)
            for slice_id in fold_ids:
                if method == "unet":
                    mask = probability_to_mask(maps[slice_id].values, thresholds[fold])
                else:
                    mask = binarize(maps[slice_id], thresholds[fold])
                if method == "unet" or seg.min_pixels_all_methods:
                    detected = detect_from_mask(mask, seg.min_pixels)
                else:
                    detected = scores[slice_id] >= 0.5
                path = save_seg_mask(mask, layout.masks(method) / f"{slice_id}.arr",
                                     source_ref=maps[slice_id].source_ref, min_pixels=seg.min_pixels)
                index[slice_id] = {"fold": fold + 1, "detected": bool(detected),
                                   "score": float(scores[slice_id]), "mask": path}
            logger.info("%s fold %d: threshold %.2f over %d slices", method, fold + 1, thresholds[fold],
                        len(fold_ids))
        index_path = save_report_local(index, "index", layout.masks(method))
        return {"thresholds": {str(f + 1): t for f, t in thresholds.items()}, "slices": len(index),
                "artifacts": [index_path]}

    inputs = {"labels": data_root / LABEL_FILE, "folds": layout.folds, "maps": maps_dir}
    return run_stage(f"segment_{method}", config, inputs, body, layout)


# --- Evaluation ---

def _ground_truth(catalog: SliceCatalog, side: int) -> Dict[str, GroundTruth]:
    gts = {}
    for slice_id in catalog.ids:
        ct_slice = catalog.load(slice_id)
        mask = resize_mask(ct_slice.gt_mask, side) if ct_slice.gt_mask is not None else None
        gts[slice_id] = GroundTruth(mask=mask, positive=bool(ct_slice.labels.any_ich))
    return gts


def stage_evaluate(config: RunConfig, data_root, methods: Optional[Sequence[str]] = None) -> dict:
    layout = ArtifactLayout(Path(config.output_dir))
    data_root = Path(data_root)
    methods = list(methods or [m for m in METHOD_ORDER if (layout.masks(m) / "index.json").exists()])
    if not methods:
        raise UsageError("no segmented method found; run `segment` first")
    folds_path = _require(layout.folds, "the shared fold file is written by `segment` or `train --mode unet`")
    indices = {m: _require(layout.masks(m) / "index.json", f"run `segment --method {m}` first") for m in methods}

    def body(errors):
        catalog = load_catalog(data_root)
        split = FoldSplit.load(folds_path)
        reports, side = {}, None
        gts = None
        for method in methods:
            index = get_report_local(indices[method])
            outputs = {}
            for slice_id, entry in index.items():
                mask = load_array(entry["mask"])
                side = mask.shape[0]
                outputs[slice_id] = SliceResult(mask=mask, score=entry["score"], detected=entry["detected"])
            if gts is None:
                gts = _ground_truth(catalog, side)
            reports[method] = evaluate_method(outputs, split, gts, method)
        comparisons = compare_methods(reports, config.evaluate.reference_method)
        tables = write_report_tables(reports, layout.reports, comparisons)
        report_paths = [save_report_local(r.to_dict(), f"report_{m}", layout.reports) for m, r in reports.items()]
        comparison_path = save_report_local(comparisons, "comparisons", layout.reports)
        return {"methods": methods, "tables": tables,
                "artifacts": report_paths + [comparison_path, *tables.values()]}

    inputs = {"labels": data_root / LABEL_FILE, "folds": folds_path, **{f"index_{m}": p for m, p in indices.items()}}
    return run_stage("evaluate", config, inputs, body, layout)


def stage_overlay(config: RunConfig, data_root, method: str, slice_ids: Optional[Sequence[str]] = None,
                  limit: int = 8) -> List[str]:
    """PNG overlays of predicted (red) and ground-truth (green) masks on the brain window."""
    layout = ArtifactLayout(Path(config.output_dir))
    index = get_report_local(_require(layout.masks(method) / "index.json", f"run `segment --method {method}` first"))
    catalog = load_catalog(data_root)
    if not slice_ids:
        slice_ids = [i for i in sorted(index) if catalog.label(i).any_ich][:limit]
    paths = []
    for slice_id in slice_ids:
        if slice_id not in index:
            raise UsageError(f"no {method} mask for slice {slice_id}")
        prediction = load_array(index[slice_id]["mask"])
        side = prediction.shape[0]
        ct_slice = catalog.load(slice_id)
        model_input = prepare_input(ct_slice, side, multiple=side)
        gt = resize_mask(ct_slice.gt_mask, side) if ct_slice.gt_mask is not None else None
        paths.append(render_overlay(model_input.pixels[0], prediction, gt,
                                    layout.overlays(method) / f"{slice_id}.png"))
    logger.info("Wrote %d %s overlays to %s", len(paths), method, layout.overlays(method))
    return paths


# --- Full run ---

def run_pipeline(config: RunConfig, methods: Sequence[str] = METHOD_ORDER, progress: bool = True) -> dict:
    """synth -> train -> finetune -> extract -> segment -> evaluate on synthetic data.

    Classifiers learn from one synthetic set of labeled slices; segmentation is
    scored on a second, disjoint set with pixel masks.
    """
    root = Path(config.output_dir)
    train_root, eval_root = root / "data" / "train", root / "data" / "eval"
    stage_synth(config, train_root, seed=config.seed, name="synth_train")
    stage_synth(config, eval_root, seed=config.seed + 1, name="synth_eval")

    needed = {METHOD_MODEL[m] for m in methods}
    if needed & {"one_logit", "two_logit"}:
        stage_train(config, train_root, "binary_one_logit", progress)
    if "multi_label" in needed:
        stage_train(config, train_root, "multi_label", progress)
    if "two_logit" in needed:
        stage_finetune(config, train_root, progress=progress)

    layout = ArtifactLayout(root)
    ensure_folds(config, load_catalog(eval_root), layout)
    if "unet" in needed:
        stage_train(config, eval_root, "unet", progress)

    for method in methods:
        stage_extract(config, eval_root, method)
        stage_segment(config, eval_root, method)
    return stage_evaluate(config, eval_root, methods)
