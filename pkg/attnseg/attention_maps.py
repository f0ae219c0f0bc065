"""Saliency maps from recorded attention: HGI-SAM, plain SAM, and Grad-CAM.

All map arithmetic runs in float64 numpy; window reversal and shift reversal
reuse the exact tensor reshapes of the classifier.
"""
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F

from .config import GradNormMode
from .errors import ConfigError, StateError, UsageError
from .file_utils import save_array_with_sidecar
from .shared_constants import DEFAULT_FUSED_LAYERS
from .swin import AttentionTrace, backward_positive_class, reverse_shift, window_reverse

logger = logging.getLogger(__name__)


@dataclass
class BlockMap:
    values: np.ndarray  # token-grid resolution, >= 0
    layer_index: int
    block_pair_index: int = 0


@dataclass
class LayerMap:
    values: np.ndarray  # image resolution, >= 0
    layer_index: int


@dataclass
class FusedMap:
    values: np.ndarray  # image resolution, in [0, 1]
    method: str
    layers_used: Tuple[int, ...] = ()
    norm_max: float = 0.0
    source_ref: Optional[Tuple[str, int]] = None
    extras: Dict = field(default_factory=dict)
    layer_maps: Dict[int, np.ndarray] = field(default_factory=dict)  # image resolution, before fusion


def _as_numpy(tensor) -> np.ndarray:
    if isinstance(tensor, torch.Tensor):
        return tensor.detach().cpu().to(torch.float64).numpy()
    return np.asarray(tensor, dtype=np.float64)


def max_normalize(values: np.ndarray) -> Tuple[np.ndarray, float]:
    peak = float(values.max()) if values.size else 0.0
    if peak <= 0.0:
        return np.zeros_like(values, dtype=np.float64), 0.0
    return values / peak, peak


# --- Head weighting ---

def head_gradient_norms(block: AttentionTrace, mode: GradNormMode = "pooled") -> np.ndarray:
    """Frobenius norm of dY1/dA per head: shape [H] pooled over windows, [num_windows, H] per window."""
    if block.grads is None:
        raise StateError(f"block {block.block_index} has no gradients; run backward_positive_class first")
    grads = _as_numpy(block.grads)
    if mode == "pooled":
        return np.sqrt(np.sum(grads ** 2, axis=(0, 2, 3)))
    if mode == "per_window":
        return np.sqrt(np.sum(grads ** 2, axis=(2, 3)))
    raise ConfigError(f"unknown gradient norm mode {mode!r}")


def hgi_block_weight(block: AttentionTrace, mode: GradNormMode = "pooled") -> np.ndarray:
    """(1/H) * sum_h ||dY1/dA_h|| * A_h, per window: [num_windows, N, N]."""
    norms = head_gradient_norms(block, mode)
    weights = _as_numpy(block.weights)
    if mode == "pooled":
        weighted = weights * norms[None, :, None, None]
    else:
        weighted = weights * norms[:, :, None, None]
    return weighted.mean(axis=1)


def sam_block_weight(block: AttentionTrace) -> np.ndarray:
    return _as_numpy(block.weights).mean(axis=1)


def query_average(weights: np.ndarray) -> np.ndarray:
    """Column mean over queries: attention received by each key token, [num_windows, N]."""
    return np.asarray(weights, dtype=np.float64).mean(axis=-2)


# --- Layer composition ---

def _saliency_to_grid(saliency: np.ndarray, block: AttentionTrace) -> np.ndarray:
    """Per-window key saliency -> full token grid, reverse-shifted for shifted blocks."""
    windows = torch.from_numpy(np.ascontiguousarray(saliency)).unsqueeze(-1)
    grid = window_reverse(windows, block.window_size, block.grid_size, block.grid_size)
    grid = reverse_shift(grid, block.shift_size)
    return grid[0, :, :, 0].numpy()


def layer_map(regular: AttentionTrace, shifted: AttentionTrace,
              block_weight: Callable[[AttentionTrace], np.ndarray] = sam_block_weight,
              pair_index: int = 0) -> BlockMap:
    """WR(W_i) * RS(WR(W_{i+1})) at token resolution."""
    if (regular.layer_index != shifted.layer_index or regular.shifted or not shifted.shifted
            or shifted.block_index != regular.block_index + 1):
        raise UsageError(
            f"blocks {regular.block_index} and {shifted.block_index} are not a regular/shifted pair of one layer")
    first = _saliency_to_grid(query_average(block_weight(regular)), regular)
    second = _saliency_to_grid(query_average(block_weight(shifted)), shifted)
    return BlockMap(values=first * second, layer_index=regular.layer_index, block_pair_index=pair_index)


def layer_aggregate(blocks: Sequence[AttentionTrace],
                    block_weight: Callable[[AttentionTrace], np.ndarray] = sam_block_weight) -> BlockMap:
    """Mean of the depth/2 pair maps of one layer."""
    if not blocks or len(blocks) % 2:
        raise ConfigError(f"a layer needs an even number of blocks, got {len(blocks)}")
    layers = {block.layer_index for block in blocks}
    if len(layers) != 1:
        raise UsageError(f"blocks from several layers given: {sorted(layers)}")
    ordered = sorted(blocks, key=lambda b: b.block_index)
    pair_maps = [layer_map(ordered[i], ordered[i + 1], block_weight, pair_index=i // 2)
                 for i in range(0, len(ordered), 2)]
    values = np.mean([m.values for m in pair_maps], axis=0)
    return BlockMap(values=values, layer_index=ordered[0].layer_index)


def bilinear_resize(values: np.ndarray, side: int) -> np.ndarray:
    """Bilinear resampling with corner alignment: corner pixel centres map onto each other."""
    values = np.asarray(values, dtype=np.float64)
    if values.shape == (side, side):
        return values.copy()
    grid = torch.from_numpy(np.ascontiguousarray(values))[None, None]
    return F.interpolate(grid, size=(side, side), mode="bilinear", align_corners=True)[0, 0].numpy()


def layer_to_image(block_map: BlockMap, side: int) -> LayerMap:
    return LayerMap(values=bilinear_resize(block_map.values, side), layer_index=block_map.layer_index)


def fuse(maps: Iterable[LayerMap], layers_used: Sequence[int], method: str = "hgi-sam") -> FusedMap:
    """Elementwise product of the selected layer maps, then max-normalised."""
    if not layers_used:
        raise UsageError("at least one layer must be fused")
    by_layer = {m.layer_index: m for m in maps}
    missing = [layer for layer in layers_used if layer not in by_layer]
    if missing:
        raise UsageError(f"no map for layers {missing}")
    fused = np.ones_like(by_layer[layers_used[0]].values, dtype=np.float64)
    for layer in layers_used:
        fused = fused * by_layer[layer].values
    values, peak = max_normalize(fused)
    return FusedMap(values=values, method=method, layers_used=tuple(layers_used), norm_max=peak)


# --- High level ---

def block_weight_for(method: str, norm_mode: GradNormMode = "pooled"):
    if method == "hgi-sam":
        return lambda block: hgi_block_weight(block, norm_mode)
    if method in ("sam-binary", "sam-multilabel"):
        return sam_block_weight
    raise UsageError(f"method {method!r} has no attention block weighting")


def extract_layer_maps(trace: Sequence[AttentionTrace], side: int, method: str,
                       norm_mode: GradNormMode = "pooled") -> Dict[int, LayerMap]:
    weight = block_weight_for(method, norm_mode)
    by_layer: Dict[int, List[AttentionTrace]] = {}
    for block in trace:
        by_layer.setdefault(block.layer_index, []).append(block)
    return {layer: layer_to_image(layer_aggregate(blocks, weight), side)
            for layer, blocks in sorted(by_layer.items())}


def saliency_map(model, model_input, method: str, layers_used: Optional[Sequence[int]] = None,
                 norm_mode: GradNormMode = "pooled") -> Tuple[FusedMap, float]:
    """Fused attention map for one slice plus the classifier's positive probability."""
    layers_used = tuple(layers_used or DEFAULT_FUSED_LAYERS[method])
    pixels = model_input.as_tensor().to(dtype=next(model.parameters()).dtype)
    model.eval()
    if method == "hgi-sam":
        if model.config.num_classes != 2:
            raise UsageError("HGI-SAM needs a two-logit classifier")
        output = model(pixels, record=True)
        backward_positive_class(output)
    else:
        with torch.no_grad():
            output = model(pixels, record=True)
    probability = float(output.probabilities()[0].detach())
    maps = extract_layer_maps(output.trace, model_input.side, method, norm_mode)
    fused = fuse(maps.values(), layers_used, method=method)
    fused.source_ref = model_input.source_ref
    fused.layer_maps = {layer: m.values for layer, m in maps.items()}
    return fused, probability


def grad_cam_from_features(features: np.ndarray, grads: np.ndarray, side: int) -> FusedMap:
    """features/grads: [G, G, C]. ReLU(sum_c mean(grad_c) * F_c), upsampled and max-normalised."""
    features = _as_numpy(features)
    grads = _as_numpy(grads)
    channel_weights = grads.mean(axis=(0, 1))
    cam = np.maximum((features * channel_weights[None, None, :]).sum(axis=-1), 0.0)
    values, peak = max_normalize(bilinear_resize(cam, side))
    return FusedMap(values=np.clip(values, 0.0, 1.0), method="grad-cam", norm_max=peak)


def grad_cam_map(model, model_input) -> Tuple[FusedMap, float]:
    """Grad-CAM over the final block's token features of a two-logit classifier."""
    if model.config.num_classes != 2:
        raise UsageError("Grad-CAM needs a two-logit classifier")
    model.eval()
    pixels = model_input.as_tensor().to(dtype=next(model.parameters()).dtype)
    output = model(pixels)
    (grads,) = torch.autograd.grad(output.y1.sum(), [output.features])
    fused = grad_cam_from_features(output.features[0], grads[0], model_input.side)
    fused.source_ref = model_input.source_ref
    return fused, float(output.probabilities()[0].detach())


def save_fused_map(fused: FusedMap, file_path) -> str:
    return save_array_with_sidecar(fused.values.astype(np.float32), file_path, {
        "method": fused.method,
        "layers_used": list(fused.layers_used),
        "source_ref": list(fused.source_ref) if fused.source_ref else None,
        "norm_max": fused.norm_max,
        **fused.extras,
    })


def save_layer_maps(fused: FusedMap, directory, slice_id: str) -> List[str]:
    """One `<slice_id>_layer<i>.arr` per aggregated layer, for layer-by-layer inspection."""
    return [save_array_with_sidecar(values.astype(np.float32), Path(directory) / f"{slice_id}_layer{layer}.arr", {
        "method": fused.method,
        "layer_index": layer,
        "source_ref": list(fused.source_ref) if fused.source_ref else None,
    }) for layer, values in sorted(fused.layer_maps.items())]
