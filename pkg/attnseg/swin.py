"""Hierarchical shifted-window attention classifier with attention recording.

Tensors inside the model are channel-last token grids, [B, H, W, C].
"""
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import torch
import torch.nn as nn

from .config import SwinConfig
from .errors import ConfigError, InputError, StateError


# --- Window helpers ---

def window_partition(x: torch.Tensor, window_size: int) -> torch.Tensor:
    """[B, H, W, C] -> [B * num_windows, window_size**2, C], windows in row-major order."""
    B, H, W, C = x.shape
    if H % window_size or W % window_size:
        raise ConfigError(f"token grid {H}x{W} not divisible by window size {window_size}")
    x = x.view(B, H // window_size, window_size, W // window_size, window_size, C)
    windows = x.permute(0, 1, 3, 2, 4, 5).contiguous()
    return windows.view(-1, window_size * window_size, C)


def window_reverse(windows: torch.Tensor, window_size: int, H: int, W: int) -> torch.Tensor:
    """Inverse of window_partition: [B * num_windows, window_size**2, C] -> [B, H, W, C]."""
    if H % window_size or W % window_size:
        raise ConfigError(f"token grid {H}x{W} not divisible by window size {window_size}")
    C = windows.shape[-1]
    x = windows.reshape(-1, H // window_size, W // window_size, window_size, window_size, C)
    return x.permute(0, 1, 3, 2, 4, 5).contiguous().view(-1, H, W, C)


def cyclic_shift(x: torch.Tensor, offset: int) -> torch.Tensor:
    """Torus roll of a [B, H, W, C] grid by (-offset, -offset)."""
    if offset == 0:
        return x
    return torch.roll(x, shifts=(-offset, -offset), dims=(1, 2))


def reverse_shift(x: torch.Tensor, offset: int) -> torch.Tensor:
    if offset == 0:
        return x
    return torch.roll(x, shifts=(offset, offset), dims=(1, 2))


def relative_position_index(window_size: int) -> torch.Tensor:
    """[N, N] index into a (2w-1)**2 bias table for every (query, key) pair in a window."""
    coords = torch.stack(torch.meshgrid(torch.arange(window_size), torch.arange(window_size), indexing="ij"))
    coords = coords.flatten(1)
    relative = (coords[:, :, None] - coords[:, None, :]).permute(1, 2, 0).contiguous()
    relative[:, :, 0] += window_size - 1
    relative[:, :, 1] += window_size - 1
    relative[:, :, 0] *= 2 * window_size - 1
    return relative.sum(-1)


def shifted_window_mask(grid_size: int, window_size: int, shift_size: int) -> Optional[torch.Tensor]:
    """[num_windows, N, N] additive mask keeping attention inside each pre-shift region."""
    if shift_size == 0:
        return None
    img_mask = torch.zeros((1, grid_size, grid_size, 1))
    count = 0
    spans = ((0, -window_size), (-window_size, -shift_size), (-shift_size, None))
    for h in spans:
        for w in spans:
            img_mask[:, h[0]:h[1], w[0]:w[1], :] = count
            count += 1
    mask_windows = window_partition(img_mask, window_size).squeeze(-1)
    mask = mask_windows.unsqueeze(1) - mask_windows.unsqueeze(2)
    return mask.masked_fill(mask != 0, -100.0).masked_fill(mask == 0, 0.0)


# --- Recorded attention ---

@dataclass
class AttentionTrace:
    block_index: int
    layer_index: int  # 1-based
    shifted: bool
    window_size: int
    grid_size: int
    shift_size: int
    weights: torch.Tensor  # [num_windows, H, N, N], still attached to the graph
    grads: Optional[torch.Tensor] = None

    @property
    def num_heads(self) -> int:
        return self.weights.shape[1]


@dataclass
class ClassifierOutput:
    logits: torch.Tensor  # [B, num_classes]
    y1: torch.Tensor  # [B], positive-class score
    trace: List[AttentionTrace] = field(default_factory=list)
    features: Optional[torch.Tensor] = None  # final block output, [B, G, G, C]

    def probabilities(self) -> torch.Tensor:
        """Positive-class probability per sample."""
        if self.logits.shape[1] == 2:
            return torch.softmax(self.logits, dim=1)[:, 1]
        return torch.sigmoid(self.y1)


class _Recorder:
    def __init__(self, perturbations: Optional[Dict[int, torch.Tensor]] = None):
        self.entries: List[AttentionTrace] = []
        self.perturbations = perturbations or {}


# --- Modules ---

class DropPath(nn.Module):
    def __init__(self, drop_prob: float = 0.0):
        super().__init__()
        self.drop_prob = drop_prob

    def forward(self, x):
        if self.drop_prob == 0.0 or not self.training:
            return x
        keep = 1.0 - self.drop_prob
        shape = (x.shape[0],) + (1,) * (x.ndim - 1)
        return x * x.new_empty(shape).bernoulli_(keep) / keep


class PatchEmbed(nn.Module):
    """Non-overlapping patch projection: [B, 3, S, S] -> [B, S/p, S/p, C]."""

    def __init__(self, patch_size: int, in_chans: int, embed_dim: int):
        super().__init__()
        self.patch_size = patch_size
        self.proj = nn.Conv2d(in_chans, embed_dim, kernel_size=patch_size, stride=patch_size)
        self.norm = nn.LayerNorm(embed_dim)

    def forward(self, x):
        if x.shape[-1] % self.patch_size or x.shape[-2] % self.patch_size:
            raise ConfigError(f"input side {tuple(x.shape[-2:])} not divisible by patch size {self.patch_size}")
        return self.norm(self.proj(x).permute(0, 2, 3, 1))


class WindowAttention(nn.Module):
    """Multi-head self attention inside windows with a learned relative position bias."""

    def __init__(self, dim: int, num_heads: int, window_size: int, attn_drop: float = 0.0,
                 proj_drop: float = 0.0):
        super().__init__()
        self.dim = dim
        self.num_heads = num_heads
        self.window_size = window_size
        self.head_dim = dim // num_heads
        self.scale = self.head_dim ** -0.5
        self.relative_position_bias_table = nn.Parameter(torch.zeros((2 * window_size - 1) ** 2, num_heads))
        self.register_buffer("relative_position_index", relative_position_index(window_size), persistent=False)
        self.qkv = nn.Linear(dim, dim * 3)
        self.attn_drop = nn.Dropout(attn_drop)
        self.proj = nn.Linear(dim, dim)
        self.proj_drop = nn.Dropout(proj_drop)
        nn.init.trunc_normal_(self.relative_position_bias_table, std=0.02)

    def relative_bias(self) -> torch.Tensor:
        """[H, N, N] bias B looked up from the table."""
        N = self.window_size ** 2
        bias = self.relative_position_bias_table[self.relative_position_index.view(-1)].view(N, N, -1)
        return bias.permute(2, 0, 1).contiguous()

    def forward(self, x, mask: Optional[torch.Tensor] = None, attn_offset: Optional[torch.Tensor] = None):
        """x: [B * num_windows, N, C]. Returns (output, attention weights [B * num_windows, H, N, N])."""
        B_, N, C = x.shape
        qkv = self.qkv(x).reshape(B_, N, 3, self.num_heads, self.head_dim).permute(2, 0, 3, 1, 4)
        q, k, v = qkv.unbind(0)
        logits = (q * self.scale) @ k.transpose(-2, -1) + self.relative_bias().unsqueeze(0)
        if mask is not None:
            num_windows = mask.shape[0]
            logits = logits.view(-1, num_windows, self.num_heads, N, N) + mask.unsqueeze(1).unsqueeze(0)
            logits = logits.view(-1, self.num_heads, N, N)
        attn = torch.softmax(logits, dim=-1)
        weights = attn
        if attn_offset is not None:
            weights = attn + attn_offset
        out = self.attn_drop(weights) @ v
        out = out.transpose(1, 2).reshape(B_, N, C)
        return self.proj_drop(self.proj(out)), weights


class SwinBlock(nn.Module):
    def __init__(self, dim, num_heads, grid_size, window_size, shift_size, block_index, layer_index,
                 shifted=False, mlp_ratio=4.0, drop=0.0, drop_path=0.0):
        super().__init__()
        self.grid_size = grid_size
        self.window_size = window_size
        self.shift_size = shift_size
        self.block_index = block_index
        self.layer_index = layer_index
        self.shifted = shifted
        self.norm1 = nn.LayerNorm(dim)
        self.attn = WindowAttention(dim, num_heads, window_size, attn_drop=drop, proj_drop=drop)
        self.drop_path = DropPath(drop_path)
        self.norm2 = nn.LayerNorm(dim)
        hidden = int(dim * mlp_ratio)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Dropout(drop),
                                 nn.Linear(hidden, dim), nn.Dropout(drop))
        self.register_buffer("attn_mask", shifted_window_mask(grid_size, window_size, shift_size),
                             persistent=False)

    def forward(self, x, recorder: Optional[_Recorder] = None):
        B, H, W, C = x.shape
        if H != self.grid_size or W != self.grid_size:
            raise InputError(f"block {self.block_index}: expected {self.grid_size}x{self.grid_size} tokens, got {H}x{W}")
        shortcut = x
        x = cyclic_shift(self.norm1(x), self.shift_size)
        windows = window_partition(x, self.window_size)
        offset = recorder.perturbations.get(self.block_index) if recorder else None
        attn_windows, weights = self.attn(windows, mask=self.attn_mask, attn_offset=offset)
        if recorder is not None:
            recorder.entries.append(AttentionTrace(
                block_index=self.block_index,
                layer_index=self.layer_index,
                shifted=self.shifted,
                window_size=self.window_size,
                grid_size=self.grid_size,
                shift_size=self.shift_size,
                weights=weights,
            ))
        x = reverse_shift(window_reverse(attn_windows, self.window_size, H, W), self.shift_size)
        x = shortcut + self.drop_path(x)
        return x + self.drop_path(self.mlp(self.norm2(x)))


class PatchMerging(nn.Module):
    """2x2 neighbourhood -> one token: [B, G, G, C] -> [B, G/2, G/2, 2C]."""

    def __init__(self, dim: int):
        super().__init__()
        self.norm = nn.LayerNorm(4 * dim)
        self.reduction = nn.Linear(4 * dim, 2 * dim, bias=False)

    def forward(self, x):
        B, H, W, C = x.shape
        if H % 2 or W % 2:
            raise ConfigError(f"cannot merge an odd token grid {H}x{W}")
        x = x.reshape(B, H // 2, 2, W // 2, 2, C).permute(0, 1, 3, 4, 2, 5).flatten(3)
        return self.reduction(self.norm(x))


class SwinStage(nn.Module):
    def __init__(self, blocks: List[SwinBlock], downsample: Optional[nn.Module]):
        super().__init__()
        self.downsample = downsample if downsample is not None else nn.Identity()
        self.blocks = nn.ModuleList(blocks)

    def forward(self, x, recorder=None):
        x = self.downsample(x)
        for block in self.blocks:
            x = block(x, recorder)
        return x


class SwinClassifier(nn.Module):
    def __init__(self, config: SwinConfig):
        super().__init__()
        self.config = config
        self.patch_embed = PatchEmbed(config.patch_size, config.in_chans, config.embed_dim)
        self.pos_drop = nn.Dropout(config.drop_rate)
        dims = config.layer_dims()
        grids = config.layer_grids()
        windows = config.layer_windows()
        shifts = config.layer_shifts()
        drop_path = torch.linspace(0, config.drop_path_rate, sum(config.depths)).tolist()

        stages, block_index = [], 0
        for layer, depth in enumerate(config.depths):
            blocks = []
            for i in range(depth):
                blocks.append(SwinBlock(
                    dim=dims[layer],
                    num_heads=config.num_heads[layer],
                    grid_size=grids[layer],
                    window_size=windows[layer],
                    shift_size=0 if i % 2 == 0 else shifts[layer],
                    block_index=block_index,
                    layer_index=layer + 1,
                    shifted=i % 2 == 1,
                    mlp_ratio=config.mlp_ratio,
                    drop=config.drop_rate,
                    drop_path=drop_path[block_index],
                ))
                block_index += 1
            downsample = PatchMerging(dims[layer - 1]) if layer else None
            stages.append(SwinStage(blocks, downsample))
        self.stages = nn.ModuleList(stages)
        self.norm = nn.LayerNorm(dims[-1])
        self.head = nn.Linear(dims[-1], config.num_classes)
        self.apply(self._init_weights)

    @staticmethod
    def _init_weights(module):
        if isinstance(module, nn.Linear):
            nn.init.trunc_normal_(module.weight, std=0.02)
            if module.bias is not None:
                nn.init.zeros_(module.bias)
        elif isinstance(module, nn.LayerNorm):
            nn.init.ones_(module.weight)
            nn.init.zeros_(module.bias)

    def reset_head(self, num_classes: int):
        """Replaces the classifier head with a freshly initialised one."""
        self.head = nn.Linear(self.head.in_features, num_classes)
        self._init_weights(self.head)
        self.config = self.config.model_copy(update={"num_classes": num_classes})

    def forward_features(self, pixels, recorder=None):
        x = self.pos_drop(self.patch_embed(pixels))
        for stage in self.stages:
            x = stage(x, recorder)
        return x

    def forward(self, pixels, record: bool = False, perturbations: Optional[Dict[int, torch.Tensor]] = None):
        """pixels: [B, 3, S, S] -> ClassifierOutput."""
        side = self.config.input_side
        if pixels.ndim != 4 or tuple(pixels.shape[1:]) != (self.config.in_chans, side, side):
            raise InputError(f"expected input [B, {self.config.in_chans}, {side}, {side}], got {tuple(pixels.shape)}")
        if record and pixels.shape[0] != 1:
            raise InputError("attention recording works on one slice at a time")
        recorder = _Recorder(perturbations) if (record or perturbations) else None
        features = self.forward_features(pixels, recorder)
        pooled = self.norm(features).mean(dim=(1, 2))
        logits = self.head(pooled)
        return ClassifierOutput(
            logits=logits,
            y1=logits[:, self.config.positive_index],
            trace=recorder.entries if record else [],
            features=features,
        )


def forward_classify(model: SwinClassifier, model_input, record: bool = False) -> ClassifierOutput:
    """Runs one ModelInput through the classifier."""
    pixels = model_input.as_tensor().to(dtype=next(model.parameters()).dtype)
    if record:
        return model(pixels, record=True)
    with torch.no_grad():
        return model(pixels)


def backward_positive_class(output: ClassifierOutput, retain_graph: bool = False) -> List[AttentionTrace]:
    """Fills trace[b].grads with dY1/dA_b. Parameter .grad fields are left untouched."""
    if not output.trace:
        raise StateError("no recorded attention trace; run the forward pass with record=True")
    weights = [entry.weights for entry in output.trace]
    if not output.y1.requires_grad:
        raise StateError("positive-class score is not attached to a graph")
    grads = torch.autograd.grad(output.y1.sum(), weights, retain_graph=retain_graph, allow_unused=True)
    for entry, grad in zip(output.trace, grads):
        entry.grads = torch.zeros_like(entry.weights) if grad is None else grad.detach()
    return output.trace


def count_windows(config: SwinConfig) -> List[int]:
    return [(grid // window) ** 2 for grid, window in zip(config.layer_grids(), config.layer_windows())]


def new_swin(config: SwinConfig, seed: Optional[int] = None) -> SwinClassifier:
    if seed is not None:
        torch.manual_seed(seed)
    return SwinClassifier(config)


def logits_to_detection(logits: torch.Tensor, mode: str) -> torch.Tensor:
    """Positive probability per sample for each training mode's head layout."""
    if mode == "binary_two_logit":
        return torch.softmax(logits, dim=1)[:, 1]
    return torch.sigmoid(logits[:, 0])
