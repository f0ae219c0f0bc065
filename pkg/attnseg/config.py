import os
from pathlib import Path
from typing import List, Literal, Optional, Tuple

import yaml
from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .errors import ConfigError

load_dotenv()

DATA_ROOT = os.getenv("ATTNSEG_DATA_ROOT", "./data")
OUTPUT_DIR = os.getenv("ATTNSEG_OUTPUT_DIR", "./attnseg_runs")
LOG_LEVEL = os.getenv("ATTNSEG_LOG_LEVEL", "INFO")
NUM_WORKERS = int(os.getenv("ATTNSEG_NUM_WORKERS", "1"))

TrainMode = Literal["binary_one_logit", "binary_two_logit", "multi_label", "unet"]
Method = Literal["hgi-sam", "sam-binary", "sam-multilabel", "grad-cam", "unet"]
GradNormMode = Literal["pooled", "per_window"]


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class SwinConfig(_Section):
    """Hierarchical windowed-attention classifier geometry."""

    patch_size: int = Field(4, gt=0)
    window_size: int = Field(12, gt=0)
    embed_dim: int = Field(128, gt=0)
    depths: Tuple[int, ...] = (2, 2, 18, 2)
    num_heads: Tuple[int, ...] = (4, 8, 16, 32)
    num_classes: int = Field(2, gt=0)
    input_side: int = Field(384, gt=0)
    in_chans: int = 3
    mlp_ratio: float = 4.0
    drop_rate: float = 0.0
    drop_path_rate: float = 0.0

    @classmethod
    def swin_base(cls, **overrides):
        return cls(**overrides)

    @classmethod
    def desk_scale(cls, **overrides):
        values = dict(embed_dim=16, depths=(2, 2, 2, 2), num_heads=(2, 2, 4, 4),
                      window_size=4, input_side=128)
        values.update(overrides)
        return cls(**values)

    @model_validator(mode="after")
    def _check_geometry(self):
        if len(self.depths) != len(self.num_heads):
            raise ValueError("depths and num_heads must have the same length")
        for depth in self.depths:
            if depth <= 0 or depth % 2:
                raise ValueError(f"every depth must be a positive even number, got {self.depths}")
        if self.input_side % self.patch_size:
            raise ValueError(f"input_side {self.input_side} not divisible by patch_size {self.patch_size}")
        grid = self.input_side // self.patch_size
        for layer, heads in enumerate(self.num_heads):
            dim = self.embed_dim * 2 ** layer
            if heads <= 0 or dim % heads:
                raise ValueError(f"layer {layer + 1}: embed dim {dim} not divisible by {heads} heads")
            if layer and grid % 2:
                raise ValueError(f"layer {layer + 1}: odd token grid {grid} cannot be merged")
            if layer:
                grid //= 2
            window = min(self.window_size, grid)
            if grid % window:
                raise ValueError(f"layer {layer + 1}: token grid {grid} not divisible by window {window}")
        return self

    @property
    def num_layers(self) -> int:
        return len(self.depths)

    @property
    def positive_index(self) -> int:
        """Logit whose score drives the attention gradients."""
        return 1 if self.num_classes == 2 else 0

    @property
    def side_multiple(self) -> int:
        return self.patch_size * self.window_size * 2

    def layer_dims(self) -> List[int]:
        return [self.embed_dim * 2 ** i for i in range(self.num_layers)]

    def layer_grids(self) -> List[int]:
        grid = self.input_side // self.patch_size
        return [grid // 2 ** i for i in range(self.num_layers)]

    def layer_windows(self) -> List[int]:
        # grids not larger than the window use one window covering the grid
        return [min(self.window_size, grid) for grid in self.layer_grids()]

    def layer_shifts(self) -> List[int]:
        return [0 if grid <= self.window_size else self.window_size // 2
                for grid in self.layer_grids()]


class UNetConfig(_Section):
    hierarchies: int = Field(4, gt=0)
    base_channels: int = Field(16, gt=0)
    in_channels: int = 3
    out_channels: int = 1

    def check_side(self, side: int):
        if side % (2 ** self.hierarchies):
            raise ConfigError(f"input side {side} not divisible by 2^{self.hierarchies}")


class AugmentParams(_Section):
    flip_prob: float = Field(0.5, ge=0.0, le=1.0)
    rotation_range: float = Field(15.0, ge=0.0)
    noise_sigma: float = Field(0.01, ge=0.0)

    @classmethod
    def disabled(cls):
        return cls(flip_prob=0.0, rotation_range=0.0, noise_sigma=0.0)


DEFAULT_LEARNING_RATES = {
    "binary_one_logit": 1e-5,
    "multi_label": 1e-5,
    "binary_two_logit": 1e-6,
    "unet": 1e-3,
}
DESK_LEARNING_RATES = {
    "binary_one_logit": 1e-3,
    "multi_label": 1e-3,
    "binary_two_logit": 2e-4,
    "unet": 1e-3,
}


class TrainConfig(_Section):
    mode: TrainMode = "binary_one_logit"
    learning_rate: Optional[float] = Field(None, gt=0.0)
    weight_decay: float = Field(0.05, ge=0.0)
    batch_size: int = Field(8, gt=0)
    max_epochs: int = Field(20, ge=0)
    patience: int = Field(3, ge=1)
    focal_gamma: float = Field(2.0, ge=0.0)
    seed: int = 0
    augmentation: AugmentParams = AugmentParams()
    imbalance: Literal["focal_loss", "inverse_frequency_sampling"] = "focal_loss"
    val_fraction: float = Field(0.1, gt=0.0, lt=1.0)

    @classmethod
    def for_mode(cls, mode, **overrides):
        """Full-scale defaults for a training mode."""
        values = dict(mode=mode)
        if mode in ("binary_two_logit", "unet"):
            values["imbalance"] = "inverse_frequency_sampling"
        values.update(overrides)
        return cls(**values)

    @classmethod
    def desk_scale(cls, mode, **overrides):
        values = dict(learning_rate=DESK_LEARNING_RATES[mode], batch_size=16, max_epochs=20)
        if mode == "unet":
            values["max_epochs"] = 30
        values.update(overrides)
        return cls.for_mode(mode, **values)

    @property
    def resolved_learning_rate(self) -> float:
        return self.learning_rate or DEFAULT_LEARNING_RATES[self.mode]


class SynthConfig(_Section):
    n_slices: int = Field(200, ge=0)
    positive_fraction: float = Field(0.3, ge=0.0, le=1.0)
    side: int = Field(128, gt=15)
    blob_count_range: Tuple[int, int] = (1, 3)
    blob_intensity_range: Tuple[float, float] = (35.0, 60.0)
    blob_sigma_range: Tuple[float, float] = (2.5, 5.0)
    noise_sigma: float = Field(5.0, ge=0.0)
    slices_per_study: int = Field(4, gt=0)

    @model_validator(mode="after")
    def _check_ranges(self):
        lo, hi = self.blob_count_range
        if lo < 1 or hi < lo:
            raise ValueError(f"blob_count_range must satisfy 1 <= lo <= hi, got {self.blob_count_range}")
        if self.blob_sigma_range[0] < 1.0 or self.blob_sigma_range[1] < self.blob_sigma_range[0]:
            raise ValueError(f"invalid blob_sigma_range {self.blob_sigma_range}")
        if self.blob_intensity_range[1] < self.blob_intensity_range[0]:
            raise ValueError(f"invalid blob_intensity_range {self.blob_intensity_range}")
        return self


class ThresholdGrid(_Section):
    start: float = Field(0.05, ge=0.0)
    stop: float = Field(0.95, le=1.0)
    step: float = Field(0.05, gt=0.0)

    @model_validator(mode="after")
    def _check_order(self):
        if not self.start < self.stop:
            raise ValueError(f"grid start {self.start} must be below stop {self.stop}")
        return self


class SegmentConfig(_Section):
    grid: ThresholdGrid = ThresholdGrid()
    min_pixels: int = Field(10, ge=0)
    min_pixels_all_methods: bool = False
    unet_threshold: float = Field(0.5, ge=0.0, le=1.0)
    gate_by_brain: bool = True
    fused_layers: Optional[Tuple[int, ...]] = None
    norm_mode: GradNormMode = "pooled"
    save_layer_maps: bool = False


class EvalConfig(_Section):
    k: int = Field(5, ge=2)
    unet_auc_score: Literal["max_prob", "foreground_fraction"] = "max_prob"
    reference_method: str = "hgi-sam"


class RunConfig(_Section):
    data_root: str = DATA_ROOT
    output_dir: str = OUTPUT_DIR
    method: Method = "hgi-sam"
    seed: int = 0
    desk_scale: bool = True
    swin: Optional[SwinConfig] = None
    unet: Optional[UNetConfig] = None
    train: Optional[TrainConfig] = None
    synth: SynthConfig = SynthConfig()
    segment: SegmentConfig = SegmentConfig()
    evaluate: EvalConfig = EvalConfig()
    num_workers: int = Field(NUM_WORKERS, ge=1)
    # caps the epoch budget of every training mode when set
    epochs: Optional[int] = Field(None, ge=0)

    @model_validator(mode="after")
    def _fill_method_sections(self):
        # frozen model: sections are filled through object.__setattr__
        if self.swin is None and self.method != "unet":
            swin = SwinConfig.desk_scale() if self.desk_scale else SwinConfig.swin_base()
            object.__setattr__(self, "swin", swin)
        if self.unet is None and self.method == "unet":
            object.__setattr__(self, "unet", UNetConfig())
        return self

    def swin_for(self, num_classes: int) -> SwinConfig:
        base = self.swin or (SwinConfig.desk_scale() if self.desk_scale else SwinConfig.swin_base())
        return base.model_copy(update={"num_classes": num_classes})

    def train_for(self, mode) -> TrainConfig:
        if self.train is not None and self.train.mode == mode:
            config = self.train
        elif self.desk_scale:
            config = TrainConfig.desk_scale(mode, seed=self.seed)
        else:
            config = TrainConfig.for_mode(mode, seed=self.seed)
        if self.epochs is not None:
            config = config.model_copy(update={"max_epochs": min(config.max_epochs, self.epochs)})
        return config


def _deep_update(base: dict, overrides: dict) -> dict:
    merged = dict(base)
    for key, value in overrides.items():
        if value is None:
            continue
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _deep_update(merged[key], value)
        else:
            merged[key] = value
    return merged


def load_run_config(config_path=None, overrides: Optional[dict] = None) -> RunConfig:
    """YAML file values first, then flag overrides (flags win)."""
    values = {}
    if config_path:
        path = Path(config_path)
        if not path.exists():
            raise ConfigError(f"Config file not found: {path}")
        with open(path) as f:
            values = yaml.safe_load(f) or {}
        if not isinstance(values, dict):
            raise ConfigError(f"Config file {path} must contain a mapping")
    values = _deep_update(values, overrides or {})
    try:
        return RunConfig(**values)
    except ValidationError as e:
        raise ConfigError(str(e)) from e


def build_section(model_cls, **values):
    """Builds a config section, converting validation failures to ConfigError."""
    try:
        return model_cls(**values)
    except ValidationError as e:
        raise ConfigError(str(e)) from e
