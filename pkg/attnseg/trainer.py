"""Training loops for the classifier modes and the U-Net: losses, sampling, augmentation, early stopping."""
import copy
import csv
import logging
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from scipy import ndimage
from sklearn.model_selection import GroupShuffleSplit
from torch.utils.data import DataLoader, Dataset
from tqdm import tqdm

from .checkpoints import load_backbone, load_checkpoint
from .config import AugmentParams, SwinConfig, TrainConfig, UNetConfig
from .errors import ConfigError, TrainingDivergedError, UsageError
from .imaging_io import SliceCatalog, prepare_input, resize_mask
from .shared_constants import LABEL_COLUMNS, MIN_DETECTION_PIXELS
from .swin import SwinClassifier, logits_to_detection, new_swin
from .unet import UNet, dice_ce_loss, new_unet

logger = logging.getLogger(__name__)

PROB_CLAMP = 1e-7
MODE_NUM_CLASSES = {
    "binary_one_logit": 1,
    "binary_two_logit": 2,
    "multi_label": len(LABEL_COLUMNS),
}
HISTORY_COLUMNS = ("epoch", "train_loss", "val_loss", "val_accuracy")


# --- Losses ---

def focal_ce_loss(logits: torch.Tensor, target: torch.Tensor, gamma: float = 2.0,
                  mode: str = "softmax") -> torch.Tensor:
    """-(1 - p_t)^gamma * ln(p_t), averaged; gamma = 0 is plain cross-entropy.

    softmax: logits [B, C], target class indices [B].
    logistic: logits and target flags of equal shape, one binary problem per entry.
    """
    if mode == "softmax":
        log_p = F.log_softmax(logits, dim=-1)
        log_pt = log_p.gather(-1, target.long().unsqueeze(-1)).squeeze(-1)
    elif mode == "logistic":
        if logits.shape != target.shape:
            raise UsageError(f"logits {tuple(logits.shape)} and flags {tuple(target.shape)} differ in shape")
        log_pt = -F.binary_cross_entropy_with_logits(logits, target.to(logits.dtype), reduction="none")
    else:
        raise UsageError(f"unknown focal loss mode {mode!r}")
    log_pt = log_pt.clamp(min=math.log(PROB_CLAMP))
    p_t = log_pt.exp()
    return (-((1.0 - p_t) ** gamma) * log_pt).mean()


# --- Imbalance ---

class InverseFrequencySampler:
    """Draws sample indices with P(class c) proportional to 1 / freq(c)."""

    def __init__(self, labels: Sequence[int], seed: int = 0):
        labels = np.asarray(labels).astype(int)
        classes, counts = np.unique(labels, return_counts=True)
        if len(classes) < 2:
            raise ConfigError(f"inverse-frequency sampling needs both classes, only {classes.tolist()} present")
        freq = dict(zip(classes.tolist(), counts.tolist()))
        self.labels = labels
        self.seed = seed
        self.weights = np.array([1.0 / freq[label] for label in labels])
        self.probabilities = self.weights / self.weights.sum()

    def draw(self, n: int, epoch: int = 0) -> np.ndarray:
        rng = np.random.default_rng([self.seed, epoch])
        return rng.choice(len(self.labels), size=n, replace=True, p=self.probabilities)


# --- Augmentation ---

def augment(pixels: np.ndarray, masks: Sequence[Optional[np.ndarray]], params: AugmentParams,
            rng: np.random.Generator) -> Tuple[np.ndarray, List[Optional[np.ndarray]]]:
    """Same flip and rotation for image and masks; noise on the image only, then clipped to [0, 1].

    pixels: (C, S, S); masks: (S, S) grids or None.
    """
    pixels = np.asarray(pixels, dtype=np.float32)
    masks = [None if m is None else np.asarray(m) for m in masks]
    if rng.random() < params.flip_prob:
        pixels = pixels[..., ::-1]
        masks = [None if m is None else m[..., ::-1] for m in masks]
    if params.rotation_range > 0:
        angle = rng.uniform(-params.rotation_range, params.rotation_range)
        pixels = ndimage.rotate(pixels, angle, axes=(2, 1), reshape=False, order=1, mode="constant", cval=0.0)
        masks = [None if m is None else
                 ndimage.rotate(m, angle, axes=(1, 0), reshape=False, order=0, mode="constant", cval=0)
                 for m in masks]
    if params.noise_sigma > 0:
        pixels = pixels + rng.normal(0.0, params.noise_sigma, size=pixels.shape)
    pixels = np.clip(pixels, 0.0, 1.0).astype(np.float32)
    return np.ascontiguousarray(pixels), [None if m is None else np.ascontiguousarray(m) for m in masks]


# --- Data ---

class SliceDataset(Dataset):
    """Prepared slices of a catalog with per-mode targets; augmentation is seeded per (epoch, index)."""

    def __init__(self, catalog: SliceCatalog, side: int, mode: str, multiple: int,
                 augmentation: Optional[AugmentParams] = None, seed: int = 0):
        self.catalog = catalog
        self.ids = catalog.ids
        self.side = side
        self.mode = mode
        self.multiple = multiple
        self.augmentation = augmentation
        self.seed = seed
        self.epoch = 0
        self._cache: Dict[int, Tuple[np.ndarray, Optional[np.ndarray], np.ndarray]] = {}

    def __len__(self) -> int:
        return len(self.ids)

    def set_epoch(self, epoch: int):
        self.epoch = epoch

    @property
    def detection_labels(self) -> List[int]:
        return [self.catalog.label(i).any_ich for i in self.ids]

    def _prepared(self, index: int):
        if index not in self._cache:
            ct_slice = self.catalog.load(self.ids[index])
            model_input = prepare_input(ct_slice, self.side, multiple=self.multiple)
            gt = None
            if ct_slice.gt_mask is not None:
                gt = resize_mask(ct_slice.gt_mask, self.side)
            elif self.mode == "unet":
                raise UsageError(f"slice {self.ids[index]} has no pixel mask; the U-Net needs masks")
            self._cache[index] = (model_input.pixels, gt, model_input.brain_mask)
        return self._cache[index]

    def _target(self, index: int, gt: Optional[np.ndarray]) -> torch.Tensor:
        label = self.catalog.label(self.ids[index])
        if self.mode == "binary_one_logit":
            return torch.tensor([float(label.any_ich)])
        if self.mode == "binary_two_logit":
            return torch.tensor(label.any_ich, dtype=torch.long)
        if self.mode == "multi_label":
            return torch.tensor(label.as_vector(), dtype=torch.float32)
        return torch.from_numpy(gt.astype(np.float32)).unsqueeze(0)

    def __getitem__(self, index: int):
        pixels, gt, brain = self._prepared(index)
        if self.augmentation is not None:
            rng = np.random.default_rng([self.seed, self.epoch, index])
            pixels, (gt, brain) = augment(pixels, [gt, brain], self.augmentation, rng)
        return {
            "pixels": torch.from_numpy(np.ascontiguousarray(pixels, dtype=np.float32)),
            "target": self._target(index, gt),
            "label": torch.tensor(self.catalog.label(self.ids[index]).any_ich, dtype=torch.long),
        }


def split_train_val(catalog: SliceCatalog, val_fraction: float = 0.1,
                    seed: int = 0) -> Tuple[SliceCatalog, SliceCatalog]:
    """Patient-grouped random split: no study contributes slices to both sides."""
    studies = sorted(catalog.studies())
    if len(studies) < 2:
        raise ConfigError(f"a validation split needs at least 2 studies, got {len(studies)}")
    ids = catalog.ids
    groups = [catalog.entry(i).study_id for i in ids]
    splitter = GroupShuffleSplit(n_splits=1, test_size=val_fraction, random_state=seed)
    train_idx, val_idx = next(splitter.split(ids, groups=groups))
    return catalog.subset(ids[i] for i in train_idx), catalog.subset(ids[i] for i in val_idx)


# --- Early stopping ---

class EarlyStopping:
    """Keeps the best parameters; signals a stop after `patience` epochs without improvement."""

    def __init__(self, patience: int = 3):
        if patience < 1:
            raise ConfigError(f"patience must be >= 1, got {patience}")
        self.patience = patience
        self.best_loss = math.inf
        self.best_epoch: Optional[int] = None
        self.best_state = None
        self.bad_epochs = 0

    def step(self, epoch: int, val_loss: float, model) -> bool:
        if val_loss < self.best_loss:
            self.best_loss = val_loss
            self.best_epoch = epoch
            self.best_state = copy.deepcopy(model.state_dict())
            self.bad_epochs = 0
            return False
        self.bad_epochs += 1
        return self.bad_epochs >= self.patience

    def restore(self, model):
        if self.best_state is not None:
            model.load_state_dict(self.best_state)
        return model


# --- Loops ---

@dataclass
class TrainResult:
    model: torch.nn.Module
    mode: str
    history: List[Dict[str, float]] = field(default_factory=list)
    best_epoch: Optional[int] = None
    best_val_loss: Optional[float] = None
    stopped_early: bool = False


def write_history(history: Sequence[Dict[str, float]], file_path) -> str:
    file_path = Path(file_path)
    file_path.parent.mkdir(parents=True, exist_ok=True)
    with open(file_path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=HISTORY_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for row in history:
            writer.writerow({key: row.get(key) for key in HISTORY_COLUMNS})
    return str(file_path)


def _epoch_order(dataset: SliceDataset, config: TrainConfig, epoch: int) -> List[int]:
    if config.imbalance == "inverse_frequency_sampling":
        sampler = InverseFrequencySampler(dataset.detection_labels, seed=config.seed)
        return sampler.draw(len(dataset), epoch).tolist()
    return np.random.default_rng([config.seed, epoch]).permutation(len(dataset)).tolist()


def _classifier_loss(model: SwinClassifier, batch, config: TrainConfig):
    logits = model(batch["pixels"]).logits
    gamma = config.focal_gamma if config.imbalance == "focal_loss" else 0.0
    if config.mode == "binary_two_logit":
        loss = focal_ce_loss(logits, batch["target"], gamma, mode="softmax")
    else:
        loss = focal_ce_loss(logits, batch["target"], gamma, mode="logistic")
    detected = logits_to_detection(logits, config.mode) >= 0.5
    return loss, detected


def _unet_loss(model: UNet, batch, config: TrainConfig):
    probabilities = model(batch["pixels"])
    loss = dice_ce_loss(probabilities, batch["target"])
    foreground = (probabilities >= 0.5).flatten(1).sum(dim=1)
    return loss, foreground >= MIN_DETECTION_PIXELS


def _fit(model, train_set: SliceDataset, val_set: SliceDataset, config: TrainConfig, loss_fn,
         history_path=None, progress: bool = True) -> TrainResult:
    if not len(train_set) or not len(val_set):
        raise UsageError("training and validation sets must be non-empty")
    optimizer = torch.optim.AdamW(model.parameters(), lr=config.resolved_learning_rate,
                                  weight_decay=config.weight_decay)
    stopper = EarlyStopping(config.patience)
    val_loader = DataLoader(val_set, batch_size=config.batch_size, shuffle=False)
    result = TrainResult(model=model, mode=config.mode)

    epochs = tqdm(range(1, config.max_epochs + 1), desc=f"train {config.mode}",
                  disable=not progress or not sys.stderr.isatty())
    for epoch in epochs:
        train_set.set_epoch(epoch)
        loader = DataLoader(train_set, batch_size=config.batch_size, sampler=_epoch_order(train_set, config, epoch))
        model.train()
        train_losses = []
        for batch in loader:
            loss, _ = loss_fn(model, batch, config)
            if not torch.isfinite(loss):
                raise TrainingDivergedError(f"{config.mode}: non-finite training loss at epoch {epoch}")
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            train_losses.append(float(loss.detach()) * len(batch["pixels"]))

        model.eval()
        val_loss, correct = 0.0, 0
        with torch.no_grad():
            for batch in val_loader:
                loss, detected = loss_fn(model, batch, config)
                val_loss += float(loss) * len(batch["pixels"])
                correct += int((detected.long() == batch["label"]).sum())
        val_loss /= len(val_set)
        if not math.isfinite(val_loss):
            raise TrainingDivergedError(f"{config.mode}: non-finite validation loss at epoch {epoch}")
        row = {"epoch": epoch, "train_loss": sum(train_losses) / len(train_set),
               "val_loss": val_loss, "val_accuracy": correct / len(val_set)}
        result.history.append(row)
        logger.info("%s epoch %d: train loss %.4f, val loss %.4f, val accuracy %.3f",
                    config.mode, epoch, row["train_loss"], val_loss, row["val_accuracy"])
        if stopper.step(epoch, val_loss, model):
            result.stopped_early = True
            logger.info("%s: early stop after epoch %d (best epoch %d)", config.mode, epoch, stopper.best_epoch)
            break

    stopper.restore(model)
    model.eval()
    result.best_epoch = stopper.best_epoch
    result.best_val_loss = stopper.best_loss if stopper.best_epoch is not None else None
    if history_path:
        write_history(result.history, history_path)
    return result


def train_classifier(train_catalog: SliceCatalog, val_catalog: SliceCatalog, swin_config: SwinConfig,
                     config: TrainConfig, init_model: Optional[SwinClassifier] = None,
                     history_path=None, progress: bool = True) -> TrainResult:
    """Trains one classifier mode; returns the best-validation-loss parameters."""
    if config.mode not in MODE_NUM_CLASSES:
        raise UsageError(f"train_classifier does not handle mode {config.mode!r}")
    num_classes = MODE_NUM_CLASSES[config.mode]
    model = init_model
    if model is None:
        model = new_swin(swin_config.model_copy(update={"num_classes": num_classes}), seed=config.seed)
    elif model.config.num_classes != num_classes:
        raise ConfigError(f"mode {config.mode} needs {num_classes} logits, model has {model.config.num_classes}")
    torch.manual_seed(config.seed)
    side, multiple = model.config.input_side, model.config.side_multiple
    train_set = SliceDataset(train_catalog, side, config.mode, multiple, config.augmentation, config.seed)
    val_set = SliceDataset(val_catalog, side, config.mode, multiple, None, config.seed)
    logger.info("Training %s classifier on %d slices (%d positive), validating on %d",
                config.mode, len(train_catalog), train_catalog.positive_count, len(val_catalog))
    return _fit(model, train_set, val_set, config, _classifier_loss, history_path, progress)


def init_two_logit(base_checkpoint, seed: int = 0) -> SwinClassifier:
    """Two-logit classifier whose backbone is copied from a trained checkpoint; the head is fresh."""
    base = load_checkpoint(base_checkpoint, expect_kind="swin").model
    torch.manual_seed(seed)
    model = SwinClassifier(base.config.model_copy(update={"num_classes": 2}))
    return load_backbone(base_checkpoint, into=model)


def finetune_two_logit(base_checkpoint, train_catalog: SliceCatalog, val_catalog: SliceCatalog,
                       config: TrainConfig, history_path=None, progress: bool = True) -> TrainResult:
    if config.mode != "binary_two_logit":
        raise UsageError(f"fine-tuning trains a two-logit model, got mode {config.mode!r}")
    model = init_two_logit(base_checkpoint, seed=config.seed)
    return train_classifier(train_catalog, val_catalog, model.config, config, init_model=model,
                            history_path=history_path, progress=progress)


def train_unet(train_catalog: SliceCatalog, val_catalog: SliceCatalog, unet_config: UNetConfig,
               config: TrainConfig, side: int, history_path=None, progress: bool = True) -> TrainResult:
    if config.mode != "unet":
        raise UsageError(f"train_unet needs mode 'unet', got {config.mode!r}")
    if not (train_catalog.has_masks and val_catalog.has_masks):
        raise UsageError("the U-Net baseline needs pixel masks for every training and validation slice")
    unet_config.check_side(side)
    model = new_unet(unet_config, seed=config.seed)
    torch.manual_seed(config.seed)
    multiple = 2 ** unet_config.hierarchies
    train_set = SliceDataset(train_catalog, side, "unet", multiple, config.augmentation, config.seed)
    val_set = SliceDataset(val_catalog, side, "unet", multiple, None, config.seed)
    logger.info("Training U-Net on %d slices, validating on %d", len(train_catalog), len(val_catalog))
    return _fit(model, train_set, val_set, config, _unet_loss, history_path, progress)
