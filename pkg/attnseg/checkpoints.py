"""Model checkpoints: a safetensors parameter blob with the model config embedded as metadata."""
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Union

import torch
from pydantic import ValidationError
from safetensors import SafetensorError
from safetensors.torch import load_file, safe_open, save_file

from .config import SwinConfig, UNetConfig
from .errors import CheckpointError, DependencyError
from .shared_constants import CHECKPOINT_FORMAT_VERSION
from .swin import SwinClassifier
from .unet import UNet

logger = logging.getLogger(__name__)

MODEL_KINDS = {"swin": (SwinClassifier, SwinConfig), "unet": (UNet, UNetConfig)}


@dataclass
class Checkpoint:
    model: Union[SwinClassifier, UNet]
    model_kind: str
    train_mode: Optional[str]
    extra: dict


def _kind_of(model) -> str:
    for kind, (model_cls, _) in MODEL_KINDS.items():
        if isinstance(model, model_cls):
            return kind
    raise CheckpointError(f"cannot checkpoint a {type(model).__name__}")


def save_checkpoint(model, file_path, train_mode: Optional[str] = None, extra: Optional[dict] = None) -> str:
    file_path = Path(file_path)
    file_path.parent.mkdir(parents=True, exist_ok=True)
    state = {name: tensor.detach().cpu().contiguous() for name, tensor in model.state_dict().items()}
    metadata = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "model_kind": _kind_of(model),
        "config": model.config.model_dump_json(),
        "train_mode": train_mode or "",
        "extra": json.dumps(extra or {}, sort_keys=True),
    }
    save_file(state, str(file_path), metadata=metadata)
    logger.info("Saved %s checkpoint to %s", metadata["model_kind"], file_path)
    return str(file_path)


def read_metadata(file_path) -> dict:
    file_path = Path(file_path)
    if not file_path.exists():
        raise DependencyError(file_path, "train a model first")
    try:
        with safe_open(str(file_path), framework="pt") as f:
            metadata = f.metadata() or {}
    except (SafetensorError, OSError) as e:
        raise CheckpointError(f"{file_path} is not a readable checkpoint: {e}") from e
    if metadata.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(
            f"{file_path}: format version {metadata.get('format_version')!r}, expected {CHECKPOINT_FORMAT_VERSION}")
    return metadata


def load_checkpoint(file_path, expect_kind: Optional[str] = None,
                    expect_config: Optional[Union[SwinConfig, UNetConfig]] = None) -> Checkpoint:
    """Rebuilds the model from its embedded config and loads the parameters.

    `expect_config` must match the embedded config exactly when given.
    """
    metadata = read_metadata(file_path)
    kind = metadata.get("model_kind")
    if kind not in MODEL_KINDS:
        raise CheckpointError(f"{file_path}: unknown model kind {kind!r}")
    if expect_kind and kind != expect_kind:
        raise CheckpointError(f"{file_path}: holds a {kind} model, expected {expect_kind}")
    model_cls, config_cls = MODEL_KINDS[kind]
    try:
        config = config_cls.model_validate_json(metadata["config"])
    except (KeyError, ValidationError) as e:
        raise CheckpointError(f"{file_path}: embedded config is invalid: {e}") from e
    if expect_config is not None and expect_config != config:
        raise CheckpointError(f"{file_path}: config {config} does not match the requested {expect_config}")

    model = model_cls(config)
    try:
        model.load_state_dict(load_file(str(file_path)), strict=True)
    except RuntimeError as e:
        raise CheckpointError(f"{file_path}: parameters do not fit the embedded config: {e}") from e
    model.eval()
    return Checkpoint(model=model, model_kind=kind, train_mode=metadata.get("train_mode") or None,
                      extra=json.loads(metadata.get("extra") or "{}"))


def load_backbone(file_path, into: SwinClassifier):
    """Copies every non-head parameter of a Swin checkpoint into `into`."""
    base = load_checkpoint(file_path, expect_kind="swin").model
    base_geometry = base.config.model_copy(update={"num_classes": into.config.num_classes})
    if base_geometry != into.config:
        raise CheckpointError(f"{file_path}: backbone geometry differs from the target classifier")
    state = {name: tensor for name, tensor in base.state_dict().items() if not name.startswith("head.")}
    missing, unexpected = into.load_state_dict(state, strict=False)
    if unexpected or any(not name.startswith("head.") for name in missing):
        raise CheckpointError(f"{file_path}: backbone mismatch, missing {missing}, unexpected {unexpected}")
    return into
