"""Checkpoint directories: a JSON config plus a named-tensor weight file.

Loading is strict: every expected tensor must be present with the right
shape, and nothing extra may appear.
"""

from __future__ import annotations

import json
from pathlib import Path

from safetensors.torch import load_file, save_file

from .backbone import EmbeddingBackbone, build_backbone
from .model import EvaluationModel, ModelConfig

CONFIG_NAME = "config.json"
WEIGHTS_NAME = "weights.safetensors"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(directory: str | Path, model: EvaluationModel,
                    backbone: EmbeddingBackbone, extra: dict | None = None) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    config = {
        "format_version": FORMAT_VERSION,
        "model": model.config.to_dict(),
        "backbone": backbone.describe(),
        "extra": extra or {},
    }
    (directory / CONFIG_NAME).write_text(json.dumps(config, sort_keys=True, indent=2) + "\n")
    tensors = {name: t.detach().contiguous() for name, t in sorted(model.state_dict().items())}
    save_file(tensors, str(directory / WEIGHTS_NAME))
    return directory


def load_checkpoint(directory: str | Path,
                    backbone: EmbeddingBackbone | None = None
                    ) -> tuple[EvaluationModel, EmbeddingBackbone, dict]:
    """Rebuild the model (and, unless supplied, its backbone) from disk."""
    directory = Path(directory)
    config_path = directory / CONFIG_NAME
    weights_path = directory / WEIGHTS_NAME
    if not config_path.is_file() or not weights_path.is_file():
        raise CheckpointError(f"{directory} is not a checkpoint directory")
    config = json.loads(config_path.read_text())
    if config.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format: {config.get('format_version')}")

    model = EvaluationModel(ModelConfig.from_dict(config["model"]))
    if backbone is None:
        backbone = build_backbone(config["backbone"])
    if backbone.dim != model.dim:
        raise CheckpointError(
            f"backbone dim {backbone.dim} does not match model dim {model.dim}")

    tensors = load_file(str(weights_path))
    expected = {name: tuple(t.shape) for name, t in model.state_dict().items()}
    problems = []
    for name in sorted(set(expected) - set(tensors)):
        problems.append(f"missing tensor {name!r}")
    for name in sorted(set(tensors) - set(expected)):
        problems.append(f"unexpected tensor {name!r}")
    for name in sorted(set(tensors) & set(expected)):
        if tuple(tensors[name].shape) != expected[name]:
            problems.append(f"shape mismatch for {name!r}: "
                            f"checkpoint {tuple(tensors[name].shape)}, model {expected[name]}")
    if problems:
        raise CheckpointError("invalid checkpoint: " + "; ".join(problems))
    model.load_state_dict(tensors)
    return model, backbone, config.get("extra", {})
