"""Versioned single-module checkpoints.

A checkpoint stores the module kind, an architecture descriptor sufficient to
rebuild it, its state dict, a step counter and the hash of the config that
produced it.
"""

from dataclasses import dataclass
from pathlib import Path

import torch

from .exceptions import CheckpointError

FORMAT_VERSION = 1


def _builders():
    from .aifl import PatchDiscriminatorT
    from .asgan import GeneratorNet, PatchDiscriminatorG
    from .backbones import backbone_from_architecture
    from .encoder import ApparelEncoderNet
    from .reid import ReidModel

    return {
        "apparel-encoder": lambda a: ApparelEncoderNet(**a),
        "generator": lambda a: GeneratorNet(**a),
        "discriminator-g": lambda a: PatchDiscriminatorG(**a),
        "discriminator-t": lambda a: PatchDiscriminatorT(**a),
        "backbone": backbone_from_architecture,
        "reid-model": lambda a: ReidModel(backbone_from_architecture(a["backbone"]),
                                          a["num_ids"], a["hidden"]),
    }


KINDS = ("apparel-encoder", "generator", "discriminator-g", "discriminator-t", "backbone",
         "reid-model")


@dataclass
class Checkpoint:
    module: torch.nn.Module
    kind: str
    step: int
    config_hash: str
    architecture: dict


def save_checkpoint(path, module, kind, step=0, config_hash=""):
    if kind not in KINDS:
        raise CheckpointError(f"unknown checkpoint kind {kind!r}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format_version": FORMAT_VERSION,
        "kind": kind,
        "architecture": module.architecture(),
        "dtype": str(next(module.parameters()).dtype).replace("torch.", ""),
        "state_dict": module.state_dict(),
        "step": int(step),
        "config_hash": str(config_hash),
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)
    return path


def load_checkpoint(path, expect_kind=None):
    path = Path(path)
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except FileNotFoundError:
        raise
    except Exception as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    version = payload.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointError(
            f"{path}: checkpoint format version {version}, this build reads {FORMAT_VERSION}")
    kind = payload["kind"]
    if expect_kind is not None and kind != expect_kind:
        raise CheckpointError(f"{path}: holds a {kind!r} checkpoint, expected {expect_kind!r}")
    module = _builders()[kind](payload["architecture"])
    module = module.to(getattr(torch, payload["dtype"]))
    try:
        module.load_state_dict(payload["state_dict"])
    except RuntimeError as exc:
        raise CheckpointError(f"{path}: state does not match architecture: {exc}") from exc
    module.eval()
    return Checkpoint(module, kind, payload["step"], payload["config_hash"],
                      payload["architecture"])
