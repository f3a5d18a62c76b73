"""Identity-classification fine-tuning and embedding extraction."""

import copy
import os
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted
from torch import nn

from .backbones import SMALL_WIDTHS, build_backbone, normalized_embedding
from .exceptions import CheckpointError, ConfigurationError, ContractViolation
from .imaging import finetune_augment, load_and_normalize
from .layers import eval_mode
from .training import iterate_minibatches, resolve_dtype
from .validation import IMAGE_SIZE, check_images, check_rng

HEAD_WIDTHS = (512, 256)


class ReidModel(nn.Module):
    """Backbone, global average pooling and a three-layer classifier."""

    def __init__(self, backbone, num_ids, hidden=HEAD_WIDTHS):
        super().__init__()
        if num_ids < 2:
            raise ConfigurationError(f"fine-tuning needs at least 2 identities, got {num_ids}")
        self.backbone = backbone
        self.num_ids = int(num_ids)
        self.hidden = tuple(int(h) for h in hidden)
        widths = (backbone.feature_dim,) + tuple(hidden)
        layers = []
        for a, b in zip(widths[:-1], widths[1:]):
            layers += [nn.Linear(a, b), nn.ReLU()]
        layers.append(nn.Linear(widths[-1], self.num_ids))
        self.head = nn.Sequential(*layers)

    def architecture(self):
        return {"backbone": self.backbone.architecture(), "num_ids": self.num_ids,
                "hidden": list(self.hidden)}

    def features(self, x):
        return self.backbone(x).mean(dim=(-2, -1))

    def forward(self, x):
        return self.head(self.features(x))


def build_reid_model(backbone, num_ids, seed=0, hidden=HEAD_WIDTHS, feature_dim=None):
    """Attach a freshly initialised head to a backbone module or backbone checkpoint."""
    from .checkpoint import load_checkpoint

    if isinstance(backbone, (str, os.PathLike)):
        backbone = load_checkpoint(backbone, expect_kind="backbone").module
    if not hasattr(backbone, "feature_dim"):
        raise CheckpointError("checkpoint does not hold a feature-extractor backbone")
    if feature_dim is not None and backbone.feature_dim != feature_dim:
        raise CheckpointError(
            f"backbone produces {backbone.feature_dim}-d features, expected {feature_dim}")
    dtype = next(backbone.parameters()).dtype
    torch.manual_seed(seed)
    return ReidModel(backbone, num_ids, hidden).to(dtype)


@dataclass
class FinetuneSchedule:
    epochs: int = 20
    batch_size: int = 64
    lr_head: float = 0.1
    lr_backbone: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4
    augment: bool = True


def finetune_optimizer(model, schedule):
    """SGD with separate learning rates for the new head and the pretrained backbone."""
    return torch.optim.SGD(
        [{"params": model.head.parameters(), "lr": schedule.lr_head},
         {"params": model.backbone.parameters(), "lr": schedule.lr_backbone}],
        lr=schedule.lr_head, momentum=schedule.momentum, weight_decay=schedule.weight_decay)


def finetune(model, images, labels, schedule=None, rng=None, callback=None):
    """Cross-entropy training on class indices ``labels`` (0..num_ids-1).

    Returns a list with one ``{epoch, loss, accuracy}`` record per epoch,
    where accuracy is the running training accuracy on augmented batches.
    """
    schedule = schedule or FinetuneSchedule()
    rng = check_rng(rng)
    dtype = next(model.parameters()).dtype
    X = check_images(images, dtype=dtype)
    y = torch.as_tensor(np.asarray(labels), dtype=torch.long)
    if len(y) != len(X):
        raise ContractViolation(f"{len(X)} images but {len(y)} labels")
    if y.min() < 0 or y.max() >= model.num_ids:
        raise ContractViolation(f"labels must lie in [0, {model.num_ids})")
    opt = finetune_optimizer(model, schedule)
    log = []
    for epoch in range(schedule.epochs):
        model.train()
        total, correct, loss_sum = 0, 0, 0.0
        for idx in iterate_minibatches(len(X), schedule.batch_size, rng):
            xb = X[idx]
            if schedule.augment:
                xb = finetune_augment(xb, rng)
            logits = model(xb)
            loss = F.cross_entropy(logits, y[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
            loss_sum += float(loss.detach()) * len(idx)
            correct += int((logits.argmax(1) == y[idx]).sum())
            total += len(idx)
        rec = {"epoch": epoch, "loss": loss_sum / total, "accuracy": correct / total}
        log.append(rec)
        if callback is not None:
            callback(rec)
    model.eval()
    return log


def training_accuracy(model, images, labels):
    X = check_images(images, dtype=next(model.parameters()).dtype)
    with eval_mode(model), torch.no_grad():
        pred = model(X).argmax(1).numpy()
    return float(np.mean(pred == np.asarray(labels)))


def manifest_images(manifest, size=IMAGE_SIZE, require_labels=False):
    if require_labels:
        missing = [r.image_path for r in manifest if r.person_id is None]
        if missing:
            raise ConfigurationError(
                f"{len(missing)} records lack person_id: " + ", ".join(missing[:10]))
    return torch.stack([load_and_normalize(manifest.image_path(i), size)
                        for i in range(len(manifest))])


def embed(model, images, batch_size=256):
    """L2-normalised pooled features; the classifier head is never run."""
    backbone = model.backbone if isinstance(model, ReidModel) else model
    X = check_images(images, dtype=next(backbone.parameters()).dtype)
    out = []
    with eval_mode(backbone), torch.no_grad():
        for s in range(0, len(X), batch_size):
            out.append(normalized_embedding(backbone, X[s:s + batch_size]))
    return torch.cat(out).cpu().numpy().astype(np.float64)


class ReidClassifier(ClassifierMixin, BaseEstimator):
    """Fine-tuned identity classifier whose ``transform`` gives ReID embeddings.

    Parameters
    ----------
    backbone : str, path or nn.Module
        ``'small'``/``'resnet50'``/``'densenet161'`` for a fresh backbone, a
        backbone checkpoint path, or a backbone module (copied, not mutated).
    hidden : tuple of int
        Widths of the two hidden head layers.
    epochs, batch_size, lr_head, lr_backbone, momentum, weight_decay
        Fine-tuning schedule.
    augment : bool
        Random flip / crop / resize of training images.
    """

    def __init__(self, backbone="small", backbone_widths=SMALL_WIDTHS, hidden=HEAD_WIDTHS,
                 epochs=20, batch_size=64, lr_head=0.1, lr_backbone=0.01, momentum=0.9,
                 weight_decay=5e-4, augment=True, random_state=None, dtype="float32"):
        self.backbone = backbone
        self.backbone_widths = backbone_widths
        self.hidden = hidden
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr_head = lr_head
        self.lr_backbone = lr_backbone
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.augment = augment
        self.random_state = random_state
        self.dtype = dtype

    def schedule(self):
        return FinetuneSchedule(self.epochs, self.batch_size, self.lr_head, self.lr_backbone,
                                self.momentum, self.weight_decay, self.augment)

    def _backbone_module(self, rng):
        dtype = resolve_dtype(self.dtype)
        bb = self.backbone
        if isinstance(bb, nn.Module):
            return copy.deepcopy(bb).to(dtype)
        if isinstance(bb, str) and bb in ("small", "resnet50", "densenet161"):
            torch.manual_seed(int(rng.integers(0, 2**31 - 1)))
            kwargs = {"widths": self.backbone_widths} if bb == "small" else {}
            return build_backbone(bb, **kwargs).to(dtype)
        from .checkpoint import load_checkpoint

        return load_checkpoint(bb, expect_kind="backbone").module.to(dtype)

    def fit(self, X, y):
        rng = check_rng(self.random_state)
        X = check_images(X, dtype=resolve_dtype(self.dtype))
        self.classes_, y_idx = np.unique(np.asarray(y), return_inverse=True)
        backbone = self._backbone_module(rng)
        self.model_ = build_reid_model(backbone, len(self.classes_),
                                       seed=int(rng.integers(0, 2**31 - 1)), hidden=self.hidden)
        self.log_ = finetune(self.model_, X, y_idx, self.schedule(), rng)
        return self

    def decision_function(self, X):
        check_is_fitted(self, "model_")
        X = check_images(X, dtype=next(self.model_.parameters()).dtype)
        with eval_mode(self.model_), torch.no_grad():
            return self.model_(X).numpy()

    def predict_proba(self, X):
        logits = torch.as_tensor(self.decision_function(X))
        return torch.softmax(logits, dim=1).numpy()

    def predict(self, X):
        return self.classes_[self.decision_function(X).argmax(axis=1)]

    def transform(self, X):
        check_is_fitted(self, "model_")
        return embed(self.model_, X)


__all__ = [
    "ReidModel", "ReidClassifier", "FinetuneSchedule", "build_reid_model", "finetune",
    "embed", "training_accuracy", "manifest_images", "finetune_optimizer", "HEAD_WIDTHS",
]
