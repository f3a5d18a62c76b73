"""Feature-extractor backbones: Image -> final convolutional feature map.

``small`` is a compact four-stage network for desk-scale runs; ``resnet50``
and ``densenet161`` wrap the torchvision models (randomly initialised, the
classifier layers removed).
"""

import torch.nn.functional as F
from torch import nn

from .exceptions import ConfigurationError
from .layers import init_weights

SMALL_WIDTHS = (32, 64, 128, 256)


class SmallBackbone(nn.Module):
    """Four stride-2 stages of (4x4 s2 conv, BN, ReLU, 3x3 conv, BN, ReLU)."""

    identifier = "small"

    def __init__(self, widths=SMALL_WIDTHS):
        super().__init__()
        self.widths = tuple(int(w) for w in widths)
        chans = (3,) + self.widths
        stages = []
        for a, b in zip(chans[:-1], chans[1:]):
            stages.append(nn.Sequential(
                nn.Conv2d(a, b, 4, 2, 1), nn.BatchNorm2d(b), nn.ReLU(),
                nn.Conv2d(b, b, 3, 1, 1), nn.BatchNorm2d(b), nn.ReLU(),
            ))
        self.stages = nn.Sequential(*stages)
        init_weights(self)

    @property
    def feature_dim(self):
        return self.widths[-1]

    @property
    def num_downsamples(self):
        return len(self.widths)

    def architecture(self):
        return {"identifier": self.identifier, "widths": list(self.widths)}

    def forward(self, x):
        return self.stages(x)


class TorchvisionBackbone(nn.Module):
    """ResNet-50 / DenseNet-161 trunk without pooling or classifier."""

    SPECS = {"resnet50": 2048, "densenet161": 2208}

    def __init__(self, identifier):
        super().__init__()
        import torchvision

        if identifier not in self.SPECS:
            raise ConfigurationError(f"unknown torchvision backbone {identifier!r}")
        self.identifier = identifier
        if identifier == "resnet50":
            m = torchvision.models.resnet50(weights=None)
            self.trunk = nn.Sequential(*list(m.children())[:-2])
        else:
            m = torchvision.models.densenet161(weights=None)
            self.trunk = nn.Sequential(m.features, nn.ReLU())

    @property
    def feature_dim(self):
        return self.SPECS[self.identifier]

    @property
    def num_downsamples(self):
        return 5

    def architecture(self):
        return {"identifier": self.identifier}

    def forward(self, x):
        return self.trunk(x)


def build_backbone(identifier="small", **kwargs):
    if identifier == "small":
        return SmallBackbone(**kwargs)
    if identifier in TorchvisionBackbone.SPECS:
        return TorchvisionBackbone(identifier)
    raise ConfigurationError(
        f"unknown backbone {identifier!r}; choose 'small', 'resnet50' or 'densenet161'")


def backbone_from_architecture(arch):
    arch = dict(arch)
    return build_backbone(arch.pop("identifier"), **arch)


def pooled_features(backbone, x):
    """Global-average-pooled feature vectors, shape ``(N, feature_dim)``."""
    return backbone(x).mean(dim=(-2, -1))


def normalized_embedding(backbone, x):
    return F.normalize(pooled_features(backbone, x), dim=1)

