"""Image ingestion, cloth-mask compositing, augmentation and dataset manifests."""

import json
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple, Optional

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image as PILImage

from .exceptions import ChannelError, ContractViolation, IngestionError
from .validation import IMAGE_SIZE, check_images, check_masks, check_rng

__all__ = [
    "load_and_normalize", "normalize_array", "to_uint8", "save_image",
    "load_mask", "save_mask", "MaskedPair", "composite_mask",
    "augment_cloth", "finetune_augment", "hflip", "resized_crop",
    "ManifestRecord", "DatasetManifest", "PairRecord",
    "write_pairs", "read_pairs", "MaskProvider", "FileMaskProvider",
]


# ---------------------------------------------------------------------------
# ingestion

def normalize_array(arr):
    """Map an ``(H, W, 3)`` uint8 raster to a ``(3, H, W)`` tensor in [-1, 1]."""
    a = np.asarray(arr)
    if a.ndim != 3 or a.shape[2] != 3:
        raise ChannelError(f"expected an RGB raster of shape (H, W, 3), got {a.shape}")
    t = torch.from_numpy(np.ascontiguousarray(a.transpose(2, 0, 1))).to(torch.float32)
    return t / 127.5 - 1.0


def load_and_normalize(path, size=IMAGE_SIZE):
    """Read an RGB image file, resize to ``size`` (H, W) and map to [-1, 1].

    Resizing is bilinear; PIL's bilinear filter widens its support when
    downscaling, so reduction is anti-aliased.
    """
    path = Path(path)
    try:
        with PILImage.open(path) as im:
            im.load()
            mode = im.mode
            if mode != "RGB":
                raise ChannelError(f"{path}: expected an RGB image, got mode {mode!r}")
            h, w = size
            if im.size != (w, h):
                im = im.resize((w, h), PILImage.BILINEAR)
            arr = np.asarray(im, dtype=np.uint8)
    except ChannelError:
        raise
    except (OSError, ValueError) as exc:
        raise IngestionError(f"cannot read image {path}: {exc}") from exc
    return normalize_array(arr)


def to_uint8(image):
    """Inverse of the normalization, rounded to 8 bits, as ``(H, W, 3)``."""
    t = image.detach().to(torch.float64).clamp(-1, 1)
    a = torch.round((t + 1.0) * 127.5).to(torch.uint8)
    return a.permute(1, 2, 0).cpu().numpy()


def save_image(image, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    PILImage.fromarray(to_uint8(image), mode="RGB").save(path, format="PNG")


def load_mask(path, size=IMAGE_SIZE):
    """Single-channel mask file to a ``(1, H, W)`` binary tensor (>127 is cloth)."""
    path = Path(path)
    try:
        with PILImage.open(path) as im:
            im = im.convert("L")
            h, w = size
            if im.size != (w, h):
                im = im.resize((w, h), PILImage.BILINEAR)
            arr = np.asarray(im, dtype=np.uint8)
    except (OSError, ValueError) as exc:
        raise IngestionError(f"cannot read mask {path}: {exc}") from exc
    return torch.from_numpy((arr > 127).astype(np.float32))[None]


def save_mask(mask, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arr = (mask.reshape(mask.shape[-2:]).cpu().numpy() > 0.5).astype(np.uint8) * 255
    PILImage.fromarray(arr, mode="L").save(path, format="PNG")


# ---------------------------------------------------------------------------
# mask algebra

class MaskedPair(NamedTuple):
    cloth_image: torch.Tensor
    rest_image: torch.Tensor


def composite_mask(image, mask):
    """Split ``image`` into its cloth part and the rest.

    ``cloth_image = image * mask`` and ``rest_image = image * (1 - mask)``,
    the mask broadcast over channels. Works on a single ``(3, H, W)`` image
    or an ``(N, 3, H, W)`` batch. With a binary mask every pixel lands in
    exactly one output, so the two outputs add back to ``image`` exactly.
    """
    single = image.dim() == 3
    img = check_images(image, check_range=False, size=tuple(image.shape[-2:]))
    m = check_masks(mask, like=img).to(img.dtype)
    if m.shape[0] not in (1, img.shape[0]):
        raise ContractViolation(
            f"mask batch of {m.shape[0]} does not match image batch of {img.shape[0]}")
    cloth = img * m
    rest = img * (1 - m)
    if single:
        return MaskedPair(cloth[0], rest[0])
    return MaskedPair(cloth, rest)


# ---------------------------------------------------------------------------
# augmentation

def hflip(image):
    return torch.flip(image, dims=(-1,))


def resized_crop(image, top, left, height, width):
    """Crop a window and resize it back to the input's spatial size."""
    h, w = image.shape[-2:]
    crop = image[..., top:top + height, left:left + width]
    if (height, width) == (h, w):
        return crop.clone()
    batched = crop.dim() == 4
    x = crop if batched else crop.unsqueeze(0)
    out = F.interpolate(x, size=(h, w), mode="bilinear", align_corners=False, antialias=True)
    return out if batched else out[0]


def _flip_and_crop(image, rng, flip_prob, scale):
    rng = check_rng(rng)
    single = image.dim() == 3
    batch = image.unsqueeze(0) if single else image
    h, w = batch.shape[-2:]
    out = []
    for img in batch:
        if rng.random() < flip_prob:
            img = hflip(img)
        area = rng.uniform(scale[0], scale[1])
        side = math.sqrt(area)
        ch = min(h, max(1, int(round(h * side))))
        cw = min(w, max(1, int(round(w * side))))
        top = int(rng.integers(0, h - ch + 1))
        left = int(rng.integers(0, w - cw + 1))
        out.append(resized_crop(img, top, left, ch, cw))
    out = torch.stack(out)
    return out[0] if single else out


def augment_cloth(cloth_image, rng, flip_prob=0.5, scale=(0.8, 1.0)):
    """Random horizontal flip and random resized crop of a cloth image.

    Used only while training the cloth-swapping GAN; donor codes at
    generation time come from unaugmented cloth images.
    """
    return _flip_and_crop(cloth_image, rng, flip_prob, scale)


def finetune_augment(image, rng, flip_prob=0.5, scale=(0.8, 1.0)):
    """Same flip/crop/resize draw as :func:`augment_cloth`, for whole person images."""
    return _flip_and_crop(image, rng, flip_prob, scale)


# ---------------------------------------------------------------------------
# manifests

@dataclass
class ManifestRecord:
    image_path: str
    person_id: Optional[int]
    group_id: str
    camera_id: Optional[str] = None
    mask_path: Optional[str] = None

    def __post_init__(self):
        if not self.group_id:
            raise ContractViolation(f"{self.image_path}: group_id must be non-empty")


@dataclass
class DatasetManifest:
    """Line-delimited JSON records; relative paths resolve against ``root``."""

    records: list = field(default_factory=list)
    root: Optional[str] = None

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def resolve(self, p):
        if p is None:
            return None
        p = Path(p)
        if p.is_absolute() or self.root is None:
            return p
        return Path(self.root) / p

    def image_path(self, i):
        return self.resolve(self.records[i].image_path)

    def mask_path(self, i):
        return self.resolve(self.records[i].mask_path)

    @property
    def person_ids(self):
        return [r.person_id for r in self.records]

    def subset(self, keep):
        return DatasetManifest([r for r in self.records if keep(r)], self.root)

    def dumps(self):
        return "".join(json.dumps(asdict(r), sort_keys=True) + "\n" for r in self.records)

    @classmethod
    def loads(cls, text, root=None):
        records = []
        for lineno, line in enumerate(text.splitlines(), 1):
            if not line.strip():
                continue
            try:
                records.append(ManifestRecord(**json.loads(line)))
            except (TypeError, json.JSONDecodeError) as exc:
                raise ContractViolation(f"manifest line {lineno}: {exc}") from exc
        return cls(records, root)

    def save(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.dumps())

    @classmethod
    def load(cls, path):
        path = Path(path)
        try:
            text = path.read_text()
        except OSError as exc:
            raise IngestionError(f"cannot read manifest {path}: {exc}") from exc
        return cls.loads(text, root=str(path.parent))

    def check_paths(self):
        missing = [str(self.image_path(i)) for i in range(len(self))
                   if not self.image_path(i).exists()]
        if missing:
            raise IngestionError(f"{len(missing)} manifest images missing, e.g. {missing[0]}")


@dataclass(frozen=True)
class PairRecord:
    original: str
    synthetic: str
    set_index: int

    def __post_init__(self):
        if self.original == self.synthetic:
            raise ContractViolation(f"pair original and synthetic coincide: {self.original}")
        if self.set_index < 0:
            raise ContractViolation(f"negative set_index {self.set_index}")


def write_pairs(pairs, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for p in pairs:
            fh.write(json.dumps(asdict(p), sort_keys=True) + "\n")


def read_pairs(path):
    """Parse a pair list; relative paths are resolved against its directory."""
    path = Path(path)
    try:
        lines = path.read_text().splitlines()
    except OSError as exc:
        raise IngestionError(f"cannot read pair list {path}: {exc}") from exc
    out = []
    for line in lines:
        if not line.strip():
            continue
        d = json.loads(line)
        for k in ("original", "synthetic"):
            if not os.path.isabs(d[k]):
                d[k] = str(path.parent / d[k])
        out.append(PairRecord(**d))
    return out


# ---------------------------------------------------------------------------
# mask providers

class MaskProvider:
    """Supplies the binary cloth mask for a manifest record.

    Subclasses implement :meth:`mask_for`; returning ``None`` means no usable
    mask, and callers skip the record.
    """

    def mask_for(self, manifest, index, size=IMAGE_SIZE):
        raise NotImplementedError


class FileMaskProvider(MaskProvider):
    """Masks from the files named in each record's ``mask_path``."""

    def mask_for(self, manifest, index, size=IMAGE_SIZE):
        p = manifest.mask_path(index)
        if p is None or not p.exists():
            return None
        return load_mask(p, size)
