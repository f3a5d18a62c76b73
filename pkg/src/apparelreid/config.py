"""Experiment configuration: flat, fully defaulted, YAML on disk.

Full-size defaults: SGD with momentum 0.9 and weight decay 5e-4, batch 128
for initialization and 64 for fine-tuning, adversarial weight 0.001,
initialization learning rate 0.1 divided by 10 every epoch, fine-tuning
learning rates 0.1 for the new head and 0.01 for the backbone over 20 epochs. ``desk_config`` shrinks widths, resolution and
step counts so the whole pipeline runs on one CPU core.
"""

import dataclasses
import hashlib
import typing
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .exceptions import ConfigurationError

STAGES = ("synth-corpus", "train-ea", "train-asgan", "synthesize", "init-aifl", "finetune",
          "evaluate", "ablation")
SUITES = ("refined-layer", "data-volume", "no-discriminator")


@dataclass
class ExperimentConfig:
    stage: str = "synth-corpus"
    seed: int = 0
    out_dir: str = "runs/default"
    dtype: str = "float32"
    image_height: int = 256
    image_width: int = 128

    # synthetic corpus
    num_ids: int = 40
    cloths_per_id: int = 3
    images_per_cloth: int = 2
    train_id_fraction: float = 0.5
    manifest: typing.Optional[str] = None
    unlabeled_ids: int = 60
    unlabeled_manifest: typing.Optional[str] = None
    num_cameras: typing.Optional[int] = 6

    # shared optimizer settings
    optimizer: str = "sgd"
    momentum: float = 0.9
    weight_decay: float = 5e-4

    # apparel encoder
    ea_widths: list = field(default_factory=lambda: [64, 128, 256, 512, 512])
    ea_steps: int = 2000
    ea_batch_size: int = 16
    ea_lr: float = 0.05
    ea_checkpoint: typing.Optional[str] = None

    # cloth-swapping GAN
    gen_widths: list = field(default_factory=lambda: [96, 192, 256, 512, 512])
    dg_widths: list = field(default_factory=lambda: [64, 128, 256, 512, 512, 512])
    refined: bool = True
    lambda_dg: float = 0.001
    asgan_steps: int = 2000
    asgan_batch_size: int = 16
    asgan_lr: float = 0.05
    generator_checkpoint: typing.Optional[str] = None

    # synthesis
    num_sets: int = 5
    pairs: typing.Optional[str] = None

    # invariant feature learning
    backbone: str = "small"
    backbone_widths: list = field(default_factory=lambda: [32, 64, 128, 256])
    dt_widths: list = field(default_factory=lambda: [64, 128, 256, 512, 512, 512])
    aifl_epochs: int = 3
    aifl_lr: float = 0.1
    aifl_lr_decay: float = 0.1
    batch_size_init: int = 128
    lambda_dt: float = 0.001
    use_discriminator: bool = True
    sets_used: typing.Optional[int] = None
    backbone_checkpoint: typing.Optional[str] = None

    # fine-tuning
    finetune_epochs: int = 20
    batch_size_finetune: int = 64
    finetune_lr_head: float = 0.1
    finetune_lr_backbone: float = 0.01
    finetune_from: str = "aifl"
    model_checkpoint: typing.Optional[str] = None

    # evaluation
    protocol: str = "pavis-cross-group"
    embeddings: typing.Optional[str] = None

    # ablation
    suite: typing.Optional[str] = None

    def __post_init__(self):
        self.validate()

    @property
    def image_size(self):
        return (self.image_height, self.image_width)

    def validate(self):
        if self.stage not in STAGES:
            raise ConfigurationError(f"unknown stage {self.stage!r}; choose from {STAGES}")
        if self.suite is not None and self.suite not in SUITES:
            raise ConfigurationError(f"unknown ablation suite {self.suite!r}; choose from {SUITES}")
        if self.image_height % 32 or self.image_width % 32:
            raise ConfigurationError("image height and width must be multiples of 32")
        if self.finetune_from not in ("aifl", "random"):
            raise ConfigurationError("finetune_from must be 'aifl' or 'random'")
        if not 0 < self.train_id_fraction < 1:
            raise ConfigurationError("train_id_fraction must lie strictly between 0 and 1")
        for name in ("num_ids", "unlabeled_ids", "cloths_per_id", "images_per_cloth", "num_sets", "aifl_epochs"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be >= 1")
        return self

    # --- serialization -------------------------------------------------

    def to_dict(self):
        return dataclasses.asdict(self)

    def dumps(self):
        return yaml.safe_dump(self.to_dict(), sort_keys=True, default_flow_style=False)

    def save(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.dumps())
        return path

    def hash(self):
        return hashlib.sha256(self.dumps().encode()).hexdigest()[:16]

    @classmethod
    def from_dict(cls, d):
        d = dict(d or {})
        known = {f.name: f for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - set(known))
        if unknown:
            raise ConfigurationError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**{k: _coerce(known[k], v) for k, v in d.items()})

    @classmethod
    def loads(cls, text):
        try:
            d = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            raise ConfigurationError(f"config is not valid YAML: {exc}") from exc
        if d is not None and not isinstance(d, dict):
            raise ConfigurationError("config must be a mapping of keys to values")
        return cls.from_dict(d)

    @classmethod
    def load(cls, path):
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
        return cls.loads(text)

    def replace(self, **changes):
        return self.from_dict({**self.to_dict(), **changes})

    def with_overrides(self, assignments):
        """Apply ``key=value`` strings; values are parsed as YAML scalars/lists."""
        changes = {}
        for a in assignments:
            if "=" not in a:
                raise ConfigurationError(f"override {a!r} is not of the form key=value")
            k, v = a.split("=", 1)
            changes[k.strip()] = yaml.safe_load(v) if v.strip() else None
        return self.replace(**changes)


def _coerce(f, v):
    hint = f.type
    origin = typing.get_origin(hint)
    if origin is typing.Union:
        if v is None:
            return None
        hint = next(a for a in typing.get_args(hint) if a is not type(None))
    if hint is bool:
        if not isinstance(v, bool):
            raise ConfigurationError(f"{f.name} must be true or false, got {v!r}")
        return v
    if hint is int:
        if isinstance(v, bool) or not isinstance(v, int):
            raise ConfigurationError(f"{f.name} must be an integer, got {v!r}")
        return v
    if hint is float:
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            raise ConfigurationError(f"{f.name} must be a number, got {v!r}")
        return float(v)
    if hint is str:
        if not isinstance(v, str):
            raise ConfigurationError(f"{f.name} must be a string, got {v!r}")
        return v
    if hint is list:
        if not isinstance(v, (list, tuple)):
            raise ConfigurationError(f"{f.name} must be a list, got {v!r}")
        return list(v)
    return v


def desk_config(**overrides):
    """Settings sized for a single CPU core: 64x32 images and narrow networks."""
    base = dict(
        image_height=64, image_width=32,
        num_ids=40, cloths_per_id=3, images_per_cloth=2,
        ea_widths=[16, 32, 64, 64, 64], ea_steps=600, ea_batch_size=16, ea_lr=0.05,
        gen_widths=[24, 48, 64, 64, 64], dg_widths=[16, 32, 64, 64, 64, 64],
        asgan_steps=1000, asgan_batch_size=16, asgan_lr=0.05,
        backbone_widths=[32, 64, 128, 256], dt_widths=[16, 32, 64, 64, 64, 64],
        aifl_epochs=3, batch_size_init=16,
        finetune_epochs=20, batch_size_finetune=16,
    )
    base.update(overrides)
    return ExperimentConfig.from_dict(base)
