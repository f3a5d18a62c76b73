"""Clothing-invariant person re-identification via synthesized cloth swaps.

A cloth-swapping GAN conditioned on an apparel auto-encoder renders each
person in other people's clothes; a backbone is then initialised by learning
to map originals and their swapped counterparts onto each other, and finally
fine-tuned for identity classification.
"""

from .aifl import AIFL, AIFLSchedule, PatchDiscriminatorT, TransferNet, initialize_backbone
from .asgan import ASGAN, GeneratorNet, PatchDiscriminatorG, RefinedBlock, synthesize_dataset
from .backbones import SmallBackbone, build_backbone
from .checkpoint import load_checkpoint, save_checkpoint
from .config import ExperimentConfig, desk_config
from .encoder import ApparelEncoder, ApparelEncoderNet
from .exceptions import (ApparelReidError, ChannelError, CheckpointError, ConfigurationError,
                         ContractViolation, DependencyError, EvaluationError, IngestionError,
                         NoDonorError, NumericFault)
from .imaging import (DatasetManifest, ManifestRecord, PairRecord, composite_mask,
                      load_and_normalize)
from .metrics import MetricReport, evaluate, evaluate_embeddings, invariance_ratio
from .pipeline import run_ablation, run_pipeline, run_stage
from .reid import ReidClassifier, ReidModel, embed, finetune
from .synthetic import generate_synthetic_corpus

__version__ = "0.1.0"
