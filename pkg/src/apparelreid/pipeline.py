"""Stage orchestration: corpus -> encoder -> GAN -> synthesis -> AIFL -> fine-tune -> evaluate.

Each stage reads its inputs from the output directory (or explicit paths in
the config), writes its artifacts plus ``config.yaml`` and a line-delimited
metrics log into its own sub-directory, and can be re-run independently.
"""

import json
import logging
import math
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from filelock import FileLock, Timeout

from .aifl import AIFLSchedule, initialize_backbone, load_pair_images
from .asgan import ASGAN, synthesize_dataset
from .backbones import build_backbone
from .checkpoint import load_checkpoint, save_checkpoint
from .config import SUITES, ExperimentConfig
from .encoder import ApparelEncoder
from .exceptions import ConfigurationError, DependencyError
from .imaging import DatasetManifest, FileMaskProvider, composite_mask, read_pairs
from .metrics import evaluate_embeddings, invariance_ratio
from .reid import (FinetuneSchedule, build_reid_model, embed, finetune, manifest_images)
from .synthetic import generate_synthetic_corpus
from .training import derive_seed, resolve_dtype

logger = logging.getLogger(__name__)

STAGE_DIRS = {
    "synth-corpus": "corpus", "train-ea": "ea", "train-asgan": "asgan",
    "synthesize": "synth", "init-aifl": "aifl", "finetune": "finetune", "evaluate": "eval",
}


@dataclass
class StageResult:
    stage: str
    status: int = 0
    artifacts: dict = field(default_factory=dict)
    summary: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# paths and shared helpers

class Paths:
    """Artifact locations for a config, explicit config paths taking precedence."""

    def __init__(self, cfg):
        self.cfg = cfg
        self.out = Path(cfg.out_dir)

    def stage_dir(self, stage):
        return self.out / STAGE_DIRS[stage]

    @property
    def labeled_manifest(self):
        return Path(self.cfg.manifest) if self.cfg.manifest else \
            self.out / "corpus" / "labeled" / "manifest.jsonl"

    @property
    def unlabeled_manifest(self):
        return Path(self.cfg.unlabeled_manifest) if self.cfg.unlabeled_manifest else \
            self.out / "corpus" / "unlabeled" / "manifest.jsonl"

    @property
    def encoder(self):
        return Path(self.cfg.ea_checkpoint) if self.cfg.ea_checkpoint else \
            self.out / "ea" / "encoder.pt"

    @property
    def generator(self):
        return Path(self.cfg.generator_checkpoint) if self.cfg.generator_checkpoint else \
            self.out / "asgan" / "generator.pt"

    @property
    def pairs(self):
        return Path(self.cfg.pairs) if self.cfg.pairs else self.out / "synth" / "pairs.jsonl"

    @property
    def backbone(self):
        return Path(self.cfg.backbone_checkpoint) if self.cfg.backbone_checkpoint else \
            self.out / "aifl" / "backbone.pt"

    @property
    def model(self):
        return Path(self.cfg.model_checkpoint) if self.cfg.model_checkpoint else \
            self.out / "finetune" / "model.pt"


def require(path, producer):
    path = Path(path)
    if not path.exists():
        raise DependencyError(f"missing {path}; run the '{producer}' stage first")
    return path


class MetricsLog:
    """Append-only line-delimited JSON records."""

    def __init__(self, path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.path.write_text("")

    def __call__(self, record):
        with open(self.path, "a") as fh:
            fh.write(json.dumps(record, sort_keys=True) + "\n")


def split_ids(manifest, fraction):
    """Sorted labeled ids split into (fine-tune ids, test ids)."""
    ids = sorted({r.person_id for r in manifest if r.person_id is not None})
    if len(ids) < 4:
        raise ConfigurationError(f"labeled corpus needs at least 4 identities, has {len(ids)}")
    cut = min(len(ids) - 2, max(2, math.ceil(len(ids) * fraction)))
    return set(ids[:cut]), set(ids[cut:])


def _load_with_masks(manifest, size, dtype):
    provider = FileMaskProvider()
    images, masks, skipped = [], [], 0
    from .imaging import load_and_normalize

    for i in range(len(manifest)):
        m = provider.mask_for(manifest, i, size)
        if m is None:
            skipped += 1
            continue
        images.append(load_and_normalize(manifest.image_path(i), size))
        masks.append(m)
    if not images:
        raise ConfigurationError("no manifest record has a usable cloth mask")
    return torch.stack(images).to(dtype), torch.stack(masks).to(dtype), skipped


def write_embedding_dump(path, manifest, vectors):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for r, v in zip(manifest, vectors):
            fh.write(json.dumps({"person_id": r.person_id, "group_id": r.group_id,
                                 "camera_id": r.camera_id, "key": r.image_path,
                                 "vector": [float(x) for x in v]}, sort_keys=True) + "\n")


def read_embedding_dump(path):
    """Return ``(vectors, meta)`` where ``meta`` maps column names to lists."""
    rows = [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]
    if not rows:
        raise ConfigurationError(f"embedding dump {path} is empty")
    vectors = np.array([r["vector"] for r in rows], dtype=np.float64)
    meta = {k: [r.get(k) for r in rows] for k in ("person_id", "group_id", "camera_id", "key")}
    return vectors, meta


def _backbone_seed(cfg):
    return derive_seed(cfg.seed, "init-aifl", "backbone")


def fresh_backbone(cfg):
    """The randomly initialised backbone AIFL starts from, for a given root seed."""
    torch.manual_seed(_backbone_seed(cfg))
    kwargs = {"widths": cfg.backbone_widths} if cfg.backbone == "small" else {}
    return build_backbone(cfg.backbone, **kwargs).to(resolve_dtype(cfg.dtype))


def evaluation_split(cfg):
    paths = Paths(cfg)
    manifest = DatasetManifest.load(require(paths.labeled_manifest, "synth-corpus"))
    _, test_ids = split_ids(manifest, cfg.train_id_fraction)
    return manifest.subset(lambda r: r.person_id in test_ids)


def backbone_invariance(cfg, backbone, manifest=None):
    """Invariance ratio of ``backbone`` embeddings on the benchmark's test identities."""
    manifest = manifest if manifest is not None else evaluation_split(cfg)
    X = manifest_images(manifest, cfg.image_size)
    return invariance_ratio(embed(backbone, X), manifest.person_ids,
                            [r.group_id for r in manifest])


# ---------------------------------------------------------------------------
# stages

def stage_synth_corpus(cfg, paths, out):
    labeled = generate_synthetic_corpus(
        out / "labeled", cfg.num_ids, cfg.cloths_per_id, cfg.images_per_cloth,
        seed=derive_seed(cfg.seed, "synth-corpus", "labeled"), size=cfg.image_size,
        num_cameras=cfg.num_cameras)
    unlabeled = generate_synthetic_corpus(
        out / "unlabeled", cfg.unlabeled_ids, cfg.cloths_per_id, cfg.images_per_cloth,
        seed=derive_seed(cfg.seed, "synth-corpus", "unlabeled"), size=cfg.image_size,
        num_cameras=cfg.num_cameras)
    for r in unlabeled.records:
        r.person_id = None
    unlabeled.save(out / "unlabeled" / "manifest.jsonl")
    return {"labeled_manifest": str(out / "labeled" / "manifest.jsonl"),
            "unlabeled_manifest": str(out / "unlabeled" / "manifest.jsonl")}, \
        {"labeled_images": len(labeled), "unlabeled_images": len(unlabeled)}


def stage_train_ea(cfg, paths, out):
    manifest = DatasetManifest.load(require(paths.unlabeled_manifest, "synth-corpus"))
    dtype = resolve_dtype(cfg.dtype)
    X, M, skipped = _load_with_masks(manifest, cfg.image_size, dtype)
    cloth = composite_mask(X, M).cloth_image
    est = ApparelEncoder(widths=cfg.ea_widths, n_steps=cfg.ea_steps,
                         batch_size=cfg.ea_batch_size, optimizer=cfg.optimizer, lr=cfg.ea_lr,
                         momentum=cfg.momentum, weight_decay=cfg.weight_decay,
                         random_state=derive_seed(cfg.seed, "train-ea"), dtype=cfg.dtype)
    est.fit(cloth)
    log = MetricsLog(out / "metrics.jsonl")
    for step, loss in enumerate(est.loss_curve_):
        log({"step": step, "loss": loss})
    ckpt = save_checkpoint(out / "encoder.pt", est.net_, "apparel-encoder",
                           step=len(est.loss_curve_), config_hash=cfg.hash())
    return {"encoder": str(ckpt)}, {"final_loss": est.loss_curve_[-1] if est.loss_curve_ else None,
                                    "skipped_no_mask": skipped}


def stage_train_asgan(cfg, paths, out):
    manifest = DatasetManifest.load(require(paths.unlabeled_manifest, "synth-corpus"))
    enc = load_checkpoint(require(paths.encoder, "train-ea"), "apparel-encoder").module
    dtype = resolve_dtype(cfg.dtype)
    X, M, skipped = _load_with_masks(manifest, cfg.image_size, dtype)
    est = ASGAN(enc, widths=cfg.gen_widths, disc_widths=cfg.dg_widths, refined=cfg.refined,
                image_size=cfg.image_size, lambda_dg=cfg.lambda_dg, n_steps=cfg.asgan_steps,
                batch_size=cfg.asgan_batch_size, optimizer=cfg.optimizer, lr=cfg.asgan_lr,
                momentum=cfg.momentum, weight_decay=cfg.weight_decay,
                random_state=derive_seed(cfg.seed, "train-asgan"), dtype=cfg.dtype)
    est.fit(X, M)
    log = MetricsLog(out / "metrics.jsonl")
    for step, rec in enumerate(est.history_):
        log({"step": step, **rec})
    g = save_checkpoint(out / "generator.pt", est.generator_, "generator",
                        step=cfg.asgan_steps, config_hash=cfg.hash())
    d = save_checkpoint(out / "discriminator.pt", est.discriminator_, "discriminator-g",
                        step=cfg.asgan_steps, config_hash=cfg.hash())
    last = est.history_[-1] if est.history_ else {}
    return {"generator": str(g), "discriminator": str(d)}, {**last, "skipped_no_mask": skipped}


def stage_synthesize(cfg, paths, out):
    manifest = DatasetManifest.load(require(paths.unlabeled_manifest, "synth-corpus"))
    enc = load_checkpoint(require(paths.encoder, "train-ea"), "apparel-encoder").module
    gen = load_checkpoint(require(paths.generator, "train-asgan"), "generator").module
    pairs = synthesize_dataset(gen, enc, manifest, cfg.num_sets,
                               derive_seed(cfg.seed, "synthesize"), out, size=cfg.image_size)
    return {"pairs": str(out / "pairs.jsonl")}, {"num_pairs": len(pairs)}


def stage_init_aifl(cfg, paths, out):
    pairs = read_pairs(require(paths.pairs, "synthesize"))
    if cfg.sets_used is not None:
        pairs = [p for p in pairs if p.set_index < cfg.sets_used]
    if not pairs:
        raise ConfigurationError("no image pairs selected for AIFL initialization")
    dtype = resolve_dtype(cfg.dtype)
    originals, synthetics = load_pair_images(pairs, cfg.image_size)
    schedule = AIFLSchedule(epochs=cfg.aifl_epochs, lr=cfg.aifl_lr, lr_decay=cfg.aifl_lr_decay,
                            batch_size=cfg.batch_size_init, momentum=cfg.momentum,
                            weight_decay=cfg.weight_decay, lambda_dt=cfg.lambda_dt,
                            use_discriminator=cfg.use_discriminator,
                            disc_widths=tuple(cfg.dt_widths), optimizer=cfg.optimizer)
    backbone = fresh_backbone(cfg)
    log = MetricsLog(out / "metrics.jsonl")
    backbone, _, _, records = initialize_backbone(
        originals.to(dtype), synthetics.to(dtype), backbone, schedule,
        derive_seed(cfg.seed, "init-aifl"), callback=log)
    ckpt = save_checkpoint(out / "backbone.pt", backbone, "backbone", step=len(records),
                           config_hash=cfg.hash())
    return {"backbone": str(ckpt)}, {"iterations": len(records), "num_pairs": len(pairs),
                                     "final": records[-1]}


def stage_finetune(cfg, paths, out):
    manifest = DatasetManifest.load(require(paths.labeled_manifest, "synth-corpus"))
    train_ids, _ = split_ids(manifest, cfg.train_id_fraction)
    train = manifest.subset(lambda r: r.person_id in train_ids)
    X = manifest_images(train, cfg.image_size, require_labels=True)
    if cfg.finetune_from == "aifl":
        backbone = load_checkpoint(require(paths.backbone, "init-aifl"), "backbone").module
    else:
        backbone = fresh_backbone(cfg)
    classes, y = np.unique(np.asarray(train.person_ids), return_inverse=True)
    model = build_reid_model(backbone, len(classes), seed=derive_seed(cfg.seed, "finetune", "head"))
    schedule = FinetuneSchedule(epochs=cfg.finetune_epochs, batch_size=cfg.batch_size_finetune,
                                lr_head=cfg.finetune_lr_head, lr_backbone=cfg.finetune_lr_backbone,
                                momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    log = MetricsLog(out / "metrics.jsonl")
    records = finetune(model, X.to(next(model.parameters()).dtype), y, schedule,
                       derive_seed(cfg.seed, "finetune"), callback=log)
    ckpt = save_checkpoint(out / "model.pt", model, "reid-model", step=cfg.finetune_epochs,
                           config_hash=cfg.hash())
    (out / "classes.json").write_text(json.dumps([int(c) for c in classes]))
    return {"model": str(ckpt)}, {"final": records[-1] if records else None}


def stage_evaluate(cfg, paths, out):
    artifacts = {}
    extra = {}
    if cfg.embeddings:
        vectors, meta = read_embedding_dump(require(cfg.embeddings, "evaluate"))
    else:
        model = load_checkpoint(require(paths.model, "finetune"), "reid-model").module
        test = evaluation_split(cfg)
        vectors = embed(model, manifest_images(test, cfg.image_size))
        dump = out / "embeddings.jsonl"
        write_embedding_dump(dump, test, vectors)
        artifacts["embeddings"] = str(dump)
        _, meta = read_embedding_dump(dump)
        extra["invariance_ratio"] = invariance_ratio(vectors, meta["person_id"], meta["group_id"])
    report = evaluate_embeddings(vectors, vectors, meta, meta, cfg.protocol)
    report.extra.update(extra)
    report.save(out)
    artifacts["report"] = str(out / "report.json")
    return artifacts, report.to_dict()


STAGES = {
    "synth-corpus": stage_synth_corpus, "train-ea": stage_train_ea,
    "train-asgan": stage_train_asgan, "synthesize": stage_synthesize,
    "init-aifl": stage_init_aifl, "finetune": stage_finetune, "evaluate": stage_evaluate,
}


@contextmanager
def directory_lock(out_dir):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    lock = FileLock(str(out_dir / ".lock"))
    try:
        lock.acquire(timeout=0)
    except Timeout:
        raise ConfigurationError(f"another stage is running in {out_dir}") from None
    try:
        yield
    finally:
        lock.release()


def run_stage(cfg, stage=None):
    """Run one stage deterministically under ``cfg.seed``.

    The resolved config (with ``stage`` filled in) is written next to the
    stage's artifacts.
    """
    if stage is not None:
        cfg = cfg.replace(stage=stage)
    if cfg.stage == "ablation":
        return run_ablation(cfg)
    paths = Paths(cfg)
    out = paths.stage_dir(cfg.stage)
    with directory_lock(cfg.out_dir):
        out.mkdir(parents=True, exist_ok=True)
        torch.manual_seed(derive_seed(cfg.seed, cfg.stage))
        artifacts, summary = STAGES[cfg.stage](cfg, paths, out)
        cfg.save(out / "config.yaml")
    logger.info("stage %s done: %s", cfg.stage, artifacts)
    return StageResult(cfg.stage, 0, artifacts, summary)


def run_pipeline(cfg, stages=("synth-corpus", "train-ea", "train-asgan", "synthesize",
                              "init-aifl", "finetune", "evaluate")):
    return [run_stage(cfg, s) for s in stages]


# ---------------------------------------------------------------------------
# ablations

def _variants(cfg, suite):
    if suite == "refined-layer":
        return [("refined", {"refined": True}), ("normal", {"refined": False})], \
            ("train-asgan", "synthesize", "init-aifl", "finetune", "evaluate")
    if suite == "data-volume":
        return [(f"{k}-sets", {"sets_used": k}) for k in (1, 3, 5)], \
            ("init-aifl", "finetune", "evaluate")
    if suite == "no-discriminator":
        return [("with-dt", {"use_discriminator": True}),
                ("without-dt", {"use_discriminator": False})], \
            ("init-aifl", "finetune", "evaluate")
    raise ConfigurationError(f"unknown ablation suite {suite!r}; choose from {SUITES}")


def run_ablation(cfg, suite=None):
    """Run the paired variants of one ablation suite and write a comparison report.

    Shared stages run once under ``<out_dir>/ablation-<suite>/shared``; each
    variant re-runs only the stages its setting affects, with the same root
    seed, and reports the invariance ratio of its initialized backbone on the
    test identities plus the retrieval metrics after fine-tuning. A
    randomly initialised backbone (the variants' common starting point) is
    reported as reference.
    """
    suite = suite or cfg.suite
    if suite is None:
        raise ConfigurationError("ablation needs a suite: " + ", ".join(SUITES))
    variants, variant_stages = _variants(cfg, suite)
    base = Path(cfg.out_dir) / f"ablation-{suite}"
    shared = cfg.replace(stage="synth-corpus", suite=None, out_dir=str(base / "shared"))
    if suite == "data-volume":
        shared = shared.replace(num_sets=max(5, shared.num_sets))
    shared_stages = ["synth-corpus", "train-ea"]
    if "train-asgan" not in variant_stages:
        shared_stages += ["train-asgan", "synthesize"]
    for s in shared_stages:
        run_stage(shared, s)
    sp = Paths(shared)
    links = {"manifest": str(sp.labeled_manifest),
             "unlabeled_manifest": str(sp.unlabeled_manifest),
             "ea_checkpoint": str(sp.encoder)}
    if "train-asgan" not in variant_stages:
        links.update(generator_checkpoint=str(sp.generator), pairs=str(sp.pairs),
                     num_sets=shared.num_sets)

    test = evaluation_split(shared)
    rows = []
    for name, overrides in variants:
        vcfg = shared.replace(out_dir=str(base / name), **links, **overrides)
        for s in variant_stages:
            run_stage(vcfg, s)
        backbone = load_checkpoint(Paths(vcfg).backbone, "backbone").module
        report = json.loads((Paths(vcfg).stage_dir("evaluate") / "report.json").read_text())
        rows.append({"variant": name, "overrides": overrides,
                     "invariance_ratio": backbone_invariance(vcfg, backbone, test),
                     "mAP": report["mAP"], "cmc": report["cmc"]})
    reference = {"variant": "random-init",
                 "invariance_ratio": backbone_invariance(shared, fresh_backbone(shared), test)}
    comparison = {"suite": suite, "seed": cfg.seed, "variants": rows, "reference": reference}
    (base / "comparison.json").write_text(json.dumps(comparison, indent=2, sort_keys=True) + "\n")
    lines = [f"ablation: {suite} (seed {cfg.seed})",
             f"{'variant':<14}{'inv.ratio':>10}{'mAP':>8}{'CMC@1':>8}{'CMC@5':>8}"]
    for r in rows:
        lines.append(f"{r['variant']:<14}{r['invariance_ratio']:>10.4f}{100 * r['mAP']:>8.2f}"
                     f"{100 * r['cmc']['1']:>8.2f}{100 * r['cmc']['5']:>8.2f}")
    lines.append(f"{'random-init':<14}{reference['invariance_ratio']:>10.4f}")
    (base / "comparison.txt").write_text("\n".join(lines) + "\n")
    cfg.replace(stage="ablation", suite=suite).save(base / "config.yaml")
    return StageResult("ablation", 0, {"comparison": str(base / "comparison.json")}, comparison)
