"""Procedural person corpus: desk-scale stand-in for real ReID data.

Each identity has a fixed body (head size, skin and hair colours, body width,
trouser colour). Each of its outfits paints a parameterised texture inside a
torso region, and the renderer records exactly which pixels it painted as
cloth, so masks are exact by construction.
"""

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

from .exceptions import ConfigurationError, IngestionError
from .imaging import DatasetManifest, ManifestRecord
from .validation import IMAGE_SIZE

PATTERNS = ("solid", "hstripes", "vstripes", "checker", "diagonal")


@dataclass(frozen=True)
class PersonStyle:
    skin: tuple
    hair: tuple
    trousers: tuple
    head_width: float
    head_height: float
    body_width: float


@dataclass(frozen=True)
class ClothStyle:
    primary: tuple
    secondary: tuple
    pattern: str
    period: float


def _color(rng, lo=0, hi=255):
    return tuple(int(v) for v in rng.integers(lo, hi + 1, size=3))


def sample_person(rng):
    return PersonStyle(
        skin=_color(rng, 90, 240),
        hair=_color(rng, 0, 140),
        trousers=_color(rng),
        head_width=float(rng.uniform(0.22, 0.34)),
        head_height=float(rng.uniform(0.12, 0.17)),
        body_width=float(rng.uniform(0.48, 0.72)),
    )


def sample_cloth(rng):
    return ClothStyle(
        primary=_color(rng),
        secondary=_color(rng),
        pattern=PATTERNS[int(rng.integers(len(PATTERNS)))],
        period=float(rng.uniform(0.06, 0.16)),
    )


def _texture(cloth, yy, xx, h):
    """Boolean map choosing the secondary colour, on absolute pixel grids."""
    p = max(2.0, cloth.period * h)
    if cloth.pattern == "solid":
        return np.zeros_like(yy, dtype=bool)
    if cloth.pattern == "hstripes":
        return (yy // (p / 2)) % 2 == 1
    if cloth.pattern == "vstripes":
        return (xx // (p / 2)) % 2 == 1
    if cloth.pattern == "checker":
        return ((yy // (p / 2)) + (xx // (p / 2))) % 2 == 1
    return ((yy + xx) // (p / 2)) % 2 == 1


def sample_background(rng):
    """Top and bottom colours of a vertical background gradient."""
    return _color(rng, 60, 200), _color(rng, 60, 200)


def render_person(person, cloth, rng, size=IMAGE_SIZE, background=None):
    """Render one image.

    ``background`` is a ``(top, bottom)`` colour pair, e.g. a camera's scene;
    when omitted a fresh one is drawn from ``rng``.

    Returns ``(rgb, cloth_region)``: an ``(H, W, 3)`` uint8 array and the
    boolean set of pixels painted with the cloth texture.
    """
    h, w = size
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    dx = rng.uniform(-0.06, 0.06) * w
    dy = rng.uniform(-0.03, 0.03) * h
    gain = rng.uniform(0.9, 1.1)

    if background is None:
        background = sample_background(rng)
    bg_top = np.array(background[0], dtype=np.float64)
    bg_bottom = np.array(background[1], dtype=np.float64)
    t = (yy / max(h - 1, 1))[..., None]
    canvas = bg_top * (1 - t) + bg_bottom * t
    cloth_region = np.zeros((h, w), dtype=bool)

    cx = w / 2 + dx

    def paint(region, color):
        canvas[region] = np.asarray(color, dtype=np.float64)

    head_top = 0.05 * h + dy
    head_bottom = head_top + person.head_height * h
    hw = person.head_width * w / 2
    head = (yy >= head_top) & (yy < head_bottom) & (np.abs(xx - cx) < hw)
    paint(head, person.skin)
    hair = head & (yy < head_top + 0.3 * (head_bottom - head_top))
    paint(hair, person.hair)

    neck_bottom = head_bottom + 0.02 * h
    neck = (yy >= head_bottom) & (yy < neck_bottom) & (np.abs(xx - cx) < hw * 0.45)
    paint(neck, person.skin)

    torso_top = neck_bottom
    torso_bottom = torso_top + 0.36 * h
    bw = person.body_width * w / 2
    shoulder = 0.04 * h
    # shoulders slope over the first few rows
    half = np.where(yy < torso_top + shoulder,
                    bw - (torso_top + shoulder - yy) * 0.8, bw)
    torso = (yy >= torso_top) & (yy < torso_bottom) & (np.abs(xx - cx) < half)
    secondary = _texture(cloth, yy - torso_top, xx - cx, h)
    paint(torso & ~secondary, cloth.primary)
    paint(torso & secondary, cloth.secondary)
    cloth_region |= torso

    leg_bottom = min(h, torso_bottom + 0.5 * h)
    gap = max(1.0, 0.04 * w)
    legs = ((yy >= torso_bottom) & (yy < leg_bottom)
            & (np.abs(xx - cx) < bw * 0.85) & (np.abs(xx - cx) >= gap / 2))
    paint(legs, person.trousers)

    canvas = canvas * gain + rng.normal(0.0, 3.0, size=canvas.shape)
    rgb = np.clip(np.round(canvas), 0, 255).astype(np.uint8)
    return rgb, cloth_region


def generate_synthetic_corpus(out_dir, num_ids, cloths_per_id, images_per_cloth, seed=0,
                              size=IMAGE_SIZE, num_cameras=None):
    """Render a corpus and write images, exact masks and ``manifest.jsonl``.

    Records carry ``person_id`` and ``group_id = "cloth<c>"`` (the outfit
    index of that person). Without ``num_cameras`` every shot has its own
    random background and ``camera_id = "cam<k>"`` is the shot index. With
    ``num_cameras`` the corpus has that many fixed scenes; each shot is taken
    by a uniformly drawn camera and ``camera_id`` names it.
    """
    for name, v in (("num_ids", num_ids), ("cloths_per_id", cloths_per_id),
                    ("images_per_cloth", images_per_cloth)):
        if int(v) < 1:
            raise ConfigurationError(f"{name} must be >= 1, got {v}")
    out_dir = Path(out_dir)
    try:
        (out_dir / "images").mkdir(parents=True, exist_ok=True)
        (out_dir / "masks").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IngestionError(f"cannot create corpus directory {out_dir}: {exc}") from exc

    root = np.random.SeedSequence(seed)
    id_seqs = root.spawn(num_ids)
    scenes = None
    if num_cameras is not None:
        if int(num_cameras) < 1:
            raise ConfigurationError(f"num_cameras must be >= 1, got {num_cameras}")
        scene_rng = np.random.default_rng(root.spawn(1)[0])
        scenes = [sample_background(scene_rng) for _ in range(int(num_cameras))]
    records = []
    for pid, id_seq in enumerate(id_seqs):
        person_seq, *cloth_seqs = id_seq.spawn(1 + cloths_per_id)
        person = sample_person(np.random.default_rng(person_seq))
        for c, cloth_seq in enumerate(cloth_seqs):
            style_seq, *shot_seqs = cloth_seq.spawn(1 + images_per_cloth)
            cloth = sample_cloth(np.random.default_rng(style_seq))
            for k, shot_seq in enumerate(shot_seqs):
                shot_rng = np.random.default_rng(shot_seq)
                camera, background = k, None
                if scenes is not None:
                    camera = int(shot_rng.integers(len(scenes)))
                    background = scenes[camera]
                rgb, region = render_person(person, cloth, shot_rng, size, background)
                stem = f"p{pid:04d}_c{c:02d}_{k:02d}"
                img_rel = f"images/{stem}.png"
                mask_rel = f"masks/{stem}.png"
                try:
                    PILImage.fromarray(rgb, mode="RGB").save(out_dir / img_rel, format="PNG")
                    PILImage.fromarray(region.astype(np.uint8) * 255, mode="L").save(
                        out_dir / mask_rel, format="PNG")
                except OSError as exc:
                    raise IngestionError(f"cannot write corpus image {stem}: {exc}") from exc
                records.append(ManifestRecord(img_rel, pid, f"cloth{c}", f"cam{camera}",
                                              mask_rel))
    manifest = DatasetManifest(records, root=str(out_dir))
    manifest.save(out_dir / "manifest.jsonl")
    return manifest
