"""Procedural toy-face dataset: labeled (image, mask, identity) triples.

Faces are rasterized from 8 identity traits as flat-colored ellipse/box parts
on a normalized coordinate grid, with per-record nuisance (translation, global
tint, background color). The label map is the exact rasterization of the parts
under painter's-order precedence, so masks and images always agree.

Images live in [-1, 1]; file interchange is 8-bit PNG mapped linearly. The
renderer quantizes to the 8-bit grid before converting to float, so an
in-memory record and its disk round-trip are bit-identical.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ConfigurationError, IngestionError, ShapeError, ValidationError

CLASS_NAMES = ("background", "skin", "hair", "eyes", "eyebrows", "mouth")
NUM_CLASSES = len(CLASS_NAMES)

# train:test split ratio is 14:1; bucket 0 of 15 is the test bucket (this
# puts >= 2 identities in the test split for any identity count >= 16, which
# the attack protocol needs)
SPLIT_PARTS = 15
TEST_BUCKET = 0

TRAIT_NAMES = (
    "face_aspect",
    "skin_tone",
    "hair_tone",
    "hair_length",
    "eye_color",
    "eye_spacing",
    "eyebrow_thickness",
    "mouth_width",
)


@dataclass(frozen=True)
class DataConfig:
    resolution: int = 64
    identity_count: int = 150
    variations_per_identity: int = 10
    seed: int = 0
    disjoint_identities: bool = True
    class_names: tuple[str, ...] = CLASS_NAMES

    def __post_init__(self):
        if self.resolution < 32:
            raise ConfigurationError(
                f"resolution must be >= 32, got {self.resolution}"
            )
        if tuple(self.class_names) != CLASS_NAMES:
            raise ConfigurationError(
                "the toy generator supports exactly the classes "
                f"{CLASS_NAMES}, got {tuple(self.class_names)}"
            )
        if self.identity_count < 1 or self.variations_per_identity < 1:
            raise ConfigurationError("identity_count and variations_per_identity must be >= 1")


@dataclass(frozen=True)
class ToyIdentitySpec:
    identity_id: int
    trait_vector: np.ndarray  # 8 reals in [0, 1], see TRAIT_NAMES

    def __post_init__(self):
        tv = np.asarray(self.trait_vector, dtype=np.float64)
        if tv.shape != (8,):
            raise ValidationError(f"trait_vector must have 8 entries, got shape {tv.shape}")
        if tv.min() < 0.0 or tv.max() > 1.0:
            raise ValidationError("trait_vector entries must lie in [0, 1]")
        object.__setattr__(self, "trait_vector", tv)


@dataclass
class FaceRecord:
    image: np.ndarray  # (H, W, 3) float32 in [-1, 1]
    mask: np.ndarray  # (H, W) int64 labels in [0, C)
    identity_id: int
    variation_seed: int


@dataclass
class SemanticMask:
    """One-hot mask: C binary planes forming a per-pixel partition."""

    channels: np.ndarray  # (C, H, W) float32 in {0, 1}
    class_names: tuple[str, ...] = CLASS_NAMES

    @property
    def num_classes(self) -> int:
        return self.channels.shape[0]

    def validate_partition(self):
        sums = self.channels.sum(axis=0)
        if not np.array_equal(sums, np.ones_like(sums)):
            bad = np.argwhere(sums != 1.0)
            r, c = bad[0]
            raise ValidationError(
                f"mask is not a partition: channel sum {sums[r, c]} at pixel ({r}, {c})"
            )

    def decode(self) -> np.ndarray:
        return self.channels.argmax(axis=0).astype(np.int64)


def _stream(seed: int, purpose: int, index: int) -> np.random.Generator:
    """Independent Philox stream per (seed, purpose, index)."""
    key = [np.uint64(seed) ^ (np.uint64(purpose) << np.uint64(48)), np.uint64(index)]
    return np.random.Generator(np.random.Philox(key=key))


def identity_spec(identity_id: int, seed: int) -> ToyIdentitySpec:
    """Derive an identity's trait vector from (identity_id, dataset seed)."""
    if identity_id < 0:
        raise ValidationError(f"identity_id must be >= 0, got {identity_id}")
    rng = _stream(seed, 1, identity_id)
    return ToyIdentitySpec(identity_id=identity_id, trait_vector=rng.random(8))


def _lerp(a, b, t):
    return tuple(np.array(a) + (np.array(b) - np.array(a)) * t)


def generate_record(spec: ToyIdentitySpec, variation_seed: int, cfg: DataConfig) -> FaceRecord:
    """Render one face. Geometry/part colors come from the trait vector;
    translation (<= 5% of width), global tint, and background color come from
    the variation seed. The mask is the exact rasterization of the parts."""
    res = cfg.resolution
    t = spec.trait_vector
    rng = _stream(cfg.seed, 2, variation_seed)
    dx, dy = (rng.random(2) - 0.5) * 2.0 * 0.05
    background = 0.35 + rng.random(3) * 0.5
    tint = 1.0 + 0.10 * (rng.random(3) - 0.5)

    # pixel-center coordinate grid in [0, 1]
    ys, xs = np.mgrid[0:res, 0:res]
    x = (xs + 0.5) / res
    y = (ys + 0.5) / res

    def ellipse(cx, cy, sa, sb):
        return ((x - cx) / sa) ** 2 + ((y - cy) / sb) ** 2 <= 1.0

    cx, cy = 0.5 + dx, 0.52 + dy
    b = 0.33
    a = b * (0.60 + 0.30 * t[0])

    face = ellipse(cx, cy, a, b)
    outer = ellipse(cx, cy - 0.02, a * 1.18, b * 1.10)
    opening = ellipse(cx, cy + 0.07, a * 0.90, b * 0.85)
    hair = outer & ~opening & (y <= cy + b * (-0.35 + 1.10 * t[3]))

    eye_off = a * (0.30 + 0.22 * t[5])
    eye_y = cy - 0.12 * b
    eyes = ellipse(cx - eye_off, eye_y, a * 0.11, b * 0.085) | ellipse(
        cx + eye_off, eye_y, a * 0.11, b * 0.085
    )

    brow_y = eye_y - 0.18 * b
    # half-height floor keeps >= 1 pixel row at the minimum resolution (32)
    brow_h = b * (0.055 + 0.075 * t[6])
    brow_w = a * 0.14
    brows = (
        (np.abs(x - (cx - eye_off)) <= brow_w) | (np.abs(x - (cx + eye_off)) <= brow_w)
    ) & (np.abs(y - brow_y) <= brow_h)

    mouth = ellipse(cx, cy + 0.50 * b, a * (0.20 + 0.22 * t[7]), b * 0.07)

    skin_color = _lerp((0.96, 0.83, 0.70), (0.45, 0.31, 0.22), t[1])
    hair_color = _lerp((0.90, 0.78, 0.50), (0.06, 0.05, 0.04), t[2])
    eye_color = _lerp((0.35, 0.22, 0.10), (0.20, 0.45, 0.75), t[4])
    brow_color = tuple(np.array(hair_color) * 0.55)
    mouth_color = (0.76, 0.26, 0.30)

    labels = np.zeros((res, res), dtype=np.int64)
    rgb = np.empty((res, res, 3), dtype=np.float64)
    rgb[:] = background
    # painter's order: background < skin < hair < eyes < eyebrows < mouth
    for region, label, color in (
        (face, 1, skin_color),
        (hair, 2, hair_color),
        (eyes, 3, eye_color),
        (brows, 4, brow_color),
        (mouth, 5, mouth_color),
    ):
        labels[region] = label
        rgb[region] = color

    rgb = np.clip(rgb * tint, 0.0, 1.0)
    u8 = np.round(rgb * 255.0).astype(np.uint8)
    image = image_from_uint8(u8)
    return FaceRecord(image=image, mask=labels, identity_id=spec.identity_id, variation_seed=variation_seed)


def image_from_uint8(u8: np.ndarray) -> np.ndarray:
    return (u8.astype(np.float32) / 127.5) - 1.0


def image_to_uint8(image: np.ndarray) -> np.ndarray:
    return np.round((np.clip(image, -1.0, 1.0) + 1.0) * 127.5).astype(np.uint8)


def one_hot(mask_labels: np.ndarray, num_classes: int) -> SemanticMask:
    """One-hot encode a label map; channel j is 1 exactly where label == j."""
    labels = np.asarray(mask_labels)
    if labels.ndim != 2:
        raise ShapeError(f"expected a 2-d label map, got shape {labels.shape}")
    bad = np.argwhere((labels < 0) | (labels >= num_classes))
    if bad.size:
        r, c = bad[0]
        raise ValidationError(
            f"label {labels[r, c]} out of range [0, {num_classes}) at pixel ({r}, {c})"
        )
    channels = np.zeros((num_classes, *labels.shape), dtype=np.float32)
    for j in range(num_classes):
        channels[j] = labels == j
    names = CLASS_NAMES if num_classes == NUM_CLASSES else tuple(f"class_{j}" for j in range(num_classes))
    return SemanticMask(channels=channels, class_names=names)


def split_bucket(key: int) -> int:
    return key % SPLIT_PARTS


def record_split(index: int, identity_id: int, disjoint_identities: bool) -> str:
    key = identity_id if disjoint_identities else index
    return "test" if split_bucket(key) == TEST_BUCKET else "train"


def generate_dataset_records(cfg: DataConfig) -> list[FaceRecord]:
    """All records in deterministic order: index = identity * variations + v."""
    records = []
    for identity_id in range(cfg.identity_count):
        spec = identity_spec(identity_id, cfg.seed)
        for v in range(cfg.variations_per_identity):
            records.append(generate_record(spec, v, cfg))
    return records


def write_dataset(root: str | Path, cfg: DataConfig) -> int:
    """Write the toy dataset directory: images/, masks/, meta.json."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    count = 0
    for identity_id in range(cfg.identity_count):
        spec = identity_spec(identity_id, cfg.seed)
        for v in range(cfg.variations_per_identity):
            rec = generate_record(spec, v, cfg)
            idx = identity_id * cfg.variations_per_identity + v
            Image.fromarray(image_to_uint8(rec.image)).save(root / "images" / f"{idx:05d}.png")
            Image.fromarray(rec.mask.astype(np.uint8), mode="L").save(
                root / "masks" / f"{idx:05d}.png"
            )
            count += 1
    meta = {
        "layout": "toy",
        "seed": cfg.seed,
        "identity_count": cfg.identity_count,
        "variations_per_identity": cfg.variations_per_identity,
        "resolution": cfg.resolution,
        "class_names": list(cfg.class_names),
        "disjoint_identities": cfg.disjoint_identities,
    }
    (root / "meta.json").write_text(json.dumps(meta, indent=2))
    return count


def read_meta(root: Path) -> dict:
    meta_path = root / "meta.json"
    if not meta_path.exists():
        raise IngestionError(f"missing meta.json under {root}")
    return json.loads(meta_path.read_text())


def _load_image(path: Path) -> np.ndarray:
    return image_from_uint8(np.asarray(Image.open(path).convert("RGB")))


def _load_mask(path: Path, num_classes: int) -> np.ndarray:
    labels = np.asarray(Image.open(path)).astype(np.int64)
    if labels.ndim == 3:
        labels = labels[..., 0]
    bad = np.argwhere(labels >= num_classes)
    if bad.size:
        r, c = bad[0]
        raise ValidationError(
            f"{path.name}: label {labels[r, c]} at pixel ({r}, {c}) exceeds class count {num_classes}"
        )
    return labels


def load_dataset(
    root_path: str | Path,
    layout: str = "toy",
    split: str = "train",
    num_classes: int | None = None,
) -> list[FaceRecord]:
    """Load records for one split in deterministic (filename) order.

    toy layout: directory written by write_dataset; identity and variation are
    recovered from the record index. external-mask-dir layout: images/ and
    masks/ with matching basenames; identity defaults to the record index
    unless meta.json carries an "identities" list.
    """
    if split not in ("train", "test"):
        raise ValidationError(f"split must be 'train' or 'test', got {split!r}")
    root = Path(root_path)
    if layout == "toy":
        meta = read_meta(root)
        variations = int(meta["variations_per_identity"])
        disjoint = bool(meta.get("disjoint_identities", True))
        C = len(meta["class_names"])
        image_paths = sorted((root / "images").glob("*.png"))
        records = []
        for path in image_paths:
            idx = int(path.stem)
            identity_id = idx // variations
            if record_split(idx, identity_id, disjoint) != split:
                continue
            mask_path = root / "masks" / path.name
            if not mask_path.exists():
                raise IngestionError(f"missing mask for image {path.name}")
            records.append(
                FaceRecord(
                    image=_load_image(path),
                    mask=_load_mask(mask_path, C),
                    identity_id=identity_id,
                    variation_seed=idx % variations,
                )
            )
        return records
    if layout == "external-mask-dir":
        images_dir, masks_dir = root / "images", root / "masks"
        if not images_dir.is_dir() or not masks_dir.is_dir():
            raise IngestionError(f"external layout needs images/ and masks/ under {root}")
        meta = json.loads((root / "meta.json").read_text()) if (root / "meta.json").exists() else {}
        C = num_classes or (len(meta["class_names"]) if "class_names" in meta else None)
        if C is None:
            raise ConfigurationError(
                "external-mask-dir layout needs a class count (meta.json class_names or num_classes)"
            )
        identities = meta.get("identities")
        disjoint = bool(meta.get("disjoint_identities", False))
        records = []
        image_paths = sorted(images_dir.iterdir())
        missing = [p.name for p in image_paths if not (masks_dir / (p.stem + ".png")).exists()]
        if missing:
            raise IngestionError(f"missing masks for images: {', '.join(missing)}")
        for idx, path in enumerate(image_paths):
            identity_id = int(identities[idx]) if identities else idx
            if record_split(idx, identity_id, disjoint) != split:
                continue
            records.append(
                FaceRecord(
                    image=_load_image(path),
                    mask=_load_mask(masks_dir / (path.stem + ".png"), C),
                    identity_id=identity_id,
                    variation_seed=idx,
                )
            )
        return records
    raise ConfigurationError(f"unknown layout {layout!r}; expected 'toy' or 'external-mask-dir'")
