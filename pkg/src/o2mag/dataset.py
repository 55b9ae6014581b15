"""Procedural texture corpus with exact-mask defect overlays.

Three texture families (grid, stripes, speckle) render deterministic 32x32
RGB images in [-1, 1] from (class, seed). Defects (hole, scratch,
color-patch) composite onto a normal image with a soft edge, but only where
the binarized support (alpha > 0.5) is set, so the emitted ground-truth mask
equals the changed-pixel set exactly. The manifest splits anomalies into a
reference third and a held-out test two-thirds, plus normal pools for
training and testing; splits are disjoint by path and seed lineage.
"""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image

from .numerics import DTYPE

IMAGE_SIZE = 32
TEXTURE_CLASSES = ("grid", "stripes", "speckle")
DEFECT_TYPES = ("hole", "scratch", "color-patch")

# orientation-sensitive classes keep only flips; the rest also rotate
AUGMENT_POLICIES = {
    "grid": ("identity", "hflip", "vflip", "rot90", "rot180", "rot270"),
    "stripes": ("identity", "hflip", "vflip"),
    "speckle": ("identity", "hflip", "vflip", "rot90", "rot180", "rot270",
                "translate"),
}

# minimum per-channel change on mask pixels, in [-1, 1] units
_MIN_DELTA = np.float32(0.08)


def _stable_hash(text: str) -> int:
    return zlib.crc32(text.encode("utf-8"))


def _class_rng(cls: str, seed: int) -> np.random.Generator:
    return np.random.default_rng([_stable_hash(cls), int(seed)])


def gen_normal(cls: str, seed: int) -> np.ndarray:
    """Deterministic 32x32 RGB texture in [-1, 1] for a known class."""
    if cls not in TEXTURE_CLASSES:
        raise KeyError(f"unknown texture class {cls!r}")
    rng = _class_rng(cls, seed)
    n = IMAGE_SIZE
    yy, xx = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    if cls == "grid":
        period = 8
        phase_y = rng.integers(0, period)
        phase_x = rng.integers(0, period)
        bar_y = ((yy + phase_y) % period) < 2
        bar_x = ((xx + phase_x) % period) < 2
        base = np.where(bar_y | bar_x, -0.55, 0.55)
        tint = rng.uniform(-0.08, 0.08, size=3)
        img = base[..., None] + tint[None, None, :]
    elif cls == "stripes":
        period = 6
        phase = rng.uniform(0, period)
        wave = np.sin(2 * math.pi * (xx + phase) / period)
        warp = 0.6 * np.sin(2 * math.pi * yy / 24 + rng.uniform(0, 2 * math.pi))
        wave = np.sin(2 * math.pi * (xx + phase + warp) / period)
        img = np.stack([0.5 * wave + 0.15, 0.5 * wave, 0.5 * wave - 0.15], axis=-1)
    else:  # speckle
        field = rng.normal(0.0, 1.0, size=(n // 4, n // 4))
        field = np.kron(field, np.ones((4, 4)))
        fine = rng.normal(0.0, 0.35, size=(n, n))
        lum = np.tanh(0.8 * (field + fine))
        tint = rng.uniform(-0.15, 0.15, size=3)
        img = 0.55 * lum[..., None] + tint[None, None, :]
    noise = rng.normal(0.0, 0.02, size=(n, n, 3))
    return np.clip(img + noise, -1.0, 1.0).astype(DTYPE)


@dataclass(frozen=True)
class DefectSpec:
    """Defect family with pixel-size bounds and intensity parameters."""

    kind: str
    min_extent: int = 4
    max_extent: int = 12
    intensity: float = 0.9

    def __post_init__(self):
        if self.kind not in DEFECT_TYPES:
            raise KeyError(f"unknown defect type {self.kind!r}")
        if not 1 <= self.min_extent <= self.max_extent <= IMAGE_SIZE:
            raise ValueError("degenerate defect size range")


def _render_alpha(spec: DefectSpec, rng: np.random.Generator) -> np.ndarray:
    """Soft-edged alpha field in [0, 1] whose >0.5 support is the defect."""
    n = IMAGE_SIZE
    yy, xx = np.meshgrid(np.arange(n, dtype=np.float64),
                         np.arange(n, dtype=np.float64), indexing="ij")
    extent = rng.integers(spec.min_extent, spec.max_extent + 1)
    margin = extent / 2 + 1
    cy = rng.uniform(margin, n - margin)
    cx = rng.uniform(margin, n - margin)
    if spec.kind == "hole":
        ry = extent / 2
        rx = extent / 2 * rng.uniform(0.6, 1.0)
        theta = rng.uniform(0, math.pi)
        ys, xs = yy - cy, xx - cx
        yr = ys * math.cos(theta) + xs * math.sin(theta)
        xr = -ys * math.sin(theta) + xs * math.cos(theta)
        dist = np.sqrt((yr / ry) ** 2 + (xr / rx) ** 2)
        alpha = np.clip(1.0 - (dist - 1.0) / (1.0 / max(ry, 1.0)), 0.0, 1.0)
        alpha[dist <= 1.0] = 1.0
    elif spec.kind == "scratch":
        theta = rng.uniform(0, math.pi)
        length = extent
        width = rng.uniform(0.7, 1.4)
        dy, dx = math.sin(theta), math.cos(theta)
        ys, xs = yy - cy, xx - cx
        along = ys * dy + xs * dx
        across = -ys * dx + xs * dy
        curve = rng.uniform(-0.08, 0.08)
        across = across + curve * along * along / max(length, 1)
        inside = (np.abs(along) <= length / 2)
        dist = np.abs(across) / width
        alpha = np.where(inside, np.clip(1.5 - dist, 0.0, 1.0), 0.0)
    else:  # color-patch: blobby union of two ellipses
        alpha = np.zeros((n, n))
        for _ in range(2):
            ry = max(2.0, extent / 2 * rng.uniform(0.5, 1.0))
            rx = max(2.0, extent / 2 * rng.uniform(0.5, 1.0))
            oy = cy + rng.uniform(-extent / 4, extent / 4)
            ox = cx + rng.uniform(-extent / 4, extent / 4)
            dist = np.sqrt(((yy - oy) / ry) ** 2 + ((xx - ox) / rx) ** 2)
            blob = np.clip(1.0 - (dist - 0.9) / 0.35, 0.0, 1.0)
            blob[dist <= 0.9] = 1.0
            alpha = np.maximum(alpha, blob)
    return alpha


def _defect_color(spec: DefectSpec, rng: np.random.Generator) -> np.ndarray:
    """Per-instance appearance: every rendered defect has its own look.

    Real defects vary piece to piece; the draw ranges keep each family
    recognizable (holes dark, scratches bright, patches chromatic) while a
    single population template cannot describe any one instance exactly.
    """
    if spec.kind == "hole":
        depth = rng.uniform(0.45, spec.intensity + 0.05)
        return np.array([-depth] * 3) + rng.uniform(-0.15, 0.15, 3)
    if spec.kind == "scratch":
        shine = rng.uniform(0.45, spec.intensity + 0.05)
        return np.array([shine] * 3) + rng.uniform(-0.18, 0.18, 3)
    # chromatic patch: a continuous hue, rescaled so it stays saturated
    color = rng.uniform(-1.0, 1.0, 3)
    peak = np.abs(color).max()
    if peak < 0.6:
        color = color / max(peak, 1e-6) * rng.uniform(0.6, 0.95)
    return color


def gen_defect(cls: str, spec: DefectSpec, seed: int, *, return_normal: bool = False):
    """Composite a defect onto a fresh normal image; mask is the exact support.

    Pixels outside the mask are bit-equal to the underlying normal image;
    inside, every channel moves by at least a minimum delta so the support
    and the changed-pixel set coincide exactly. ``return_normal`` also hands
    back the underlying defect-free image for contract checks.
    """
    rng = np.random.default_rng([_stable_hash(cls), _stable_hash(spec.kind),
                                 int(seed)])
    normal = gen_normal(cls, int(rng.integers(0, 2 ** 31)))
    for _ in range(16):
        alpha = _render_alpha(spec, rng)
        mask = (alpha > 0.5).astype(np.uint8)
        if mask.sum() >= 3:
            break
    else:
        raise ValueError(f"degenerate defect: empty support for {spec}")
    color = _defect_color(spec, rng).astype(np.float32)
    blend = np.where(mask[..., None] == 1, alpha[..., None].astype(np.float32), 0.0)
    img = normal * (1.0 - blend) + color[None, None, :] * blend
    # enforce a visible change on every mask pixel (color coincidences)
    delta = img - normal
    weak = (np.abs(delta).max(axis=-1) < _MIN_DELTA) & (mask == 1)
    if weak.any():
        push = np.where(normal[weak] <= 0.0, _MIN_DELTA, -_MIN_DELTA)
        img[weak] += push
    img = np.clip(img, -1.0, 1.0)
    still_weak = (np.abs(img - normal).max(axis=-1) == 0.0) & (mask == 1)
    if still_weak.any():
        img[still_weak] = np.where(normal[still_weak] <= 0.0, 1.0, -1.0)
    img = img.astype(DTYPE)
    if return_normal:
        return img, mask, normal
    return img, mask


def augment_normal(image: np.ndarray, cls: str, rng: np.random.Generator) -> np.ndarray:
    """One uniformly chosen allowed transform; flips only for oriented classes."""
    ops = AUGMENT_POLICIES[cls]
    op = ops[rng.integers(0, len(ops))]
    return apply_transform(image, op, rng)


def apply_transform(image: np.ndarray, op: str, rng=None) -> np.ndarray:
    if op == "identity":
        return image.copy()
    if op == "hflip":
        return image[:, ::-1].copy()
    if op == "vflip":
        return image[::-1, :].copy()
    if op == "rot90":
        return np.rot90(image, 1, axes=(0, 1)).copy()
    if op == "rot180":
        return np.rot90(image, 2, axes=(0, 1)).copy()
    if op == "rot270":
        return np.rot90(image, 3, axes=(0, 1)).copy()
    if op == "translate":
        dy = int(rng.integers(-4, 5))
        dx = int(rng.integers(-4, 5))
        return np.roll(np.roll(image, dy, axis=0), dx, axis=1).copy()
    raise KeyError(f"unknown transform {op!r}")


def gen_target_masks(cls: str, kind: str, count: int, seed: int,
                     spec: Optional[DefectSpec] = None) -> list[np.ndarray]:
    """Non-empty binary masks from the defect shape family, image-independent."""
    if count < 1:
        raise ValueError("count must be >= 1")
    spec = spec if spec is not None else DefectSpec(kind)
    rng = np.random.default_rng([_stable_hash("target-mask"), _stable_hash(cls),
                                 _stable_hash(kind), int(seed)])
    masks = []
    while len(masks) < count:
        alpha = _render_alpha(spec, rng)
        mask = (alpha > 0.5).astype(np.uint8)
        if mask.sum() >= 3:  # empty and near-empty draws are filtered out
            masks.append(mask)
    return masks


# ---------------------------------------------------------------------------
# PNG and manifest I/O
# ---------------------------------------------------------------------------

def image_to_png(img: np.ndarray, path):
    arr = np.clip((np.asarray(img, np.float32) + 1.0) * 127.5, 0, 255)
    Image.fromarray(np.round(arr).astype(np.uint8), mode="RGB").save(path)


def png_to_image(path) -> np.ndarray:
    arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float32)
    return (arr / 127.5 - 1.0).astype(DTYPE)


def mask_to_png(mask: np.ndarray, path):
    Image.fromarray((np.asarray(mask) > 0).astype(np.uint8) * 255, mode="L").save(path)


def png_to_mask(path) -> np.ndarray:
    arr = np.asarray(Image.open(path).convert("L"))
    return (arr > 127).astype(np.uint8)


@dataclass(frozen=True)
class ManifestRecord:
    image: str               # path relative to the manifest
    mask: Optional[str]      # None for defect-free images
    cls: str
    defect: str              # defect type or "good"
    split: str               # reference | test | train-normal
    seed: int


class DatasetManifest:
    """Record list backed by a tab-separated file next to the images."""

    SPLITS = ("reference", "test", "train-normal")

    def __init__(self, root: Path, records: list[ManifestRecord]):
        self.root = Path(root)
        self.records = records

    def select(self, split: Optional[str] = None, cls: Optional[str] = None,
               defect: Optional[str] = None) -> list[ManifestRecord]:
        out = []
        for r in self.records:
            if split is not None and r.split != split:
                continue
            if cls is not None and r.cls != cls:
                continue
            if defect is not None and r.defect != defect:
                continue
            out.append(r)
        return out

    def image_path(self, rec: ManifestRecord) -> Path:
        return self.root / rec.image

    def mask_path(self, rec: ManifestRecord) -> Optional[Path]:
        return None if rec.mask is None else self.root / rec.mask

    def load_image(self, rec: ManifestRecord) -> np.ndarray:
        return png_to_image(self.image_path(rec))

    def load_mask(self, rec: ManifestRecord) -> np.ndarray:
        if rec.mask is None:
            raise ValueError(f"record {rec.image} has no mask")
        return png_to_mask(self.mask_path(rec))

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            for r in self.records:
                fields = (r.image, r.mask if r.mask else "-", r.cls, r.defect,
                          r.split, str(r.seed))
                fh.write("\t".join(fields) + "\n")

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        records = []
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                line = line.rstrip("\n")
                if not line:
                    continue
                image, mask, c, defect, split, seed = line.split("\t")
                records.append(ManifestRecord(image, None if mask == "-" else mask,
                                              c, defect, split, int(seed)))
        return cls(path.parent, records)


def build_corpus(root, *, classes=TEXTURE_CLASSES, defects=DEFECT_TYPES,
                 anomalies_per_pair: int = 180, train_normals_per_class: int = 120,
                 test_normals_per_class: int = 40, seed: int = 0,
                 progress=None) -> DatasetManifest:
    """Render the full corpus to PNG files and write the manifest.

    The first third of each (class, defect) anomaly list is the reference
    split; the remaining two thirds are the test split. Seed lineages are
    kept disjoint between splits by construction.
    """
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    records: list[ManifestRecord] = []
    base = np.random.SeedSequence(seed)
    offsets = base.generate_state(4)

    for ci, cls in enumerate(classes):
        for split, count, start in (("train-normal", train_normals_per_class, offsets[0]),
                                    ("test", test_normals_per_class, offsets[1])):
            for i in range(count):
                rec_seed = int((start + ci * 100003 + i) % (2 ** 31))
                img = gen_normal(cls, rec_seed)
                name = f"{cls}/{split}-good-{i:04d}.png"
                (root / cls).mkdir(exist_ok=True)
                image_to_png(img, root / name)
                records.append(ManifestRecord(name, None, cls, "good", split, rec_seed))
        for di, kind in enumerate(defects):
            spec = DefectSpec(kind)
            n_ref = anomalies_per_pair // 3
            for i in range(anomalies_per_pair):
                split = "reference" if i < n_ref else "test"
                rec_seed = int((offsets[2] + ci * 1000003 + di * 10007 + i) % (2 ** 31))
                img, mask = gen_defect(cls, spec, rec_seed)
                stem = f"{cls}/{split}-{kind}-{i:04d}"
                image_to_png(img, root / f"{stem}.png")
                mask_to_png(mask, root / f"{stem}-mask.png")
                records.append(ManifestRecord(f"{stem}.png", f"{stem}-mask.png",
                                              cls, kind, split, rec_seed))
            if progress is not None:
                progress(cls, kind)

    manifest = DatasetManifest(root, records)
    manifest.save(root / "manifest.tsv")
    return manifest


def training_set_from_manifest(manifest: DatasetManifest, vocab, *, augment=True):
    """Denoiser training pairs: augmented normals plus reference anomalies.

    Normal images alternate between the plain class template and marker
    phrasings ("... with a intact/smooth/clean"), which binds the negative
    markers to normal appearance.
    """
    from .denoiser import NEGATIVE_MARKERS, DenoiserTrainingSet

    markers = sorted(set(NEGATIVE_MARKERS.values()))
    images, prompts, variants, classes = [], [], [], []
    for rec in manifest.select(split="train-normal"):
        images.append(manifest.load_image(rec))
        plain = np.asarray(vocab.template_ids(rec.cls), dtype=np.int64)
        marked = [np.asarray(vocab.negative_template_ids(rec.cls, m), dtype=np.int64)
                  for m in markers]
        prompts.append(plain)
        variants.append([plain, plain, plain] + marked)  # plain half the time
        classes.append(rec.cls)
    for rec in manifest.select(split="reference"):
        images.append(manifest.load_image(rec))
        ids = np.asarray(vocab.template_ids(rec.cls, rec.defect), dtype=np.int64)
        prompts.append(ids)
        variants.append([ids])
        classes.append(rec.cls)
    images = np.stack(images)
    prompts = np.asarray(prompts, dtype=np.int64)

    aug_fn = None
    if augment:
        def aug_fn(rng, idx):
            return augment_normal(images[idx], classes[idx], rng)

    return DenoiserTrainingSet(images, prompts, augment=aug_fn,
                               prompt_variants=variants)
