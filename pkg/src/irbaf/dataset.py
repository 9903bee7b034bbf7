"""Two-domain segmentation data: in-memory model, on-disk layout, synthetic generation.

On disk a dataset lives under one root::

    <root>/manifest.json
    <root>/images/<id>.png   8-bit RGB
    <root>/masks/<id>.png    8-bit single channel, pixel value = class id

Class id 0 is always background.
"""
from __future__ import annotations

import colorsys
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

CLASS_NAMES = ("background", "uvula", "epiglottis", "glottis")
DOMAINS = ("source", "target")
MANIFEST_FILE = "manifest.json"
SCHEMA_VERSION = 1


class ConfigError(ValueError):
    pass


class ManifestError(ValueError):
    pass


class UnpairableError(ValueError):
    pass


@dataclass
class LabeledImage:
    id: str
    pixels: np.ndarray  # (H, W, 3) float32 in [0, 1]
    mask: np.ndarray  # (H, W) int64 class ids
    domain: str
    classes_present: frozenset[int] = field(default_factory=frozenset)

    def __post_init__(self):
        if not self.classes_present:
            self.classes_present = present_classes(self.mask)

    def validate(self, num_classes: int) -> None:
        if self.pixels.shape[:2] != self.mask.shape or self.pixels.shape[-1] != 3:
            raise ManifestError(f"{self.id}: image {self.pixels.shape} does not match mask {self.mask.shape}")
        if not np.all(np.isfinite(self.pixels)) or self.pixels.min() < 0 or self.pixels.max() > 1:
            raise ManifestError(f"{self.id}: pixels outside [0, 1]")
        if self.mask.min() < 0 or self.mask.max() >= num_classes:
            raise ManifestError(f"{self.id}: mask holds class id {int(self.mask.max())} >= {num_classes}")
        if self.classes_present != present_classes(self.mask):
            raise ManifestError(f"{self.id}: classes_present disagrees with mask")


def present_classes(mask: np.ndarray) -> frozenset[int]:
    return frozenset(int(c) for c in np.unique(mask) if c != 0)


@dataclass(frozen=True)
class Entry:
    id: str
    image: str  # path relative to the manifest root
    mask: str
    domain: str
    classes: tuple[int, ...]  # sorted foreground ids present in the mask
    primary: int  # foreground class covering the most pixels, 0 if none


@dataclass
class DatasetManifest:
    class_names: list[str]
    entries: list[Entry]
    root: Path | None = field(default=None, compare=False)

    def __post_init__(self):
        self._index = {e.id: e for e in self.entries}
        if len(self._index) != len(self.entries):
            raise ManifestError("duplicate entry ids")
        paths = [e.image for e in self.entries] + [e.mask for e in self.entries]
        if len(set(paths)) != len(paths):
            raise ManifestError("entry paths are not unique")

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def foreground_classes(self) -> list[int]:
        return list(range(1, self.num_classes))

    @property
    def counts_per_class(self) -> dict[int, int]:
        counts = {c: 0 for c in self.foreground_classes}
        for e in self.entries:
            for c in e.classes:
                counts[c] += 1
        return counts

    def ids(self) -> list[str]:
        return [e.id for e in self.entries]

    def entry(self, image_id: str) -> Entry:
        return self._index[image_id]

    def ids_with_class(self, cls: int) -> list[str]:
        return [e.id for e in self.entries if cls in e.classes]

    def subset(self, ids) -> "DatasetManifest":
        keep = set(ids)
        return DatasetManifest(list(self.class_names), [e for e in self.entries if e.id in keep], self.root)

    def load_image(self, image_id: str) -> LabeledImage:
        if self.root is None:
            raise ManifestError("manifest has no root directory")
        e = self._index[image_id]
        pixels = _read_rgb(self.root / e.image)
        mask = _read_mask(self.root / e.mask)
        return LabeledImage(e.id, pixels, mask, e.domain, frozenset(e.classes))

    def load_all(self, ids=None) -> list[LabeledImage]:
        return [self.load_image(i) for i in (self.ids() if ids is None else ids)]

    def to_dict(self) -> dict:
        return {
            "schema": SCHEMA_VERSION,
            "class_names": list(self.class_names),
            "entries": [{"id": e.id, "image": e.image, "mask": e.mask, "domain": e.domain} for e in self.entries],
        }

    def save(self, root: Path | str | None = None) -> Path:
        """Write manifest.json (image and mask files are expected in place already)."""
        root = Path(root) if root is not None else self.root
        root.mkdir(parents=True, exist_ok=True)
        path = root / MANIFEST_FILE
        path.write_text(json.dumps(self.to_dict(), indent=2) + "\n")
        self.root = root
        return path


def _read_rgb(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0


def _read_mask(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode not in ("L", "P", "I", "I;16"):
            raise ManifestError(f"{path}: mask must be single-channel, got mode {im.mode}")
        return np.asarray(im, dtype=np.int64)


def write_image(root: Path, image: LabeledImage) -> Entry:
    """Store pixels/mask under root and return the manifest entry describing them."""
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    img_rel, mask_rel = f"images/{image.id}.png", f"masks/{image.id}.png"
    rgb = np.clip(np.round(image.pixels * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(rgb, mode="RGB").save(root / img_rel)
    Image.fromarray(image.mask.astype(np.uint8), mode="L").save(root / mask_rel)
    return _entry_for(image.id, img_rel, mask_rel, image.domain, image.mask)


def _entry_for(image_id, img_rel, mask_rel, domain, mask) -> Entry:
    counts = np.bincount(mask.ravel())
    classes = tuple(int(c) for c in np.nonzero(counts)[0] if c != 0)
    primary = max(classes, key=lambda c: (counts[c], -c)) if classes else 0
    return Entry(image_id, img_rel, mask_rel, domain, classes, primary)


def load_manifest(root_path) -> DatasetManifest:
    root = Path(root_path)
    path = root / MANIFEST_FILE
    if not path.is_file():
        raise ManifestError(f"{root}: no entries (missing {MANIFEST_FILE})")
    raw = json.loads(path.read_text())
    class_names = raw.get("class_names")
    if not class_names or class_names[0] != "background":
        raise ManifestError(f"{path}: class_names must start with 'background'")
    items = raw.get("entries") or []
    if not items:
        raise ManifestError(f"{path}: no entries")
    k = len(class_names)
    entries = []
    for item in items:
        img_path, mask_path = root / item["image"], root / item["mask"]
        for p in (img_path, mask_path):
            if not p.is_file():
                raise ManifestError(f"{item['id']}: missing file {p}")
        domain = item.get("domain", "source")
        if domain not in DOMAINS:
            raise ManifestError(f"{item['id']}: unknown domain {domain!r}")
        mask = _read_mask(mask_path)
        with Image.open(img_path) as im:
            size = (im.height, im.width)
        if size != mask.shape:
            raise ManifestError(f"{mask_path}: mask size {mask.shape} != image size {size}")
        if mask.size and (mask.max() >= k or mask.min() < 0):
            raise ManifestError(f"{mask_path}: unknown class id {int(mask.max())} (have {k} classes)")
        entries.append(_entry_for(item["id"], item["image"], item["mask"], domain, mask))
    return DatasetManifest(list(class_names), entries, root)


# --------------------------------------------------------------------------- synthetic data


@dataclass
class SynthConfig:
    seed: int = 0
    images_per_class: dict[int, int] = field(default_factory=lambda: {1: 20, 2: 20, 3: 20})
    target_images_per_class: dict[int, int] | None = None  # None: same as images_per_class
    image_size: tuple[int, int] = (128, 128)
    style_gap: float = 0.8
    num_classes: int = 4

    def validate(self) -> None:
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        h, w = self.image_size
        if min(h, w) < 16 or h % 2 or w % 2:
            raise ConfigError(f"image_size {self.image_size} must be even and >= 16")
        if not 0.0 <= self.style_gap <= 1.0:
            raise ConfigError(f"style_gap {self.style_gap} outside [0, 1]")
        for counts in (self.images_per_class, self.target_images_per_class or {}):
            for c, n in counts.items():
                if not 1 <= int(c) < self.num_classes:
                    raise ConfigError(f"class {c} is not a foreground class")
                if n < 0:
                    raise ConfigError(f"negative image count for class {c}")

    def class_names(self) -> list[str]:
        if self.num_classes == len(CLASS_NAMES):
            return list(CLASS_NAMES)
        return ["background"] + [f"class{c}" for c in range(1, self.num_classes)]


def palette(num_classes: int) -> np.ndarray:
    """Flat source-domain RGB colour per class, hues spread evenly around the wheel."""
    colors = []
    for c in range(num_classes):
        hue = c / num_classes
        sat = 0.35 if c == 0 else 0.7
        val = 0.45 if c == 0 else 0.85
        colors.append(colorsys.hsv_to_rgb(hue, sat, val))
    return np.asarray(colors, dtype=np.float64)


def _class_sets(counts: dict[int, int], rng: np.random.Generator) -> list[tuple[int, ...]]:
    # each image gets 1-3 classes; per-class totals are hit exactly
    remaining = {int(c): int(n) for c, n in counts.items() if n > 0}
    sets = []
    while remaining:
        classes = sorted(remaining)
        k = int(rng.integers(1, min(3, len(classes)) + 1))
        weights = np.array([remaining[c] for c in classes], dtype=np.float64)
        chosen = rng.choice(classes, size=k, replace=False, p=weights / weights.sum())
        chosen = tuple(sorted(int(c) for c in chosen))
        for c in chosen:
            remaining[c] -= 1
            if remaining[c] == 0:
                del remaining[c]
        sets.append(chosen)
    order = rng.permutation(len(sets))
    return [sets[i] for i in order]


def _smooth_noise(shape, sigma, rng):
    field_ = ndimage.gaussian_filter(rng.standard_normal(shape), sigma, mode="wrap")
    return field_ / (field_.std() + 1e-12)


def _blob_mask(classes, shape, rng, min_fraction=0.01):
    h, w = shape
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    for _ in range(100):
        mask = np.zeros(shape, dtype=np.int64)
        for c in classes:
            cy, cx = rng.uniform(0.2, 0.8) * h, rng.uniform(0.2, 0.8) * w
            radius = rng.uniform(0.12, 0.24) * min(h, w)
            dist2 = ((yy - cy) ** 2 + (xx - cx) ** 2) / radius**2
            level = 1.0 - dist2 + 0.35 * _smooth_noise(shape, min(h, w) / 12.0, rng)
            mask[level > 0] = c
        sizes = np.bincount(mask.ravel(), minlength=max(classes) + 1)
        if all(sizes[c] >= min_fraction * h * w for c in classes):
            return mask
    raise RuntimeError(f"could not place blobs for classes {classes}")


def _render(mask, domain, gap, colors, rng):
    pixels = colors[mask]
    if domain == "source" or gap == 0:
        return pixels
    h, w = mask.shape
    # fixed hue rotation for the whole target domain
    hsv = np.asarray([colorsys.rgb_to_hsv(*c) for c in colors])
    hsv[:, 0] = (hsv[:, 0] + 0.2 * gap) % 1.0
    hsv[:, 1] = np.clip(hsv[:, 1] * (1.0 - 0.3 * gap), 0, 1)
    shifted = np.asarray([colorsys.hsv_to_rgb(*c) for c in hsv])
    pixels = shifted[mask]
    texture = ndimage.gaussian_filter(rng.standard_normal((h, w, 3)), (1.0, 1.0, 0))
    pixels = pixels + 0.12 * gap * texture / (texture.std() + 1e-12)
    angle = rng.uniform(0, 2 * np.pi)
    yy, xx = np.mgrid[0:h, 0:w] / np.array([h, w]).reshape(2, 1, 1)
    ramp = np.cos(angle) * (xx - 0.5) + np.sin(angle) * (yy - 0.5)
    pixels = pixels * (1.0 + 0.6 * gap * ramp)[..., None]
    return np.clip(pixels, 0.0, 1.0)


def generate_synthetic(config: SynthConfig, out_root) -> tuple[DatasetManifest, DatasetManifest]:
    """Write ``<out_root>/source`` and ``<out_root>/target``; pure function of ``config.seed``."""
    config.validate()
    out_root = Path(out_root)
    colors = palette(config.num_classes)
    source_seq, target_seq = np.random.SeedSequence(config.seed).spawn(2)
    counts = {
        "source": config.images_per_class,
        "target": config.target_images_per_class or config.images_per_class,
    }
    manifests = []
    for domain, seq in (("source", source_seq), ("target", target_seq)):
        rng = np.random.default_rng(seq)
        root = out_root / domain
        prefix = "src" if domain == "source" else "tgt"
        entries = []
        for i, classes in enumerate(_class_sets(counts[domain], rng)):
            mask = _blob_mask(classes, config.image_size, rng)
            pixels = _render(mask, domain, config.style_gap, colors, rng)
            image = LabeledImage(f"{prefix}_{i:04d}", pixels, mask, domain)
            entries.append(write_image(root, image))
        manifest = DatasetManifest(config.class_names(), entries, root)
        manifest.save()
        manifests.append(manifest)
    return manifests[0], manifests[1]


def assign_style_pairs(source: DatasetManifest, target: DatasetManifest, rng_seed: int) -> list[tuple[str, str]]:
    """Pair each source image with a random target image sharing at least one organ.

    Background-only source images pair with background-only targets.
    """
    rng = np.random.default_rng(rng_seed)
    by_class = {c: set(target.ids_with_class(c)) for c in target.foreground_classes}
    null_targets = [e.id for e in target.entries if not e.classes]
    target_order = {tid: i for i, tid in enumerate(target.ids())}
    pairs = []
    for e in source.entries:
        if e.classes:
            pool = set().union(*(by_class.get(c, set()) for c in e.classes))
            eligible = sorted(pool, key=target_order.__getitem__)
        else:
            eligible = null_targets
        if not eligible:
            names = [source.class_names[c] for c in e.classes] or ["background only"]
            raise UnpairableError(f"{e.id}: no target image contains any of {names}")
        pairs.append((e.id, eligible[int(rng.integers(len(eligible)))]))
    return pairs
