"""Deterministic synthetic scenes with per-dataset partial annotations."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from .codec import KINDS, AnnotationRecord, ConfigurationError, line_to_record, record_to_line

PALETTE = ("normal", "polyp", "adenoma", "cancer", "ulcerative-colitis")

# class -> (shape family, base RGB). Fixed so class is recoverable from appearance.
APPEARANCE = {
    "normal": ("rect", (230, 200, 90)),
    "polyp": ("ellipse", (200, 40, 40)),
    "adenoma": ("rect", (60, 170, 60)),
    "cancer": ("blob", (50, 70, 200)),
    "ulcerative-colitis": ("ellipse", (240, 240, 240)),
}


@dataclass(frozen=True)
class SceneSpec:
    size: int = 64
    classes: tuple[str, ...] = PALETTE
    min_objects: int = 0
    max_objects: int = 3
    min_extent: int = 14
    max_extent: int = 30
    noise: float = 8.0


@dataclass
class Scene:
    image: np.ndarray  # H x W x 3 uint8
    record: AnnotationRecord


def _shape_mask(shape: str, h: int, w: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w]
    cy, cx = (h - 1) / 2, (w - 1) / 2
    if shape == "rect":
        return np.ones((h, w), dtype=bool)
    if shape == "ellipse":
        return ((yy - cy) / (h / 2)) ** 2 + ((xx - cx) / (w / 2)) ** 2 <= 1.0
    # blob: ellipse with a wobbling radius
    theta = np.arctan2((yy - cy) / h, (xx - cx) / w)
    phase = rng.uniform(0, 2 * np.pi)
    radius = 1.0 + 0.18 * np.sin(3 * theta + phase)
    return ((yy - cy) / (h / 2)) ** 2 + ((xx - cx) / (w / 2)) ** 2 <= radius**2 * 0.92


def tight_box(mask: np.ndarray) -> tuple[int, int, int, int]:
    ys, xs = np.nonzero(mask)
    return int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1


def generate_scene(spec: SceneSpec, seed: int, image_id: str | None = None, n_objects: int | None = None) -> Scene:
    rng = np.random.default_rng(seed)
    s = spec.size
    base = rng.uniform(110, 150, size=3)
    img = np.broadcast_to(base, (s, s, 3)).astype(np.float64).copy()
    yy, xx = np.mgrid[0:s, 0:s]
    img += 10 * np.sin(xx / rng.uniform(4, 9) + rng.uniform(0, 6))[..., None]
    img += rng.normal(0, spec.noise, size=img.shape)

    if n_objects is None:
        n_objects = int(rng.integers(spec.min_objects, spec.max_objects + 1))
    occupied = np.zeros((s, s), dtype=bool)
    objects = []
    for _ in range(n_objects):
        name = spec.classes[int(rng.integers(len(spec.classes)))]
        shape, color = APPEARANCE[name]
        for _attempt in range(50):
            h = int(rng.integers(spec.min_extent, spec.max_extent + 1))
            w = int(rng.integers(spec.min_extent, spec.max_extent + 1))
            y0 = int(rng.integers(0, s - h + 1))
            x0 = int(rng.integers(0, s - w + 1))
            local = _shape_mask(shape, h, w, rng)
            full = np.zeros((s, s), dtype=bool)
            full[y0 : y0 + h, x0 : x0 + w] = local
            grown = full.copy()
            grown[max(y0 - 1, 0) : y0 + h + 1, max(x0 - 1, 0) : x0 + w + 1] = True
            if local.any() and not (grown & occupied).any():
                break
        else:
            continue
        occupied |= full
        tint = np.asarray(color, dtype=np.float64) + rng.normal(0, 6, size=3)
        stripes = 12 * np.sin((xx + yy) / 2.5)
        img[full] = tint + stripes[full][:, None] + rng.normal(0, spec.noise / 2, size=(int(full.sum()), 3))
        objects.append((name, full))

    objects.sort(key=lambda o: -int(o[1].sum()))
    record = AnnotationRecord(
        image_id=image_id or f"scene-{seed}",
        classes=[o[0] for o in objects],
        boxes=[tight_box(o[1]) for o in objects],
        masks=[o[1] for o in objects],
        present_kinds=frozenset(KINDS),
    )
    return Scene(np.clip(np.rint(img), 0, 255).astype(np.uint8), record)


# -- datasets -------------------------------------------------------------


@dataclass
class ManifestEntry:
    seed: int
    image: np.ndarray
    record: AnnotationRecord


@dataclass
class DatasetManifest:
    name: str
    policy: frozenset[str]
    split: str
    entries: list[ManifestEntry] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.entries)


def scene_seed(master_seed: int, dataset_index: int, item: int) -> int:
    ss = np.random.SeedSequence([master_seed, dataset_index, item])
    return int(ss.generate_state(1, dtype=np.uint32)[0])


def make_datasets(
    policies: Sequence[Sequence[str]],
    sizes: Sequence[int],
    spec: SceneSpec = SceneSpec(),
    master_seed: int = 0,
    unlabeled: int = 0,
    split_fractions: tuple[float, float, float] = (1.0, 0.0, 0.0),
) -> tuple[list[DatasetManifest], DatasetManifest | None]:
    """Generate one manifest per (policy, split) plus an optional unlabeled one.

    Scenes are fully annotated, then every kind outside the dataset's policy
    is stripped. Item ``i`` of dataset ``k`` always comes from
    ``scene_seed(master_seed, k, i)``.
    """
    if not policies:
        raise ConfigurationError("at least one dataset policy is required")
    if len(sizes) != len(policies):
        raise ConfigurationError("one size per policy is required")
    if any(n <= 0 for n in sizes):
        raise ConfigurationError("dataset sizes must be positive")
    manifests = []
    for k, (policy, n) in enumerate(zip(policies, sizes)):
        policy = frozenset(policy)
        if not policy or policy - set(KINDS):
            raise ConfigurationError(f"invalid policy {sorted(policy)}")
        # classification needs an image label, so those scenes carry >= 1 object
        sub = spec if "detection" in policy or "segmentation" in policy else _at_least_one(spec)
        n_train = int(round(n * split_fractions[0]))
        n_val = int(round(n * split_fractions[1]))
        bounds = {"train": (0, n_train), "val": (n_train, n_train + n_val), "test": (n_train + n_val, n)}
        for split, (lo, hi) in bounds.items():
            if hi <= lo:
                continue
            m = DatasetManifest(f"ds{k}", policy, split)
            for i in range(lo, hi):
                seed = scene_seed(master_seed, k, i)
                scene = generate_scene(sub, seed, image_id=f"ds{k}-{i:05d}")
                m.entries.append(ManifestEntry(seed, scene.image, scene.record.restricted(policy)))
            manifests.append(m)
    unl = None
    if unlabeled:
        unl = DatasetManifest("unlabeled", frozenset(), "train")
        for i in range(unlabeled):
            seed = scene_seed(master_seed, len(policies), i)
            scene = generate_scene(spec, seed, image_id=f"unl-{i:05d}")
            unl.entries.append(ManifestEntry(seed, scene.image, scene.record.restricted(())))
    return manifests, unl


def _at_least_one(spec: SceneSpec) -> SceneSpec:
    return SceneSpec(**{**spec.__dict__, "min_objects": max(1, spec.min_objects)})


# -- two augmented views --------------------------------------------------


@dataclass
class ViewTransform:
    """Crop box (in source pixels), flip flag and photometric jitter."""

    top: int
    left: int
    height: int
    width: int
    flip: bool = False
    brightness: float = 0.0
    contrast: float = 1.0

    def source_coords(self, out_size: int) -> tuple[np.ndarray, np.ndarray]:
        """For every output pixel, the (row, col) in the source it samples from."""
        r = np.arange(out_size)
        rows = self.top + np.floor((r + 0.5) * self.height / out_size).astype(int)
        cols = self.left + np.floor((r + 0.5) * self.width / out_size).astype(int)
        if self.flip:
            cols = cols[::-1]
        return rows, cols

    def apply(self, image: np.ndarray) -> np.ndarray:
        out = image.shape[0]
        rows, cols = self.source_coords(out)
        view = image[rows[:, None], cols[None, :]].astype(np.float64)
        view = (view - 127.5) * self.contrast + 127.5 + self.brightness
        return np.clip(view, 0, 255)


def identity_transform(size: int) -> ViewTransform:
    return ViewTransform(0, 0, size, size)


def random_transform(size: int, rng: np.random.Generator, min_scale: float = 0.5) -> ViewTransform:
    side = int(rng.integers(int(size * min_scale), size + 1))
    top = int(rng.integers(0, size - side + 1))
    left = int(rng.integers(0, size - side + 1))
    return ViewTransform(
        top, left, side, side,
        flip=bool(rng.random() < 0.5),
        brightness=float(rng.uniform(-20, 20)),
        contrast=float(rng.uniform(0.8, 1.2)),
    )


def correspondence(t1: ViewTransform, t2: ViewTransform, size: int) -> np.ndarray:
    """Map each view-1 pixel to the view-2 pixel sampling the nearest source pixel.

    Returns an (H, W, 2) int array of view-2 (row, col); -1 where the source
    pixel lies outside view 2's crop. Ties go to the lowest index.
    """
    r1, c1 = t1.source_coords(size)
    r2, c2 = t2.source_coords(size)
    row = np.abs(r2[None, :] - r1[:, None]).argmin(axis=1)
    col = np.abs(c2[None, :] - c1[:, None]).argmin(axis=1)
    row_ok = (r1 >= t2.top) & (r1 < t2.top + t2.height)
    col_ok = (c1 >= t2.left) & (c1 < t2.left + t2.width)
    out = np.stack(np.broadcast_arrays(row[:, None], col[None, :]), axis=-1).astype(np.int64)
    out[~(row_ok[:, None] & col_ok[None, :])] = -1
    return out


def overlap_extent(t1: ViewTransform, t2: ViewTransform) -> tuple[int, int]:
    h = min(t1.top + t1.height, t2.top + t2.height) - max(t1.top, t2.top)
    w = min(t1.left + t1.width, t2.left + t2.width) - max(t1.left, t2.left)
    return max(h, 0), max(w, 0)


def two_views(image: np.ndarray, seed: int, identity: bool = False, min_overlap: int = 8):
    """Two augmented views of ``image`` and the view1 -> view2 pixel map."""
    size = image.shape[0]
    if identity:
        t1 = t2 = identity_transform(size)
    else:
        rng = np.random.default_rng(seed)
        while True:
            t1, t2 = random_transform(size, rng), random_transform(size, rng)
            oh, ow = overlap_extent(t1, t2)
            if oh >= min_overlap and ow >= min_overlap:
                break
    return t1.apply(image), t2.apply(image), correspondence(t1, t2, size), (t1, t2)


# -- on-disk layout -------------------------------------------------------


def write_manifest(manifest: DatasetManifest, root: str | Path) -> Path:
    root = Path(root)
    img_dir = root / manifest.name / manifest.split
    img_dir.mkdir(parents=True, exist_ok=True)
    lines = []
    for e in manifest.entries:
        img_path = img_dir / f"{e.record.image_id}.png"
        Image.fromarray(e.image).save(img_path)
        mask_rel = ""
        if e.record.masks:
            label = np.zeros(e.image.shape[:2], dtype=np.uint8)
            for k, m in enumerate(e.record.masks):
                label[m] = k + 1
            mask_path = img_dir / f"{e.record.image_id}_mask.png"
            Image.fromarray(label).save(mask_path)
            mask_rel = str(mask_path.relative_to(root))
        lines.append(record_to_line(e.record, str(img_path.relative_to(root)), mask_rel))
    path = root / f"{manifest.name}_{manifest.split}.jsonl"
    header = {"policy": sorted(manifest.policy), "seeds": [e.seed for e in manifest.entries]}
    path.write_text(
        json.dumps(header, sort_keys=True, separators=(",", ":")) + "\n" + "\n".join(lines) + ("\n" if lines else ""),
        encoding="utf-8",
    )
    return path


def read_manifest(path: str | Path) -> DatasetManifest:
    path = Path(path)
    root = path.parent
    name, split = path.stem.rsplit("_", 1)
    lines = path.read_text(encoding="utf-8").splitlines()
    header = json.loads(lines[0])
    manifest = DatasetManifest(name, frozenset(header["policy"]), split)
    for seed, line in zip(header["seeds"], lines[1:]):
        rec, img_rel, mask_rel = line_to_record(line)
        image = np.asarray(Image.open(root / img_rel).convert("RGB"))
        if mask_rel:
            label = np.asarray(Image.open(root / mask_rel))
            rec.masks = [label == k + 1 for k in range(len(rec.classes))]
        manifest.entries.append(ManifestEntry(seed, image, rec))
    return manifest
