"""Image corpora, manifests, seeded augmentations and the synthetic roof generator.

All augmentations work on float images laid out channel-major (3xHxW) with
values in [0, 1]; normalization with mean/std happens last.
"""
from __future__ import annotations

import csv
import enum
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
from PIL import Image
from scipy import ndimage

log = logging.getLogger(__name__)

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)
IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg"}
MIN_SIDE = 32


class RoofClass(enum.IntEnum):
    GABLE = 0
    HIP = 1
    FLAT = 2
    COMPLEX = 3

    @property
    def label(self) -> str:
        return self.name.capitalize()

    @classmethod
    def parse(cls, name: str) -> "RoofClass":
        try:
            return cls[name.strip().upper()]
        except KeyError:
            raise ValueError(f"unknown roof category {name!r}; expected one of "
                             f"{[c.label for c in cls]}") from None


class ManifestError(ValueError):
    pass


@dataclass
class ImageRecord:
    path: Optional[str]
    pixels: np.ndarray  # HxWx3 uint8
    label: Optional[RoofClass] = None

    def __post_init__(self):
        px = self.pixels
        if px.ndim != 3 or px.shape[2] != 3 or px.dtype != np.uint8:
            raise ValueError(f"expected HxWx3 uint8 pixels, got {px.shape} {px.dtype}")
        if px.shape[0] < MIN_SIDE or px.shape[1] < MIN_SIDE:
            raise ValueError(f"image {self.path} is smaller than {MIN_SIDE}x{MIN_SIDE}")


@dataclass
class ManifestEntry:
    path: str
    label: Optional[int] = None
    tag: Optional[str] = None  # scene/category directory for unlabeled corpora


@dataclass
class DatasetManifest:
    root: Path
    entries: list[ManifestEntry] = field(default_factory=list)
    split: str = "train"
    skipped: int = 0

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def labeled(self) -> bool:
        return all(e.label is not None for e in self.entries)

    def labels(self) -> np.ndarray:
        return np.array([-1 if e.label is None else e.label for e in self.entries], dtype=np.int64)

    def load(self, index: int) -> ImageRecord:
        e = self.entries[index]
        label = None if e.label is None else RoofClass(e.label)
        return ImageRecord(e.path, read_image(self.root / e.path), label)

    def load_all(self, size: int | None = None) -> np.ndarray:
        """Stack every image into an NxHxWx3 uint8 array.

        Without ``size`` all images must share a shape; otherwise each is resized to size x size.
        """
        if not self.entries:
            return np.zeros((0, size or MIN_SIDE, size or MIN_SIDE, 3), np.uint8)
        images = [read_image(self.root / e.path, size) for e in self.entries]
        if len({im.shape for im in images}) > 1:
            raise ValueError("images differ in size; pass size= to resize on load")
        return np.stack(images)


def read_image(path: os.PathLike | str, size: int | None = None) -> np.ndarray:
    with Image.open(path) as im:
        im = im.convert("RGB")
        if size is not None and im.size != (size, size):
            im = im.resize((size, size), Image.BILINEAR)
        return np.asarray(im, dtype=np.uint8).copy()


def _decodable(path: Path) -> bool:
    try:
        with Image.open(path) as im:
            im.verify()
        return True
    except Exception:
        return False


def scan_image_folder(root: os.PathLike | str, layout: str = "flat", split: str = "train") -> DatasetManifest:
    """Walk ``root`` and build a manifest of decodable images.

    With ``layout="category-subdirs"`` every first-level directory is a category;
    directories named after a roof class give labels, any other name is kept as
    an unlabeled scene tag.
    """
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"image folder {root} does not exist")
    if layout not in ("flat", "category-subdirs"):
        raise ValueError(f"unknown layout {layout!r}")

    manifest = DatasetManifest(root=root, split=split)
    if layout == "flat":
        groups = [(None, root)]
    else:
        groups = [(d.name, d) for d in sorted(root.iterdir()) if d.is_dir()]

    for tag, folder in groups:
        label = None
        if tag is not None:
            try:
                label = int(RoofClass.parse(tag))
            except ValueError:
                label = None
        for path in sorted(folder.rglob("*") if tag is not None else folder.iterdir()):
            if not path.is_file() or path.suffix.lower() not in IMAGE_SUFFIXES:
                continue
            if not _decodable(path):
                manifest.skipped += 1
                continue
            manifest.entries.append(ManifestEntry(path.relative_to(root).as_posix(), label,
                                                  tag if label is None else None))
    if manifest.skipped:
        log.warning("skipped %d undecodable files under %s", manifest.skipped, root)
    return manifest


def load_manifest(csv_path: os.PathLike | str, split: str = "train",
                  root: os.PathLike | str | None = None, check_files: bool = True) -> DatasetManifest:
    """Read a ``path,label`` CSV. Paths are relative to ``root`` (default: the CSV's folder)."""
    csv_path = Path(csv_path)
    root = Path(root) if root is not None else csv_path.parent
    manifest = DatasetManifest(root=root, split=split)
    seen: set[str] = set()
    with open(csv_path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip().lower() for h in header[:1]] != ["path"]:
            raise ManifestError(f"{csv_path}: expected header 'path,label'")
        for row_no, row in enumerate(reader, start=1):
            if not row or not row[0].strip():
                continue
            path = row[0].strip()
            raw = row[1].strip() if len(row) > 1 else ""
            label = None
            if raw:
                try:
                    label = int(RoofClass.parse(raw))
                except ValueError:
                    raise ManifestError(f"{csv_path}: row {row_no}: unknown label {raw!r}") from None
            if path in seen:
                log.warning("%s: row %d: duplicate path %s", csv_path, row_no, path)
            seen.add(path)
            if check_files and not (root / path).is_file():
                raise ManifestError(f"{csv_path}: row {row_no}: missing file {root / path}")
            manifest.entries.append(ManifestEntry(path, label))
    return manifest


def write_manifest(manifest: DatasetManifest, csv_path: os.PathLike | str) -> None:
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["path", "label"])
        for e in manifest.entries:
            w.writerow([e.path, "" if e.label is None else RoofClass(e.label).label])


def decode_and_normalize(record: ImageRecord | np.ndarray, mean: Sequence[float] = IMAGENET_MEAN,
                         std: Sequence[float] = IMAGENET_STD) -> np.ndarray:
    pixels = record.pixels if isinstance(record, ImageRecord) else record
    mean = np.asarray(mean, dtype=np.float64)
    std = np.asarray(std, dtype=np.float64)
    if np.any(std <= 0):
        raise ValueError("std components must be positive")
    chw = pixels.transpose(2, 0, 1).astype(np.float64) / 255.0
    return (chw - mean[:, None, None]) / std[:, None, None]


def normalize(image: np.ndarray, mean: Sequence[float] = IMAGENET_MEAN,
              std: Sequence[float] = IMAGENET_STD) -> np.ndarray:
    mean = np.asarray(mean, dtype=image.dtype)[:, None, None]
    std = np.asarray(std, dtype=image.dtype)[:, None, None]
    return (image - mean) / std


# ---------------------------------------------------------------------------
# seeding


@dataclass(frozen=True)
class AugmentationSeed:
    global_seed: int
    epoch: int = 0
    index: int = 0

    def sequence(self, branch: int = 0) -> np.random.SeedSequence:
        return np.random.SeedSequence(entropy=self.global_seed & (2**64 - 1),
                                      spawn_key=(self.epoch, self.index, branch))

    def rng(self, branch: int = 0) -> np.random.Generator:
        return np.random.default_rng(self.sequence(branch))

    def key64(self) -> int:
        lo, hi = self.sequence().generate_state(2, np.uint32)
        return int(lo) | (int(hi) << 32)


def derive_sample_seed(global_seed: int, epoch: int, index: int) -> AugmentationSeed:
    return AugmentationSeed(int(global_seed), int(epoch), int(index))


def _as_rng(seed: AugmentationSeed | np.random.Generator, branch: int = 0) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else seed.rng(branch)


# ---------------------------------------------------------------------------
# geometric augmentations


@dataclass(frozen=True)
class CropBox:
    top: int
    left: int
    height: int
    width: int
    scale: float  # drawn target area fraction


def resize_region(image: np.ndarray, top: float, left: float, height: float, width: float,
                  out_size: tuple[int, int]) -> np.ndarray:
    """Bilinear resample of a box of ``image`` (CxHxW) onto ``out_size`` (half-pixel centres)."""
    _, H, W = image.shape
    oh, ow = out_size
    ys = top + (np.arange(oh) + 0.5) * (height / oh) - 0.5
    xs = left + (np.arange(ow) + 0.5) * (width / ow) - 0.5
    ys = np.clip(ys, 0, H - 1)
    xs = np.clip(xs, 0, W - 1)
    y0 = np.floor(ys).astype(np.intp)
    x0 = np.floor(xs).astype(np.intp)
    y1 = np.minimum(y0 + 1, H - 1)
    x1 = np.minimum(x0 + 1, W - 1)
    wy = (ys - y0)[None, :, None]
    wx = (xs - x0)[None, None, :]
    a = image[:, y0][:, :, x0]
    b = image[:, y0][:, :, x1]
    c = image[:, y1][:, :, x0]
    d = image[:, y1][:, :, x1]
    top_row = a + (b - a) * wx
    bottom_row = c + (d - c) * wx
    return (top_row + (bottom_row - top_row) * wy).astype(image.dtype, copy=False)


def resize(image: np.ndarray, out_size: tuple[int, int]) -> np.ndarray:
    _, H, W = image.shape
    if (H, W) == tuple(out_size):
        return image.copy()
    return resize_region(image, 0, 0, H, W, out_size)


def sample_crop_box(height: int, width: int, scale: tuple[float, float], ratio: tuple[float, float],
                    rng: np.random.Generator) -> CropBox:
    """Draw a crop whose area fraction is uniform on ``scale``.

    The aspect ratio is log-uniform over the part of ``ratio`` for which a crop of
    the drawn area still fits, so no draw is ever rejected (rejection would bias
    the area towards small crops). When nothing fits, a centre crop is used.
    """
    lo, hi = scale
    if not 0 < lo <= hi <= 1:
        raise ValueError(f"invalid crop scale range {scale}")
    area = height * width
    frac = rng.uniform(lo, hi)
    target = frac * area
    r_lo = max(ratio[0], target / height**2)
    r_hi = min(ratio[1], width**2 / target)
    if r_lo <= r_hi:
        aspect = np.exp(rng.uniform(np.log(r_lo), np.log(r_hi)))
        w = min(width, max(1, int(round(np.sqrt(target * aspect)))))
        h = min(height, max(1, int(round(np.sqrt(target / aspect)))))
        top = int(rng.integers(0, height - h + 1))
        left = int(rng.integers(0, width - w + 1))
        return CropBox(top, left, h, w, frac)
    in_ratio = width / height
    if in_ratio < ratio[0]:
        w, h = width, int(round(width / ratio[0]))
    elif in_ratio > ratio[1]:
        h, w = height, int(round(height * ratio[1]))
    else:
        w, h = width, height
    return CropBox((height - h) // 2, (width - w) // 2, h, w, frac)


def random_resized_crop(image: np.ndarray, out_size: tuple[int, int],
                        scale: tuple[float, float] = (0.08, 1.0),
                        seed: AugmentationSeed | np.random.Generator = AugmentationSeed(0),
                        ratio: tuple[float, float] = (3 / 4, 4 / 3)) -> np.ndarray:
    rng = _as_rng(seed)
    box = sample_crop_box(image.shape[1], image.shape[2], scale, ratio, rng)
    return resize_region(image, box.top, box.left, box.height, box.width, out_size)


def horizontal_flip(image: np.ndarray, p: float = 0.5,
                    seed: AugmentationSeed | np.random.Generator = AugmentationSeed(0)) -> np.ndarray:
    if not 0 <= p <= 1:
        raise ValueError("flip probability must lie in [0, 1]")
    rng = _as_rng(seed)
    if rng.random() < p:
        return image[..., ::-1].copy()
    return image


# ---------------------------------------------------------------------------
# photometric augmentations

_LUMA = np.array([0.299, 0.587, 0.114])


def grayscale(image: np.ndarray) -> np.ndarray:
    g = np.tensordot(_LUMA.astype(image.dtype), image, axes=(0, 0))
    return np.broadcast_to(g, image.shape).copy()


def _blend(a: np.ndarray, b, factor: float) -> np.ndarray:
    return np.clip(factor * a + (1 - factor) * b, 0, 1)


def _rgb_to_hsv(img: np.ndarray) -> np.ndarray:
    r, g, b = img
    maxc = img.max(0)
    minc = img.min(0)
    delta = maxc - minc
    s = np.where(maxc > 0, delta / np.where(maxc > 0, maxc, 1), 0)
    safe = np.where(delta > 0, delta, 1)
    rc, gc, bc = (maxc - r) / safe, (maxc - g) / safe, (maxc - b) / safe
    h = np.where(maxc == r, bc - gc, np.where(maxc == g, 2.0 + rc - bc, 4.0 + gc - rc))
    h = np.where(delta > 0, (h / 6.0) % 1.0, 0.0)
    return np.stack([h, s, maxc])


def _hsv_to_rgb(hsv: np.ndarray) -> np.ndarray:
    h, s, v = hsv
    i = np.floor(h * 6.0)
    f = h * 6.0 - i
    p, q, t = v * (1 - s), v * (1 - s * f), v * (1 - s * (1 - f))
    i = i.astype(np.intp) % 6
    r = np.choose(i, [v, q, p, p, t, v])
    g = np.choose(i, [t, v, v, q, p, p])
    b = np.choose(i, [p, p, t, v, v, q])
    return np.stack([r, g, b])


def color_jitter(image: np.ndarray, brightness: float, contrast: float, saturation: float,
                 hue: float, rng: np.random.Generator) -> np.ndarray:
    out = image
    for op in rng.permutation(4):
        if op == 0 and brightness > 0:
            out = _blend(out, 0.0, rng.uniform(max(0, 1 - brightness), 1 + brightness))
        elif op == 1 and contrast > 0:
            mean = float(np.tensordot(_LUMA, out, axes=(0, 0)).mean())
            out = _blend(out, mean, rng.uniform(max(0, 1 - contrast), 1 + contrast))
        elif op == 2 and saturation > 0:
            out = _blend(out, grayscale(out), rng.uniform(max(0, 1 - saturation), 1 + saturation))
        elif op == 3 and hue > 0:
            hsv = _rgb_to_hsv(out)
            hsv[0] = (hsv[0] + rng.uniform(-hue, hue)) % 1.0
            out = _hsv_to_rgb(hsv)
    return out.astype(image.dtype, copy=False)


def gaussian_blur(image: np.ndarray, sigma: float) -> np.ndarray:
    return ndimage.gaussian_filter(image, sigma=(0, sigma, sigma), mode="reflect", truncate=2.0)


@dataclass(frozen=True)
class AugmentRecipe:
    crop_scale: tuple[float, float] = (0.2, 1.0)
    crop_ratio: tuple[float, float] = (3 / 4, 4 / 3)
    flip_p: float = 0.5
    jitter_p: float = 0.8
    brightness: float = 0.4
    contrast: float = 0.4
    saturation: float = 0.4
    hue: float = 0.1
    grayscale_p: float = 0.2
    blur_p: float = 0.5
    blur_sigma: tuple[float, float] = (0.1, 2.0)

    @classmethod
    def identity(cls) -> "AugmentRecipe":
        return cls(crop_scale=(1.0, 1.0), crop_ratio=(1.0, 1.0), flip_p=0.0, jitter_p=0.0,
                   grayscale_p=0.0, blur_p=0.0)

    @classmethod
    def linear_eval(cls, crop_scale: tuple[float, float] = (0.08, 1.0)) -> "AugmentRecipe":
        return cls(crop_scale=crop_scale, jitter_p=0.0, grayscale_p=0.0, blur_p=0.0)


def augment(image: np.ndarray, out_size: tuple[int, int], recipe: AugmentRecipe,
            rng: np.random.Generator) -> np.ndarray:
    """One stochastic view: crop, flip, colour jitter, grayscale, blur (in that order)."""
    out = random_resized_crop(image, out_size, recipe.crop_scale, rng, recipe.crop_ratio)
    out = horizontal_flip(out, recipe.flip_p, rng)
    if recipe.jitter_p > 0 and rng.random() < recipe.jitter_p:
        out = color_jitter(out, recipe.brightness, recipe.contrast, recipe.saturation, recipe.hue, rng)
    if recipe.grayscale_p > 0 and rng.random() < recipe.grayscale_p:
        out = grayscale(out)
    if recipe.blur_p > 0 and rng.random() < recipe.blur_p:
        out = gaussian_blur(out, rng.uniform(*recipe.blur_sigma))
    return out


def simclr_view_pair(image: np.ndarray, recipe: AugmentRecipe, seed: AugmentationSeed,
                     out_size: tuple[int, int] | None = None) -> tuple[np.ndarray, np.ndarray]:
    out_size = out_size or tuple(image.shape[1:])
    return (augment(image, out_size, recipe, seed.rng(0)),
            augment(image, out_size, recipe, seed.rng(1)))


# ---------------------------------------------------------------------------
# synthetic roofs

_LIGHT = np.array([-0.5, -0.6, 0.62])
_LIGHT = _LIGHT / np.linalg.norm(_LIGHT)


def _facet_shade(nx: float, ny: float, slope: float = 0.8) -> float:
    n = np.array([nx * slope, ny * slope, 1.0])
    n /= np.linalg.norm(n)
    return 0.35 + 0.65 * max(0.0, float(n @ _LIGHT))


def _paint_primitive(canvas, mask, xx, yy, cx, cy, half_len, half_wid, angle, kind, tone):
    """Render one gable/hip/flat roof footprint onto ``canvas`` (HxWx3 float)."""
    c, s = np.cos(angle), np.sin(angle)
    u = (xx - cx) * c + (yy - cy) * s   # along ridge
    v = -(xx - cx) * s + (yy - cy) * c  # across ridge
    inside = (np.abs(u) <= half_len) & (np.abs(v) <= half_wid)
    if kind == "flat":
        shade = np.full(u.shape, _facet_shade(0.0, 0.0, 0.0))
    else:
        # facet normals in image coordinates (ridge frame rotated back)
        side = np.where(v >= 0, 1.0, -1.0)
        side_shade = {sg: _facet_shade(-s * sg, c * sg) for sg in (1.0, -1.0)}
        shade = np.where(side > 0, side_shade[1.0], side_shade[-1.0])
        if kind == "hip":
            end = np.where(u >= 0, 1.0, -1.0)
            end_shade = {sg: _facet_shade(c * sg, s * sg) for sg in (1.0, -1.0)}
            on_end = (half_len - np.abs(u)) < (half_wid - np.abs(v))
            shade = np.where(on_end, np.where(end > 0, end_shade[1.0], end_shade[-1.0]), shade)
    colour = tone[None, None, :] * shade[..., None]
    canvas[inside] = colour[inside]
    mask |= inside


def synth_roof_sample(category: RoofClass | int, size: int = 64, seed: int = 0) -> ImageRecord:
    """Procedurally render a top-down roof of ``category`` on a textured background."""
    if size < MIN_SIDE:
        raise ValueError(f"size must be >= {MIN_SIDE}")
    category = RoofClass(category)
    rng = np.random.default_rng(np.random.SeedSequence(entropy=int(seed), spawn_key=(int(category),)))
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5

    ground = rng.uniform(0.25, 0.55, 3) * np.array([0.9, 1.0, 0.8])
    canvas = np.broadcast_to(ground, (size, size, 3)).copy()
    canvas += ndimage.gaussian_filter(rng.normal(0, 0.08, (size, size, 1)), (1.5, 1.5, 0))
    mask = np.zeros((size, size), bool)
    tone = rng.uniform(0.45, 1.0, 3)
    angle = rng.uniform(0, np.pi)

    if category is RoofClass.COMPLEX:
        n_parts = int(rng.integers(2, 4))
        cx, cy = size / 2 + rng.uniform(-0.08, 0.08, 2) * size
        for k in range(n_parts):
            kind = "gable" if rng.random() < 0.5 else "hip"
            a = angle + (k % 2) * np.pi / 2 + rng.normal(0, 0.05)
            off = rng.uniform(0.05, 0.22) * size
            px = cx + off * np.cos(a + np.pi / 2 * (k > 0)) * (k > 0)
            py = cy + off * np.sin(a + np.pi / 2 * (k > 0)) * (k > 0)
            hl = rng.uniform(0.16, 0.3) * size
            hw = rng.uniform(0.1, 0.16) * size
            _paint_primitive(canvas, mask, xx, yy, px, py, hl, hw, a, kind, tone)
    else:
        kind = {RoofClass.GABLE: "gable", RoofClass.HIP: "hip", RoofClass.FLAT: "flat"}[category]
        cx, cy = size / 2 + rng.uniform(-0.06, 0.06, 2) * size
        hl = rng.uniform(0.24, 0.36) * size
        hw = rng.uniform(0.14, 0.22) * size
        _paint_primitive(canvas, mask, xx, yy, cx, cy, hl, hw, angle, kind, tone)

    canvas += rng.normal(0, 0.03, canvas.shape)
    pixels = np.clip(np.rint(canvas * 255), 0, 255).astype(np.uint8)
    return ImageRecord(None, pixels, category)


def write_synthetic_dataset(root: os.PathLike | str, n_train: int = 512, n_val: int = 128,
                            size: int = 64, seed: int = 0) -> tuple[DatasetManifest, DatasetManifest]:
    """Write balanced train/val splits of synthetic roofs as PNGs plus ``train.csv``/``val.csv``."""
    root = Path(root)
    manifests = []
    offset = 0
    for split, n in (("train", n_train), ("val", n_val)):
        (root / split).mkdir(parents=True, exist_ok=True)
        manifest = DatasetManifest(root=root, split=split)
        for i in range(n):
            cat = RoofClass(i % 4)
            rec = synth_roof_sample(cat, size, seed=seed * 1_000_003 + offset + i)
            rel = f"{split}/{i:05d}_{cat.label.lower()}.png"
            Image.fromarray(rec.pixels).save(root / rel)
            manifest.entries.append(ManifestEntry(rel, int(cat)))
        offset += n
        write_manifest(manifest, root / f"{split}.csv")
        manifests.append(manifest)
    return manifests[0], manifests[1]


def batch_views(images: np.ndarray, indices: Iterable[int], epoch: int, global_seed: int,
                recipe: AugmentRecipe, out_size: tuple[int, int], mean=IMAGENET_MEAN,
                std=IMAGENET_STD) -> tuple[np.ndarray, np.ndarray]:
    """Normalized view pairs for dataset ``indices``; ``images`` is NxHxWx3 uint8."""
    v1, v2 = [], []
    for idx in indices:
        img = images[idx].transpose(2, 0, 1).astype(np.float32) / 255.0
        a, b = simclr_view_pair(img, recipe, derive_sample_seed(global_seed, epoch, idx), out_size)
        v1.append(normalize(a, mean, std))
        v2.append(normalize(b, mean, std))
    return np.stack(v1), np.stack(v2)
