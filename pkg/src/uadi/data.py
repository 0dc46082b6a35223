"""Synthetic ultrasound-like lesions, stratified splits, augmentation and mask/image IO.

Images are ``(H, W, 1)`` floats in ``[0, 1]``; masks are ``(H, W, 1)`` in
``{0, 1}``.  Labels: 0 normal, 1 benign, 2 malignant.  Normal samples carry an
all-zero mask and every lesion sample has a non-empty one.
"""

from __future__ import annotations

import csv
import math
import os
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image
from scipy import ndimage
from sklearn.model_selection import train_test_split

NORMAL, BENIGN, MALIGNANT = 0, 1, 2
LABEL_NAMES = ("normal", "benign", "malignant")


@dataclass
class DatasetSpec:
    n_samples: int = 300
    image_size: int = 64
    class_proportions: tuple = (0.3, 0.4, 0.3)
    lesion_size_range_px: tuple = (6.0, 14.0)  # semi-axis / mean radius
    speckle_strength: float = 0.25
    shadow_probability: float = 0.6
    seed: int = 0

    def validate(self) -> "DatasetSpec":
        p = np.asarray(self.class_proportions, dtype=float)
        if p.shape != (3,) or (p < 0).any() or abs(p.sum() - 1.0) > 1e-9:
            raise ValueError(f"class_proportions must be 3 non-negative values summing to 1, got {self.class_proportions}")
        lo, hi = self.lesion_size_range_px
        if not 0 < lo <= hi:
            raise ValueError(f"lesion_size_range_px must satisfy 0 < lo <= hi, got {self.lesion_size_range_px}")
        if 2 * hi * 1.35 >= self.image_size:
            raise ValueError(f"lesion size {hi} px does not fit in a {self.image_size} px image")
        if self.n_samples < 1 or self.image_size < 8:
            raise ValueError("n_samples must be >= 1 and image_size >= 8")
        if not 0 <= self.speckle_strength < 1 or not 0 <= self.shadow_probability <= 1:
            raise ValueError("speckle_strength must lie in [0, 1) and shadow_probability in [0, 1]")
        return self

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Sample:
    image: np.ndarray
    mask: np.ndarray
    label: int
    meta: dict = field(default_factory=dict)


# ------------------------------------------------------------------ generation

def _background(n: int, rng: np.random.Generator) -> np.ndarray:
    tissue = ndimage.gaussian_filter(rng.normal(size=(n, n)), sigma=n / 16.0)
    tissue = tissue / (np.abs(tissue).max() + 1e-12)
    depth = np.linspace(0.0, 1.0, n)[:, None]
    # brighter near the probe, attenuating with depth
    return 0.62 - 0.12 * depth + 0.08 * tissue


def _ellipse(n, cy, cx, a, b, theta):
    yy, xx = np.mgrid[0:n, 0:n].astype(float)
    dy, dx = yy - cy, xx - cx
    u = dx * math.cos(theta) + dy * math.sin(theta)
    v = -dx * math.sin(theta) + dy * math.cos(theta)
    return (u / a) ** 2 + (v / b) ** 2 <= 1.0


def _irregular(n, cy, cx, r0, rng):
    yy, xx = np.mgrid[0:n, 0:n].astype(float)
    dy, dx = yy - cy, xx - cx
    ang = np.arctan2(dy, dx)
    radius = np.full_like(ang, r0)
    for k in range(2, 8):
        amp = rng.uniform(0.04, 0.12) * r0 / math.sqrt(k - 1)
        radius += amp * np.cos(k * ang + rng.uniform(0, 2 * math.pi))
    return np.hypot(dy, dx) <= radius


def _center(n: int, extent: float, rng: np.random.Generator):
    # keep the lesion inside the disc that survives a +-25 degree rotation
    room = max(n / 2.0 - extent - 3.0, 0.0) / math.sqrt(2.0)
    return n / 2.0 + rng.uniform(-room, room), n / 2.0 + rng.uniform(-room, room)


def generate_sample(spec: DatasetSpec, label: int, rng: np.random.Generator) -> Sample:
    """One synthetic B-mode-like frame with its lesion mask."""
    n = spec.image_size
    lo, hi = spec.lesion_size_range_px
    if 2 * hi > n:
        raise ValueError(f"lesion size {hi} px larger than the {n} px image")
    if label not in (NORMAL, BENIGN, MALIGNANT):
        raise ValueError(f"label must be 0, 1 or 2, got {label}")
    img = _background(n, rng)
    mask = np.zeros((n, n), dtype=bool)
    meta: dict = {}
    if label == BENIGN:
        a, b = rng.uniform(lo, hi), rng.uniform(lo, hi)
        cy, cx = _center(n, max(a, b), rng)
        mask = _ellipse(n, cy, cx, a, b, rng.uniform(0, math.pi))
        img = np.where(mask, 0.22 + 0.02 * rng.normal(size=(n, n)), img)
        # thin bright capsule around a well-circumscribed lesion
        rim = ndimage.binary_dilation(mask, iterations=1) & ~mask
        img = np.where(rim, img + 0.15, img)
        meta = {"axes": (a, b), "center": (cy, cx)}
    elif label == MALIGNANT:
        r0 = rng.uniform(lo, hi)
        cy, cx = _center(n, r0 * 1.35, rng)
        mask = _irregular(n, cy, cx, r0, rng)
        hetero = ndimage.gaussian_filter(rng.normal(size=(n, n)), 1.0)
        img = np.where(mask, 0.15 + 0.25 * np.abs(hetero) / (np.abs(hetero).max() + 1e-12), img)
        if rng.random() < spec.shadow_probability:
            cols = mask.any(axis=0)
            bottom = int(np.nonzero(mask.any(axis=1))[0].max())
            shadow = np.zeros((n, n), dtype=bool)
            shadow[bottom + 1:, cols] = True
            img = np.where(shadow, img * 0.45, img)
            meta["shadow"] = True
        meta.update({"radius": r0, "center": (cy, cx)})
    speckle = rng.gamma(1.0 / max(spec.speckle_strength, 1e-6) ** 2, max(spec.speckle_strength, 1e-6) ** 2,
                        size=(n, n)) if spec.speckle_strength > 0 else 1.0
    img = np.clip(img * speckle, 0.0, 1.0)
    return Sample(img[..., None], mask.astype(float)[..., None], int(label), meta)


def class_counts(n: int, proportions: Sequence[float]) -> list[int]:
    """Largest-remainder allocation of ``n`` samples to the class proportions."""
    raw = np.asarray(proportions, dtype=float) * n
    counts = np.floor(raw).astype(int)
    for i in np.argsort(-(raw - counts), kind="stable")[: n - counts.sum()]:
        counts[i] += 1
    return counts.tolist()


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("UADI_THREADS", "1")))
    except ValueError:
        return 1


def generate_dataset(spec: DatasetSpec) -> list[Sample]:
    """Deterministic in ``spec.seed``; sample ``i`` uses its own rng stream ``(seed, i)``."""
    spec.validate()
    labels = np.repeat(np.arange(3), class_counts(spec.n_samples, spec.class_proportions))
    np.random.default_rng([spec.seed, 0x5EED]).shuffle(labels)

    def make(i: int) -> Sample:
        return generate_sample(spec, int(labels[i]), np.random.default_rng([spec.seed, i]))

    workers = _threads()
    if workers == 1:
        return [make(i) for i in range(spec.n_samples)]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(make, range(spec.n_samples)))


def split_dataset(labels, ratios=(0.70, 0.15, 0.15), seed: int = 0):
    """Stratified, disjoint train/val/test index lists covering every sample."""
    labels = np.asarray(labels).astype(int)
    ratios = np.asarray(ratios, dtype=float)
    if ratios.shape != (3,) or abs(ratios.sum() - 1.0) > 1e-9 or (ratios <= 0).any():
        raise ValueError(f"ratios must be three positive values summing to 1, got {tuple(ratios)}")
    classes, counts = np.unique(labels, return_counts=True)
    if (counts < 3).any():
        raise ValueError(f"class {int(classes[counts < 3][0])} has fewer than 3 samples; cannot stratify")
    n = labels.shape[0]
    n_val, n_test = class_counts(n, ratios)[1:]
    idx = np.arange(n)
    rest, test = train_test_split(idx, test_size=n_test, stratify=labels, random_state=seed)
    train, val = train_test_split(rest, test_size=n_val, stratify=labels[rest], random_state=seed + 1)
    return sorted(train.tolist()), sorted(val.tolist()), sorted(test.tolist())


# ------------------------------------------------------------------ augmentation

@dataclass
class AugParams:
    angle_deg: float = 0.0
    flip: bool = False
    displacement: Optional[np.ndarray] = None  # (2, H, W) pixel offsets, or None

    @property
    def is_identity(self) -> bool:
        return self.angle_deg == 0.0 and not self.flip and self.displacement is None


MAX_ROTATION = 25.0
ELASTIC_SIGMA = 8.0
ELASTIC_MAGNITUDE = 6.0


def draw_augmentation(rng: np.random.Generator, size: int, max_rotation: float = MAX_ROTATION,
                      elastic_sigma: float = ELASTIC_SIGMA, elastic_magnitude: float = ELASTIC_MAGNITUDE) -> AugParams:
    angle = float(rng.uniform(-max_rotation, max_rotation))
    flip = bool(rng.random() < 0.5)
    disp = None
    if elastic_magnitude > 0:
        field_ = ndimage.gaussian_filter(rng.uniform(-1, 1, size=(2, size, size)), sigma=(0, elastic_sigma, elastic_sigma))
        disp = elastic_magnitude * field_ / (np.abs(field_).max() + 1e-12)
    return AugParams(angle, flip, disp)


def _warp(field2d: np.ndarray, params: AugParams, order: int, mode: str) -> np.ndarray:
    n_y, n_x = field2d.shape
    out = field2d
    if params.angle_deg != 0.0 or params.displacement is not None:
        yy, xx = np.mgrid[0:n_y, 0:n_x].astype(float)
        cy, cx = (n_y - 1) / 2.0, (n_x - 1) / 2.0
        t = math.radians(params.angle_deg)
        sy = cy + (yy - cy) * math.cos(t) - (xx - cx) * math.sin(t)
        sx = cx + (yy - cy) * math.sin(t) + (xx - cx) * math.cos(t)
        if params.displacement is not None:
            sy = sy + params.displacement[0]
            sx = sx + params.displacement[1]
        out = ndimage.map_coordinates(out, [sy, sx], order=order, mode=mode)
    if params.flip:
        out = out[:, ::-1]
    return out


def apply_augmentation(sample: Sample, params: AugParams) -> Sample:
    """Same geometric transform on image and mask; the mask is re-binarized at 0.5."""
    if params.is_identity:
        return Sample(sample.image.copy(), sample.mask.copy(), sample.label, dict(sample.meta))
    img = np.clip(_warp(sample.image[..., 0], params, order=1, mode="reflect"), 0.0, 1.0)
    mask = (_warp(sample.mask[..., 0], params, order=1, mode="constant") >= 0.5).astype(float)
    if sample.label != NORMAL and mask.sum() == 0:
        # a lesion squeezed out by interpolation would break the label/mask link
        return Sample(sample.image.copy(), sample.mask.copy(), sample.label, dict(sample.meta))
    return Sample(img[..., None], mask[..., None], sample.label, dict(sample.meta))


def augment(sample: Sample, rng: np.random.Generator) -> Sample:
    return apply_augmentation(sample, draw_augmentation(rng, sample.image.shape[0]))


# ------------------------------------------------------------------ IO

class MaskFormatError(ValueError):
    def __init__(self, path, offset: int, detail: str):
        super().__init__(f"{path}: malformed PGM at byte {offset}: {detail}")
        self.offset = offset


_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*")
_NUMBER = re.compile(rb"\d+")


def _parse_pgm(raw: bytes, path) -> np.ndarray:
    if raw[:2] != b"P5":
        raise MaskFormatError(path, 0, "expected magic 'P5'")
    pos = 2
    values = []
    for name in ("width", "height", "maxval"):
        m = _TOKEN.match(raw, pos)
        if m.end() == pos:
            raise MaskFormatError(path, pos, f"expected whitespace before {name}")
        pos = m.end()
        num = _NUMBER.match(raw, pos)
        if num is None:
            raise MaskFormatError(path, pos, f"expected {name}")
        values.append(int(num.group()))
        pos = num.end()
    w, h, maxval = values
    if pos >= len(raw) or raw[pos:pos + 1] not in (b" ", b"\t", b"\n", b"\r"):
        raise MaskFormatError(path, pos, "expected single whitespace before raster")
    pos += 1
    if not 0 < maxval < 256:
        raise MaskFormatError(path, pos - 1, f"maxval {maxval} unsupported (8-bit only)")
    if w <= 0 or h <= 0:
        raise MaskFormatError(path, pos - 1, f"invalid size {w}x{h}")
    data = raw[pos:pos + w * h]
    if len(data) != w * h:
        raise MaskFormatError(path, pos + len(data), f"raster truncated: need {w * h} bytes, got {len(data)}")
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w)


def read_gray(path) -> np.ndarray:
    """8-bit grayscale ``(H, W)`` uint8 array from a PGM (P5) or PNG file."""
    path = Path(path)
    raw = path.read_bytes()
    if path.suffix.lower() == ".pgm" or raw[:2] == b"P5":
        return _parse_pgm(raw, path)
    with Image.open(path) as im:
        return np.asarray(im.convert("L"), dtype=np.uint8)


def write_gray(path, arr: np.ndarray) -> Path:
    path = Path(path)
    arr = np.ascontiguousarray(arr, dtype=np.uint8)
    if path.suffix.lower() == ".pgm":
        h, w = arr.shape
        path.write_bytes(b"P5\n%d %d\n255\n" % (w, h) + arr.tobytes())
    else:
        Image.fromarray(arr, mode="L").save(path, format="PNG")
    return path


def read_mask(path) -> np.ndarray:
    """Binary ``(H, W)`` float mask; pixels >= 128 are foreground."""
    return (read_gray(path) >= 128).astype(float)


def write_mask(path, mask) -> Path:
    mask = np.asarray(mask)
    if mask.ndim == 3:
        mask = mask[..., 0]
    return write_gray(path, np.where(mask >= 0.5, 255, 0).astype(np.uint8))


def read_image(path) -> np.ndarray:
    return read_gray(path).astype(float)[..., None] / 255.0


def write_image(path, image) -> Path:
    image = np.asarray(image)
    if image.ndim == 3:
        image = image[..., 0]
    return write_gray(path, np.round(np.clip(image, 0, 1) * 255.0).astype(np.uint8))


def save_dataset(samples: Sequence[Sample], root, fmt: str = "png") -> Path:
    """Write ``images/<id>.<fmt>``, ``masks/<id>.<fmt>`` and ``labels.csv`` (``id,label``)."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    with (root / "labels.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "label"])
        for i, s in enumerate(samples):
            sid = f"{i:05d}"
            write_image(root / "images" / f"{sid}.{fmt}", s.image)
            write_mask(root / "masks" / f"{sid}.{fmt}", s.mask)
            w.writerow([sid, s.label])
    return root


def _parse_label(value: str) -> int:
    v = value.strip().lower()
    if v in LABEL_NAMES:
        return LABEL_NAMES.index(v)
    if v in ("0", "1", "2"):
        return int(v)
    raise ValueError(f"unknown label {value!r}")


def load_dataset(root, size: Optional[int] = None) -> list[Sample]:
    """Read a dataset directory; with ``size`` set, frames are resized to ``size x size``."""
    root = Path(root)
    labels_path = root / "labels.csv"
    if not labels_path.exists():
        raise FileNotFoundError(f"{labels_path} not found")
    with labels_path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or [f.strip() for f in reader.fieldnames[:2]] != ["id", "label"]:
            raise ValueError(f"{labels_path}: header must be 'id,label'")
        rows = [(r["id"].strip(), _parse_label(r["label"])) for r in reader]
    samples = []
    for sid, label in rows:
        img_path = _find(root / "images", sid)
        mask_path = _find(root / "masks", sid)
        gray = read_gray(img_path)
        mgray = read_gray(mask_path)
        if size is not None and gray.shape != (size, size):
            gray = np.asarray(Image.fromarray(gray).resize((size, size), Image.BILINEAR))
            mgray = np.asarray(Image.fromarray(mgray).resize((size, size), Image.NEAREST))
        samples.append(Sample(gray.astype(float)[..., None] / 255.0, (mgray >= 128).astype(float)[..., None],
                              label, {"id": sid}))
    return samples


def _find(folder: Path, sid: str) -> Path:
    for ext in (".png", ".pgm"):
        p = folder / f"{sid}{ext}"
        if p.exists():
            return p
    raise FileNotFoundError(f"no .png or .pgm file for id {sid!r} in {folder}")


def stack(samples: Sequence[Sample]):
    """``(images, masks, labels)`` arrays for a list of samples."""
    return (np.stack([s.image for s in samples]), np.stack([s.mask for s in samples]),
            np.array([s.label for s in samples], dtype=int))
