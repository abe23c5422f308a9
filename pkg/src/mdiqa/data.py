"""Synthetic distortion data with analytic labels, manifest ingestion and augmentation.

Images are float32 numpy arrays of shape (3, H, W) with values in [0, 1].
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
from scipy import ndimage

from .registry import DimensionRegistry, default_registry

KINDS = ("blur", "noise", "contrast", "brightness", "colorshift")
KIND_TO_DIM = {
    "blur": "sharpness",
    "noise": "noisiness",
    "contrast": "contrast",
    "brightness": "brightness",
    "colorshift": "colorfulness",
}
MIN_SIZE = 32
LUMA = np.array([0.299, 0.587, 0.114], dtype=np.float64)


class DataError(ValueError):
    pass


def check_image(img, name="image") -> np.ndarray:
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[0] != 3:
        raise DataError(f"{name} must have shape (3, H, W), got {img.shape}")
    if img.shape[1] < MIN_SIZE or img.shape[2] < MIN_SIZE:
        raise DataError(f"{name} is {img.shape[1]}x{img.shape[2]}; minimum is {MIN_SIZE}x{MIN_SIZE}")
    if not np.all(np.isfinite(img)):
        raise DataError(f"{name} contains non-finite values")
    if img.min() < 0 or img.max() > 1:
        raise DataError(f"{name} values must lie in [0, 1]")
    return img


@dataclass(frozen=True)
class DistortionSpec:
    kind: str
    severity: float

    def __post_init__(self):
        if self.kind not in KINDS:
            raise DataError(f"unknown distortion kind {self.kind!r}; known: {KINDS}")
        if not 0.0 <= self.severity <= 1.0:
            raise DataError(f"severity for {self.kind} must be in [0, 1], got {self.severity}")


@dataclass
class MultiDimSample:
    image: np.ndarray
    dim_labels: Dict[str, float]
    overall_label: float
    source: str = "synthetic"
    # False marks a missing annotation; losses skip it
    dim_mask: Dict[str, bool] = field(default_factory=dict)
    overall_mask: bool = True
    path: Optional[str] = None

    def __post_init__(self):
        if not self.dim_mask:
            self.dim_mask = {k: True for k in self.dim_labels}


# --- distortion families -------------------------------------------------------

def _kind_rng(seed: int, kind: str) -> np.random.Generator:
    # one independent stream per kind, so adding a spec never changes another's draw
    return np.random.default_rng(np.random.SeedSequence([int(seed), KINDS.index(kind)]))


def noise_field(shape, seed: int) -> np.ndarray:
    """Unit-variance Gaussian field used by the noise distortion."""
    return _kind_rng(seed, "noise").standard_normal(shape)


def blur_sigma(severity):
    return 4.0 * severity


def noise_sigma(severity):
    return 0.25 * severity


def apply_distortion(img: np.ndarray, spec: DistortionSpec, seed: int) -> np.ndarray:
    s = float(spec.severity)
    x = np.asarray(img, dtype=np.float64)
    if s == 0.0:
        return np.asarray(img, dtype=np.float32).copy()
    if spec.kind == "blur":
        sig = blur_sigma(s)
        out = ndimage.gaussian_filter(x, sigma=(0, sig, sig), mode="reflect")
    elif spec.kind == "noise":
        out = x + noise_sigma(s) * noise_field(x.shape, seed)
    elif spec.kind == "contrast":
        mean = x.mean(axis=(1, 2), keepdims=True)
        out = (1 - s) * x + s * mean
    elif spec.kind == "brightness":
        sign = 1.0 if _kind_rng(seed, "brightness").random() < 0.5 else -1.0
        out = x + sign * 0.4 * s
    else:
        gains = _kind_rng(seed, "colorshift").permutation([1 + 0.5 * s, 1.0, 1 - 0.5 * s])
        out = x * gains[:, None, None]
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def distort(img, specs: Sequence[DistortionSpec], seed: int) -> np.ndarray:
    """Apply ``specs`` in canonical kind order."""
    kinds = [sp.kind for sp in specs]
    for k in KINDS:
        if kinds.count(k) > 1:
            raise DataError(f"duplicate distortion kind {k!r}")
    out = np.asarray(img, dtype=np.float32)
    by_kind = {sp.kind: sp for sp in specs}
    for k in KINDS:
        if k in by_kind:
            out = apply_distortion(out, by_kind[k], seed)
    return out


# --- aesthetic proxies ------------------------------------------------------------

def luminance(img) -> np.ndarray:
    return np.tensordot(LUMA, np.asarray(img, dtype=np.float64), axes=1)


def composition_score(img) -> float:
    """1 minus the normalized offset of the edge-energy centroid from the center."""
    y = luminance(img)
    gy, gx = np.gradient(y)
    e = np.hypot(gx, gy)
    total = e.sum()
    if total <= 1e-12:
        return 1.0
    h, w = y.shape
    cy = (e.sum(axis=1) @ ((np.arange(h) + 0.5) / h)) / total
    cx = (e.sum(axis=0) @ ((np.arange(w) + 0.5) / w)) / total
    off = math.hypot(cy - 0.5, cx - 0.5) / math.sqrt(0.5)
    return float(np.clip(1.0 - off, 0.0, 1.0))


def light_score(img) -> float:
    return float(np.clip(1.0 - abs(luminance(img).mean() - 0.5) * 2.0, 0.0, 1.0))


def color_score(img) -> float:
    # per-pixel variance across channels peaks at 2/9 for saturated primaries
    v = np.asarray(img, dtype=np.float64).var(axis=0).mean()
    return float(np.clip(math.sqrt(v / (2.0 / 9.0)), 0.0, 1.0))


def content_score(img, bins: int = 32) -> float:
    hist, _ = np.histogram(luminance(img), bins=bins, range=(0.0, 1.0))
    p = hist[hist > 0] / hist.sum()
    return float(-(p * np.log(p)).sum() / math.log(bins))


AESTHETIC_FUNCS = {
    "composition": composition_score,
    "light": light_score,
    "color": color_score,
    "content": content_score,
}


def aesthetic_labels(img, registry: DimensionRegistry) -> Dict[str, float]:
    out = {}
    for name in registry.aesthetic:
        if name not in AESTHETIC_FUNCS:
            raise DataError(f"no synthetic label formula for aesthetic dimension {name!r}")
        out[name] = AESTHETIC_FUNCS[name](img)
    return out


# --- synthetic samples --------------------------------------------------------------

def generate_synthetic_sample(clean, specs: Sequence[DistortionSpec], seed: int,
                              registry: Optional[DimensionRegistry] = None) -> MultiDimSample:
    registry = registry or default_registry()
    clean = check_image(clean, "clean")
    for k in KINDS:
        if sum(sp.kind == k for sp in specs) > 1:
            raise DataError(f"duplicate distortion kind {k!r}")
    image = distort(clean, specs, seed)
    sev = {sp.kind: sp.severity for sp in specs}
    dim_to_kind = {v: k for k, v in KIND_TO_DIM.items()}
    labels = {}
    for name in registry.technical:
        if name not in dim_to_kind:
            raise DataError(f"no distortion family maps to technical dimension {name!r}")
        labels[name] = 1.0 - float(sev.get(dim_to_kind[name], 0.0))
    labels.update(aesthetic_labels(clean, registry))
    overall = float(np.mean([labels[n] for n in registry.names]))
    return MultiDimSample(image=image, dim_labels=labels, overall_label=overall, source="synthetic")


def _smooth_field(rng, size, cells):
    grid = rng.random((cells, cells))
    z = ndimage.zoom(grid, size / cells, order=3, mode="reflect")
    return z[:size, :size]


def make_clean_image(size: int, seed: int) -> np.ndarray:
    """Procedural 'pristine' image: smooth color field, sharp-edged shapes and fine texture.

    Channel means are balanced (gray world) and the luminance mean/std are
    pinned to narrow ranges so the brightness, contrast and colorshift
    families are identifiable from the distorted image alone.
    """
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 9001]))
    img = np.stack([_smooth_field(rng, size, rng.integers(2, 6)) for _ in range(3)])
    img = 0.5 * img + 0.5 * _smooth_field(rng, size, 3)[None]
    yy, xx = np.mgrid[0:size, 0:size] / size
    # objects clustered around a random focus, which moves the edge centroid
    fy, fx = rng.uniform(0.2, 0.8, size=2)
    for _ in range(rng.integers(SHAPES[0], SHAPES[1] + 1)):
        cy, cx = np.clip([fy, fx] + rng.normal(0, 0.15, 2), 0.05, 0.95)
        ry, rx = rng.uniform(0.03, 0.15, size=2)
        color = rng.random(3)
        if rng.random() < 0.5:
            m = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
        else:
            m = (np.abs(yy - cy) <= ry) & (np.abs(xx - cx) <= rx)
        img[:, m] = color[:, None]
    tex = ndimage.gaussian_filter(rng.standard_normal((size, size)), 0.7)
    env = np.exp(-((yy - fy) ** 2 + (xx - fx) ** 2) / (2 * 0.2 ** 2))
    img = img + (TEX[0] + TEX[1] * env) * tex / (tex.std() + 1e-12)
    # gray-world balance, then pin luminance statistics
    target_mean = rng.uniform(*MEAN_RANGE)
    img = img - img.mean(axis=(1, 2), keepdims=True)
    lum_std = luminance(img).std() + 1e-12
    chroma = img - luminance(img)[None]
    chroma *= rng.uniform(0.6, 1.4)
    img = luminance(img)[None] * (rng.uniform(*STD_RANGE) / lum_std) + chroma
    img = np.clip(img + target_mean, 0.0, 1.0)
    return img.astype(np.float32)


SHAPES = (4, 10)
TEX = (0.03, 0.06)
MEAN_RANGE = (0.48, 0.52)
STD_RANGE = (0.17, 0.19)


def random_specs(rng: np.random.Generator, presence: float = 0.5,
                 max_severity: float = 1.0) -> List[DistortionSpec]:
    specs = []
    for k in KINDS:
        if rng.random() < presence:
            specs.append(DistortionSpec(k, float(rng.uniform(0.0, max_severity))))
    return specs


def make_synthetic_dataset(n: int, size: int = 96, seed: int = 0, presence: float = 0.5,
                           max_severity: float = 1.0,
                           registry: Optional[DimensionRegistry] = None) -> List[MultiDimSample]:
    registry = registry or default_registry()
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 17]))
    out = []
    for i in range(n):
        s = int(rng.integers(0, 2**31 - 1))
        clean = make_clean_image(size, s)
        specs = random_specs(rng, presence, max_severity)
        out.append(generate_synthetic_sample(clean, specs, s, registry))
    return out


# --- manifests -------------------------------------------------------------------------

def read_image(path) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        if im.mode in ("I;16", "I;16B", "I;16L", "I"):
            a = np.asarray(im, dtype=np.float64) / 65535.0
            a = np.repeat(a[None], 3, axis=0)
        else:
            a = np.asarray(im.convert("RGB"), dtype=np.float64).transpose(2, 0, 1) / 255.0
    return np.clip(a, 0, 1).astype(np.float32)


def write_image(path, img) -> None:
    from PIL import Image

    a = np.clip(np.asarray(img).transpose(1, 2, 0) * 255.0 + 0.5, 0, 255).astype(np.uint8)
    Image.fromarray(a).save(path)


def _parse_range(cell, col, lineno):
    try:
        lo, hi = (float(v) for v in cell.split(":"))
    except ValueError:
        raise DataError(f"row {lineno}: bad range {cell!r} for column {col!r}") from None
    if not hi > lo:
        raise DataError(f"row {lineno}: empty range {cell!r} for column {col!r}")
    return lo, hi


def load_manifest(path, registry: Optional[DimensionRegistry] = None,
                  load_images: bool = True) -> List[MultiDimSample]:
    """Read a manifest CSV; labels are min-max normalized by the declared ranges.

    Dimensions in the registry that have no column are treated as missing for
    every row. Columns not in the registry are rejected.
    """
    registry = registry or default_registry()
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if len(rows) < 2:
        raise DataError(f"{path}: manifest needs a header row and a #range row")
    header, ranges = rows[0], rows[1]
    if header[:2] != ["path", "overall"]:
        raise DataError(f"row 1: header must start with 'path,overall', got {header[:2]}")
    if not ranges or ranges[0] != "#range" or len(ranges) != len(header):
        raise DataError("row 2: expected '#range' row with one range per label column")
    cols = header[1:]
    for c in cols[1:]:
        if c not in registry:
            raise DataError(f"row 1: unknown dimension column {c!r}")
    if len(set(cols)) != len(cols):
        raise DataError("row 1: duplicate columns")
    rng = {c: _parse_range(r, c, 2) for c, r in zip(cols, ranges[1:])}
    out = []
    for lineno, row in enumerate(rows[2:], start=3):
        if not row or (len(row) == 1 and not row[0].strip()):
            continue
        if len(row) != len(header):
            raise DataError(f"row {lineno}: expected {len(header)} fields, got {len(row)}")
        vals = {}
        for c, cell in zip(cols, row[1:]):
            cell = cell.strip()
            if cell == "":
                vals[c] = None
                continue
            try:
                v = float(cell)
            except ValueError:
                raise DataError(f"row {lineno}: non-numeric value {cell!r} in column {c!r}") from None
            lo, hi = rng[c]
            if not lo <= v <= hi:
                raise DataError(f"row {lineno}: value {v} outside declared range [{lo}, {hi}] "
                                f"in column {c!r}")
            vals[c] = (v - lo) / (hi - lo)
        labels, mask = {}, {}
        for name in registry.names:
            v = vals.get(name)
            labels[name] = 0.0 if v is None else v
            mask[name] = v is not None
        img_path = (path.parent / row[0]).as_posix()
        image = read_image(img_path) if load_images else None
        out.append(MultiDimSample(image=image, dim_labels=labels,
                                  overall_label=0.0 if vals["overall"] is None else vals["overall"],
                                  source="manifest", dim_mask=mask,
                                  overall_mask=vals["overall"] is not None, path=row[0]))
    return out


def write_manifest(path, samples: Sequence[MultiDimSample], image_paths: Sequence[str],
                   registry: Optional[DimensionRegistry] = None) -> None:
    """Write labels already normalized to [0,1], declaring ``0:1`` ranges."""
    registry = registry or default_registry()
    names = list(registry.names)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["path", "overall"] + names)
        w.writerow(["#range"] + ["0:1"] * (len(names) + 1))
        for s, p in zip(samples, image_paths):
            row = [p, repr(float(s.overall_label)) if s.overall_mask else ""]
            for n in names:
                row.append(repr(float(s.dim_labels[n])) if s.dim_mask.get(n, True) else "")
            w.writerow(row)


# --- augmentation ----------------------------------------------------------------------

def augment(image, crop: int, seed: int, flip: bool = True) -> np.ndarray:
    """Random crop (reflect-padding undersized images) plus optional horizontal flip."""
    img = np.asarray(image, dtype=np.float32)
    _, h, w = img.shape
    ph, pw = max(0, crop - h), max(0, crop - w)
    if ph or pw:
        img = np.pad(img, ((0, 0), (ph // 2, ph - ph // 2), (pw // 2, pw - pw // 2)), mode="reflect")
        _, h, w = img.shape
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 4242]))
    top = int(rng.integers(0, h - crop + 1))
    left = int(rng.integers(0, w - crop + 1))
    out = img[:, top:top + crop, left:left + crop]
    if flip and rng.random() < 0.5:
        out = out[:, :, ::-1]
    return np.ascontiguousarray(out)


def stack_samples(samples: Sequence[MultiDimSample], registry: DimensionRegistry):
    """Arrays (images, dim labels, dim mask, overall, overall mask) in registry order."""
    x = np.stack([s.image for s in samples]).astype(np.float32)
    y = np.array([[s.dim_labels.get(n, 0.0) for n in registry.names] for s in samples], dtype=np.float32)
    m = np.array([[bool(s.dim_mask.get(n, n in s.dim_labels)) for n in registry.names] for s in samples])
    o = np.array([s.overall_label for s in samples], dtype=np.float32)
    om = np.array([s.overall_mask for s in samples])
    return x, y, m, o, om


def epoch_order(n: int, epoch: int, seed: int) -> np.ndarray:
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(epoch), 7])).permutation(n)
