"""Glyph dataset ingestion, splitting, and the synthetic two-domain generator.

Images are single-channel, stored as float32 in [-1, 1] (uint8 level k maps
to k / 127.5 - 1, a bijection on the 256 gray levels). Class indices 0..25
correspond to the capital letters A..Z.

The synthetic generator renders every letter from a built-in stroke
skeleton. The handwritten-like domain perturbs stroke control points with
seeded jitter and wobble and varies stroke width; the machine-printed-like
domain draws clean constant-width strokes with optional serifs. It exists
so the whole pipeline can run and be tested deterministically without any
external data.
"""

from __future__ import annotations

import hashlib
import logging
import struct
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
from PIL import Image, ImageDraw

from .diffusion import DOMAINS, HW, MP, ImageBatch
from .unet import NUM_CLASSES

logger = logging.getLogger(__name__)

LETTERS = "ABCDEFGHIJKLMNOPQRSTUVWXYZ"

TRAIN = "train"
TEST = "test"


def normalize_u8(u8: np.ndarray) -> np.ndarray:
    """Map uint8 levels [0, 255] linearly onto [-1, 1]."""
    return (u8.astype(np.float32) / 127.5) - 1.0


def denormalize_to_u8(x: np.ndarray) -> np.ndarray:
    """Invert normalize_u8 (rounds back to the original byte)."""
    return np.clip(np.rint((np.asarray(x, dtype=np.float32) + 1.0) * 127.5), 0, 255).astype(np.uint8)


@dataclass
class DomainDataset:
    """Immutable labeled image collection from one domain."""

    domain: str
    images: np.ndarray            # (N, 1, H, W) float32 in [-1, 1]
    classes: np.ndarray           # (N,) int64 in 0..25
    split: str | None = None      # TRAIN, TEST, or None for unsplit data
    provenance: str = ""

    def __post_init__(self):
        if self.domain not in DOMAINS:
            raise ValueError(f"unknown domain {self.domain!r}")
        if self.images.ndim != 4 or self.images.shape[1] != 1:
            raise ValueError(f"images must be (N, 1, H, W), got {self.images.shape}")
        if self.classes.shape != (self.images.shape[0],):
            raise ValueError("classes must be one index per image")
        if len(self) and (self.classes.min() < 0 or self.classes.max() >= NUM_CLASSES):
            raise ValueError("class indices must lie in 0..25")

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def resolution(self) -> int:
        return self.images.shape[-1]

    def to_batch(self) -> ImageBatch:
        return ImageBatch(pixels=torch.from_numpy(self.images),
                          domain=self.domain,
                          classes=torch.from_numpy(self.classes))

    def subset(self, indices: np.ndarray, split: str | None = None) -> "DomainDataset":
        return replace(self, images=self.images[indices], classes=self.classes[indices],
                       split=split if split is not None else self.split)


# ---------------------------------------------------------------------------
# Directory ingestion

def load_image_directory(root: str | Path, domain: str, resolution: int = 32) -> DomainDataset:
    """Load a ``<root>/<letter>/<name>.png`` tree of 8-bit grayscale glyphs.

    Files are visited in lexicographic order. Images smaller than the target
    resolution are zero-padded (centered); larger ones are resized first.
    Unreadable or non-grayscale files are skipped with a warning; an empty
    class directory is an error, as is a subdirectory that is not a single
    capital letter.
    """
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset root {root} does not exist")
    images, classes = [], []
    skipped = 0
    for sub in sorted(p for p in root.iterdir() if p.is_dir()):
        if len(sub.name) != 1 or sub.name not in LETTERS:
            raise ValueError(f"unknown class directory {sub.name!r} (expected A..Z)")
        cls = LETTERS.index(sub.name)
        files = sorted(sub.glob("*.png"))
        loaded = 0
        for f in files:
            try:
                with Image.open(f) as im:
                    if im.mode != "L":
                        raise ValueError(f"mode {im.mode}, expected 8-bit grayscale")
                    arr = np.asarray(im, dtype=np.uint8)
            except Exception as exc:  # unreadable or wrong depth: skip, count
                warnings.warn(f"skipping {f}: {exc}", stacklevel=2)
                skipped += 1
                continue
            images.append(fit_resolution(arr, resolution))
            classes.append(cls)
            loaded += 1
        if loaded == 0:
            raise ValueError(f"class directory {sub} contains no loadable images")
    if skipped:
        logger.warning("skipped %d unreadable images under %s", skipped, root)
    stack = np.stack(images)[:, None, :, :] if images else np.zeros((0, 1, resolution, resolution), np.uint8)
    return DomainDataset(domain=domain, images=normalize_u8(stack),
                         classes=np.asarray(classes, dtype=np.int64),
                         provenance=f"dir:{root}")


def fit_resolution(arr: np.ndarray, resolution: int) -> np.ndarray:
    """Center-pad (or resize, if larger) a grayscale array to a square."""
    h, w = arr.shape
    if h > resolution or w > resolution:
        im = Image.fromarray(arr, mode="L").resize((min(w, resolution), min(h, resolution)),
                                                   Image.BILINEAR)
        arr = np.asarray(im, dtype=np.uint8)
        h, w = arr.shape
    out = np.zeros((resolution, resolution), dtype=np.uint8)
    top, left = (resolution - h) // 2, (resolution - w) // 2
    out[top:top + h, left:left + w] = arr
    return out


def save_dataset_pngs(ds: DomainDataset, root: str | Path, prefix: str = "img") -> list[Path]:
    """Write the dataset back out as a ``<root>/<letter>/<name>.png`` tree."""
    root = Path(root)
    written = []
    counters = {c: 0 for c in range(NUM_CLASSES)}
    for i in range(len(ds)):
        cls = int(ds.classes[i])
        sub = root / LETTERS[cls]
        sub.mkdir(parents=True, exist_ok=True)
        path = sub / f"{prefix}_{counters[cls]:04d}.png"
        counters[cls] += 1
        Image.fromarray(denormalize_to_u8(ds.images[i, 0]), mode="L").save(path)
        written.append(path)
    return written


# ---------------------------------------------------------------------------
# Splitting

def split_dataset(ds: DomainDataset, train_fraction: float, seed: int
                  ) -> tuple[DomainDataset, DomainDataset]:
    """Per-class stratified shuffle into disjoint, exhaustive train/test parts.

    Each class contributes round(n * train_fraction) items to the train
    side, clamped so both sides stay non-empty. Classes with fewer than two
    items cannot be split.
    """
    if not 0.0 < train_fraction < 1.0:
        raise ValueError(f"train_fraction must be in (0, 1), got {train_fraction}")
    rng = np.random.default_rng(seed)
    train_idx, test_idx = [], []
    for cls in np.unique(ds.classes):
        idx = np.flatnonzero(ds.classes == cls)
        if idx.size < 2:
            raise ValueError(f"class {LETTERS[int(cls)]} has {idx.size} item(s); cannot split")
        perm = rng.permutation(idx)
        n_train = int(np.clip(round(idx.size * train_fraction), 1, idx.size - 1))
        train_idx.append(perm[:n_train])
        test_idx.append(perm[n_train:])
    train = ds.subset(np.sort(np.concatenate(train_idx)), split=TRAIN)
    test = ds.subset(np.sort(np.concatenate(test_idx)), split=TEST)
    return train, test


# ---------------------------------------------------------------------------
# Synthetic two-domain glyphs

# Stroke skeletons on the unit square (x right, y down), one polyline per stroke.
GLYPH_STROKES: dict[str, list[list[tuple[float, float]]]] = {
    "A": [[(0.0, 1.0), (0.5, 0.0)], [(0.5, 0.0), (1.0, 1.0)], [(0.22, 0.62), (0.78, 0.62)]],
    "B": [[(0.12, 0.0), (0.12, 1.0)],
          [(0.12, 0.0), (0.68, 0.0), (0.84, 0.12), (0.84, 0.38), (0.68, 0.5), (0.12, 0.5)],
          [(0.12, 0.5), (0.72, 0.5), (0.9, 0.62), (0.9, 0.88), (0.72, 1.0), (0.12, 1.0)]],
    "C": [[(0.88, 0.14), (0.6, 0.0), (0.3, 0.0), (0.1, 0.2), (0.1, 0.8), (0.3, 1.0), (0.6, 1.0), (0.88, 0.86)]],
    "D": [[(0.12, 0.0), (0.12, 1.0)],
          [(0.12, 0.0), (0.58, 0.0), (0.88, 0.25), (0.88, 0.75), (0.58, 1.0), (0.12, 1.0)]],
    "E": [[(0.86, 0.0), (0.12, 0.0), (0.12, 1.0), (0.86, 1.0)], [(0.12, 0.5), (0.7, 0.5)]],
    "F": [[(0.86, 0.0), (0.12, 0.0), (0.12, 1.0)], [(0.12, 0.5), (0.7, 0.5)]],
    "G": [[(0.88, 0.14), (0.6, 0.0), (0.3, 0.0), (0.1, 0.2), (0.1, 0.8), (0.3, 1.0),
           (0.64, 1.0), (0.88, 0.82), (0.88, 0.55), (0.58, 0.55)]],
    "H": [[(0.12, 0.0), (0.12, 1.0)], [(0.88, 0.0), (0.88, 1.0)], [(0.12, 0.5), (0.88, 0.5)]],
    "I": [[(0.3, 0.0), (0.7, 0.0)], [(0.5, 0.0), (0.5, 1.0)], [(0.3, 1.0), (0.7, 1.0)]],
    "J": [[(0.4, 0.0), (0.86, 0.0)], [(0.7, 0.0), (0.7, 0.74), (0.54, 1.0), (0.28, 1.0), (0.14, 0.8)]],
    "K": [[(0.12, 0.0), (0.12, 1.0)], [(0.86, 0.0), (0.12, 0.55)], [(0.36, 0.42), (0.9, 1.0)]],
    "L": [[(0.16, 0.0), (0.16, 1.0), (0.86, 1.0)]],
    "M": [[(0.08, 1.0), (0.08, 0.0), (0.5, 0.56), (0.92, 0.0), (0.92, 1.0)]],
    "N": [[(0.12, 1.0), (0.12, 0.0), (0.88, 1.0), (0.88, 0.0)]],
    "O": [[(0.5, 0.0), (0.2, 0.1), (0.1, 0.35), (0.1, 0.65), (0.2, 0.9), (0.5, 1.0),
           (0.8, 0.9), (0.9, 0.65), (0.9, 0.35), (0.8, 0.1), (0.5, 0.0)]],
    "P": [[(0.12, 1.0), (0.12, 0.0), (0.7, 0.0), (0.88, 0.14), (0.88, 0.4), (0.7, 0.54), (0.12, 0.54)]],
    "Q": [[(0.5, 0.0), (0.2, 0.1), (0.1, 0.35), (0.1, 0.65), (0.2, 0.9), (0.5, 1.0),
           (0.8, 0.9), (0.9, 0.65), (0.9, 0.35), (0.8, 0.1), (0.5, 0.0)],
          [(0.6, 0.7), (0.94, 1.0)]],
    "R": [[(0.12, 1.0), (0.12, 0.0), (0.7, 0.0), (0.88, 0.14), (0.88, 0.4), (0.7, 0.54), (0.12, 0.54)],
          [(0.5, 0.54), (0.9, 1.0)]],
    "S": [[(0.86, 0.12), (0.6, 0.0), (0.3, 0.0), (0.12, 0.15), (0.12, 0.35), (0.3, 0.5),
           (0.7, 0.5), (0.88, 0.65), (0.88, 0.85), (0.7, 1.0), (0.34, 1.0), (0.12, 0.88)]],
    "T": [[(0.1, 0.0), (0.9, 0.0)], [(0.5, 0.0), (0.5, 1.0)]],
    "U": [[(0.12, 0.0), (0.12, 0.74), (0.3, 1.0), (0.7, 1.0), (0.88, 0.74), (0.88, 0.0)]],
    "V": [[(0.08, 0.0), (0.5, 1.0), (0.92, 0.0)]],
    "W": [[(0.04, 0.0), (0.27, 1.0), (0.5, 0.42), (0.73, 1.0), (0.96, 0.0)]],
    "X": [[(0.1, 0.0), (0.9, 1.0)], [(0.9, 0.0), (0.1, 1.0)]],
    "Y": [[(0.1, 0.0), (0.5, 0.46)], [(0.9, 0.0), (0.5, 0.46)], [(0.5, 0.46), (0.5, 1.0)]],
    "Z": [[(0.1, 0.0), (0.9, 0.0), (0.1, 1.0), (0.9, 1.0)]],
}


@dataclass(frozen=True)
class SyntheticGlyphSpec:
    """Parameters of the deterministic synthetic glyph benchmark.

    Jitter and wobble are in pixels at the 32-px reference resolution and
    scale proportionally at other resolutions.
    """

    resolution: int = 32
    per_class: int = 20
    jitter: float = 1.5          # displacement of interior stroke points (hw)
    wobble: float = 0.8          # displacement of stroke endpoints (hw)
    hw_stroke_width: int = 2     # at the reference resolution, like jitter
    mp_stroke_width: int = 2
    serifs: bool = True          # mp-only ornament
    seed: int = 0

    def __post_init__(self):
        if self.resolution < 8:
            raise ValueError("resolution below 8 px cannot render strokes")
        if self.per_class < 1:
            raise ValueError("per_class must be >= 1")


def _subdivide(points: list[tuple[float, float]], max_len: float) -> list[tuple[float, float]]:
    out = [points[0]]
    for (x0, y0), (x1, y1) in zip(points, points[1:]):
        dist = float(np.hypot(x1 - x0, y1 - y0))
        pieces = max(1, int(np.ceil(dist / max_len)))
        for j in range(1, pieces + 1):
            s = j / pieces
            out.append((x0 + s * (x1 - x0), y0 + s * (y1 - y0)))
    return out


def _render_glyph(letter: str, resolution: int, width: int, serifs: bool,
                  jitter_px: float, wobble_px: float, angle_deg: float,
                  rng: np.random.Generator | None) -> np.ndarray:
    """Rasterize one glyph; ink is white (255) on black (0)."""
    margin = max(1.0, resolution * 0.14)
    scale = resolution - 2 * margin
    img = Image.new("L", (resolution, resolution), 0)
    draw = ImageDraw.Draw(img)
    for stroke in GLYPH_STROKES[letter]:
        pts = [(margin + x * scale, margin + y * scale) for x, y in stroke]
        if rng is not None and (jitter_px > 0 or wobble_px > 0):
            pts = _subdivide(pts, max_len=max(3.0, resolution / 8))
            moved = []
            for i, (x, y) in enumerate(pts):
                amp = wobble_px if i in (0, len(pts) - 1) else jitter_px
                dx, dy = rng.normal(0.0, amp, size=2) if amp > 0 else (0.0, 0.0)
                moved.append((x + dx, y + dy))
            pts = moved
        draw.line(pts, fill=255, width=width, joint="curve")
        if serifs:
            half = max(1.0, resolution * 0.07)
            for end, nxt in ((pts[0], pts[1]), (pts[-1], pts[-2])):
                ex, ey = end
                # serif bar perpendicular-ish to near-vertical terminals
                if abs(nxt[0] - ex) <= abs(nxt[1] - ey):
                    draw.line([(ex - half, ey), (ex + half, ey)], fill=255, width=max(1, width - 1))
                else:
                    draw.line([(ex, ey - half), (ex, ey + half)], fill=255, width=max(1, width - 1))
    if angle_deg != 0.0:
        img = img.rotate(angle_deg, resample=Image.BILINEAR, fillcolor=0)
    return np.asarray(img, dtype=np.uint8)


def generate_synthetic_domains(spec: SyntheticGlyphSpec) -> tuple[DomainDataset, DomainDataset]:
    """Render the hw-like and mp-like synthetic datasets for one spec.

    Identical spec and seed give byte-identical datasets. With jitter and
    wobble at zero the hw renders coincide with the mp renders up to the
    style parameters (stroke width, serifs).
    """
    rng = np.random.default_rng(spec.seed)
    scale = spec.resolution / 32.0
    jitter_px, wobble_px = spec.jitter * scale, spec.wobble * scale
    mp_width = max(1, round(spec.mp_stroke_width * scale))
    hw_images, mp_images, classes = [], [], []
    for cls, letter in enumerate(LETTERS):
        for _ in range(spec.per_class):
            angle = float(rng.uniform(-6.0, 6.0)) * min(1.0, spec.jitter) if spec.jitter > 0 else 0.0
            width_delta = int(rng.integers(-1, 2)) if spec.jitter > 0 else 0
            hw_width = max(1, round(spec.hw_stroke_width * (1.0 + 0.35 * width_delta) * scale))
            hw_images.append(_render_glyph(letter, spec.resolution, hw_width, False,
                                           jitter_px, wobble_px, angle, rng))
            mp_images.append(_render_glyph(letter, spec.resolution, mp_width,
                                           spec.serifs, 0.0, 0.0, 0.0, None))
            classes.append(cls)
    cls_arr = np.asarray(classes, dtype=np.int64)
    hw = DomainDataset(HW, normalize_u8(np.stack(hw_images)[:, None]), cls_arr.copy(),
                       provenance=f"synthetic:{spec}")
    mp = DomainDataset(MP, normalize_u8(np.stack(mp_images)[:, None]), cls_arr.copy(),
                       provenance=f"synthetic:{spec}")
    for ds in (hw, mp):
        _check_foreground_band(ds)
    return hw, mp


def _check_foreground_band(ds: DomainDataset) -> None:
    # foreground = pixels brighter than mid-gray; guards blank/solid renders
    frac = (ds.images > 0.0).mean(axis=(1, 2, 3))
    if len(ds) and (frac.min() < 0.01 or frac.max() > 0.60):
        bad = int(np.argmin(frac) if frac.min() < 0.01 else np.argmax(frac))
        raise RuntimeError(
            f"synthetic render sanity failed: image {bad} has foreground "
            f"fraction {frac[bad]:.3f} (expected within [0.01, 0.60])")


# ---------------------------------------------------------------------------
# IDX ingestion (EMNIST raw files)

def read_idx(path: str | Path) -> np.ndarray:
    """Read a big-endian IDX file of unsigned bytes into an ndarray."""
    with open(path, "rb") as f:
        zeros, dtype_code, ndim = struct.unpack(">HBB", f.read(4))
        if zeros != 0 or dtype_code != 0x08:
            raise ValueError(f"{path}: unsupported IDX magic (zeros={zeros}, dtype=0x{dtype_code:02x})")
        dims = struct.unpack(f">{ndim}I", f.read(4 * ndim))
        count = int(np.prod(dims))
        buf = f.read(count)
        if len(buf) != count:
            raise ValueError(f"{path}: truncated IDX payload")
    return np.frombuffer(buf, dtype=np.uint8).reshape(dims)


def load_emnist_letters(images_path: str | Path, labels_path: str | Path,
                        domain: str = HW, resolution: int = 32,
                        transposed_storage: bool = True) -> DomainDataset:
    """Load EMNIST-letters raw IDX files (labels 1..26 map to classes 0..25).

    EMNIST stores each image transposed relative to display orientation;
    ``transposed_storage`` applies the corrective transpose at ingestion.
    """
    images = read_idx(images_path)
    labels = read_idx(labels_path).astype(np.int64)
    if images.ndim != 3 or labels.ndim != 1 or images.shape[0] != labels.shape[0]:
        raise ValueError("images/labels IDX shapes do not match")
    if labels.min() < 1 or labels.max() > NUM_CLASSES:
        raise ValueError("EMNIST letter labels must lie in 1..26")
    if transposed_storage:
        images = images.transpose(0, 2, 1)
    fitted = np.stack([fit_resolution(im, resolution) for im in images])[:, None]
    return DomainDataset(domain=domain, images=normalize_u8(fitted), classes=labels - 1,
                         provenance=f"idx:{images_path}")


# ---------------------------------------------------------------------------
# Manifest

def dataset_manifest(ds: DomainDataset) -> str:
    """Text manifest of a dataset: one line per item with a content hash."""
    lines = [f"# domain={ds.domain} split={ds.split or '-'} items={len(ds)} "
             f"resolution={ds.resolution} provenance={ds.provenance}"]
    for i in range(len(ds)):
        digest = hashlib.sha256(denormalize_to_u8(ds.images[i, 0]).tobytes()).hexdigest()
        lines.append(f"{i:06d} {LETTERS[int(ds.classes[i])]} {digest}")
    return "\n".join(lines) + "\n"


def write_dataset_manifest(ds: DomainDataset, path: str | Path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(dataset_manifest(ds))
