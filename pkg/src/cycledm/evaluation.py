"""Metrics for converted-image quality and the OCR-gain experiment.

The feature space is the penultimate layer of a small classifier trained
from scratch on the joint (domain, class) label space of the two training
splits. On top of it: Frechet distance between Gaussian fits, and
k-NN-manifold precision/recall. Class readability is measured directly in
pixel space with L1 nearest-neighbor classification.

Absolute metric values depend on this extractor and on image resolution;
only comparisons between methods evaluated under the same extractor are
meaningful.
"""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from PIL import Image, ImageDraw, ImageFont

from . import checkpoint as ckpt
from .data import DomainDataset, denormalize_to_u8
from .diffusion import DOMAIN_INDEX, ImageBatch
from .seeding import TorchStream, derive_seed, init_module, numpy_stream
from .unet import NUM_CLASSES

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class FeatureSet:
    """Embedding matrix (N, d) plus a descriptor of where it came from."""

    features: np.ndarray
    source: str = ""

    def __post_init__(self):
        if self.features.ndim != 2:
            raise ValueError("features must be a 2-D (N, d) matrix")
        if not np.isfinite(self.features).all():
            raise ValueError("features must be finite")

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]


def _to_pixel_array(images) -> np.ndarray:
    if isinstance(images, ImageBatch):
        return images.pixels.detach().cpu().numpy()
    if isinstance(images, DomainDataset):
        return images.images
    arr = np.asarray(images, dtype=np.float32)
    if arr.ndim != 4 or arr.shape[1] != 1:
        raise ValueError(f"expected (N, 1, H, W) images, got shape {arr.shape}")
    return arr


# ---------------------------------------------------------------------------
# Feature extractor

class GlyphClassifier(nn.Module):
    """Small CNN over the joint (domain x class) label space."""

    def __init__(self, embed_dim: int = 32, num_labels: int = 2 * NUM_CLASSES):
        super().__init__()
        self.convs = nn.Sequential(
            nn.Conv2d(1, 16, 3, stride=2, padding=1), nn.GroupNorm(4, 16), nn.SiLU(),
            nn.Conv2d(16, 32, 3, stride=2, padding=1), nn.GroupNorm(4, 32), nn.SiLU(),
            nn.Conv2d(32, 64, 3, stride=2, padding=1), nn.GroupNorm(4, 64), nn.SiLU(),
        )
        self.fc_embed = nn.Linear(64, embed_dim)
        self.fc_out = nn.Linear(embed_dim, num_labels)

    def embed(self, x: torch.Tensor) -> torch.Tensor:
        h = self.convs(x).mean(dim=(2, 3))
        return F.silu(self.fc_embed(h))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc_out(self.embed(x))


@dataclass
class ExtractorParams:
    embed_dim: int = 32
    epochs: int = 8
    batch_size: int = 64
    lr: float = 2e-3
    holdout_fraction: float = 0.1


class FeatureExtractor:
    """Trained classifier wrapper exposing embeddings and label predictions."""

    def __init__(self, net: GlyphClassifier, meta: dict):
        self.net = net.eval()
        self.meta = meta

    def embed(self, images, source: str = "") -> FeatureSet:
        arr = _to_pixel_array(images)
        with torch.no_grad():
            feats = self.net.embed(torch.from_numpy(arr)).numpy().astype(np.float64)
        return FeatureSet(features=feats, source=source or f"extractor:{self.meta.get('seed')}")

    def predict_labels(self, images) -> np.ndarray:
        arr = _to_pixel_array(images)
        with torch.no_grad():
            logits = self.net(torch.from_numpy(arr))
        return logits.argmax(dim=1).numpy()

    def predict_domains(self, images) -> np.ndarray:
        return self.predict_labels(images) // NUM_CLASSES

    def save(self, path: str | Path) -> str:
        arch = {"family": "small_cnn", "embed_dim": self.net.fc_embed.out_features,
                "num_labels": self.net.fc_out.out_features}
        return ckpt.save_checkpoint(path, "extractor", arch, self.meta,
                                    ckpt.state_arrays(self.net))

    @classmethod
    def load(cls, path: str | Path) -> "FeatureExtractor":
        data = ckpt.load_checkpoint(path, expect_kind="extractor")
        net = GlyphClassifier(embed_dim=data.arch["embed_dim"], num_labels=data.arch["num_labels"])
        ckpt.load_state_arrays(net, data.arrays)
        return cls(net, data.meta)


def train_feature_extractor(train_sets: Sequence[DomainDataset], seed: int,
                            params: ExtractorParams | None = None) -> FeatureExtractor:
    """Train the embedding classifier on the labeled train splits.

    The label of an image is ``domain * 26 + class``. A holdout slice is
    carved off for the logged accuracy, which doubles as the domain oracle's
    health check.
    """
    params = params or ExtractorParams()
    pixels, labels = [], []
    for ds in train_sets:
        pixels.append(ds.images)
        labels.append(DOMAIN_INDEX[ds.domain] * NUM_CLASSES + ds.classes)
    x = np.concatenate(pixels)
    y = np.concatenate(labels)
    if x.shape[0] == 0:
        raise ValueError("extractor training data is empty")

    rng = numpy_stream(seed, "extractor.data")
    perm = rng.permutation(x.shape[0])
    n_hold = max(1, int(round(params.holdout_fraction * x.shape[0])))
    hold, train = perm[:n_hold], perm[n_hold:]
    if train.size == 0:
        raise ValueError("not enough data to train the extractor")

    net = init_module(GlyphClassifier(params.embed_dim), derive_seed(seed, "extractor.init"))
    opt = torch.optim.Adam(net.parameters(), lr=params.lr)
    xb = torch.from_numpy(x)
    yb = torch.from_numpy(y.astype(np.int64))
    for _ in range(params.epochs):
        order = rng.permutation(train)
        for lo in range(0, order.size, params.batch_size):
            idx = torch.from_numpy(order[lo:lo + params.batch_size])
            loss = F.cross_entropy(net(xb[idx]), yb[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()

    net.eval()
    with torch.no_grad():
        pred = net(xb[torch.from_numpy(hold)]).argmax(dim=1).numpy()
    acc = float((pred == y[hold]).mean())
    logger.info("feature extractor holdout accuracy %.3f (n=%d)", acc, n_hold)
    meta = {"seed": seed, "holdout_accuracy": acc, "params": asdict(params)}
    return FeatureExtractor(net, meta)


# ---------------------------------------------------------------------------
# Distribution metrics

COV_EPS = 1e-6          # ridge added to covariances before the square root
EIG_FLOOR = -1e-6       # most-negative eigenvalue tolerated in the sqrt product


def compute_fid(real: FeatureSet, gen: FeatureSet) -> float:
    """Frechet distance between Gaussian fits of two feature sets.

    ``|mu_r - mu_g|^2 + Tr(S_r + S_g - 2 (S_r S_g)^{1/2})`` with unbiased
    covariances. The cross term is computed by eigendecomposition of the
    symmetrized product ``S_r^{1/2} S_g S_r^{1/2}``; eigenvalues above
    EIG_FLOOR are clamped to zero, anything lower is an error.
    """
    if real.dim != gen.dim:
        raise ValueError(f"feature dims differ: {real.dim} vs {gen.dim}")
    for name, fs in (("real", real), ("gen", gen)):
        if fs.n < 2:
            raise ValueError(f"{name} set needs at least 2 points")
        if fs.n <= fs.dim:
            warnings.warn(f"{name} set has N={fs.n} <= d={fs.dim}; covariance is rank-deficient",
                          stacklevel=2)

    mu_r = real.features.mean(axis=0)
    mu_g = gen.features.mean(axis=0)
    eye = np.eye(real.dim)
    sigma_r = np.cov(real.features, rowvar=False).reshape(real.dim, real.dim) + COV_EPS * eye
    sigma_g = np.cov(gen.features, rowvar=False).reshape(real.dim, real.dim) + COV_EPS * eye

    root_r = _psd_sqrt(sigma_r)
    inner = root_r @ sigma_g @ root_r
    vals = np.linalg.eigvalsh((inner + inner.T) / 2.0)
    if vals.min() < EIG_FLOOR:
        raise FloatingPointError(f"cross-covariance eigenvalue {vals.min():.3e} below {EIG_FLOOR}")
    trace_cross = np.sqrt(np.clip(vals, 0.0, None)).sum()

    fid = float(((mu_r - mu_g) ** 2).sum() + np.trace(sigma_r) + np.trace(sigma_g)
                - 2.0 * trace_cross)
    if not np.isfinite(fid):
        raise FloatingPointError("FID computation produced a non-finite value")
    return max(fid, 0.0)


def _psd_sqrt(mat: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh((mat + mat.T) / 2.0)
    if vals.min() < EIG_FLOOR:
        raise FloatingPointError(f"covariance eigenvalue {vals.min():.3e} below {EIG_FLOOR}")
    return (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T


def knn_precision_recall(real: FeatureSet, gen: FeatureSet, k: int = 3
                         ) -> tuple[float, float]:
    """k-NN-manifold overlap estimates of fidelity and coverage.

    A point is covered by a set if it lies within the k-th-nearest-neighbor
    radius of at least one of the set's points. Precision is the covered
    fraction of ``gen`` under the real manifold; recall is the covered
    fraction of ``real`` under the generated manifold. Coverage uses <=, so
    coincident points always cover each other; equal-distance ties at the
    k-th neighbor do not change the radius value.
    """
    if real.dim != gen.dim:
        raise ValueError(f"feature dims differ: {real.dim} vs {gen.dim}")
    if not k >= 1:
        raise ValueError("k must be >= 1")
    if k >= min(real.n, gen.n):
        raise ValueError(f"k={k} must be smaller than both set sizes ({real.n}, {gen.n})")

    radii_real = _knn_radii(real.features, k)
    radii_gen = _knn_radii(gen.features, k)
    if radii_real.max() == 0.0 or radii_gen.max() == 0.0:
        warnings.warn("degenerate feature set: all points identical", stacklevel=2)

    cross = _pairwise_l2(gen.features, real.features)   # (N_gen, N_real)
    precision = float((cross <= radii_real[None, :]).any(axis=1).mean())
    recall = float((cross.T <= radii_gen[None, :]).any(axis=1).mean())
    return precision, recall


def _knn_radii(features: np.ndarray, k: int) -> np.ndarray:
    dists = _pairwise_l2(features, features)
    # row-sorted: position 0 is the self-distance, position k the k-th neighbor
    return np.sort(dists, axis=1)[:, k]


def _pairwise_l2(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aa = (a ** 2).sum(axis=1)[:, None]
    bb = (b ** 2).sum(axis=1)[None, :]
    sq = np.clip(aa + bb - 2.0 * (a @ b.T), 0.0, None)
    return np.sqrt(sq)


# ---------------------------------------------------------------------------
# Pixel-space nearest-neighbor classification

def nn_classify_accuracy(queries, query_classes, reference: DomainDataset,
                         chunk: int = 256) -> float:
    """Fraction of queries whose L1-nearest reference image shares their class.

    Exact ties pick the lowest reference index.
    """
    q = _to_pixel_array(queries).reshape(len(query_classes), -1)
    if len(reference) == 0:
        raise ValueError("reference set is empty")
    r = reference.images.reshape(len(reference), -1)
    if q.shape[1] != r.shape[1]:
        raise ValueError(f"resolution mismatch: queries {q.shape[1]} px vs reference {r.shape[1]} px")
    labels = np.asarray(query_classes)
    correct = 0
    for lo in range(0, q.shape[0], chunk):
        block = q[lo:lo + chunk]
        dists = np.abs(block[:, None, :] - r[None, :, :]).sum(axis=2)
        nearest = dists.argmin(axis=1)           # argmin takes the lowest index on ties
        correct += int((reference.classes[nearest] == labels[lo:lo + chunk]).sum())
    return correct / q.shape[0]


def ocr_gain_experiment(hw_test: DomainDataset, hw_train: DomainDataset,
                        mp_train: DomainDataset,
                        converter: Callable[[ImageBatch], ImageBatch]) -> tuple[float, float]:
    """Readability before and after converting handwritten glyphs.

    Baseline classifies the raw hw test split against hw training images;
    the converted score classifies the converter's output against mp
    training images. Both use pixel-space L1 nearest neighbor.
    """
    baseline = nn_classify_accuracy(hw_test, hw_test.classes, hw_train)
    converted = converter(hw_test.to_batch())
    converted_acc = nn_classify_accuracy(converted, hw_test.classes, mp_train)
    return baseline, converted_acc


# ---------------------------------------------------------------------------
# Reports

REPORT_COLUMNS = ("accuracy", "precision", "recall", "fid")


@dataclass
class EvalReport:
    direction: str
    method: str
    t_star: int
    accuracy: float
    precision: float
    recall: float
    fid: float
    n_real: int
    n_gen: int
    seed: int

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        return cls(**json.loads(text))


def build_report(direction: str, method: str, t_star: int, accuracy: float,
                 precision: float, recall: float, fid: float,
                 n_real: int, n_gen: int, seed: int) -> EvalReport:
    """Assemble and validate one result row; every metric is mandatory."""
    values = {"accuracy": accuracy, "precision": precision, "recall": recall, "fid": fid}
    for name, v in values.items():
        if v is None:
            raise ValueError(f"missing metric: {name}")
        if not np.isfinite(v):
            raise ValueError(f"metric {name} is not finite: {v!r}")
    for name in ("accuracy", "precision", "recall"):
        if not 0.0 <= values[name] <= 1.0:
            raise ValueError(f"metric {name}={values[name]} outside [0, 1]")
    if fid < 0:
        raise ValueError(f"fid must be >= 0, got {fid}")
    return EvalReport(direction=direction, method=method, t_star=int(t_star),
                      accuracy=float(accuracy), precision=float(precision),
                      recall=float(recall), fid=float(fid),
                      n_real=int(n_real), n_gen=int(n_gen), seed=int(seed))


def render_table(reports: Sequence[EvalReport]) -> str:
    """Aligned text table, one row per report, metric columns in the fixed order."""
    header = ["Method", "Accuracy", "Precision", "Recall", "FID"]
    rows = [[f"{r.method} (t={r.t_star}, {r.direction})",
             f"{r.accuracy:.3f}", f"{r.precision:.3f}", f"{r.recall:.3f}", f"{r.fid:.3f}"]
            for r in reports]
    widths = [max(len(h), *(len(row[i]) for row in rows)) if rows else len(h)
              for i, h in enumerate(header)]
    def fmt(cells):
        return "  ".join(c.rjust(w) if i else c.ljust(w) for i, (c, w) in enumerate(zip(cells, widths)))
    lines = [fmt(header), fmt(["-" * w for w in widths])]
    lines += [fmt(row) for row in rows]
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Comparison grids

def save_image_grid(rows: Sequence[tuple[str, np.ndarray]], path: str | Path,
                    max_cols: int = 12, cell: int | None = None) -> None:
    """Write a labeled comparison grid (one row per method, columns = samples)."""
    if not rows:
        raise ValueError("no rows to render")
    arrays = [_to_pixel_array(imgs) for _, imgs in rows]
    n_cols = min(max_cols, min(a.shape[0] for a in arrays))
    if n_cols == 0:
        raise ValueError("rows contain no images")
    res = arrays[0].shape[-1]
    cell = cell or res
    pad = 2
    label_w = 8 * max(len(label) for label, _ in rows) + 12
    width = label_w + n_cols * (cell + pad) + pad
    height = len(rows) * (cell + pad) + pad
    canvas = Image.new("L", (width, height), 32)
    draw = ImageDraw.Draw(canvas)
    font = ImageFont.load_default()
    for ri, ((label, _), arr) in enumerate(zip(rows, arrays)):
        y = pad + ri * (cell + pad)
        draw.text((6, y + cell // 2 - 5), label, fill=255, font=font)
        for ci in range(n_cols):
            tile = Image.fromarray(denormalize_to_u8(arr[ci, 0]), mode="L")
            if cell != res:
                tile = tile.resize((cell, cell), Image.NEAREST)
            canvas.paste(tile, (label_w + ci * (cell + pad), y))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    canvas.save(path)
