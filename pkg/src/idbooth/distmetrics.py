"""Distribution-level metrics on extracted features: Frechet distance, kernel
distance (unbiased polynomial MMD^2), density/coverage and Vendi score."""
from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .facesim import FACE_BOX, IMAGE_SIZE, crop_face, to_float

COV_SHRINK = 1e-6


@dataclass
class FeatureSet:
    features: np.ndarray
    ids: list[str] | None = None
    mode: str = "entire"

    def __post_init__(self) -> None:
        self.features = np.asarray(self.features, dtype=np.float32)
        if self.features.ndim != 2:
            raise ValueError("features must be an (n, d) matrix")
        if not np.all(np.isfinite(self.features)):
            raise ValueError("features contain non-finite values")
        if self.ids is not None and len(self.ids) != len(self.features):
            raise ValueError("one id label per row required")

    def __len__(self) -> int:
        return len(self.features)

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def save(self, path: str | Path) -> None:
        """Raw row-major f32le blob at ``path`` plus ``path.json`` sidecar."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(self.features.astype("<f4").tobytes(order="C"))
        ids_file = None
        if self.ids is not None:
            ids_file = path.name + ".ids.json"
            (path.parent / ids_file).write_text(json.dumps(self.ids))
        meta = {"count": len(self), "dim": self.dim, "dtype": "f32le", "layout": "row-major",
                "mode": self.mode, "ids_file": ids_file}
        path.with_name(path.name + ".json").write_text(json.dumps(meta, indent=1, sort_keys=True))

    @classmethod
    def load(cls, path: str | Path) -> "FeatureSet":
        path = Path(path)
        meta = json.loads(path.with_name(path.name + ".json").read_text())
        arr = np.frombuffer(path.read_bytes(), dtype="<f4").reshape(meta["count"], meta["dim"])
        ids = None
        if meta.get("ids_file"):
            ids = json.loads((path.parent / meta["ids_file"]).read_text())
        return cls(arr.copy(), ids, meta["mode"])


@torch.no_grad()
def extract_features(images: np.ndarray, extractor, mode: str = "entire",
                     ids: Sequence[str] | None = None, batch: int = 256) -> FeatureSet:
    """Pooled activations of the frozen feature encoder.

    ``images`` are NHWC uint8. In ``face`` mode the aligned face box is cropped
    and resized back to the full input resolution first.
    """
    if extractor is None:
        raise RuntimeError("feature extractor not loaded")
    if mode not in ("entire", "face"):
        raise ValueError(f"unknown feature mode {mode!r}")
    x = torch.from_numpy(to_float(images))
    out = []
    for i in range(0, len(x), batch):
        xb = x[i:i + batch]
        if mode == "face":
            xb = F.interpolate(crop_face(xb, FACE_BOX), size=(IMAGE_SIZE, IMAGE_SIZE), mode="bilinear",
                               align_corners=False)
        out.append(extractor.features(xb).numpy())
    return FeatureSet(np.concatenate(out), list(ids) if ids is not None else None, mode)


def _as_array(x) -> np.ndarray:
    return np.asarray(x.features if isinstance(x, FeatureSet) else x, dtype=np.float64)


def _stats(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mu = x.mean(axis=0)
    sigma = np.atleast_2d(np.cov(x, rowvar=False, ddof=1))
    return mu, sigma + COV_SHRINK * np.eye(sigma.shape[0])


def _psd_sqrt(a: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh((a + a.T) / 2)
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def frechet_distance(X, Y) -> float:
    """||mu1 - mu2||^2 + Tr(S1 + S2 - 2 (S1 S2)^(1/2)), sample covariances (n-1)."""
    x, y = _as_array(X), _as_array(Y)
    if len(x) < 2 or len(y) < 2:
        raise ValueError("Frechet distance needs at least two samples per set")
    d = x.shape[1]
    if len(x) < d + 1 or len(y) < d + 1:
        warnings.warn(f"fewer samples than dim+1 ({len(x)}, {len(y)} vs {d}); covariance is singular",
                      stacklevel=2)
    mu1, s1 = _stats(x)
    mu2, s2 = _stats(y)
    r1 = _psd_sqrt(s1)
    mid = r1 @ s2 @ r1
    w = np.linalg.eigvalsh((mid + mid.T) / 2)
    tr_covmean = np.sqrt(np.clip(w, 0.0, None)).sum()
    diff = mu1 - mu2
    return float(max(diff @ diff + np.trace(s1) + np.trace(s2) - 2.0 * tr_covmean, 0.0))


def polynomial_kernel(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    d = a.shape[1]
    return (a @ b.T / d + 1.0) ** 3


def kernel_distance(X, Y) -> float:
    """Unbiased MMD^2 with the cubic polynomial kernel (a.b/d + 1)^3.

    Within-set terms average off-diagonal entries. For equal set sizes the
    cross term also skips the paired diagonal (the one-sample U-statistic),
    which is still unbiased and makes the estimate exactly 0 for X = Y.
    """
    x, y = _as_array(X), _as_array(Y)
    n, m = len(x), len(y)
    if n < 2 or m < 2:
        raise ValueError("kernel distance needs at least two samples per set")
    kxx = polynomial_kernel(x, x)
    kyy = polynomial_kernel(y, y)
    kxy = polynomial_kernel(x, y)
    sxx = (kxx.sum() - np.trace(kxx)) / (n * (n - 1))
    syy = (kyy.sum() - np.trace(kyy)) / (m * (m - 1))
    sxy = (kxy.sum() - np.trace(kxy)) / (n * (n - 1)) if n == m else kxy.mean()
    return float(sxx + syy - 2.0 * sxy)


def _pairwise(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    sq = (a * a).sum(1)[:, None] + (b * b).sum(1)[None, :] - 2.0 * a @ b.T
    return np.sqrt(np.clip(sq, 0.0, None))


def density_coverage(real_X, fake_Y, k: int = 5) -> tuple[float, float]:
    real, fake = _as_array(real_X), _as_array(fake_Y)
    if k < 1 or k >= len(real):
        raise ValueError(f"k must satisfy 1 <= k < {len(real)}")
    radii = np.sort(_pairwise(real, real), axis=1)[:, k]  # column 0 is the point itself
    inside = _pairwise(real, fake) <= radii[:, None]  # (n_real, n_fake)
    density = inside.sum() / (k * len(fake))
    coverage = inside.any(axis=1).mean()
    return float(density), float(coverage)


def _vendi(x: np.ndarray) -> float:
    x = x / np.linalg.norm(x, axis=1, keepdims=True).clip(1e-12)
    n = len(x)
    lam = np.linalg.eigvalsh(x @ x.T / n)
    lam = lam[lam > 0]
    return float(np.exp(-(lam * np.log(lam)).sum()))


def vendi_score(X, per_id: bool = False):
    """exp of the eigenvalue entropy of the normalized cosine kernel."""
    x = _as_array(X)
    if len(x) < 1:
        raise ValueError("Vendi score needs at least one sample")
    if not per_id:
        return _vendi(x)
    ids = X.ids if isinstance(X, FeatureSet) else None
    if ids is None:
        raise ValueError("per-identity Vendi score needs id labels")
    labels = np.asarray(ids)
    return {lab: _vendi(x[labels == lab]) for lab in sorted(set(ids))}


@dataclass
class MetricReport:
    frechet: float
    kernel: float
    density: float
    coverage: float
    vendi_per_id: dict[str, float] = field(default_factory=dict)
    k_neighbors: int = 5

    @property
    def vendi_mean(self) -> float:
        return float(np.mean(list(self.vendi_per_id.values()))) if self.vendi_per_id else float("nan")


def metric_report(real: FeatureSet, fake: FeatureSet, k: int = 5) -> MetricReport:
    dens, cov = density_coverage(real, fake, k)
    vendi = vendi_score(fake, per_id=True) if fake.ids is not None else {}
    return MetricReport(frechet_distance(real, fake), kernel_distance(real, fake), dens, cov, vendi, k)


TABLE1_HEADER = ("csv_version", "method", "mode", "frechet", "kernel", "density", "coverage", "vendi_per_id", "k")
CSV_VERSION = "1"


def write_metric_rows(path: str | Path, rows: Sequence[tuple[str, str, MetricReport]]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TABLE1_HEADER)
        for method, mode, r in rows:
            w.writerow([CSV_VERSION, method, mode, f"{r.frechet:.6f}", f"{r.kernel:.6f}", f"{r.density:.6f}",
                        f"{r.coverage:.6f}", f"{r.vendi_mean:.6f}", r.k_neighbors])


def plot_metric_bars(rows: Sequence[tuple[str, str, MetricReport]], path: str | Path) -> None:
    """One panel per metric, bars grouped by method with entire/face side by side."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    names = ("frechet", "kernel", "density", "coverage")
    methods = list(dict.fromkeys(m for m, _, _ in rows))
    fig, axes = plt.subplots(1, len(names), figsize=(3 * len(names), 3))
    x = np.arange(len(methods))
    for ax, metric in zip(axes, names):
        for k, mode in enumerate(("entire", "face")):
            vals = [next((getattr(r, metric) for m, md, r in rows if m == meth and md == mode), np.nan)
                    for meth in methods]
            ax.bar(x + 0.4 * k - 0.2, vals, width=0.4, label=mode)
        ax.set_xticks(x, methods, rotation=30, ha="right", fontsize=7)
        ax.set_title(metric)
    axes[0].legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)
