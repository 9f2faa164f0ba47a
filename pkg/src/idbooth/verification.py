"""Genuine/imposter verification analysis: pair construction, cosine scoring,
EER and fixed-operating-point error rates, Fisher discriminant ratio."""
from __future__ import annotations

import csv
import dataclasses
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np


@dataclass
class ScoreSet:
    genuine: np.ndarray
    imposter: np.ndarray

    def __post_init__(self) -> None:
        self.genuine = np.asarray(self.genuine, dtype=np.float64).ravel()
        self.imposter = np.asarray(self.imposter, dtype=np.float64).ravel()
        if not (np.all(np.isfinite(self.genuine)) and np.all(np.isfinite(self.imposter))):
            raise ValueError("scores must be finite")

    def save(self, directory: str | Path) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        (d / "genuine.f64").write_bytes(self.genuine.astype("<f8").tobytes())
        (d / "imposter.f64").write_bytes(self.imposter.astype("<f8").tobytes())

    @classmethod
    def load(cls, directory: str | Path) -> "ScoreSet":
        d = Path(directory)
        return cls(np.frombuffer((d / "genuine.f64").read_bytes(), dtype="<f8"),
                   np.frombuffer((d / "imposter.f64").read_bytes(), dtype="<f8"))


@dataclass
class Pairs:
    genuine: np.ndarray  # (G, 2) index pairs (row into A, row into B or A)
    imposter: np.ndarray
    mode: str


def build_pairs(labels_a: Sequence[str], labels_b: Sequence[str] | None = None,
                mode: str = "among", seed: int = 0) -> Pairs:
    """All genuine pairs plus an equal number of imposter pairs sampled
    uniformly without replacement.

    ``among``: unordered pairs within A, no self-pairs. ``versus``: every
    cross pair A x B.
    """
    a = np.asarray(labels_a)
    if mode == "among":
        i, j = np.triu_indices(len(a), k=1)
        same = a[i] == a[j]
    elif mode == "versus":
        if labels_b is None:
            raise ValueError("versus mode needs a second label set")
        b = np.asarray(labels_b)
        i, j = np.meshgrid(np.arange(len(a)), np.arange(len(b)), indexing="ij")
        i, j = i.ravel(), j.ravel()
        same = a[i] == b[j]
    else:
        raise ValueError(f"unknown pair mode {mode!r}")
    gen = np.stack([i[same], j[same]], axis=1)
    if len(gen) == 0:
        raise ValueError("no genuine pairs: every identity has fewer than two samples")
    imp_all = np.stack([i[~same], j[~same]], axis=1)
    if len(imp_all) < len(gen):
        raise ValueError(f"only {len(imp_all)} imposter pairs available for {len(gen)} genuine pairs")
    rng = np.random.default_rng([seed, 0x1A1])
    pick = np.sort(rng.choice(len(imp_all), size=len(gen), replace=False))
    return Pairs(gen, imp_all[pick], mode)


def cosine_scores(pairs: Pairs, emb_a: np.ndarray, emb_b: np.ndarray | None = None) -> ScoreSet:
    """Dot products of unit-norm embeddings per pair."""
    ea = np.asarray(emb_a, dtype=np.float64)
    eb = ea if emb_b is None else np.asarray(emb_b, dtype=np.float64)
    for arr, pair_col in ((ea, 0), (eb, 1)):
        idx = np.concatenate([pairs.genuine[:, pair_col], pairs.imposter[:, pair_col]])
        if len(idx) and idx.max() >= len(arr):
            raise IndexError("pair references a missing embedding")

    def score(p):
        return np.einsum("ij,ij->i", ea[p[:, 0]], eb[p[:, 1]])

    return ScoreSet(score(pairs.genuine), score(pairs.imposter))


@dataclass
class VerificationReport:
    eer: float
    fmr100: float
    fmr1000: float
    fnmr100: float
    fnmr1000: float
    imposter_mean: float = float("nan")
    imposter_std: float = float("nan")
    genuine_mean: float = float("nan")
    genuine_std: float = float("nan")
    fdr: float = float("nan")
    eer_threshold: float = float("nan")


def det_curve(scores: ScoreSet) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """FMR(tau) = P(imposter >= tau), FNMR(tau) = P(genuine < tau) on the
    sorted union of scores followed by +inf."""
    g = np.sort(scores.genuine)
    im = np.sort(scores.imposter)
    thr = np.append(np.unique(np.concatenate([g, im])), np.inf)
    fmr = 1.0 - np.searchsorted(im, thr, side="left") / len(im)
    fnmr = np.searchsorted(g, thr, side="left") / len(g)
    return thr, fmr, fnmr


def error_rates(scores: ScoreSet) -> VerificationReport:
    if len(scores.genuine) == 0 or len(scores.imposter) == 0:
        raise ValueError("need non-empty genuine and imposter scores")
    thr, fmr, fnmr = det_curve(scores)
    diff = fmr - fnmr  # decreasing in tau, starts >= 0
    i = int(np.argmax(diff <= 0))  # first threshold where FNMR catches up
    if diff[i] == 0 or i == 0:
        eer, tau = float(fmr[i]), float(thr[i])
    else:
        s = diff[i - 1] / (diff[i - 1] - diff[i])
        eer = float(fmr[i - 1] + s * (fmr[i] - fmr[i - 1]))
        hi = thr[i] if np.isfinite(thr[i]) else thr[i - 1]
        tau = float(thr[i - 1] + s * (hi - thr[i - 1]))

    def lowest(values, constraint, target):
        ok = constraint <= target + 1e-12
        return float(values[ok].min()) if ok.any() else 1.0

    fmr100, fmr1000 = lowest(fnmr, fmr, 0.01), lowest(fnmr, fmr, 0.001)
    fnmr100, fnmr1000 = lowest(fmr, fnmr, 0.01), lowest(fmr, fnmr, 0.001)
    return VerificationReport(eer, fmr100, fmr1000, fnmr100, fnmr1000, eer_threshold=tau)


def fdr(scores: ScoreSet) -> float:
    """(mu_gen - mu_imp)^2 / (var_gen + var_imp) with sample variances."""
    g, im = scores.genuine, scores.imposter
    if len(g) < 2 or len(im) < 2:
        raise ValueError("FDR needs at least two scores per distribution")
    var = g.var(ddof=1) + im.var(ddof=1)
    if var == 0:
        raise ValueError("degenerate score distributions with zero variance")
    return float((g.mean() - im.mean()) ** 2 / var)


def fdr_from_moments(mu_gen: float, sd_gen: float, mu_imp: float, sd_imp: float) -> float:
    return (mu_gen - mu_imp) ** 2 / (sd_gen ** 2 + sd_imp ** 2)


def verification_report(scores: ScoreSet) -> VerificationReport:
    r = error_rates(scores)
    r.imposter_mean = float(scores.imposter.mean())
    r.imposter_std = float(scores.imposter.std(ddof=1)) if len(scores.imposter) > 1 else 0.0
    r.genuine_mean = float(scores.genuine.mean())
    r.genuine_std = float(scores.genuine.std(ddof=1)) if len(scores.genuine) > 1 else 0.0
    r.fdr = fdr(scores)
    return r


CSV_VERSION = "1"
TABLE3_COLUMNS = ("eer", "fmr100", "fmr1000", "fnmr100", "fnmr1000", "imposter_mean", "imposter_std",
                  "genuine_mean", "genuine_std", "fdr")
TABLE3_HEADER = ("csv_version", "setting", "method") + TABLE3_COLUMNS


def write_reports(path: str | Path, rows: Sequence[tuple[str, str, VerificationReport]]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TABLE3_HEADER)
        for setting, method, r in rows:
            w.writerow([CSV_VERSION, setting, method] + [repr(float(getattr(r, c))) for c in TABLE3_COLUMNS])


def read_reports(path: str | Path) -> list[tuple[str, str, VerificationReport]]:
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            r = VerificationReport(**{c: float(row[c]) for c in TABLE3_COLUMNS})
            out.append((row["setting"], row["method"], r))
    return out


def report_equal(a: VerificationReport, b: VerificationReport) -> bool:
    fa, fb = dataclasses.asdict(a), dataclasses.asdict(b)
    return all(np.isnan(fa[k]) and np.isnan(fb[k]) or fa[k] == fb[k] for k in TABLE3_COLUMNS)


def plot_score_histogram(scores: ScoreSet, path: str | Path, title: str = "") -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3))
    bins = np.linspace(-1, 1, 81)
    ax.hist(scores.imposter, bins=bins, alpha=0.6, density=True, label="imposter")
    ax.hist(scores.genuine, bins=bins, alpha=0.6, density=True, label="genuine")
    ax.set_xlabel("cosine similarity")
    ax.set_title(title)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)
