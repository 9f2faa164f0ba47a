"""Augmentation study: train a small margin-softmax recognizer on real (and
real + synthetic) images and evaluate it on held-out benchmark strata."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from . import facesim
from .config import RecognitionConfig
from .facesim import FACE_BOX, POSES, ImageDataset, RenderSpec, crop_face, make_identity, to_float
from .nets import IdentityNet
from .pretraining import ArcMarginHead, embed_images, freeze, seeded
from .verification import (Pairs, ScoreSet, VerificationReport, build_pairs, cosine_scores, error_rates,
                           verification_report)

log = logging.getLogger(__name__)

STRATA = ("overall", "cross_pose", "cross_jitter")
VAL_OFFSET = 10_000  # validation identities sit after the benchmark ones in the same seed range
JITTER_SPLIT = 0.175  # midpoint of the wild lighting-jitter range


class IdentityLeakError(ValueError):
    """Training and evaluation identities overlap."""


def _identity_seeds(data: ImageDataset) -> set[int]:
    """Identity seeds from the index (synthetic rows carry only the label)."""
    out = set()
    for r in data.records:
        if "identity_seed" in r:
            out.add(int(r["identity_seed"]))
        elif r["id_label"].startswith("id") and r["id_label"][2:].isdigit():
            out.add(int(r["id_label"][2:]))
        else:
            raise IdentityLeakError(f"cannot audit identity label {r['id_label']!r}")
    return out


def check_disjoint(train: ImageDataset, held_out: ImageDataset, what: str) -> None:
    """Seed-range audit: no identity may appear on both sides, and held-out
    identities must come from the benchmark population."""
    train_ids, held_ids = _identity_seeds(train), _identity_seeds(held_out)
    overlap = train_ids & held_ids
    if overlap:
        raise IdentityLeakError(f"{len(overlap)} identities shared between training and {what}")
    bad = [s for s in held_ids if facesim.population_of(s) != "benchmark"]
    if bad:
        raise IdentityLeakError(f"{what} identities outside the benchmark seed range: {bad[:3]}")
    if any(facesim.population_of(s) == "benchmark" for s in train_ids):
        raise IdentityLeakError("training set contains benchmark-population identities")


def build_heldout(n_ids: int, per_id: int, seed: int = 0, offset: int = 0) -> ImageDataset:
    """Benchmark-population renders; poses alternate so every identity has
    both portrait and side-portrait images."""
    rng = np.random.default_rng([seed, 0xBE, offset])
    items = []
    for s in facesim.identity_seeds("benchmark", n_ids, offset):
        ident = make_identity(s)
        for k in range(per_id):
            spec = facesim.random_spec(rng)
            spec = RenderSpec(POSES[k % 2], spec.background, spec.lighting_jitter, spec.noise_sigma)
            items.append((ident, spec, int(rng.integers(0, 2**31))))
    return facesim.render_many(items)


def _cap(idx: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    if len(idx) <= n:
        return idx
    return idx[np.sort(rng.choice(len(idx), size=n, replace=False))]


def stratum_pairs(data: ImageDataset, stratum: str, n_pairs: int, seed: int = 0) -> Pairs:
    """Balanced genuine/imposter pairs restricted to one nuisance stratum."""
    if stratum not in STRATA:
        raise ValueError(f"unknown stratum {stratum!r}")
    labels = np.asarray(data.labels)
    i, j = np.triu_indices(len(labels), k=1)
    if stratum == "cross_pose":
        pose = np.asarray([r["pose"] for r in data.records])
        keep = pose[i] != pose[j]
    elif stratum == "cross_jitter":
        high = np.asarray([r["lighting_jitter"] > JITTER_SPLIT for r in data.records])
        keep = high[i] != high[j]
    else:
        keep = np.ones(len(i), dtype=bool)
    i, j = i[keep], j[keep]
    same = labels[i] == labels[j]
    rng = np.random.default_rng([seed, 0x57, STRATA.index(stratum)])
    gen = np.stack([i[same], j[same]], axis=1)
    imp = np.stack([i[~same], j[~same]], axis=1)
    n = min(n_pairs, len(gen), len(imp))
    if n == 0:
        raise ValueError(f"stratum {stratum!r} has no usable pairs")
    return Pairs(_cap(gen, n, rng), _cap(imp, n, rng), stratum)


def accuracy_at(scores: ScoreSet, threshold: float) -> float:
    correct = (scores.genuine >= threshold).sum() + (scores.imposter < threshold).sum()
    return float(correct / (len(scores.genuine) + len(scores.imposter)))


def _crops(data: ImageDataset) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(crop_face(to_float(data.images), FACE_BOX)))


def validation_eer(net: IdentityNet, val: ImageDataset, pairs: Pairs) -> float:
    net.eval()
    emb = embed_images(net, val.images)
    return error_rates(cosine_scores(pairs, emb)).eer


@dataclass
class RecognizerResult:
    net: IdentityNet
    n_classes: int
    val_curve: list[float] = field(default_factory=list)
    best_epoch: int = 0


def train_recognizer(train: ImageDataset, val: ImageDataset, cfg: RecognitionConfig, seed: int = 0) -> RecognizerResult:
    """SGD + additive-angular-margin softmax with step decay; early stopping on
    validation EER keeps the best trunk (the classification head is dropped)."""
    check_disjoint(train, val, "validation")
    classes = sorted(set(train.labels))
    y = torch.tensor([classes.index(l) for l in train.labels])
    x = _crops(train)
    val_pairs = build_pairs(val.labels, mode="among", seed=seed)
    with seeded(seed):
        net = IdentityNet(cfg.embedding_dim, cfg.width, cfg.dropout)
        head = ArcMarginHead(cfg.embedding_dim, len(classes), cfg.arc_scale, cfg.arc_margin)
    params = list(net.parameters()) + list(head.parameters())
    opt = torch.optim.SGD(params, lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    sched = torch.optim.lr_scheduler.MultiStepLR(opt, milestones=list(cfg.milestones), gamma=0.1)
    rng = np.random.default_rng([seed, 0x7EC])
    result = RecognizerResult(net, len(classes))
    best, best_state, stale = float("inf"), None, 0
    for epoch in range(cfg.max_epochs):
        net.train()
        perm = rng.permutation(len(y))
        with seeded(seed * 1000 + epoch):  # dropout masks
            for k in range(0, len(perm), cfg.batch_size):
                idx = perm[k:k + cfg.batch_size]
                xb = x[idx]
                flip = torch.from_numpy(rng.random(len(idx)) < 0.5)
                xb = torch.where(flip[:, None, None, None], xb.flip(-1), xb)
                loss = F.cross_entropy(head(net(xb), y[idx]), y[idx])
                opt.zero_grad(set_to_none=True)
                loss.backward()
                opt.step()
        sched.step()
        eer = validation_eer(net, val, val_pairs)
        result.val_curve.append(eer)
        if eer < best:
            best, stale, result.best_epoch = eer, 0, epoch
            best_state = {k: v.clone() for k, v in net.state_dict().items()}
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    net.load_state_dict(best_state)
    freeze(net)
    return result


@dataclass
class StratumResult:
    stratum: str
    accuracy: float
    report: VerificationReport


def evaluate_benchmark(net: IdentityNet, bench: ImageDataset, n_pairs: int, seed: int = 0,
                       train: ImageDataset | None = None) -> list[StratumResult]:
    """Pair accuracy at each stratum's EER threshold, plus the full report."""
    if train is not None:
        check_disjoint(train, bench, "benchmark")
    net.eval()
    emb = embed_images(net, bench.images)
    out = []
    for stratum in STRATA:
        scores = cosine_scores(stratum_pairs(bench, stratum, n_pairs, seed), emb)
        rep = verification_report(scores)
        out.append(StratumResult(stratum, accuracy_at(scores, rep.eer_threshold), rep))
    return out


TABLE4_HEADER = ("csv_version", "setting", "method") + STRATA + ("average",)
CSV_VERSION = "1"


def write_table4(path: str | Path, rows: Sequence[tuple[str, str, Sequence[StratumResult]]]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TABLE4_HEADER)
        for setting, method, results in rows:
            accs = {r.stratum: r.accuracy for r in results}
            vals = [accs[s] for s in STRATA]
            w.writerow([CSV_VERSION, setting, method] + [f"{v:.6f}" for v in vals] + [f"{np.mean(vals):.6f}"])


def mean_accuracy(results: Sequence[StratumResult]) -> float:
    return float(np.mean([r.accuracy for r in results]))
