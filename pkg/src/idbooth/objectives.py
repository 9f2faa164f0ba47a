"""Training losses: noise reconstruction, prior preservation, and the triplet
identity loss with its timestep weighting and face gating."""
from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import torch
import torch.nn.functional as F

UNIT_TOL = 1e-6
RENORM_TOL = 1e-3

LOG_COLUMNS = ("step", "t", "l_rec", "l_pr", "l_tid", "lambda_tid_t", "tid_applied", "total")


@dataclass
class LossBreakdown:
    l_rec: float
    l_pr: float
    l_tid: float
    lambda_pr: float
    lambda_tid_t: float
    total: float
    tid_applied: bool
    tensor: torch.Tensor | None = field(default=None, repr=False, compare=False)

    def row(self, step: int, t: int) -> dict:
        return {"step": step, "t": t, "l_rec": self.l_rec, "l_pr": self.l_pr, "l_tid": self.l_tid,
                "lambda_tid_t": self.lambda_tid_t, "tid_applied": int(self.tid_applied), "total": self.total}


def _mse(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    return (a - b).pow(2).mean()


def loss_rec(eps: torch.Tensor, eps_pred: torch.Tensor) -> torch.Tensor:
    return _mse(eps, eps_pred)


def loss_pr(eps_pr: torch.Tensor, eps_pred_pr: torch.Tensor) -> torch.Tensor:
    return _mse(eps_pr, eps_pred_pr)


def lambda_tid(t: int, T: int) -> float:
    """Identity-loss weight (1 - t/T)^2; vanishes at the noisiest timestep."""
    return (1.0 - t / T) ** 2


def _unit(e: torch.Tensor, name: str) -> torch.Tensor:
    n = e.norm(dim=-1, keepdim=True)
    dev = float((n.detach() - 1.0).abs().max())
    if dev <= UNIT_TOL:
        return e
    if dev <= RENORM_TOL:
        warnings.warn(f"{name} embedding off unit norm by {dev:.2e}; renormalizing", stacklevel=3)
        return e / n
    raise ValueError(f"{name} embedding is not unit norm (deviation {dev:.3g})")


def loss_tid(emb_anchor: torch.Tensor, emb_pos: torch.Tensor, emb_neg: torch.Tensor,
             m: float = 0.4, orientation: str = "corrected") -> torch.Tensor:
    """Triplet hinge on cosine similarities to the anchor.

    ``corrected`` penalizes max(cos(neg, a) - cos(pos, a) + m, 0), pulling the
    anchor toward the positive. ``as_printed`` swaps the two similarities.
    Batched inputs (N, d) are averaged.
    """
    if m < 0:
        raise ValueError("margin must be non-negative")
    a = _unit(emb_anchor, "anchor")
    p = _unit(emb_pos, "positive")
    n = _unit(emb_neg, "negative")
    cos_pos = (a * p).sum(-1)
    cos_neg = (a * n).sum(-1)
    if orientation == "corrected":
        pre = cos_neg - cos_pos + m
    elif orientation == "as_printed":
        pre = cos_pos - cos_neg + m
    else:
        raise ValueError(f"unknown orientation {orientation!r}")
    return F.relu(pre).mean()


def loss_two_point(emb_anchor: torch.Tensor, emb_pos: torch.Tensor) -> torch.Tensor:
    """Plain positive-only identity loss 1 - cos(pos, anchor)."""
    a = _unit(emb_anchor, "anchor")
    p = _unit(emb_pos, "positive")
    return (1.0 - (a * p).sum(-1)).mean()


def total_loss(l_rec: torch.Tensor, l_pr: torch.Tensor | None, l_tid: torch.Tensor | None,
               t: int, T: int, lambda_pr: float = 1.0, face_found: bool = True,
               lambda_tid_override: float | None = None) -> LossBreakdown:
    """Combine the three terms. When no face was found (or there is no
    identity term) the identity loss is left out of the graph entirely."""
    if lambda_pr < 0:
        raise ValueError("lambda_pr must be non-negative")
    lam = lambda_tid(t, T) if lambda_tid_override is None else float(lambda_tid_override)
    if lam < 0:
        raise ValueError("lambda_tid must be non-negative")
    total = l_rec
    l_pr_v = 0.0
    if l_pr is not None:
        total = total + lambda_pr * l_pr
        l_pr_v = float(l_pr.detach())
    applied = face_found and l_tid is not None
    l_tid_v = 0.0
    if applied:
        total = total + lam * l_tid
        l_tid_v = float(l_tid.detach())
    value = float(total.detach())
    if not math.isfinite(value):
        raise FloatingPointError(
            f"non-finite loss: l_rec={float(l_rec.detach())}, l_pr={l_pr_v}, l_tid={l_tid_v}, t={t}"
        )
    return LossBreakdown(float(l_rec.detach()), l_pr_v, l_tid_v, lambda_pr, lam, value, applied, total)


class TrainingLog:
    """Per-step loss rows written as CSV."""

    def __init__(self) -> None:
        self.rows: list[dict] = []

    def append(self, step: int, t: int, parts: LossBreakdown) -> None:
        self.rows.append(parts.row(step, t))

    def write(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=LOG_COLUMNS, lineterminator="\n")
            w.writeheader()
            for r in self.rows:
                w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})

    @staticmethod
    def read(path: str | Path) -> list[dict]:
        with open(path, newline="") as fh:
            return list(csv.DictReader(fh))
