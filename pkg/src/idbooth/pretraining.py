"""Pretraining of the frozen components (autoencoder, identity embedder,
feature extractor) and the base-model bundle that groups them."""
from __future__ import annotations

import contextlib
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import facesim
from .config import NetsConfig, PretrainConfig, SchedulerConfig
from .facesim import FACE_BOX, ImageDataset, crop_face, to_float
from .nets import (Autoencoder, ConditionEncoder, Denoiser, FeatureAutoencoder, IdentityNet, load_module,
                   module_digest, save_module)
from .scheduler import NoiseSchedule, build_schedule
from .verification import ScoreSet, build_pairs, cosine_scores, error_rates

log = logging.getLogger(__name__)


@contextlib.contextmanager
def seeded(seed: int):
    """Run a block under a private, seeded torch RNG."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(int(seed))
        yield


def _batches(rng: np.random.Generator, n: int, batch: int):
    while True:
        yield rng.integers(0, n, size=min(batch, n))


def _cosine_lr(opt: torch.optim.Optimizer, base: float, step: int, total: int, warmup: int = 50) -> None:
    if step < warmup:
        lr = base * (step + 1) / warmup
    else:
        lr = base * 0.5 * (1 + math.cos(math.pi * (step - warmup) / max(total - warmup, 1)))
    for g in opt.param_groups:
        g["lr"] = lr


def freeze(module: nn.Module) -> nn.Module:
    for p in module.parameters():
        p.requires_grad_(False)
    return module.eval()


# ---------------------------------------------------------------------------
# autoencoder


def train_autoencoder(data: ImageDataset, nets: NetsConfig, cfg: PretrainConfig, seed: int = 0) -> Autoencoder:
    rng = np.random.default_rng([seed, 0xAE])
    x = torch.from_numpy(to_float(data.images))
    n_val = max(len(x) // 20, 1)
    perm = rng.permutation(len(x))
    val, train = x[perm[:n_val]], x[perm[n_val:]]
    with seeded(seed):
        ae = Autoencoder(nets.c_z, nets.ae_width)
    opt = torch.optim.Adam(ae.parameters(), lr=cfg.ae_lr)
    gen = torch.Generator().manual_seed(seed)
    batches = _batches(rng, len(train), cfg.ae_batch)
    for step in range(cfg.ae_steps):
        _cosine_lr(opt, cfg.ae_lr, step, cfg.ae_steps)
        xb = train[next(batches)]
        mean, logvar = ae.moments(xb)
        z = mean + torch.exp(0.5 * logvar) * torch.randn(mean.shape, generator=gen)
        rec = torch.tanh(ae.dec(z))
        kl = 0.5 * (mean.pow(2) + logvar.exp() - 1.0 - logvar).mean()
        loss = (rec - xb).abs().mean() + (rec - xb).pow(2).mean() + cfg.ae_kl_weight * kl
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        if step % 250 == 0:
            log.info("autoencoder step %d loss %.4f", step, loss.item())
    freeze(ae)
    with torch.no_grad():
        lat = torch.cat([ae.moments(train[i:i + 256])[0] for i in range(0, len(train), 256)])
        ae.scale_factor.fill_(1.0 / float(lat.std()))
        rec = torch.cat([ae.decode(ae.encode(val[i:i + 256])) for i in range(0, len(val), 256)])
        ae.val_mae.fill_(float((rec - val).abs().mean()))
    log.info("autoencoder val MAE %.4f scale %.4f", float(ae.val_mae), float(ae.scale_factor))
    return ae


@torch.no_grad()
def encode_images(ae: Autoencoder, images: np.ndarray, batch: int = 256) -> torch.Tensor:
    x = torch.from_numpy(to_float(images))
    return torch.cat([ae.encode(x[i:i + batch]) for i in range(0, len(x), batch)])


@torch.no_grad()
def roundtrip(ae: Autoencoder, images: np.ndarray, batch: int = 256) -> np.ndarray:
    x = torch.from_numpy(to_float(images))
    out = torch.cat([ae.decode(ae.encode(x[i:i + batch])) for i in range(0, len(x), batch)])
    return facesim.to_uint8(out.numpy())


# ---------------------------------------------------------------------------
# identity embedder


class ArcMarginHead(nn.Module):
    """Additive angular margin logits: s * cos(theta + m) on the target class."""

    def __init__(self, dim: int, n_classes: int, scale: float = 16.0, margin: float = 0.3):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(n_classes, dim))
        nn.init.xavier_uniform_(self.weight)
        self.scale, self.margin = scale, margin

    def forward(self, emb: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
        cos = F.linear(F.normalize(emb), F.normalize(self.weight)).clamp(-1 + 1e-7, 1 - 1e-7)
        theta = torch.acos(cos)
        target = torch.cos(torch.clamp(theta + self.margin, max=math.pi))
        onehot = F.one_hot(labels, cos.shape[1]).to(cos.dtype)
        return self.scale * (onehot * target + (1 - onehot) * cos)


@torch.no_grad()
def embed_images(phi: IdentityNet, images: np.ndarray, batch: int = 512) -> np.ndarray:
    """Unit-norm identity embeddings of NHWC uint8 images (aligned face crop)."""
    x = torch.from_numpy(to_float(images))
    return torch.cat([phi(crop_face(x[i:i + batch], FACE_BOX)) for i in range(0, len(x), batch)]).numpy()


def separability(phi: IdentityNet, data: ImageDataset, seed: int = 0) -> tuple[float, float, float, float]:
    """(genuine mean, imposter mean, EER, EER threshold) over all genuine pairs."""
    emb = embed_images(phi, data.images)
    pairs = build_pairs(data.labels, mode="among", seed=seed)
    scores = cosine_scores(pairs, emb)
    r = error_rates(scores)
    return float(scores.genuine.mean()), float(scores.imposter.mean()), r.eer, r.eer_threshold


def train_identity_net(nets: NetsConfig, cfg: PretrainConfig, ae: Autoencoder | None = None, seed: int = 0) -> IdentityNet:
    """Margin-softmax training on a population disjoint from every experiment."""
    data = facesim.build_population("phi_train", cfg.phi_ids, cfg.phi_per_id, seed=seed)
    crops = [torch.from_numpy(crop_face(to_float(data.images), FACE_BOX)).contiguous()]
    if ae is not None:  # make the embedder robust to autoencoder blur
        crops.append(torch.from_numpy(crop_face(to_float(roundtrip(ae, data.images)), FACE_BOX)).contiguous())
    labels_list = sorted(set(data.labels))
    y = torch.tensor([labels_list.index(l) for l in data.labels])
    rng = np.random.default_rng([seed, 0xF1])
    with seeded(seed):
        phi = IdentityNet(nets.id_dim)
        head = ArcMarginHead(nets.id_dim, len(labels_list), cfg.phi_arc_scale, cfg.phi_arc_margin)
    params = list(phi.parameters()) + list(head.parameters())
    opt = torch.optim.AdamW(params, lr=cfg.phi_lr, weight_decay=5e-4)
    batches = _batches(rng, len(y), cfg.phi_batch)
    phi.train()
    for step in range(cfg.phi_steps):
        _cosine_lr(opt, cfg.phi_lr, step, cfg.phi_steps)
        idx = next(batches)
        src = rng.integers(0, len(crops), size=len(idx))
        xb = torch.stack([crops[s][i] for s, i in zip(src, idx)])
        if rng.random() < 0.5:  # horizontal flips mimic opposite yaw
            xb = xb.flip(-1)
        loss = F.cross_entropy(head(phi(xb), y[idx]), y[idx])
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        if step % 250 == 0:
            log.info("identity net step %d loss %.4f", step, loss.item())
    freeze(phi)
    val = facesim.build_population("phi_val", cfg.phi_val_ids, cfg.phi_val_per_id, seed=seed)
    stats = separability(phi, val, seed)
    phi.val_stats.copy_(torch.tensor(stats))
    log.info("identity net validation: genuine %.3f imposter %.3f EER %.4f", *stats[:3])
    return phi


# ---------------------------------------------------------------------------
# feature extractor


def train_feature_extractor(data: ImageDataset, nets: NetsConfig, cfg: PretrainConfig, seed: int = 0) -> FeatureAutoencoder:
    rng = np.random.default_rng([seed, 0xFE])
    x = torch.from_numpy(to_float(data.images))
    with seeded(seed + 1):
        fx = FeatureAutoencoder(nets.feature_dim)
    opt = torch.optim.Adam(fx.parameters(), lr=cfg.feature_lr)
    batches = _batches(rng, len(x), cfg.feature_batch)
    size = facesim.IMAGE_SIZE
    for step in range(cfg.feature_steps):
        _cosine_lr(opt, cfg.feature_lr, step, cfg.feature_steps)
        xb = x[next(batches)]
        if step % 2:  # half the batches are upsampled face crops
            xb = F.interpolate(crop_face(xb, FACE_BOX), size=(size, size), mode="bilinear", align_corners=False)
        loss = (fx(xb) - xb).pow(2).mean()
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
    return freeze(fx)


# ---------------------------------------------------------------------------
# bundle


@dataclass
class BaseBundle:
    """Everything a fine-tuning or evaluation run reads from ``base/``."""

    schedule: NoiseSchedule
    autoencoder: Autoencoder
    denoiser: Denoiser | None
    conditioner: ConditionEncoder | None
    phi: IdentityNet
    features: FeatureAutoencoder

    COMPONENTS = ("autoencoder", "denoiser", "conditioner", "phi", "features")

    def save(self, directory: str | Path, **extra) -> dict[str, str]:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        (d / "schedule.json").write_text(self.schedule.to_json() + "\n")
        digests = {}
        for name in self.COMPONENTS:
            module = getattr(self, name)
            if module is not None:
                save_module(module, d / name)
                digests[name] = module_digest(module)
        (d / "digests.json").write_text(json.dumps({**digests, **extra}, indent=1, sort_keys=True) + "\n")
        return digests

    @classmethod
    def load(cls, directory: str | Path) -> "BaseBundle":
        d = Path(directory)
        if not (d / "schedule.json").exists():
            raise FileNotFoundError(f"no base model at {d}")
        sched = NoiseSchedule.from_json((d / "schedule.json").read_text())
        parts = {}
        for name in cls.COMPONENTS:
            parts[name] = freeze(load_module(d / name)) if (d / name / "manifest.json").exists() else None
        return cls(sched, **parts)


def schedule_from(cfg: SchedulerConfig) -> NoiseSchedule:
    return build_schedule(cfg.T, cfg.beta_start, cfg.beta_end, cfg.kind)
