"""Base-model pretraining and per-identity LoRA fine-tuning with the
reconstruction, prior-preservation and identity objectives."""
from __future__ import annotations

import copy
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .config import FinetuneConfig, NetsConfig, PretrainConfig, SamplerConfig
from .facesim import FACE_BOX, ImageDataset, crop_face, locate_face, to_float, to_uint8
from .nets import (ConditionEncoder, Denoiser, PromptCondition, inject_lora, load_tensors, lora_parameters,
                   module_digest, save_tensors, tensor_digest)
from .objectives import LossBreakdown, TrainingLog, loss_pr, loss_rec, loss_tid, loss_two_point, total_loss
from .pretraining import BaseBundle, _batches, _cosine_lr, encode_images, freeze, seeded
from .scheduler import add_noise, estimate_z0

log = logging.getLogger(__name__)

GENERIC_PROMPT = PromptCondition()


def _noise(rng: np.random.Generator, shape) -> torch.Tensor:
    return torch.from_numpy(rng.standard_normal(shape).astype(np.float32))


# ---------------------------------------------------------------------------
# base model


def wild_prompt(rec: dict, rng: np.random.Generator, cfg: PretrainConfig) -> PromptCondition | None:
    """Training condition for a wild render, with per-slot and full dropout."""
    if rng.random() < cfg.cond_dropout:
        return None
    keep = rng.random(3) >= cfg.slot_dropout
    return PromptCondition(
        gender=rec["gender"] if keep[0] else None,
        background=int(rec["background"]) if keep[1] else None,
        pose=rec["pose"] if keep[2] else None,
        is_negative_style=rec.get("style") == "cartoon",
    )


def pretrain_base(bundle: BaseBundle, wild: ImageDataset, nets: NetsConfig, cfg: PretrainConfig,
                  seed: int = 0) -> list[float]:
    """Train the conditional denoiser and condition encoder on wild latents.

    Fills ``bundle.denoiser`` and ``bundle.conditioner`` (frozen on return) and
    returns the per-step loss curve.
    """
    if bundle.autoencoder is None:
        raise RuntimeError("base pretraining needs a pretrained autoencoder")
    sched = bundle.schedule
    latents = encode_images(bundle.autoencoder, wild.images)
    rng = np.random.default_rng([seed, 0xBA5E])
    with seeded(seed + 2):
        den = Denoiser(nets.c_z, nets.denoiser_ch, nets.cond_dim, T=sched.T)
        cond = ConditionEncoder(nets.cond_dim)
    params = list(den.parameters()) + list(cond.parameters())
    opt = torch.optim.Adam(params, lr=cfg.base_lr)
    batches = _batches(rng, len(latents), cfg.base_batch)
    curve = []
    for step in range(cfg.base_steps):
        _cosine_lr(opt, cfg.base_lr, step, cfg.base_steps, warmup=200)
        idx = next(batches)
        z0 = latents[idx]
        t = rng.integers(0, sched.T, size=len(idx))
        eps = _noise(rng, z0.shape)
        c = cond.encode_batch([wild_prompt(wild.records[i], rng, cfg) for i in idx])
        loss = loss_rec(eps, den(add_noise(z0, t, eps, sched), torch.from_numpy(t), c))
        opt.zero_grad(set_to_none=True)
        loss.backward()
        torch.nn.utils.clip_grad_norm_(params, 1.0)
        opt.step()
        curve.append(float(loss.detach()))
        if step % 500 == 0:
            log.info("base step %d loss %.4f", step, curve[-1])
    bundle.denoiser, bundle.conditioner = freeze(den), freeze(cond)
    return curve


def generate_prior_set(bundle: BaseBundle, n: int, sampler: SamplerConfig, seed: int = 0) -> ImageDataset:
    """Prior-preservation images from the base model under the generic prompt."""
    from .sampler import sample_cfg

    if n < 1:
        raise ValueError("prior set size must be >= 1")
    if bundle.denoiser is None:
        raise RuntimeError("pretrained base denoiser required")
    if any(n_.endswith("lora_A") for n_, _ in bundle.denoiser.named_parameters()):
        raise RuntimeError("prior images must come from the base model, before LoRA injection")
    digest = module_digest(bundle.denoiser)
    with torch.no_grad():
        c_pos = bundle.conditioner(GENERIC_PROMPT)
        c_neg = bundle.conditioner(None)
    seeds = [int(s) for s in np.random.default_rng([seed, 0x9A]).integers(0, 2**31, size=n)]
    images = []
    for i in range(0, n, sampler.batch):
        chunk = seeds[i:i + sampler.batch]
        x = sample_cfg(bundle, c_pos.expand(len(chunk), -1), c_neg.expand(len(chunk), -1), sampler.guidance,
                       sampler.steps, chunk, eta=sampler.eta)
        images.append(x)

    imgs = to_uint8(np.concatenate(images))
    records = [{"id_label": "prior", "seed": s, "prompt": GENERIC_PROMPT.to_dict(), "base_digest": digest,
                "face_box": FACE_BOX.as_list()} for s in seeds]
    return ImageDataset(imgs, records)


# ---------------------------------------------------------------------------
# per-identity fine-tuning


@dataclass
class IdentityModel:
    """A base denoiser with LoRA adapters plus a condition encoder carrying
    one extra identity token."""

    bundle: BaseBundle
    denoiser: Denoiser
    conditioner: ConditionEncoder
    token: str

    @classmethod
    def create(cls, bundle: BaseBundle, token: str, rank: int = 4, scale: float = 1.0, seed: int = 0) -> "IdentityModel":
        den = inject_lora(copy.deepcopy(bundle.denoiser), rank, seed, scale)
        cond = copy.deepcopy(bundle.conditioner)
        for p in cond.parameters():
            p.requires_grad_(False)
        cond.add_identity_token(token, seed=seed).requires_grad_(True)
        return cls(bundle, den, cond, token)

    def trainable(self) -> dict[str, torch.Tensor]:
        out = {f"denoiser.{k}": v for k, v in lora_parameters(self.denoiser).items()}
        out["token"] = self.conditioner.identity[self.token]
        return out

    def save(self, directory: str | Path, **extra) -> Path:
        meta = {"token": self.token, "lora_rank": self.denoiser.lora_rank,
                "lora_scale": next(m.scale for m in self.denoiser.modules() if hasattr(m, "lora_A")),
                "base_digest": module_digest(self.bundle.denoiser), **extra}
        return save_tensors(self.trainable(), directory, {"lora": meta})

    @classmethod
    def load(cls, bundle: BaseBundle, directory: str | Path) -> "IdentityModel":
        tensors, manifest = load_tensors(directory)
        meta = manifest["lora"]
        model = cls.create(bundle, meta["token"], meta["lora_rank"], meta["lora_scale"])
        with torch.no_grad():
            for name, p in model.trainable().items():
                p.copy_(tensors[name])
        freeze(model.denoiser)
        freeze(model.conditioner)
        return model


@dataclass
class TrainItem:
    """A real training image prepared for fine-tuning."""

    latent: torch.Tensor  # (1, c_z, 12, 12)
    embedding: torch.Tensor  # (1, d_id), unit norm


def prepare_items(bundle: BaseBundle, data: ImageDataset) -> list[TrainItem]:
    lat = encode_images(bundle.autoencoder, data.images)
    with torch.no_grad():
        emb = bundle.phi(crop_face(torch.from_numpy(to_float(data.images)), FACE_BOX))
    return [TrainItem(lat[i:i + 1], emb[i:i + 1]) for i in range(len(data))]


def finetune_step(model: IdentityModel, item: TrainItem, prior: TrainItem, cfg: FinetuneConfig,
                  rng: np.random.Generator, optimizer: torch.optim.Optimizer | None = None,
                  lambda_tid_override: float | None = None) -> tuple[LossBreakdown, int]:
    """One optimizer step on the LoRA factors and identity token.

    Returns the step's loss breakdown and the sampled content timestep. With
    ``optimizer=None`` gradients are computed but no update is applied.
    """
    b = model.bundle
    sched = b.schedule
    t = int(rng.integers(0, sched.T))
    t_pr = int(rng.integers(0, sched.T))
    eps = _noise(rng, item.latent.shape)
    eps_pr = _noise(rng, prior.latent.shape)
    det_seed = int(rng.integers(0, 2**31))

    zt = add_noise(item.latent, t, eps, sched)
    c = model.conditioner(PromptCondition(id_token=model.token))
    if cfg.use_prior:
        zpr_t = add_noise(prior.latent, t_pr, eps_pr, sched)
        c_pr = model.conditioner(GENERIC_PROMPT)
        pred = model.denoiser(torch.cat([zt, zpr_t]), torch.tensor([t, t_pr]), torch.stack([c, c_pr]))
        eps_pred, eps_pred_pr = pred[:1], pred[1:]
        l_pr = loss_pr(eps_pr, eps_pred_pr)
    else:
        eps_pred = model.denoiser(zt, torch.tensor([t]), c[None])
        l_pr = None
    l_rec = loss_rec(eps, eps_pred)

    l_tid, face_found = None, False
    if cfg.tid_mode != "none":
        x_hat = b.autoencoder.decode(estimate_z0(zt, t, eps_pred, sched))
        anchor_box = locate_face(x_hat, cfg.detector_fail_rate, det_seed)
        face_found = anchor_box is not None
        if face_found:
            anchor = b.phi(crop_face(x_hat, anchor_box))
            if cfg.tid_mode == "triplet":
                l_tid = loss_tid(anchor, item.embedding, prior.embedding, cfg.margin, cfg.tid_orientation)
            else:
                l_tid = loss_two_point(anchor, item.embedding)

    parts = total_loss(l_rec, l_pr, l_tid, t, sched.T, cfg.lambda_pr if cfg.use_prior else 0.0,
                       face_found, lambda_tid_override)
    params = list(model.trainable().values())
    for p in params:
        p.grad = None
    parts.tensor.backward()
    torch.nn.utils.clip_grad_norm_(params, cfg.grad_clip)
    if optimizer is not None:
        optimizer.step()
    return parts, t


def make_optimizer(model: IdentityModel, cfg: FinetuneConfig) -> torch.optim.Optimizer:
    return torch.optim.AdamW(list(model.trainable().values()), lr=cfg.lr, betas=(cfg.adam_beta1, cfg.adam_beta2),
                             eps=cfg.adam_eps, weight_decay=cfg.weight_decay)


def frozen_digest(model: IdentityModel) -> str:
    """Hash of every tensor fine-tuning must leave untouched."""
    b = model.bundle
    tensors = {}
    for prefix, mod in (("ae", b.autoencoder), ("phi", b.phi)):
        tensors.update({f"{prefix}.{k}": v for k, v in mod.state_dict().items()})
    trainable = {id(p) for p in model.trainable().values()}
    tensors.update({f"den.{k}": v for k, v in model.denoiser.named_parameters() if id(v) not in trainable})
    tensors.update({f"cond.{k}": v for k, v in model.conditioner.named_parameters() if id(v) not in trainable})
    return tensor_digest(tensors)


def finetune_identity(bundle: BaseBundle, identity_images: ImageDataset, prior_set: ImageDataset,
                      cfg: FinetuneConfig, token: str, out_dir: str | Path | None = None,
                      priors: list[TrainItem] | None = None) -> tuple[IdentityModel, TrainingLog]:
    """Fine-tune LoRA adapters and an identity token on one subject's images."""
    if len(identity_images) == 0:
        raise ValueError("no identity images")
    if len(prior_set) == 0:
        raise ValueError("empty prior set")
    items = prepare_items(bundle, identity_images)
    priors = priors if priors is not None else prepare_items(bundle, prior_set)
    model = IdentityModel.create(bundle, token, cfg.lora_rank, cfg.lora_scale, cfg.seed)
    opt = make_optimizer(model, cfg)
    rng = np.random.default_rng([cfg.seed, 0xF7])
    before = frozen_digest(model)
    tlog = TrainingLog()
    step = 0
    for _ in range(cfg.epochs):
        for i in rng.permutation(len(items)):
            prior = priors[int(rng.integers(0, len(priors)))]
            parts, t = finetune_step(model, items[int(i)], prior, cfg, rng, opt)
            tlog.append(step, t, parts)
            step += 1
    if frozen_digest(model) != before:
        raise RuntimeError("frozen tensors changed during fine-tuning")
    freeze(model.denoiser)
    freeze(model.conditioner)
    if out_dir is not None:
        out = Path(out_dir)
        model.save(out / "lora.ckpt", seed=cfg.seed, tid_mode=cfg.tid_mode, tid_orientation=cfg.tid_orientation)
        tlog.write(out / "train_log.csv")
    return model, tlog


def identity_token(id_label: str) -> str:
    return f"sks_{id_label}"
