"""Desk-scale networks: autoencoder, conditional denoiser, condition encoder,
identity embedder, feature extractor, and LoRA injection.

Checkpoints are directories holding ``manifest.json`` plus one raw
little-endian float32 blob per tensor.
"""
from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .facesim import BACKGROUNDS, CROP_SIZE, GENDERS, IMAGE_SIZE, POSES

FORMAT_VERSION = 1


def _gn(ch: int) -> nn.GroupNorm:
    return nn.GroupNorm(math.gcd(8, ch), ch)


# ---------------------------------------------------------------------------
# autoencoder


class Autoencoder(nn.Module):
    """Image (3, 48, 48) <-> latent (c_z, 12, 12)."""

    def __init__(self, c_z: int = 4, width: int = 48):
        super().__init__()
        self.c_z, self.width = c_z, width
        w = width
        self.enc = nn.Sequential(
            nn.Conv2d(3, w // 2, 3, padding=1), nn.SiLU(),
            nn.Conv2d(w // 2, w, 4, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(w, w, 3, padding=1), nn.SiLU(),
            nn.Conv2d(w, 2 * w, 4, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(2 * w, 2 * c_z, 3, padding=1),
        )
        self.dec = nn.Sequential(
            nn.Conv2d(c_z, 2 * w, 3, padding=1), nn.SiLU(),
            nn.ConvTranspose2d(2 * w, w, 4, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(w, w, 3, padding=1), nn.SiLU(),
            nn.ConvTranspose2d(w, w // 2, 4, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(w // 2, 3, 3, padding=1),
        )
        # latent scale to unit marginal variance; set after pretraining
        self.register_buffer("scale_factor", torch.ones(()))
        # stored reconstruction threshold (per-pixel MAE) measured on validation data
        self.register_buffer("val_mae", torch.full((), float("nan")))

    def config(self) -> dict:
        return {"c_z": self.c_z, "width": self.width}

    def moments(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        self._check(x, IMAGE_SIZE)
        h = self.enc(x)
        mean, logvar = h.chunk(2, dim=1)
        return mean, logvar.clamp(-12.0, 6.0)

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        return self.moments(x)[0] * self.scale_factor

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        self._check(z, IMAGE_SIZE // 4)
        return torch.tanh(self.dec(z / self.scale_factor))

    @staticmethod
    def _check(x: torch.Tensor, size: int) -> None:
        if x.dim() != 4 or x.shape[-1] != size or x.shape[-2] != size:
            raise ValueError(f"expected (N, C, {size}, {size}), got {tuple(x.shape)}")


# ---------------------------------------------------------------------------
# LoRA


class LoRALinear(nn.Module):
    """Frozen linear layer plus a trainable rank-r delta ``scale * B @ A``."""

    def __init__(self, base: nn.Linear, rank: int, scale: float = 1.0, generator: torch.Generator | None = None):
        super().__init__()
        if rank < 1:
            raise ValueError("LoRA rank must be >= 1")
        self.base = base
        self.rank, self.scale = rank, scale
        for p in base.parameters():
            p.requires_grad_(False)
        a = torch.randn(rank, base.in_features, generator=generator, dtype=base.weight.dtype) / math.sqrt(rank)
        self.lora_A = nn.Parameter(a)
        self.lora_B = nn.Parameter(torch.zeros(base.out_features, rank, dtype=base.weight.dtype))

    @property
    def in_features(self) -> int:
        return self.base.in_features

    @property
    def out_features(self) -> int:
        return self.base.out_features

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.base(x) + self.scale * F.linear(F.linear(x, self.lora_A), self.lora_B)


def lora_target_names(net: nn.Module) -> list[str]:
    return [n for n, m in net.named_modules() if isinstance(m, nn.Linear) and getattr(m, "_lora_target", False)]


def _set_submodule(root: nn.Module, name: str, module: nn.Module) -> None:
    parent_name, _, child = name.rpartition(".")
    parent = root.get_submodule(parent_name) if parent_name else root
    setattr(parent, child, module)


def inject_lora(net: "Denoiser", rank: int = 4, seed: int = 0, scale: float = 1.0) -> "Denoiser":
    """Wrap every attention/projection linear layer with a LoRA pair, in place.

    Afterwards only the LoRA factors require gradients.
    """
    if rank < 1:
        raise ValueError("LoRA rank must be >= 1")
    if any(isinstance(m, LoRALinear) for m in net.modules()):
        raise RuntimeError("LoRA adapters already injected")
    for p in net.parameters():
        p.requires_grad_(False)
    gen = torch.Generator().manual_seed(int(seed))
    for name in lora_target_names(net):
        _set_submodule(net, name, LoRALinear(net.get_submodule(name), rank, scale, gen))
    net.lora_rank = rank
    return net


def lora_parameters(net: nn.Module) -> dict[str, torch.Tensor]:
    return {n: p for n, p in net.named_parameters() if n.endswith("lora_A") or n.endswith("lora_B")}


# ---------------------------------------------------------------------------
# conditioning


@dataclass(frozen=True)
class PromptCondition:
    """Structured prompt: ``face [P] photo of [G] [ID] person, [B] background``.

    Every slot is optional. ``PromptCondition()`` is the generic
    "photo of a person" prompt; the unconditional (dropped) prompt is
    represented by ``None`` at the encoder.
    """

    id_token: str | None = None
    gender: str | None = None
    background: int | None = None
    pose: str | None = None
    is_negative_style: bool = False

    def to_dict(self) -> dict:
        return {"id_token": self.id_token, "gender": self.gender, "background": self.background,
                "pose": self.pose, "is_negative_style": self.is_negative_style}

    @classmethod
    def from_dict(cls, d: dict) -> "PromptCondition":
        return cls(d.get("id_token"), d.get("gender"), d.get("background"), d.get("pose"),
                   bool(d.get("is_negative_style", False)))


class ConditionEncoder(nn.Module):
    """Embedding-table stand-in for a text encoder: one learned vector per
    slot value, summed. Absent slots contribute that slot's null entry."""

    def __init__(self, dim: int = 64, seed_scale: float = 0.3):
        super().__init__()
        self.dim = dim
        self.photo = nn.Parameter(torch.randn(dim) * seed_scale)
        self.uncond = nn.Parameter(torch.randn(dim) * seed_scale)
        self.style = nn.Parameter(torch.randn(dim) * seed_scale)
        self.gender = nn.Embedding(len(GENDERS) + 1, dim)
        self.background = nn.Embedding(len(BACKGROUNDS) + 1, dim)
        self.pose = nn.Embedding(len(POSES) + 1, dim)
        self.id_null = nn.Parameter(torch.zeros(dim))
        for emb in (self.gender, self.background, self.pose):
            nn.init.normal_(emb.weight, std=seed_scale)
        self.identity = nn.ParameterDict()

    def config(self) -> dict:
        return {"dim": self.dim}

    def add_identity_token(self, token: str, seed: int = 0, std: float = 0.1) -> nn.Parameter:
        if token in self.identity:
            raise ValueError(f"identity token {token!r} already present")
        g = torch.Generator().manual_seed(int(seed))
        p = nn.Parameter(torch.randn(self.dim, generator=g, dtype=self.photo.dtype) * std)
        self.identity[token] = p
        return p

    def forward(self, p: PromptCondition | None) -> torch.Tensor:
        if p is None:
            return self.uncond
        if p.gender is not None and p.gender not in GENDERS:
            raise KeyError(f"unknown gender token {p.gender!r}")
        if p.pose is not None and p.pose not in POSES:
            raise KeyError(f"unknown pose token {p.pose!r}")
        if p.background is not None and not 0 <= int(p.background) < len(BACKGROUNDS):
            raise KeyError(f"unknown background token {p.background!r}")
        if p.id_token is not None and p.id_token not in self.identity:
            raise KeyError(f"unknown identity token {p.id_token!r}")
        g = len(GENDERS) if p.gender is None else GENDERS.index(p.gender)
        b = len(BACKGROUNDS) if p.background is None else int(p.background)
        q = len(POSES) if p.pose is None else POSES.index(p.pose)
        c = self.photo + self.gender.weight[g] + self.background.weight[b] + self.pose.weight[q]
        c = c + (self.id_null if p.id_token is None else self.identity[p.id_token])
        if p.is_negative_style:
            c = c + self.style
        return c

    def encode_batch(self, prompts: Iterable[PromptCondition | None]) -> torch.Tensor:
        return torch.stack([self(p) for p in prompts])


# ---------------------------------------------------------------------------
# denoiser


def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10_000.0) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64)[:, None] * freqs[None]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


def _target(layer: nn.Linear) -> nn.Linear:
    layer._lora_target = True
    return layer


class ResBlock(nn.Module):
    def __init__(self, ch: int, emb_dim: int):
        super().__init__()
        self.norm1, self.conv1 = _gn(ch), nn.Conv2d(ch, ch, 3, padding=1)
        self.emb = nn.Linear(emb_dim, 2 * ch)
        self.norm2, self.conv2 = _gn(ch), nn.Conv2d(ch, ch, 3, padding=1)

    def forward(self, x: torch.Tensor, emb: torch.Tensor) -> torch.Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        scale, shift = self.emb(F.silu(emb))[:, :, None, None].chunk(2, dim=1)
        h = self.norm2(h) * (1 + scale) + shift
        return x + self.conv2(F.silu(h))


class CondAttention(nn.Module):
    """Self-attention over spatial tokens with the condition appended as one
    extra key/value token (cross-attention to the prompt)."""

    def __init__(self, ch: int, cond_dim: int, heads: int = 4):
        super().__init__()
        self.heads = heads
        self.norm = _gn(ch)
        self.cond_token = _target(nn.Linear(cond_dim, ch))
        self.to_q = _target(nn.Linear(ch, ch))
        self.to_k = _target(nn.Linear(ch, ch))
        self.to_v = _target(nn.Linear(ch, ch))
        self.to_out = _target(nn.Linear(ch, ch))

    def forward(self, x: torch.Tensor, c: torch.Tensor) -> torch.Tensor:
        n, ch, h, w = x.shape
        tok = self.norm(x).flatten(2).transpose(1, 2)
        ctx = torch.cat([tok, self.cond_token(c)[:, None]], dim=1)
        d = ch // self.heads

        def split(t):
            return t.view(n, -1, self.heads, d).transpose(1, 2)

        q, k, v = split(self.to_q(tok)), split(self.to_k(ctx)), split(self.to_v(ctx))
        att = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(d), dim=-1)
        out = (att @ v).transpose(1, 2).reshape(n, h * w, ch)
        return x + self.to_out(out).transpose(1, 2).view(n, ch, h, w)


class Denoiser(nn.Module):
    """Two-level U-Net predicting the added noise from (z_t, t, c)."""

    def __init__(self, c_z: int = 4, ch: int = 48, cond_dim: int = 64, emb_dim: int = 128, T: int = 1000):
        super().__init__()
        self.c_z, self.ch, self.cond_dim, self.emb_dim, self.T = c_z, ch, cond_dim, emb_dim, T
        self.time_mlp = nn.Sequential(nn.Linear(64, emb_dim), nn.SiLU(), nn.Linear(emb_dim, emb_dim))
        self.cond_proj = _target(nn.Linear(cond_dim, emb_dim))
        self.conv_in = nn.Conv2d(c_z, ch, 3, padding=1)
        self.rb1 = ResBlock(ch, emb_dim)
        self.down = nn.Conv2d(ch, 2 * ch, 4, stride=2, padding=1)
        self.rb2 = ResBlock(2 * ch, emb_dim)
        self.attn_mid = CondAttention(2 * ch, cond_dim)
        self.rb3 = ResBlock(2 * ch, emb_dim)
        self.up = nn.ConvTranspose2d(2 * ch, ch, 4, stride=2, padding=1)
        self.merge = nn.Conv2d(2 * ch, ch, 3, padding=1)
        self.rb4 = ResBlock(ch, emb_dim)
        self.attn_up = CondAttention(ch, cond_dim)
        self.rb5 = ResBlock(ch, emb_dim)
        self.norm_out = _gn(ch)
        self.conv_out = nn.Conv2d(ch, c_z, 3, padding=1)

    def config(self) -> dict:
        return {"c_z": self.c_z, "ch": self.ch, "cond_dim": self.cond_dim, "emb_dim": self.emb_dim, "T": self.T}

    def forward(self, zt: torch.Tensor, t, c: torch.Tensor) -> torch.Tensor:
        n = zt.shape[0]
        t = torch.as_tensor(t).reshape(-1)
        if t.numel() == 1 and n > 1:
            t = t.expand(n)
        if int(t.min()) < 0 or int(t.max()) >= self.T:
            raise IndexError(f"timestep outside [0, {self.T})")
        if c.dim() == 1:
            c = c.expand(n, -1)
        emb = self.time_mlp(timestep_embedding(t, 64).to(zt.dtype)) + self.cond_proj(c)
        h1 = self.rb1(self.conv_in(zt), emb)
        h = self.rb2(self.down(h1), emb)
        h = self.rb3(self.attn_mid(h, c), emb)
        h = self.merge(torch.cat([self.up(h), h1], dim=1))
        h = self.rb5(self.attn_up(self.rb4(h, emb), c), emb)
        return self.conv_out(F.silu(self.norm_out(h)))


def predict_noise(net: Denoiser, zt: torch.Tensor, t, c: torch.Tensor) -> torch.Tensor:
    return net(zt, t, c)


# ---------------------------------------------------------------------------
# identity embedder and general feature extractor


class IdentityNet(nn.Module):
    """Face-crop (3, 24, 24) -> unit-norm identity embedding."""

    def __init__(self, dim: int = 64, width: int = 32, dropout: float = 0.0):
        super().__init__()
        self.dim, self.width, self.p_drop = dim, width, dropout
        w = width
        self.body = nn.Sequential(
            nn.Conv2d(3, w, 3, padding=1), _gn(w), nn.SiLU(),
            nn.Conv2d(w, 2 * w, 3, stride=2, padding=1), _gn(2 * w), nn.SiLU(),
            nn.Conv2d(2 * w, 2 * w, 3, padding=1), _gn(2 * w), nn.SiLU(),
            nn.Conv2d(2 * w, 3 * w, 3, stride=2, padding=1), _gn(3 * w), nn.SiLU(),
            nn.Conv2d(3 * w, 3 * w, 3, padding=1), _gn(3 * w), nn.SiLU(),
        )
        self.head = nn.Linear(3 * w * (CROP_SIZE // 4) ** 2, dim)
        self.dropout = nn.Dropout(dropout)
        # separability statistics measured at pretraining time
        self.register_buffer("val_stats", torch.full((4,), float("nan")))  # genuine mean, imposter mean, eer, threshold

    def config(self) -> dict:
        return {"dim": self.dim, "width": self.width, "dropout": self.p_drop}

    def forward(self, crop: torch.Tensor) -> torch.Tensor:
        if crop.dim() != 4 or crop.shape[-2:] != (CROP_SIZE, CROP_SIZE):
            raise ValueError(f"expected (N, 3, {CROP_SIZE}, {CROP_SIZE}) crops, got {tuple(crop.shape)}")
        h = self.dropout(self.body(crop).flatten(1))
        return F.normalize(self.head(h), dim=-1, eps=1e-12)


class FeatureAutoencoder(nn.Module):
    """General-purpose feature extractor: encoder of a separately trained
    autoencoder, globally average-pooled."""

    def __init__(self, dim: int = 64, width: int = 32):
        super().__init__()
        self.dim, self.width = dim, width
        w = width
        self.enc = nn.Sequential(
            nn.Conv2d(3, w, 3, padding=1), nn.SiLU(),
            nn.Conv2d(w, 2 * w, 4, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(2 * w, 2 * w, 4, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(2 * w, dim, 4, stride=2, padding=1),
        )
        self.dec = nn.Sequential(
            nn.SiLU(), nn.ConvTranspose2d(dim, 2 * w, 4, stride=2, padding=1), nn.SiLU(),
            nn.ConvTranspose2d(2 * w, 2 * w, 4, stride=2, padding=1), nn.SiLU(),
            nn.ConvTranspose2d(2 * w, w, 4, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(w, 3, 3, padding=1),
        )

    def config(self) -> dict:
        return {"dim": self.dim, "width": self.width}

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return torch.tanh(self.dec(self.enc(x)))

    def features(self, x: torch.Tensor) -> torch.Tensor:
        return self.enc(x).mean(dim=(-2, -1))


# ---------------------------------------------------------------------------
# checkpoints

ARCHITECTURES = {
    "Autoencoder": Autoencoder,
    "Denoiser": Denoiser,
    "ConditionEncoder": ConditionEncoder,
    "IdentityNet": IdentityNet,
    "FeatureAutoencoder": FeatureAutoencoder,
}


def _blob_name(name: str) -> str:
    return name.replace("/", "_") + ".f32"


def save_tensors(tensors: dict[str, torch.Tensor], directory: str | os.PathLike, manifest_extra: dict | None = None) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    entries = {}
    for name in sorted(tensors):
        arr = tensors[name].detach().to(torch.float32).contiguous().numpy().astype("<f4")
        fname = _blob_name(name)
        (d / fname).write_bytes(arr.tobytes(order="C"))
        entries[name] = {"shape": list(arr.shape), "file": fname}
    manifest = {"format_version": FORMAT_VERSION, "dtype": "f32le", "tensors": entries, **(manifest_extra or {})}
    (d / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return d


def load_tensors(directory: str | os.PathLike) -> tuple[dict[str, torch.Tensor], dict]:
    d = Path(directory)
    manifest_path = d / "manifest.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"no checkpoint manifest at {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format {manifest.get('format_version')}")
    out = {}
    for name, e in manifest["tensors"].items():
        arr = np.frombuffer((d / e["file"]).read_bytes(), dtype="<f4").reshape(e["shape"])
        out[name] = torch.from_numpy(arr.astype(np.float32))
    return out, manifest


def save_module(module: nn.Module, directory: str | os.PathLike, **extra) -> Path:
    arch = {"class": type(module).__name__, "config": module.config()}
    if isinstance(module, ConditionEncoder):
        arch["identity_tokens"] = sorted(module.identity.keys())
    return save_tensors(module.state_dict(), directory, {"architecture": arch, **extra})


def load_module(directory: str | os.PathLike) -> nn.Module:
    tensors, manifest = load_tensors(directory)
    arch = manifest["architecture"]
    module = ARCHITECTURES[arch["class"]](**arch["config"])
    if isinstance(module, ConditionEncoder):
        for tok in arch.get("identity_tokens", []):
            module.add_identity_token(tok)
    module.load_state_dict(tensors)
    module.eval()
    return module


def tensor_digest(tensors: dict[str, torch.Tensor]) -> str:
    h = hashlib.sha256()
    for name in sorted(tensors):
        h.update(name.encode())
        h.update(tensors[name].detach().to(torch.float32).contiguous().numpy().tobytes())
    return h.hexdigest()


def module_digest(module: nn.Module) -> str:
    return tensor_digest(dict(module.state_dict()))


def count_parameters(module: nn.Module, trainable_only: bool = False) -> int:
    return sum(p.numel() for p in module.parameters() if p.requires_grad or not trainable_only)
