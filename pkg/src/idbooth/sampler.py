"""Prompt construction and classifier-free-guided synthesis of identity datasets."""
from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch

from .config import PROMPT_PRESETS, SamplerConfig
from .facesim import BACKGROUNDS, FACE_BOX, GENDERS, IMAGE_SIZE, POSES, ImageDataset, to_uint8
from .nets import ConditionEncoder, Denoiser, PromptCondition
from .scheduler import TERMINAL, reverse_step, select_inference_timesteps

NEGATIVE_STYLE = PromptCondition(is_negative_style=True)
LATENT_SIZE = IMAGE_SIZE // 4

# cumulative prompt components, one preset per ablation row
_PRESET_SLOTS = {
    "base": (),
    "background": ("background",),
    "negative": ("background", "negative"),
    "gender": ("background", "negative", "gender"),
    "full": ("background", "negative", "gender", "pose"),
}


def build_prompt(id_token: str | None, gender: str | None, rng: np.random.Generator,
                 preset: str = "full") -> tuple[PromptCondition, bool]:
    """Draw a generation prompt and report whether the negative style is on.

    Background and pose are drawn uniformly. The rng is advanced the same way
    for every preset so prompts stay aligned across ablation rows.
    """
    if preset not in PROMPT_PRESETS:
        raise ValueError(f"unknown prompt preset {preset!r}")
    if gender is not None and gender not in GENDERS:
        raise KeyError(f"unknown gender token {gender!r}")
    slots = _PRESET_SLOTS[preset]
    background = int(rng.integers(0, len(BACKGROUNDS)))
    pose = POSES[int(rng.integers(0, len(POSES)))]
    prompt = PromptCondition(
        id_token=id_token,
        gender=gender if "gender" in slots else None,
        background=background if "background" in slots else None,
        pose=pose if "pose" in slots else None,
    )
    return prompt, "negative" in slots


def negative_condition(conditioner: ConditionEncoder, use_negative: bool) -> torch.Tensor:
    """c_neg: the learned non-photo style vector, or the null condition."""
    return conditioner(NEGATIVE_STYLE if use_negative else None)


def initial_noise(seed: int, shape: Sequence[int]) -> torch.Tensor:
    rng = np.random.default_rng([int(seed), 0x5A])
    return torch.from_numpy(rng.standard_normal(tuple(shape)).astype(np.float32))


@torch.no_grad()
def sample_latents(denoiser: Denoiser, schedule, c_pos: torch.Tensor, c_neg: torch.Tensor, guidance: float,
                   steps: int, seeds: Sequence[int], eta: float = 0.0) -> torch.Tensor:
    """Guided DDIM sampling; one initial-noise draw per seed.

    eps = eps(c_neg) + g * (eps(c_pos) - eps(c_neg)). Guidance 1 and 0 skip the
    unused branch so they match pure conditional (resp. negative) sampling
    bitwise.
    """
    if guidance < 0:
        raise ValueError("guidance must be >= 0")
    ts = select_inference_timesteps(schedule.T, steps)
    n = len(seeds)
    shape = (denoiser.c_z, LATENT_SIZE, LATENT_SIZE)
    z = torch.stack([initial_noise(s, shape) for s in seeds])
    c_pos, c_neg = c_pos.expand(n, -1), c_neg.expand(n, -1)
    gen = [np.random.default_rng([int(s), 0x5B]) for s in seeds]
    for i, t in enumerate(ts):
        t = int(t)
        if guidance == 1.0:
            eps = denoiser(z, t, c_pos)
        elif guidance == 0.0:
            eps = denoiser(z, t, c_neg)
        else:
            both = denoiser(torch.cat([z, z]), t, torch.cat([c_pos, c_neg]))
            e_pos, e_neg = both[:n], both[n:]
            eps = e_neg + guidance * (e_pos - e_neg)
        t_prev = int(ts[i + 1]) if i + 1 < len(ts) else TERMINAL
        noise = None
        if eta > 0 and t_prev != TERMINAL:
            noise = torch.stack([torch.from_numpy(g.standard_normal(shape).astype(np.float32)) for g in gen])
        z = reverse_step(z, t, t_prev, eps, schedule, eta, noise)
    return z


def sample_cfg(bundle, c_pos: torch.Tensor, c_neg: torch.Tensor, guidance: float, steps: int,
               seeds: Sequence[int], eta: float = 0.0, denoiser: Denoiser | None = None) -> np.ndarray:
    """Sample and decode; returns NCHW float images in [-1, 1]."""
    den = bundle.denoiser if denoiser is None else denoiser
    z = sample_latents(den, bundle.schedule, c_pos, c_neg, guidance, steps, seeds, eta)
    with torch.no_grad():
        return bundle.autoencoder.decode(z).numpy()


def synthesize_identity(model, id_label: str, gender: str | None, per_id: int, cfg: SamplerConfig,
                        seed: int = 0) -> ImageDataset:
    """``per_id`` images of one fine-tuned identity with fresh prompts and seeds."""
    if per_id < 1:
        raise ValueError("per_id must be >= 1")
    rng = np.random.default_rng([int(seed), 0x5E, *id_label.encode()])
    prompts, seeds = [], []
    for _ in range(per_id):
        prompts.append(build_prompt(model.token, gender, rng, cfg.prompt_preset))
        seeds.append(int(rng.integers(0, 2**31)))
    cond = model.conditioner
    images = []
    with torch.no_grad():
        for i in range(0, per_id, cfg.batch):
            chunk = slice(i, i + cfg.batch)
            c_pos = cond.encode_batch([p for p, _ in prompts[chunk]])
            c_neg = torch.stack([negative_condition(cond, neg) for _, neg in prompts[chunk]])
            images.append(sample_cfg(model.bundle, c_pos, c_neg, cfg.guidance, cfg.steps, seeds[chunk], cfg.eta,
                                     denoiser=model.denoiser))
    records = []
    for (p, neg), s in zip(prompts, seeds):
        records.append({
            "id_label": id_label, "seed": s, "pose": p.pose, "background": p.background, "gender": p.gender,
            "negative_style": neg, "prompt": p.to_dict(), "guidance": cfg.guidance, "steps": cfg.steps,
            "eta": cfg.eta, "face_box": FACE_BOX.as_list(), "style": "photo",
        })
    return ImageDataset(to_uint8(np.concatenate(images)), records)


def regenerate(model, record: dict) -> np.ndarray:
    """Rebuild a single synthesized image from its index row."""
    cond = model.conditioner
    p = PromptCondition.from_dict(record["prompt"])
    c_pos = cond(p)[None]
    c_neg = negative_condition(cond, record["negative_style"])[None]
    x = sample_cfg(model.bundle, c_pos, c_neg, record["guidance"], record["steps"], [record["seed"]],
                   record["eta"], denoiser=model.denoiser)
    return to_uint8(x)[0]


def synthesize_dataset(bundle, checkpoints: Mapping[str, str | Path], genders: Mapping[str, str | None],
                       per_id: int, cfg: SamplerConfig, seed: int = 0) -> ImageDataset:
    """Synthesize ``per_id`` images for each identity checkpoint, in sorted id order."""
    from .finetune import IdentityModel

    parts = []
    for id_label in sorted(checkpoints):
        ckpt = Path(checkpoints[id_label])
        if not (ckpt / "manifest.json").exists():
            raise FileNotFoundError(f"missing checkpoint for {id_label}: {ckpt}")
        model = IdentityModel.load(bundle, ckpt)
        parts.append(synthesize_identity(model, id_label, genders.get(id_label), per_id, cfg, seed))
    return ImageDataset.concat(parts)
