"""Procedural identity-image world.

Faces are drawn with fixed-point integer rasterization on a 48x48 grid, so a
render is a pure function of (identity, spec, seed). All faces are aligned:
the face glyph always lives inside the canonical :data:`FACE_BOX`, and only
pixels outside that box ever show the background.
"""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image

IMAGE_SIZE = 48
CROP_SIZE = 24
THETA_DIM = 12

BACKGROUNDS = (
    "forest", "city street", "bus", "office", "factory",
    "beach", "laboratory", "construction site", "hospital", "night club",
)
POSES = ("portrait", "side_portrait")
GENDERS = ("female", "male")
STYLES = ("photo", "cartoon")

# Identity seed ranges. Every population draws from its own range so the
# recognition stand-in never sees an experiment or benchmark subject.
SEED_RANGES = {
    "experiment": (0, 1_000_000),
    "phi_train": (1_000_000, 2_000_000),
    "wild": (2_000_000, 3_000_000),
    "benchmark": (3_000_000, 4_000_000),
    "phi_val": (4_000_000, 5_000_000),
}

FP = 16  # fixed-point sub-pixel units


@dataclass(frozen=True)
class FaceBox:
    x0: int
    y0: int
    x1: int
    y1: int

    def as_list(self) -> list[int]:
        return [self.x0, self.y0, self.x1, self.y1]

    @property
    def width(self) -> int:
        return self.x1 - self.x0

    @property
    def height(self) -> int:
        return self.y1 - self.y0


FACE_BOX = FaceBox(12, 12, 12 + CROP_SIZE, 12 + CROP_SIZE)


@dataclass(frozen=True)
class ProceduralIdentity:
    id_label: str
    theta: tuple[float, ...]
    seed: int

    @property
    def gender(self) -> str:
        return "male" if self.theta[0] >= 0.5 else "female"


@dataclass(frozen=True)
class RenderSpec:
    pose: str = "portrait"
    background: int = 0
    lighting_jitter: float = 0.0
    noise_sigma: float = 0.0
    yaw: float | None = None  # None: drawn from the pose class
    style: str = "photo"

    def __post_init__(self) -> None:
        if self.pose not in POSES:
            raise ValueError(f"unknown pose {self.pose!r}")
        if not 0 <= self.background < len(BACKGROUNDS):
            raise ValueError(f"background index {self.background} outside [0, {len(BACKGROUNDS)})")
        if self.style not in STYLES:
            raise ValueError(f"unknown style {self.style!r}")


def population_of(seed: int) -> str:
    for name, (lo, hi) in SEED_RANGES.items():
        if lo <= seed < hi:
            return name
    raise ValueError(f"identity seed {seed} outside every population range")


def identity_seeds(population: str, n: int, offset: int = 0) -> list[int]:
    lo, hi = SEED_RANGES[population]
    if lo + offset + n > hi:
        raise ValueError(f"population {population!r} cannot supply {n} seeds at offset {offset}")
    return list(range(lo + offset, lo + offset + n))


def make_identity(seed: int) -> ProceduralIdentity:
    if seed < 0:
        raise ValueError("identity seeds are non-negative")
    rng = np.random.default_rng([seed, 0x1D])
    theta = np.clip(rng.random(THETA_DIM), 0.0, 1.0)
    return ProceduralIdentity(f"id{seed:07d}", tuple(float(v) for v in theta), int(seed))


# ---------------------------------------------------------------------------
# rasterization helpers (all integer arithmetic on the FP grid)

_PIX = np.arange(IMAGE_SIZE, dtype=np.int64) * FP + FP // 2
_GX, _GY = np.meshgrid(_PIX, _PIX)  # (y, x) indexing
_IX, _IY = np.meshgrid(np.arange(IMAGE_SIZE, dtype=np.int64), np.arange(IMAGE_SIZE, dtype=np.int64))


def _q(v: float) -> int:
    return int(round(v * FP))


def _ellipse(cx: int, cy: int, rx: int, ry: int, shear: int = 0) -> np.ndarray:
    """Pixels inside an axis ellipse; ``shear`` is x-shift per unit y in 1/256."""
    rx, ry = max(rx, 1), max(ry, 1)
    dy = _GY - cy
    dx = _GX - cx - ((shear * dy) >> 8)
    return dx * dx * (ry * ry) + dy * dy * (rx * rx) <= (rx * rx) * (ry * ry)


def _rect(x0: int, y0: int, x1: int, y1: int) -> np.ndarray:
    return (_GX >= x0) & (_GX < x1) & (_GY >= y0) & (_GY < y1)


def _bar(cx: int, cy: int, half_len: int, slope: int, thick: int) -> np.ndarray:
    """Thin segment through (cx, cy) with slope in 1/256."""
    dx = _GX - cx
    dy = _GY - cy
    return (np.abs(dx) <= half_len) & (np.abs(dy - ((slope * dx) >> 8)) <= thick)


def _arc(cx: int, cy: int, half_w: int, curv: int, thick: int) -> np.ndarray:
    """Parabolic arc dy = curv * dx^2, curv in 1/(256*FP)."""
    dx = _GX - cx
    dy = _GY - cy
    return (np.abs(dx) <= half_w) & (np.abs(dy - ((curv * dx * dx) >> 12)) <= thick)


def _mix(c0: Sequence[int], c1: Sequence[int], w: float) -> np.ndarray:
    wq = int(round(w * 256))
    a = np.asarray(c0, dtype=np.int64)
    b = np.asarray(c1, dtype=np.int64)
    return (a * (256 - wq) + b * wq) >> 8


_HAIR_PALETTE = [(20, 18, 18), (70, 40, 20), (150, 95, 45), (215, 180, 110), (170, 60, 25), (160, 160, 165)]


def _palette(pal: Sequence[Sequence[int]], w: float) -> np.ndarray:
    pos = w * (len(pal) - 1)
    i = min(int(pos), len(pal) - 2)
    return _mix(pal[i], pal[i + 1], pos - i)


def _background(canvas: np.ndarray, cls: int, phase: int) -> None:
    X, Y, p = _IX, _IY, phase

    def fill(mask, color):
        canvas[mask] = color

    full = np.ones_like(X, dtype=bool)
    if cls == 0:  # forest
        fill(full, (34, 90, 40))
        fill((X + p) % 8 < 3, (80, 55, 30))
        fill((Y < 14) & ((X + Y + p) % 5 != 0), (20, 120, 45))
    elif cls == 1:  # city street
        fill(full, (150, 160, 175))
        fill((Y >= 10) & (((X + p) // 7) % 2 == 0), (90, 90, 100))
        fill((Y >= 10) & (((X + p) // 7) % 2 == 1), (125, 115, 110))
        fill(Y >= 40, (60, 60, 65))
        fill((Y == 44) & ((X + p) % 6 < 3), (230, 230, 230))
    elif cls == 2:  # bus
        fill(full, (210, 180, 40))
        fill(((X + p) % 12 < 8) & (Y % 16 < 9), (140, 190, 220))
    elif cls == 3:  # office
        fill(full, (200, 190, 170))
        fill(((X + p) % 10 == 0) | (Y % 10 == 0), (150, 140, 125))
    elif cls == 4:  # factory
        fill(full, (70, 80, 95))
        fill((X + Y + p) % 10 < 3, (115, 115, 115))
    elif cls == 5:  # beach
        fill(full, (120, 180, 230))
        fill(Y >= 20 - p % 4, (40, 110, 170))
        fill(Y >= 28 - p % 4, (225, 205, 150))
    elif cls == 6:  # laboratory
        fill(full, (230, 240, 240))
        fill((Y + p) % 6 == 0, (180, 210, 215))
    elif cls == 7:  # construction site
        fill(full, (235, 140, 30))
        fill((X - Y + p) % 8 < 4, (30, 30, 30))
    elif cls == 8:  # hospital
        fill(full, (200, 230, 215))
        u, v = (X + p) % 16, Y % 16
        fill(((u >= 6) & (u <= 9) & (v >= 2) & (v <= 13)) | ((v >= 6) & (v <= 9) & (u >= 2) & (u <= 13)),
             (220, 60, 60))
    elif cls == 9:  # night club
        fill(full, (40, 15, 60))
        fill((X * 3 + Y * 5 + p) % 11 == 0, (255, 50, 180))
        fill((X * 7 + Y * 2 + p) % 13 == 0, (50, 200, 255))
    else:
        raise ValueError(cls)


BACKDROP = (128, 128, 128)
CLOTHING = (55, 65, 90)


def _draw_face(canvas: np.ndarray, ident: ProceduralIdentity, yaw: float) -> tuple[np.ndarray, np.ndarray]:
    """Paint the head onto ``canvas``; returns (face mask, head-outline mask)."""
    th = ident.theta
    male = ident.gender == "male"
    cx, cy = 24.0, 24.5
    shift = 3.0 * yaw
    shear = int(round(0.25 * yaw * 256))
    face_rx = (7.5 + 2.5 * th[1] + (0.5 if male else 0.0)) * (1.0 - 0.15 * abs(yaw))
    face_ry = 9.0 + 2.0 * th[2]
    skin = _mix((235, 200, 170), (105, 68, 48), th[9])
    hair = _palette(_HAIR_PALETTE, th[10])
    style = th[11]

    # shoulders and neck
    canvas[_ellipse(_q(24), _q(53), _q(19), _q(13))] = CLOTHING
    canvas[_rect(_q(cx - 3 + shift * 0.3), _q(30), _q(cx + 3 + shift * 0.3), _q(41))] = (skin * 9) // 10

    # hair behind the head
    if not male:
        long_len = 37 + 6 * style
        side = _rect(_q(cx - face_rx - 2.5), _q(cy - 2), _q(cx + face_rx + 2.5), _q(long_len))
        canvas[side] = hair
    cap_ry = face_ry + 1.0 + (1.5 * style if not male else 0.6 * style)
    cap = _ellipse(_q(cx + shift * 0.2), _q(cy - 1.5), _q(face_rx + 1.6), _q(cap_ry), shear)
    canvas[cap] = hair

    face = _ellipse(_q(cx + shift * 0.2), _q(cy), _q(face_rx), _q(face_ry), shear)
    canvas[face] = skin
    outline = _ellipse(_q(cx + shift * 0.2), _q(cy), _q(face_rx + 1.0), _q(face_ry + 1.0), shear) & ~face

    # fringe
    fringe_y = cy - face_ry + 1.5 + 2.5 * style
    canvas[face & (_GY < _q(fringe_y))] = hair

    # eyes: the far eye shrinks as the head turns
    eye_y = cy - 1.5
    half = 3.0 + 2.0 * th[3]
    erx = 1.2 + 0.9 * th[4]
    ery = 0.8 + 0.6 * th[4]
    far = max(0.0, abs(yaw) - 0.3) / 0.5
    far_scale = max(0.0, 1.0 - 0.85 * far)
    iris = _mix((40, 30, 20), (60, 110, 160), th[4] * th[3])
    for sgn in (-1.0, 1.0):
        ex = cx + shift + sgn * half * (1.0 - 0.2 * abs(yaw))
        scale = far_scale if sgn * yaw < 0 else 1.0
        if scale <= 0.05:
            continue
        canvas[_ellipse(_q(ex), _q(eye_y), _q((erx + 0.7) * scale), _q(ery + 0.4)) & face] = (240, 240, 235)
        canvas[_ellipse(_q(ex), _q(eye_y), _q(erx * scale), _q(ery)) & face] = iris
        brow_slope = int(round((th[5] - 0.5) * 0.9 * 256)) * (-1 if sgn < 0 else 1)
        canvas[_bar(_q(ex), _q(eye_y - 2.6), _q(2.2 * scale), brow_slope, _q(0.55)) & face] = (hair * 3) // 4

    # nose
    nose_len = 2.5 + 3.0 * th[6]
    nx = cx + shift * 1.4
    canvas[_rect(_q(nx - 0.5), _q(eye_y + 1.0), _q(nx + 0.6), _q(eye_y + 1.0 + nose_len)) & face] = (skin * 3) // 4

    # mouth
    mouth_y = min(cy + 5.5, cy + face_ry - 2.0)
    mhw = 2.0 + 2.5 * th[7]
    curv = int(round((0.5 - th[8]) * 0.15 * 256))
    lips = (170, 60, 70) if not male else (150, 70, 70)
    canvas[_arc(_q(cx + shift * 1.1), _q(mouth_y), _q(mhw), curv, _q(0.6)) & face] = lips
    return face, outline


def render(ident: ProceduralIdentity, spec: RenderSpec, seed: int) -> tuple[np.ndarray, FaceBox]:
    """Render one 48x48 RGB uint8 image (HWC) and its face box."""
    rng = np.random.default_rng([ident.seed, int(seed), 0xFACE])
    if spec.yaw is not None:
        yaw = float(spec.yaw)
    elif spec.pose == "portrait":
        yaw = rng.uniform(-0.15, 0.15)
    else:
        yaw = (1.0 if rng.random() < 0.5 else -1.0) * rng.uniform(0.55, 0.8)
    phase = int(rng.integers(0, 16))
    light = rng.uniform(-1.0, 1.0, size=2)

    canvas = np.zeros((IMAGE_SIZE, IMAGE_SIZE, 3), dtype=np.int64)
    _background(canvas, spec.background, phase)
    box = FACE_BOX
    canvas[box.y0:box.y1, box.x0:box.x1] = BACKDROP
    face, outline = _draw_face(canvas, ident, yaw)

    if spec.style == "cartoon":
        canvas = (canvas // 64) * 64 + 32
        canvas[outline] = (10, 10, 10)
        canvas = np.clip(canvas, 0, 255)
    else:
        # global brightness plus a horizontal gradient, fixed point 1/256
        gain = 256 + int(round(spec.lighting_jitter * light[0] * 256))
        grad = int(round(spec.lighting_jitter * light[1] * 256))
        lx = gain + (grad * (_IX - IMAGE_SIZE // 2)) // (IMAGE_SIZE // 2)
        canvas = (canvas * lx[..., None]) >> 8
        if spec.noise_sigma > 0:
            noise = np.rint(rng.normal(0.0, spec.noise_sigma * 255.0, size=canvas.shape)).astype(np.int64)
            canvas = canvas + noise
        canvas = np.clip(canvas, 0, 255)
    return canvas.astype(np.uint8), box


def locate_face(x, fail_rate: float = 0.0, seed: int = 0) -> FaceBox | None:
    """Detector stub: the aligned ground-truth box, or None on injected failure."""
    if not 0.0 <= fail_rate < 1.0:
        raise ValueError(f"fail_rate must lie in [0, 1), got {fail_rate}")
    if fail_rate == 0.0:
        return FACE_BOX
    u = np.random.default_rng([int(seed), 0xDE7]).random()
    return None if u < fail_rate else FACE_BOX


def crop_face(x, box: FaceBox = FACE_BOX):
    """Crop CHW (or NCHW) tensors/arrays to the face box."""
    return x[..., box.y0:box.y1, box.x0:box.x1]


# ---------------------------------------------------------------------------
# datasets


@dataclass
class ImageDataset:
    """uint8 images (N, H, W, 3) plus one metadata record per image."""

    images: np.ndarray
    records: list[dict] = field(default_factory=list)

    def __post_init__(self) -> None:
        if self.images.dtype != np.uint8 or self.images.ndim != 4:
            raise ValueError("images must be a uint8 array of shape (N, H, W, 3)")
        if len(self.records) != len(self.images):
            raise ValueError("one record per image required")

    def __len__(self) -> int:
        return len(self.images)

    @property
    def labels(self) -> list[str]:
        return [r["id_label"] for r in self.records]

    def subset(self, idx: Iterable[int]) -> "ImageDataset":
        idx = list(idx)
        return ImageDataset(self.images[idx], [self.records[i] for i in idx])

    def for_identity(self, id_label: str) -> "ImageDataset":
        return self.subset(i for i, r in enumerate(self.records) if r["id_label"] == id_label)

    def as_float(self) -> np.ndarray:
        """NCHW float32 in [-1, 1]."""
        return to_float(self.images)

    def save(self, directory: str | os.PathLike) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        index = []
        for i, (img, rec) in enumerate(zip(self.images, self.records)):
            name = f"{i:06d}.png"
            Image.fromarray(img, mode="RGB").save(d / name, optimize=False, compress_level=6)
            index.append({"file": name, **rec})
        (d / "index.json").write_text(json.dumps(index, indent=1, sort_keys=True))

    @classmethod
    def load(cls, directory: str | os.PathLike) -> "ImageDataset":
        d = Path(directory)
        index = json.loads((d / "index.json").read_text())
        images = np.stack([np.asarray(Image.open(d / row["file"]).convert("RGB")) for row in index])
        records = [{k: v for k, v in row.items() if k != "file"} for row in index]
        return cls(images.astype(np.uint8), records)

    @classmethod
    def concat(cls, parts: Sequence["ImageDataset"]) -> "ImageDataset":
        return cls(np.concatenate([p.images for p in parts]), [r for p in parts for r in p.records])


def to_float(images: np.ndarray) -> np.ndarray:
    return (images.astype(np.float32).transpose(0, 3, 1, 2) / 127.5) - 1.0


def to_uint8(x: np.ndarray) -> np.ndarray:
    """NCHW floats in [-1, 1] to NHWC uint8."""
    x = np.clip(np.asarray(x, dtype=np.float32), -1.0, 1.0)
    return np.rint((x + 1.0) * 127.5).astype(np.uint8).transpose(0, 2, 3, 1)


def _record(ident: ProceduralIdentity, spec: RenderSpec, seed: int, box: FaceBox, **extra) -> dict:
    return {
        "id_label": ident.id_label,
        "identity_seed": ident.seed,
        "pose": spec.pose,
        "background": spec.background,
        "gender": ident.gender,
        "face_box": box.as_list(),
        "seed": int(seed),
        "style": spec.style,
        "lighting_jitter": spec.lighting_jitter,
        "noise_sigma": spec.noise_sigma,
        **extra,
    }


def render_many(items: Sequence[tuple[ProceduralIdentity, RenderSpec, int]]) -> ImageDataset:
    images, records = [], []
    for ident, spec, seed in items:
        img, box = render(ident, spec, seed)
        images.append(img)
        records.append(_record(ident, spec, seed, box, yaw=spec.yaw))
    return ImageDataset(np.stack(images), records)


def constrained_yaws(n_per_id: int, arc: float = 0.8) -> np.ndarray:
    if n_per_id == 1:
        return np.zeros(1)
    return np.linspace(-arc, arc, n_per_id)


def build_constrained_dataset(ids: Sequence[ProceduralIdentity], n_per_id: int = 21) -> ImageDataset:
    """Lab-style set: one background, low jitter, yaw swept along a fixed arc."""
    if not ids:
        raise ValueError("empty identity list")
    if n_per_id < 1:
        raise ValueError("n_per_id must be >= 1")
    items = []
    for ident in ids:
        for k, yaw in enumerate(constrained_yaws(n_per_id)):
            pose = "portrait" if abs(yaw) < 0.4 else "side_portrait"
            spec = RenderSpec(pose=pose, background=0, lighting_jitter=0.03, noise_sigma=0.01, yaw=float(yaw))
            items.append((ident, spec, k))
    return render_many(items)


def random_spec(rng: np.random.Generator, cartoon_prob: float = 0.0) -> RenderSpec:
    """In-the-wild nuisance draw: uniform pose and background, random jitter."""
    return RenderSpec(
        pose=POSES[int(rng.integers(0, len(POSES)))],
        background=int(rng.integers(0, len(BACKGROUNDS))),
        lighting_jitter=float(rng.uniform(0.05, 0.3)),
        noise_sigma=float(rng.uniform(0.0, 0.03)),
        style="cartoon" if rng.random() < cartoon_prob else "photo",
    )


def build_wild_reference(n: int = 10_000, seed: int = 0, offset: int = 0, cartoon_prob: float = 0.0) -> ImageDataset:
    """``n`` renders of fresh wild-population identities, one render each."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng([seed, 0x3F])
    items = []
    for s in identity_seeds("wild", n, offset):
        spec = random_spec(rng, cartoon_prob)
        items.append((make_identity(s), spec, int(rng.integers(0, 2**31))))
    return render_many(items)


def build_population(population: str, n_ids: int, per_id: int, seed: int = 0, offset: int = 0) -> ImageDataset:
    """Labeled multi-render population with wild nuisances (recognizer training, benchmarks)."""
    rng = np.random.default_rng([seed, 0x70])
    items = []
    for s in identity_seeds(population, n_ids, offset):
        ident = make_identity(s)
        for _ in range(per_id):
            items.append((ident, random_spec(rng), int(rng.integers(0, 2**31))))
    return render_many(items)
