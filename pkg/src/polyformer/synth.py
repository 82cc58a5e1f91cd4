"""Synthetic two-domain disc/cup segmentation benchmark.

Images show a textured background with a bright elliptical "disc" and a
brighter concentric "cup". Geometry comes from one random stream, appearance
(colour shift, contrast, tint, noise) from another, so domains share the label
distribution and differ only in how the pixels look.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .engine.rng import rng_for
from .engine.tensor import ContractError
from .errors import FormatError

BACKGROUND, DISC, CUP = 0, 1, 2
CLASS_NAMES = ("background", "disc", "cup")

_BASE_COLOURS = {
    BACKGROUND: (0.45, 0.25, 0.15),
    DISC: (0.75, 0.55, 0.35),
    CUP: (0.95, 0.85, 0.70),
}


@dataclass(frozen=True)
class DomainSpec:
    name: str = "source"
    brightness_shift: float = 0.0
    contrast_scale: float = 1.0
    channel_tint: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    noise_std: float = 0.0
    texture_freq: float = 3.0
    seed_base: int = 1
    size: int = 64

    def __post_init__(self):
        if not -0.5 <= self.brightness_shift <= 0.5:
            raise ValueError(f"brightness_shift {self.brightness_shift} outside [-0.5, 0.5]")
        if not 0.5 <= self.contrast_scale <= 2.0:
            raise ValueError(f"contrast_scale {self.contrast_scale} outside [0.5, 2]")
        if self.noise_std < 0:
            raise ValueError("noise_std must be non-negative")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channel_tint"] = list(self.channel_tint)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DomainSpec":
        d = dict(d)
        if "channel_tint" in d:
            d["channel_tint"] = tuple(d["channel_tint"])
        return cls(**d)


def default_source_spec() -> DomainSpec:
    return DomainSpec(name="source", seed_base=1)


def default_target_spec() -> DomainSpec:
    return DomainSpec(name="target", brightness_shift=-0.25, contrast_scale=0.8,
                      channel_tint=(0.1, 0.0, 0.0), noise_std=0.03, seed_base=2)


@dataclass
class Sample:
    image: np.ndarray  # 3 x H x W float32 in [0, 1]
    mask: np.ndarray  # H x W uint8 class ids
    domain: str
    id: str


def _geometry(seed_base: int, index: int, size: int) -> np.ndarray:
    rng = rng_for(seed_base, "geometry", index)
    cy, cx = rng.uniform(0.35, 0.65, size=2) * size
    ry, rx = rng.uniform(0.16, 0.26, size=2) * size
    theta = rng.uniform(0, np.pi)
    cup_ratio = rng.uniform(0.4, 0.6)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    u = dx * np.cos(theta) + dy * np.sin(theta)
    v = -dx * np.sin(theta) + dy * np.cos(theta)
    r = (u / rx) ** 2 + (v / ry) ** 2
    mask = np.zeros((size, size), dtype=np.uint8)
    mask[r <= 1.0] = DISC
    mask[r <= cup_ratio ** 2] = CUP
    # a tiny ellipse can be quantised away; force the centre pixels in
    iy, ix = int(round(cy)), int(round(cx))
    if not (mask == CUP).any():
        mask[iy, ix] = CUP
    if not (mask == DISC).any():
        mask[iy, ix + 1] = DISC
    return mask


def _texture(rng: np.random.Generator, size: int, freq: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / size
    tex = np.zeros((size, size))
    for _ in range(3):
        fy, fx = rng.uniform(0.5, 1.5, size=2) * freq
        phase = rng.uniform(0, 2 * np.pi)
        tex += np.sin(2 * np.pi * (fy * yy + fx * xx) + phase)
    return tex / 3.0


def generate_sample(spec: DomainSpec, index: int) -> Sample:
    """Pure function of (spec, index)."""
    size = spec.size
    mask = _geometry(spec.seed_base, index, size)
    rng = rng_for(spec.seed_base, "appearance", index)
    img = np.empty((3, size, size))
    for cls, colour in _BASE_COLOURS.items():
        for c in range(3):
            img[c][mask == cls] = colour[c]
    tex = _texture(rng, size, spec.texture_freq)
    img += 0.06 * tex[None] * (mask == BACKGROUND)[None]
    img = (img - 0.5) * spec.contrast_scale + 0.5 + spec.brightness_shift
    img += np.asarray(spec.channel_tint, dtype=np.float64)[:, None, None]
    if spec.noise_std > 0:
        img += rng.standard_normal(img.shape) * spec.noise_std
    img = np.clip(img, 0.0, 1.0).astype(np.float32)
    return Sample(image=img, mask=mask, domain=spec.name, id=f"{spec.name}_{index:04d}")


def generate_dataset(spec: DomainSpec, count: int) -> List[Sample]:
    return [generate_sample(spec, i) for i in range(count)]


def few_shot_split(dataset: Sequence, k: int, seed: int) -> Tuple[list, list]:
    """k samples drawn uniformly without replacement, the rest for evaluation."""
    n = len(dataset)
    if not 1 <= k < n:
        raise ContractError(f"few_shot_split: need 1 <= k < {n}, got k={k}")
    perm = rng_for(seed, "few_shot_split", n).permutation(n)
    chosen = sorted(int(i) for i in perm[:k])
    chosen_set = set(chosen)
    return [dataset[i] for i in chosen], [dataset[i] for i in range(n) if i not in chosen_set]


def stack(samples: Sequence[Sample]) -> Tuple[np.ndarray, np.ndarray]:
    return (np.stack([s.image for s in samples]).astype(np.float32),
            np.stack([s.mask for s in samples]).astype(np.int64))


# PPM / PGM ---------------------------------------------------------------------

def _write_pnm(path, magic: bytes, arr: np.ndarray) -> None:
    h, w = arr.shape[:2]
    with open(path, "wb") as fh:
        fh.write(magic + b"\n%d %d\n255\n" % (w, h))
        fh.write(np.ascontiguousarray(arr, dtype=np.uint8).tobytes())


def _read_pnm(path, magic: bytes, channels: int) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:2] != magic:
        raise FormatError(f"{path}: expected magic {magic!r}, found {raw[:2]!r}", 0)
    pos = 2
    fields = []
    while len(fields) < 3:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and raw[pos:pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise FormatError(f"{path}: malformed header", start)
        fields.append(int(raw[start:pos]))
    if pos >= len(raw) or not raw[pos:pos + 1].isspace():
        raise FormatError(f"{path}: malformed header", pos)
    pos += 1
    w, h, maxval = fields
    if maxval != 255:
        raise FormatError(f"{path}: unsupported maxval {maxval}", pos)
    need = w * h * channels
    if len(raw) - pos < need:
        raise FormatError(f"{path}: truncated pixel data, expected {need} bytes", len(raw))
    data = np.frombuffer(raw, dtype=np.uint8, count=need, offset=pos)
    return data.reshape(h, w, channels) if channels > 1 else data.reshape(h, w)


def save_sample(sample: Sample, directory, stem: Optional[str] = None) -> Tuple[str, str]:
    """Write ``<stem>.ppm`` (image) and ``<stem>.pgm`` (mask); returns both paths."""
    os.makedirs(directory, exist_ok=True)
    stem = stem or sample.id
    img_path = os.path.join(directory, stem + ".ppm")
    mask_path = os.path.join(directory, stem + ".pgm")
    pixels = np.rint(np.clip(sample.image, 0, 1) * 255).astype(np.uint8).transpose(1, 2, 0)
    _write_pnm(img_path, b"P6", pixels)
    _write_pnm(mask_path, b"P5", sample.mask.astype(np.uint8))
    return img_path, mask_path


def load_sample(img_path, mask_path, domain: str = "", sample_id: str = "") -> Sample:
    pixels = _read_pnm(img_path, b"P6", 3)
    mask = _read_pnm(mask_path, b"P5", 1)
    if pixels.shape[:2] != mask.shape:
        raise FormatError(f"image {pixels.shape[:2]} and mask {mask.shape} sizes differ")
    image = (pixels.transpose(2, 0, 1).astype(np.float32) / np.float32(255))
    return Sample(image=np.ascontiguousarray(image), mask=mask.copy(), domain=domain,
                  id=sample_id or Path(img_path).stem)


def write_dataset(samples: Sequence[Sample], directory, spec: Optional[DomainSpec] = None) -> str:
    """Save samples and a ``manifest.json`` listing ids, paths and domains."""
    os.makedirs(directory, exist_ok=True)
    entries = []
    for s in samples:
        img, mask = save_sample(s, directory)
        entries.append({"id": s.id, "image": os.path.basename(img), "mask": os.path.basename(mask),
                        "domain": s.domain})
    manifest = {"samples": entries}
    if spec is not None:
        manifest["spec"] = spec.to_dict()
    path = os.path.join(directory, "manifest.json")
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
    return path


def read_manifest(path) -> List[Sample]:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    with open(path) as fh:
        manifest = json.load(fh)
    root = path.parent
    return [load_sample(root / e["image"], root / e["mask"], e.get("domain", ""), e["id"])
            for e in manifest["samples"]]


def mean_intensity_probe(source: Sequence[Sample], target: Sequence[Sample]) -> float:
    """Accuracy of the best single threshold on mean image intensity at telling domains apart."""
    vals = np.array([s.image.mean() for s in source] + [s.image.mean() for s in target])
    labels = np.array([0] * len(source) + [1] * len(target))
    best = 0.0
    for thr in np.unique(vals):
        pred = (vals <= thr).astype(int)
        best = max(best, (pred == labels).mean(), (pred != labels).mean())
    return float(best)
