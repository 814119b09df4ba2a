"""Synthetic multi-structure phantoms, label encodings and slice augmentation.

Phantoms are built from C superellipsoid "bones" chained side by side so that
neighbours touch (like the bones of a joint) without overlapping. Every random
draw goes through ``numpy.random.Generator(PCG64(seed))``, so a seed
reproduces the same case on every platform for a given numpy release.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

STRATEGIES = ("individual", "global", "multi")

DEFAULT_EXTENTS = (16, 64, 64)
DEFAULT_SPACING = (0.5, 0.25, 0.25)

VVOL_FORMAT = "VVOL"
VVOL_VERSION = 1


class GenerationError(ValueError):
    pass


class ConfigurationError(ValueError):
    pass


@dataclass
class Case:
    image: np.ndarray  # (D, H, W) float64
    labels: np.ndarray  # (D, H, W) uint8 in 0..C
    spacing_mm: tuple[float, float, float]
    case_id: str
    num_classes: int
    condition_tag: str = "healthy"

    def __post_init__(self):
        if self.image.shape != self.labels.shape:
            raise ValueError(f"image {self.image.shape} and labels {self.labels.shape} differ in extent")
        if self.labels.size and int(self.labels.max()) > self.num_classes:
            raise ValueError("labels exceed the declared class count")
        if any(s <= 0 for s in self.spacing_mm):
            raise ValueError("spacing must be strictly positive")

    @property
    def extents(self) -> tuple[int, int, int]:
        return tuple(self.image.shape)


@dataclass
class LabelEncoding:
    """Binary mask stacks of shape (D, K, H, W).

    individual: K = C, channel c is structure c + 1 (one network per channel)
    global:     K = 1, union of all structures
    multi:      K = C + 1, channel 0 is background, channel c is structure c
    """

    strategy: str
    masks: np.ndarray

    @property
    def foreground(self) -> np.ndarray:
        return self.masks[:, 1:] if self.strategy == "multi" else self.masks


def _rng(seed) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))


# ------------------------------------------------------------------ phantoms
def generate_case(
    seed: int,
    num_classes: int = 3,
    extents: tuple[int, int, int] = DEFAULT_EXTENTS,
    spacing_mm: tuple[float, float, float] = DEFAULT_SPACING,
    case_id: str | None = None,
) -> Case:
    """Random phantom with ``num_classes`` adjacent structures of similar intensity."""
    if not 1 <= num_classes <= 5:
        raise GenerationError(f"num_classes must be in 1..5, got {num_classes}")
    d, h, w = extents
    if d < 8 or h < 32 or w < 32:
        raise GenerationError(f"extents {extents} are below the 8x32x32 minimum")
    rng = _rng(seed)
    pathological = bool(rng.random() < 0.4)
    for _ in range(20):
        labels = _place_structures(rng, num_classes, extents, pathological)
        if labels is not None:
            break
    else:
        raise GenerationError(f"could not place {num_classes} structures in {extents}")
    image = _render_image(rng, labels, num_classes)
    return Case(
        image=image,
        labels=labels,
        spacing_mm=tuple(float(s) for s in spacing_mm),
        case_id=case_id if case_id is not None else f"case{seed:04d}",
        num_classes=num_classes,
        condition_tag="pathological" if pathological else "healthy",
    )


def _place_structures(rng, c: int, extents, pathological: bool) -> np.ndarray | None:
    d, h, w = extents
    side = min(h, w)
    r_max = min(0.25, 0.42 / c) * side
    radii = rng.uniform(0.75, 1.0, size=c) * r_max
    if radii.min() < 3.0:
        raise GenerationError(f"extents {extents} too small for {c} structures")
    # chain runs roughly along one diagonal so structure order is consistent across cases
    theta = np.pi / 4 + rng.uniform(-0.35, 0.35)
    direction = np.array([np.sin(theta), np.cos(theta)])
    # consecutive centres closer than the sum of radii -> neighbours overlap before partition
    gaps = [0.8 * (radii[i] + radii[i + 1]) for i in range(c - 1)]
    offsets = np.concatenate([[0.0], np.cumsum(gaps)])
    offsets -= offsets.mean()
    centre = np.array([(h - 1) / 2, (w - 1) / 2]) + rng.uniform(-0.05, 0.05, 2) * side
    zz, yy, xx = np.meshgrid(np.arange(d), np.arange(h), np.arange(w), indexing="ij")

    level = np.full((c, d, h, w), np.inf)
    wobble = 0.18 if pathological else 0.08
    for i in range(c):
        cy, cx = centre + offsets[i] * direction
        cz = (d - 1) / 2 + rng.uniform(-0.1, 0.1) * d
        az = rng.uniform(0.55, 0.8) * d
        ay = radii[i] * rng.uniform(0.8, 1.15)
        ax = radii[i] * rng.uniform(0.8, 1.15)
        p = rng.uniform(2.5, 4.0)
        phi = rng.uniform(0, np.pi)
        dy, dx = yy - cy, xx - cx
        u = np.cos(phi) * dy + np.sin(phi) * dx
        v = -np.sin(phi) * dy + np.cos(phi) * dx
        ang = np.arctan2(v, u)
        pert = np.ones_like(ang)
        for k in (2, 3):
            pert += rng.uniform(-wobble, wobble) * np.cos(k * ang + rng.uniform(0, 2 * np.pi))
        pert += rng.uniform(-wobble, wobble) * np.cos(np.pi * (zz - cz) / az + rng.uniform(0, 2 * np.pi))
        f = (np.abs((zz - cz) / az) ** p + np.abs(u / ay) ** p + np.abs(v / ax) ** p) ** (1.0 / p)
        level[i] = f / pert
    inside = level < 1.0
    owner = level.argmin(axis=0)
    labels = np.where(inside.any(axis=0), owner + 1, 0).astype(np.uint8)
    counts = np.bincount(labels.ravel(), minlength=c + 1)
    if (counts[1:] < 30).any():
        return None
    return labels


def _render_image(rng, labels: np.ndarray, c: int) -> np.ndarray:
    d, h, w = labels.shape
    means = 0.9 + 0.35 * np.arange(c) + rng.uniform(-0.05, 0.05, size=c)
    zz, yy, xx = np.meshgrid(np.linspace(-1, 1, d), np.linspace(-1, 1, h), np.linspace(-1, 1, w), indexing="ij")
    # soft-tissue envelope around the structures, darker than bone but overlapping it under noise
    fg = labels > 0
    tissue = ndimage.binary_dilation(fg, iterations=4) & ~fg
    image = np.where(tissue, 0.45, 0.0)
    for i in range(c):
        image = np.where(labels == i + 1, means[i], image)
    bias = 1.0
    for _ in range(3):
        kz, ky, kx = rng.uniform(0.3, 1.5, 3)
        bias = bias + 0.08 * np.cos(np.pi * (kz * zz + ky * yy + kx * xx) + rng.uniform(0, 2 * np.pi))
    image = image * bias + rng.normal(0.0, 0.3, size=labels.shape)
    return image


def normalize_intensity(image: np.ndarray) -> np.ndarray:
    """Zero mean, unit variance over the whole volume; constant input maps to zeros."""
    image = np.asarray(image, dtype=np.float64)
    mean = image.mean()
    std = image.std()
    if std <= 1e-12 * max(1.0, abs(mean)):
        return np.zeros_like(image)
    return (image - mean) / std


def generate_dataset(seed: int, n_cases: int, num_classes: int = 3, extents=DEFAULT_EXTENTS, spacing_mm=DEFAULT_SPACING) -> list[Case]:
    seeds = np.random.SeedSequence(seed).generate_state(n_cases)
    cases = []
    for i, s in enumerate(seeds):
        case = generate_case(int(s), num_classes, extents, spacing_mm, case_id=f"case{i:03d}")
        case.image = normalize_intensity(case.image)
        cases.append(case)
    return cases


# ------------------------------------------------------------ label encoding
def encode_label_volume(labels: np.ndarray, num_classes: int, strategy: str) -> np.ndarray:
    """(D, H, W) integer labels -> (D, K, H, W) float mask stack."""
    if strategy == "individual":
        chans = [labels == c for c in range(1, num_classes + 1)]
    elif strategy == "global":
        chans = [labels >= 1]
    elif strategy == "multi":
        chans = [labels == c for c in range(0, num_classes + 1)]
    else:
        raise ConfigurationError(f"unknown strategy {strategy!r}; expected one of {STRATEGIES}")
    return np.stack(chans, axis=1).astype(np.float64)


def encode_labels(case: Case, strategy: str) -> LabelEncoding:
    return LabelEncoding(strategy, encode_label_volume(case.labels, case.num_classes, strategy))


# -------------------------------------------------------------- augmentation
@dataclass(frozen=True)
class AugmentConfig:
    scale: tuple[float, float] = (0.9, 1.1)
    rotation_deg: float = 15.0
    shift_frac: float = 0.1
    flips: bool = True


@dataclass(frozen=True)
class Transform:
    scale: float = 1.0
    angle_deg: float = 0.0
    shift: tuple[float, float] = (0.0, 0.0)
    flip_v: bool = False
    flip_h: bool = False

    @property
    def is_affine_identity(self) -> bool:
        return self.scale == 1.0 and self.angle_deg == 0.0 and self.shift == (0.0, 0.0)


def sample_transform(rng: np.random.Generator, shape: tuple[int, int], cfg: AugmentConfig = AugmentConfig()) -> Transform:
    h, w = shape
    return Transform(
        scale=float(rng.uniform(*cfg.scale)),
        angle_deg=float(rng.uniform(-cfg.rotation_deg, cfg.rotation_deg)),
        shift=(float(rng.uniform(-1, 1) * cfg.shift_frac * h), float(rng.uniform(-1, 1) * cfg.shift_frac * w)),
        flip_v=bool(cfg.flips and rng.random() < 0.5),
        flip_h=bool(cfg.flips and rng.random() < 0.5),
    )


def apply_transform(image: np.ndarray, masks: np.ndarray, tf: Transform) -> tuple[np.ndarray, np.ndarray]:
    """Apply ``tf`` to an (H, W) image (bilinear) and (K, H, W) masks (nearest).

    Flips come first and are exact index reversals; the similarity part
    (scale and rotation about the slice centre, then shift) fills uncovered
    pixels with 0.
    """
    image = np.asarray(image, dtype=np.float64)
    masks = np.asarray(masks)
    if tf.flip_v:
        image, masks = image[::-1], masks[:, ::-1]
    if tf.flip_h:
        image, masks = image[:, ::-1], masks[:, :, ::-1]
    if tf.is_affine_identity:
        return np.ascontiguousarray(image), np.ascontiguousarray(masks)
    h, w = image.shape
    centre = np.array([(h - 1) / 2, (w - 1) / 2])
    a = np.deg2rad(tf.angle_deg)
    rot = np.array([[np.cos(a), -np.sin(a)], [np.sin(a), np.cos(a)]])
    # output -> input sampling map
    matrix = rot.T / tf.scale
    offset = centre - matrix @ (centre + np.asarray(tf.shift))
    out_img = ndimage.affine_transform(image, matrix, offset=offset, order=1, mode="constant", cval=0.0)
    out_masks = np.stack(
        [ndimage.affine_transform(m, matrix, offset=offset, order=0, mode="constant", cval=0) for m in masks]
    ) if len(masks) else masks.copy()
    return out_img, out_masks


def augment(image_slice: np.ndarray, mask_slices: np.ndarray, seed, cfg: AugmentConfig = AugmentConfig()):
    """One random transform from ``seed`` (an int or a Generator) applied to image and masks alike."""
    rng = seed if isinstance(seed, np.random.Generator) else _rng(seed)
    tf = sample_transform(rng, image_slice.shape, cfg)
    return apply_transform(image_slice, mask_slices, tf)


# ------------------------------------------------------------------ VVOL I/O
def _vvol_paths(path: str | Path) -> tuple[Path, Path]:
    p = Path(path)
    stem = p.with_suffix("") if p.suffix in (".json", ".raw") else p
    return stem.with_suffix(".json"), stem.with_suffix(".raw")


def write_vvol(
    path: str | Path,
    labels: np.ndarray,
    spacing_mm,
    num_classes: int,
    case_id: str,
    image: np.ndarray | None = None,
    condition_tag: str = "healthy",
    extra: dict | None = None,
) -> Path:
    """Write a header (.json) and little-endian payload (.raw) pair; returns the header path."""
    hpath, ppath = _vvol_paths(path)
    hpath.parent.mkdir(parents=True, exist_ok=True)
    arrays = []
    chunks = []
    offset = 0
    if image is not None:
        b = np.ascontiguousarray(image, dtype="<f8").tobytes()
        arrays.append({"name": "image", "dtype": "float64", "offset": offset, "nbytes": len(b)})
        chunks.append(b)
        offset += len(b)
    b = np.ascontiguousarray(labels, dtype="u1").tobytes()
    arrays.append({"name": "labels", "dtype": "uint8", "offset": offset, "nbytes": len(b)})
    chunks.append(b)
    header = {
        "format": VVOL_FORMAT,
        "version": VVOL_VERSION,
        "extents": [int(s) for s in labels.shape],
        "spacing_mm": [float(s) for s in spacing_mm],
        "num_classes": int(num_classes),
        "case_id": case_id,
        "condition_tag": condition_tag,
        "byte_order": "little",
        "payload": ppath.name,
        "arrays": arrays,
    }
    if extra:
        header["extra"] = extra
    hpath.write_text(json.dumps(header, indent=2, sort_keys=True) + "\n")
    ppath.write_bytes(b"".join(chunks))
    return hpath


def read_vvol(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    hpath, _ = _vvol_paths(path)
    header = json.loads(hpath.read_text())
    if header.get("format") != VVOL_FORMAT:
        raise ValueError(f"{hpath} is not a VVOL header")
    payload = (hpath.parent / header["payload"]).read_bytes()
    extents = tuple(header["extents"])
    out = {}
    for spec in header["arrays"]:
        dt = "<f8" if spec["dtype"] == "float64" else "u1"
        raw = payload[spec["offset"] : spec["offset"] + spec["nbytes"]]
        out[spec["name"]] = np.frombuffer(raw, dtype=dt).reshape(extents).copy()
    return header, out


def save_case(case: Case, directory: str | Path) -> Path:
    return write_vvol(
        Path(directory) / case.case_id,
        case.labels,
        case.spacing_mm,
        case.num_classes,
        case.case_id,
        image=case.image,
        condition_tag=case.condition_tag,
    )


def load_case(path: str | Path) -> Case:
    header, arrays = read_vvol(path)
    if "image" not in arrays:
        raise ValueError(f"{path} holds no image volume")
    return Case(
        image=arrays["image"].astype(np.float64),
        labels=arrays["labels"],
        spacing_mm=tuple(header["spacing_mm"]),
        case_id=header["case_id"],
        num_classes=header["num_classes"],
        condition_tag=header.get("condition_tag", "healthy"),
    )


def load_dataset(directory: str | Path) -> list[Case]:
    paths = sorted(Path(directory).glob("*.json"))
    cases = []
    for p in paths:
        header = json.loads(p.read_text())
        if header.get("format") == VVOL_FORMAT and any(a["name"] == "image" for a in header["arrays"]):
            cases.append(load_case(p))
    if not cases:
        raise FileNotFoundError(f"no VVOL cases found in {directory}")
    return sorted(cases, key=lambda c: c.case_id)
