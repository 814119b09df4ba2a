"""3D post-processing of stacked slice predictions: largest component, then closing."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import ndimage

from .autodiff import ContractError

CONNECTIVITY_RANK = {6: 1, 18: 2, 26: 3}


@dataclass
class BinaryVolume:
    mask: np.ndarray  # (D, H, W) bool
    spacing_mm: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.mask.ndim != 3:
            raise ContractError(f"binary volume must be 3D, got shape {self.mask.shape}")

    @property
    def extents(self) -> tuple[int, int, int]:
        return self.mask.shape

    def count(self) -> int:
        return int(self.mask.sum())


def _as_mask(vol) -> np.ndarray:
    return vol.mask if isinstance(vol, BinaryVolume) else np.asarray(vol, dtype=bool)


def _like(vol, mask: np.ndarray):
    if isinstance(vol, BinaryVolume):
        return BinaryVolume(mask, vol.spacing_mm)
    return mask


def stack_slices(slices: Sequence[np.ndarray], spacing_mm=(1.0, 1.0, 1.0)) -> BinaryVolume:
    """Stack 2D masks in acquisition order into a (D, H, W) volume."""
    if len(slices) == 0:
        raise ContractError("stack_slices needs at least one slice")
    shape = np.shape(slices[0])
    for i, s in enumerate(slices):
        if np.shape(s) != shape or len(shape) != 2:
            raise ContractError(f"slice {i} has extents {np.shape(s)}, expected 2D {shape}")
    return BinaryVolume(np.stack([np.asarray(s, dtype=bool) for s in slices]), tuple(spacing_mm))


def largest_connected_component(vol, connectivity: int = 26):
    """Keep the largest component; equal sizes go to the one with the lowest scan-order voxel."""
    if connectivity not in CONNECTIVITY_RANK:
        raise ContractError(f"connectivity must be 6, 18 or 26, got {connectivity}")
    mask = _as_mask(vol)
    if not mask.any():
        return _like(vol, np.zeros_like(mask))
    structure = ndimage.generate_binary_structure(3, CONNECTIVITY_RANK[connectivity])
    labels, n = ndimage.label(mask, structure=structure)
    flat = labels.ravel()
    sizes = np.bincount(flat, minlength=n + 1)
    # first flat index of each label = its lowest scan-order voxel
    ids, first = np.unique(flat, return_index=True)
    first_of = np.full(n + 1, flat.size)
    first_of[ids] = first
    candidates = range(1, n + 1)
    best = min(candidates, key=lambda lab: (-sizes[lab], first_of[lab]))
    return _like(vol, labels == best)


def ball(radius: int) -> np.ndarray:
    """Digital ball: voxels whose unit cube meets the Euclidean ball of ``radius`` about the origin.

    Radius 1 gives the full 3x3x3 neighbourhood.
    """
    if radius < 1:
        raise ContractError("radius must be >= 1")
    r = np.arange(-radius, radius + 1)
    zz, yy, xx = np.meshgrid(r, r, r, indexing="ij")
    near = [np.maximum(np.abs(a) - 0.5, 0.0) for a in (zz, yy, xx)]
    return near[0] ** 2 + near[1] ** 2 + near[2] ** 2 <= radius**2


def morphological_closing(vol, radius: int = 1):
    """Dilation then erosion by :func:`ball`, computed on a zero-padded copy and cropped back."""
    se = ball(radius)
    mask = _as_mask(vol)
    padded = np.pad(mask, radius)
    dil = ndimage.binary_dilation(padded, structure=se)
    closed = ndimage.binary_erosion(dil, structure=se)
    sl = tuple(slice(radius, radius + n) for n in mask.shape)
    return _like(vol, closed[sl])


def postprocess(vol, connectivity: int = 26, radius: int = 1):
    """Largest connected component followed by closing."""
    return morphological_closing(largest_connected_component(vol, connectivity), radius)
