"""Patch placement: attention upsampling, center selection, masks, composition.

Square patches of odd side ``s`` are centered exactly; for even ``s`` the
square spans rows ``[center - s//2, center - s//2 + s)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F


class PlacementError(ValueError):
    pass


@dataclass(frozen=True)
class Placement:
    center_row: int
    center_col: int
    patch_side: int
    image_height: int
    image_width: int

    def __post_init__(self):
        if self.patch_side < 1:
            raise PlacementError("patch_side must be at least 1")
        if self.patch_side > min(self.image_height, self.image_width):
            raise PlacementError(
                f"patch side {self.patch_side} exceeds image {self.image_height}x{self.image_width}"
            )
        r0, c0 = self.top, self.left
        if r0 < 0 or c0 < 0 or r0 + self.patch_side > self.image_height or c0 + self.patch_side > self.image_width:
            raise PlacementError(f"patch square at ({self.center_row}, {self.center_col}) leaves the image")

    @property
    def top(self) -> int:
        return self.center_row - self.patch_side // 2

    @property
    def left(self) -> int:
        return self.center_col - self.patch_side // 2

    @property
    def rows(self) -> slice:
        return slice(self.top, self.top + self.patch_side)

    @property
    def cols(self) -> slice:
        return slice(self.left, self.left + self.patch_side)

    def to_dict(self) -> dict[str, int]:
        return {"center_row": self.center_row, "center_col": self.center_col, "patch_side": self.patch_side}


def patch_side_for(ratio: float, height: int, width: int) -> int:
    """Side length as a fraction of the image's shorter side (at least one pixel)."""
    if not 0 < ratio <= 1:
        raise PlacementError(f"patch ratio must be in (0, 1], got {ratio}")
    return max(1, int(round(ratio * min(height, width))))


def upsample_map(attention: torch.Tensor, image_height: int, image_width: int) -> torch.Tensor:
    """Corner-aligned bilinear resize of a (g, g) map to (H, W)."""
    if image_height <= 0 or image_width <= 0:
        raise PlacementError("target dimensions must be positive")
    raw = getattr(attention, "raw", attention)
    raw = torch.as_tensor(raw, dtype=torch.float64)
    if raw.dim() != 2 or min(raw.shape) < 1:
        raise PlacementError("attention map must be a non-empty 2-D grid")
    if tuple(raw.shape) == (image_height, image_width):
        return raw.clone()
    out = F.interpolate(raw[None, None], size=(image_height, image_width), mode="bilinear", align_corners=True)
    return out[0, 0]


def _clamp_center(c: int, side: int, extent: int) -> int:
    lo = side // 2
    hi = extent - side + side // 2
    return min(max(c, lo), hi)


def select_center(raster: torch.Tensor | np.ndarray, patch_side: int) -> Placement:
    """Argmax (first in row-major order on ties), clamped so the square fits."""
    arr = np.asarray(raster.detach().cpu() if torch.is_tensor(raster) else raster)
    if arr.ndim != 2:
        raise PlacementError("raster must be 2-D")
    h, w = arr.shape
    if patch_side > min(h, w):
        raise PlacementError(f"patch side {patch_side} larger than image {h}x{w}")
    flat = int(np.argmax(arr))  # numpy returns the first occurrence
    r, c = divmod(flat, w)
    return Placement(_clamp_center(r, patch_side, h), _clamp_center(c, patch_side, w), patch_side, h, w)


def random_placement(height: int, width: int, patch_side: int, gen: torch.Generator) -> Placement:
    """Center drawn uniformly over all positions that keep the square inside."""
    if patch_side > min(height, width):
        raise PlacementError(f"patch side {patch_side} larger than image {height}x{width}")
    top = int(torch.randint(0, height - patch_side + 1, (1,), generator=gen))
    left = int(torch.randint(0, width - patch_side + 1, (1,), generator=gen))
    half = patch_side // 2
    return Placement(top + half, left + half, patch_side, height, width)


def make_mask(placement: Placement) -> torch.Tensor:
    m = torch.zeros(placement.image_height, placement.image_width)
    m[placement.rows, placement.cols] = 1.0
    return m


def compose(image: torch.Tensor, patch: torch.Tensor, mask: torch.Tensor, placement: Placement) -> torch.Tensor:
    """``(1 - m) * image + m * patch`` with the patch pasted at the placement.

    Pixels outside the square are copied from ``image`` untouched.
    """
    s = placement.patch_side
    if patch.shape[-2:] != (s, s):
        raise PlacementError(f"patch is {tuple(patch.shape[-2:])}, placement expects {s}x{s}")
    if mask.shape != image.shape[-2:]:
        raise PlacementError("mask and image sizes differ")
    expected = make_mask(placement)
    if not torch.equal(mask.to(expected.dtype), expected):
        raise PlacementError("mask is inconsistent with the placement")
    full = F.pad(patch, (placement.left, placement.image_width - placement.left - s,
                         placement.top, placement.image_height - placement.top - s))
    return torch.where(mask.bool(), full.to(image.dtype), image)
