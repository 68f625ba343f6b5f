"""Displacement-field resampling, pyramid utilities and invertible test-time augments.

Conventions used throughout the package:

* images and masks are ``(H, W)`` tensors; batched variants are ``(B, C, H, W)``.
* a displacement field is a ``(2, H, W)`` tensor in pixel units, channel 0 the
  row offset and channel 1 the column offset, with sampling semantics
  ``output(p) = input(p + d(p))``.
* a displacement pyramid is a list of fields ordered coarse to fine, each level
  exactly twice the spatial size of the previous one.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np
import torch

from .errors import ContractViolation

FIELD_MAGIC = b"DFLD"

BORDER_CLAMP = "clamp"
BORDER_ZEROS = "zeros"
_BORDERS = (BORDER_CLAMP, BORDER_ZEROS)


def _bilinear_gather(img: torch.Tensor, rows: torch.Tensor, cols: torch.Tensor,
                     border: str) -> torch.Tensor:
    """Sample ``img`` at fractional pixel coordinates with bilinear weights.

    ``img`` is ``(B, C, H, W)``; ``rows``/``cols`` are ``(B, Ho, Wo)`` in pixel
    units. Differentiable w.r.t. both the image and the coordinates. ``clamp``
    replicates edge values outside the frame, ``zeros`` treats outside samples
    as zero.
    """
    if border not in _BORDERS:
        raise ContractViolation(f"unknown border policy {border!r}")
    B, C, H, W = img.shape
    r0 = torch.floor(rows)
    c0 = torch.floor(cols)
    fr = rows - r0
    fc = cols - c0
    r0 = r0.long()
    c0 = c0.long()
    r1 = r0 + 1
    c1 = c0 + 1

    if border == BORDER_ZEROS:
        valid = [
            (r0 >= 0) & (r0 < H) & (c0 >= 0) & (c0 < W),
            (r0 >= 0) & (r0 < H) & (c1 >= 0) & (c1 < W),
            (r1 >= 0) & (r1 < H) & (c0 >= 0) & (c0 < W),
            (r1 >= 0) & (r1 < H) & (c1 >= 0) & (c1 < W),
        ]
    r0c = r0.clamp(0, H - 1)
    r1c = r1.clamp(0, H - 1)
    c0c = c0.clamp(0, W - 1)
    c1c = c1.clamp(0, W - 1)

    flat = img.reshape(B, C, H * W)
    out = None
    corners = ((r0c, c0c, (1 - fr) * (1 - fc)), (r0c, c1c, (1 - fr) * fc),
               (r1c, c0c, fr * (1 - fc)), (r1c, c1c, fr * fc))
    for k, (ri, ci, w) in enumerate(corners):
        if border == BORDER_ZEROS:
            w = w * valid[k].to(img.dtype)
        idx = (ri * W + ci).reshape(B, 1, -1).expand(B, C, -1)
        val = flat.gather(2, idx).reshape(B, C, *rows.shape[-2:])
        contrib = val * w.unsqueeze(1)
        out = contrib if out is None else out + contrib
    return out


def _base_grid(H: int, W: int, dtype, device) -> tuple[torch.Tensor, torch.Tensor]:
    rr = torch.arange(H, dtype=dtype, device=device).view(H, 1).expand(H, W)
    cc = torch.arange(W, dtype=dtype, device=device).view(1, W).expand(H, W)
    return rr, cc


def _check_field(d: torch.Tensor) -> None:
    if d.dim() not in (3, 4) or d.shape[-3] != 2:
        raise ContractViolation(f"displacement field must be (2, H, W) or (B, 2, H, W), got {tuple(d.shape)}")
    if not torch.isfinite(d).all():
        raise ContractViolation("displacement field contains non-finite values")


def warp(image: torch.Tensor, d: torch.Tensor, border: str = BORDER_CLAMP) -> torch.Tensor:
    """Resample a single ``(H, W)`` image or soft mask through a displacement field.

    ``output(p) = image(p + d(p))`` with bilinear interpolation, so soft mask
    values stay soft. The zero field is an exact identity under both border
    policies.
    """
    if image.dim() != 2:
        raise ContractViolation(f"warp expects an (H, W) input, got {tuple(image.shape)}")
    _check_field(d)
    if d.shape[-2:] != image.shape:
        raise ContractViolation(f"field shape {tuple(d.shape[-2:])} does not match image {tuple(image.shape)}")
    out = warp_batch(image[None, None], d[None], border)
    return out[0, 0]


def warp_batch(images: torch.Tensor, fields: torch.Tensor, border: str = BORDER_CLAMP) -> torch.Tensor:
    """Batched :func:`warp`: ``images`` ``(B, C, H, W)``, ``fields`` ``(B, 2, H, W)``."""
    _check_field(fields)
    if images.shape[-2:] != fields.shape[-2:] or images.shape[0] != fields.shape[0]:
        raise ContractViolation("image batch and field batch shapes do not match")
    H, W = images.shape[-2:]
    rr, cc = _base_grid(H, W, images.dtype, images.device)
    rows = rr.unsqueeze(0) + fields[:, 0]
    cols = cc.unsqueeze(0) + fields[:, 1]
    return _bilinear_gather(images, rows, cols, border)


def upsample_field(d: torch.Tensor, factor: int = 2) -> torch.Tensor:
    """Double a field's resolution; offsets are rescaled with the pixel grid.

    Fine-grid position ``x`` samples the coarse field at ``x / 2`` (edge
    replicated past the last coarse sample), so even coordinates reproduce
    exactly twice the coarse values.
    """
    if factor != 2:
        raise ContractViolation("only factor-2 field upsampling is supported")
    _check_field(d)
    single = d.dim() == 3
    if single:
        d = d[None]
    B, _, H, W = d.shape
    rows = (torch.arange(2 * H, dtype=d.dtype, device=d.device) / 2).view(-1, 1).expand(2 * H, 2 * W)
    cols = (torch.arange(2 * W, dtype=d.dtype, device=d.device) / 2).view(1, -1).expand(2 * H, 2 * W)
    out = 2 * _bilinear_gather(d, rows.unsqueeze(0).expand(B, -1, -1),
                               cols.unsqueeze(0).expand(B, -1, -1), BORDER_CLAMP)
    return out[0] if single else out


def compose_fields(coarse_up: torch.Tensor, residual: torch.Tensor) -> torch.Tensor:
    """Chain two same-size fields: ``out(p) = residual(p) + coarse_up(p + residual(p))``.

    Resample-then-add keeps large coarse displacements consistent when a fine
    residual moves the lookup point, unlike naive addition.
    """
    _check_field(coarse_up)
    _check_field(residual)
    if coarse_up.shape != residual.shape:
        raise ContractViolation("composed fields must share a shape")
    single = coarse_up.dim() == 3
    if single:
        coarse_up = coarse_up[None]
        residual = residual[None]
    sampled = warp_batch(coarse_up, residual, BORDER_CLAMP)
    out = residual + sampled
    return out[0] if single else out


def downsample(image: torch.Tensor, levels: int) -> list[torch.Tensor]:
    """Build a coarse-to-fine pyramid by repeated 2x2 average pooling.

    Returns ``levels`` entries ordered coarse to fine; the last entry is the
    input itself. H and W must be divisible by ``2**(levels - 1)``.
    """
    if image.dim() != 2:
        raise ContractViolation(f"downsample expects an (H, W) input, got {tuple(image.shape)}")
    if levels < 1:
        raise ContractViolation("levels must be >= 1")
    H, W = image.shape
    f = 2 ** (levels - 1)
    if H % f or W % f:
        raise ContractViolation(f"shape {(H, W)} not divisible by {f}")
    pyramid = [image]
    cur = image
    for _ in range(levels - 1):
        cur = cur.reshape(cur.shape[0] // 2, 2, cur.shape[1] // 2, 2).mean(dim=(1, 3))
        pyramid.append(cur)
    pyramid.reverse()
    return pyramid


@dataclass(frozen=True)
class AugmentSpec:
    """One test-time augmentation draw.

    The spatial part (rotation + flips) is exactly invertible; the contrast
    part is intensity-only and needs no inverse when mapping predictions back.
    """

    rotation_deg: float = 0.0
    flip_h: bool = False
    flip_v: bool = False
    contrast_gamma: float = 1.0

    def to_dict(self) -> dict:
        return {"rotation_deg": self.rotation_deg, "flip_h": self.flip_h,
                "flip_v": self.flip_v, "contrast_gamma": self.contrast_gamma}


def sample_augment(rng: np.random.Generator, rotation_max: float = 15.0,
                   gamma_range: tuple[float, float] = (0.7, 1.4),
                   flip_prob: float = 0.5) -> AugmentSpec:
    """Draw an augmentation: rotation uniform in +-rotation_max degrees, flips
    each with ``flip_prob``, gamma log-uniform over ``gamma_range``."""
    rot = float(rng.uniform(-rotation_max, rotation_max))
    fh = bool(rng.random() < flip_prob)
    fv = bool(rng.random() < flip_prob)
    lo, hi = gamma_range
    gamma = float(math.exp(rng.uniform(math.log(lo), math.log(hi))))
    return AugmentSpec(rotation_deg=rot, flip_h=fh, flip_v=fv, contrast_gamma=gamma)


def _rotate(image: torch.Tensor, degrees: float, border: str) -> torch.Tensor:
    """Rotate about the image centre with bilinear resampling."""
    if abs(degrees) < 1e-12:
        return image.clone()
    H, W = image.shape
    theta = math.radians(degrees)
    cr, cc_ = (H - 1) / 2.0, (W - 1) / 2.0
    rr, cc = _base_grid(H, W, image.dtype, image.device)
    dr = rr - cr
    dc = cc - cc_
    cos_t, sin_t = math.cos(theta), math.sin(theta)
    src_r = cos_t * dr - sin_t * dc + cr
    src_c = sin_t * dr + cos_t * dc + cc_
    out = _bilinear_gather(image[None, None], src_r[None], src_c[None], border)
    return out[0, 0]


def apply_augment(image: torch.Tensor, a: AugmentSpec, kind: str = "image") -> torch.Tensor:
    """Contrast (``x**gamma``) first, then rotation, then flips.

    ``kind="image"`` uses edge replication when rotating and applies gamma;
    ``kind="mask"`` skips gamma (labels carry no contrast) and fills rotated-in
    regions with zeros, matching how :func:`invert_augment` treats them.
    """
    if kind not in ("image", "mask"):
        raise ContractViolation(f"unknown augment kind {kind!r}")
    if a.contrast_gamma <= 0:
        raise ContractViolation("contrast gamma must be positive")
    out = image
    if kind == "image" and a.contrast_gamma != 1.0:
        out = out.clamp(min=0) ** a.contrast_gamma
    out = _rotate(out, a.rotation_deg, BORDER_CLAMP if kind == "image" else BORDER_ZEROS)
    if a.flip_h:
        out = torch.flip(out, dims=(1,))
    if a.flip_v:
        out = torch.flip(out, dims=(0,))
    return out


def invert_augment(mask: torch.Tensor, a: AugmentSpec) -> torch.Tensor:
    """Undo only the spatial part of ``a`` to map a prediction back.

    Flips are their own inverse; rotation is inverted by the opposite angle
    with zero fill, since mask confidence outside the view is zero.
    """
    out = mask
    if a.flip_v:
        out = torch.flip(out, dims=(0,))
    if a.flip_h:
        out = torch.flip(out, dims=(1,))
    return _rotate(out, -a.rotation_deg, BORDER_ZEROS)


def save_field(path, d: torch.Tensor) -> None:
    """Serialize a single field: 16-byte header (magic, H, W, channels=2) then
    little-endian float32 data laid out ``(H, W, 2)`` row-major."""
    _check_field(d)
    if d.dim() != 3:
        raise ContractViolation("save_field expects an unbatched (2, H, W) field")
    arr = d.detach().cpu().to(torch.float32).permute(1, 2, 0).contiguous().numpy()
    H, W, C = arr.shape
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4sIII", FIELD_MAGIC, H, W, C))
        fh.write(arr.astype("<f4").tobytes())


def load_field(path) -> torch.Tensor:
    with open(path, "rb") as fh:
        header = fh.read(16)
        magic, H, W, C = struct.unpack("<4sIII", header)
        if magic != FIELD_MAGIC:
            raise ContractViolation(f"bad field file magic {magic!r}")
        if C != 2:
            raise ContractViolation(f"expected 2 channels, got {C}")
        data = np.frombuffer(fh.read(H * W * C * 4), dtype="<f4").reshape(H, W, C)
    return torch.from_numpy(data.copy()).permute(2, 0, 1).contiguous()
