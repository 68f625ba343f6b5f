"""Pseudo-mask generation and fusion.

For each unannotated image, the segmenter contributes N TTA predictions mapped
back to the original frame and the registration net contributes N annotated
masks warped from the most similar annotated images; their per-pixel mean is
the soft pseudo-mask whose values act as confidence scores. The same fusion is
the test-time "combined" inference path.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .datasets import Sample, read_image16, write_image16
from .errors import ContractViolation
from .losses import gncc
from .models import RegModel, SegModel, reg_forward, seg_forward
from .warp import (BORDER_ZEROS, AugmentSpec, apply_augment, invert_augment,
                   sample_augment, warp)


@dataclass(frozen=True)
class MaskSource:
    """Provenance of one contributor: a TTA draw or a registration source image."""

    kind: str
    augment: AugmentSpec | None = None
    source_id: str | None = None

    def to_dict(self) -> dict:
        out: dict = {"kind": self.kind}
        if self.augment is not None:
            out["augment"] = self.augment.to_dict()
        if self.source_id is not None:
            out["source_id"] = self.source_id
        return out


@dataclass
class SoftPseudoMask:
    confidence: torch.Tensor
    contributors: list[MaskSource]


def tta_seg_masks(m: SegModel, img: torch.Tensor, n: int, rng: np.random.Generator,
                  augments: list[AugmentSpec] | None = None) -> tuple[list[torch.Tensor], list[MaskSource]]:
    """Predict under n sampled augmentations and map each prediction back.

    ``augments`` overrides the random draws (used to force identity TTA).
    Returns the masks plus their provenance records, in draw order.
    """
    if n < 1:
        raise ContractViolation("need at least one TTA draw")
    if augments is None:
        augments = [sample_augment(rng) for _ in range(n)]
    elif len(augments) != n:
        raise ContractViolation(f"expected {n} augment specs, got {len(augments)}")
    masks = []
    sources = []
    with torch.no_grad():
        for a in augments:
            pred = seg_forward(m, apply_augment(img, a, kind="image"))
            masks.append(invert_augment(pred, a))
            sources.append(MaskSource(kind="seg", augment=a))
    return masks, sources


def select_sources(target: torch.Tensor, annotated_pool: list[Sample], n: int) -> list[Sample]:
    """The n pool images most similar to the target by |gncc|, best first.

    Ties break on id so the order is deterministic; a pool no larger than n is
    returned whole (still ranked).
    """
    if not annotated_pool:
        raise ContractViolation("annotated pool is empty")
    scored = []
    with torch.no_grad():
        for s in annotated_pool:
            scored.append((-abs(gncc(target, s.image).item()), s.id, s))
    scored.sort(key=lambda t: (t[0], t[1]))
    return [s for _, _, s in scored[:min(n, len(scored))]]


def reg_masks(m: RegModel, target: torch.Tensor,
              sources: list[Sample]) -> tuple[list[torch.Tensor], list[MaskSource]]:
    """Warp each source's mask through the finest registration field, source
    order preserved."""
    masks = []
    records = []
    with torch.no_grad():
        for s in sources:
            if s.mask is None:
                raise ContractViolation(f"registration source {s.id} has no mask")
            fields = reg_forward(m, s.image, target)
            masks.append(warp(s.mask, fields[-1], BORDER_ZEROS))
            records.append(MaskSource(kind="reg", source_id=s.id))
    return masks, records


def fuse(seg_list: list[torch.Tensor], reg_list: list[torch.Tensor],
         contributors: list[MaskSource] | None = None) -> SoftPseudoMask:
    """Per-pixel arithmetic mean of the 2N contributor masks."""
    if len(seg_list) != len(reg_list) or not seg_list:
        raise ContractViolation(f"need equal non-empty mask lists, got "
                                f"{len(seg_list)} and {len(reg_list)}")
    all_masks = list(seg_list) + list(reg_list)
    shape = all_masks[0].shape
    for mask in all_masks:
        if mask.shape != shape:
            raise ContractViolation("contributor masks differ in shape")
    confidence = torch.stack(all_masks).mean(dim=0)
    if contributors is None:
        contributors = ([MaskSource(kind="seg")] * len(seg_list)
                        + [MaskSource(kind="reg")] * len(reg_list))
    return SoftPseudoMask(confidence=confidence, contributors=contributors)


def generate_pseudo_mask_detailed(seg: SegModel, reg: RegModel, img: torch.Tensor,
                                  annotated_pool: list[Sample], n: int,
                                  rng: np.random.Generator) -> tuple[SoftPseudoMask, torch.Tensor, torch.Tensor]:
    """Fused pseudo-mask plus the per-model contributor means (for panels).

    When the annotated pool holds fewer than n images, both sides drop to the
    pool size so the fusion stays balanced between the two models.
    """
    n_eff = min(n, len(annotated_pool))
    if n_eff < 1:
        raise ContractViolation("annotated pool is empty")
    seg_list, seg_src = tta_seg_masks(seg, img, n_eff, rng)
    sources = select_sources(img, annotated_pool, n_eff)
    reg_list, reg_src = reg_masks(reg, img, sources)
    fused = fuse(seg_list, reg_list, seg_src + reg_src)
    seg_mean = torch.stack(seg_list).mean(dim=0)
    reg_mean = torch.stack(reg_list).mean(dim=0)
    return fused, seg_mean, reg_mean


def generate_pseudo_mask(seg: SegModel, reg: RegModel, img: torch.Tensor,
                         annotated_pool: list[Sample], n: int,
                         rng: np.random.Generator) -> SoftPseudoMask:
    """The full per-image engine: N TTA masks + N registration masks, fused."""
    return generate_pseudo_mask_detailed(seg, reg, img, annotated_pool, n, rng)[0]


def combined_inference(seg: SegModel, reg: RegModel, img: torch.Tensor,
                       annotated_pool: list[Sample], n: int,
                       rng: np.random.Generator) -> SoftPseudoMask:
    """Test-time fusion of both models' outputs (the "combined" method)."""
    return generate_pseudo_mask(seg, reg, img, annotated_pool, n, rng)


def save_soft_mask(path, mask: torch.Tensor) -> None:
    """Persist confidences as 16-bit grayscale PNG, value = round(c * 65535)."""
    write_image16(path, mask)


def load_soft_mask(path) -> torch.Tensor:
    return read_image16(path)
