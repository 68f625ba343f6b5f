"""Trainable networks: residual U-Net segmenter and multi-resolution registration net.

Both builders seed torch's RNG so two builds from the same seed carry identical
initial parameters. Checkpoints are a directory of per-parameter ``.npy`` files
plus a JSON manifest holding the architecture config, seed and iteration index.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ContractViolation
from .warp import compose_fields, upsample_field

CHECKPOINT_FORMAT = 1


class ResBlock(nn.Module):
    """Two 3x3 convolutions with an identity shortcut around the second one."""

    def __init__(self, cin: int, cout: int):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.norm1 = nn.InstanceNorm2d(cout, affine=True)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.norm2 = nn.InstanceNorm2d(cout, affine=True)
        self.act = nn.LeakyReLU(0.01)

    def forward(self, x):
        h = self.act(self.norm1(self.conv1(x)))
        return self.act(h + self.norm2(self.conv2(h)))


class SegModel(nn.Module):
    """U-Net with residual blocks: 4 pooling stages, widths doubling from
    ``base_width``, bilinear decoder upsampling, concatenated skips, sigmoid head."""

    def __init__(self, image_size: int = 256, base_width: int = 16):
        super().__init__()
        if image_size % 16:
            raise ContractViolation("image_size must be divisible by 16")
        self.config = {"kind": "seg", "image_size": image_size, "base_width": base_width}
        w = [base_width * 2 ** i for i in range(5)]
        self.enc = nn.ModuleList([
            ResBlock(1, w[0]), ResBlock(w[0], w[1]), ResBlock(w[1], w[2]), ResBlock(w[2], w[3]),
        ])
        self.pool = nn.MaxPool2d(2)
        self.bottleneck = ResBlock(w[3], w[4])
        self.dec = nn.ModuleList([
            ResBlock(w[4] + w[3], w[3]), ResBlock(w[3] + w[2], w[2]),
            ResBlock(w[2] + w[1], w[1]), ResBlock(w[1] + w[0], w[0]),
        ])
        self.head = nn.Conv2d(w[0], 1, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        skips = []
        h = x
        for block in self.enc:
            h = block(h)
            skips.append(h)
            h = self.pool(h)
        h = self.bottleneck(h)
        for block, skip in zip(self.dec, reversed(skips)):
            h = F.interpolate(h, scale_factor=2, mode="bilinear", align_corners=False)
            h = block(torch.cat([h, skip], dim=1))
        return torch.sigmoid(self.head(h))


class RegModel(nn.Module):
    """Multi-resolution registration network.

    A shared encoder sees the concatenated (moving, fixed) pair; each of the K
    decoder levels predicts a residual field through a zero-initialized head,
    composed onto the upsampled accumulated field, so the initial transform is
    exactly the identity at every level. Forward returns the cumulative fields
    coarse to fine.
    """

    def __init__(self, image_size: int = 256, levels: int = 5, base_width: int = 16,
                 width_cap: int = 64):
        super().__init__()
        if levels < 1:
            raise ContractViolation("levels must be >= 1")
        if image_size % 2 ** (levels - 1):
            raise ContractViolation(f"image_size must be divisible by {2 ** (levels - 1)}")
        self.config = {"kind": "reg", "image_size": image_size, "levels": levels,
                       "base_width": base_width, "width_cap": width_cap}
        w = [min(base_width * 2 ** i, width_cap) for i in range(levels)]
        self.enc = nn.ModuleList([ResBlock(2 if i == 0 else w[i - 1], w[i]) for i in range(levels)])
        self.pool = nn.AvgPool2d(2)
        dec_blocks = []
        heads = [nn.Conv2d(w[-1], 2, 3, padding=1)]
        dw = w[-1]
        for i in range(levels - 2, -1, -1):
            dec_blocks.append(ResBlock(dw + w[i], w[i]))
            heads.append(nn.Conv2d(w[i], 2, 3, padding=1))
            dw = w[i]
        self.dec = nn.ModuleList(dec_blocks)
        self.heads = nn.ModuleList(heads)
        for head in self.heads:
            nn.init.zeros_(head.weight)
            nn.init.zeros_(head.bias)

    def forward(self, moving: torch.Tensor, fixed: torch.Tensor) -> list[torch.Tensor]:
        levels = self.config["levels"]
        h = torch.cat([moving, fixed], dim=1)
        skips = []
        for i, block in enumerate(self.enc):
            h = block(h)
            skips.append(h)
            if i < levels - 1:
                h = self.pool(h)
        h = skips[-1]
        field = self.heads[0](h)
        fields = [field]
        for i, block in enumerate(self.dec):
            skip = skips[levels - 2 - i]
            h = F.interpolate(h, scale_factor=2, mode="bilinear", align_corners=False)
            h = block(torch.cat([h, skip], dim=1))
            residual = self.heads[i + 1](h)
            field = compose_fields(upsample_field(field), residual)
            fields.append(field)
        return fields


def build_seg_model(seed: int, image_size: int = 256, base_width: int = 16) -> SegModel:
    torch.manual_seed(seed)
    return SegModel(image_size=image_size, base_width=base_width)


def build_reg_model(seed: int, image_size: int = 256, levels: int = 5,
                    base_width: int = 16, width_cap: int = 64) -> RegModel:
    torch.manual_seed(seed)
    return RegModel(image_size=image_size, levels=levels, base_width=base_width,
                    width_cap=width_cap)


def _check_image(img: torch.Tensor, size: int, what: str) -> None:
    if img.dim() != 2 or img.shape != (size, size):
        raise ContractViolation(f"{what} must be ({size}, {size}), got {tuple(img.shape)}")


def seg_forward(m: SegModel, img: torch.Tensor) -> torch.Tensor:
    """Single-image inference: (H, W) in [0,1] to an (H, W) soft mask."""
    _check_image(img, m.config["image_size"], "segmenter input")
    return m(img[None, None].to(torch.float32))[0, 0]


def reg_forward(m: RegModel, source: torch.Tensor, target: torch.Tensor) -> list[torch.Tensor]:
    """Single-pair inference: two (H, W) images to K cumulative fields, coarse to fine."""
    size = m.config["image_size"]
    _check_image(source, size, "registration source")
    _check_image(target, size, "registration target")
    fields = m(source[None, None].to(torch.float32), target[None, None].to(torch.float32))
    return [f[0] for f in fields]


def save_checkpoint(path, model: nn.Module, seed: int, iteration: int = 0,
                    extra: dict | None = None) -> None:
    """Write every parameter as ``<name>.npy`` plus ``manifest.json``."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    names = []
    for name, param in model.state_dict().items():
        np.save(path / f"{name}.npy", param.detach().cpu().numpy())
        names.append(name)
    manifest = {"format": CHECKPOINT_FORMAT, "config": model.config, "seed": seed,
                "iteration": iteration, "parameters": names}
    if extra:
        manifest["extra"] = extra
    (path / "manifest.json").write_text(json.dumps(manifest, indent=1))


def load_checkpoint(path) -> tuple[nn.Module, dict]:
    """Rebuild the model named in the manifest and restore its parameters."""
    path = Path(path)
    manifest_path = path / "manifest.json"
    if not manifest_path.exists():
        raise ContractViolation(f"no manifest.json under {path}")
    manifest = json.loads(manifest_path.read_text())
    cfg = dict(manifest["config"])
    kind = cfg.pop("kind")
    if kind == "seg":
        model: nn.Module = build_seg_model(manifest["seed"], **cfg)
    elif kind == "reg":
        model = build_reg_model(manifest["seed"], **cfg)
    else:
        raise ContractViolation(f"unknown model kind {kind!r}")
    state = {}
    for name in manifest["parameters"]:
        state[name] = torch.from_numpy(np.load(path / f"{name}.npy"))
    model.load_state_dict(state)
    return model, manifest
