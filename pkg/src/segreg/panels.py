"""Per-image grids of the pseudo-masks saved at each training iteration.

Rows show the segmentation-derived, registration-derived and fused masks; one
column per iteration. Cell pixels reproduce the stored 16-bit confidences
downscaled to 8 bits, so a panel is a faithful (if coarser) view of the
artifacts on disk.
"""

import re
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ContractViolation

PANEL_ROWS = ("seg", "reg", "fused")
CELL_PAD = 2
_PAD_VALUE = 255
_GAP_VALUE = 220


def _load_cell(path: Path):
    if not path.is_file():
        return None
    arr = np.asarray(Image.open(path), dtype=np.float64)
    # 65535 -> 255; no exact .5 remainders exist for integer v, so rounding
    # mode is irrelevant
    return np.round(arr / 257.0).astype(np.uint8)


def _gap_cell(shape) -> np.ndarray:
    cell = np.full(shape, _GAP_VALUE, dtype=np.uint8)
    h, w = shape
    cols = np.arange(w)
    rows = np.clip(np.round(cols * (h - 1) / max(1, w - 1)).astype(int), 0, h - 1)
    cell[rows, cols] = 0
    cell[h - 1 - rows, cols] = 0
    return cell


def render_iteration_panel(run_dir, image_id: str, out_path=None) -> Path:
    """Assemble the 3-row grid for one image across all saved iterations.

    Missing artifacts (an iteration directory or a single mask file) become
    crossed-out gap cells rather than errors, so partially complete runs still
    render.
    """
    run_dir = Path(run_dir)
    pseudo = run_dir / "pseudo"
    iters = sorted(int(m.group(1)) for p in pseudo.glob("iter_*")
                   if (m := re.fullmatch(r"iter_(\d+)", p.name)))
    if not iters:
        raise ContractViolation(f"no pseudo-mask artifacts under {pseudo}")
    columns = list(range(min(iters), max(iters) + 1))

    cells: dict[tuple, np.ndarray | None] = {}
    shape = None
    for it in columns:
        for row in PANEL_ROWS:
            arr = _load_cell(pseudo / f"iter_{it}" / f"{image_id}_{row}.png")
            if arr is not None:
                if arr.ndim != 2:
                    raise ContractViolation(f"pseudo-mask for {image_id} is not 2-d")
                if shape is not None and arr.shape != shape:
                    raise ContractViolation("pseudo-mask sizes differ across iterations")
                shape = arr.shape
            cells[(row, it)] = arr
    if shape is None:
        raise ContractViolation(f"no pseudo-masks found for image {image_id!r}")

    gap = _gap_cell(shape)
    bands = []
    for row in PANEL_ROWS:
        padded = [np.pad(cells[(row, it)] if cells[(row, it)] is not None else gap,
                         CELL_PAD, constant_values=_PAD_VALUE) for it in columns]
        bands.append(np.concatenate(padded, axis=1))
    grid = np.concatenate(bands, axis=0)

    out = Path(out_path) if out_path is not None else run_dir / "panels" / f"{image_id}.png"
    out.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(grid, mode="L").save(out)
    return out
