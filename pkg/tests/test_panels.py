import numpy as np
import pytest
import torch
from PIL import Image

from segreg.errors import ContractViolation
from segreg.panels import CELL_PAD, render_iteration_panel
from segreg.pseudo_masks import save_soft_mask

SIZE = 8
STRIDE = SIZE + 2 * CELL_PAD


def _confidence(seed: int) -> torch.Tensor:
    rng = np.random.default_rng(seed)
    return torch.tensor(rng.uniform(0, 1, size=(SIZE, SIZE)).astype(np.float32))


ROW_KINDS = ("seg", "reg", "fused")


def _make_run(root, iterations, image_id="img", skip=()):
    for it in iterations:
        d = root / "pseudo" / f"iter_{it}"
        d.mkdir(parents=True, exist_ok=True)
        for k, row in enumerate(ROW_KINDS):
            if (it, row) in skip:
                continue
            save_soft_mask(d / f"{image_id}_{row}.png", _confidence(1000 * it + k))


def _cell(panel: np.ndarray, row: int, col: int) -> np.ndarray:
    y = row * STRIDE + CELL_PAD
    x = col * STRIDE + CELL_PAD
    return panel[y:y + SIZE, x:x + SIZE]


class TestLayout:
    def test_single_iteration_gives_3x1_grid(self, tmp_path):
        _make_run(tmp_path, [1])
        out = render_iteration_panel(tmp_path, "img")
        panel = np.asarray(Image.open(out))
        assert panel.shape == (3 * STRIDE, 1 * STRIDE)

    def test_eight_iterations_give_3x8_grid(self, tmp_path):
        _make_run(tmp_path, range(1, 9))
        panel = np.asarray(Image.open(render_iteration_panel(tmp_path, "img")))
        assert panel.shape == (3 * STRIDE, 8 * STRIDE)

    def test_default_output_location_and_override(self, tmp_path):
        _make_run(tmp_path, [1])
        assert render_iteration_panel(tmp_path, "img") == tmp_path / "panels" / "img.png"
        custom = tmp_path / "elsewhere" / "p.png"
        assert render_iteration_panel(tmp_path, "img", custom) == custom
        assert custom.is_file()


class TestPixelFidelity:
    def test_cells_equal_16bit_values_downscaled_by_257(self, tmp_path):
        _make_run(tmp_path, [1, 2])
        panel = np.asarray(Image.open(render_iteration_panel(tmp_path, "img")))
        for col, it in enumerate((1, 2)):
            for row, kind in enumerate(ROW_KINDS):
                c = _confidence(1000 * it + row).numpy()
                stored = np.round(c.astype(np.float64) * 65535.0)
                expect = np.round(stored / 257.0).astype(np.uint8)
                assert np.array_equal(_cell(panel, row, col), expect), (row, col)

    def test_full_and_zero_confidence_map_to_255_and_0(self, tmp_path):
        d = tmp_path / "pseudo" / "iter_1"
        d.mkdir(parents=True)
        for kind, value in (("seg", 1.0), ("reg", 0.0), ("fused", 0.5)):
            save_soft_mask(d / f"img_{kind}.png", torch.full((SIZE, SIZE), value))
        panel = np.asarray(Image.open(render_iteration_panel(tmp_path, "img")))
        assert (_cell(panel, 0, 0) == 255).all()
        assert (_cell(panel, 1, 0) == 0).all()
        assert (_cell(panel, 2, 0) == round(round(0.5 * 65535) / 257.0)).all()


class TestGaps:
    def test_missing_iteration_renders_gap_column(self, tmp_path):
        _make_run(tmp_path, [1, 3])  # no iter_2 at all
        panel = np.asarray(Image.open(render_iteration_panel(tmp_path, "img")))
        assert panel.shape == (3 * STRIDE, 3 * STRIDE)
        middle = _cell(panel, 0, 1)
        assert (np.unique(middle) == [0, 220]).all()  # crossed-out marker

    def test_missing_single_file_renders_gap_cell(self, tmp_path):
        _make_run(tmp_path, [1, 2], skip={(2, "reg")})
        panel = np.asarray(Image.open(render_iteration_panel(tmp_path, "img")))
        assert set(np.unique(_cell(panel, 1, 1))) == {0, 220}
        # neighbours unaffected
        assert set(np.unique(_cell(panel, 0, 1))) != {0, 220}

    def test_unknown_image_id_rejected(self, tmp_path):
        _make_run(tmp_path, [1])
        with pytest.raises(ContractViolation):
            render_iteration_panel(tmp_path, "nope")

    def test_run_without_artifacts_rejected(self, tmp_path):
        with pytest.raises(ContractViolation):
            render_iteration_panel(tmp_path, "img")
