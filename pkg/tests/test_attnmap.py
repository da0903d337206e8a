"""Grouped attention-map export, coordinate CSVs, and grayscale rendering."""

import numpy as np
import pytest

from mhattnsurv import attnmap
from mhattnsurv.errors import DomainError, FormatError, UsageError
from mhattnsurv.model import EmbeddingBag, ModelParams, init_params
from mhattnsurv.numerics import RngStream


def _uniform_params(d=8, heads=2):
    """Zero keys: every logit is 0, so each group softmax is uniform."""
    return ModelParams(
        W_K=np.zeros((d, d)), Q=np.zeros(d), fc_w=np.ones(d), fc_b=0.0,
        heads=heads, key_dropout_rate=0.0,
    )


def _bag(n, d=8, seed=70):
    rng = np.random.default_rng(seed)
    return EmbeddingBag("bag", rng.normal(size=(n, d)))


class TestAttentionMapExport:
    def test_every_patch_scored_exactly_passes_times(self):
        params = init_params(8, 2, RngStream(0, "i"))
        for n in (64, 50, 7):
            weights, counts = attnmap.attention_map_export(
                params, _bag(n), RngStream(1, "map"), passes=3, group_size=32
            )
            assert weights.shape == (2, n)
            np.testing.assert_array_equal(counts, np.full(n, 3))

    def test_uniform_model_full_groups_export_exactly_one(self):
        weights, _ = attnmap.attention_map_export(
            _uniform_params(), _bag(64), RngStream(2, "map"), passes=5, group_size=32
        )
        # every group is full, so the rescaled weight is exactly 1.0
        np.testing.assert_array_equal(weights, np.ones((2, 64)))

    def test_uniform_model_short_group_weighs_more(self):
        # 40 patches in groups of 32 leave a short group of 8 each pass;
        # its patches get weight 32/8 = 4, so the average exceeds 1
        weights, _ = attnmap.attention_map_export(
            _uniform_params(), _bag(40), RngStream(3, "map"), passes=4, group_size=32
        )
        assert weights.min() >= 1.0
        assert weights.max() > 1.0

    def test_per_head_mass_is_preserved(self):
        params = init_params(8, 4, RngStream(4, "i"))
        weights, _ = attnmap.attention_map_export(
            params, _bag(64), RngStream(5, "map"), passes=2, group_size=32
        )
        # each pass contributes ceil(64/32)=2 unit softmaxes per head
        np.testing.assert_allclose(weights.sum(axis=1), np.full(4, 64.0), atol=1e-9)

    def test_deterministic(self):
        params = init_params(8, 2, RngStream(6, "i"))
        a, _ = attnmap.attention_map_export(params, _bag(20), RngStream(7, "map"))
        b, _ = attnmap.attention_map_export(params, _bag(20), RngStream(7, "map"))
        np.testing.assert_array_equal(a, b)

    def test_validation(self):
        params = init_params(8, 2, RngStream(8, "i"))
        with pytest.raises(DomainError):
            attnmap.attention_map_export(params, _bag(4), RngStream(0, "m"), passes=0)
        with pytest.raises(DomainError):
            attnmap.attention_map_export(params, _bag(4), RngStream(0, "m"), group_size=0)


class TestCoordsCsv:
    def test_roundtrip(self, tmp_path):
        path = tmp_path / "coords.csv"
        path.write_text("patch,row,col\n0,0,0\n1,0,1\n2,1,0\n\n3,1,1\n")
        coords = attnmap.load_coords_csv(path)
        assert coords == {0: (0, 0), 1: (0, 1), 2: (1, 0), 3: (1, 1)}

    @pytest.mark.parametrize(
        "text,fragment",
        [
            ("x,y,z\n0,0,0\n", "header"),
            ("patch,row,col\n0,0\n", ":2:"),
            ("patch,row,col\n0,a,0\n", ":2:"),
            ("patch,row,col\n0,-1,0\n", ">= 0"),
            ("patch,row,col\n0,0,0\n0,1,1\n", "duplicate"),
        ],
    )
    def test_malformed(self, tmp_path, text, fragment):
        path = tmp_path / "bad.csv"
        path.write_text(text)
        with pytest.raises(FormatError) as err:
            attnmap.load_coords_csv(path)
        assert fragment in str(err.value)


class TestAttnmapCsv:
    def test_patch_major_rows_with_one_indexed_heads(self):
        weights = np.array([[0.5, 1.5], [1.0, 2.0]])
        lines = attnmap.attnmap_csv(weights).splitlines()
        assert lines[0] == "patch,row,col,head,weight"
        assert lines[1] == "0,,,1,0.5"
        assert lines[2] == "0,,,2,1.0"
        assert lines[3] == "1,,,1,1.5"
        assert lines[4] == "1,,,2,2.0"
        assert len(lines) == 5  # header + n*h rows

    def test_coordinates_fill_in_when_known(self):
        weights = np.ones((1, 2))
        lines = attnmap.attnmap_csv(weights, coords={0: (3, 4)}).splitlines()
        assert lines[1] == "0,3,4,1,1.0"
        assert lines[2] == "1,,,1,1.0"  # patch without coordinates


class TestGridRendering:
    def test_weights_to_grid_layout(self):
        coords = {0: (0, 0), 1: (0, 2), 2: (1, 1)}
        grid = attnmap.weights_to_grid(np.array([0.5, 1.5, 2.5]), coords)
        assert grid.shape == (2, 3)
        assert grid[0, 0] == 0.5 and grid[0, 2] == 1.5 and grid[1, 1] == 2.5
        assert grid[0, 1] == 0.0  # empty cell

    def test_out_of_range_patches_ignored(self):
        coords = {0: (0, 0), 9: (0, 1)}
        grid = attnmap.weights_to_grid(np.array([1.0]), coords)
        assert grid[0, 1] == 0.0

    def test_empty_coords_rejected(self):
        with pytest.raises(UsageError):
            attnmap.weights_to_grid(np.ones(3), {})

    def test_gray_mapping_pins(self):
        gray = attnmap.grid_to_gray(np.array([[0.0, 1.0, 2.0, 5.0, -1.0]]))
        assert gray.dtype == np.uint8
        assert gray.tolist() == [[0, 128, 255, 255, 0]]

    def test_render_pgm(self, tmp_path):
        coords = {0: (0, 0), 1: (0, 1), 2: (1, 0), 3: (1, 1)}
        path = tmp_path / "head1.pgm"
        attnmap.render_head_pgm(np.array([0.0, 1.0, 2.0, 4.0]), coords, path)
        raw = path.read_bytes()
        assert raw.startswith(b"P5")
        header, payload = raw.split(b"255\n", 1)
        assert b"2 2" in header
        assert payload == bytes([0, 128, 255, 255])
