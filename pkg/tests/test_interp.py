import numpy as np
import pytest

from abyss.errors import DomainError
from abyss.interp import InterpMethod, upsample

METHODS = [InterpMethod.NEAREST, InterpMethod.BILINEAR, InterpMethod.BICUBIC]


class TestNearest:
    def test_2x2_replication_with_tie_down(self):
        grid = np.array([[0.0, 1.0], [2.0, 3.0]])
        out = upsample(grid, 2, "nearest")
        expected = np.array([
            [0, 0, 1, 1],
            [0, 0, 1, 1],
            [2, 2, 3, 3],
            [2, 2, 3, 3],
        ], dtype=float)
        assert np.array_equal(out, expected)

    def test_exact_half_ties_round_down(self):
        # 3 -> 5 samples puts output index 1 at source 0.5 exactly
        grid = np.array([[10.0, 20.0, 30.0]])
        out = upsample(np.vstack([grid, grid, grid]), 5, "nearest")
        row = out[0]
        src = np.arange(15) * 2.0 / 14.0
        for i, p in enumerate(src):
            expected_idx = int(np.ceil(p - 0.5))
            assert row[i] == grid[0, expected_idx]

    def test_outputs_subset_of_inputs(self):
        rng = np.random.default_rng(3)
        grid = rng.standard_normal((5, 7))
        out = upsample(grid, 3, "nearest")
        assert set(np.round(out.ravel(), 12)) <= set(np.round(grid.ravel(), 12))


class TestBilinear:
    def test_1d_row_thirds(self):
        grid = np.array([[0.0, 1.0]])
        out = upsample(grid, 2, "bilinear")
        assert np.allclose(out[0], [0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0], atol=1e-15)

    def test_affine_fields_exact(self):
        h, w = 6, 9
        yy, xx = np.mgrid[0:h, 0:w].astype(float)
        for a, b, c in [(0.3, 0.02, -0.07), (2.0, -1.0, 0.5)]:
            grid = a + b * xx + c * yy
            out = upsample(grid, 3, "bilinear")
            oy, ox = np.mgrid[0:3 * h, 0:3 * w].astype(float)
            sy = oy * (h - 1) / (3 * h - 1)
            sx = ox * (w - 1) / (3 * w - 1)
            expected = a + b * sx + c * sy
            assert np.abs(out - expected).max() <= 1e-12


class TestBicubic:
    def test_cubic_polynomial_exact_in_interior(self):
        # oracle: evaluate the polynomial at the align-corners positions
        n = 12
        x = np.arange(n, dtype=float)
        p = lambda t: t ** 3 - 2.0 * t ** 2 + 0.5 * t - 1.0
        grid = np.tile(p(x), (4, 1))
        out = upsample(grid, 2, "bicubic")
        pos = np.arange(2 * n) * (n - 1) / (2 * n - 1)
        interior = (pos >= 1.0) & (pos <= n - 2.0)
        expected = p(pos)
        err = np.abs(out[0, interior] - expected[interior]).max()
        assert err <= 1e-9

    def test_node_values_reproduced(self):
        rng = np.random.default_rng(11)
        grid = rng.standard_normal((5, 5))
        out = upsample(grid, 3, "bicubic")
        # output positions that land exactly on source nodes keep their value
        assert out[0, 0] == pytest.approx(grid[0, 0], abs=1e-12)
        assert out[-1, -1] == pytest.approx(grid[-1, -1], abs=1e-12)


class TestAllMethods:
    @pytest.mark.parametrize("method", METHODS)
    def test_identity_at_scale_one(self, method):
        rng = np.random.default_rng(5)
        grid = rng.standard_normal((6, 8))
        out = upsample(grid, 1, method)
        assert np.array_equal(out, grid)

    @pytest.mark.parametrize("method", METHODS)
    def test_constant_preserved(self, method):
        grid = np.full((4, 4), 3.25)
        out = upsample(grid, 4, method)
        assert np.allclose(out, 3.25, atol=1e-12)

    @pytest.mark.parametrize("method", METHODS)
    def test_output_shape(self, method):
        out = upsample(np.zeros((3, 5)), 4, method)
        assert out.shape == (12, 20)

    def test_scale_zero_rejected(self):
        with pytest.raises(DomainError):
            upsample(np.zeros((4, 4)), 0, "bilinear")

    def test_unknown_method_rejected(self):
        with pytest.raises(DomainError):
            upsample(np.zeros((4, 4)), 2, "lanczos")
