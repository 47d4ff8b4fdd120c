"""Sinusoidal grids and factorized relative embeddings."""

import numpy as np
import pytest

from vip.positional import (RelativeEmbedding, offset_index_map, relative_embedding,
                            relative_logits, sinusoidal_2d, sinusoidal_table)
from vip.tensor import DimensionError, constant, parameter

from helpers import check_grad, rel_err


class TestSinusoidal:
    def test_single_position_pattern(self):
        row = sinusoidal_table(1, 1, 8, dtype=np.float64)[0]
        # position 0: every sin channel is 0, every cos channel is 1
        np.testing.assert_array_equal(row[0::2], np.zeros(4))
        np.testing.assert_array_equal(row[1::2], np.ones(4))

    def test_range_bounded(self):
        table = sinusoidal_table(56, 56, 64)
        assert table.shape == (56 * 56, 64)
        assert table.min() >= -1.0 and table.max() <= 1.0

    def test_spot_values_match_direct_formula(self):
        h, w, c = 5, 7, 16
        table = sinusoidal_table(h, w, c, dtype=np.float64)
        half = c // 2
        for (y, x) in [(0, 0), (2, 3), (4, 6), (1, 5)]:
            row = table[y * w + x]
            for j in range(half // 2):
                freq = 10000.0 ** (-2.0 * j / half)
                assert abs(row[2 * j] - np.sin(y * freq)) < 1e-12
                assert abs(row[2 * j + 1] - np.cos(y * freq)) < 1e-12
                assert abs(row[half + 2 * j] - np.sin(x * freq)) < 1e-12
                assert abs(row[half + 2 * j + 1] - np.cos(x * freq)) < 1e-12

    def test_pure_function(self):
        a = sinusoidal_table(9, 4, 32)
        b = sinusoidal_table(9, 4, 32)
        np.testing.assert_array_equal(a, b)
        g1 = sinusoidal_2d(9, 4, 32)
        g2 = sinusoidal_2d(9, 4, 32)
        np.testing.assert_array_equal(g1.values.data, g2.values.data)

    def test_channel_divisibility_enforced(self):
        with pytest.raises(DimensionError):
            sinusoidal_table(2, 2, 6)

    def test_grid_metadata(self):
        grid = sinusoidal_2d(3, 5, 8)
        assert (grid.height, grid.width, grid.channels) == (3, 5, 8)
        assert grid.values.shape == (15, 8)


def _brute_force_relative(q, r_h, r_w, k):
    """Loop oracle: logits[g, a, b] = q[g, a] . concat(r_h[dy], r_w[dx])."""
    g, kk, d = q.shape
    c = g * d
    half = c // 2
    out = np.zeros((g, kk, kk))
    for head in range(g):
        for a in range(kk):
            ay, ax = divmod(a, k)
            for b in range(kk):
                by, bx = divmod(b, k)
                vec = np.concatenate([r_h[by - ay + k - 1], r_w[bx - ax + k - 1]])
                out[head, a, b] = q[head, a] @ vec[head * d:(head + 1) * d]
    return out


class TestRelativeLogits:
    def test_zero_embedding_gives_zero_logits(self):
        rng = np.random.default_rng(0)
        k, c, g = 3, 8, 2
        emb = RelativeEmbedding(k, constant(np.zeros((2 * k - 1, c // 2))),
                                constant(np.zeros((2 * k - 1, c // 2))))
        q = constant(rng.normal(size=(g, k * k, c // g)))
        out = relative_logits(q, emb)
        np.testing.assert_array_equal(out.data, np.zeros((g, k * k, k * k)))

    def test_window_one(self):
        rng = np.random.default_rng(1)
        c = 4
        r_h = rng.normal(size=(1, 2))
        r_w = rng.normal(size=(1, 2))
        emb = RelativeEmbedding(1, constant(r_h), constant(r_w))
        q = rng.normal(size=(1, 1, c))
        out = relative_logits(constant(q), emb)
        expected = q[0, 0] @ np.concatenate([r_h[0], r_w[0]])
        assert rel_err(out.data[0, 0, 0], expected) < 1e-12

    @pytest.mark.parametrize("k,groups", [(2, 1), (2, 2), (3, 2), (4, 4)])
    def test_against_offset_enumeration_oracle(self, k, groups):
        rng = np.random.default_rng(2 + k + groups)
        c = 8
        d = c // groups
        r_h = rng.normal(size=(2 * k - 1, c // 2))
        r_w = rng.normal(size=(2 * k - 1, c // 2))
        emb = RelativeEmbedding(k, constant(r_h), constant(r_w))
        q = rng.normal(size=(groups, k * k, d))
        got = relative_logits(constant(q), emb).data
        expected = _brute_force_relative(q, r_h, r_w, k)
        assert rel_err(got, expected) < 1e-12

    def test_translation_property(self):
        """Logits depend only on the offset, never on absolute position."""
        rng = np.random.default_rng(7)
        k, c = 4, 8
        emb = relative_embedding(k, c, rng, dtype=np.float64)
        # one query vector copied to every position: rows become functions of
        # the offset alone, so equal offsets must give equal logits
        q_vec = rng.normal(size=c)
        q = constant(np.tile(q_vec, (1, k * k, 1)))
        logits = relative_logits(q, emb).data[0]
        idx = offset_index_map(k)
        for a in range(k * k):
            for b in range(k * k):
                same = idx == idx[a, b]
                np.testing.assert_allclose(logits[same], logits[a, b], atol=1e-12)

    def test_window_mismatch_rejected(self):
        rng = np.random.default_rng(8)
        emb = relative_embedding(3, 8, rng)
        q = constant(np.zeros((1, 4, 8), dtype=np.float32))  # 2x2 window
        with pytest.raises(DimensionError):
            relative_logits(q, emb)

    def test_gradients(self):
        rng = np.random.default_rng(9)
        k, c, g = 3, 8, 2
        r_h = parameter(rng.normal(size=(2 * k - 1, c // 2)), dtype=np.float64)
        r_w = parameter(rng.normal(size=(2 * k - 1, c // 2)), dtype=np.float64)
        q = parameter(rng.normal(size=(2, g, k * k, c // g)), dtype=np.float64)
        w = constant(rng.normal(size=(2, g, k * k, k * k)))

        def f():
            emb = RelativeEmbedding(k, r_h, r_w)
            return (relative_logits(q, emb) * w).sum()

        check_grad(f, {"q": q, "r_h": r_h, "r_w": r_w}, rng)

    def test_table_row_count_enforced(self):
        with pytest.raises(DimensionError):
            RelativeEmbedding(3, constant(np.zeros((4, 4))), constant(np.zeros((5, 4))))
