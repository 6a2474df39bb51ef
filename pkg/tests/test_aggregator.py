import numpy as np
import pytest

from genalign import aggregator as agg
from genalign import ndiff
from genalign.ndiff import Tensor

TINY = agg.AggregatorConfig(depth=2, heads=2, embed_dim=16, mlp_dim=32,
                            input_dim=8, max_cells=32)


@pytest.fixture
def tiny_params(rng):
    return agg.init_params(TINY, rng)


def cls_of(cells, params, mask=np.empty(0, np.int64)):
    return agg.forward(cells, mask, params, TINY).cls.data[0]


class TestForward:
    def test_permutation_invariance_f32(self, tiny_params, rng):
        for _ in range(50):
            n = int(rng.integers(2, 24))
            cells = rng.standard_normal((n, TINY.input_dim)).astype(np.float32)
            base = cls_of(cells, tiny_params)
            perm = cls_of(cells[rng.permutation(n)], tiny_params)
            rel = np.linalg.norm(base - perm) / np.linalg.norm(base)
            assert rel <= 1e-5

    def test_permutation_invariance_f64(self, rng):
        params = agg.init_params(TINY, np.random.default_rng(7), dtype=np.float64)
        for _ in range(10):
            n = int(rng.integers(2, 24))
            cells = rng.standard_normal((n, TINY.input_dim))
            base = agg.forward(cells, np.empty(0, np.int64), params, TINY).cls.data[0]
            perm = agg.forward(cells[rng.permutation(n)], np.empty(0, np.int64),
                               params, TINY).cls.data[0]
            rel = np.linalg.norm(base - perm) / np.linalg.norm(base)
            assert rel <= 1e-10

    def test_duplicating_a_cell_changes_cls(self, tiny_params, rng):
        # attention re-weights on duplication; mean pooling would not notice
        cells = rng.standard_normal((6, TINY.input_dim)).astype(np.float32)
        duplicated = np.vstack([cells, cells[:1]])
        base = cls_of(cells, tiny_params)
        dup = cls_of(duplicated, tiny_params)
        assert np.linalg.norm(base - dup) / np.linalg.norm(base) > 1e-4

    def test_single_cell_bag(self, tiny_params, rng):
        cells = rng.standard_normal((1, TINY.input_dim)).astype(np.float32)
        out = agg.forward(cells, np.empty(0, np.int64), tiny_params, TINY)
        assert out.cls.shape == (1, TINY.embed_dim)
        assert out.tokens.shape == (1, TINY.embed_dim)
        assert np.isfinite(out.cls.data).all()

    def test_fully_masked_bag_ignores_cell_values(self, tiny_params, rng):
        n = 5
        mask = np.arange(n)
        a = rng.standard_normal((n, TINY.input_dim)).astype(np.float32)
        b = rng.standard_normal((n, TINY.input_dim)).astype(np.float32)
        out_a = agg.forward(a, mask, tiny_params, TINY)
        out_b = agg.forward(b, mask, tiny_params, TINY)
        assert np.isfinite(out_a.cls.data).all()
        assert np.allclose(out_a.cls.data, out_b.cls.data)
        assert np.allclose(out_a.tokens.data, out_b.tokens.data)

    def test_empty_bag_rejected(self, tiny_params):
        with pytest.raises(ValueError, match="empty"):
            agg.forward(np.zeros((0, TINY.input_dim), np.float32),
                        np.empty(0, np.int64), tiny_params, TINY)

    def test_width_mismatch_rejected(self, tiny_params):
        with pytest.raises(ValueError, match="input_dim"):
            agg.forward(np.zeros((3, 5), np.float32), np.empty(0, np.int64),
                        tiny_params, TINY)

    def test_mask_out_of_range_rejected(self, tiny_params, rng):
        cells = rng.standard_normal((3, TINY.input_dim)).astype(np.float32)
        with pytest.raises(ValueError, match="mask"):
            agg.forward(cells, np.array([3]), tiny_params, TINY)

    def test_cls_gradient_wrt_cells_passes_grad_check(self, rng):
        params = agg.init_params(TINY, np.random.default_rng(3), dtype=np.float64)
        probe = Tensor(rng.standard_normal((1, TINY.embed_dim)))
        cells = Tensor(rng.standard_normal((4, TINY.input_dim)))

        def f(x):
            out = agg.forward(x, np.array([1]), params, TINY)
            return ndiff.mean(ndiff.mul(out.cls, probe))

        report = ndiff.grad_check(f, cells, eps=1e-5, tol=1e-4)
        assert report.passed, report.max_rel_err


class TestSampleViews:
    def test_paper_scale_counts(self, rng):
        bag = agg.CellBag("p0", rng.standard_normal((500, 4)).astype(np.float32))
        views = agg.sample_views(bag, 2, 8, 0.3, rng)
        assert [v.kind for v in views] == ["global"] * 2 + ["local"] * 8
        assert all(len(v.indices) == 350 for v in views[:2])
        assert all(len(v.indices) == 100 for v in views[2:])

    def test_single_cell_bag_views(self, rng):
        bag = agg.CellBag("p0", rng.standard_normal((1, 4)).astype(np.float32))
        views = agg.sample_views(bag, 2, 8, 0.0, rng)
        assert all(len(v.indices) == 1 for v in views)

    def test_mask_ratio_zero(self, rng):
        bag = agg.CellBag("p0", rng.standard_normal((40, 4)).astype(np.float32))
        views = agg.sample_views(bag, 2, 4, 0.0, rng)
        assert all(v.mask.size == 0 for v in views)

    def test_mask_size_and_containment(self, rng):
        bag = agg.CellBag("p0", rng.standard_normal((50, 4)).astype(np.float32))
        views = agg.sample_views(bag, 2, 2, 0.3, rng)
        for v in views:
            assert v.mask.size == int(0.3 * len(v.indices))
            assert v.mask.size == len(set(v.mask.tolist()))
            assert all(0 <= m < len(v.indices) for m in v.mask)
            assert len(set(v.indices.tolist())) == len(v.indices)  # no replacement

    def test_seeded_reproducibility(self):
        cells = np.random.default_rng(0).standard_normal((64, 4)).astype(np.float32)
        bag = agg.CellBag("p0", cells)
        a = agg.sample_views(bag, 2, 8, 0.3, np.random.default_rng(42))
        b = agg.sample_views(bag, 2, 8, 0.3, np.random.default_rng(42))
        for va, vb in zip(a, b):
            assert np.array_equal(va.indices, vb.indices)
            assert np.array_equal(va.mask, vb.mask)

    def test_cap_bag(self, rng):
        bag = agg.CellBag("p0", rng.standard_normal((100, 4)).astype(np.float32))
        capped = agg.cap_bag(bag, 64, rng)
        assert capped.n_cells == 64
        small = agg.CellBag("p1", rng.standard_normal((10, 4)).astype(np.float32))
        assert agg.cap_bag(small, 64, rng) is small


class TestConfig:
    def test_mlp_dim_defaults_to_4x(self):
        cfg = agg.AggregatorConfig(embed_dim=32, heads=4, input_dim=8)
        assert cfg.mlp_dim == 128

    def test_head_divisibility_enforced(self):
        with pytest.raises(ValueError, match="divisible"):
            agg.AggregatorConfig(embed_dim=30, heads=4, input_dim=8)

    def test_bag_validation(self):
        with pytest.raises(ValueError, match="non-finite"):
            agg.CellBag("p", np.array([[np.nan, 1.0]], dtype=np.float32))
