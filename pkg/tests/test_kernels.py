"""Hybrid kernel and MK-MMD distance tests."""

import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from fdcheck import fd_input_gradcheck
from ivfuse.config import KernelConfig
from ivfuse.errors import DimensionError, ValidationError
from ivfuse.kernels import (KernelSpec, bandwidth_ladder, gaussian_multikernel,
                            hybrid_gram, hybrid_kernel, laplacian_bandwidth,
                            laplacian_multikernel, median_heuristic_bandwidths,
                            mk_mmd, mmd_from_feature_maps, spec_from_config)

# frozen from direct scalar evaluation of the kernel formulas
EXP_HALF = math.exp(-0.5)          # 0.6065306597126334
EXP_SQRT2 = math.exp(-math.sqrt(2.0))  # 0.2431167344342142

SINGLE_GAUSS = KernelSpec(gauss_bandwidths=(1.0,), gauss_weights=(1.0,),
                          lap_bandwidths=(1.0,), lap_weights=(1.0,), mix=(1.0, 0.0))
SINGLE_LAP = KernelSpec(gauss_bandwidths=(1.0,), gauss_weights=(1.0,),
                        lap_bandwidths=(laplacian_bandwidth(1.0),), lap_weights=(1.0,),
                        mix=(0.0, 1.0))


def default_spec():
    return spec_from_config(KernelConfig())


class TestKernelSpec:
    def test_default_laplacian_bandwidths(self):
        spec = default_spec()
        assert spec.lap_bandwidths == pytest.approx(
            tuple(1.0 / math.sqrt(2.0 * g) for g in (0.1, 1.0, 5.0)))

    def test_weights_must_sum_to_one(self):
        with pytest.raises(ValidationError):
            KernelSpec(gauss_weights=(0.3, 0.3, 0.3, 0.3, 0.3))

    def test_bandwidths_must_be_positive(self):
        with pytest.raises(ValidationError):
            KernelSpec(gauss_bandwidths=(1.0, 0.0, 1.0, 1.0, 1.0))

    def test_mix_must_sum_to_one(self):
        with pytest.raises(ValidationError):
            KernelSpec(mix=(0.7, 0.7))

    def test_config_mix_degenerates(self):
        spec = spec_from_config(KernelConfig(mix_c1=1.0))
        assert spec.mix == (1.0, 0.0)


class TestScalarKernels:
    def test_gaussian_unit_distance(self):
        a, b = np.zeros(3), np.array([1.0, 0.0, 0.0])
        assert float(gaussian_multikernel(a, b, SINGLE_GAUSS)) == pytest.approx(EXP_HALF, abs=1e-9)

    def test_laplacian_unit_distance(self):
        a, b = np.zeros(3), np.array([0.0, 1.0, 0.0])
        assert float(laplacian_multikernel(a, b, SINGLE_LAP)) == pytest.approx(EXP_SQRT2, abs=1e-9)

    def test_self_similarity_is_one(self):
        rng = np.random.default_rng(0)
        spec = default_spec()
        for _ in range(20):
            a = rng.normal(size=8)
            assert float(hybrid_kernel(a, a, spec)) == pytest.approx(1.0, abs=1e-6)

    def test_symmetry(self):
        rng = np.random.default_rng(1)
        spec = default_spec()
        for _ in range(100):
            a, b = rng.normal(size=(2, 5))
            k_ab = float(hybrid_kernel(a, b, spec))
            k_ba = float(hybrid_kernel(b, a, spec))
            assert abs(k_ab - k_ba) <= 1e-6

    def test_laplacian_monotone_in_distance(self):
        spec = default_spec()
        a = np.zeros(4)
        values = [float(laplacian_multikernel(a, np.array([d, 0, 0, 0]), spec))
                  for d in (0.1, 0.5, 1.0, 2.0, 5.0)]
        assert all(x > y for x, y in zip(values, values[1:]))

    def test_hybrid_with_full_gauss_mix_reduces(self):
        rng = np.random.default_rng(2)
        spec = spec_from_config(KernelConfig(mix_c1=1.0))
        for _ in range(10):
            a, b = rng.normal(size=(2, 6))
            assert float(hybrid_kernel(a, b, spec)) == pytest.approx(
                float(gaussian_multikernel(a, b, spec)), abs=1e-12)

    def test_values_in_unit_interval(self):
        rng = np.random.default_rng(3)
        spec = default_spec()
        for _ in range(50):
            a, b = rng.normal(scale=3.0, size=(2, 4))
            v = float(hybrid_kernel(a, b, spec))
            assert 0.0 < v <= 1.0

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionError):
            hybrid_kernel(np.zeros(3), np.zeros(4), default_spec())


class TestGram:
    @pytest.mark.parametrize("n", [20, 50])
    def test_gram_symmetric_psd(self, n):
        rng = np.random.default_rng(4)
        x = rng.normal(size=(n, 6))
        gram = hybrid_gram(x, x, default_spec()).numpy()
        assert np.abs(gram - gram.T).max() <= 1e-6
        assert np.linalg.eigvalsh((gram + gram.T) / 2).min() >= -1e-6

    @pytest.mark.parametrize("spec", [
        spec_from_config(KernelConfig(mix_c1=1.0)),
        spec_from_config(KernelConfig(mix_c1=0.0)),
    ])
    def test_component_grams_psd(self, spec):
        rng = np.random.default_rng(5)
        x = rng.normal(size=(30, 4))
        gram = hybrid_gram(x, x, spec).numpy()
        assert np.linalg.eigvalsh((gram + gram.T) / 2).min() >= -1e-6


class TestMedianHeuristic:
    def test_two_points_distance_four(self):
        pts = np.array([[0.0, 0.0], [0.0, 4.0]])
        assert median_heuristic_bandwidths(pts) == [1.0, 2.0, 4.0, 8.0, 16.0]

    def test_identical_points_fallback(self):
        assert median_heuristic_bandwidths(np.zeros((6, 3))) == [0.25, 0.5, 1.0, 2.0, 4.0]

    def test_pools_multiple_sets(self):
        a = np.zeros((1, 2))
        b = np.array([[4.0, 0.0]])
        assert median_heuristic_bandwidths([a, b]) == [1.0, 2.0, 4.0, 8.0, 16.0]

    @given(scale=st.floats(min_value=1e-3, max_value=1e3))
    @settings(max_examples=30, deadline=None)
    def test_scale_equivariance(self, scale):
        rng = np.random.default_rng(6)
        pts = rng.normal(size=(10, 3))
        base = np.array(median_heuristic_bandwidths(pts))
        scaled = np.array(median_heuristic_bandwidths(pts * scale))
        assert scaled == pytest.approx(base * scale, rel=1e-9)

    def test_needs_two_vectors(self):
        with pytest.raises(ValidationError):
            median_heuristic_bandwidths(np.zeros((1, 3)))

    def test_subsampled_pairs_deterministic(self):
        rng_points = np.random.default_rng(7)
        pts = rng_points.normal(size=(100, 3))  # 4950 pairs > max_pairs
        a = median_heuristic_bandwidths(pts, rng=np.random.default_rng(1))
        b = median_heuristic_bandwidths(pts, rng=np.random.default_rng(1))
        assert a == b

    def test_ladder_shape(self):
        assert bandwidth_ladder(2.0, 5) == (0.5, 1.0, 2.0, 4.0, 8.0)


class TestMkMmd:
    def test_identical_sets_vanish(self):
        rng = np.random.default_rng(8)
        x = rng.normal(size=(40, 5))
        assert float(mk_mmd(x, x.copy(), default_spec())) <= 1e-6

    def test_singleton_identity(self):
        spec = default_spec()
        x = np.array([[1.0, 2.0, -1.0]])
        y = np.array([[0.5, -0.5, 2.0]])
        expected = 2.0 * (1.0 - float(hybrid_kernel(x[0], y[0], spec)))
        assert float(mk_mmd(x, y, spec)) == pytest.approx(expected, abs=1e-6)

    def test_symmetry(self):
        rng = np.random.default_rng(9)
        spec = default_spec()
        x = rng.normal(size=(15, 4))
        y = rng.normal(size=(20, 4)) + 0.5
        assert float(mk_mmd(x, y, spec)) == pytest.approx(float(mk_mmd(y, x, spec)), abs=1e-6)

    def test_nonnegative(self):
        rng = np.random.default_rng(10)
        spec = default_spec()
        for _ in range(20):
            x = rng.normal(size=(10, 3))
            y = rng.normal(size=(12, 3))
            assert float(mk_mmd(x, y, spec)) >= 0.0

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionError):
            mk_mmd(np.zeros((3, 2)), np.zeros((3, 4)), default_spec())

    def test_empty_set_rejected(self):
        with pytest.raises(ValidationError):
            mk_mmd(np.zeros((0, 2)), np.zeros((3, 2)), default_spec())

    def test_mean_shift_monotonicity(self):
        # Monte-Carlo oracle: distance with a 3-sigma gap beats the null gap
        rng = np.random.default_rng(11)
        spec = default_spec()
        wins = 0
        for _ in range(100):
            x = rng.normal(size=(200, 4))
            y_null = rng.normal(size=(200, 4))
            y_shift = rng.normal(size=(200, 4))
            y_shift[:, 0] += 3.0
            if float(mk_mmd(x, y_shift, spec)) > float(mk_mmd(x, y_null, spec)):
                wins += 1
        assert wins >= 99

    def test_permutation_sanity(self):
        # random re-splits of the pooled data score below the true split
        rng = np.random.default_rng(12)
        spec = default_spec()
        x = rng.normal(size=(50, 4))
        y = rng.normal(size=(50, 4))
        y[:, 0] += 3.0
        true_value = float(mk_mmd(x, y, spec))
        pooled = np.concatenate([x, y])
        below = 0
        for _ in range(100):
            perm = rng.permutation(100)
            if float(mk_mmd(pooled[perm[:50]], pooled[perm[50:]], spec)) < true_value:
                below += 1
        assert below >= 95

    def test_gradient_matches_finite_differences(self):
        spec = default_spec()
        gen = torch.Generator().manual_seed(13)
        x = torch.randn(5, 3, generator=gen, dtype=torch.float64)
        y = torch.randn(5, 3, generator=gen, dtype=torch.float64) + 0.4
        fd_input_gradcheck(lambda a, b: mk_mmd(a, b, spec), [x, y], n_samples=10)


class TestMmdFromFeatureMaps:
    def test_identical_taps_vanish(self):
        gen = torch.Generator().manual_seed(14)
        taps = [torch.randn(2, 8, 6, 6, generator=gen) for _ in range(3)]
        value = mmd_from_feature_maps(taps, [t.clone() for t in taps], default_spec())
        assert float(value) <= 1e-6

    def test_constant_features_reduce_to_singleton_formula(self):
        spec = default_spec()
        c = 8
        g1 = torch.full((1, c, 4, 4), 0.3, dtype=torch.float64)
        g2 = torch.full((1, c, 4, 4), 0.9, dtype=torch.float64)
        value = mmd_from_feature_maps([g1], [g2], spec, adapt_bandwidths=False)
        a = np.full(c, 0.3)
        b = np.full(c, 0.9)
        expected = 2.0 * (1.0 - float(hybrid_kernel(a, b, spec)))
        assert float(value) == pytest.approx(expected, abs=1e-6)

    def test_random_inputs_finite_nonnegative(self):
        gen = torch.Generator().manual_seed(15)
        taps_ir = [torch.randn(2, 8, 20, 20, generator=gen) for _ in range(3)]
        taps_vis = [torch.randn(2, 8, 20, 20, generator=gen) + 0.5 for _ in range(3)]
        value = mmd_from_feature_maps(taps_ir, taps_vis, default_spec(), n_positions=64,
                                      generator=torch.Generator().manual_seed(0))
        assert math.isfinite(float(value)) and float(value) >= 0.0

    def test_position_subsampling_deterministic_under_generator(self):
        gen = torch.Generator().manual_seed(16)
        taps_ir = [torch.randn(1, 4, 32, 32, generator=gen)]
        taps_vis = [torch.randn(1, 4, 32, 32, generator=gen)]
        a = mmd_from_feature_maps(taps_ir, taps_vis, default_spec(), n_positions=16,
                                  generator=torch.Generator().manual_seed(5))
        b = mmd_from_feature_maps(taps_ir, taps_vis, default_spec(), n_positions=16,
                                  generator=torch.Generator().manual_seed(5))
        assert float(a) == float(b)

    def test_tap_count_mismatch(self):
        t = torch.zeros(1, 4, 8, 8)
        with pytest.raises(DimensionError):
            mmd_from_feature_maps([t, t], [t], default_spec())

    def test_tap_shape_mismatch(self):
        with pytest.raises(DimensionError):
            mmd_from_feature_maps([torch.zeros(1, 4, 8, 8)], [torch.zeros(1, 4, 4, 4)],
                                  default_spec())
