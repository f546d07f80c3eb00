import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from deblurnet.errors import DimensionError, ShapeError
from deblurnet.imaging import convolve_circular, identity_kernel
from deblurnet.pipeline import build_model, gaussian_psf
from deblurnet.spatial import (LocalKernelField, build_motion_basis, build_patch_grid,
                               eff_restore, kernel_mosaic, local_kernels_direct,
                               motion_coefficients, motion_displacement, patch_count,
                               project_and_threshold, spatially_varying_deblur, synthesize_field,
                               threshold_top)
from deblurnet.validation import is_simplex


class TestPatchGrid:
    def test_patch_count(self):
        assert patch_count(100, 200, 0.5) == 1
        assert patch_count(100, 50, 0.5) == 3
        assert patch_count(100, 50, 0.0) == 2
        assert patch_count(101, 50, 0.0) == 3

    def test_covers_image(self):
        g = build_patch_grid((70, 90), 32, 0.5)
        assert g.starts_y[0] == 0 and g.starts_y[-1] + 32 == 70
        assert g.starts_x[-1] + 32 == 90

    @settings(max_examples=40, deadline=None)
    @given(st.integers(10, 120), st.integers(10, 120), st.integers(3, 40),
           st.floats(0.0, 0.9))
    def test_partition_of_unity(self, H, W, p, overlap):
        p = min(p, H, W)
        g = build_patch_grid((H, W), p, overlap)
        np.testing.assert_allclose(g.window_sum(), 1.0, atol=1e-12)

    def test_single_patch_window_is_one(self):
        g = build_patch_grid((30, 40), (30, 40))
        assert len(g) == 1
        np.testing.assert_array_equal(g.window(0), 1.0)

    def test_windows_positive(self):
        g = build_patch_grid((64, 64), 24, 0.5)
        assert all(g.window(r).min() > 0 for r in range(len(g)))

    def test_centers(self):
        g = build_patch_grid((40, 40), 20, 0.0)
        assert g.center(0) == (9.5, 9.5)
        assert g.center(3) == (29.5, 29.5)

    @pytest.mark.parametrize("kw", [dict(patch_size=0), dict(patch_size=50),
                                    dict(patch_size=8, overlap=1.0)])
    def test_invalid(self, kw):
        with pytest.raises(DimensionError):
            build_patch_grid((40, 40), **kw)


class TestThreshold:
    def test_keeps_largest_magnitudes(self):
        out = threshold_top(np.array([0.1, -3.0, 2.0, 0.5]), 0.5)
        np.testing.assert_array_equal(out, [0, -3.0, 2.0, 0])

    def test_ties_prefer_lower_index(self):
        np.testing.assert_array_equal(threshold_top(np.ones(4), 0.25), [1, 0, 0, 0])

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 300), st.floats(1e-3, 1.0), st.integers(0, 2**32 - 1))
    def test_count(self, n, eta, seed):
        mu = np.random.default_rng(seed).standard_normal(n)
        assert np.count_nonzero(threshold_top(mu, eta)) == math.ceil(eta * n)

    @pytest.mark.parametrize("eta", [0.0, 1.5, -0.1])
    def test_invalid_eta(self, eta):
        with pytest.raises(ValueError):
            threshold_top(np.ones(3), eta)


class TestLocalKernels:
    def test_uniform_blur_recovered_per_patch(self, rng):
        k = gaussian_psf(0.8, 2)
        x = rng.standard_normal((2, 64, 64))
        y = np.stack([convolve_circular(c, k) for c in x])
        g = build_patch_grid((64, 64), 32, 0.5)
        fld = local_kernels_direct(x, y, g, 5, beta_k=1e-12)
        assert fld.kernels.shape == (len(g), 5, 5)
        assert np.abs(fld.kernels - k).max() < 0.05

    def test_zero_features_degenerate(self):
        g = build_patch_grid((32, 32), 16, 0.5)
        fld = local_kernels_direct(np.zeros((32, 32)), np.zeros((32, 32)), g, 5)
        assert fld.degenerate.all() and not fld.kernels.any()

    def test_shape_checks(self, rng):
        g = build_patch_grid((32, 32), 16, 0.5)
        with pytest.raises(ShapeError):
            local_kernels_direct(rng.random((30, 32)), rng.random((30, 32)), g, 5)
        with pytest.raises(DimensionError):
            local_kernels_direct(rng.random((32, 32)), rng.random((32, 32)), g, 17)

    def test_field_eta_validated(self):
        with pytest.raises(ValueError):
            LocalKernelField(np.zeros((1, 3, 3)), eta=0.0)


class TestMotionBasis:
    def test_translation_displacement(self):
        assert motion_displacement((2.0, -1.0, 0.0), (5.0, 7.0), (0.0, 0.0)) == (-1.0, 2.0)

    def test_rotation_fixes_center(self):
        d = motion_displacement((0.0, 0.0, 0.3), (10.0, 10.0), (10.0, 10.0))
        np.testing.assert_allclose(d, 0.0, atol=1e-15)

    def test_pure_translation_columns(self):
        g = build_patch_grid((40, 40), 20, 0.5)
        b = build_motion_basis((40, 40), g, 5, motions=[(0, 0, 0), (1, 0, 0)])
        k0 = b.column_kernels(0)
        assert all(k[2, 2] == 1.0 for k in k0)
        assert all(k[2, 3] == 1.0 for k in b.column_kernels(1))

    def test_rotation_displacement_grows_with_radius(self):
        th = np.deg2rad(1.0)
        for radius in (5.0, 20.0, 40.0):
            d = motion_displacement((0.0, 0.0, th), (50.0 + radius, 50.0), (50.0, 50.0))
            assert np.hypot(*d) == pytest.approx(th * radius, rel=1e-3)

    def test_identity_motion_centered_delta(self):
        g = build_patch_grid((60, 60), 20, 0.5)
        b = build_motion_basis((60, 60), g, 5, motions=[(0, 0, 0)])
        np.testing.assert_array_equal(b.column_kernels(0), np.repeat(identity_kernel(5)[None],
                                                                     len(g), axis=0))

    def test_columns_are_valid_kernels(self):
        g = build_patch_grid((64, 64), 32, 0.5)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            b = build_motion_basis((64, 64), g, 7)
        for m in range(0, len(b.motions), 37):
            k = b.column_kernels(m)
            assert k.min() >= 0 and np.all(k.sum(axis=(1, 2)) <= 1 + 1e-9)

    def test_out_of_support_excluded(self):
        g = build_patch_grid((40, 40), 20, 0.5)
        with pytest.warns(RuntimeWarning):
            b = build_motion_basis((40, 40), g, 5, motions=[(0, 0, 0), (5, 0, 0)])
        assert b.motions == [(0.0, 0.0, 0.0)] and b.excluded == [(5.0, 0.0, 0.0)]

    def test_empty_motions(self):
        g = build_patch_grid((40, 40), 20, 0.5)
        with pytest.raises(ValueError):
            build_motion_basis((40, 40), g, 5, motions=[])

    @pytest.mark.parametrize("method", ["nnls", "orthonormal"])
    def test_basis_member_reproduced(self, method):
        g = build_patch_grid((48, 48), 24, 0.5)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            b = build_motion_basis((48, 48), g, 5)
        fld = LocalKernelField(b.column_kernels(7).copy())
        mu = motion_coefficients(fld, b, method)
        np.testing.assert_allclose(synthesize_field(mu, b, method), fld.kernels, atol=1e-8)
        out = project_and_threshold(fld, b, 1.0, method)
        np.testing.assert_allclose(out.kernels, fld.kernels, atol=1e-8)

    def test_single_motion_dominates(self):
        g = build_patch_grid((64, 64), 32, 0.5)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            b = build_motion_basis((64, 64), g, 7)
        for m in (3, len(b.motions) // 2, len(b.motions) - 5):
            mu = motion_coefficients(LocalKernelField(b.column_kernels(m).copy()), b)
            assert abs(mu[m]) >= 0.9 * np.abs(mu).sum()

    def test_orthonormal_projection_idempotent(self, rng):
        g = build_patch_grid((64, 64), 32, 0.5)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            b = build_motion_basis((64, 64), g, 7)
        fld = LocalKernelField(rng.random((len(g), 7, 7)))
        mu1 = motion_coefficients(fld, b, "orthonormal")
        once = LocalKernelField(synthesize_field(mu1, b, "orthonormal"))
        mu2 = motion_coefficients(once, b, "orthonormal")
        assert np.abs(mu2 - mu1).max() < 1e-8

    def test_zero_field_gives_identity(self):
        g = build_patch_grid((40, 40), 20, 0.5)
        b = build_motion_basis((40, 40), g, 3, motions=[(0, 0, 0), (1, 0, 0)])
        out = project_and_threshold(LocalKernelField(np.zeros((len(g), 3, 3))), b)
        assert out.degenerate.all()
        np.testing.assert_array_equal(out.kernels[0], identity_kernel(3))

    def test_dimension_mismatch(self):
        g = build_patch_grid((40, 40), 20, 0.5)
        b = build_motion_basis((40, 40), g, 3, motions=[(0, 0, 0)])
        with pytest.raises(ShapeError):
            project_and_threshold(LocalKernelField(np.zeros((2, 3, 3))), b)

    def test_unknown_method(self):
        g = build_patch_grid((40, 40), 20, 0.5)
        b = build_motion_basis((40, 40), g, 3, motions=[(0, 0, 0)])
        with pytest.raises(ValueError):
            motion_coefficients(LocalKernelField(np.zeros((len(g), 3, 3))), b, "lasso")


class TestRestoreAndDeblur:
    def test_eff_restore_uniform_matches_global(self, rng, scene):
        from deblurnet.pipeline import restore_image
        k = gaussian_psf(0.8, 2)
        y = convolve_circular(scene, k)
        g = build_patch_grid(y.shape, 32, 0.5)
        fld = LocalKernelField(np.repeat(k[None], len(g), axis=0))
        out = eff_restore(y, fld, g, 1e-3)
        np.testing.assert_allclose(out, restore_image(k, y, 1e-3), atol=1e-3)

    def test_eff_restore_identity_kernels(self, scene):
        g = build_patch_grid(scene.shape, 24, 0.5)
        fld = LocalKernelField(np.repeat(identity_kernel(5)[None], len(g), axis=0))
        out = eff_restore(scene, fld, g, 1e-12)
        np.testing.assert_allclose(out[8:-8, 8:-8], scene[8:-8, 8:-8], atol=1e-6)

    def test_eff_restore_zero_image(self):
        g = build_patch_grid((48, 48), 24, 0.5)
        fld = LocalKernelField(np.repeat(gaussian_psf(1.0, 2)[None], len(g), axis=0))
        assert not eff_restore(np.zeros((48, 48)), fld, g, 0.01).any()

    def test_eff_restore_shape_mismatch(self, scene):
        g = build_patch_grid((32, 32), 16, 0.5)
        fld = LocalKernelField(np.repeat(identity_kernel(3)[None], len(g), axis=0))
        with pytest.raises(ShapeError):
            eff_restore(scene, fld, g, 0.01)

    @pytest.mark.parametrize("project", [True, False])
    def test_end_to_end(self, scene, project):
        m = build_model((5,), preset="desk", rng=np.random.default_rng(0))
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            res = spatially_varying_deblur(scene, m, patch_size=32, eta=0.5, project=project)
        assert res.latent.shape == scene.shape
        assert all(is_simplex(k) for k in res.field.kernels)
        assert (res.basis is not None) == project

    def test_mosaic_layout(self):
        g = build_patch_grid((40, 60), 20, 0.0)
        fld = LocalKernelField(np.repeat(identity_kernel(3)[None], len(g), axis=0))
        mos = kernel_mosaic(fld, g)
        assert mos.shape == (2 * 4 + 1, 3 * 4 + 1)
        assert mos[2, 2] == 1.0 and mos[1, 1] == 0.0
