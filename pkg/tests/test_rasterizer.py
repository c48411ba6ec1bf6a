import numpy as np
import pytest

from uqsplat.rasterizer import (
    CmfKind,
    RenderConfig,
    cmf,
    cmf_grad,
    render,
    render_oracle,
)
from uqsplat.scene import GaussianSet
from uqsplat.utils import SH_C0

from util_scenes import plane_gaussian, random_gaussians, simple_camera

ALL_MAPS = ("color", "normal", "dist", "depth", "depth_u", "unc", "trans")


def max_map_diff(a, b):
    return max(float(np.abs(getattr(a, m) - getattr(b, m)).max()) for m in ALL_MAPS)


class TestCmf:
    def test_quadratic_table(self):
        assert cmf(0.0, CmfKind.QUADRATIC) == 1.0
        assert cmf(1.0, CmfKind.QUADRATIC) == 0.5
        assert cmf(0.5, CmfKind.QUADRATIC) == 0.875

    def test_quadratic_derivative_is_minus_u(self):
        us = np.linspace(0, 1, 11)
        h = 1e-6
        num = (cmf(us + h, CmfKind.QUADRATIC) - cmf(us - h, CmfKind.QUADRATIC)) / (2 * h)
        np.testing.assert_allclose(num, -us, atol=1e-8)
        np.testing.assert_allclose(cmf_grad(us, CmfKind.QUADRATIC), -us, atol=0)

    @pytest.mark.parametrize("kind", list(CmfKind))
    def test_range(self, kind):
        # u = sigmoid(logit) stays strictly inside (0,1), where every kind
        # maps into (0,1]; PowTenth touches 0 only at the unreachable u=1
        us = np.linspace(0, 1 - 1e-9, 101)
        w = cmf(us, kind)
        assert np.all(w > 0) and np.all(w <= 1)

    def test_alternative_kinds(self):
        np.testing.assert_allclose(cmf(0.5, CmfKind.EXP_NEG2), np.exp(-1.0))
        np.testing.assert_allclose(cmf(0.5, CmfKind.POW_TENTH), 0.5**0.1)
        np.testing.assert_allclose(cmf(0.7, CmfKind.NONE), 1.0)

    @pytest.mark.parametrize("kind", [CmfKind.EXP_NEG2, CmfKind.POW_TENTH])
    def test_alternative_grads_match_fd(self, kind):
        us = np.linspace(0.05, 0.9, 9)
        h = 1e-6
        num = (cmf(us + h, kind) - cmf(us - h, kind)) / (2 * h)
        np.testing.assert_allclose(cmf_grad(us, kind), num, rtol=1e-7)


class TestCompositingExamples:
    def test_single_opaque_splat(self):
        g = plane_gaussian(color=(1, 0, 0), opacity_logit=40.0)
        cfg = RenderConfig(alpha_clamp=1.0)
        # principal point at a pixel center so G = 1 exactly there
        out = render(g, simple_camera(size=16, cx=8.5, cy=8.5), cfg)
        c = out.color[8, 8]
        np.testing.assert_allclose(c, [1, 0, 0], atol=1e-12)
        np.testing.assert_allclose(out.trans[8, 8], 0.0, atol=1e-12)

    def test_two_half_splats(self):
        a = plane_gaussian(mean=(0, 0, 4), color=(1, 1, 1), opacity_logit=0.0)
        b = plane_gaussian(mean=(0, 0, 6), color=(0, 0, 0), opacity_logit=0.0)
        g = GaussianSet.concatenate([a, b])
        # principal point at a pixel center so G = 1 exactly there
        cam = simple_camera(size=16, cx=8.5, cy=8.5)
        out = render(g, cam, RenderConfig())
        np.testing.assert_allclose(out.color[8, 8], [0.5, 0.5, 0.5], atol=1e-9)
        np.testing.assert_allclose(out.trans[8, 8], 0.25, atol=1e-9)

    def test_empty_scene(self):
        g = random_gaussians(3, seed=0)
        empty = g.select(np.zeros(0, dtype=int))
        out = render(empty, simple_camera(size=8))
        np.testing.assert_array_equal(out.trans, np.ones((8, 8)))
        np.testing.assert_array_equal(out.color, np.zeros((8, 8, 3)))
        assert not out.valid.any()

    def test_background_color(self):
        g = random_gaussians(5, seed=1)
        cam = simple_camera(size=16)
        bg = np.array([0.2, 0.4, 0.6])
        with_bg = render(g, cam, RenderConfig(background=tuple(bg)))
        without = render(g, cam, RenderConfig())
        np.testing.assert_allclose(
            with_bg.color, without.color + without.trans[..., None] * bg, atol=1e-12
        )


class TestInvariants:
    def setup_method(self):
        self.cam = simple_camera(size=32)
        self.g = random_gaussians(60, seed=7)
        self.out = render(self.g, self.cam)

    def test_partition_of_unity(self):
        # recomputed from retained contributor lists
        total = np.zeros((32, 32))
        total[:] = self.out.trans
        for rec in self.out.tiles:
            P = (rec.y1 - rec.y0) * (rec.x1 - rec.x0)
            one_m = 1.0 - rec.ahat
            T_excl = np.cumprod(one_m, axis=0)
            T_excl = np.vstack([np.ones((1, P)), T_excl[:-1]])
            w = (T_excl * rec.ahat).sum(axis=0)
            total[rec.y0 : rec.y1, rec.x0 : rec.x1] += w.reshape(
                rec.y1 - rec.y0, rec.x1 - rec.x0
            )
        np.testing.assert_allclose(total, np.ones((32, 32)), atol=1e-9)

    def test_transmittance_monotone(self):
        for rec in self.out.tiles:
            T = np.cumprod(1.0 - rec.ahat, axis=0)
            assert np.all(np.diff(T, axis=0) <= 1e-15)

    def test_transmittance_range(self):
        assert np.all(self.out.trans >= 0) and np.all(self.out.trans <= 1)

    def test_uncertainty_bounded_by_opacity_mass(self):
        assert np.all(self.out.unc <= 1.0 - self.out.trans + 1e-9)
        assert np.all(self.out.unc >= 0)

    def test_maps_finite(self):
        for m in ALL_MAPS:
            assert np.all(np.isfinite(getattr(self.out, m)))

    def test_deterministic(self):
        out2 = render(self.g, self.cam)
        for m in ALL_MAPS:
            np.testing.assert_array_equal(getattr(self.out, m), getattr(out2, m))


class TestCmfDepthSemantics:
    def test_zero_uncertainty_collapses_to_unbiased_depth(self):
        g = random_gaussians(40, seed=3)
        g.uncertainty_logits[:] = -40.0  # u ~ 0
        out = render(g, simple_camera(size=32))
        np.testing.assert_allclose(out.depth_u, out.depth, atol=1e-12)
        np.testing.assert_allclose(out.dist_w, out.dist, atol=1e-12)

    def test_cmf_none_collapses(self):
        g = random_gaussians(40, seed=4)
        out = render(g, simple_camera(size=32), RenderConfig(cmf=CmfKind.NONE))
        np.testing.assert_allclose(out.depth_u, out.depth, atol=1e-12)

    def test_no_division_flag(self):
        g = random_gaussians(40, seed=5)
        cfg = RenderConfig(divide_cmf_depth=False, cmf=CmfKind.NONE)
        out = render(g, simple_camera(size=32), cfg)
        np.testing.assert_allclose(
            out.depth_u[out.valid], out.dist[out.valid], atol=1e-12
        )

    def test_weighted_distance_below_distance(self):
        g = random_gaussians(40, seed=6)
        g.uncertainty_logits[:] = 2.0  # substantial uncertainty
        out = render(g, simple_camera(size=32))
        assert np.all(out.dist_w <= out.dist + 1e-12)


class TestDepthUnbiasedness:
    @pytest.mark.parametrize("tilt", [0.0, 0.35, 0.8])
    def test_single_planar_gaussian(self, tilt):
        g = plane_gaussian(tilt_axis=(1, 0, 0), tilt_angle=tilt, opacity_logit=6.0)
        cam = simple_camera(size=33, f=60.0)
        out = render(g, cam)
        assert out.valid.all()
        rays = cam.pixel_rays()
        n_cam = (g.normals()[0] @ cam.R.T) * -1.0  # toward camera
        mu_cam = cam.world_to_cam(g.means[0])
        d = -np.dot(mu_cam, n_cam)
        ray_plane = d / np.einsum("hwc,c->hw", rays, -n_cam)
        rel = np.abs(out.depth - ray_plane) / ray_plane
        assert rel.max() < 1e-4

    def test_translucent_coverage_still_unbiased(self):
        # the raw-normal quotient cancels coverage: even at alpha-hat ~ 0.3
        # the depth equals the ray-plane intersection
        g = plane_gaussian(opacity_logit=-1.0)
        cam = simple_camera(size=17)
        out = render(g, cam)
        assert out.valid.all()
        np.testing.assert_allclose(out.depth, np.full((17, 17), 5.0), rtol=1e-10)


class TestOracleEquivalence:
    def test_single_gaussian_bit_identical(self):
        g = random_gaussians(1, seed=9)
        cam = simple_camera(size=32)
        a, b = render(g, cam), render_oracle(g, cam)
        for m in ALL_MAPS:
            np.testing.assert_array_equal(getattr(a, m), getattr(b, m))

    @pytest.mark.parametrize("seed", range(6))
    def test_random_scenes(self, seed):
        g = random_gaussians(100, seed=seed)
        cam = simple_camera(size=64)
        a, b = render(g, cam), render_oracle(g, cam)
        assert max_map_diff(a, b) < 1e-5

    def test_opaque_heavy_scene(self):
        g = random_gaussians(120, seed=42, opacity=(0.7, 0.995))
        cam = simple_camera(size=48)
        a, b = render(g, cam), render_oracle(g, cam)
        assert max_map_diff(a, b) < 1e-5

    def test_equal_depth_ties_stable(self):
        g = random_gaussians(10, seed=11)
        g.means[:, 2] = 5.0
        cam = simple_camera(size=32)
        a, b = render(g, cam), render_oracle(g, cam)
        assert max_map_diff(a, b) < 1e-12
