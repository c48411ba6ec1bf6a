import numpy as np

from uqsplat.projection import (
    oriented_normals,
    perspective_jacobian,
    plane_distance,
    project_gaussians,
)
from uqsplat.scene import Camera, GaussianSet
from uqsplat.utils import quat_normalize


def cam_at_origin(f=100.0, c=50.0, wh=100):
    K = np.array([[f, 0, c], [0, f, c], [0, 0, 1.0]])
    return Camera(K=K, R=np.eye(3), t=np.zeros(3), width=wh, height=wh)


def single_gaussian(mean, q=(1, 0, 0, 0), scales=(0.1, 0.1, 0.1), alpha_logit=0.0):
    return GaussianSet(
        means=np.asarray(mean, float).reshape(1, 3),
        quats=np.asarray(q, float).reshape(1, 4),
        log_scales=np.log(np.asarray(scales, float)).reshape(1, 3),
        opacity_logits=[alpha_logit],
        colors_dc=np.zeros((1, 3)),
        uncertainty_logits=[0.0],
    )


class TestProject:
    def test_on_axis_center(self):
        g = single_gaussian([0, 0, 5])
        pg = project_gaussians(g, cam_at_origin())
        assert len(pg) == 1
        np.testing.assert_allclose(pg.mean2d[0], [50, 50], atol=1e-12)
        np.testing.assert_allclose(pg.depth_z[0], 5.0)

    def test_behind_camera_culled(self):
        g = single_gaussian([0, 0, -1])
        pg = project_gaussians(g, cam_at_origin())
        assert len(pg) == 0

    def test_far_off_screen_culled(self):
        g = single_gaussian([100.0, 0, 5])
        pg = project_gaussians(g, cam_at_origin())
        assert len(pg) == 0

    def test_isotropic_cov2d(self):
        sigma, z, f = 0.05, 4.0, 100.0
        g = single_gaussian([0, 0, z], scales=(sigma, sigma, sigma))
        pg = project_gaussians(g, cam_at_origin(f=f), dilation=0.3)
        expected = (sigma * f / z) ** 2
        np.testing.assert_allclose(pg.cov2d[0, 0], expected + 0.3, rtol=1e-12)
        np.testing.assert_allclose(pg.cov2d[0, 2], expected + 0.3, rtol=1e-12)
        np.testing.assert_allclose(pg.cov2d[0, 1], 0.0, atol=1e-12)

    def test_jacobian_matches_finite_differences(self):
        cam = cam_at_origin(f=120.0)
        rng = np.random.default_rng(0)
        pts = rng.uniform([-1, -1, 2], [1, 1, 6], size=(20, 3))
        J = perspective_jacobian(pts, cam.fx, cam.fy)
        h = 1e-6

        def pix(t):
            return np.array(
                [cam.fx * t[0] / t[2] + cam.cx, cam.fy * t[1] / t[2] + cam.cy]
            )

        for i, t in enumerate(pts):
            for a in range(3):
                e = np.zeros(3)
                e[a] = h
                num = (pix(t + e) - pix(t - e)) / (2 * h)
                np.testing.assert_allclose(J[i, :, a], num, rtol=1e-5, atol=1e-7)

    def test_project_unproject_consistency(self):
        rng = np.random.default_rng(3)
        K = np.array([[90.0, 0, 31.0], [0, 110.0, 33.0], [0, 0, 1]])
        cam = Camera.look_at([2, -1, 1.5], [0, 0, 0], [0, 0, 1], K, 64, 64)
        for _ in range(10):
            p = rng.uniform(5, 59, size=2)
            depth = rng.uniform(1.0, 6.0)
            X = cam.cam_to_world(depth * cam.backproject(p))
            g = single_gaussian(X)
            pg = project_gaussians(g, cam)
            np.testing.assert_allclose(pg.mean2d[0], p, atol=1e-4)

    def test_conic_inverts_cov2d(self):
        rng = np.random.default_rng(5)
        g = GaussianSet(
            means=rng.uniform([-1, -1, 3], [1, 1, 6], size=(30, 3)),
            quats=quat_normalize(rng.normal(size=(30, 4))),
            log_scales=rng.uniform(-3, -1, size=(30, 3)),
            opacity_logits=np.full(30, 2.0),
            colors_dc=np.zeros((30, 3)),
            uncertainty_logits=np.zeros(30),
        )
        pg = project_gaussians(g, cam_at_origin())
        for i in range(len(pg)):
            a, b, c = pg.cov2d[i]
            m = np.array([[a, b], [b, c]])
            ai, bi, ci = pg.conic[i]
            np.testing.assert_allclose(
                np.array([[ai, bi], [bi, ci]]) @ m, np.eye(2), atol=1e-10
            )


class TestPlaneDistance:
    def test_fronto_parallel(self):
        # plane z=5 seen from the origin looking +z
        g = single_gaussian([0, 0, 5], scales=(1, 1, 0.01))
        d = plane_distance(g, cam_at_origin())
        np.testing.assert_allclose(d, [5.0], rtol=1e-12)

    def test_translated_camera(self):
        g = single_gaussian([0, 0, 5], scales=(1, 1, 0.01))
        K = np.array([[100.0, 0, 50], [0, 100.0, 50], [0, 0, 1]])
        cam = Camera(K=K, R=np.eye(3), t=np.array([0, 0, -1.0]), width=100, height=100)
        np.testing.assert_allclose(plane_distance(g, cam), [4.0], rtol=1e-12)

    def test_tilted_plane_matches_point_to_plane_oracle(self):
        # plane through (0,0,5), normal tilted 45 degrees about x
        a = np.pi / 4
        q = np.array([np.cos(a / 2), np.sin(a / 2), 0, 0])  # rotation about x
        g = single_gaussian([0, 0, 5], q=q, scales=(1, 1, 0.01))
        cam = cam_at_origin()
        n = g.normals()[0]
        oracle = abs(np.dot(np.array([0, 0, 5.0]) - cam.center, n))
        d = plane_distance(g, cam)
        np.testing.assert_allclose(d, [oracle], rtol=1e-12)
        np.testing.assert_allclose(d, [5 / np.sqrt(2)], rtol=1e-12)

    def test_positive_and_invariant_under_inplane_rotation(self):
        rng = np.random.default_rng(9)
        cam = cam_at_origin()
        for _ in range(10):
            ang = rng.uniform(0, 2 * np.pi)
            # rotate about z (the normal axis of a z-flattened Gaussian)
            qz = np.array([np.cos(ang / 2), 0, 0, np.sin(ang / 2)])
            g = single_gaussian(rng.uniform([-1, -1, 3], [1, 1, 6]), q=qz, scales=(1, 1, 0.01))
            g0 = single_gaussian(g.means[0], scales=(1, 1, 0.01))
            np.testing.assert_allclose(
                plane_distance(g, cam), plane_distance(g0, cam), rtol=1e-10
            )
            assert plane_distance(g, cam)[0] >= 0

    def test_oriented_normals_face_camera(self):
        rng = np.random.default_rng(4)
        cam = cam_at_origin()
        g = GaussianSet(
            means=rng.uniform([-1, -1, 3], [1, 1, 6], size=(40, 3)),
            quats=quat_normalize(rng.normal(size=(40, 4))),
            log_scales=rng.uniform(-3, -1, size=(40, 3)),
            opacity_logits=np.zeros(40),
            colors_dc=np.zeros((40, 3)),
            uncertainty_logits=np.zeros(40),
        )
        n, flip = oriented_normals(g, cam)
        dots = np.einsum("nd,nd->n", n, g.means - cam.center)
        assert np.all(dots <= 0)
        assert set(np.unique(flip)).issubset({-1.0, 1.0})


class TestFootprint:
    def test_gate_radius_matches_alpha_cutoff(self):
        # at the footprint radius, alpha * G == alpha_min exactly
        g = single_gaussian([0, 0, 5], scales=(0.2, 0.2, 0.2), alpha_logit=1.2)
        alpha_min = 1 / 255
        pg = project_gaussians(g, cam_at_origin(), alpha_min=alpha_min)
        alpha = g.opacities[0]
        r = pg.radius[0]
        sigma_max = np.sqrt(pg.cov2d[0, 0])  # isotropic here
        G = np.exp(-0.5 * (r / sigma_max) ** 2)
        np.testing.assert_allclose(alpha * G, alpha_min, rtol=1e-10)
