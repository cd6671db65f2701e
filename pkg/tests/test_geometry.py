import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from partforge import geometry as geo
from partforge.geometry import Frame, PointCloud, TriMesh


def brute_min_distance(a, b):
    best = np.inf
    for p in a:
        for q in b:
            best = min(best, float(np.linalg.norm(p - q)))
    return best


def brute_directional_hausdorff(a, b):
    worst = 0.0
    for p in a:
        nearest = min(float(np.linalg.norm(p - q)) for q in b)
        worst = max(worst, nearest)
    return worst


def random_cloud(rng, n, scale=1.0, offset=0.0):
    return PointCloud(rng.standard_normal((n, 3)) * scale + offset)


UNIT_SQUARE = TriMesh(
    vertices=np.array([[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0]], dtype=float),
    triangles=np.array([[0, 1, 2], [0, 2, 3]]),
)


class TestSampleSurface:
    def test_unit_square_mean(self):
        pc = geo.sample_surface(UNIT_SQUARE, 10000, rng_seed=1)
        assert np.all(np.abs(pc.points.mean(axis=0) - [0.5, 0.5, 0.0]) < 0.02)

    def test_single_point_inside_triangle(self):
        tri = TriMesh(np.array([[0, 0, 0], [2, 0, 0], [0, 3, 0]], dtype=float), np.array([[0, 1, 2]]))
        pc = geo.sample_surface(tri, 1, rng_seed=2)
        p = pc.points[0]
        # barycentric coordinates w.r.t. the triangle must all be >= 0
        u = p[0] / 2.0
        v = p[1] / 3.0
        assert u >= 0 and v >= 0 and u + v <= 1.0 and p[2] == 0.0

    def test_area_weighted_counts(self):
        # two triangles with area ratio 3:1
        mesh = TriMesh(
            vertices=np.array(
                [[0, 0, 0], [3, 0, 0], [0, 2, 0], [10, 0, 0], [11, 0, 0], [10, 2, 0]], dtype=float
            ),
            triangles=np.array([[0, 1, 2], [3, 4, 5]]),
        )
        n = 40000
        pc = geo.sample_surface(mesh, n, rng_seed=3)
        frac_big = float((pc.points[:, 0] < 5.0).mean())
        assert abs(frac_big - 0.75) < 0.02

    def test_deterministic_for_seed(self):
        a = geo.sample_surface(UNIT_SQUARE, 500, rng_seed=42)
        b = geo.sample_surface(UNIT_SQUARE, 500, rng_seed=42)
        assert np.array_equal(a.points, b.points)
        c = geo.sample_surface(UNIT_SQUARE, 500, rng_seed=43)
        assert not np.array_equal(a.points, c.points)

    def test_degenerate_mesh(self):
        flat = TriMesh(np.array([[0, 0, 0], [1, 1, 1], [2, 2, 2]], dtype=float), np.array([[0, 1, 2]]))
        with pytest.raises(geo.GeometryError, match="degenerate mesh"):
            geo.sample_surface(flat, 10, rng_seed=0)

    def test_bad_count(self):
        with pytest.raises(geo.GeometryError, match="sample count"):
            geo.sample_surface(UNIT_SQUARE, 0, rng_seed=0)


class TestRecenter:
    def test_example(self):
        pc = PointCloud(np.array([[1.0, 1.0, 1.0], [3.0, 1.0, 1.0]]))
        centered, centroid = geo.recenter(pc)
        assert np.array_equal(centered.points, [[-1, 0, 0], [1, 0, 0]])
        assert np.array_equal(centroid, [2, 1, 1])
        assert centered.frame is Frame.CENTERED

    def test_already_centered_is_identity(self):
        pc = PointCloud(np.array([[-1.0, 0, 0], [1.0, 0, 0]]))
        centered, centroid = geo.recenter(pc)
        assert np.array_equal(centered.points, pc.points)
        assert np.array_equal(centroid, [0, 0, 0])

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=25, deadline=None)
    def test_idempotent(self, seed):
        rng = np.random.default_rng(seed)
        pc = random_cloud(rng, 17, scale=3.0, offset=rng.standard_normal(3) * 5)
        once, _ = geo.recenter(pc)
        twice, c2 = geo.recenter(once)
        assert np.allclose(once.points, twice.points, atol=1e-12)
        assert np.allclose(c2, 0, atol=1e-12)

    def test_restores_original(self):
        rng = np.random.default_rng(5)
        pc = random_cloud(rng, 40, offset=2.0)
        centered, centroid = geo.recenter(pc)
        assert np.allclose(centered.points + centroid, pc.points, atol=1e-12)


class TestDistances:
    def test_hausdorff_identity_zero(self):
        rng = np.random.default_rng(0)
        a = random_cloud(rng, 50)
        assert geo.directional_hausdorff(a, a) == 0.0

    def test_hausdorff_asymmetric_example(self):
        a = PointCloud(np.array([[0.0, 0, 0]]))
        b = PointCloud(np.array([[1.0, 0, 0], [2.0, 0, 0]]))
        assert geo.directional_hausdorff(a, b) == 1.0
        assert geo.directional_hausdorff(b, a) == 2.0

    def test_hausdorff_matches_bruteforce(self):
        rng = np.random.default_rng(1)
        a = random_cloud(rng, 200)
        b = random_cloud(rng, 200, offset=0.5)
        assert geo.directional_hausdorff(a, b) == brute_directional_hausdorff(a.points, b.points)

    def test_hausdorff_monotone_in_b(self):
        rng = np.random.default_rng(2)
        a = random_cloud(rng, 60)
        b = random_cloud(rng, 60)
        before = geo.directional_hausdorff(a, b)
        bigger = PointCloud(np.concatenate([b.points, rng.standard_normal((20, 3))]))
        assert geo.directional_hausdorff(a, bigger) <= before

    def test_min_distance_overlap_zero(self):
        rng = np.random.default_rng(3)
        a = random_cloud(rng, 30)
        b = PointCloud(np.concatenate([a.points[:5], rng.standard_normal((10, 3)) + 4.0]))
        assert geo.min_distance(a, b) == 0.0

    def test_min_distance_345(self):
        a = PointCloud(np.array([[0.0, 0, 0]]))
        b = PointCloud(np.array([[0.0, 3, 4]]))
        assert geo.min_distance(a, b) == 5.0

    def test_min_distance_matches_bruteforce_and_symmetric(self):
        rng = np.random.default_rng(4)
        a = random_cloud(rng, 150)
        b = random_cloud(rng, 130, offset=1.0)
        d = geo.min_distance(a, b)
        assert d == brute_min_distance(a.points, b.points)
        assert d == geo.min_distance(b, a)

    def test_min_distance_below_hausdorff(self):
        rng = np.random.default_rng(5)
        for _ in range(5):
            a = random_cloud(rng, 40)
            b = random_cloud(rng, 40, offset=rng.uniform(0, 2))
            d = geo.min_distance(a, b)
            assert d <= geo.directional_hausdorff(a, b)
            assert d <= geo.directional_hausdorff(b, a)


class TestGridPredicates:
    @pytest.mark.parametrize("tau", [0.05, 0.3, 1.0])
    def test_clouds_within_matches_bruteforce(self, tau):
        rng = np.random.default_rng(6)
        for trial in range(40):
            a = random_cloud(rng, 80, scale=0.5)
            b = random_cloud(rng, 80, scale=0.5, offset=rng.uniform(0, 1.5, size=3))
            expect = brute_min_distance(a.points, b.points) < tau
            assert geo.clouds_within(a, b, tau) == expect

    @pytest.mark.parametrize("tau", [0.1, 0.5])
    def test_hausdorff_within_matches_bruteforce(self, tau):
        rng = np.random.default_rng(7)
        for trial in range(30):
            a = random_cloud(rng, 60, scale=0.2)
            b = random_cloud(rng, 60, scale=0.2, offset=rng.uniform(0, 0.4, size=3))
            expect = brute_directional_hausdorff(a.points, b.points) < tau
            assert geo.hausdorff_within(a, b, tau) == expect


class TestPcaObb:
    def test_unit_cube_corners(self):
        corners = np.array([[x, y, z] for x in (0, 1) for y in (0, 1) for z in (0, 1)], dtype=float)
        obb = geo.pca_obb(PointCloud(corners))
        assert abs(obb.diagonal - np.sqrt(3)) < 1e-12

    def test_collinear_segment(self):
        pts = np.array([[t, 0, 0] for t in np.linspace(-1, 1, 9)])
        obb = geo.pca_obb(PointCloud(pts))
        assert np.allclose(obb.extents, [2.0, 0.0, 0.0], atol=1e-12)
        assert abs(obb.diagonal - 2.0) < 1e-12

    def test_rotation_invariant_diagonal(self):
        rng = np.random.default_rng(8)
        pts = rng.uniform(-1, 1, size=(500, 3)) * np.array([3.0, 2.0, 1.0])
        base = geo.pca_obb(PointCloud(pts)).diagonal
        # random rotation via QR
        q, _ = np.linalg.qr(rng.standard_normal((3, 3)))
        rotated = geo.pca_obb(PointCloud(pts @ q.T)).diagonal
        assert abs(base - rotated) < 1e-6

    def test_scaling_linear(self):
        rng = np.random.default_rng(9)
        pts = rng.standard_normal((100, 3))
        d1 = geo.pca_obb(PointCloud(pts)).diagonal
        d3 = geo.pca_obb(PointCloud(pts * 3.0)).diagonal
        assert abs(d3 - 3.0 * d1) < 1e-9

    def test_axes_orthonormal_and_sign_fixed(self):
        rng = np.random.default_rng(10)
        obb = geo.pca_obb(random_cloud(rng, 50))
        assert np.allclose(obb.axes @ obb.axes.T, np.eye(3), atol=1e-12)
        for row in obb.axes:
            assert row[np.argmax(np.abs(row))] > 0

    def test_single_point(self):
        obb = geo.pca_obb(PointCloud(np.array([[1.0, 2.0, 3.0]])))
        assert obb.diagonal == 0.0


class TestNormalizeShape:
    def test_bbox_corner_example(self):
        cube = PointCloud(np.array([[x, y, z] for x in (-2, 2) for y in (-2, 2) for z in (-2, 2)], dtype=float))
        norm = geo.normalize_shape([cube])
        assert np.array_equal(norm.center, [0, 0, 0])
        assert abs(norm.radius - 2 * np.sqrt(3)) < 1e-12

    def test_degenerate_axes(self):
        seg = PointCloud(np.array([[0.0, 0, 0], [1.0, 0, 0]]))
        norm = geo.normalize_shape([seg])
        assert np.array_equal(norm.center, [0.5, 0, 0])
        assert norm.radius == 0.5

    def test_reapply_gives_unit_radius(self):
        rng = np.random.default_rng(11)
        clouds = [random_cloud(rng, 30, scale=2.0, offset=rng.standard_normal(3) * 3) for _ in range(4)]
        norm = geo.normalize_shape(clouds)
        all_pts = np.concatenate([norm.apply(c.points) for c in clouds])
        assert abs(np.sqrt((all_pts**2).sum(axis=1)).max() - 1.0) < 1e-6

    def test_zero_radius(self):
        same = PointCloud(np.array([[1.0, 1.0, 1.0], [1.0, 1.0, 1.0]]))
        with pytest.raises(geo.GeometryError, match="zero-radius shape"):
            geo.normalize_shape([same])


class TestPointCloudValidation:
    def test_rejects_nonfinite(self):
        with pytest.raises(geo.GeometryError, match="non-finite"):
            PointCloud(np.array([[np.nan, 0, 0]]))

    def test_rejects_empty(self):
        with pytest.raises(geo.GeometryError):
            PointCloud(np.zeros((0, 3)))

    def test_centered_frame_checked(self):
        with pytest.raises(geo.GeometryError, match="centroid"):
            PointCloud(np.array([[1.0, 0, 0], [2.0, 0, 0]]), Frame.CENTERED)
