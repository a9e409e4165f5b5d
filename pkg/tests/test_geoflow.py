import numpy as np
import pytest

from geodesica import eikonal as ek
from geodesica import geodesic as gd
from geodesica import geoflow as gf
from geodesica.errors import DiagonalSample, StalledFlow, TrajectoryEscapedDomain


@pytest.fixture(scope="module")
def exact_euclid(euclid):
    return ek.euclidean_exact(euclid)


@pytest.fixture(scope="module")
def exact_sphere(sphere_wide):
    return ek.sphere_exact(sphere_wide)


def test_grad_distance_exact(exact_euclid, exact_sphere, sphere_wide):
    np.testing.assert_allclose(gf.grad_distance(exact_euclid, [0, 0], [0.6, 0.8]), [0.6, 0.8], atol=1e-15)
    rng = np.random.default_rng(0)
    p = rng.uniform(sphere_wide.bounds_low, sphere_wide.bounds_high, (200, 2))
    q = rng.uniform(sphere_wide.bounds_low, sphere_wide.bounds_high, (200, 2))
    f = gf.grad_distance(exact_sphere, p, q)
    norm = f[:, 0] ** 2 + np.sin(q[:, 0]) ** 2 * f[:, 1] ** 2
    np.testing.assert_allclose(norm, 1.0, atol=1e-6)
    with pytest.raises(DiagonalSample):
        gf.grad_distance(exact_euclid, [0.5, 0.5], [0.5, 0.5])


def test_log_star_euclidean(exact_euclid):
    np.testing.assert_allclose(gf.log_star(exact_euclid, [0, 0], [1, 1]), [1, 1], atol=1e-12)


def test_log_star_sphere_equator(exact_sphere, sphere_wide):
    p, q = np.array([np.pi / 2, 0.0]), np.array([np.pi / 2, 1.0])
    v = gf.log_star(exact_sphere, p, q)
    np.testing.assert_allclose(v, [0.0, 1.0], atol=1e-6)
    assert np.linalg.norm(gd.exp_map(sphere_wide, p, v).end - q) < 1e-3


def test_log_star_batch_closes_exp_map(exact_sphere, sphere_wide):
    rng = np.random.default_rng(1)
    lo, hi = sphere_wide.bounds_low + 0.3, sphere_wide.bounds_high - 0.3
    p, q = rng.uniform(lo, [hi[0], lo[1] + 1.5], (10, 2)), rng.uniform(lo, [hi[0], lo[1] + 1.5], (10, 2))
    v = gf.log_star(exact_sphere, p, q)
    ends = np.array([gd.exp_map(sphere_wide, a, b).end for a, b in zip(p, v)])
    assert np.max(np.linalg.norm(ends - q, axis=1)) < 1e-2
    # batch and single evaluation agree
    np.testing.assert_allclose(gf.log_star(exact_sphere, p[3], q[3]), v[3], rtol=1e-12)


def test_trace_geodesic_lengths(exact_euclid, exact_sphere, sphere_wide, euclid):
    c = gf.trace_geodesic(exact_euclid, [0, 0], [1.5, -0.5])
    assert gd.curve_length(euclid, c) == pytest.approx(np.hypot(1.5, 0.5), rel=1e-9)
    np.testing.assert_allclose(c.points[0], [1.5, -0.5])
    np.testing.assert_array_equal(c.points[-1], [0, 0])
    # points lie on the segment
    assert np.max(np.abs(c.points[:, 0] + 3 * c.points[:, 1])) < 1e-12
    c = gf.trace_geodesic(exact_sphere, [np.pi / 2, 0], [np.pi / 2, np.pi / 2])
    assert gd.curve_length(sphere_wide, c) == pytest.approx(np.pi / 2, abs=1e-3)
    with pytest.raises(ValueError):
        gf.trace_geodesic(exact_euclid, [[0, 0], [1, 1]], [[1, 0], [0, 1]])


def test_retraced_geodesic_overlaps_flow_line(exact_sphere, sphere_wide):
    p, q = np.array([1.2, 0.2]), np.array([1.9, 1.1])
    c = gf.trace_geodesic(exact_sphere, p, q)
    v = gf.log_star(exact_sphere, p, q)
    re = gd.exp_map(sphere_wide, p, v, steps=512)
    # The flow runs q -> p; the geodesic runs p -> q; compare after reversal.
    flow_pts = c.points[::-1]
    assert np.max(np.linalg.norm(re.points[::8] - flow_pts[1::8][: len(re.points[::8])], axis=1)) < 5e-3


def test_overestimating_model_arrives_early(euclid):
    # unit-speed flow but phi 1% too long: it reaches p before its arclength budget runs out
    class Long:
        manifold = euclid
        symmetric = True

        def distance(self, p, q):
            return 1.01 * np.linalg.norm(np.atleast_2d(q) - np.atleast_2d(p), axis=-1)

        def grad_q(self, p, q):
            d = np.asarray(q, dtype=float) - np.asarray(p, dtype=float)
            return d / np.linalg.norm(d, axis=-1, keepdims=True)

    p, q = np.array([0.3, -0.2]), np.array([1.5, 0.7])
    c = gf.trace_geodesic(Long(), p, q)
    np.testing.assert_array_equal(c.points[-1], p)
    assert len(c.points) < gf.STEPS + 2
    assert gd.curve_length(euclid, c) == pytest.approx(np.linalg.norm(q - p), rel=1e-9)
    v = gf.log_star(Long(), p, q)
    np.testing.assert_allclose(v / np.linalg.norm(v), (q - p) / np.linalg.norm(q - p), atol=1e-12)


def test_stalled_and_escaped_flows(euclid, sphere):
    class Flat:
        manifold = euclid
        symmetric = True

        def distance(self, p, q):
            return np.ones(np.atleast_2d(q).shape[0])

        def grad_q(self, p, q):
            return np.zeros_like(np.asarray(q, dtype=float))

    with pytest.raises(StalledFlow):
        gf.log_star(Flat(), [0, 0], [1, 1])

    class Outward(Flat):
        def grad_q(self, p, q):
            return -np.ones_like(np.asarray(q, dtype=float))

        def distance(self, p, q):
            return np.full(np.atleast_2d(q).shape[0], 10.0)

    with pytest.raises(TrajectoryEscapedDomain):
        gf.log_star(Outward(), [0, 0], [2.5, 2.5])
    with pytest.raises(ValueError):
        gf.log_star(Flat(), [0, 0], [1, 1], steps=4)


def test_field_on_grid(exact_euclid, tmp_path):
    f = gf.field_on_grid(exact_euclid, [0.0, 0.0], resolution=9)
    assert f.shape == (9, 9) and f.points.shape == (81, 2)
    assert np.all(f.values >= 0)
    r = np.linalg.norm(f.points, axis=1)
    np.testing.assert_allclose(f.values, r, atol=1e-15)  # concentric level sets
    assert np.argmin(f.values) == np.argmin(r)
    assert np.all(f.flow[np.argmin(r)] == 0)
    path = tmp_path / "f.csv"
    f.to_csv(path)
    lines = path.read_text().splitlines()
    assert lines[0] == "x1,x2,phi,flow1,flow2" and len(lines) == 82
    with pytest.raises(ValueError):
        gf.field_on_grid(exact_euclid, [0, 0], resolution=1)


def test_field_monotone_along_rays(exact_euclid):
    f = gf.field_on_grid(exact_euclid, [0.0, 0.0], resolution=33).grid()
    c = 16
    for ray in (f[c, c:], f[c:, c], np.diag(f)[c:]):
        assert np.all(np.diff(ray) > 0)


def test_symmetricity_report(exact_euclid, euclid, sphere):
    rep = gf.symmetricity_test(lambda o: exact_euclid, euclid, grid_k=3)
    assert rep.origins.shape == (9, 2) and rep.pairs().shape == (36, 2)
    assert rep.max_asymmetry == 0.0
    model = ek.new_model(sphere, ek.TrainingConfig(width=16, depth=2), seed=0)
    assert gf.symmetricity_test(lambda o: model, sphere, 2).max_asymmetry == 0.0
    with pytest.raises(ValueError):
        gf.origin_grid(euclid, 1)
