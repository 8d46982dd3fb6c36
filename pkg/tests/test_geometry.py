import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pcotta import autodiff as ad
from pcotta import geometry as geo
from pcotta.errors import ConfigError, ContractError, ParseError, SizeError


# ---- oracles


def chamfer_loop(p, g):
    p, g = np.asarray(p, np.float64), np.asarray(g, np.float64)
    a = sum(min(float(np.sum((x - y) ** 2)) for y in g) for x in p) / len(p)
    b = sum(min(float(np.sum((y - x) ** 2)) for x in p) for y in g) / len(g)
    return a + b


def fps_loop(p, m, start):
    p = np.asarray(p, np.float64)
    chosen = [start]
    while len(chosen) < m:
        best, best_d = None, -1.0
        for i in range(len(p)):
            d = min(float(np.sum((p[i] - p[j]) ** 2)) for j in chosen)
            if d > best_d:  # strict: ties keep the lowest index
                best, best_d = i, d
        chosen.append(best)
    return chosen


def knn_loop(p, c, g):
    p = np.asarray(p, np.float64)
    d = [(float(np.sum((p[i] - p[c]) ** 2)), i) for i in range(len(p))]
    return [i for _, i in sorted(d)[:g]]


clouds = st.integers(0, 2**31 - 1).map(lambda s: np.random.default_rng(s).normal(size=(int(8 + s % 40), 3)).astype(np.float32))


# ---- Chamfer


def test_chamfer_examples():
    p = np.zeros((1, 3))
    assert geo.chamfer_value(p, [[1, 0, 0]]) == 2.0
    assert geo.chamfer_value([[0, 0, 0], [2, 0, 0]], [[1, 0, 0]]) == 2.0
    x = np.random.default_rng(0).normal(size=(10, 3))
    assert geo.chamfer_value(x, x) == 0.0


def test_chamfer_empty_is_contract_error():
    with pytest.raises(ContractError):
        geo.chamfer_batch(np.zeros((0, 3)), np.zeros((2, 3)))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_chamfer_matches_double_loop(seed):
    rng = np.random.default_rng(seed)
    p, g = rng.normal(size=(32, 3)), rng.normal(size=(27, 3))
    assert abs(float(geo.chamfer_batch(p, g).data) - chamfer_loop(p, g)) < 1e-6


def test_chamfer_symmetric_and_permutation_invariant():
    rng = np.random.default_rng(1)
    p, g = rng.normal(size=(20, 3)), rng.normal(size=(15, 3))
    v = float(geo.chamfer_batch(p, g).data)
    assert float(geo.chamfer_batch(g, p).data) == pytest.approx(v, abs=1e-12)
    assert float(geo.chamfer_batch(p[rng.permutation(20)], g[rng.permutation(15)]).data) == pytest.approx(v, abs=1e-12)


def test_chamfer_zero_iff_mutual_containment():
    p = np.array([[0.0, 0, 0], [1, 0, 0]])
    assert float(geo.chamfer_batch(p, np.vstack([p, p[:1]])).data) == 0.0
    assert float(geo.chamfer_batch(p, p[:1]).data) > 0.0


def test_chamfer_one_sided():
    p = np.array([[0.0, 0, 0], [5, 0, 0]])
    q = np.array([[1.0, 0, 0]])
    assert float(geo.chamfer_batch(p, q, one_sided=True).data) == 1.0


@pytest.mark.parametrize("seed", range(10))
def test_chamfer_gradient(seed):
    rng = np.random.default_rng(seed)
    p = ad.Parameter(rng.normal(size=(16, 3)), name="p")
    g = ad.Parameter(rng.normal(size=(16, 3)), name="g")
    assert ad.finite_diff_check(lambda: geo.chamfer_batch(p, g), [p, g]) < 1e-3
    assert ad.finite_diff_check(lambda: geo.chamfer_batch(p, g, one_sided=True), [p]) < 1e-3


def test_chamfer_batched_matches_single():
    rng = np.random.default_rng(3)
    p, g = rng.normal(size=(4, 9, 3)), rng.normal(size=(4, 7, 3))
    batched = geo.chamfer_batch(p, g).data
    np.testing.assert_allclose(batched, [chamfer_loop(p[i], g[i]) for i in range(4)], atol=1e-9)


# ---- FPS and grouping


def test_fps_examples():
    line = np.array([[0, 0, 0], [0.1, 0, 0], [1, 0, 0]], np.float32)
    assert list(geo.farthest_point_sample(line, 2, 0)) == [0, 2]
    assert sorted(geo.farthest_point_sample(line, 3, 0)) == [0, 1, 2]
    with pytest.raises(SizeError):
        geo.farthest_point_sample(line, 4)


def test_fps_tie_goes_to_lowest_index():
    square = np.array([[1, 0, 0], [0, 1, 0], [-1, 0, 0], [0, -1, 0]], np.float32)
    # from index 0, indices 1 and 3 tie; 2 is farther
    assert list(geo.farthest_point_sample(square, 3, 0)) == [0, 2, 1]


@settings(max_examples=30, deadline=None)
@given(clouds, st.integers(1, 8), st.integers(0, 7))
def test_fps_matches_greedy_oracle(cloud, m, start):
    assert list(geo.farthest_point_sample(cloud, m, start)) == fps_loop(cloud, m, start)


@settings(max_examples=30, deadline=None)
@given(clouds, st.integers(1, 8))
def test_knn_group_matches_sort_oracle(cloud, g):
    centers = np.array([0, 3, 5])
    ps = geo.knn_group(cloud, centers, g)
    for row, c in enumerate(centers):
        assert list(ps.indices[row]) == knn_loop(cloud, c, g)
        np.testing.assert_allclose(ps.groups[row], cloud[ps.indices[row]] - cloud[c], atol=1e-7)
    assert np.all(ps.groups[:, 0] == 0)  # the centre is its own nearest point


def test_knn_group_size_error():
    with pytest.raises(SizeError):
        geo.knn_group(np.zeros((4, 3)), np.array([0]), 5)


# ---- rigid transforms


def test_transform_examples():
    x = np.array([[1.0, 0, 0]], np.float32)
    np.testing.assert_array_equal(geo.apply_transform(x, geo.RigidTransform.identity()), x)
    half = geo.RigidTransform.from_axis_angle([0, 0, 1], math.pi)
    np.testing.assert_allclose(geo.apply_transform(x, half), [[-1, 0, 0]], atol=1e-6)


@settings(max_examples=20, deadline=None)
@given(clouds, st.integers(0, 1000))
def test_transform_inverse_and_isometry(cloud, seed):
    rng = np.random.default_rng(seed)
    t = geo.RigidTransform(geo.random_rotation(rng, math.pi).rotation, rng.normal(size=3))
    moved = geo.apply_transform(cloud, t)
    np.testing.assert_allclose(geo.apply_transform(moved, t.inverse()), cloud, atol=1e-5)
    d0 = np.linalg.norm(cloud[:, None] - cloud[None], axis=-1)
    d1 = np.linalg.norm(moved[:, None] - moved[None], axis=-1)
    np.testing.assert_allclose(d0, d1, atol=1e-5)


def test_compose_order():
    a = geo.RigidTransform.from_axis_angle([0, 0, 1], 0.3, [1, 0, 0])
    b = geo.RigidTransform.from_axis_angle([1, 0, 0], 0.7, [0, 2, 0])
    x = np.random.default_rng(0).normal(size=(5, 3))
    np.testing.assert_allclose(geo.apply_transform(x, a.compose(b)), geo.apply_transform(geo.apply_transform(x, b), a), atol=1e-5)


def test_invalid_rotation_rejected():
    with pytest.raises(ContractError):
        geo.RigidTransform(np.diag([1.0, 1.0, -1.0]), np.zeros(3))


def test_kabsch_recovers_transform():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(30, 3))
    t = geo.RigidTransform(geo.random_rotation(rng, 2.0).rotation, [0.3, -0.2, 0.1])
    est = geo.kabsch(x, geo.apply_transform(x, t))
    np.testing.assert_allclose(est.rotation, t.rotation, atol=1e-5)
    np.testing.assert_allclose(est.translation, t.translation, atol=1e-5)


def test_icp_aligns_small_rotation():
    cloud = geo.generate_shape(geo.ShapeSpec("box", "SRC_A", 3))
    t = geo.RigidTransform.from_axis_angle([0.2, 1, 0.1], 0.3)
    moved = geo.apply_transform(cloud, t)
    rot = geo.icp_rotation(moved, cloud, iterations=30)
    assert geo.chamfer_value(geo.apply_transform(moved, rot), cloud) < 0.1 * geo.chamfer_value(moved, cloud)


# ---- corruption and synthesis


def test_corrupt_contract():
    cloud = np.random.default_rng(0).normal(size=(256, 3)).astype(np.float32)
    np.testing.assert_array_equal(geo.corrupt(cloud, 0.0, 1.0, seed=1), cloud)
    assert geo.corrupt(cloud, 0.01, 0.5, seed=1).shape == (128, 3)
    np.testing.assert_array_equal(geo.corrupt(cloud, 0.02, 0.7, 9), geo.corrupt(cloud, 0.02, 0.7, 9))
    with pytest.raises(SizeError):
        geo.corrupt(cloud[:10], 0.0, 0.5, seed=0)


def test_corrupt_drop_is_a_half_space():
    cloud = np.random.default_rng(1).normal(size=(200, 3)).astype(np.float32)
    kept = geo.corrupt(cloud, 0.0, 0.6, seed=4)
    dropped = np.array([c for c in cloud if not (kept == c).all(axis=1).any()])
    # some plane separates kept from dropped points
    w = geo.rng_for(4, 0xC0).normal(size=3)
    w /= np.linalg.norm(w)
    assert (kept @ w).max() <= (dropped @ w).min() + 1e-6


@pytest.mark.parametrize("style", geo.STYLES)
def test_sphere_radius(style):
    pts = geo.sample_clean(geo.ShapeSpec("sphere", style, 11))
    r = np.linalg.norm(pts - pts.mean(axis=0), axis=1)
    assert np.abs(r - 1).max() < 1e-3


@pytest.mark.parametrize("category", geo.CATEGORIES)
def test_generate_shape_deterministic_and_normalized(category):
    spec = geo.ShapeSpec(category, "TGT_A", 7)
    a, b = geo.generate_shape(spec), geo.generate_shape(spec)
    np.testing.assert_array_equal(a, b)
    assert a.shape == (256, 3)
    np.testing.assert_allclose(a.mean(axis=0), 0, atol=1e-5)
    assert np.linalg.norm(a, axis=1).max() == pytest.approx(1.0, abs=1e-5)


def test_target_b_count():
    assert geo.generate_shape(geo.ShapeSpec("torus", "TGT_B", 3)).shape[0] == 218


def test_density_bias_differs_between_sources():
    a = geo.generate_shape(geo.ShapeSpec("cylinder", "SRC_A", 2, 512))
    b = geo.generate_shape(geo.ShapeSpec("cylinder", "SRC_B", 2, 512))
    # recentring removes the mean shift; the extra mass at +z shows in the median
    assert np.median(b[:, 2]) > np.median(a[:, 2]) + 0.05


def test_unknown_category_or_style():
    with pytest.raises(ConfigError):
        geo.ShapeSpec("teapot", "SRC_A", 0)
    with pytest.raises(ConfigError):
        geo.ShapeSpec("box", "SRC_C", 0)


# ---- XYZ I/O


def test_xyz_round_trip(tmp_path):
    cloud = np.random.default_rng(2).normal(size=(50, 3)).astype(np.float32)
    geo.save_xyz(cloud, tmp_path / "c.xyz")
    np.testing.assert_allclose(geo.load_xyz(tmp_path / "c.xyz"), cloud, atol=1e-6)


def test_xyz_parse_errors(tmp_path):
    (tmp_path / "empty.xyz").write_text("")
    with pytest.raises(ParseError):
        geo.load_xyz(tmp_path / "empty.xyz")
    (tmp_path / "short.xyz").write_text("1 2\n")
    with pytest.raises(ParseError, match="line 1"):
        geo.load_xyz(tmp_path / "short.xyz")
    (tmp_path / "word.xyz").write_text("0 0 0\n1 x 2\n")
    with pytest.raises(ParseError, match="line 2"):
        geo.load_xyz(tmp_path / "word.xyz")
