"""Affine subspace construction and projection against hand values and lstsq."""

import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hda.errors import ConfigError, DegenerateDomain
from hda.seeding import stream_rng
from hda.subspace import (
    DomainSubspace,
    FeatureSet,
    build_subspace,
    pca2d_export,
    project,
    read_feature_csv,
    separation_ratio,
    separation_ratio_2d,
    subspace_distance_sq,
    write_feature_csv,
    write_pca2d_csv,
)


def _sub_from(points) -> DomainSubspace:
    return build_subspace(FeatureSet.from_features(np.asarray(points, dtype=np.float64)))


def test_plane_from_three_points():
    sub = _sub_from([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [1.0, 1.0, 0.0]])
    np.testing.assert_allclose(sub.mean, [2 / 3, 2 / 3, 0.0], atol=1e-12)
    assert sub.rank == 2
    projector = sub.basis @ sub.basis.T
    np.testing.assert_allclose(projector, np.diag([1.0, 1.0, 0.0]), atol=1e-10)
    np.testing.assert_allclose(
        project(sub, np.array([0.5, 0.5, 5.0])), [0.5, 0.5, 0.0], atol=1e-10
    )


def test_line_from_two_points():
    sub = _sub_from([[0.0, 0.0], [2.0, 0.0]])
    np.testing.assert_allclose(sub.mean, [1.0, 0.0], atol=1e-12)
    assert sub.rank == 1
    assert abs(sub.basis[0, 0]) == pytest.approx(1.0, abs=1e-12)
    assert sub.basis[1, 0] == pytest.approx(0.0, abs=1e-12)


def test_repeated_points_do_not_inflate_rank():
    p, q = [0.0, 1.0, 2.0], [3.0, 1.0, 2.0]
    sub = _sub_from([p, q, p, q, p, q])
    assert sub.rank == 1


def test_rank_capped_by_shot_count():
    rng = stream_rng(0, "subspace-test")
    sub = _sub_from(rng.standard_normal((3, 16)))
    assert sub.rank == 2


def test_distance_to_axis_line():
    sub = _sub_from([[0.0, 0.0, 0.0], [4.0, 0.0, 0.0]])
    point = np.array([2.0, 3.0, 4.0])
    np.testing.assert_allclose(project(sub, point), [2.0, 0.0, 0.0], atol=1e-12)
    assert subspace_distance_sq(sub, point) == pytest.approx(25.0, rel=1e-12)


def test_projection_invariants_on_random_instances():
    rng = stream_rng(1, "subspace-test")
    for _ in range(50):
        k = int(rng.integers(2, 9))
        d = int(rng.integers(2, 13))
        sub = _sub_from(rng.standard_normal((k, d)))
        p = 3.0 * rng.standard_normal(d)
        proj = project(sub, p)
        # projecting twice changes nothing
        np.testing.assert_allclose(project(sub, proj), proj, atol=1e-12)
        # the residual is perpendicular to every basis direction
        residual = p - proj
        assert np.max(np.abs(sub.basis.T @ residual)) <= 1e-9
        # the mean is its own projection
        np.testing.assert_allclose(project(sub, sub.mean), sub.mean, atol=1e-12)


def test_projection_invariant_under_basis_rotation():
    rng = stream_rng(2, "subspace-test")
    sub = _sub_from(rng.standard_normal((6, 10)))
    q, _ = np.linalg.qr(rng.standard_normal((sub.rank, sub.rank)))
    rotated = DomainSubspace(
        mean=sub.mean, basis=sub.basis @ q, singular_values=sub.singular_values.copy()
    )
    p = rng.standard_normal(10)
    np.testing.assert_allclose(project(rotated, p), project(sub, p), atol=1e-10)


def test_distance_matches_least_squares():
    rng = stream_rng(3, "subspace-test")
    for _ in range(200):
        k = int(rng.integers(2, 11))
        d = int(rng.integers(2, 33))
        sub = _sub_from(rng.standard_normal((k, d)))
        p = 2.0 * rng.standard_normal(d)
        got = subspace_distance_sq(sub, p)
        coeffs, _, _, _ = np.linalg.lstsq(sub.basis, p - sub.mean, rcond=None)
        want = float(np.sum((sub.mean + sub.basis @ coeffs - p) ** 2))
        assert got == pytest.approx(want, rel=1e-10, abs=1e-12)


def test_single_shot_requires_opt_in():
    fs = FeatureSet.from_features(np.array([[1.0, 2.0, 3.0]]))
    with pytest.raises(DegenerateDomain):
        build_subspace(fs)
    sub = build_subspace(fs, allow_point_subspace=True)
    assert sub.rank == 0
    np.testing.assert_allclose(project(sub, np.array([9.0, 9.0, 9.0])), fs.mean)
    assert subspace_distance_sq(sub, np.array([1.0, 2.0, 4.0])) == pytest.approx(1.0)


def test_subspace_json_round_trip():
    rng = stream_rng(4, "subspace-test")
    sub = _sub_from(rng.standard_normal((5, 7)))
    doc = json.loads(json.dumps(sub.to_json_dict()))
    back = DomainSubspace.from_json_dict(doc)
    np.testing.assert_array_equal(back.mean, sub.mean)
    np.testing.assert_array_equal(back.basis, sub.basis)
    np.testing.assert_array_equal(back.singular_values, sub.singular_values)


def test_point_subspace_json_round_trip():
    sub = build_subspace(
        FeatureSet.from_features(np.array([[1.0, 2.0]])), allow_point_subspace=True
    )
    back = DomainSubspace.from_json_dict(sub.to_json_dict())
    assert back.rank == 0
    assert back.dim == 2


def test_feature_csv_round_trip(tmp_path):
    rng = stream_rng(5, "subspace-test")
    feats = rng.standard_normal((10, 16))
    path = tmp_path / "refs.csv"
    write_feature_csv(path, feats)
    np.testing.assert_array_equal(read_feature_csv(path), feats)


def test_feature_csv_rejects_bad_header(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("3,2\n1.0,2.0,3.0\n", encoding="utf8")
    with pytest.raises(ConfigError):
        read_feature_csv(path)


def test_separation_ratio_hand_value():
    a = FeatureSet.from_features(np.array([[0.0, 0.0], [0.0, 2.0]]), domain_id="a")
    b = FeatureSet.from_features(np.array([[10.0, 0.0], [10.0, 2.0]]), domain_id="b")
    assert separation_ratio([a, b]) == pytest.approx(10.0, rel=1e-12)


def test_separation_ratio_needs_two_sets():
    a = FeatureSet.from_features(np.zeros((2, 2)), domain_id="a")
    with pytest.raises(ConfigError):
        separation_ratio([a])


def test_pca2d_separates_distinct_clusters(tmp_path):
    rng = stream_rng(6, "subspace-test")
    d = 16
    offset = np.zeros(d)
    offset[0] = 10.0
    a = FeatureSet.from_features(
        offset + 0.1 * rng.standard_normal((20, d)), domain_id="a"
    )
    b = FeatureSet.from_features(
        -offset + 0.1 * rng.standard_normal((20, d)), domain_id="b"
    )
    rows = pca2d_export([a, b])
    assert len(rows) == 40
    ax = np.mean([x for label, x, y in rows if label == "a"])
    bx = np.mean([x for label, x, y in rows if label == "b"])
    assert abs(ax - bx) == pytest.approx(20.0, abs=1.0)
    assert separation_ratio_2d(rows) > 10.0
    # the CSV export carries the same rows
    path = tmp_path / "viz.csv"
    write_pca2d_csv(path, rows)
    assert path.read_text(encoding="utf8").count("\n") == 41


def test_pca2d_needs_three_points():
    a = FeatureSet.from_features(np.zeros((2, 4)), domain_id="a")
    with pytest.raises(DegenerateDomain):
        pca2d_export([a])


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), k=st.integers(2, 8), d=st.integers(2, 12))
def test_projection_never_increases_distance(seed, k, d):
    rng = stream_rng(seed, "subspace-prop")
    sub = _sub_from(rng.standard_normal((k, d)))
    p = 3.0 * rng.standard_normal(d)
    proj = project(sub, p)
    # any other subspace point is at least as far away as the projection
    other = sub.mean + sub.basis @ rng.standard_normal(sub.rank)
    assert np.sum((p - proj) ** 2) <= np.sum((p - other) ** 2) + 1e-9
