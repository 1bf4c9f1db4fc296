import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tdoa_forge.geometry import (
    Environment,
    Obstacle,
    Pose,
    environment_from_dict,
    environment_to_dict,
    load_environment,
    penetration_length,
    quat_conjugate,
    quat_from_axis_angle,
    quat_from_small_angle,
    quat_from_yaw,
    quat_multiply,
    quat_normalize,
    quat_to_matrix,
    rotate,
    save_environment,
    segment_occluded,
    skew,
)

finite_floats = st.floats(
    min_value=-100.0, max_value=100.0, allow_nan=False, allow_infinity=False
)


def unit_quats(rng, n):
    q = rng.standard_normal((n, 4))
    return q / np.linalg.norm(q, axis=1, keepdims=True)


# ---------------------------------------------------------------------------
# quaternions


def test_small_angle_zero_is_identity():
    assert np.array_equal(quat_from_small_angle((0, 0, 0)), [1.0, 0.0, 0.0, 0.0])


def test_small_angle_first_order_form():
    # closed-form normalization of (1, 0.01, 0, 0)
    expected = np.array([1.0, 0.01, 0.0, 0.0]) / math.sqrt(1.0001)
    assert quat_from_small_angle((0.02, 0, 0)) == pytest.approx(expected, abs=1e-15)


def test_small_angle_large_rotation_uses_exact_map():
    q = quat_from_small_angle((math.pi / 2, 0, 0))
    expected = [math.cos(math.pi / 4), math.sin(math.pi / 4), 0.0, 0.0]
    assert q == pytest.approx(expected, abs=1e-15)


def test_small_angle_matches_first_order_below_1e2():
    rng = np.random.default_rng(3)
    for _ in range(200):
        dt = rng.standard_normal(3)
        dt *= rng.uniform(0, 1e-2) / np.linalg.norm(dt)
        q = quat_from_small_angle(dt)
        first = np.concatenate([[1.0], 0.5 * dt])
        first /= np.linalg.norm(first)
        assert q == pytest.approx(first, abs=1e-7)


def test_small_angle_non_finite_rejected():
    with pytest.raises(ValueError):
        quat_from_small_angle((np.nan, 0, 0))


def test_rotate_identity_and_zero_vector():
    ident = np.array([1.0, 0, 0, 0])
    assert rotate(ident, (1, 2, 3)) == pytest.approx([1, 2, 3], abs=0)
    q = quat_from_axis_angle((1, 1, 0), 0.7)
    assert rotate(q, (0, 0, 0)) == pytest.approx([0, 0, 0], abs=0)


def test_rotate_quarter_turn_about_z():
    q = quat_from_axis_angle((0, 0, 1), math.pi / 2)
    assert rotate(q, (1, 0, 0)) == pytest.approx([0, 1, 0], abs=1e-15)


def test_quat_from_yaw_matches_axis_angle():
    assert quat_from_yaw(0.8) == pytest.approx(
        quat_from_axis_angle((0, 0, 1), 0.8), abs=1e-15
    )


def test_rotate_agrees_with_matrix():
    rng = np.random.default_rng(11)
    for q in unit_quats(rng, 50):
        v = rng.standard_normal(3)
        assert rotate(q, v) == pytest.approx(quat_to_matrix(q) @ v, abs=1e-12)


def test_matrix_of_product_is_product_of_matrices():
    rng = np.random.default_rng(12)
    qs = unit_quats(rng, 40)
    for a, b in zip(qs[:20], qs[20:]):
        left = quat_to_matrix(quat_multiply(a, b))
        right = quat_to_matrix(a) @ quat_to_matrix(b)
        assert left == pytest.approx(right, abs=1e-12)


@given(st.lists(finite_floats, min_size=8, max_size=8))
def test_product_of_unit_quaternions_is_unit(vals):
    a = np.array(vals[:4])
    b = np.array(vals[4:])
    if np.linalg.norm(a) < 1e-3 or np.linalg.norm(b) < 1e-3:
        return
    q = quat_multiply(quat_normalize(a), quat_normalize(b))
    assert abs(np.linalg.norm(q) - 1.0) < 1e-9


@given(
    st.lists(finite_floats, min_size=4, max_size=4),
    st.lists(finite_floats, min_size=3, max_size=3),
)
def test_rotate_preserves_norm_and_inverts(qv, v):
    qv = np.array(qv)
    if np.linalg.norm(qv) < 1e-3:
        return
    q = quat_normalize(qv)
    v = np.array(v)
    r = rotate(q, v)
    assert np.linalg.norm(r) == pytest.approx(
        np.linalg.norm(v), rel=1e-9, abs=1e-12
    )
    back = rotate(quat_conjugate(q), r)
    assert back == pytest.approx(v, abs=1e-9)


def test_skew_matches_cross_product():
    rng = np.random.default_rng(5)
    a, b = rng.standard_normal(3), rng.standard_normal(3)
    assert skew(a) @ b == pytest.approx(np.cross(a, b), abs=1e-15)


def test_pose_rejects_non_unit_orientation():
    with pytest.raises(ValueError):
        Pose(position=(0, 0, 0), orientation=(1, 1, 0, 0))


# ---------------------------------------------------------------------------
# occlusion


BOX_ENV = Environment(
    boundary_min=(-5, -5, -5),
    boundary_max=(5, 5, 5),
    obstacles=(Obstacle(min_corner=(0.5, -1, -1), max_corner=(1.5, 1, 1)),),
)
EMPTY_ENV = Environment(boundary_min=(-5, -5, -5), boundary_max=(5, 5, 5))


def test_segment_through_box_center_occluded():
    assert segment_occluded((0, 0, 0), (2, 0, 0), BOX_ENV)


def test_segment_with_no_obstacles_clear():
    assert not segment_occluded((0, 0, 0), (2, 0, 0), EMPTY_ENV)


def test_segment_passing_beside_box_clear():
    assert not segment_occluded((0, 2, 0), (2, 2, 0), BOX_ENV)


def test_endpoint_touching_face_does_not_count():
    # segment ends exactly on the box face at x = 0.5
    assert not segment_occluded((0, 0, 0), (0.5, 0, 0), BOX_ENV)
    # sliding along a face is also not an interior intersection
    assert not segment_occluded((0.5, -2, 0), (0.5, 2, 0), BOX_ENV)


def test_penetration_length_through_box():
    assert penetration_length((0, 0, 0), (2, 0, 0), BOX_ENV) == pytest.approx(1.0)
    assert penetration_length((0, 2, 0), (2, 2, 0), BOX_ENV) == 0.0


def sampled_penetration(a, b, env, step=1e-4):
    """Brute-force oracle: fraction of sampled points strictly inside."""
    a, b = np.asarray(a, float), np.asarray(b, float)
    length = np.linalg.norm(b - a)
    n = int(length / step)
    ts = (np.arange(n) + 0.5) / n
    pts = a + ts[:, None] * (b - a)
    inside = np.zeros(n, dtype=bool)
    for ob in env.obstacles:
        inside |= ob.contains_interior(pts)
    return length * inside.mean()


def test_penetration_through_two_boxes_matches_sampling():
    env = Environment(
        boundary_min=(-5, -5, -5),
        boundary_max=(5, 5, 5),
        obstacles=(
            Obstacle(min_corner=(-2, -1, -1), max_corner=(-1, 1, 1)),
            Obstacle(min_corner=(1.2, -1, -1), max_corner=(2.2, 1, 1)),
        ),
    )
    a, b = (-4.0, 0.3, -0.2), (4.0, -0.4, 0.5)
    got = penetration_length(a, b, env)
    assert got == pytest.approx(sampled_penetration(a, b, env), abs=1e-3)
    assert got == pytest.approx(2.0, abs=0.05)  # two unit-deep chords, slightly oblique


@given(st.lists(st.floats(min_value=-4.5, max_value=4.5), min_size=6, max_size=6))
@settings(max_examples=150)
def test_occlusion_symmetric_and_penetration_bounded(vals):
    a, b = np.array(vals[:3]), np.array(vals[3:])
    if np.linalg.norm(a - b) < 1e-9:
        return
    assert segment_occluded(a, b, BOX_ENV) == segment_occluded(b, a, BOX_ENV)
    pen = penetration_length(a, b, BOX_ENV)
    assert 0.0 <= pen <= np.linalg.norm(a - b) + 1e-12
    assert (pen > 0) == segment_occluded(a, b, BOX_ENV)


# ---------------------------------------------------------------------------
# environment model and file format


def test_obstacle_corners_must_be_ordered():
    with pytest.raises(ValueError):
        Obstacle(min_corner=(1, 0, 0), max_corner=(0, 1, 1))


def test_obstacle_outside_boundary_rejected():
    with pytest.raises(ValueError, match="outside"):
        Environment(
            boundary_min=(0, 0, 0),
            boundary_max=(5, 5, 5),
            obstacles=(Obstacle(min_corner=(4, 4, 4), max_corner=(6, 5, 5)),),
        )


def test_environment_json_round_trip(tmp_path):
    env = Environment(
        boundary_min=(0, 0, 0),
        boundary_max=(10, 8, 3),
        obstacles=(Obstacle(min_corner=(1, 1, 0), max_corner=(2, 2, 3)),),
        name="roundtrip",
    )
    path = tmp_path / "env.json"
    save_environment(env, path)
    back = load_environment(path)
    assert back.name == env.name
    assert np.array_equal(back.boundary_min, env.boundary_min)
    assert np.array_equal(back.boundary_max, env.boundary_max)
    assert len(back.obstacles) == 1
    assert np.array_equal(back.obstacles[0].min_corner, (1, 1, 0))
    # dict form matches the documented schema
    d = environment_to_dict(env)
    assert set(d) == {"name", "boundary", "obstacles"}
    assert environment_from_dict(d).name == "roundtrip"


def test_environment_load_errors_name_file_and_line(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text('{"name": "x",\n  "boundary": oops}\n')
    with pytest.raises(ValueError, match=r"bad\.json.*line 2"):
        load_environment(path)


def test_environment_missing_field_named(tmp_path):
    path = tmp_path / "short.json"
    path.write_text(json.dumps({"name": "x"}))
    with pytest.raises(ValueError, match="boundary"):
        load_environment(path)
