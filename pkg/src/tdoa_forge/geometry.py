"""3D geometry primitives shared by the whole toolkit.

Conventions, fixed once here so every module agrees:

* Vectors are plain numpy arrays of shape (3,), z-up, meters.
* Quaternions are numpy arrays [w, x, y, z] (scalar first), Hamilton
  product, body-to-inertial rotation. ``rotate(q, v)`` maps a body-frame
  vector into the inertial frame.
* Environments are an axis-aligned boundary box plus axis-aligned box
  obstacles. Occlusion is an *open interior* test: a segment grazing a
  face or touching a box only at an endpoint is not occluded.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

# Unit-norm tolerance for quaternions after any operation.
QUAT_NORM_TOL = 1e-9

# Below this rotation angle (rad) the first-order quaternion construction
# is used; above it the exact exponential map.
SMALL_ANGLE_SWITCH = 1e-3

# Chords shorter than this through an obstacle interior count as grazing.
_CHORD_EPS = 1e-12


class DegenerateGeometryError(ValueError):
    """A geometric configuration with no well-defined answer."""


def vec3(x: float, y: float, z: float) -> np.ndarray:
    """Build a validated 3-vector."""
    v = np.array([x, y, z], dtype=float)
    if not np.all(np.isfinite(v)):
        raise ValueError(f"vector components must be finite, got {v}")
    return v


def as_vec3(v, name: str = "vector") -> np.ndarray:
    """Coerce to a finite float (3,) array, copying the input."""
    arr = np.array(v, dtype=float).reshape(-1)
    if arr.shape != (3,):
        raise ValueError(f"{name} must have 3 components, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} components must be finite, got {arr}")
    return arr


def skew(v) -> np.ndarray:
    """Cross-product matrix: skew(a) @ b == cross(a, b)."""
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


# ---------------------------------------------------------------------------
# quaternions


def quat_normalize(q) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    n = np.linalg.norm(q)
    if not np.isfinite(n) or n < QUAT_NORM_TOL:
        raise ValueError(f"cannot normalize quaternion with norm {n}")
    return q / n


def quat_multiply(a, b) -> np.ndarray:
    """Hamilton product a * b (both scalar-first)."""
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ]
    )


def quat_conjugate(q) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    return q * np.array([1.0, -1.0, -1.0, -1.0])


def quat_to_matrix(q) -> np.ndarray:
    """Rotation matrix C such that C @ v_body == rotate(q, v_body)."""
    w, x, y, z = q
    ww, xx, yy, zz = w * w, x * x, y * y, z * z
    return np.array(
        [
            [ww + xx - yy - zz, 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), ww - xx + yy - zz, 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), ww - xx - yy + zz],
        ]
    )


def quat_from_axis_angle(axis, angle: float) -> np.ndarray:
    axis = as_vec3(axis, "axis")
    n = np.linalg.norm(axis)
    if n < 1e-15:
        raise ValueError("rotation axis must be nonzero")
    half = 0.5 * angle
    return np.concatenate([[np.cos(half)], np.sin(half) * axis / n])


def quat_from_small_angle(delta_theta) -> np.ndarray:
    """Quaternion for a rotation vector, tuned for small corrections.

    Uses the normalized first-order form (1, delta_theta/2) below
    SMALL_ANGLE_SWITCH rad and the exact exponential map above it, so the
    result is a unit quaternion for any finite input.
    """
    dt = as_vec3(delta_theta, "delta_theta")
    angle = np.linalg.norm(dt)
    if angle < SMALL_ANGLE_SWITCH:
        q = np.concatenate([[1.0], 0.5 * dt])
        return q / np.linalg.norm(q)
    half = 0.5 * angle
    return np.concatenate([[np.cos(half)], (np.sin(half) / angle) * dt])


def quat_from_yaw(yaw: float) -> np.ndarray:
    """Rotation about +z by yaw radians."""
    return np.array([np.cos(0.5 * yaw), 0.0, 0.0, np.sin(0.5 * yaw)])


def rotate(q, v) -> np.ndarray:
    """Apply the rotation q (body->inertial) to vector v."""
    w = q[0]
    u = np.asarray(q[1:4], dtype=float)
    v = np.asarray(v, dtype=float)
    # Rodrigues-style expansion; cheaper than building the matrix.
    return v + 2.0 * np.cross(u, np.cross(u, v) + w * v)


@dataclass(frozen=True)
class Pose:
    """Rigid-body pose: position plus body-to-inertial orientation."""

    position: np.ndarray
    orientation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "position", as_vec3(self.position, "position"))
        q = np.array(self.orientation, dtype=float).reshape(-1)
        if q.shape != (4,):
            raise ValueError(f"orientation must have 4 components, got {q.shape}")
        n = np.linalg.norm(q)
        if abs(n - 1.0) > 1e-6:
            raise ValueError(f"orientation must be unit norm, got |q| = {n}")
        object.__setattr__(self, "orientation", q / n)

    def rotation_matrix(self) -> np.ndarray:
        return quat_to_matrix(self.orientation)


# ---------------------------------------------------------------------------
# environment model


@dataclass(frozen=True)
class Obstacle:
    """Axis-aligned box obstacle."""

    min_corner: np.ndarray
    max_corner: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "min_corner", as_vec3(self.min_corner, "min_corner"))
        object.__setattr__(self, "max_corner", as_vec3(self.max_corner, "max_corner"))
        if not np.all(self.min_corner < self.max_corner):
            raise ValueError(
                f"obstacle min corner {self.min_corner} must be strictly below "
                f"max corner {self.max_corner} on every axis"
            )

    def contains_interior(self, points: np.ndarray) -> np.ndarray:
        """Strict-interior membership for an (..., 3) array of points."""
        pts = np.asarray(points, dtype=float)
        return np.all((pts > self.min_corner) & (pts < self.max_corner), axis=-1)


@dataclass(frozen=True)
class Environment:
    """Boundary box plus obstacles; every obstacle lies inside the boundary."""

    boundary_min: np.ndarray
    boundary_max: np.ndarray
    obstacles: tuple[Obstacle, ...] = ()
    name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "boundary_min", as_vec3(self.boundary_min, "boundary min"))
        object.__setattr__(self, "boundary_max", as_vec3(self.boundary_max, "boundary max"))
        object.__setattr__(self, "obstacles", tuple(self.obstacles))
        if not np.all(self.boundary_min < self.boundary_max):
            raise ValueError("boundary min must be strictly below max on every axis")
        for k, ob in enumerate(self.obstacles):
            inside = np.all(ob.min_corner >= self.boundary_min) and np.all(
                ob.max_corner <= self.boundary_max
            )
            if not inside:
                raise ValueError(f"obstacle {k} extends outside the boundary box")

    def contains(self, points: np.ndarray) -> np.ndarray:
        """Closed-boundary membership for an (..., 3) array of points."""
        pts = np.asarray(points, dtype=float)
        return np.all((pts >= self.boundary_min) & (pts <= self.boundary_max), axis=-1)

    def extent(self) -> np.ndarray:
        return self.boundary_max - self.boundary_min


def _box_chord_lengths(starts, ends, box_min, box_max) -> np.ndarray:
    """Length of each segment's chord through the open interior of one box.

    Slab clipping: intersect the per-axis parameter intervals where the
    segment lies strictly inside each slab, clip to (0, 1), and scale by
    segment length. Broadcasts over leading dimensions of (..., 3) inputs.
    """
    s = np.asarray(starts, dtype=float)
    e = np.asarray(ends, dtype=float)
    d = e - s
    t_lo = np.zeros(s.shape[:-1])
    t_hi = np.ones(s.shape[:-1])
    for axis in range(3):
        da = d[..., axis]
        sa = s[..., axis]
        parallel = np.abs(da) < 1e-15
        with np.errstate(divide="ignore", invalid="ignore"):
            t1 = (box_min[axis] - sa) / da
            t2 = (box_max[axis] - sa) / da
        lo = np.minimum(t1, t2)
        hi = np.maximum(t1, t2)
        # Parallel to this slab: inside it for all t if strictly between the
        # planes, otherwise the segment misses the box entirely.
        inside_slab = (sa > box_min[axis]) & (sa < box_max[axis])
        lo = np.where(parallel, np.where(inside_slab, -np.inf, np.inf), lo)
        hi = np.where(parallel, np.where(inside_slab, np.inf, -np.inf), hi)
        t_lo = np.maximum(t_lo, lo)
        t_hi = np.minimum(t_hi, hi)
    seg_len = np.linalg.norm(d, axis=-1)
    chord = np.clip(t_hi - t_lo, 0.0, None) * seg_len
    return chord


def segment_penetrations(starts, ends, env: Environment) -> np.ndarray:
    """Total obstacle-interior length for each of a batch of segments.

    ``starts`` and ``ends`` broadcast as (..., 3); the result has the
    broadcast leading shape. Overlapping obstacles double-count, which is
    the conservative choice for bias modeling.
    """
    s = np.asarray(starts, dtype=float)
    e = np.asarray(ends, dtype=float)
    s, e = np.broadcast_arrays(s, e)
    total = np.zeros(s.shape[:-1])
    for ob in env.obstacles:
        total += _box_chord_lengths(s, e, ob.min_corner, ob.max_corner)
    return total


def penetration_length(a, b, env: Environment) -> float:
    """Length of the segment a-b that lies inside obstacle interiors."""
    a = as_vec3(a, "segment start")
    b = as_vec3(b, "segment end")
    return float(segment_penetrations(a, b, env))


def segment_occluded(a, b, env: Environment) -> bool:
    """True iff the open segment a-b intersects any obstacle interior.

    Endpoints touching a face, or a segment sliding along a face, do not
    count: the test is penetration_length > 0 so the two functions can
    never disagree.
    """
    return penetration_length(a, b, env) > _CHORD_EPS


# ---------------------------------------------------------------------------
# environment file format


def environment_to_dict(env: Environment) -> dict:
    return {
        "name": env.name,
        "boundary": {
            "min": [float(v) for v in env.boundary_min],
            "max": [float(v) for v in env.boundary_max],
        },
        "obstacles": [
            {
                "min": [float(v) for v in ob.min_corner],
                "max": [float(v) for v in ob.max_corner],
            }
            for ob in env.obstacles
        ],
    }


def environment_from_dict(data: dict, source: str = "<dict>") -> Environment:
    try:
        boundary = data["boundary"]
        obstacles = [
            Obstacle(ob["min"], ob["max"]) for ob in data.get("obstacles", [])
        ]
        return Environment(
            boundary_min=boundary["min"],
            boundary_max=boundary["max"],
            obstacles=tuple(obstacles),
            name=str(data.get("name", "")),
        )
    except KeyError as exc:
        raise ValueError(f"{source}: missing required field {exc}") from exc
    except (TypeError, ValueError) as exc:
        raise ValueError(f"{source}: {exc}") from exc


def save_environment(env: Environment, path) -> None:
    with open(path, "w") as fh:
        json.dump(environment_to_dict(env), fh, indent=2)
        fh.write("\n")


def load_environment(path) -> Environment:
    with open(path) as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValueError(f"{path}: line {exc.lineno}: {exc.msg}") from exc
    return environment_from_dict(data, source=str(path))
