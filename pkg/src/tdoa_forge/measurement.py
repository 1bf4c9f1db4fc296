"""UWB TDOA measurement model, IMU model, and synthetic data generation.

A TDOA measurement for anchor pair (i, j) is the range difference seen at
the tag antenna u:

    d_ij = ||u - a_j|| - ||u - a_i|| + bias + noise,   u = p + C(q) @ l

with p the body position, C(q) its attitude, and l the body-frame lever
arm from the body origin to the UWB antenna. Anchor indices are 1-based
everywhere, matching the placement file format.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .geometry import (
    DegenerateGeometryError,
    Environment,
    Pose,
    as_vec3,
    quat_to_matrix,
    segment_penetrations,
    skew,
)

# Tag closer to an anchor than this has no well-defined range gradient.
DEGENERATE_RANGE = 1e-9

GRAVITY = np.array([0.0, 0.0, -9.81])


# ---------------------------------------------------------------------------
# placements


def ring_pairs(m: int) -> list[tuple[int, int]]:
    """Round-robin schedule over m anchors: (m,1), (1,2), ..., (m-1,m)."""
    if m < 2:
        raise ValueError(f"need at least 2 anchors for a ring, got {m}")
    return [(m, 1)] + [(k, k + 1) for k in range(1, m)]


def disjoint_pairs(m: int) -> list[tuple[int, int]]:
    """Disjoint schedule: (1,2), (3,4), ..., requires an even anchor count."""
    if m < 2 or m % 2:
        raise ValueError(f"disjoint pairing needs an even anchor count, got {m}")
    return [(k, k + 1) for k in range(1, m, 2)]


@dataclass(frozen=True)
class AnchorPlacement:
    """Anchor positions plus the measurement schedule over them.

    anchors: (m, 3) positions. pairs: 1-based (i, j) index pairs. In
    centralized mode the pairs must chain into a single ring covering all
    anchors; decentralized mode allows any pair set (disjoint pairs plus
    opportunistic extras at run time).
    """

    anchors: np.ndarray
    pairs: tuple[tuple[int, int], ...]
    mode: str = "centralized"

    def __post_init__(self):
        anchors = np.atleast_2d(np.asarray(self.anchors, dtype=float))
        if anchors.ndim != 2 or anchors.shape[1] != 3:
            raise ValueError(f"anchors must be (m, 3), got {anchors.shape}")
        if not np.all(np.isfinite(anchors)):
            raise ValueError("anchor coordinates must be finite")
        object.__setattr__(self, "anchors", anchors)
        pairs = tuple((int(i), int(j)) for i, j in self.pairs)
        object.__setattr__(self, "pairs", pairs)
        m = anchors.shape[0]
        if self.mode not in ("centralized", "decentralized"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if not pairs:
            raise ValueError("pair schedule must be non-empty")
        for i, j in pairs:
            if not (1 <= i <= m and 1 <= j <= m):
                raise ValueError(f"pair ({i}, {j}) outside anchor range 1..{m}")
            if i == j:
                raise ValueError(f"pair ({i}, {j}) repeats an anchor")
        if self.mode == "centralized":
            _check_ring(pairs, m)

    @property
    def n_anchors(self) -> int:
        return self.anchors.shape[0]

    def anchor(self, idx: int) -> np.ndarray:
        """Position of 1-based anchor idx."""
        return self.anchors[idx - 1]

    def pair_array(self) -> np.ndarray:
        """(P, 2) zero-based index array for vectorized math."""
        return np.asarray(self.pairs, dtype=int) - 1


def _check_ring(pairs: tuple[tuple[int, int], ...], m: int) -> None:
    """Validate that pairs chain into one cycle visiting every anchor."""
    if len(pairs) != m:
        raise ValueError(
            f"centralized schedule over {m} anchors needs {m} ring pairs, "
            f"got {len(pairs)}"
        )
    nxt = {}
    for i, j in pairs:
        if i in nxt:
            raise ValueError(f"anchor {i} starts two pairs; not a ring")
        nxt[i] = j
    node = pairs[0][0]
    seen = set()
    for _ in range(m):
        if node not in nxt or node in seen:
            raise ValueError("centralized pair schedule is not a single ring")
        seen.add(node)
        node = nxt[node]
    if node != pairs[0][0] or len(seen) != m:
        raise ValueError("centralized pair schedule is not a single ring")


# ---------------------------------------------------------------------------
# sensor parameters


@dataclass(frozen=True)
class ImuParams:
    """Continuous-time IMU noise densities (noise std per root Hz).

    sigma_a: accelerometer white noise, m/s^2/rtHz.
    sigma_w: gyroscope white noise, rad/s/rtHz.
    sigma_ba, sigma_bw: bias random-walk densities for the accelerometer
    (m/s^3/rtHz) and gyroscope (rad/s^2/rtHz).
    """

    sigma_a: float = 0.02
    sigma_w: float = 0.002
    sigma_ba: float = 2e-4
    sigma_bw: float = 2e-5
    gravity: np.ndarray = field(default_factory=lambda: GRAVITY.copy())

    def __post_init__(self):
        for name in ("sigma_a", "sigma_w", "sigma_ba", "sigma_bw"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        object.__setattr__(self, "gravity", as_vec3(self.gravity, "gravity"))


@dataclass(frozen=True)
class TdoaParams:
    """UWB TDOA noise and NLOS model parameters.

    sigma: LOS range-difference noise std in meters. variance_oos: noise
    variance applied to out-of-schedule pairs (decentralized mode), at
    least sigma^2. nlos_bias_per_meter: meters of bias per meter of
    obstacle penetration difference. nlos_extra_sigma: extra noise std
    added in quadrature when either leg is occluded.
    """

    sigma: float = 0.1
    variance_oos: float = 0.025
    nlos_bias_per_meter: float = 0.4
    nlos_extra_sigma: float = 0.1

    def __post_init__(self):
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")
        if self.variance_oos < self.sigma**2:
            raise ValueError(
                f"variance_oos ({self.variance_oos}) must be at least "
                f"sigma^2 ({self.sigma ** 2})"
            )
        if self.nlos_bias_per_meter < 0 or self.nlos_extra_sigma < 0:
            raise ValueError("NLOS parameters must be non-negative")


# ---------------------------------------------------------------------------
# measurement records


@dataclass(frozen=True)
class ImuRecord:
    t: float
    acc: np.ndarray
    gyro: np.ndarray


@dataclass(frozen=True)
class TdoaRecord:
    t: float
    i: int
    j: int
    d: float


@dataclass(frozen=True)
class GroundTruthRecord:
    t: float
    p: np.ndarray
    q: np.ndarray
    v: np.ndarray


MeasurementRecord = ImuRecord | TdoaRecord | GroundTruthRecord


# ---------------------------------------------------------------------------
# measurement model


def tdoa_predict(pair, pose: Pose, lever_arm, placement: AnchorPlacement) -> float:
    """Noise-free range difference for 1-based anchor pair (i, j)."""
    i, j = pair
    u = pose.position + pose.rotation_matrix() @ as_vec3(lever_arm, "lever_arm")
    ri = np.linalg.norm(u - placement.anchor(i))
    rj = np.linalg.norm(u - placement.anchor(j))
    if ri < DEGENERATE_RANGE or rj < DEGENERATE_RANGE:
        raise DegenerateGeometryError(
            f"tag antenna coincides with anchor {i if ri < rj else j}"
        )
    return float(rj - ri)


def tdoa_jacobian(pair, pose: Pose, lever_arm, placement: AnchorPlacement):
    """Row gradients of the range difference w.r.t. position and attitude.

    Returns (d_dp, d_dtheta), each shape (3,). d_dtheta is taken w.r.t. a
    small body-frame rotation applied on the right of the attitude
    quaternion, the same convention the filter's error state uses.
    """
    i, j = pair
    l = as_vec3(lever_arm, "lever_arm")
    C = pose.rotation_matrix()
    u = pose.position + C @ l
    di = u - placement.anchor(i)
    dj = u - placement.anchor(j)
    ri = np.linalg.norm(di)
    rj = np.linalg.norm(dj)
    if ri < DEGENERATE_RANGE or rj < DEGENERATE_RANGE:
        raise DegenerateGeometryError(
            f"tag antenna coincides with anchor {i if ri < rj else j}"
        )
    g = dj / rj - di / ri
    d_dp = g
    d_dtheta = g @ (-C @ skew(l))
    return d_dp, d_dtheta


def nlos_bias(
    pair, point, placement: AnchorPlacement, env: Environment, params: TdoaParams
) -> float:
    """Through-obstacle bias for a pair measured from a point antenna.

    Each leg is delayed in proportion to the length it spends inside
    obstacle interiors; the range difference inherits the difference of
    the two leg delays.
    """
    i, j = pair
    u = as_vec3(point, "point")
    pen_i = float(segment_penetrations(u, placement.anchor(i), env))
    pen_j = float(segment_penetrations(u, placement.anchor(j), env))
    return params.nlos_bias_per_meter * (pen_j - pen_i)


def link_stds(points, placement: AnchorPlacement, env: Environment, params: TdoaParams):
    """Noise std per (point, pair): sigma for LOS, inflated when either
    leg is occluded. points is (N, 3); returns (N, P)."""
    pts = np.asarray(points, dtype=float)
    pen = segment_penetrations(
        pts[:, None, :], placement.anchors[None, :, :], env
    )  # (N, m)
    occluded = pen > 1e-12
    pz = placement.pair_array()
    either = occluded[:, pz[:, 0]] | occluded[:, pz[:, 1]]
    nlos_std = math.sqrt(params.sigma**2 + params.nlos_extra_sigma**2)
    return np.where(either, nlos_std, params.sigma)


# ---------------------------------------------------------------------------
# synthetic data


def synth_imu(traj, params: ImuParams, rate: float, seed: int) -> list[ImuRecord]:
    """Sample noisy IMU measurements along a trajectory.

    Specific force is C(q)^T (a - g) plus bias plus white noise; the
    gyro reads body angular rate plus bias plus white noise. Biases start
    at zero and random-walk with the configured densities. White-noise
    sample std is density * sqrt(rate).
    """
    if rate <= 0:
        raise ValueError(f"imu rate must be positive, got {rate}")
    rng = np.random.default_rng(seed)
    dt = 1.0 / rate
    n = int(math.floor(traj.duration * rate)) + 1
    ts = np.arange(n) * dt
    pos, quat, vel, acc_t, omega_t = traj.sample_batch(ts)
    std_a = params.sigma_a * math.sqrt(rate)
    std_w = params.sigma_w * math.sqrt(rate)
    noise_a = rng.normal(0.0, std_a, size=(n, 3)) if std_a > 0 else np.zeros((n, 3))
    noise_w = rng.normal(0.0, std_w, size=(n, 3)) if std_w > 0 else np.zeros((n, 3))
    walk_a = np.cumsum(rng.normal(0.0, params.sigma_ba * math.sqrt(dt), size=(n, 3)), axis=0)
    walk_w = np.cumsum(rng.normal(0.0, params.sigma_bw * math.sqrt(dt), size=(n, 3)), axis=0)
    records = []
    for k in range(n):
        C = quat_to_matrix(quat[k])
        f_body = C.T @ (acc_t[k] - params.gravity)
        records.append(
            ImuRecord(
                t=float(ts[k]),
                acc=f_body + walk_a[k] + noise_a[k],
                gyro=omega_t[k] + walk_w[k] + noise_w[k],
            )
        )
    return records


def synth_ground_truth(traj, rate: float) -> list[GroundTruthRecord]:
    """Noise-free pose/velocity records along a trajectory."""
    if rate <= 0:
        raise ValueError(f"ground-truth rate must be positive, got {rate}")
    n = int(math.floor(traj.duration * rate)) + 1
    ts = np.arange(n) / rate
    pos, quat, vel, _, _ = traj.sample_batch(ts)
    return [
        GroundTruthRecord(t=float(ts[k]), p=pos[k], q=quat[k], v=vel[k])
        for k in range(n)
    ]


def synth_tdoa(
    traj,
    placement: AnchorPlacement,
    env: Environment,
    params: TdoaParams,
    rate: float,
    seed: int,
    lever_arm=(0.0, 0.0, 0.0),
    oos_fraction: float = 0.3,
    radio_range: float = 30.0,
) -> list[TdoaRecord]:
    """Sample noisy TDOA measurements along a trajectory.

    ``rate`` is per pair: the scheduled stream emits one measurement per
    slot at rate * n_pairs Hz, cycling the schedule in order. Occluded
    links get the NLOS penetration bias and inflated noise. In
    decentralized mode an extra out-of-schedule stream runs at
    oos_fraction of the scheduled rate, drawing uniformly from anchor
    pairs within radio range of the tag that are not in the schedule;
    those samples use sqrt(variance_oos) noise (plus NLOS inflation in
    quadrature).
    """
    if rate <= 0:
        raise ValueError(f"tdoa rate must be positive, got {rate}")
    if not placement.pairs:
        raise ValueError("placement has no pairs to schedule")
    rng = np.random.default_rng(seed)
    l = as_vec3(lever_arm, "lever_arm")
    n_pairs = len(placement.pairs)
    total_rate = rate * n_pairs
    slot = 1.0 / total_rate
    n = int(math.floor(traj.duration * total_rate)) + 1
    ts = np.arange(n) * slot
    pos, quat, _, _, _ = traj.sample_batch(ts)
    nlos_var_extra = params.nlos_extra_sigma**2

    def antenna(k):
        return pos[k] + quat_to_matrix(quat[k]) @ l

    def one(pair, u, scheduled):
        i, j = pair
        ri = np.linalg.norm(u - placement.anchor(i))
        rj = np.linalg.norm(u - placement.anchor(j))
        if ri < DEGENERATE_RANGE or rj < DEGENERATE_RANGE:
            raise DegenerateGeometryError(
                f"trajectory passes through anchor {i if ri < rj else j}"
            )
        pen_i = float(segment_penetrations(u, placement.anchor(i), env))
        pen_j = float(segment_penetrations(u, placement.anchor(j), env))
        bias = params.nlos_bias_per_meter * (pen_j - pen_i)
        var = params.sigma**2 if scheduled else params.variance_oos
        if pen_i > 1e-12 or pen_j > 1e-12:
            var += nlos_var_extra
        return float(rj - ri + bias + rng.normal(0.0, math.sqrt(var)))

    records = []
    for k in range(n):
        u = antenna(k)
        pair = placement.pairs[k % n_pairs]
        records.append(
            TdoaRecord(t=float(ts[k]), i=pair[0], j=pair[1], d=one(pair, u, True))
        )

    if placement.mode == "decentralized" and oos_fraction > 0:
        scheduled = {frozenset(p) for p in placement.pairs}
        oos_slot = slot / oos_fraction
        n_oos = int(math.floor((traj.duration - 0.5 * oos_slot) / oos_slot)) + 1
        # offset by half a slot so timestamps interleave with the schedule
        ts_oos = (np.arange(max(n_oos, 0)) + 0.5) * oos_slot
        pos_o, quat_o, _, _, _ = traj.sample_batch(ts_oos)
        for k in range(len(ts_oos)):
            u = pos_o[k] + quat_to_matrix(quat_o[k]) @ l
            dists = np.linalg.norm(placement.anchors - u, axis=1)
            in_range = np.flatnonzero(dists <= radio_range) + 1
            eligible = [
                (int(a), int(b))
                for ai, a in enumerate(in_range)
                for b in in_range[ai + 1 :]
                if frozenset((int(a), int(b))) not in scheduled
            ]
            if not eligible:
                continue
            pair = eligible[rng.integers(len(eligible))]
            if rng.integers(2):
                pair = (pair[1], pair[0])
            records.append(
                TdoaRecord(
                    t=float(ts_oos[k]), i=pair[0], j=pair[1], d=one(pair, u, False)
                )
            )
        records.sort(key=lambda r: r.t)
    return records


# ---------------------------------------------------------------------------
# file formats: measurement log (JSONL) and placement (JSON)


def _fmt_vec(v) -> list[float]:
    return [float(x) for x in v]


def record_to_dict(rec: MeasurementRecord) -> dict:
    if isinstance(rec, ImuRecord):
        return {"t": rec.t, "type": "imu", "acc": _fmt_vec(rec.acc), "gyro": _fmt_vec(rec.gyro)}
    if isinstance(rec, TdoaRecord):
        return {"t": rec.t, "type": "tdoa", "i": rec.i, "j": rec.j, "d": rec.d}
    if isinstance(rec, GroundTruthRecord):
        return {
            "t": rec.t,
            "type": "gt",
            "p": _fmt_vec(rec.p),
            "q": _fmt_vec(rec.q),
            "v": _fmt_vec(rec.v),
        }
    raise TypeError(f"unknown record type {type(rec)!r}")


def _parse_record(data: dict, where: str) -> MeasurementRecord:
    kind = data.get("type")
    try:
        t = float(data["t"])
        if kind == "imu":
            acc = as_vec3(data["acc"], "acc")
            gyro = as_vec3(data["gyro"], "gyro")
            return ImuRecord(t=t, acc=acc, gyro=gyro)
        if kind == "tdoa":
            return TdoaRecord(t=t, i=int(data["i"]), j=int(data["j"]), d=float(data["d"]))
        if kind == "gt":
            q = np.asarray(data["q"], dtype=float)
            if q.shape != (4,):
                raise ValueError(f"field 'q' must have 4 components, got {q.shape}")
            return GroundTruthRecord(
                t=t, p=as_vec3(data["p"], "p"), q=q, v=as_vec3(data["v"], "v")
            )
    except KeyError as exc:
        raise ValueError(f"{where}: missing field {exc}") from exc
    except (TypeError, ValueError) as exc:
        raise ValueError(f"{where}: {exc}") from exc
    raise ValueError(f"{where}: unknown record type {kind!r}")


def write_log(path, records) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(record_to_dict(rec)))
            fh.write("\n")


def read_log(path, require_sorted: bool = True) -> list[MeasurementRecord]:
    records = []
    last_t = -math.inf
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            where = f"{path}: line {lineno}"
            try:
                data = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{where}: {exc.msg}") from exc
            rec = _parse_record(data, where)
            if require_sorted and rec.t < last_t:
                raise ValueError(
                    f"{where}: field 't' goes backwards ({rec.t} after {last_t})"
                )
            last_t = max(last_t, rec.t)
            records.append(rec)
    return records


def placement_to_dict(placement: AnchorPlacement) -> dict:
    return {
        "anchors": [_fmt_vec(a) for a in placement.anchors],
        "pairs": [[int(i), int(j)] for i, j in placement.pairs],
        "mode": placement.mode,
    }


def placement_from_dict(data: dict, source: str = "<dict>") -> AnchorPlacement:
    try:
        return AnchorPlacement(
            anchors=np.asarray(data["anchors"], dtype=float),
            pairs=tuple((int(i), int(j)) for i, j in data["pairs"]),
            mode=str(data.get("mode", "centralized")),
        )
    except KeyError as exc:
        raise ValueError(f"{source}: missing required field {exc}") from exc
    except (TypeError, ValueError) as exc:
        raise ValueError(f"{source}: {exc}") from exc


def save_placement(placement: AnchorPlacement, path) -> None:
    with open(path, "w") as fh:
        json.dump(placement_to_dict(placement), fh, indent=2)
        fh.write("\n")


def load_placement(path) -> AnchorPlacement:
    with open(path) as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValueError(f"{path}: line {exc.lineno}: {exc.msg}") from exc
    return placement_from_dict(data, source=str(path))
