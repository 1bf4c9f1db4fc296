"""Error-state Kalman filter fusing strapdown IMU with UWB TDOA.

Nominal state: position p, velocity v, body-to-inertial attitude
quaternion q, accelerometer bias b_a, gyro bias b_w. The filter
propagates a 15-dimensional error state

    dx = (dp, dv, dtheta, db_a, db_w)

with the attitude error dtheta applied on the right of the nominal
quaternion (body frame). Corrections inject the error into the nominal
state and reset the error to zero, with the matching covariance reset.

The filter never sees the environment map: measurement noise uses the
scheduled/out-of-schedule split and NLOS contamination is handled by the
innovation gate.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .geometry import (
    DegenerateGeometryError,
    Pose,
    as_vec3,
    quat_from_small_angle,
    quat_multiply,
    quat_normalize,
    quat_to_matrix,
    skew,
)
from .measurement import (
    AnchorPlacement,
    GroundTruthRecord,
    ImuParams,
    ImuRecord,
    TdoaRecord,
)
from .multilateration import multilaterate

# Error-state block layout
_P_SLICE = slice(0, 3)
_V_SLICE = slice(3, 6)
_TH_SLICE = slice(6, 9)
_BA_SLICE = slice(9, 12)
_BW_SLICE = slice(12, 15)

# Gap above which a single predict step is suspicious (sensor dropout).
MAX_NOMINAL_DT = 0.1

# Corrections this large mean the linearization is meaningless.
MAX_CORRECTION_ANGLE = 0.5

# Covariance eigenvalues are allowed to dip this far below zero from
# rounding before clamping is considered a failure.
_EIG_TOL = -1e-9


class FilterDivergenceError(RuntimeError):
    """Raised when a correction is too large to linearize."""

    def __init__(self, message: str, t: float | None = None):
        super().__init__(message)
        self.t = t


class NotStaticError(ValueError):
    """Raised when initialization data does not look like a static hold."""


@dataclass(frozen=True)
class NavState:
    """Nominal filter state at time t."""

    p: np.ndarray
    v: np.ndarray
    q: np.ndarray
    b_a: np.ndarray
    b_w: np.ndarray
    t: float

    def pose(self) -> Pose:
        return Pose(position=self.p, orientation=self.q)


@dataclass(frozen=True)
class ErrorState:
    """Error mean (held at zero between corrections) and covariance."""

    dx: np.ndarray
    P: np.ndarray

    def __post_init__(self):
        dx = np.asarray(self.dx, dtype=float)
        P = np.asarray(self.P, dtype=float)
        if dx.shape != (15,) or P.shape != (15, 15):
            raise ValueError("error state must be (15,) mean and (15, 15) covariance")
        object.__setattr__(self, "dx", dx)
        object.__setattr__(self, "P", P)


@dataclass(frozen=True)
class EskfConfig:
    """Filter tuning: lever arm, measurement variances, gate, priors.

    variance_scheduled is the measurement noise variance applied to pairs
    in the placement schedule; variance_oos covers opportunistic pairs.
    gate_gamma thresholds |innovation|/sqrt(S) in scalar mode, or its
    square in chi2 mode.
    """

    lever_arm: np.ndarray = field(default_factory=lambda: np.zeros(3))
    sigma_tdoa: float = 0.1
    variance_scheduled: float = 0.01
    variance_oos: float = 0.025
    gate_gamma: float = 5.0
    gate_mode: str = "scalar"
    imu: ImuParams = field(default_factory=ImuParams)
    init_pos_var: float = 25.0
    init_pos_var_fix: float = 1.0
    init_vel_var: float = 1.0
    init_rollpitch_var: float = 0.05
    init_yaw_var: float = 1.0
    init_ba_var: float = 1e-2
    init_bw_var: float = 1e-4

    def __post_init__(self):
        object.__setattr__(self, "lever_arm", as_vec3(self.lever_arm, "lever_arm"))
        if self.gate_mode not in ("scalar", "chi2"):
            raise ValueError(f"unknown gate_mode {self.gate_mode!r}")
        for name in ("sigma_tdoa", "variance_scheduled", "variance_oos", "gate_gamma"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


@dataclass(frozen=True)
class GateDecision:
    """Outcome of one TDOA correction attempt."""

    t: float
    pair: tuple[int, int]
    innovation: float
    innovation_var: float
    normalized: float
    accepted: bool
    reason: str  # "accepted" | "gated" | "degenerate"


def _symmetrize(P: np.ndarray) -> np.ndarray:
    return 0.5 * (P + P.T)


def _clamp_psd(P: np.ndarray) -> np.ndarray:
    """Symmetrize and clamp small negative eigenvalues from rounding."""
    P = _symmetrize(P)
    w, V = np.linalg.eigh(P)
    if w[0] >= 0.0:
        return P
    if w[0] < _EIG_TOL * max(1.0, w[-1]):
        # More than rounding: still clamp, but loudly.
        warnings.warn(
            f"covariance eigenvalue {w[0]:.3e} clamped to zero", RuntimeWarning
        )
    w = np.clip(w, 0.0, None)
    return _symmetrize((V * w) @ V.T)


# ---------------------------------------------------------------------------
# prediction


def predict(
    state: NavState, err: ErrorState, acc, gyro, dt: float, cfg: EskfConfig
) -> tuple[NavState, ErrorState]:
    """Strapdown propagation of the nominal state and covariance.

    acc/gyro are the raw IMU sample held constant over dt. Emits a
    warning (and still propagates) for dt above MAX_NOMINAL_DT.
    """
    if dt <= 0:
        raise ValueError(f"dt must be positive, got {dt}")
    if dt > MAX_NOMINAL_DT:
        warnings.warn(
            f"IMU gap of {dt:.3f} s exceeds {MAX_NOMINAL_DT} s; covariance still propagated",
            RuntimeWarning,
        )
    acc = np.asarray(acc, dtype=float)
    gyro = np.asarray(gyro, dtype=float)
    g = cfg.imu.gravity
    C = quat_to_matrix(state.q)
    f = acc - state.b_a  # bias-corrected specific force, body frame
    w = gyro - state.b_w  # bias-corrected angular rate
    a_world = C @ f + g

    p_new = state.p + state.v * dt + 0.5 * a_world * dt * dt
    v_new = state.v + a_world * dt
    q_new = quat_normalize(quat_multiply(state.q, quat_from_small_angle(w * dt)))

    F = np.eye(15)
    F[_P_SLICE, _V_SLICE] = np.eye(3) * dt
    F[_V_SLICE, _TH_SLICE] = -C @ skew(f) * dt
    F[_V_SLICE, _BA_SLICE] = -C * dt
    F[_TH_SLICE, _TH_SLICE] = np.eye(3) - skew(w * dt)
    F[_TH_SLICE, _BW_SLICE] = -np.eye(3) * dt

    imu = cfg.imu
    Qd = np.zeros(15)
    Qd[_V_SLICE] = imu.sigma_a**2 * dt
    Qd[_TH_SLICE] = imu.sigma_w**2 * dt
    Qd[_BA_SLICE] = imu.sigma_ba**2 * dt
    Qd[_BW_SLICE] = imu.sigma_bw**2 * dt

    P_new = _symmetrize(F @ err.P @ F.T + np.diag(Qd))
    new_state = NavState(
        p=p_new, v=v_new, q=q_new, b_a=state.b_a.copy(), b_w=state.b_w.copy(), t=state.t + dt
    )
    return new_state, ErrorState(dx=err.dx.copy(), P=P_new)


# ---------------------------------------------------------------------------
# correction


def inject_and_reset(state: NavState, err: ErrorState) -> tuple[NavState, ErrorState]:
    """Fold the error mean into the nominal state and re-zero it.

    The covariance gets the standard reset Jacobian, identity except the
    attitude block I - skew(dtheta/2).
    """
    dx = err.dx
    dtheta = dx[_TH_SLICE]
    angle = float(np.linalg.norm(dtheta))
    if angle >= MAX_CORRECTION_ANGLE:
        raise FilterDivergenceError(
            f"attitude correction of {angle:.3f} rad at t={state.t:.3f} exceeds "
            f"{MAX_CORRECTION_ANGLE} rad",
            t=state.t,
        )
    new_state = NavState(
        p=state.p + dx[_P_SLICE],
        v=state.v + dx[_V_SLICE],
        q=quat_normalize(quat_multiply(state.q, quat_from_small_angle(dtheta))),
        b_a=state.b_a + dx[_BA_SLICE],
        b_w=state.b_w + dx[_BW_SLICE],
        t=state.t,
    )
    G = np.eye(15)
    G[_TH_SLICE, _TH_SLICE] = np.eye(3) - skew(0.5 * dtheta)
    P_new = _clamp_psd(G @ err.P @ G.T)
    return new_state, ErrorState(dx=np.zeros(15), P=P_new)


def correct_tdoa(
    state: NavState,
    err: ErrorState,
    record: TdoaRecord,
    placement: AnchorPlacement,
    cfg: EskfConfig,
) -> tuple[NavState, ErrorState, GateDecision]:
    """Gated scalar TDOA update followed immediately by injection.

    A rejected (or degenerate) measurement returns the inputs unchanged,
    bit for bit, plus the gate decision that says why.
    """
    pair = (record.i, record.j)
    scheduled = any(
        (record.i, record.j) == p or (record.j, record.i) == p for p in placement.pairs
    )
    R = cfg.variance_scheduled if scheduled else cfg.variance_oos

    C = quat_to_matrix(state.q)
    u = state.p + C @ cfg.lever_arm
    a_i = placement.anchor(record.i)
    a_j = placement.anchor(record.j)
    di = u - a_i
    dj = u - a_j
    ri = float(np.linalg.norm(di))
    rj = float(np.linalg.norm(dj))
    if ri < 1e-9 or rj < 1e-9:
        decision = GateDecision(
            t=record.t,
            pair=pair,
            innovation=float("nan"),
            innovation_var=float(R),
            normalized=float("inf"),
            accepted=False,
            reason="degenerate",
        )
        return state, err, decision

    predicted = rj - ri
    g = dj / rj - di / ri
    H = np.zeros((1, 15))
    H[0, _P_SLICE] = g
    H[0, _TH_SLICE] = g @ (-C @ skew(cfg.lever_arm))

    nu = float(record.d - predicted - H[0] @ err.dx)
    S = float(H @ err.P @ H.T) + R
    normalized = abs(nu) / math.sqrt(S)
    stat = normalized if cfg.gate_mode == "scalar" else normalized**2
    if stat > cfg.gate_gamma:
        decision = GateDecision(
            t=record.t,
            pair=pair,
            innovation=nu,
            innovation_var=S,
            normalized=normalized,
            accepted=False,
            reason="gated",
        )
        return state, err, decision

    K = (err.P @ H.T) / S  # (15, 1)
    dx = err.dx + (K[:, 0] * nu)
    IKH = np.eye(15) - K @ H
    P_new = IKH @ err.P @ IKH.T + K * R @ K.T  # Joseph form
    new_state, new_err = inject_and_reset(state, ErrorState(dx=dx, P=P_new))
    decision = GateDecision(
        t=record.t,
        pair=pair,
        innovation=nu,
        innovation_var=S,
        normalized=normalized,
        accepted=True,
        reason="accepted",
    )
    return new_state, new_err, decision


# ---------------------------------------------------------------------------
# initialization


def initialize(
    cfg: EskfConfig,
    accel_mean,
    first_fix=None,
    t: float = 0.0,
) -> tuple[NavState, ErrorState]:
    """Build the starting state from a static accelerometer average.

    Roll and pitch come from aligning the measured specific-force mean
    with gravity; yaw is unobservable and set to zero with the
    configured prior (1 rad^2 unless the config says otherwise).
    Position is the provided fix (buffered-TDOA multilateration) or the
    origin with a wide prior.
    """
    f = as_vec3(accel_mean, "accel_mean")
    g_mag = float(np.linalg.norm(cfg.imu.gravity))
    norm = float(np.linalg.norm(f))
    if abs(norm - g_mag) > 0.2 * g_mag:
        raise NotStaticError(
            f"accelerometer mean norm {norm:.2f} is not within 20% of {g_mag:.2f}; "
            "initialization requires a static hold"
        )
    f_hat = f / norm
    z_hat = np.array([0.0, 0.0, 1.0])
    # smallest rotation taking the measured up-direction to world up
    cross = np.cross(f_hat, z_hat)
    sin_a = float(np.linalg.norm(cross))
    cos_a = float(np.dot(f_hat, z_hat))
    if sin_a < 1e-12:
        if cos_a > 0:
            q = np.array([1.0, 0.0, 0.0, 0.0])
        else:  # upside down: sensor x axis picked as the flip axis
            q = np.array([0.0, 1.0, 0.0, 0.0])
    else:
        axis = cross / sin_a
        angle = math.atan2(sin_a, cos_a)
        q = np.concatenate([[math.cos(0.5 * angle)], math.sin(0.5 * angle) * axis])

    if first_fix is not None:
        p = as_vec3(first_fix, "first_fix")
        pos_var = cfg.init_pos_var_fix
    else:
        p = np.zeros(3)
        pos_var = cfg.init_pos_var

    P = np.zeros((15, 15))
    P[_P_SLICE, _P_SLICE] = np.eye(3) * pos_var
    P[_V_SLICE, _V_SLICE] = np.eye(3) * cfg.init_vel_var
    P[6, 6] = cfg.init_rollpitch_var
    P[7, 7] = cfg.init_rollpitch_var
    P[8, 8] = cfg.init_yaw_var
    P[_BA_SLICE, _BA_SLICE] = np.eye(3) * cfg.init_ba_var
    P[_BW_SLICE, _BW_SLICE] = np.eye(3) * cfg.init_bw_var

    state = NavState(
        p=p, v=np.zeros(3), q=q, b_a=np.zeros(3), b_w=np.zeros(3), t=float(t)
    )
    return state, ErrorState(dx=np.zeros(15), P=P)


# ---------------------------------------------------------------------------
# log replay driver


@dataclass(frozen=True)
class EstimateRecord:
    t: float
    p: np.ndarray
    q: np.ndarray
    v: np.ndarray
    P_diag: np.ndarray  # 15 error-state variances


@dataclass(frozen=True)
class GatingReport:
    accepted: int
    rejected: int
    per_pair: tuple[dict, ...]

    @property
    def total(self) -> int:
        return self.accepted + self.rejected

    @property
    def reject_rate(self) -> float:
        return self.rejected / self.total if self.total else 0.0


@dataclass
class FilterRunResult:
    estimates: list[EstimateRecord]
    decisions: list[GateDecision]
    gating: GatingReport
    diverged: bool
    divergence_time: float | None
    init_time: float
    # position covariance blocks aligned with estimates, for consistency
    # evaluation (the JSONL log only carries the diagonal)
    P_pos: list[np.ndarray]


def _gating_report(decisions) -> GatingReport:
    accepted = sum(1 for d in decisions if d.accepted)
    rejected = len(decisions) - accepted
    per_pair: dict[tuple[int, int], list[int]] = {}
    for d in decisions:
        key = d.pair
        row = per_pair.setdefault(key, [0, 0])
        row[0 if d.accepted else 1] += 1
    rows = tuple(
        {
            "i": i,
            "j": j,
            "count": acc + rej,
            "accepted": acc,
            "rejected": rej,
        }
        for (i, j), (acc, rej) in sorted(per_pair.items())
    )
    return GatingReport(accepted=accepted, rejected=rejected, per_pair=rows)


def run_filter(
    records,
    placement: AnchorPlacement,
    cfg: EskfConfig,
    init_static_window: float = 0.5,
    init_max_window: float = 2.0,
    init_min_pairs: int = 4,
    use_fix: bool = True,
) -> FilterRunResult:
    """Replay a measurement log through the filter.

    The leading init_static_window seconds of IMU fix roll and pitch;
    TDOA records buffered before initialization (up to init_max_window
    seconds, waiting for init_min_pairs distinct pairs) feed a
    multilateration first fix. Buffered records are consumed, not
    replayed. After that, IMU records propagate (zero-order hold) and
    TDOA records correct at their timestamps, in log order.
    """
    records = list(records)
    imu_buf: list[ImuRecord] = []
    tdoa_buf: list[TdoaRecord] = []
    start_idx = len(records)
    t_first = None
    for idx, rec in enumerate(records):
        if isinstance(rec, GroundTruthRecord):
            continue
        if t_first is None:
            t_first = rec.t
        if isinstance(rec, ImuRecord):
            imu_buf.append(rec)
        elif isinstance(rec, TdoaRecord):
            tdoa_buf.append(rec)
        have_static = imu_buf and imu_buf[-1].t - imu_buf[0].t >= init_static_window
        have_pairs = (
            len({frozenset((r.i, r.j)) for r in tdoa_buf}) >= init_min_pairs
        )
        if have_static and (have_pairs or rec.t - t_first >= init_max_window):
            start_idx = idx + 1
            break
    if not imu_buf:
        raise ValueError("log contains no IMU records")
    if start_idx > len(records) - 1 and imu_buf[-1].t - imu_buf[0].t < init_static_window:
        raise ValueError("log too short to initialize the filter")

    accel_mean = np.mean([r.acc for r in imu_buf], axis=0)
    fix = None
    if use_fix and len({frozenset((r.i, r.j)) for r in tdoa_buf}) >= 3:
        guess = placement.anchors.mean(axis=0)
        sol = multilaterate(
            [((r.i, r.j), r.d) for r in tdoa_buf], placement, guess
        )
        if sol.converged:
            fix = sol.position
    t_init = max(imu_buf[-1].t, tdoa_buf[-1].t if tdoa_buf else -math.inf)
    state, err = initialize(cfg, accel_mean, first_fix=fix, t=t_init)

    estimates: list[EstimateRecord] = []
    P_pos: list[np.ndarray] = []
    decisions: list[GateDecision] = []
    diverged = False
    divergence_time = None
    pending_imu = imu_buf[-1]

    def emit():
        estimates.append(
            EstimateRecord(
                t=state.t,
                p=state.p.copy(),
                q=state.q.copy(),
                v=state.v.copy(),
                P_diag=np.diag(err.P).copy(),
            )
        )
        P_pos.append(err.P[:3, :3].copy())

    emit()
    try:
        for rec in records[start_idx:]:
            if isinstance(rec, GroundTruthRecord):
                continue
            if rec.t > state.t and pending_imu is not None:
                state, err = predict(
                    state, err, pending_imu.acc, pending_imu.gyro, rec.t - state.t, cfg
                )
            if isinstance(rec, ImuRecord):
                pending_imu = rec
                emit()
            elif isinstance(rec, TdoaRecord):
                state, err, decision = correct_tdoa(state, err, rec, placement, cfg)
                decisions.append(decision)
                emit()
    except FilterDivergenceError as exc:
        diverged = True
        divergence_time = exc.t if exc.t is not None else state.t

    return FilterRunResult(
        estimates=estimates,
        decisions=decisions,
        gating=_gating_report(decisions),
        diverged=diverged,
        divergence_time=divergence_time,
        init_time=t_init,
        P_pos=P_pos,
    )


# ---------------------------------------------------------------------------
# estimate log and gating report file formats


def estimate_to_dict(rec: EstimateRecord) -> dict:
    return {
        "t": rec.t,
        "p": [float(x) for x in rec.p],
        "q": [float(x) for x in rec.q],
        "v": [float(x) for x in rec.v],
        "P_diag": [float(x) for x in rec.P_diag],
    }


def write_estimates(path, estimates) -> None:
    import json

    with open(path, "w") as fh:
        for rec in estimates:
            fh.write(json.dumps(estimate_to_dict(rec)))
            fh.write("\n")


def read_estimates(path) -> list[EstimateRecord]:
    import json

    out = []
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
            try:
                p = as_vec3(data["p"], "p")
                v = as_vec3(data["v"], "v")
                q = np.asarray(data["q"], dtype=float)
                P_diag = np.asarray(data["P_diag"], dtype=float)
                if q.shape != (4,):
                    raise ValueError("field 'q' must have 4 components")
                if P_diag.shape != (15,):
                    raise ValueError("field 'P_diag' must have 15 components")
                out.append(
                    EstimateRecord(t=float(data["t"]), p=p, q=q, v=v, P_diag=P_diag)
                )
            except KeyError as exc:
                raise ValueError(f"{where}: missing field {exc}") from exc
            except (TypeError, ValueError) as exc:
                raise ValueError(f"{where}: {exc}") from exc
    return out


def gating_report_to_dict(report: GatingReport) -> dict:
    return {
        "accepted": report.accepted,
        "rejected": report.rejected,
        "total": report.total,
        "reject_rate": report.reject_rate,
        "per_pair": list(report.per_pair),
    }
