"""Trajectory generation, scenario simulation, and bound comparison.

Trajectories are C2 paths traversed at constant cruise speed (optionally
after a standstill hold and a smooth speed ramp), with yaw following the
direction of travel. A scenario bundles an environment, a placement, a
trajectory, and sensor models; running it synthesizes logs, replays them
through the filter, and scores the result against ground truth and the
placement's theoretical bound.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.interpolate import CubicSpline

from .eskf import EskfConfig, FilterRunResult, run_filter
from .geometry import Environment, Pose, quat_from_yaw
from .measurement import (
    AnchorPlacement,
    GroundTruthRecord,
    ImuParams,
    ImuRecord,
    TdoaParams,
    TdoaRecord,
    synth_ground_truth,
    synth_imu,
    synth_tdoa,
)
from .multilateration import MlSolution, multilaterate, multilaterate_batch
from .placement import TargetSet, placement_metric

_STATIC_PATH_LENGTH = 1e-9


def thread_count() -> int:
    """Worker count from TDOA_FORGE_THREADS: unset -> 1, 0 -> all cores."""
    raw = os.environ.get("TDOA_FORGE_THREADS", "").strip()
    if not raw:
        return 1
    n = int(raw)
    if n < 0:
        raise ValueError("TDOA_FORGE_THREADS must be >= 0")
    return os.cpu_count() or 1 if n == 0 else n


# ---------------------------------------------------------------------------
# trajectories


@dataclass(frozen=True)
class TrajectorySample:
    pose: Pose
    velocity: np.ndarray
    acceleration: np.ndarray
    omega_body: np.ndarray


class Trajectory:
    """Position spline over arc length plus an analytic speed profile.

    p(t) = curve(s(t)) with curve arc-length parameterized (unit-speed
    cubic spline) and s the integral of a hold / quintic-ramp / cruise
    speed profile, so position is C2 in time and velocity starts at zero
    when a hold or ramp is configured. Yaw tracks the path tangent; roll
    and pitch stay zero.
    """

    def __init__(
        self,
        curve: CubicSpline | None,
        length: float,
        speed: float,
        hold: float = 0.0,
        ramp: float = 0.0,
        closed: bool = False,
        duration: float | None = None,
        static_position=None,
    ):
        self._curve = curve
        self._length = float(length)
        self._speed = float(speed)
        self._hold = float(hold)
        self._ramp = float(ramp)
        self._closed = closed
        self._static = None
        if curve is None:
            self._static = np.asarray(static_position, dtype=float)
            self.duration = float(duration if duration is not None else 10.0)
            return
        if speed <= 0:
            raise ValueError("speed must be positive")
        ramp_dist = 0.5 * speed * ramp
        if ramp_dist > length and not closed:
            raise ValueError(
                f"ramp covers {ramp_dist:.2f} m but the path is only {length:.2f} m"
            )
        if duration is not None:
            self.duration = float(duration)
            if not closed:
                max_t = hold + ramp + (length - ramp_dist) / speed
                if duration > max_t + 1e-9:
                    raise ValueError(
                        f"duration {duration} s overruns the {max_t:.2f} s path"
                    )
        else:
            self.duration = hold + ramp + (length - ramp_dist) / speed

    def _profile(self, ts):
        """Arc length s(t) and its first two time derivatives."""
        t = np.asarray(ts, dtype=float)
        tau = np.clip((t - self._hold) / self._ramp, 0.0, 1.0) if self._ramp > 0 else None
        v, t0, tr = self._speed, self._hold, self._ramp
        if tr > 0:
            s_ramp = v * tr * (tau**6 - 3 * tau**5 + 2.5 * tau**4)
            sd_ramp = v * (6 * tau**5 - 15 * tau**4 + 10 * tau**3)
            sdd_ramp = v / tr * (30 * tau**4 - 60 * tau**3 + 30 * tau**2)
        s = np.where(t <= t0, 0.0, 0.0)
        sd = np.zeros_like(t)
        sdd = np.zeros_like(t)
        if tr > 0:
            in_ramp = (t > t0) & (t < t0 + tr)
            after = t >= t0 + tr
            s = np.where(in_ramp, s_ramp, s)
            sd = np.where(in_ramp, sd_ramp, sd)
            sdd = np.where(in_ramp, sdd_ramp, sdd)
            s = np.where(after, 0.5 * v * tr + v * (t - t0 - tr), s)
            sd = np.where(after, v, sd)
        else:
            after = t >= t0
            s = np.where(after, v * (t - t0), s)
            sd = np.where(after, v, sd)
        return s, sd, sdd

    def sample_batch(self, ts):
        """Arrays (pos (n,3), quat (n,4), vel (n,3), acc (n,3), omega (n,3))."""
        t = np.atleast_1d(np.asarray(ts, dtype=float))
        n = t.shape[0]
        if self._static is not None:
            pos = np.broadcast_to(self._static, (n, 3)).copy()
            quat = np.broadcast_to(np.array([1.0, 0, 0, 0]), (n, 4)).copy()
            zeros = np.zeros((n, 3))
            return pos, quat, zeros.copy(), zeros.copy(), zeros.copy()
        t = np.clip(t, 0.0, self.duration)
        s, sd, sdd = self._profile(t)
        if self._closed:
            s = np.mod(s, self._length)
        else:
            s = np.clip(s, 0.0, self._length)
        pos = self._curve(s)
        c1 = self._curve(s, 1)  # ~unit tangent
        c2 = self._curve(s, 2)
        vel = c1 * sd[:, None]
        acc = c2 * sd[:, None] ** 2 + c1 * sdd[:, None]
        # yaw from the path tangent (well defined even while holding still)
        h2 = c1[:, 0] ** 2 + c1[:, 1] ** 2
        safe = np.maximum(h2, 1e-18)
        yaw = np.arctan2(c1[:, 1], np.where(h2 > 1e-18, c1[:, 0], 1.0))
        dyaw_ds = np.where(
            h2 > 1e-18, (c1[:, 0] * c2[:, 1] - c1[:, 1] * c2[:, 0]) / safe, 0.0
        )
        yawdot = dyaw_ds * sd
        quat = np.column_stack(
            [np.cos(0.5 * yaw), np.zeros(n), np.zeros(n), np.sin(0.5 * yaw)]
        )
        omega = np.column_stack([np.zeros(n), np.zeros(n), yawdot])
        return pos, quat, vel, acc, omega

    def sample(self, t: float) -> TrajectorySample:
        pos, quat, vel, acc, omega = self.sample_batch([t])
        return TrajectorySample(
            pose=Pose(position=pos[0], orientation=quat[0]),
            velocity=vel[0],
            acceleration=acc[0],
            omega_body=omega[0],
        )


def _arc_length_curve(points: np.ndarray, closed: bool) -> tuple[CubicSpline, float]:
    """Fit a near-unit-speed cubic spline through a dense point sequence."""
    seg = np.linalg.norm(np.diff(points, axis=0), axis=1)
    ell = np.concatenate([[0.0], np.cumsum(seg)])
    keep = np.concatenate([[True], seg > 1e-12])
    ell = ell[keep]
    points = points[keep]
    length = float(ell[-1])
    bc = "periodic" if closed else "natural"
    return CubicSpline(ell, points, bc_type=bc), length


def _resample_equal_arc(base: CubicSpline, u_max: float, closed: bool, per_meter: float = 20.0):
    """Re-parameterize a chord-parameter spline by arc length."""
    dense_n = max(800, int(u_max * 50))
    u = np.linspace(0.0, u_max, dense_n)
    pts = base(u)
    seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    ell = np.concatenate([[0.0], np.cumsum(seg)])
    length = float(ell[-1])
    if length < _STATIC_PATH_LENGTH:
        return None, 0.0
    m = max(16, int(math.ceil(length * per_meter)))
    targets = np.linspace(0.0, length, m + 1)
    u_t = np.interp(targets, ell, u)
    resampled = base(u_t)
    if closed:
        resampled[-1] = resampled[0]
    return _arc_length_curve(resampled, closed)


def _waypoint_trajectory(params: dict, speed: float) -> Trajectory:
    wp = np.atleast_2d(np.asarray(params["waypoints"], dtype=float))
    if wp.ndim != 2 or wp.shape[1] != 3 or wp.shape[0] < 1:
        raise ValueError(f"waypoints must be (n, 3) with n >= 1, got {wp.shape}")
    if not np.all(np.isfinite(wp)):
        raise ValueError("waypoints must be finite")
    hold = float(params.get("hold", 0.0))
    ramp = float(params.get("ramp", 0.0))
    if wp.shape[0] == 1:
        return Trajectory(
            None, 0.0, speed, static_position=wp[0], duration=params.get("duration")
        )
    chord = np.linalg.norm(np.diff(wp, axis=0), axis=1)
    if np.any(chord < 1e-12):
        raise ValueError("consecutive waypoints must be distinct")
    u = np.concatenate([[0.0], np.cumsum(chord)])
    base = CubicSpline(u, wp, bc_type="natural")
    curve, length = _resample_equal_arc(base, float(u[-1]), closed=False)
    if curve is None:
        return Trajectory(
            None, 0.0, speed, static_position=wp[0], duration=params.get("duration")
        )
    return Trajectory(curve, length, speed, hold=hold, ramp=ramp, closed=False)


def _lissajous_trajectory(params: dict, speed: float) -> Trajectory:
    center = np.asarray(params.get("center", (0.0, 0.0, 0.0)), dtype=float)
    amplitude = np.asarray(params.get("amplitude", (1.0, 1.0, 0.0)), dtype=float)
    freq = np.asarray(params.get("frequencies", (1, 2, 0)), dtype=float)
    phases = np.asarray(params.get("phases", (0.0, 0.0, 0.0)), dtype=float)
    duration = params.get("duration")
    hold = float(params.get("hold", 0.0))
    ramp = float(params.get("ramp", 0.0))
    if np.all(np.abs(amplitude) < 1e-12):
        return Trajectory(None, 0.0, speed, static_position=center, duration=duration)
    u = np.linspace(0.0, 1.0, 4000)
    pts = center + amplitude * np.sin(2.0 * np.pi * freq * u[:, None] + phases)
    pts[-1] = pts[0]  # integer frequencies close the figure
    curve, length = _arc_length_curve(_densify_closed(pts), closed=True)
    if length < _STATIC_PATH_LENGTH:
        return Trajectory(None, 0.0, speed, static_position=center, duration=duration)
    return Trajectory(
        curve, length, speed, hold=hold, ramp=ramp, closed=True, duration=duration
    )


def _densify_closed(pts: np.ndarray) -> np.ndarray:
    """Equal-arc resample of an already-dense closed polyline."""
    seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    ell = np.concatenate([[0.0], np.cumsum(seg)])
    length = float(ell[-1])
    if length < _STATIC_PATH_LENGTH:
        return pts[:1]
    m = max(32, int(math.ceil(length * 20.0)))
    targets = np.linspace(0.0, length, m + 1)
    out = np.column_stack([np.interp(targets, ell, pts[:, k]) for k in range(3)])
    out[-1] = out[0]
    return out


def _stairs_waypoints(params: dict) -> np.ndarray:
    start = np.asarray(params.get("start", (0.0, 0.0, 0.0)), dtype=float)
    run = float(params.get("run", 3.0))
    rise = float(params.get("rise", 1.5))
    landing = float(params.get("landing", 1.2))
    flights = int(params.get("flights", 2))
    if flights < 1:
        raise ValueError("stairs need at least one flight")
    if run <= 0 or landing <= 0:
        raise ValueError("run and landing must be positive")
    wp = [start.copy()]
    p = start.copy()
    for k in range(flights):
        direction = 1.0 if k % 2 == 0 else -1.0
        p = p + np.array([direction * run, 0.0, rise])
        wp.append(p.copy())
        if k < flights - 1:  # switchback landing
            p = p + np.array([0.0, landing, 0.0])
            wp.append(p.copy())
    return np.asarray(wp)


def gen_trajectory(kind: str, params: dict, speed: float, env: Environment | None = None) -> Trajectory:
    """Build a trajectory of the given kind.

    kinds: "waypoints" (spline through params["waypoints"]), "lissajous"
    (closed figure around params["center"]), "stairs" (switchback ramps
    and landings, smoothed). Optional params "hold" and "ramp" (seconds)
    start the run at standstill. If env is given, the path must stay
    inside its boundary.
    """
    if speed <= 0:
        raise ValueError(f"speed must be positive, got {speed}")
    if kind == "waypoints":
        traj = _waypoint_trajectory(params, speed)
    elif kind == "lissajous":
        traj = _lissajous_trajectory(params, speed)
    elif kind == "stairs":
        p = dict(params)
        p["waypoints"] = _stairs_waypoints(params)
        traj = _waypoint_trajectory(p, speed)
    else:
        raise ValueError(f"unknown trajectory kind {kind!r}")
    if env is not None:
        ts = np.linspace(0.0, traj.duration, 200)
        pos, _, _, _, _ = traj.sample_batch(ts)
        inside = env.contains(pos)
        if not np.all(inside):
            bad = pos[np.argmin(inside)]
            raise ValueError(
                f"trajectory leaves the environment boundary near {bad.tolist()}"
            )
    return traj

# ---------------------------------------------------------------------------
# scenarios


@dataclass
class Scenario:
    """Everything needed to simulate one run and score it."""

    name: str
    env: Environment
    placement: AnchorPlacement
    trajectory: Trajectory
    imu_params: ImuParams
    tdoa_params: TdoaParams
    eskf: EskfConfig
    imu_rate: float = 100.0
    tdoa_rate_per_pair: float = 0.25
    gt_rate: float = 20.0
    seed: int = 0
    oos_fraction: float = 0.3
    radio_range: float = 30.0


@dataclass(frozen=True)
class EvalSummary:
    """Scorecard for one simulated run (errors in meters)."""

    rmse: float
    rmse_axes: tuple[float, float, float]
    max_error: float
    reject_rate: float
    bound_rmse: float
    nees_pos: float
    n_samples: int
    diverged: bool = False
    divergence_time: float | None = None


@dataclass
class ScenarioResult:
    summary: EvalSummary
    filter_result: FilterRunResult
    records: list
    gt_records: list[GroundTruthRecord]
    seed: int


def eval_summary_to_dict(s: EvalSummary) -> dict:
    return {
        "rmse": s.rmse,
        "rmse_axes": list(s.rmse_axes),
        "max_error": s.max_error,
        "reject_rate": s.reject_rate,
        "bound_rmse": s.bound_rmse,
        "nees_pos": s.nees_pos,
        "n_samples": s.n_samples,
        "diverged": s.diverged,
        "divergence_time": s.divergence_time,
    }


def _record_order(rec) -> tuple:
    kind = 0 if isinstance(rec, GroundTruthRecord) else (1 if isinstance(rec, ImuRecord) else 2)
    return (rec.t, kind)


def merge_records(*streams) -> list:
    """Time-sorted merge; at equal timestamps IMU precedes TDOA."""
    merged = [r for s in streams for r in s]
    merged.sort(key=_record_order)
    return merged


def synth_scenario_records(scenario: Scenario, seed: int | None = None, include_gt: bool = True) -> list:
    """Generate the full measurement log (and optionally ground truth)."""
    s = scenario.seed if seed is None else seed
    imu = synth_imu(scenario.trajectory, scenario.imu_params, scenario.imu_rate, seed=2 * s)
    tdoa = synth_tdoa(
        scenario.trajectory,
        scenario.placement,
        scenario.env,
        scenario.tdoa_params,
        scenario.tdoa_rate_per_pair,
        seed=2 * s + 1,
        lever_arm=scenario.eskf.lever_arm,
        oos_fraction=scenario.oos_fraction,
        radio_range=scenario.radio_range,
    )
    streams = [imu, tdoa]
    if include_gt:
        streams.append(synth_ground_truth(scenario.trajectory, scenario.gt_rate))
    return merge_records(*streams)


def trajectory_bound_rmse(
    trajectory: Trajectory,
    placement: AnchorPlacement,
    env: Environment,
    params: TdoaParams,
    sample_rate: float = 1.0,
) -> float:
    """Average root CRLB along the path, sampled at sample_rate."""
    n = max(2, int(math.floor(trajectory.duration * sample_rate)) + 1)
    ts = np.linspace(0.0, trajectory.duration, n)
    pos, _, _, _, _ = trajectory.sample_batch(ts)
    report = placement_metric(TargetSet(points=pos), placement, env, params)
    return report.aggregate_rmse


def evaluate_rmse(
    estimates,
    gt_records,
    warmup: float = 2.0,
) -> EvalSummary:
    """Score estimates against linearly interpolated ground truth.

    Samples earlier than warmup seconds after the first estimate are
    excluded. Fields that need the filter or placement context
    (reject_rate, bound_rmse, nees_pos) are left at zero here and filled
    in by run_scenario.
    """
    if not estimates:
        raise ValueError("no estimates to evaluate")
    if len(gt_records) < 2:
        raise ValueError("need at least two ground-truth records")
    est_t = np.array([e.t for e in estimates])
    est_p = np.array([e.p for e in estimates])
    gt_t = np.array([g.t for g in gt_records])
    gt_p = np.array([g.p for g in gt_records])
    if est_t[-1] < gt_t[0] or est_t[0] > gt_t[-1]:
        raise ValueError(
            f"estimate log [{est_t[0]:.3f}, {est_t[-1]:.3f}] s does not overlap "
            f"ground truth [{gt_t[0]:.3f}, {gt_t[-1]:.3f}] s"
        )
    interp = np.column_stack([np.interp(est_t, gt_t, gt_p[:, k]) for k in range(3)])
    err = est_p - interp
    mask = est_t >= est_t[0] + warmup
    if not np.any(mask):
        raise ValueError(f"no estimates left after the {warmup} s warm-up")
    err = err[mask]
    sq = np.sum(err**2, axis=1)
    return EvalSummary(
        rmse=float(np.sqrt(np.mean(sq))),
        rmse_axes=tuple(float(v) for v in np.sqrt(np.mean(err**2, axis=0))),
        max_error=float(np.sqrt(np.max(sq))),
        reject_rate=0.0,
        bound_rmse=0.0,
        nees_pos=0.0,
        n_samples=int(err.shape[0]),
    )


def _position_nees(estimates, P_pos, gt_records, warmup: float) -> float:
    est_t = np.array([e.t for e in estimates])
    est_p = np.array([e.p for e in estimates])
    gt_t = np.array([g.t for g in gt_records])
    gt_p = np.array([g.p for g in gt_records])
    interp = np.column_stack([np.interp(est_t, gt_t, gt_p[:, k]) for k in range(3)])
    err = est_p - interp
    mask = est_t >= est_t[0] + warmup
    P = np.asarray(P_pos)[mask]
    e = err[mask]
    sol = np.linalg.solve(P, e[:, :, None])[:, :, 0]
    nees = np.sum(e * sol, axis=1)
    return float(np.mean(nees))


def run_scenario(
    scenario: Scenario,
    seed: int | None = None,
    warmup: float = 2.0,
    records: list | None = None,
) -> ScenarioResult:
    """Simulate, filter, and score one run."""
    s = scenario.seed if seed is None else seed
    if records is None:
        records = synth_scenario_records(scenario, seed=s, include_gt=False)
    gt = synth_ground_truth(scenario.trajectory, scenario.gt_rate)
    result = run_filter(records, scenario.placement, scenario.eskf)
    summary = evaluate_rmse(result.estimates, gt, warmup=warmup)
    bound = trajectory_bound_rmse(
        scenario.trajectory, scenario.placement, scenario.env, scenario.tdoa_params
    )
    nees = _position_nees(result.estimates, result.P_pos, gt, warmup)
    summary = replace(
        summary,
        reject_rate=result.gating.reject_rate,
        bound_rmse=bound,
        nees_pos=nees,
        diverged=result.diverged,
        divergence_time=result.divergence_time,
    )
    return ScenarioResult(
        summary=summary,
        filter_result=result,
        records=records,
        gt_records=gt,
        seed=s,
    )


@dataclass(frozen=True)
class MonteCarloResult:
    """Aggregate over independent seeded trials of one scenario."""

    trials: tuple[EvalSummary, ...]
    seeds: tuple[int, ...]
    mean_rmse: float
    std_rmse: float
    mean_nees_pos: float
    mean_reject_rate: float
    bound_rmse: float
    n_diverged: int


def run_monte_carlo(
    scenario: Scenario,
    n_trials: int,
    base_seed: int | None = None,
    warmup: float = 2.0,
    threads: int | None = None,
) -> MonteCarloResult:
    """Run n_trials seeded copies (seed = base + k) and aggregate.

    Trials run on a thread pool sized by the threads argument or the
    TDOA_FORGE_THREADS environment variable; aggregation order is fixed
    by trial index, so results do not depend on the worker count.
    """
    if n_trials < 1:
        raise ValueError("n_trials must be >= 1")
    base = scenario.seed if base_seed is None else base_seed
    seeds = [base + k for k in range(n_trials)]
    workers = thread_count() if threads is None else max(1, threads)

    def one(seed: int) -> EvalSummary:
        return run_scenario(scenario, seed=seed, warmup=warmup).summary

    if workers == 1 or n_trials == 1:
        summaries = [one(s) for s in seeds]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            summaries = list(pool.map(one, seeds))
    rmses = np.array([s.rmse for s in summaries])
    return MonteCarloResult(
        trials=tuple(summaries),
        seeds=tuple(seeds),
        mean_rmse=float(np.mean(rmses)),
        std_rmse=float(np.std(rmses)),
        mean_nees_pos=float(np.mean([s.nees_pos for s in summaries])),
        mean_reject_rate=float(np.mean([s.reject_rate for s in summaries])),
        bound_rmse=summaries[0].bound_rmse,
        n_diverged=sum(1 for s in summaries if s.diverged),
    )


def timewise_errors(
    estimates,
    gt_records,
    placement: AnchorPlacement,
    env: Environment,
    params: TdoaParams,
):
    """Per-estimate (t, error, bound) arrays for CSV export."""
    est_t = np.array([e.t for e in estimates])
    est_p = np.array([e.p for e in estimates])
    gt_t = np.array([g.t for g in gt_records])
    gt_p = np.array([g.p for g in gt_records])
    interp = np.column_stack([np.interp(est_t, gt_t, gt_p[:, k]) for k in range(3)])
    err = np.linalg.norm(est_p - interp, axis=1)
    report = placement_metric(TargetSet(points=interp), placement, env, params)
    bounds = np.array(
        [math.sqrt(b.mse_lb) if math.isfinite(b.mse_lb) else math.inf for b in report.per_point]
    )
    return est_t, err, bounds


@dataclass(frozen=True)
class MlErrorStats:
    """Monte-Carlo error statistics of the snapshot position estimator."""

    mse: float
    bias: np.ndarray
    cov: np.ndarray
    n_converged: int
    n_trials: int


def ml_error_stats(
    point,
    placement: AnchorPlacement,
    env: Environment,
    params: TdoaParams,
    n_trials: int,
    seed: int = 0,
) -> MlErrorStats:
    """Estimate the snapshot estimator's MSE at one point by Monte Carlo.

    Each trial draws one noisy difference per pair (with any obstruction
    bias the geometry implies) and solves for position starting from the
    anchor centroid. The estimator weights links by their true noise
    standard deviations. mse averages squared error norm over converged
    trials.
    """
    from .measurement import link_stds, nlos_bias, tdoa_predict

    p = np.asarray(point, dtype=float)
    pairs = list(placement.pairs)
    pose = Pose(position=p, orientation=np.array([1.0, 0.0, 0.0, 0.0]))
    zero_lever = np.zeros(3)
    truth = np.array([tdoa_predict(pr, pose, zero_lever, placement) for pr in pairs])
    biases = np.array([nlos_bias(pr, p, placement, env, params) for pr in pairs])
    stds = link_stds(p[None, :], placement, env, params)[0]
    rng = np.random.default_rng(seed)
    noise = rng.standard_normal((n_trials, len(pairs))) * stds
    d = truth + biases + noise
    init = np.mean(placement.anchors, axis=0)
    positions, converged = multilaterate_batch(pairs, d, placement, init, sigmas=stds)
    err = positions[converged] - p
    if err.shape[0] == 0:
        raise RuntimeError("no converged trials")
    return MlErrorStats(
        mse=float(np.mean(np.sum(err**2, axis=1))),
        bias=np.mean(err, axis=0),
        cov=np.cov(err.T),
        n_converged=int(np.count_nonzero(converged)),
        n_trials=n_trials,
    )


def load_scenario(path) -> Scenario:
    """Read a scenario JSON file.

    Environment and placement entries are either filesystem paths
    (relative to the scenario file) or "asset:NAME" references into the
    bundled assets. The eskf configuration comes from the named profile
    plus the scenario's lever arm.
    """
    import json
    from pathlib import Path

    from .assets import resolve_ref
    from .geometry import load_environment
    from .measurement import load_placement
    from .profiles import profile

    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except OSError as exc:
        raise ValueError(f"{path}: cannot read scenario file: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ValueError(f"{path}:{exc.lineno}: invalid JSON: {exc.msg}") from exc
    if not isinstance(data, dict):
        raise ValueError(f"{path}: scenario file must hold a JSON object")

    def need(key):
        if key not in data:
            raise ValueError(f"{path}: missing field {key!r}")
        return data[key]

    base = path.parent
    env = load_environment(resolve_ref(str(need("environment")), base))
    placement = load_placement(resolve_ref(str(need("placement")), base))
    lever = tuple(float(v) for v in data.get("lever_arm", (0.0, 0.0, 0.0)))
    if len(lever) != 3:
        raise ValueError(f"{path}: field 'lever_arm' must have 3 components")
    try:
        eskf_cfg, tdoa_params = profile(str(need("profile")), lever_arm=lever)
    except ValueError as exc:
        raise ValueError(f"{path}: field 'profile': {exc}") from exc

    tr = need("trajectory")
    for key in ("kind", "speed", "params"):
        if key not in tr:
            raise ValueError(f"{path}: field 'trajectory' is missing {key!r}")
    try:
        trajectory = gen_trajectory(tr["kind"], tr["params"], float(tr["speed"]), env=env)
    except ValueError as exc:
        raise ValueError(f"{path}: field 'trajectory': {exc}") from exc

    imu_params = ImuParams(**data["imu"]) if "imu" in data else eskf_cfg.imu
    if "imu" in data:
        eskf_cfg = replace(eskf_cfg, imu=imu_params)
    rates = data.get("rates", {})
    return Scenario(
        name=str(data.get("name", path.stem)),
        env=env,
        placement=placement,
        trajectory=trajectory,
        imu_params=imu_params,
        tdoa_params=tdoa_params,
        eskf=eskf_cfg,
        imu_rate=float(rates.get("imu", 100.0)),
        tdoa_rate_per_pair=float(rates.get("tdoa_per_pair", 0.25)),
        gt_rate=float(rates.get("gt", 20.0)),
        seed=int(data.get("seed", 0)),
        oos_fraction=float(data.get("oos_fraction", 0.3)),
        radio_range=float(data.get("radio_range", 30.0)),
    )
