"""Anchor placement quality analysis and optimization.

The per-point quality of a placement is the unbiased-estimator variance
floor plus the NLOS bias it cannot remove:

    mse_lb(p) = trace(F(p)^-1) + ||delta(p)||^2

where F is the Fisher information of the scheduled TDOA pair set at p
(zero lever arm) and delta is the first-order propagation of the
per-pair penetration biases through the estimator. The placement-wide
figure of merit is the mean of sqrt(mse_lb) over a target point set.

Optimization is block coordinate descent: anchors take turns moving to
the best candidate position with the others held fixed, which never
increases the figure of merit.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass

import numpy as np

from .geometry import DegenerateGeometryError, Environment, as_vec3, segment_penetrations
from .measurement import AnchorPlacement, TdoaParams, disjoint_pairs, ring_pairs

# Fisher matrices with a worse condition number than this are reported as
# unobservable (+inf sentinel) instead of silently huge.
CONDITION_CUTOFF = 1e12

_DEGENERATE_DIST = 1e-9
_OCCLUSION_EPS = 1e-12


@dataclass(frozen=True)
class TargetSet:
    """Points where localization quality matters."""

    points: np.ndarray
    name: str = ""

    def __post_init__(self):
        pts = np.atleast_2d(np.asarray(self.points, dtype=float))
        if pts.ndim != 2 or pts.shape[1] != 3 or pts.shape[0] == 0:
            raise ValueError(f"target points must be (n, 3) with n >= 1, got {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise ValueError("target points must be finite")
        object.__setattr__(self, "points", pts)

    def __len__(self) -> int:
        return self.points.shape[0]


@dataclass(frozen=True)
class PointBound:
    """Lower-bound decomposition at one point."""

    point: np.ndarray
    mse_lb: float
    variance_term: float
    bias_term: float
    condition_number: float
    observable: bool


@dataclass(frozen=True)
class MetricReport:
    per_point: tuple[PointBound, ...]
    aggregate_rmse: float


# ---------------------------------------------------------------------------
# batched bound computation


def _leg_tables(points, anchors, env: Environment, params: TdoaParams):
    """Per point-anchor leg: unit gradients, penetrations, distances."""
    pts = np.asarray(points, dtype=float)
    diff = pts[:, None, :] - anchors[None, :, :]  # (N, m, 3)
    dist = np.linalg.norm(diff, axis=-1)  # (N, m)
    degenerate = dist < _DEGENERATE_DIST
    safe = np.where(degenerate, 1.0, dist)
    unit = diff / safe[..., None]
    if params.nlos_bias_per_meter > 0 or params.nlos_extra_sigma > 0:
        pen = segment_penetrations(pts[:, None, :], anchors[None, :, :], env)
    else:
        pen = np.zeros_like(dist)
    return unit, pen, degenerate


def _assemble(unit_i, unit_j, pen_i, pen_j, params: TdoaParams):
    """Stack per-pair weights, gradients, and biases into F and the bias
    source vector. Leading dimensions broadcast; the pair axis is -2."""
    g = unit_j - unit_i  # (..., P, 3)
    occ = (pen_i > _OCCLUSION_EPS) | (pen_j > _OCCLUSION_EPS)
    var = params.sigma**2 + np.where(occ, params.nlos_extra_sigma**2, 0.0)
    w = 1.0 / var
    F = np.einsum("...p,...pi,...pj->...ij", w, g, g)
    b = params.nlos_bias_per_meter * (pen_j - pen_i)
    s = np.einsum("...p,...p,...pi->...i", w, b, g)
    return F, s


def _bounds_from_fim(F, s, degenerate_any):
    """mse_lb pieces from stacked 3x3 information matrices.

    F: (..., 3, 3), s: (..., 3), degenerate_any: (...,) bool marking
    entries whose geometry had a zero-length leg. Returns (mse, var,
    bias, cond, observable) arrays of the leading shape.
    """
    eig = np.linalg.eigvalsh(F)
    lo = eig[..., 0]
    hi = eig[..., -1]
    with np.errstate(divide="ignore", invalid="ignore"):
        cond = np.where(lo > 0, hi / np.where(lo > 0, lo, 1.0), np.inf)
    observable = (lo > 0) & (cond <= CONDITION_CUTOFF) & ~degenerate_any
    F_safe = np.where(observable[..., None, None], F, np.eye(3))
    Finv = np.linalg.inv(F_safe)
    var = np.einsum("...ii->...", Finv)
    delta = np.einsum("...ij,...j->...i", Finv, s)
    bias = np.einsum("...i,...i->...", delta, delta)
    var = np.where(observable, var, np.inf)
    bias = np.where(observable, bias, np.inf)
    mse = var + bias
    return mse, var, bias, cond, observable


def _batch_bounds(points, placement: AnchorPlacement, env, params):
    """(mse, var, bias, cond, observable) arrays over a point batch."""
    pz = placement.pair_array()
    unit, pen, degen = _leg_tables(points, placement.anchors, env, params)
    F, s = _assemble(
        unit[:, pz[:, 0], :],
        unit[:, pz[:, 1], :],
        pen[:, pz[:, 0]],
        pen[:, pz[:, 1]],
        params,
    )
    degen_any = np.any(degen[:, pz[:, 0]] | degen[:, pz[:, 1]], axis=-1)
    return _bounds_from_fim(F, s, degen_any)


def fisher_information(
    point, placement: AnchorPlacement, env: Environment, params: TdoaParams
) -> np.ndarray:
    """3x3 position Fisher information of the scheduled pair set at a point."""
    pt = as_vec3(point, "point")[None, :]
    pz = placement.pair_array()
    unit, pen, degen = _leg_tables(pt, placement.anchors, env, params)
    if np.any(degen[:, pz[:, 0]] | degen[:, pz[:, 1]]):
        raise DegenerateGeometryError("point coincides with an anchor in the schedule")
    F, _ = _assemble(
        unit[:, pz[:, 0], :], unit[:, pz[:, 1], :], pen[:, pz[:, 0]], pen[:, pz[:, 1]], params
    )
    return F[0]


def mse_lower_bound(
    point, placement: AnchorPlacement, env: Environment, params: TdoaParams
) -> PointBound:
    """Variance-plus-bias MSE lower bound at a single point."""
    pt = as_vec3(point, "point")
    mse, var, bias, cond, obs = _batch_bounds(pt[None, :], placement, env, params)
    return PointBound(
        point=pt,
        mse_lb=float(mse[0]),
        variance_term=float(var[0]),
        bias_term=float(bias[0]),
        condition_number=float(cond[0]),
        observable=bool(obs[0]),
    )


def placement_metric(
    targets: TargetSet, placement: AnchorPlacement, env: Environment, params: TdoaParams
) -> MetricReport:
    """Evaluate the bound at every target point; aggregate by mean RMSE."""
    pts = targets.points
    mse, var, bias, cond, obs = _batch_bounds(pts, placement, env, params)
    per_point = tuple(
        PointBound(
            point=pts[k],
            mse_lb=float(mse[k]),
            variance_term=float(var[k]),
            bias_term=float(bias[k]),
            condition_number=float(cond[k]),
            observable=bool(obs[k]),
        )
        for k in range(pts.shape[0])
    )
    aggregate = float(np.mean(np.sqrt(mse)))
    return MetricReport(per_point=per_point, aggregate_rmse=aggregate)


def _json_float(v: float):
    """Non-finite floats become the string "inf" so the JSON stays standard."""
    return float(v) if math.isfinite(v) else "inf"


def metric_report_to_dict(report: MetricReport) -> dict:
    return {
        "aggregate_rmse": _json_float(report.aggregate_rmse),
        "per_point": [
            {
                "point": [float(v) for v in pb.point],
                "mse_lb": _json_float(pb.mse_lb),
                "variance_term": _json_float(pb.variance_term),
                "bias_term": _json_float(pb.bias_term),
                "condition_number": _json_float(pb.condition_number),
                "observable": pb.observable,
            }
            for pb in report.per_point
        ],
    }


# ---------------------------------------------------------------------------
# heatmap


@dataclass(frozen=True)
class Heatmap:
    xs: np.ndarray
    ys: np.ndarray
    height: float
    rmse_lb: np.ndarray  # (len(ys), len(xs))


def heatmap(
    env: Environment,
    placement: AnchorPlacement,
    params: TdoaParams,
    height: float = 1.5,
    resolution: float = 0.25,
) -> Heatmap:
    """RMSE lower bound on a horizontal grid of cell centers."""
    if resolution <= 0:
        raise ValueError("resolution must be positive")
    lo, hi = env.boundary_min, env.boundary_max
    nx = max(1, int(math.ceil((hi[0] - lo[0]) / resolution)))
    ny = max(1, int(math.ceil((hi[1] - lo[1]) / resolution)))
    xs = lo[0] + (np.arange(nx) + 0.5) * resolution
    ys = lo[1] + (np.arange(ny) + 0.5) * resolution
    gx, gy = np.meshgrid(xs, ys)
    pts = np.column_stack([gx.ravel(), gy.ravel(), np.full(gx.size, float(height))])
    mse, _, _, _, _ = _batch_bounds(pts, placement, env, params)
    grid = np.sqrt(mse).reshape(ny, nx)
    return Heatmap(xs=xs, ys=ys, height=float(height), rmse_lb=grid)


def write_heatmap_csv(hm: Heatmap, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["x", "y", "rmse_lb"])
        for iy, y in enumerate(hm.ys):
            for ix, x in enumerate(hm.xs):
                v = hm.rmse_lb[iy, ix]
                writer.writerow([repr(float(x)), repr(float(y)), "inf" if math.isinf(v) else repr(float(v))])


def read_heatmap_csv(path) -> list[tuple[float, float, float]]:
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["x", "y", "rmse_lb"]:
            raise ValueError(f"{path}: line 1: expected header x,y,rmse_lb, got {header}")
        for lineno, row in enumerate(reader, start=2):
            if len(row) != 3:
                raise ValueError(f"{path}: line {lineno}: expected 3 columns")
            try:
                rows.append((float(row[0]), float(row[1]), float(row[2])))
            except ValueError as exc:
                raise ValueError(f"{path}: line {lineno}: {exc}") from exc
    return rows


# ---------------------------------------------------------------------------
# search space and optimization


@dataclass(frozen=True)
class PlacementSearchSpace:
    """Discrete candidate positions plus placement constraints.

    fixed_anchors holds 1-based anchor indices the optimizer must not
    move. min_pair_separation keeps distinct anchors from collapsing
    onto the same candidate.
    """

    candidates: np.ndarray
    min_pair_separation: float = 0.5
    fixed_anchors: tuple[int, ...] = ()

    def __post_init__(self):
        cand = np.atleast_2d(np.asarray(self.candidates, dtype=float))
        if cand.ndim != 2 or cand.shape[1] != 3 or cand.shape[0] == 0:
            raise ValueError(f"candidates must be (c, 3) with c >= 1, got {cand.shape}")
        if not np.all(np.isfinite(cand)):
            raise ValueError("candidates must be finite")
        object.__setattr__(self, "candidates", cand)
        object.__setattr__(self, "fixed_anchors", tuple(int(k) for k in self.fixed_anchors))
        if self.min_pair_separation < 0:
            raise ValueError("min_pair_separation must be non-negative")

    @classmethod
    def boundary_grid(
        cls,
        env: Environment,
        resolution: float = 0.25,
        min_pair_separation: float = 0.5,
        fixed_anchors: tuple[int, ...] = (),
    ) -> "PlacementSearchSpace":
        """Grid over the six boundary faces, obstacle interiors excluded."""
        if resolution <= 0:
            raise ValueError("resolution must be positive")
        lo, hi = env.boundary_min, env.boundary_max

        def axis_coords(a):
            n = int(math.floor((hi[a] - lo[a]) / resolution + 1e-9))
            coords = lo[a] + np.arange(n + 1) * resolution
            if hi[a] - coords[-1] > 1e-9:
                coords = np.append(coords, hi[a])
            return coords

        cx, cy, cz = axis_coords(0), axis_coords(1), axis_coords(2)
        faces = []
        for z in (lo[2], hi[2]):
            gx, gy = np.meshgrid(cx, cy, indexing="ij")
            faces.append(np.column_stack([gx.ravel(), gy.ravel(), np.full(gx.size, z)]))
        for y in (lo[1], hi[1]):
            gx, gz = np.meshgrid(cx, cz, indexing="ij")
            faces.append(np.column_stack([gx.ravel(), np.full(gx.size, y), gz.ravel()]))
        for x in (lo[0], hi[0]):
            gy, gz = np.meshgrid(cy, cz, indexing="ij")
            faces.append(np.column_stack([np.full(gy.size, x), gy.ravel(), gz.ravel()]))
        pts = np.vstack(faces)
        # dedupe edge/corner points, keeping first occurrence order
        keys = np.round(pts / 1e-9) * 1e-9
        _, idx = np.unique(keys, axis=0, return_index=True)
        pts = pts[np.sort(idx)]
        # anchors cannot sit strictly inside an obstacle
        keep = np.ones(pts.shape[0], dtype=bool)
        for ob in env.obstacles:
            keep &= ~ob.contains_interior(pts)
        return cls(
            candidates=pts[keep],
            min_pair_separation=min_pair_separation,
            fixed_anchors=fixed_anchors,
        )


@dataclass(frozen=True)
class OptimizationResult:
    placement: AnchorPlacement
    report: MetricReport
    history: tuple[float, ...]
    sweeps: int


def _candidate_metric_batch(
    points, anchors, pairs0, moving: int, candidates, env, params: TdoaParams
):
    """Figure of merit per candidate when anchor ``moving`` (0-based) is
    relocated and everything else stays put.

    Splits the information into a fixed part from pairs not touching the
    moving anchor plus a per-candidate part, so the cost per candidate is
    one or two pair evaluations rather than the whole schedule.
    """
    pts = np.asarray(points, dtype=float)
    cand = np.asarray(candidates, dtype=float)
    n_pts = pts.shape[0]
    n_cand = cand.shape[0]
    touch = [k for k in range(pairs0.shape[0]) if moving in pairs0[k]]
    rest = [k for k in range(pairs0.shape[0]) if moving not in pairs0[k]]

    unit, pen, degen = _leg_tables(pts, anchors, env, params)
    if rest:
        pr = pairs0[rest]
        F_fixed, s_fixed = _assemble(
            unit[:, pr[:, 0], :], unit[:, pr[:, 1], :], pen[:, pr[:, 0]], pen[:, pr[:, 1]], params
        )
        degen_fixed = np.any(degen[:, pr[:, 0]] | degen[:, pr[:, 1]], axis=-1)
    else:
        F_fixed = np.zeros((n_pts, 3, 3))
        s_fixed = np.zeros((n_pts, 3))
        degen_fixed = np.zeros(n_pts, dtype=bool)

    # candidate legs: (n_pts, n_cand)
    unit_c, pen_c, degen_c = _leg_tables(pts, cand, env, params)

    F = np.broadcast_to(F_fixed[:, None], (n_pts, n_cand, 3, 3)).copy()
    s = np.broadcast_to(s_fixed[:, None], (n_pts, n_cand, 3)).copy()
    degen_any = np.broadcast_to(degen_fixed[:, None], (n_pts, n_cand)).copy()
    for k in touch:
        i, j = pairs0[k]
        other = j if i == moving else i
        u_o = unit[:, other, :][:, None, :]
        p_o = pen[:, other][:, None]
        d_o = degen[:, other][:, None]
        if j == moving:
            ui, uj = u_o, unit_c
            pi, pj = p_o, pen_c
        else:
            ui, uj = unit_c, u_o
            pi, pj = pen_c, p_o
        Fk, sk = _assemble(ui[..., None, :], uj[..., None, :], pi[..., None], pj[..., None], params)
        F += Fk
        s += sk
        degen_any |= d_o | degen_c

    mse, _, _, _, _ = _bounds_from_fim(F, s, degen_any)
    return np.mean(np.sqrt(mse), axis=0)  # (n_cand,)


def optimize_placement(
    targets: TargetSet,
    search: PlacementSearchSpace,
    initial: AnchorPlacement,
    env: Environment,
    params: TdoaParams,
    max_sweeps: int = 20,
    tol: float = 1e-6,
) -> OptimizationResult:
    """Block coordinate descent over anchor positions.

    Sweeps anchors in index order; each anchor moves to the candidate
    that minimizes the aggregate RMSE bound with the others fixed (its
    current position always competes, so the figure of merit never goes
    up). Ties keep the lowest candidate index. Stops when a full sweep
    improves by less than tol or after max_sweeps.
    """
    anchors = initial.anchors.copy()
    pairs0 = initial.pair_array()
    m = anchors.shape[0]
    fixed = set(search.fixed_anchors)
    free = [k for k in range(m) if (k + 1) not in fixed]
    cand = search.candidates
    min_sep = search.min_pair_separation

    def current_metric():
        pl = AnchorPlacement(anchors=anchors, pairs=initial.pairs, mode=initial.mode)
        return placement_metric(targets, pl, env, params).aggregate_rmse

    history = [current_metric()]
    sweeps = 0
    for _ in range(max_sweeps):
        sweeps += 1
        for k in free:
            values = _candidate_metric_batch(
                targets.points, anchors, pairs0, k, np.vstack([cand, anchors[k][None]]), env, params
            )
            cur_value = values[-1]
            values = values[:-1]
            if min_sep > 0:
                others = np.delete(anchors, k, axis=0)
                dmin = np.min(
                    np.linalg.norm(cand[:, None, :] - others[None, :, :], axis=-1), axis=1
                )
                values = np.where(dmin >= min_sep - 1e-12, values, np.inf)
            best = int(np.argmin(values))  # argmin takes the lowest index on ties
            if values[best] < cur_value:
                anchors[k] = cand[best]
        history.append(current_metric())
        # stop on convergence; the comparison is written so a nan delta
        # (inf-to-inf, nothing observable anywhere) also stops the sweep
        if not (history[-2] - history[-1] > tol):
            break

    final = AnchorPlacement(anchors=anchors, pairs=initial.pairs, mode=initial.mode)
    return OptimizationResult(
        placement=final,
        report=placement_metric(targets, final, env, params),
        history=tuple(history),
        sweeps=sweeps,
    )


# ---------------------------------------------------------------------------
# anchor count escalation


@dataclass(frozen=True)
class EscalationResult:
    success: bool
    placement: AnchorPlacement
    report: MetricReport
    attempts: tuple[tuple[int, float], ...]  # (anchor count, achieved metric)
    history: tuple[float, ...]  # descent history of the returned attempt


def _spread_initial(candidates: np.ndarray, m: int, seed: int, min_sep: float) -> np.ndarray:
    """Deterministic farthest-point pick of m starting positions."""
    n = candidates.shape[0]
    if m > n:
        raise ValueError(f"need {m} anchors but only {n} candidates")
    start = seed % n
    chosen = [start]
    dist = np.linalg.norm(candidates - candidates[start], axis=1)
    for _ in range(m - 1):
        nxt = int(np.argmax(dist))
        if dist[nxt] < min_sep:
            raise ValueError(
                f"cannot seat {m} anchors with separation {min_sep} on this candidate set"
            )
        chosen.append(nxt)
        dist = np.minimum(dist, np.linalg.norm(candidates - candidates[nxt], axis=1))
    return candidates[chosen]


def escalate_anchor_count(
    targets: TargetSet,
    search: PlacementSearchSpace,
    env: Environment,
    params: TdoaParams,
    rmse_target: float,
    m_min: int,
    m_max: int,
    pairing: str = "disjoint",
    seed: int = 0,
    max_sweeps: int = 20,
    tol: float = 1e-6,
) -> EscalationResult:
    """Grow the anchor count two at a time until the target metric is met.

    Each count gets a deterministic spread initialization and a full
    coordinate descent. Returns the first placement meeting rmse_target,
    or the best attempt with success=False if m_max is exhausted.
    """
    if pairing not in ("disjoint", "ring"):
        raise ValueError(f"unknown pairing {pairing!r}")
    if rmse_target <= 0:
        raise ValueError("rmse_target must be positive")
    if m_min < 2 or m_max < m_min:
        raise ValueError(f"need 2 <= m_min <= m_max, got {m_min}..{m_max}")
    attempts = []
    best = None
    m = m_min + 1 if (pairing == "disjoint" and m_min % 2) else m_min
    while m <= m_max:
        pairs = disjoint_pairs(m) if pairing == "disjoint" else ring_pairs(m)
        mode = "decentralized" if pairing == "disjoint" else "centralized"
        init_anchors = _spread_initial(
            search.candidates, m, seed, search.min_pair_separation
        )
        initial = AnchorPlacement(anchors=init_anchors, pairs=pairs, mode=mode)
        result = optimize_placement(
            targets, search, initial, env, params, max_sweeps=max_sweeps, tol=tol
        )
        achieved = result.report.aggregate_rmse
        attempts.append((m, achieved))
        if best is None or achieved < best[1].report.aggregate_rmse:
            best = (m, result)
        if achieved <= rmse_target:
            return EscalationResult(
                success=True,
                placement=result.placement,
                report=result.report,
                attempts=tuple(attempts),
                history=result.history,
            )
        m += 2
    if best is None:
        raise ValueError(f"no feasible anchor count in {m_min}..{m_max}")
    return EscalationResult(
        success=False,
        placement=best[1].placement,
        report=best[1].report,
        attempts=tuple(attempts),
        history=best[1].history,
    )


# ---------------------------------------------------------------------------
# target set file format


def targets_to_dict(targets: TargetSet) -> dict:
    return {
        "name": targets.name,
        "points": [[float(v) for v in p] for p in targets.points],
    }


def targets_from_dict(data: dict, source: str = "<dict>") -> TargetSet:
    try:
        return TargetSet(points=np.asarray(data["points"], dtype=float), name=str(data.get("name", "")))
    except KeyError as exc:
        raise ValueError(f"{source}: missing required field {exc}") from exc
    except (TypeError, ValueError) as exc:
        raise ValueError(f"{source}: {exc}") from exc


def save_targets(targets: TargetSet, path) -> None:
    with open(path, "w") as fh:
        json.dump(targets_to_dict(targets), fh, indent=2)
        fh.write("\n")


def load_targets(path) -> TargetSet:
    with open(path) as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValueError(f"{path}: line {exc.lineno}: {exc.msg}") from exc
    return targets_from_dict(data, source=str(path))
