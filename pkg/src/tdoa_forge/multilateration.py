"""Gauss-Newton maximum-likelihood point solver for TDOA sets.

Solves min_p 0.5 * sum_k ((d_k - h_k(p)) / sigma_k)^2 where h_k is the
range difference of pair k. Used as the statistical oracle the bounds
are validated against, and for the filter's first position fix.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .measurement import AnchorPlacement

STEP_TOL = 1e-9
MAX_ITERATIONS = 50


@dataclass(frozen=True)
class MlSolution:
    position: np.ndarray
    iterations: int
    converged: bool
    cost: float


def multilaterate(
    measurements,
    placement: AnchorPlacement,
    init,
    sigmas=None,
) -> MlSolution:
    """Gauss-Newton descent from ``init``.

    measurements: sequence of ((i, j), d) with 1-based anchor indices.
    sigmas: per-measurement noise std (scalar or sequence); defaults to
    uniform weights. Stops when the step norm drops below STEP_TOL or
    after MAX_ITERATIONS.
    """
    pairs = np.asarray([[i, j] for (i, j), _ in measurements], dtype=int) - 1
    d = np.asarray([dk for _, dk in measurements], dtype=float)
    if pairs.shape[0] < 3:
        raise ValueError(f"need at least 3 measurements, got {pairs.shape[0]}")
    if sigmas is None:
        w = np.ones(len(d))
    else:
        s = np.broadcast_to(np.asarray(sigmas, dtype=float), d.shape)
        w = 1.0 / s
    anchors_i = placement.anchors[pairs[:, 0]]
    anchors_j = placement.anchors[pairs[:, 1]]
    p = np.array(init, dtype=float).reshape(3).copy()

    converged = False
    it = 0
    residual = np.zeros_like(d)
    for it in range(1, MAX_ITERATIONS + 1):
        di = p - anchors_i
        dj = p - anchors_j
        ri = np.linalg.norm(di, axis=1)
        rj = np.linalg.norm(dj, axis=1)
        ri = np.maximum(ri, 1e-12)
        rj = np.maximum(rj, 1e-12)
        h = rj - ri
        J = dj / rj[:, None] - di / ri[:, None]  # (n, 3)
        residual = (d - h) * w
        Jw = J * w[:, None]
        A = Jw.T @ Jw
        b = Jw.T @ residual
        try:
            step = np.linalg.solve(A, b)
        except np.linalg.LinAlgError:
            break
        p += step
        if float(np.linalg.norm(step)) < STEP_TOL:
            converged = True
            break
    di = p - anchors_i
    dj = p - anchors_j
    h = np.linalg.norm(dj, axis=1) - np.linalg.norm(di, axis=1)
    final = (d - h) * w
    return MlSolution(
        position=p, iterations=it, converged=converged, cost=0.5 * float(final @ final)
    )


def multilaterate_batch(
    pairs, d, placement: AnchorPlacement, init, sigmas=None
) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized Gauss-Newton over many measurement sets of one geometry.

    pairs: (n, 2) 1-based indices shared by all trials; d: (T, n) range
    differences; init: (3,) or (T, 3). Returns (positions (T, 3),
    converged (T,)). Same iteration rule as multilaterate, run in
    lockstep over trials; used by the Monte-Carlo validation harness.
    """
    pz = np.asarray(pairs, dtype=int) - 1
    d = np.atleast_2d(np.asarray(d, dtype=float))
    trials, n = d.shape
    if sigmas is None:
        w = np.ones(n)
    else:
        w = 1.0 / np.broadcast_to(np.asarray(sigmas, dtype=float), (n,))
    ai = placement.anchors[pz[:, 0]]  # (n, 3)
    aj = placement.anchors[pz[:, 1]]
    p = np.broadcast_to(np.asarray(init, dtype=float), (trials, 3)).copy()
    active = np.ones(trials, dtype=bool)
    converged = np.zeros(trials, dtype=bool)
    for _ in range(MAX_ITERATIONS):
        di = p[:, None, :] - ai[None, :, :]  # (T, n, 3)
        dj = p[:, None, :] - aj[None, :, :]
        ri = np.maximum(np.linalg.norm(di, axis=2), 1e-12)
        rj = np.maximum(np.linalg.norm(dj, axis=2), 1e-12)
        h = rj - ri
        J = dj / rj[..., None] - di / ri[..., None]
        Jw = J * w[None, :, None]
        r = (d - h) * w[None, :]
        A = np.einsum("tni,tnj->tij", Jw, Jw)
        b = np.einsum("tni,tn->ti", Jw, r)[..., None]  # (T, 3, 1)
        try:
            step = np.linalg.solve(A, b)[..., 0]
        except np.linalg.LinAlgError:
            # a degenerate trial must not sink the batch
            step = np.linalg.solve(A + 1e-12 * np.eye(3), b)[..., 0]
        step = np.where(active[:, None], step, 0.0)
        p += step
        done = np.linalg.norm(step, axis=1) < STEP_TOL
        converged |= done & active
        active &= ~done
        if not active.any():
            break
    return p, converged
