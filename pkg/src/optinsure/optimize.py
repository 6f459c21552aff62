"""Batched projected damped Newton for small smooth convex problems on a box.

Many independent problems (one per Monte Carlo path) are solved together.
The caller supplies a problem object with

* ``value(x, rows)`` -> (m,) objective values for the selected rows,
* ``derivatives(x, rows)`` -> (gradient (m, d), hessian (m, d, d)),
* optionally ``feasible(x, rows)`` -> (m,) bool for an open-domain constraint.

Variables at a box face whose gradient pushes outward are frozen for the
Newton step (Bertsekas-style active set); the remaining block gets a Newton
direction and an Armijo backtracking search along the projected arc.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

ARMIJO = 1e-4
MAX_HALVINGS = 60
ROUNDOFF_PG = 1e-7


@dataclass(frozen=True, slots=True)
class BoxSolution:
    x: np.ndarray
    value: np.ndarray
    projected_gradient: np.ndarray
    converged: np.ndarray
    iterations: int


def projected_gradient(x: np.ndarray, g: np.ndarray, lower: np.ndarray, upper: np.ndarray) -> np.ndarray:
    """x - P(x - g): zero exactly at a KKT point of the box problem."""
    return x - np.clip(x - g, lower, upper)


def minimize_on_box(
    problem,
    x0: np.ndarray,
    lower: np.ndarray,
    upper: np.ndarray,
    tol: float = 1e-10,
    max_iter: int = 100,
) -> BoxSolution:
    x = np.clip(np.array(x0, dtype=float), lower, upper)
    m, d = x.shape
    all_rows = np.arange(m)
    feasible = getattr(problem, "feasible", None)
    if feasible is not None and not np.all(feasible(x, all_rows)):
        raise ValueError("starting point violates the open-domain constraint")

    f = problem.value(x, all_rows)
    active = np.ones(m, dtype=bool)
    roundoff_stop = np.zeros(m, dtype=bool)
    pg_norm = np.full(m, np.inf)
    it = 0
    for it in range(1, max_iter + 1):
        rows = np.flatnonzero(active)
        if rows.size == 0:
            break
        xr = x[rows]
        g, H = problem.derivatives(xr, rows)
        pg = projected_gradient(xr, g, lower, upper)
        pg_norm[rows] = np.linalg.norm(pg, axis=1)
        done = pg_norm[rows] <= tol
        active[rows[done]] = False
        keep = ~done
        rows, xr, g, H = rows[keep], xr[keep], g[keep], H[keep]
        if rows.size == 0:
            break

        span = upper - lower
        eps = np.minimum(1e-12 * (1.0 + np.abs(xr)), 0.5 * span)
        bound = ((xr <= lower + eps) & (g > 0)) | ((xr >= upper - eps) & (g < 0))
        free = ~bound
        Hr = H * (free[:, :, None] & free[:, None, :])
        Hr = Hr + np.eye(d) * (~free[:, :, None])
        gr = np.where(free, g, 0.0)
        try:
            step = -np.linalg.solve(Hr, gr[..., None])[..., 0]
        except np.linalg.LinAlgError:
            # singular reduced Hessian somewhere in the batch: ridge it
            scale = np.maximum(np.abs(np.einsum("kii->ki", H)).max(axis=1), 1.0)
            Hr = Hr + np.eye(d) * (1e-13 * scale)[:, None, None]
            step = -np.linalg.solve(Hr, gr[..., None])[..., 0]
        step[~np.isfinite(step)] = 0.0
        # bound variables move by steepest descent (they get clipped back anyway)
        step = np.where(free, step, -g)
        slope = np.einsum("ki,ki->k", g, step)
        bad = ~(slope < 0)
        step[bad] = -g[bad]

        alpha = np.ones(rows.size)
        accepted = np.zeros(rows.size, dtype=bool)
        f_old = f[rows]
        new_x = xr.copy()
        new_f = f_old.copy()
        for _ in range(MAX_HALVINGS):
            pend = np.flatnonzero(~accepted)
            if pend.size == 0:
                break
            cand = np.clip(xr[pend] + alpha[pend, None] * step[pend], lower, upper)
            ok = np.ones(pend.size, dtype=bool)
            if feasible is not None:
                ok = feasible(cand, rows[pend])
            fc = np.full(pend.size, np.inf)
            if np.any(ok):
                fc[ok] = problem.value(cand[ok], rows[pend][ok])
            decrease = np.einsum("ki,ki->k", g[pend], cand - xr[pend])
            slack = 8 * np.finfo(float).eps * (1.0 + np.abs(f_old[pend]))
            good = ok & (fc <= f_old[pend] + ARMIJO * decrease + slack)
            idx = pend[good]
            new_x[idx] = cand[good]
            new_f[idx] = fc[good]
            accepted[idx] = True
            alpha[pend[~good]] *= 0.5
        stalled = ~accepted
        # no representable decrease left: stop these rows at the current iterate
        active[rows[stalled]] = False
        roundoff_stop[rows[stalled]] = True
        x[rows] = new_x
        f[rows] = new_f

    g, _ = problem.derivatives(x, all_rows)
    pg_norm = np.linalg.norm(projected_gradient(x, g, lower, upper), axis=1)
    # rows that stopped because no representable decrease remains count as
    # converged when they are within roundoff of stationarity
    converged = (pg_norm <= tol) | (roundoff_stop & (pg_norm <= ROUNDOFF_PG))
    return BoxSolution(x=x, value=f, projected_gradient=pg_norm, converged=converged, iterations=it)
