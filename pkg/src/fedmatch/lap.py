"""Rectangular linear sum assignment with deterministic tie-breaking.

``scipy.optimize.linear_sum_assignment`` returns one optimal assignment but
makes no promise about which one when several share the minimum total cost.
Matching runs must be reproducible, so among all optimal assignments we
return the one whose column -> row index vector is lexicographically
smallest.

The canonical assignment is built column by column. Candidate rows for a
column are pruned to the edges that are tight under LP dual potentials
(complementary slackness: every optimal assignment uses only tight edges),
and each accepted candidate beyond a forced singleton is certified by
re-solving the remaining subproblem and checking the total is preserved.
Potentials are recovered from the optimal assignment by Bellman-Ford on the
residual graph; if the recovered potentials fail validation (which only
tolerance pathologies could cause) the pruning degrades to "all rows" and
correctness is kept by the certificates alone.
"""

from __future__ import annotations

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import InternalInvariantError


def lap_min(cost: np.ndarray) -> tuple[np.ndarray, float]:
    """One optimal column -> row assignment and its total cost."""
    rows, cols = linear_sum_assignment(cost)
    col_to_row = np.empty(cost.shape[1], dtype=np.intp)
    col_to_row[cols] = rows
    total = float(cost[col_to_row, np.arange(cost.shape[1])].sum())
    return col_to_row, total


def _potentials(cost: np.ndarray, col_to_row: np.ndarray):
    """Recover dual potentials (u, v) with u_r + v_c <= cost[r, c] everywhere
    and equality on the matched edges.

    Bellman-Ford over the residual graph of the optimal assignment: sources
    are the unmatched rows (every row when the problem is square). Returns
    None when validation fails.
    """
    n_rows, n_cols = cost.shape
    matched = np.zeros(n_rows, dtype=bool)
    matched[col_to_row] = True
    d_row = np.where(matched, np.inf, 0.0)
    if not (~matched).any():
        d_row[:] = 0.0
    d_col = np.full(n_cols, np.inf)
    col_idx = np.arange(n_cols)
    for _ in range(n_rows + n_cols + 1):
        new_col = np.minimum(d_col, np.min(d_row[:, None] + cost, axis=0))
        new_row = d_row.copy()
        np.minimum.at(new_row, col_to_row, new_col - cost[col_to_row, col_idx])
        if np.array_equal(new_col, d_col) and np.array_equal(new_row, d_row):
            break
        d_col, d_row = new_col, new_row
    u, v = -d_row, d_col
    if not (np.isfinite(u).all() and np.isfinite(v).all()):
        return None
    scale = 1.0 + np.abs(cost).max()
    tol = 1e-9 * scale
    if (u[:, None] + v[None, :] > cost + tol).any():
        return None
    if np.abs(u[col_to_row] + v - cost[col_to_row, col_idx]).max() > tol:
        return None
    return u, v


def solve_lap_matrix(cost: np.ndarray) -> np.ndarray:
    """Optimal assignment, canonical under ties.

    Requires rows >= columns and finite entries. Returns, for each column,
    the index of its assigned row; among all minimum-cost assignments the
    returned row vector is the lexicographically smallest.
    """
    cost = np.asarray(cost, dtype=float)
    if cost.ndim != 2:
        raise InternalInvariantError("cost must be a matrix")
    n_rows, n_cols = cost.shape
    if n_cols == 0:
        return np.empty(0, dtype=np.intp)
    if n_rows < n_cols:
        raise InternalInvariantError(f"need rows >= columns, got {cost.shape}")
    if not np.isfinite(cost).all():
        raise InternalInvariantError("cost entries must be finite")

    base, total = lap_min(cost)
    duals = _potentials(cost, base)
    scale = 1.0 + np.abs(cost).max()
    tight_tol = 1e-7 * scale
    verify_tol = 1e-9 * scale

    out = np.empty(n_cols, dtype=np.intp)
    avail = np.ones(n_rows, dtype=bool)
    rem_total = total
    for j in range(n_cols):
        if duals is not None:
            u, v = duals
            cand_mask = avail & (cost[:, j] - u - v[j] <= tight_tol)
            candidates = np.flatnonzero(cand_mask)
        else:
            candidates = np.flatnonzero(avail)
        chosen = -1
        if len(candidates) == 1:
            chosen = int(candidates[0])
        else:
            for r in candidates:
                if j == n_cols - 1:
                    ok = cost[r, j] <= rem_total + verify_tol
                else:
                    sub_rows = avail.copy()
                    sub_rows[r] = False
                    _, sub_total = lap_min(cost[np.ix_(sub_rows, np.arange(j + 1, n_cols))])
                    ok = cost[r, j] + sub_total <= rem_total + verify_tol
                if ok:
                    chosen = int(r)
                    break
        if chosen < 0:
            # Tolerance corner: no pruned candidate certified. Re-solve the
            # remaining block and take its row for this column.
            sub_rows = np.flatnonzero(avail)
            sub_sol, _ = lap_min(cost[np.ix_(sub_rows, np.arange(j, n_cols))])
            chosen = int(sub_rows[sub_sol[0]])
        out[j] = chosen
        avail[chosen] = False
        rem_total -= cost[chosen, j]

    achieved = float(cost[out, np.arange(n_cols)].sum())
    if achieved > total + max(1e-7 * scale, n_cols * verify_tol):
        # Give up on canonical tie-breaking rather than return a worse total.
        return base
    return out
