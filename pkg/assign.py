"""
Set-prediction matching: cost matrix, optimal assignment, imputation loss
and probability filtering
"""

from dataclasses import dataclass
from typing import Optional, Union

import numpy as np
import torch
from scipy.optimize import linear_sum_assignment

from errors import AssignmentError, DomainError

ArrayLike = Union[np.ndarray, torch.Tensor]

LOG_EPS = 1e-7


@dataclass
class ImputationOutput:
    """M imputed latent vectors (M x d, or B x M x d) and their existence probabilities"""

    vectors: torch.Tensor
    probs: torch.Tensor

    def __len__(self) -> int:
        return int(self.probs.shape[-1])

    def item(self, b: int) -> "ImputationOutput":
        return ImputationOutput(self.vectors[b], self.probs[b])


@dataclass
class Assignment:
    """perm[i] is the (padded) target column matched to prediction i"""

    perm: np.ndarray
    total_cost: float

    def prediction_for_target(self) -> np.ndarray:
        return np.argsort(self.perm)


def _as_numpy(x: ArrayLike) -> np.ndarray:
    if isinstance(x, torch.Tensor):
        x = x.detach().cpu().double().numpy()
    return np.asarray(x, dtype=np.float64)


def match_cost(pred: ArrayLike, prob: float, target: Optional[ArrayLike]) -> float:
    """Squared distance plus (1 - p) for a real target; p alone for the empty target"""
    if target is None:
        return float(prob)
    diff = _as_numpy(pred) - _as_numpy(target)
    return float(np.dot(diff, diff) + (1.0 - prob))


def build_cost_matrix(imp: ImputationOutput, targets: ArrayLike, M: Optional[int] = None) -> np.ndarray:
    """
    M x M matching costs between predictions (rows) and padded targets (columns)

    Args:
        imp: Single-spectrum imputation output
        targets: N' x d target vectors, N' <= M
        M: Query count, defaults to the number of predictions

    Returns:
        np.ndarray: float64 cost matrix; columns N'..M-1 are the empty target
    """
    vectors = _as_numpy(imp.vectors)
    probs = _as_numpy(imp.probs)
    targets = _as_numpy(targets).reshape(-1, vectors.shape[-1])
    M = vectors.shape[0] if M is None else M
    n_targets = targets.shape[0]
    if n_targets > M:
        raise AssignmentError(f"{n_targets} targets for {M} queries; truncate targets first")
    if vectors.shape[0] != M:
        raise AssignmentError(f"Expected {M} predictions, got {vectors.shape[0]}")

    cost = np.repeat(probs[:, None], M, axis=1)
    if n_targets:
        sqdist = ((vectors[:, None, :] - targets[None, :, :]) ** 2).sum(axis=-1)
        cost[:, :n_targets] = sqdist + (1.0 - probs)[:, None]
    return cost


def _row_potentials(cost: np.ndarray, cols: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Optimal duals (u, v) for an optimal assignment rows -> cols via Bellman-Ford"""
    M = cost.shape[0]
    assigned = cost[np.arange(M), cols]
    # w[i, r]: cost of moving row r onto row i's column, relative to row i
    w = cost[:, cols].T - assigned[:, None]
    u = np.zeros(M)
    for _ in range(M):
        relaxed = np.minimum(u, (u[:, None] + w).min(axis=0))
        if np.array_equal(relaxed, u):
            break
        u = relaxed
    v = np.empty(M)
    v[cols] = assigned - u
    return u, v


def _lexicographic(tight: np.ndarray, cols: np.ndarray) -> np.ndarray:
    """Smallest perfect matching in row order within the tight-edge graph"""
    M = tight.shape[0]
    perm = cols.copy()
    owner = np.empty(M, dtype=np.int64)
    owner[perm] = np.arange(M)
    col_fixed = np.zeros(M, dtype=bool)

    for r in range(M):
        candidates = np.flatnonzero(tight[r] & ~col_fixed)
        for c in candidates:
            if c == perm[r] or _reroute(tight, perm, owner, col_fixed, r, c):
                break
        col_fixed[perm[r]] = True
    return perm


def _reroute(tight, perm, owner, col_fixed, r, c) -> bool:
    """Give column c to row r by an alternating path that frees perm[r]"""
    goal = perm[r]
    start = owner[c]
    blocked = col_fixed.copy()
    blocked[c] = True
    parent_row = np.full(tight.shape[0], -1)
    visited_rows = np.zeros(tight.shape[0], dtype=bool)
    visited_rows[[r, start]] = True
    frontier = np.array([start])
    while frontier.size:
        reach = tight[frontier] & ~blocked
        new_cols = np.flatnonzero(reach.any(axis=0))
        if new_cols.size == 0:
            return False
        parent_row[new_cols] = frontier[np.argmax(reach[:, new_cols], axis=0)]
        blocked[new_cols] = True
        if np.any(new_cols == goal):
            col = goal
            while True:
                row = parent_row[col]
                prev = perm[row]
                perm[row], owner[col] = col, row
                if row == start:
                    break
                col = prev
            perm[r], owner[c] = c, r
            return True
        rows = owner[new_cols]
        rows = rows[~visited_rows[rows]]
        visited_rows[rows] = True
        frontier = rows
    return False


def solve_assignment(cost: np.ndarray) -> Assignment:
    """
    Minimum-cost permutation, ties broken to the lexicographically smallest

    Raises:
        DomainError: non-square or non-finite cost matrix
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2 or cost.shape[0] != cost.shape[1]:
        raise DomainError(f"Cost matrix must be square, got shape {cost.shape}")
    if not np.all(np.isfinite(cost)):
        raise DomainError("Cost matrix has non-finite entries")
    M = cost.shape[0]
    if M == 0:
        return Assignment(np.zeros(0, dtype=np.int64), 0.0)

    rows, cols = linear_sum_assignment(cost)
    cols = cols[np.argsort(rows)].astype(np.int64)
    best = cost[np.arange(M), cols].sum()

    u, v = _row_potentials(cost, cols)
    tol = 1e-9 * max(1.0, float(np.abs(cost).max()))
    tight = cost - u[:, None] - v[None, :] <= tol
    perm = _lexicographic(tight, cols)
    total = cost[np.arange(M), perm].sum()
    if total > best + tol:
        # tolerance admitted a near-tie; keep the solver's optimum
        perm, total = cols, best
    return Assignment(perm, float(total))


def imputation_loss(
    imp: ImputationOutput,
    targets: torch.Tensor,
    assignment: Assignment,
    eps: float = LOG_EPS,
) -> torch.Tensor:
    """
    Matched-pair MSE over the N' real targets plus the existence log-loss over
    all M predictions; the assignment and the targets are treated as constants
    """
    vectors, probs = imp.vectors, imp.probs
    M = probs.shape[0]
    n_targets = targets.shape[0]
    pred_for_col = torch.as_tensor(assignment.prediction_for_target(), device=probs.device)
    p = probs.clamp(eps, 1.0 - eps)

    matched = pred_for_col[:n_targets]
    empty = pred_for_col[n_targets:]
    if n_targets:
        mse = ((vectors[matched] - targets.detach()) ** 2).sum(dim=-1).mean()
    else:
        mse = probs.new_zeros(())
    nll = -(torch.log(p[matched]).sum() + torch.log1p(-p[empty]).sum()) / M
    return mse + nll


def filter_mask(probs: torch.Tensor, tau: float) -> torch.Tensor:
    return probs > tau


def filter_imputed(imp: ImputationOutput, tau: float) -> torch.Tensor:
    """Rows whose probability exceeds tau, in their original order"""
    if not 0.0 < tau < 1.0:
        raise DomainError("tau must lie in (0, 1)")
    return imp.vectors[filter_mask(imp.probs, tau)]
