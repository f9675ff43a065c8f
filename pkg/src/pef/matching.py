"""Bipartite matching of ground-truth joints to query predictions, and the set loss."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import KeypointInstance


class MatchingError(ValueError):
    pass


@dataclass
class Assignment:
    """``(gt index, query index)`` pairs, one per ground-truth joint, sorted by gt index."""

    pairs: list[tuple[int, int]]

    @property
    def rows(self) -> np.ndarray:
        return np.array([r for r, _ in self.pairs], dtype=np.intp)

    @property
    def cols(self) -> np.ndarray:
        return np.array([c for _, c in self.pairs], dtype=np.intp)

    def total(self, cost) -> float:
        cost = np.asarray(cost)
        return float(sum(cost[r, c] for r, c in self.pairs))

    def __len__(self) -> int:
        return len(self.pairs)


@dataclass
class PredictionSet:
    """Per-query class logits ``(M, K+1)`` and coordinates ``(M, 2)``; Tensors or arrays."""

    class_logits: object
    coords: object


@dataclass
class LossBreakdown:
    total: Tensor
    class_term: Tensor
    coord_term: Tensor


# --- linear sum assignment ------------------------------------------------------

def _solve(cost: np.ndarray):
    """Shortest augmenting path assignment for a rows <= cols matrix.

    Returns the column of each row together with dual potentials ``u``
    (rows) and ``v`` (columns, all <= 0) satisfying u_i + v_j <= cost_ij.
    """
    n, m = cost.shape
    u = np.zeros(n)
    v = np.zeros(m)
    col4row = np.full(n, -1, dtype=np.intp)
    row4col = np.full(m, -1, dtype=np.intp)
    for cur in range(n):
        shortest = np.full(m, np.inf)
        path = np.full(m, -1, dtype=np.intp)
        scanned_rows = np.zeros(n, dtype=bool)
        scanned_cols = np.zeros(m, dtype=bool)
        i, min_val, sink = cur, 0.0, -1
        while sink < 0:
            scanned_rows[i] = True
            reduced = min_val + cost[i] - u[i] - v
            better = ~scanned_cols & (reduced < shortest)
            path[better] = i
            shortest[better] = reduced[better]
            masked = np.where(scanned_cols, np.inf, shortest)
            low = masked.min()
            ties = np.flatnonzero(masked == low)
            free = ties[row4col[ties] < 0]
            j = int(free[0] if len(free) else ties[0])
            min_val = float(low)
            scanned_cols[j] = True
            if row4col[j] < 0:
                sink = j
            else:
                i = int(row4col[j])
        u[cur] += min_val
        others = scanned_rows.copy()
        others[cur] = False
        u[others] += min_val - shortest[col4row[others]]
        v[scanned_cols] -= min_val - shortest[scanned_cols]
        j = sink
        while True:
            i = int(path[j])
            row4col[j] = i
            col4row[i], j = j, int(col4row[i])
            if i == cur:
                break
    return col4row, u, v


def _row_total(cost: np.ndarray, cols) -> float:
    return float(sum(cost[r, c] for r, c in enumerate(cols)))


def hungarian(cost) -> Assignment:
    """Minimum-cost assignment of every row to a distinct column.

    Among optimal assignments the lexicographically smallest (row 0's column
    first, then row 1's, ...) is returned.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise MatchingError(f"cost matrix must be 2-d, got shape {cost.shape}")
    g, m = cost.shape
    if g > m:
        raise MatchingError(f"more ground-truth joints ({g}) than queries ({m})")
    if not np.isfinite(cost).all():
        raise MatchingError("cost matrix has non-finite entries")
    if g == 0:
        return Assignment([])

    cols, u, v = _solve(cost)
    best = _row_total(cost, cols)
    tol = 1e-12 * max(1.0, abs(best), float(np.abs(cost).max()))
    # walk rows in order, moving each to the smallest column that keeps the optimum
    cols = list(cols)
    used: list[int] = []
    for r in range(g):
        fixed_cost = sum(cost[i, cols[i]] for i in range(r))
        avail = np.ones(m, dtype=bool)
        avail[used] = False
        bound_base = fixed_cost + u[r:].sum() + v[avail].sum()
        for c in range(cols[r]):
            if not avail[c]:
                continue
            if bound_base + cost[r, c] - u[r] - v[c] > best + tol:
                continue
            rest_rows = np.arange(r + 1, g)
            rest_cols = np.flatnonzero(avail & (np.arange(m) != c))
            if len(rest_rows):
                sub_cols, _, _ = _solve(cost[np.ix_(rest_rows, rest_cols)])
                tail = [int(rest_cols[k]) for k in sub_cols]
            else:
                tail = []
            candidate = cols[:r] + [c] + tail
            if _row_total(cost, candidate) <= best + tol:
                cols = candidate
                break
        used.append(cols[r])
    return Assignment([(r, int(c)) for r, c in enumerate(cols)])


# --- costs and losses -----------------------------------------------------------

def _softmax_np(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _array(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


GroundTruth = KeypointInstance | Sequence[tuple[int, float, float, int]]


def gt_targets(gt: GroundTruth, num_classes: int | None = None):
    """Class ids and coordinates of the labeled joints (visibility > 0).

    ``gt`` is a :class:`KeypointInstance` (rows are classes) or a joint list
    of ``(class id, x, y, visibility)`` kept in the listed order.
    """
    if isinstance(gt, KeypointInstance):
        classes, xy = gt.labeled()
    else:
        rows = [(int(k), float(x), float(y)) for k, x, y, v in gt if v > 0]
        classes = np.array([r[0] for r in rows], dtype=np.intp)
        xy = np.array([r[1:] for r in rows], dtype=np.float64).reshape(-1, 2)
        if len(set(classes.tolist())) != len(classes):
            raise MatchingError("at most one joint per class id")
    if len(classes) and classes.min() < 0:
        raise MatchingError(f"negative joint class {classes.min()}")
    if num_classes is not None and len(classes) and classes.max() >= num_classes:
        raise MatchingError(f"joint class {classes.max()} >= K={num_classes}")
    return classes, xy


def match_cost(pred: PredictionSet, gt: GroundTruth, l1_weight: float = 5.0) -> np.ndarray:
    """cost[g, q] = -p_q(class_g) + l1_weight * |coords_q - xy_g|_1."""
    logits = np.asarray(_array(pred.class_logits), dtype=np.float64)
    coords = np.asarray(_array(pred.coords), dtype=np.float64)
    classes, xy = gt_targets(gt, logits.shape[-1] - 1)
    prob = _softmax_np(logits)
    dist = np.abs(xy[:, None, :] - coords[None, :, :]).sum(axis=-1)
    return -prob[:, classes].T + l1_weight * dist


def match(pred: PredictionSet, gt: GroundTruth, l1_weight: float = 5.0) -> Assignment:
    return hungarian(match_cost(pred, gt, l1_weight))


def batch_set_loss(logits: Tensor, coords: Tensor, gts: Sequence[GroundTruth],
                   assignments: Sequence[Assignment], l1_weight: float = 5.0,
                   eos_coef: float = 0.1) -> LossBreakdown:
    """Mean over the batch of the per-sample set loss.

    Per sample: class term is the cross-entropy over all M queries (matched
    class or non-object; non-object rows weighted by ``eos_coef``, normalized
    by the weight sum); coordinate term is ``l1_weight`` times the mean L1
    distance over matched pairs.
    """
    b, m, c = logits.shape
    k = c - 1
    targets = np.full((b, m), k, dtype=np.intp)
    weights = np.full((b, m), eos_coef)
    gather, gt_xy, pair_w = [], [], []
    for s, (gt, asg) in enumerate(zip(gts, assignments)):
        classes, xy = gt_targets(gt, k)
        _validate(asg, len(classes), m)
        rows, cols = asg.rows, asg.cols
        targets[s, cols] = classes[rows]
        weights[s, cols] = 1.0
        gather.extend(s * m + cols)
        gt_xy.extend(xy[rows])
        pair_w.extend([1.0 / max(len(rows), 1)] * len(rows))
    weights /= weights.sum(axis=1, keepdims=True)

    dtype = logits.dtype
    ce = ad.softmax_cross_entropy(logits, targets)
    class_term = ad.scale(ad.sum_(ad.mul(ce, Tensor(weights, dtype=dtype))), 1.0 / b)
    if gather:
        picked = ad.lookup(ad.reshape(coords, (b * m, 2)), np.array(gather))
        dist = ad.l1_distance(picked, Tensor(np.array(gt_xy), dtype=dtype))
        coord_term = ad.scale(ad.sum_(ad.mul(dist, Tensor(np.array(pair_w), dtype=dtype))),
                              l1_weight / b)
    else:
        coord_term = ad.scale(ad.sum_(coords), 0.0)
    return LossBreakdown(ad.add(class_term, coord_term), class_term, coord_term)


def _validate(asg: Assignment, g: int, m: int) -> None:
    rows, cols = asg.rows, asg.cols
    if (len(rows) != g or sorted(rows.tolist()) != list(range(g))
            or len(set(cols.tolist())) != len(cols)
            or (len(cols) and (cols.min() < 0 or cols.max() >= m))):
        raise MatchingError("assignment does not cover every ground-truth joint exactly once")


def set_loss(pred: PredictionSet, gt: GroundTruth, assignment: Assignment,
             l1_weight: float = 5.0, eos_coef: float = 0.1) -> LossBreakdown:
    """Set loss for one sample; ``pred`` holds ``(M, K+1)`` and ``(M, 2)`` tensors."""
    logits = ad.as_tensor(pred.class_logits)
    coords = ad.as_tensor(pred.coords, like=logits)
    m = logits.shape[0]
    return batch_set_loss(ad.reshape(logits, (1,) + logits.shape),
                          ad.reshape(coords, (1, m, 2)), [gt], [assignment],
                          l1_weight, eos_coef)
