"""Maximum-weight bipartite matching between groundtruth and predicted segments."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

# Totals within this distance of the optimum count as ties.
TIE_TOLERANCE = 1e-12
BRUTE_FORCE_MAX_DIM = 8


@dataclass(frozen=True)
class Matching:
    pairs: tuple[tuple[int, int, float], ...]
    unmatched_gt: tuple[int, ...]
    unmatched_pred: tuple[int, ...]

    @property
    def total(self) -> float:
        return float(sum(w for _, _, w in self.pairs))

    @property
    def index_pairs(self) -> tuple[tuple[int, int], ...]:
        return tuple((g, p) for g, p, _ in self.pairs)


def _as_weights(w) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 2:
        if w.size == 0:
            return w.reshape(0, 0)
        raise ValueError(f"weight matrix must be 2-D, got shape {w.shape}")
    if not np.all(np.isfinite(w)) or np.any(w < 0):
        raise ValueError("weights must be finite and non-negative")
    return w


def _build(w: np.ndarray, assign: dict[int, int]) -> Matching:
    pairs = tuple((g, p, float(w[g, p])) for g, p in sorted(assign.items()))
    used = set(assign.values())
    return Matching(
        pairs=pairs,
        unmatched_gt=tuple(g for g in range(w.shape[0]) if g not in assign),
        unmatched_pred=tuple(p for p in range(w.shape[1]) if p not in used),
    )


def _best_completion(eff: np.ndarray, rows: list[int], cols: list[int]) -> tuple[float, dict[int, int]]:
    """Optimal partial assignment of ``rows`` to ``cols`` on the effective weights."""
    if not rows or not cols:
        return 0.0, {}
    sub = eff[np.ix_(rows, cols)]
    r, c = linear_sum_assignment(sub, maximize=True)
    assign = {}
    total = 0.0
    for i, j in zip(r, c):
        if sub[i, j] > 0:
            assign[rows[i]] = cols[j]
            total += sub[i, j]
    return total, assign


def max_weight_matching(w, min_weight: float = 0.0) -> Matching:
    """Maximum-weight matching using only edges with weight > ``min_weight``.

    Among optimal matchings the lexicographically smallest pair list (by
    ``(gt_index, pred_index)``) is returned, so results are deterministic.
    """
    if min_weight < 0:
        raise ValueError("min_weight must be non-negative")
    w = _as_weights(w)
    n_gt, n_pred = w.shape
    eligible = w > min_weight
    if n_gt == 0 or n_pred == 0 or not eligible.any():
        return _build(w, {})
    # Ineligible edges get zero weight: with non-negative weights, a maximum
    # assignment on this matrix restricted to positive entries is optimal.
    eff = np.where(eligible, w, 0.0)
    best, current = _best_completion(eff, list(range(n_gt)), list(range(n_pred)))

    fixed: dict[int, int] = {}
    fixed_total = 0.0
    for g in range(n_gt):
        cand = np.flatnonzero(eligible[g]).tolist()
        cur = current.get(g)
        # options that would make the pair list lexicographically smaller
        options = cand if cur is None else [p for p in cand if p < cur]
        chosen = cur
        used = set(fixed.values())
        for p in options:
            if p in used:
                continue
            rest_rows = list(range(g + 1, n_gt))
            rest_cols = [q for q in range(n_pred) if q not in used and q != p]
            sub_total, sub_assign = _best_completion(eff, rest_rows, rest_cols)
            if fixed_total + eff[g, p] + sub_total >= best - TIE_TOLERANCE:
                chosen = p
                current = {**fixed, g: p, **sub_assign}
                break
        if chosen is not None:
            fixed[g] = chosen
            fixed_total += eff[g, chosen]
    return _build(w, fixed)


def brute_force_matching(w, min_weight: float = 0.0) -> Matching:
    """Exhaustive reference for :func:`max_weight_matching` (test oracle).

    Enumerates every injective partial assignment in lexicographic order of
    its pair list and keeps the first one whose total reaches the optimum.
    """
    if min_weight < 0:
        raise ValueError("min_weight must be non-negative")
    w = _as_weights(w)
    n_gt, n_pred = w.shape
    if n_gt > BRUTE_FORCE_MAX_DIM or n_pred > BRUTE_FORCE_MAX_DIM:
        raise ValueError(f"brute force limited to {BRUTE_FORCE_MAX_DIM}x{BRUTE_FORCE_MAX_DIM}, got {w.shape}")
    edges = [[p for p in range(n_pred) if w[g, p] > min_weight] for g in range(n_gt)]
    wl = w.tolist()

    def optimum(g: int, used: set[int]) -> float:
        if g == n_gt:
            return 0.0
        best = optimum(g + 1, used)
        for p in edges[g]:
            if p not in used:
                used.add(p)
                best = max(best, wl[g][p] + optimum(g + 1, used))
                used.discard(p)
        return best

    target = optimum(0, set()) - TIE_TOLERANCE

    def first_reaching(g: int, used: set[int], acc: float, path: dict[int, int]):
        if g == n_gt:
            return dict(path) if acc >= target else None
        for p in edges[g]:
            if p in used:
                continue
            used.add(p)
            path[g] = p
            found = first_reaching(g + 1, used, acc + wl[g][p], path)
            del path[g]
            used.discard(p)
            if found is not None:
                return found
        return first_reaching(g + 1, used, acc, path)

    return _build(w, first_reaching(0, set(), 0.0, {}))


def is_valid_matching(m: Matching, n_gt: int, n_pred: int, w=None, min_weight: float = 0.0) -> bool:
    gts = [g for g, _, _ in m.pairs]
    preds = [p for _, p, _ in m.pairs]
    if len(set(gts)) != len(gts) or len(set(preds)) != len(preds):
        return False
    if sorted(gts + list(m.unmatched_gt)) != list(range(n_gt)):
        return False
    if sorted(preds + list(m.unmatched_pred)) != list(range(n_pred)):
        return False
    if w is not None:
        w = np.asarray(w, dtype=np.float64)
        if any(not (w[g, p] > min_weight) or w[g, p] != wt for g, p, wt in m.pairs):
            return False
    return True
