"""Semantic-level graph: clamped-cosine k-NN affinities and their normalization."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from . import diagnostics

log = logging.getLogger(__name__)

ALL = None  # fully connected neighbor mode


class DegenerateFeatureError(ValueError):
    pass


class GraphParameterError(ValueError):
    pass


@dataclass(frozen=True)
class SlgParams:
    k: int | None = 20
    gamma: float = 1.0

    def __post_init__(self):
        if self.k is not None and self.k < 0:
            raise GraphParameterError(f"k must be >= 0 or ALL, got {self.k}")
        if not self.gamma > 0:
            raise GraphParameterError(f"gamma must be positive, got {self.gamma}")


def _unit_rows(x: np.ndarray, zero_rows: str) -> tuple[np.ndarray, np.ndarray]:
    norms = np.linalg.norm(x, axis=1)
    zero = norms == 0
    if zero.any() and zero_rows == "raise":
        raise DegenerateFeatureError(f"feature row {int(np.flatnonzero(zero)[0])} has zero norm")
    safe = np.where(zero, 1.0, norms)
    return x / safe[:, None], zero


def topk_neighbors(sim: np.ndarray, k: int) -> np.ndarray:
    """Boolean mask selecting, per row, the k largest entries of ``sim``.

    Ties at the k-th value go to the lowest column index. Entries equal to
    -inf are never preferred over finite ones.
    """
    key = -sim
    kth = np.partition(key, k - 1, axis=1)[:, k - 1]
    lt = key < kth[:, None]
    eq = key == kth[:, None]
    need = k - lt.sum(axis=1)
    return lt | (eq & (np.cumsum(eq, axis=1) <= need[:, None]))


def build_slg_affinity(features, params: SlgParams = SlgParams(), *, zero_rows: str = "raise",
                       block_rows: int = 1024) -> sp.csr_matrix:
    """Raw k-NN affinity: row i stores max(0, cos(x_i, x_j))**gamma for j in NN_k(i).

    Neighbor membership is ranked on the unclamped cosine; the clamp only
    affects the stored value, so non-positive neighbors appear as explicit
    zeros. ``zero_rows="isolate"`` turns zero-norm rows into nodes without
    neighbors instead of raising, and keeps them out of other rows' lists.
    """
    x = np.asarray(features, dtype=np.float64)
    n = x.shape[0]
    k = params.k
    if k is not None and k >= n:
        raise GraphParameterError(f"k={k} must be smaller than the node count n={n}")
    if k == 0 or n == 0:
        return sp.csr_matrix((n, n))
    unit, zero = _unit_rows(x, zero_rows)
    live = np.flatnonzero(~zero)
    k_eff = n - 1 if k is None else k
    k_eff = min(k_eff, max(live.size - 1, 0))

    indptr = np.zeros(n + 1, dtype=np.int64)
    cols_out, vals_out, rows_out = [], [], []
    if k_eff > 0:
        for start in range(0, live.size, block_rows):
            rows = live[start:start + block_rows]
            sim = unit[rows] @ unit.T
            sim[:, zero] = -np.inf
            sim[np.arange(rows.size), rows] = -np.inf
            mask = topk_neighbors(sim, k_eff)
            r, c = np.nonzero(mask)
            v = np.maximum(sim[r, c], 0.0)
            if params.gamma != 1.0:
                v = np.where(v > 0, v ** params.gamma, 0.0)
            rows_out.append(rows[r])
            cols_out.append(c)
            vals_out.append(v)
    if rows_out:
        rr = np.concatenate(rows_out)
        cc = np.concatenate(cols_out)
        vv = np.concatenate(vals_out)
        order = np.lexsort((cc, rr))
        rr, cc, vv = rr[order], cc[order], vv[order]
        indptr[1:] = np.cumsum(np.bincount(rr, minlength=n))
    else:
        cc = np.zeros(0, dtype=np.int64)
        vv = np.zeros(0)
    return sp.csr_matrix((vv, cc, indptr), shape=(n, n))


def _scale_by_degree(m: sp.csr_matrix, counter: str, warn: bool = True) -> sp.csr_matrix:
    deg = np.asarray(m.sum(axis=1)).ravel()
    isolated = deg <= 0
    if isolated.any():
        diagnostics.bump(counter, int(isolated.sum()))
        if warn:
            log.debug("%d isolated node(s) left with zero rows", int(isolated.sum()))
    inv_sqrt = np.zeros_like(deg)
    inv_sqrt[~isolated] = 1.0 / np.sqrt(deg[~isolated])
    d = sp.diags(inv_sqrt)
    out = (d @ m @ d).tocsr()
    out.sort_indices()
    return out


def normalize_symmetric(raw: sp.spmatrix) -> sp.csr_matrix:
    """D^-1/2 (R + R^T) D^-1/2 with D the row sums of R + R^T.

    Nodes of degree zero keep an all-zero row and column.
    """
    raw = sp.csr_matrix(raw)
    m = (raw + raw.T).tocsr()
    m.eliminate_zeros()
    return _scale_by_degree(m, "slg_isolated_nodes")
