"""Class-level graph: same-prediction probability consistencies."""
from __future__ import annotations

import math

import numpy as np
import scipy.sparse as sp

from .slg import _scale_by_degree

DEFAULT_CLASS_CAP = 1024


def class_groups(pred: np.ndarray, include: np.ndarray, cap: int | None,
                 rng: np.random.Generator | None) -> list[np.ndarray]:
    """Index groups forming the dense blocks of the class-level graph.

    One group per predicted class; a class with more than ``cap`` members is
    shuffled and split into near-equal groups of at most ``cap`` nodes.
    """
    groups = []
    for c in np.unique(pred[include]):
        idx = np.flatnonzero(include & (pred == c))
        if cap is not None and idx.size > cap:
            if rng is None:
                raise ValueError("a seeded rng is required when the class cap is active")
            idx = rng.permutation(idx)
            parts = math.ceil(idx.size / cap)
            groups.extend(np.sort(g) for g in np.array_split(idx, parts))
        else:
            groups.append(idx)
    return groups


def build_clg_affinity(probs, exclude=None, *, cap: int | None = None,
                       rng: np.random.Generator | None = None) -> sp.csr_matrix:
    """Raw consistency matrix: 1 on the diagonal, x_i . x_j between nodes
    whose argmax agrees, nothing across classes.

    ``exclude`` marks nodes (e.g. IGNORE pixels) that get no entries at all.
    """
    p = np.asarray(probs, dtype=np.float64)
    n = p.shape[0]
    pred = p.argmax(axis=1)
    include = np.ones(n, dtype=bool) if exclude is None else ~np.asarray(exclude, dtype=bool)
    rows, cols, vals = [], [], []
    for g in class_groups(pred, include, cap, rng):
        block = p[g] @ p[g].T
        np.fill_diagonal(block, 1.0)
        rows.append(np.repeat(g, g.size))
        cols.append(np.tile(g, g.size))
        vals.append(block.ravel())
    if not rows:
        return sp.csr_matrix((n, n))
    out = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                        shape=(n, n))
    out.sort_indices()
    return out


def normalize_clg(raw: sp.spmatrix) -> sp.csr_matrix:
    """D^-1/2 W D^-1/2 with D the row sums of W (W is already symmetric)."""
    return _scale_by_degree(sp.csr_matrix(raw), "clg_excluded_nodes", warn=False)
