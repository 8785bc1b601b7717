"""Alternating class-level / semantic-level graph refinement.

Each round rebuilds the semantic affinity A from the current node features
and the class consistency W from the current class rows, then updates

    class rows:  C_k = mix(f_C([C_{k-1}, A C_{k-1}]), C_{k-1})
    features:    S_k = f_S([S_{k-1}, W S_{k-1}])

where ``mix`` blends new and old rows with weight alpha or 1 - alpha
depending on whether the segmentation head was confident for that pixel
relative to its class-specific dynamic threshold. The stage order decides
which edges see which (updated or previous) nodes. Edges are treated as
constants by :func:`refine_backward`.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .clg import DEFAULT_CLASS_CAP, build_clg_affinity, normalize_clg
from .nn import Cache, ContractError, Layer, mlp_backward, mlp_forward
from .slg import SlgParams, build_slg_affinity, normalize_symmetric
from .tensor_store import seeded_rng

ORDERS = ("clg_first", "slg_first", "simultaneous")


@dataclass(frozen=True)
class RefineConfig:
    K: int = 2
    k: int | None = 20
    gamma: float = 1.0
    alpha: float = 0.8
    sigma: float = 0.95
    order: str = "clg_first"
    class_thresholds: bool = True
    class_cap: int | None = DEFAULT_CLASS_CAP

    def __post_init__(self):
        if int(self.K) < 1:
            raise ValueError(f"K must be >= 1, got {self.K}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if not 0.0 < self.sigma <= 1.0:
            raise ValueError(f"sigma must lie in (0, 1], got {self.sigma}")
        if self.order not in ORDERS:
            raise ValueError(f"order must be one of {ORDERS}, got {self.order!r}")
        if self.k is not None and self.k < 0:
            raise ValueError(f"k must be >= 0 or None, got {self.k}")


@dataclass
class ThresholdState:
    sigma: float
    counts: np.ndarray
    eta: np.ndarray


@dataclass
class GraphState:
    slg_features: np.ndarray
    clg_probs: np.ndarray
    slg_edges: sp.csr_matrix | None = None
    clg_edges: sp.csr_matrix | None = None
    round: int = 0


@dataclass
class _RoundTape:
    A: sp.csr_matrix
    W: sp.csr_matrix
    fc_cache: Cache
    fs_cache: Cache


@dataclass
class RefineResult:
    state: GraphState
    round_probs: list[np.ndarray]
    round_features: list[np.ndarray]
    thresholds: ThresholdState
    gate: np.ndarray  # per-row weight on the propagated value
    tape: list[_RoundTape] = field(default_factory=list)


def dynamic_thresholds(probs, sigma: float, class_specific: bool = True) -> ThresholdState:
    """Per-class thresholds scaled by each class's share of confident pixels.

    With no confident pixel at all every threshold is 0. ``class_specific``
    False gives the fixed threshold sigma for every class.
    """
    p = np.asarray(probs, dtype=np.float64)
    C = p.shape[1]
    conf = p.max(axis=1)
    pred = p.argmax(axis=1)
    counts = np.bincount(pred[conf > sigma], minlength=C).astype(np.int64)
    if not class_specific:
        return ThresholdState(sigma, counts, np.full(C, float(sigma)))
    top = counts.max() if C else 0
    if top == 0:
        eta = np.zeros(C)
    else:
        eta = counts / top * sigma
        eta[counts == top] = sigma
    return ThresholdState(sigma, counts, eta)


def confidence_gate(probs_for_gate, thresholds: ThresholdState, alpha: float) -> np.ndarray:
    p = np.asarray(probs_for_gate, dtype=np.float64)
    if not thresholds.counts.any():
        # nothing cleared sigma: every row takes the low-confidence branch
        return np.full(p.shape[0], 1.0 - alpha)
    confident = p.max(axis=1) >= thresholds.eta[p.argmax(axis=1)]
    return np.where(confident, alpha, 1.0 - alpha)


def mix_update(v_hat, v_prev, thresholds: ThresholdState, probs_for_gate, alpha: float) -> np.ndarray:
    """Row i: a*v_hat + (1-a)*v_prev with a = alpha for confident rows, 1-alpha otherwise."""
    a = confidence_gate(probs_for_gate, thresholds, alpha)[:, None]
    return a * np.asarray(v_hat) + (1.0 - a) * np.asarray(v_prev)


def _concat_forward(layer: Layer, x: np.ndarray, edges: sp.spmatrix) -> tuple[np.ndarray, Cache]:
    if layer.in_dim != 2 * x.shape[1]:
        raise ContractError(f"graph layer expects width {layer.in_dim // 2}, nodes have {x.shape[1]}")
    if edges.shape != (x.shape[0], x.shape[0]):
        raise ContractError(f"edge matrix {edges.shape} does not match {x.shape[0]} nodes")
    return mlp_forward(layer, np.hstack([x, edges @ x]))


def propagate_clg(state: GraphState, f_c: Layer) -> np.ndarray:
    """f_C([X_i, sum_j A_ij X_j]) using the state's semantic edges."""
    return _concat_forward(f_c, state.clg_probs, state.slg_edges)[0]


def propagate_slg(state: GraphState, f_s: Layer) -> np.ndarray:
    """f_S([X_i, sum_j W_ij X_j]) using the state's class-consistency edges."""
    return _concat_forward(f_s, state.slg_features, state.clg_edges)[0]


def semantic_edges(features: np.ndarray, cfg: RefineConfig) -> sp.csr_matrix:
    n = features.shape[0]
    k = cfg.k if cfg.k is None or cfg.k < n else None
    raw = build_slg_affinity(features, SlgParams(k, cfg.gamma), zero_rows="isolate")
    return normalize_symmetric(raw)


def class_edges(probs: np.ndarray, cfg: RefineConfig, exclude, rng) -> sp.csr_matrix:
    return normalize_clg(build_clg_affinity(probs, exclude, cap=cfg.class_cap, rng=rng))


def refine(features, probs, seg_head_probs, cfg: RefineConfig, layers: list[tuple[Layer, Layer]],
           *, exclude=None, rng: np.random.Generator | None = None, record: bool = False) -> RefineResult:
    """Run ``cfg.K`` refinement rounds; ``layers[k]`` is the (f_C, f_S) pair of round k.

    Returns the final state and the class rows / node features after every
    round. ``record`` keeps the caches needed by :func:`refine_backward`.
    """
    S = np.asarray(features, dtype=np.float64)
    C = np.asarray(probs, dtype=np.float64)
    p = np.asarray(seg_head_probs, dtype=np.float64)
    if not (S.shape[0] == C.shape[0] == p.shape[0]) or C.shape != p.shape:
        raise ContractError(f"inconsistent inputs: features {S.shape}, probs {C.shape}, head {p.shape}")
    if len(layers) < cfg.K:
        raise ContractError(f"need {cfg.K} graph layer pairs, got {len(layers)}")
    rng = seeded_rng(0) if rng is None else rng
    thresholds = dynamic_thresholds(p, cfg.sigma, cfg.class_thresholds)
    gate = confidence_gate(p, thresholds, cfg.alpha)
    a = gate[:, None]

    round_probs, round_feats, tape = [], [], []
    A = W = None
    for k in range(cfg.K):
        f_c, f_s = layers[k]
        if cfg.order == "clg_first":
            A = semantic_edges(S, cfg)
            v_hat, fc_cache = _concat_forward(f_c, C, A)
            C_new = a * v_hat + (1.0 - a) * C
            W = class_edges(C_new, cfg, exclude, rng)
            S_new, fs_cache = _concat_forward(f_s, S, W)
        elif cfg.order == "slg_first":
            W = class_edges(C, cfg, exclude, rng)
            S_new, fs_cache = _concat_forward(f_s, S, W)
            A = semantic_edges(S_new, cfg)
            v_hat, fc_cache = _concat_forward(f_c, C, A)
            C_new = a * v_hat + (1.0 - a) * C
        else:
            A = semantic_edges(S, cfg)
            W = class_edges(C, cfg, exclude, rng)
            v_hat, fc_cache = _concat_forward(f_c, C, A)
            C_new = a * v_hat + (1.0 - a) * C
            S_new, fs_cache = _concat_forward(f_s, S, W)
        C, S = C_new, S_new
        round_probs.append(C)
        round_feats.append(S)
        if record:
            tape.append(_RoundTape(A, W, fc_cache, fs_cache))
    state = GraphState(S, C, A, W, cfg.K)
    return RefineResult(state, round_probs, round_feats, thresholds, gate, tape)


def refine_backward(result: RefineResult, layers: list[tuple[Layer, Layer]],
                    grad_probs: list, grad_features: list):
    """Backpropagate per-round gradients through a recorded refinement.

    ``grad_probs[k]`` / ``grad_features[k]`` are dL/dC_{k+1} and dL/dS_{k+1}
    (``None`` for zero). Returns ``(layer_grads, d_probs0, d_features0)``
    where ``layer_grads[k]`` is ``(grads of f_C, grads of f_S)``.
    """
    if not result.tape:
        raise ContractError("refine was not run with record=True")
    K = len(result.tape)
    a = result.gate[:, None]
    gC = np.zeros_like(result.round_probs[-1])
    gS = np.zeros_like(result.round_features[-1])
    layer_grads = [None] * K
    for k in reversed(range(K)):
        t = result.tape[k]
        f_c, f_s = layers[k]
        if grad_probs[k] is not None:
            gC = gC + grad_probs[k]
        if grad_features[k] is not None:
            gS = gS + grad_features[k]
        gs_params, dT = mlp_backward(f_s, t.fs_cache, gS)
        m = gS.shape[1]
        gS = dT[:, :m] + t.W.T @ dT[:, m:]
        gc_params, dU = mlp_backward(f_c, t.fc_cache, a * gC)
        c = gC.shape[1]
        gC = (1.0 - a) * gC + dU[:, :c] + t.A.T @ dU[:, c:]
        layer_grads[k] = (gc_params, gs_params)
    return layer_grads, gC, gS


def aggregate_pseudo_labels(per_round_probs: list) -> np.ndarray:
    """argmax over classes of the summed per-round class rows (ties to the lowest class)."""
    if not per_round_probs:
        raise ContractError("need at least one round of class rows")
    shape = np.shape(per_round_probs[0])
    if any(np.shape(p) != shape for p in per_round_probs):
        raise ContractError("per-round class matrices differ in shape")
    return np.sum(per_round_probs, axis=0).argmax(axis=1).astype(np.int64)
