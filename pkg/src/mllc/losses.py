"""Training objectives with analytic gradients.

All cross-entropy style losses are negative log-likelihoods averaged over
the contributing pixels. Gradients are returned with respect to the
probabilities or raw (un-normalized) features passed in.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diagnostics
from .tensor_store import IGNORE

LOG_FLOOR = 1e-12
MAX_PAIRS = 4096


@dataclass(frozen=True)
class LossConfig:
    lambda_balance: float = 0.5
    tau: float = 0.1
    lambda_slg: float = 0.1
    lambda_clg: float = 1.0
    lambda_unsup: float = 1.0
    beta: float = 0.99
    literal_ema: bool = False
    dynamic_weight: bool = True
    pair_term: bool = True
    proto_term: bool = True
    max_pairs: int | None = MAX_PAIRS
    reduction: str = "mean"

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError(f"tau must be positive, got {self.tau}")
        if not 0.0 <= self.lambda_balance <= 1.0:
            raise ValueError(f"lambda_balance must lie in [0, 1], got {self.lambda_balance}")
        if not 0.0 <= self.beta <= 1.0:
            raise ValueError(f"beta must lie in [0, 1], got {self.beta}")
        if self.reduction not in ("mean", "sum"):
            raise ValueError(f"reduction must be 'mean' or 'sum', got {self.reduction!r}")


def _target_probs(probs: np.ndarray, rows: np.ndarray, labels: np.ndarray) -> np.ndarray:
    t = probs[rows, labels]
    clamped = t < LOG_FLOOR
    diagnostics.bump("log_clamped", int(clamped.sum()))
    return np.maximum(t, LOG_FLOOR)


def supervised_ce(probs, labels) -> tuple[float, np.ndarray]:
    """Mean -log p[i, y_i] over non-IGNORE pixels, and its gradient wrt ``probs``."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    grad = np.zeros_like(probs)
    rows = np.flatnonzero(labels != IGNORE)
    if rows.size == 0:
        return 0.0, grad
    t = _target_probs(probs, rows, labels[rows])
    loss = float(-np.log(t).mean())
    grad[rows, labels[rows]] = np.where(probs[rows, labels[rows]] < LOG_FLOOR, 0.0, -1.0 / (rows.size * t))
    return loss, grad


def clg_weighted_ce(per_round_probs: list, pseudo, dynamic_weight: bool = True):
    """Sum over rounds of mean -w_i log P_k[i, y_i], w_i = P_k[i, y_i] held constant.

    Returns ``(total, [grad per round])``.
    """
    pseudo = np.asarray(pseudo)
    rows = np.flatnonzero(pseudo != IGNORE)
    total, grads = 0.0, []
    for P in per_round_probs:
        P = np.asarray(P, dtype=np.float64)
        g = np.zeros_like(P)
        if rows.size:
            raw = P[rows, pseudo[rows]]
            t = _target_probs(P, rows, pseudo[rows])
            w = raw if dynamic_weight else np.ones_like(raw)
            total += float(-(w * np.log(t)).mean())
            g[rows, pseudo[rows]] = np.where(raw < LOG_FLOOR, 0.0, -w / (rows.size * t))
        grads.append(g)
    return total, grads


def compute_prototypes(features, labels, num_classes: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-class mean feature rows; returns ``(protos, present)``."""
    x = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    valid = labels != IGNORE
    counts = np.bincount(labels[valid], minlength=num_classes).astype(np.float64)
    sums = np.zeros((num_classes, x.shape[1]))
    np.add.at(sums, labels[valid], x[valid])
    present = counts > 0
    protos = np.zeros_like(sums)
    protos[present] = sums[present] / counts[present, None]
    return protos, present


@dataclass
class PrototypeBank:
    protos: np.ndarray
    initialized: np.ndarray
    beta: float = 0.99
    literal: bool = False

    @classmethod
    def empty(cls, num_classes: int, dim: int, beta: float = 0.99, literal: bool = False) -> "PrototypeBank":
        return cls(np.zeros((num_classes, dim)), np.zeros(num_classes, dtype=bool), beta, literal)

    def copy(self) -> "PrototypeBank":
        return PrototypeBank(self.protos.copy(), self.initialized.copy(), self.beta, self.literal)


def ema_update_prototypes(bank: PrototypeBank, batch_protos, present) -> PrototypeBank:
    """Slow-moving average: old * beta + batch * (1 - beta) for classes in the batch.

    A class seen for the first time copies the batch prototype. ``literal``
    swaps the weights (new * beta + old * (1 - beta)). Returns a new bank.
    """
    out = bank.copy()
    batch_protos = np.asarray(batch_protos, dtype=np.float64)
    if batch_protos.shape != bank.protos.shape:
        raise ValueError(f"prototype shape {batch_protos.shape} != bank {bank.protos.shape}")
    present = np.asarray(present, dtype=bool)
    fresh = present & ~bank.initialized
    seen = present & bank.initialized
    keep = (1.0 - bank.beta) if bank.literal else bank.beta
    out.protos[seen] = keep * bank.protos[seen] + (1.0 - keep) * batch_protos[seen]
    out.protos[fresh] = batch_protos[fresh]
    out.initialized = bank.initialized | present
    return out


def _unit(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    norms = np.linalg.norm(x, axis=1)
    return x / np.where(norms > 0, norms, 1.0)[:, None], norms


def sample_pairs(n: int, max_pairs: int | None, rng: np.random.Generator | None):
    """Ordered pairs (i, j), i != j: exhaustive, or ``max_pairs`` uniform draws."""
    total = n * (n - 1)
    if max_pairs is None or total <= max_pairs:
        i, j = np.nonzero(~np.eye(n, dtype=bool))
        return i, j, 1.0
    if rng is None:
        raise ValueError("pair sampling needs a seeded rng")
    i = rng.integers(0, n, size=max_pairs)
    j = rng.integers(0, n - 1, size=max_pairs)
    j = j + (j >= i)
    return i, j, total / max_pairs


def slg_contrastive_loss(features, pseudo_labels, bank: PrototypeBank, cfg: LossConfig,
                         rng: np.random.Generator | None = None) -> tuple[float, np.ndarray]:
    """Pair-affinity term plus prototype term on L2-normalized features.

    pair:  lambda * sum over pairs of [same (u_i.u_j - 1)^2 + (1 - same)(u_i.u_j)^2]
    proto: -(1 - lambda) * sum_i log softmax_c(u_i . p_c / tau)[y_i]

    Prototypes are normalized on read; uninitialized classes are left out of
    the softmax and rows labeled with them are skipped. With mean reduction
    each term is averaged over its pairs / rows. Returns the gradient with
    respect to the raw ``features``.
    """
    v = np.asarray(features, dtype=np.float64)
    y = np.asarray(pseudo_labels)
    n = v.shape[0]
    u, norms = _unit(v)
    gu = np.zeros_like(u)
    lam = cfg.lambda_balance
    loss = 0.0

    if cfg.pair_term and lam > 0 and n > 1:
        i, j, scale = sample_pairs(n, cfg.max_pairs, rng)
        keep = (y[i] != IGNORE) & (y[j] != IGNORE)
        i, j = i[keep], j[keep]
        if i.size:
            s = np.einsum("ij,ij->i", u[i], u[j])
            same = (y[i] == y[j]).astype(np.float64)
            terms = same * (s - 1.0) ** 2 + (1.0 - same) * s ** 2
            w = lam / i.size if cfg.reduction == "mean" else lam * scale
            loss += w * float(terms.sum())
            ds = (w * 2.0 * (s - same))[:, None]
            np.add.at(gu, i, ds * u[j])
            np.add.at(gu, j, ds * u[i])

    if cfg.proto_term and lam < 1:
        live = np.flatnonzero(bank.initialized)
        if live.size == 0:
            raise ValueError("prototype bank has no initialized class")
        pos = np.full(bank.protos.shape[0], -1)
        pos[live] = np.arange(live.size)
        valid = y != IGNORE
        target = np.where(valid, pos[np.where(valid, y, 0)], -1)
        skipped = valid & (target < 0)
        diagnostics.bump("proto_rows_skipped", int(skipped.sum()))
        rows = np.flatnonzero(target >= 0)
        if rows.size:
            P, _ = _unit(bank.protos[live])
            logits = u[rows] @ P.T / cfg.tau
            logits -= logits.max(axis=1, keepdims=True)
            logp = logits - np.log(np.exp(logits).sum(axis=1, keepdims=True))
            t = target[rows]
            w = (1.0 - lam) / rows.size if cfg.reduction == "mean" else (1.0 - lam)
            loss += -w * float(logp[np.arange(rows.size), t].sum())
            soft = np.exp(logp)
            soft[np.arange(rows.size), t] -= 1.0
            gu[rows] += w * (soft @ P) / cfg.tau

    safe = np.where(norms > 0, norms, 1.0)[:, None]
    gv = (gu - u * np.einsum("ij,ij->i", gu, u)[:, None]) / safe
    gv[norms == 0] = 0.0
    return loss, gv


def total_unsup_loss(slg_losses, clg_losses, cfg: LossConfig) -> float:
    return cfg.lambda_slg * float(np.sum(slg_losses)) + cfg.lambda_clg * float(np.sum(clg_losses))


def total_loss(sup: float, unsup: float, cfg: LossConfig) -> float:
    return sup + cfg.lambda_unsup * unsup
