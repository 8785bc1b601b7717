"""Central finite-difference checks of every hand-written gradient.

Each suite draws ``configs`` random instances and reports the worst
relative error ``|g - g_fd| / max(|g|, |g_fd|)``.
"""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .losses import LossConfig, PrototypeBank, clg_weighted_ce, slg_contrastive_loss, supervised_ce
from .nn import ACTIVATIONS, Layer, mlp_backward, mlp_forward, random_layer
from .refine import RefineConfig, refine, refine_backward
from .tensor_store import IGNORE, seeded_rng

EPS = 1e-5
TOL = 1e-4


@dataclass
class SuiteResult:
    name: str
    configs: int
    max_rel_error: float
    seconds: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= TOL

    def as_dict(self) -> dict:
        return {"suite": self.name, "configs": self.configs, "max_rel_error": self.max_rel_error,
                "passed": self.passed, "seconds": self.seconds}


def numeric_grad(f, x: np.ndarray, eps: float = EPS) -> np.ndarray:
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f(x)
        flat[i] = orig - eps
        fm = f(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * eps)
    return g


def rel_error(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.linalg.norm(a), np.linalg.norm(b))
    if denom < 1e-12:
        return 0.0
    return float(np.linalg.norm(a - b) / denom)


def _simplex(rng, n, c, sharp=1.0):
    z = rng.normal(size=(n, c)) * sharp
    e = np.exp(z - z.max(axis=1, keepdims=True))
    p = e / e.sum(axis=1, keepdims=True)
    # keep entries away from the log floor so the objective stays smooth
    p = 0.9 * p + 0.1 / c
    return p


def _labels(rng, n, c, ignore_frac=0.2):
    y = rng.integers(0, c, size=n)
    y[rng.random(n) < ignore_frac] = IGNORE
    return y


def check_supervised_ce(rng) -> float:
    n, c = int(rng.integers(2, 12)), int(rng.integers(2, 6))
    p, y = _simplex(rng, n, c), _labels(rng, n, c)
    _, g = supervised_ce(p, y)
    return rel_error(g, numeric_grad(lambda q: supervised_ce(q, y)[0], p))


def check_weighted_ce(rng) -> float:
    n, c, K = int(rng.integers(2, 10)), int(rng.integers(2, 5)), int(rng.integers(1, 4))
    stack = [_simplex(rng, n, c) for _ in range(K)]
    y = _labels(rng, n, c)
    dyn = bool(rng.integers(0, 2))
    _, grads = clg_weighted_ce(stack, y, dyn)
    rows = np.flatnonzero(y != IGNORE)
    # the weights are constants: freeze them at the base point
    w = [P[rows, y[rows]] if dyn else np.ones(rows.size) for P in stack]
    worst = 0.0
    for k in range(K):
        def f(P, k=k):
            if not rows.size:
                return 0.0
            return float(-(w[k] * np.log(P[rows, y[rows]])).mean())
        worst = max(worst, rel_error(grads[k], numeric_grad(f, stack[k])))
    return worst


def _bank(rng, c, m, beta=0.99):
    init = rng.random(c) < 0.8
    init[int(rng.integers(0, c))] = True
    return PrototypeBank(rng.normal(size=(c, m)), init, beta)


def check_contrastive(rng) -> float:
    n, c, m = int(rng.integers(3, 12)), int(rng.integers(2, 5)), int(rng.integers(2, 6))
    x = rng.normal(size=(n, m))
    y = _labels(rng, n, c, 0.1)
    cfg = LossConfig(lambda_balance=float(rng.uniform(0.1, 0.9)), tau=float(rng.uniform(0.1, 1.0)),
                     max_pairs=None, reduction=str(rng.choice(["mean", "sum"])))
    bank = _bank(rng, c, m)
    _, g = slg_contrastive_loss(x, y, bank, cfg)
    return rel_error(g, numeric_grad(lambda v: slg_contrastive_loss(v, y, bank, cfg)[0], x))


def check_unsup_assembly(rng) -> float:
    """lambda_slg * sum_k contrastive(S_k) + lambda_clg * weighted CE over the rounds."""
    n, c, m, K = int(rng.integers(3, 9)), int(rng.integers(2, 4)), int(rng.integers(2, 5)), 2
    stack = [_simplex(rng, n, c) for _ in range(K)]
    feats = [rng.normal(size=(n, m)) for _ in range(K)]
    y = _labels(rng, n, c, 0.1)
    cfg = LossConfig(lambda_slg=float(rng.uniform(0.05, 1.0)), lambda_clg=float(rng.uniform(0.5, 2.0)),
                     max_pairs=None)
    banks = [_bank(rng, c, m) for _ in range(K)]
    rows = np.flatnonzero(y != IGNORE)
    w = [P[rows, y[rows]].copy() for P in stack]

    def objective(stack_, feats_):
        clg = sum(float(-(w[k] * np.log(stack_[k][rows, y[rows]])).mean()) if rows.size else 0.0
                  for k in range(K))
        slg = sum(slg_contrastive_loss(feats_[k], y, banks[k], cfg)[0] for k in range(K))
        return cfg.lambda_slg * slg + cfg.lambda_clg * clg

    _, gp = clg_weighted_ce(stack, y, True)
    worst = 0.0
    for k in range(K):
        g_analytic = cfg.lambda_clg * gp[k]

        def fp(P, k=k):
            s = list(stack)
            s[k] = P
            return objective(s, feats)
        worst = max(worst, rel_error(g_analytic, numeric_grad(fp, stack[k])))
        g_feat = cfg.lambda_slg * slg_contrastive_loss(feats[k], y, banks[k], cfg)[1]

        def ff(S, k=k):
            s = list(feats)
            s[k] = S
            return objective(stack, s)
        worst = max(worst, rel_error(g_feat, numeric_grad(ff, feats[k])))
    return worst


def check_mlp(rng) -> float:
    act = ACTIVATIONS[int(rng.integers(0, len(ACTIVATIONS)))]
    n, i, o = int(rng.integers(1, 8)), int(rng.integers(1, 7)), int(rng.integers(1, 6))
    layer = random_layer(i, o, act, rng)
    layer.bias[:] = rng.normal(size=o) * 0.5
    x = rng.normal(size=(n, i))
    up = rng.normal(size=(n, o))
    _, cache = mlp_forward(layer, x)
    grads, dx = mlp_backward(layer, cache, up)

    def f_w(w):
        return float((mlp_forward(Layer(w, layer.bias, act), x)[0] * up).sum())

    def f_b(b):
        return float((mlp_forward(Layer(layer.weight, b, act), x)[0] * up).sum())

    def f_x(v):
        return float((mlp_forward(layer, v)[0] * up).sum())

    return max(rel_error(grads["weight"], numeric_grad(f_w, layer.weight)),
               rel_error(grads["bias"], numeric_grad(f_b, layer.bias)),
               rel_error(dx, numeric_grad(f_x, x)))


def check_refine(rng) -> float:
    """Through the recorded rounds with edges frozen, wrt the inputs and the f_C weights."""
    n, c, m, K = int(rng.integers(6, 12)), int(rng.integers(2, 4)), int(rng.integers(2, 4)), 2
    x = rng.normal(size=(n, m))
    p = _simplex(rng, n, c, sharp=2.0)
    layers = [(random_layer(2 * c, c, "softmax_rows", rng, scale=1.0), random_layer(2 * m, m, "leaky_relu", rng))
              for _ in range(K)]
    cfg = RefineConfig(K=K, k=3, alpha=float(rng.uniform(0, 1)), sigma=0.5)
    res = refine(x, p, p, cfg, layers, record=True)
    gp = [rng.normal(size=(n, c)) for _ in range(K)]
    gf = [rng.normal(size=(n, m)) for _ in range(K)]
    a = res.gate[:, None]

    def replay(C, S, lay):
        total = 0.0
        for k, ((fc, fs), t) in enumerate(zip(lay, res.tape)):
            v = mlp_forward(fc, np.hstack([C, t.A @ C]))[0]
            C = a * v + (1 - a) * C
            S = mlp_forward(fs, np.hstack([S, t.W @ S]))[0]
            total += float((C * gp[k]).sum() + (S * gf[k]).sum())
        return total

    layer_grads, dC, dS = refine_backward(res, layers, gp, gf)
    worst = max(rel_error(dC, numeric_grad(lambda v: replay(v, x, layers), p)),
                rel_error(dS, numeric_grad(lambda v: replay(p, v, layers), x)))
    fc0 = layers[0][0]

    def f_w(w):
        lay = [(Layer(w, fc0.bias, fc0.activation), layers[0][1])] + layers[1:]
        return replay(p, x, lay)
    return max(worst, rel_error(layer_grads[0][0]["weight"], numeric_grad(f_w, fc0.weight)))


SUITES = {
    "supervised_ce": check_supervised_ce,
    "clg_weighted_ce": check_weighted_ce,
    "slg_contrastive": check_contrastive,
    "unsup_assembly": check_unsup_assembly,
    "mlp_backward": check_mlp,
    "refine_backward": check_refine,
}


def run_suite(name: str, configs: int = 50, seed: int = 0) -> SuiteResult:
    rng = seeded_rng(seed)
    t0 = time.perf_counter()
    worst = max(SUITES[name](rng) for _ in range(configs))
    return SuiteResult(name, configs, worst, time.perf_counter() - t0)


def run_all(configs: int = 50, seed: int = 0) -> list[SuiteResult]:
    return [run_suite(name, configs, seed) for name in SUITES]
