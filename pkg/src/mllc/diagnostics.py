"""Process-wide warning counters.

Numerical fallbacks (isolated graph nodes, clamped log-probabilities,
skipped prototype rows) are not errors, but callers often want to know how
many happened. Each fallback bumps a named counter here.
"""
from collections import Counter

counters: Counter = Counter()


def bump(name: str, amount: int = 1) -> None:
    if amount:
        counters[name] += int(amount)


def reset() -> None:
    counters.clear()


def snapshot() -> dict:
    return dict(counters)
