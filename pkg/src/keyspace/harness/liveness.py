"""Probability that a majority of an n-node cluster is alive."""

from __future__ import annotations

from math import comb


class DomainError(ValueError):
    pass


def majority(n: int) -> int:
    return n // 2 + 1


def liveness_probability(n: int, p: float) -> float:
    """P(at least a majority of n independent nodes, each alive with probability p, are alive)."""
    if n < 1:
        raise DomainError("cluster size must be at least 1")
    if not 0.0 <= p <= 1.0:
        raise DomainError(f"aliveness {p} outside [0, 1]")
    return sum(comb(n, k) * p ** k * (1 - p) ** (n - k) for k in range(majority(n), n + 1))


def table(sizes=range(1, 6), p: float = 0.95) -> list[tuple[int, int, float]]:
    """(n, majority, probability) rows."""
    return [(n, majority(n), liveness_probability(n, p)) for n in sizes]
