"""Gauss-Hermite quadrature and prior-weighted averaging of angle functionals.

A rule of order U integrates ``exp(-z^2) f(z)`` exactly for polynomials up to
degree ``2U - 1``.  For a Gaussian prior ``N(mean, std^2)`` the substitution
``theta = mean + sqrt(2) std z`` turns the expectation of ``F(theta)`` into
that weighted integral; dividing the raw weights by ``sqrt(pi)`` makes them
sum to one, so a constant averages to itself.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .model import TargetPrior

SQRT_PI = math.sqrt(math.pi)


def hermite_value(n: int, x) -> np.ndarray:
    """Physicists' Hermite polynomial ``H_n(x)`` by the three-term recurrence."""
    x = np.asarray(x, dtype=float)
    h_prev = np.ones_like(x)
    if n == 0:
        return h_prev
    h = 2.0 * x
    for k in range(1, n):
        h, h_prev = 2.0 * x * h - 2.0 * k * h_prev, h
    return h


@dataclass(frozen=True)
class GaussHermiteRule:
    """Nodes and weights of a Gauss-Hermite rule.

    ``weights_raw`` sum to ``sqrt(pi)``; ``weights`` are normalized to sum to 1.
    """

    order: int
    nodes: np.ndarray
    weights_raw: np.ndarray
    weights: np.ndarray


def gh_rule(order: int) -> GaussHermiteRule:
    """Build the order-U rule.

    Nodes are the roots of the U-th Hermite polynomial, computed as the
    eigenvalues of the symmetric tridiagonal Jacobi matrix of the Hermite
    recurrence (off-diagonal ``sqrt(k/2)``).  Weights use
    ``2^(U-1) U! sqrt(pi) / (U^2 H_{U-1}(z_u)^2)``.
    """
    if not 1 <= order <= 50:
        raise ValueError(f"order must be in [1, 50], got {order}")
    if order == 1:
        nodes = np.zeros(1)
    else:
        off = np.sqrt(np.arange(1, order) / 2.0)
        jacobi = np.diag(off, 1) + np.diag(off, -1)
        nodes = np.linalg.eigvalsh(jacobi)
        nodes = 0.5 * (nodes - nodes[::-1])  # enforce exact symmetry about 0
    h_prev = hermite_value(order - 1, nodes)
    weights_raw = (2.0 ** (order - 1) * math.factorial(order) * SQRT_PI
                   / (order ** 2 * h_prev ** 2))
    return GaussHermiteRule(order, nodes, weights_raw, weights_raw / SQRT_PI)


def nodes_to_angles(rule: GaussHermiteRule, prior: TargetPrior) -> np.ndarray:
    """Quadrature angles ``mean + sqrt(2) std z_u``."""
    return prior.mean + math.sqrt(2.0) * prior.std * rule.nodes


def gh_average(f, rule: GaussHermiteRule, prior: TargetPrior,
               normalized: bool = True) -> float:
    """Prior-weighted average ``sum_u w_u f(theta_u)``.

    With ``normalized=False`` the raw weights are used, reproducing the bare
    quadrature sum (a constant positive rescaling of the expectation).
    """
    angles = nodes_to_angles(rule, prior)
    values = np.array([float(f(t)) for t in angles])
    if not np.all(np.isfinite(values)):
        bad = angles[~np.isfinite(values)][0]
        raise ValueError(f"non-finite integrand value at angle {bad}")
    w = rule.weights if normalized else rule.weights_raw
    return float(w @ values)
