"""Fisher information for target-angle sensing.

The unknown parameter vector is ``(theta, Re alpha, Im alpha)``.  ``fim_full``
assembles the 3x3 information matrix from the echo model; ``efim_theta`` is
the closed-form equivalent Fisher information for the angle alone and must
equal the theta-block Schur complement of the full matrix.  ``avg_fisher`` is
the quadrature-averaged surrogate objective used by every optimizer, and
``avg_crb_mc`` estimates the average CRB ``E[1/F(theta)]`` by Monte Carlo.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .model import ArrayGeometry, SystemConfig, steering, steering_derivative
from .quadrature import GaussHermiteRule, nodes_to_angles

SIGNAL_FLOOR = 1e-30


class SignalNullError(ValueError):
    """Raised when no transmit energy reaches the evaluation angle."""

    def __init__(self, theta: float):
        super().__init__(f"transmit signal null at angle {theta}; CRB undefined")
        self.theta = theta


@dataclass(frozen=True)
class TargetParameters:
    """Deterministic target parameters for one Fisher evaluation."""

    theta: float
    alpha: complex


@dataclass(frozen=True)
class EfimContext:
    """Receive-side quantities entering the closed form.

    ``zeta = sin(theta) x_r - cos(theta) y_r``;
    ``P = delta^2 (I - 11^T / N_r)``; ``kappa = zeta^T P zeta``.
    """

    zeta: np.ndarray
    P: np.ndarray
    kappa: float


def efim_context(rx_geom: ArrayGeometry, theta: float) -> EfimContext:
    n = rx_geom.size
    zeta = math.sin(theta) * rx_geom.x - math.cos(theta) * rx_geom.y
    delta2 = rx_geom.wavenumber ** 2
    P = delta2 * (np.eye(n) - np.ones((n, n)) / n)
    return EfimContext(zeta, P, float(zeta @ P @ zeta))


def kappa_profile(rx_geom: ArrayGeometry, thetas: np.ndarray) -> np.ndarray:
    """Vectorized ``zeta^T P zeta`` for many angles."""
    # zeta columns per angle: sin(t) x - cos(t) y
    zeta = (np.multiply.outer(rx_geom.x, np.sin(thetas))
            - np.multiply.outer(rx_geom.y, np.cos(thetas)))
    delta2 = rx_geom.wavenumber ** 2
    return delta2 * (np.sum(zeta ** 2, axis=0)
                     - np.sum(zeta, axis=0) ** 2 / rx_geom.size)


def fim_full(W: np.ndarray, tx_geom: ArrayGeometry, rx_geom: ArrayGeometry,
             target: TargetParameters, block_len: int, noise_rx: float,
             convention: str = "exact") -> np.ndarray:
    """3x3 Fisher information matrix for ``(theta, Re alpha, Im alpha)``.

    Uses ``A = b a^H`` and its angle derivative
    ``Adot = bdot a^H + b adot^H``; the receive derivative is always exact
    while the transmit derivative follows ``convention``.
    """
    if W.shape[0] != tx_geom.size:
        raise ValueError("beamformer row count must equal transmit elements")
    theta, alpha = target.theta, target.alpha
    a = steering(tx_geom, theta)
    adot = steering_derivative(tx_geom, theta, convention)
    b = steering(rx_geom, theta)
    bdot = steering_derivative(rx_geom, theta, "exact")
    A = np.outer(b, a.conj())
    Adot = np.outer(bdot, a.conj()) + np.outer(b, adot.conj())
    E = W @ W.conj().T
    scale = 2.0 * block_len / noise_rx
    # Tr{X E Y^H} = <Y, X E>_F
    f_tt = scale * abs(alpha) ** 2 * np.vdot(Adot, Adot @ E).real
    m = np.vdot(Adot, A @ E)
    am = np.conj(alpha) * m
    f_ta = scale * np.array([am.real, -am.imag])
    f_aa = scale * np.vdot(A, A @ E).real
    fim = np.empty((3, 3))
    fim[0, 0] = f_tt
    fim[0, 1:] = f_ta
    fim[1:, 0] = f_ta
    fim[1:, 1:] = f_aa * np.eye(2)
    return fim


def efim_theta_batch(W: np.ndarray, tx_geom: ArrayGeometry,
                     rx_geom: ArrayGeometry, thetas: np.ndarray,
                     alpha_r: complex, block_len: int, noise_rx: float,
                     convention: str = "exact") -> np.ndarray:
    """Closed-form equivalent Fisher information at many angles at once."""
    thetas = np.atleast_1d(np.asarray(thetas, dtype=float))
    a = steering(tx_geom, thetas)                       # (N_t, M)
    adot = steering_derivative(tx_geom, thetas, convention)
    aW = a.conj().T @ W                                 # (M, cols)
    adW = adot.conj().T @ W
    den = np.sum(np.abs(aW) ** 2, axis=1)
    if np.any(den < SIGNAL_FLOOR):
        raise SignalNullError(float(thetas[den < SIGNAL_FLOOR][0]))
    cross = np.sum(aW * adW.conj(), axis=1)             # a^H E adot per angle
    kappa = kappa_profile(rx_geom, thetas)
    n_r = rx_geom.size
    scale = 2.0 * block_len * abs(alpha_r) ** 2 / noise_rx
    return scale * (kappa * den + n_r * np.sum(np.abs(adW) ** 2, axis=1)
                    - n_r * np.abs(cross) ** 2 / den)


def efim_theta(W: np.ndarray, tx_geom: ArrayGeometry, rx_geom: ArrayGeometry,
               theta: float, alpha_r: complex, block_len: int,
               noise_rx: float, convention: str = "exact") -> float:
    """Equivalent Fisher information ``F(theta)`` (scalar closed form)."""
    return float(efim_theta_batch(W, tx_geom, rx_geom, np.array([theta]),
                                  alpha_r, block_len, noise_rx, convention)[0])


def efim_from_fim(fim: np.ndarray) -> float:
    """Theta-block Schur complement of a 3x3 Fisher matrix."""
    return float(fim[0, 0] - fim[0, 1:] @ np.linalg.solve(fim[1:, 1:], fim[1:, 0]))


def trace_identities_check(W: np.ndarray, tx_geom: ArrayGeometry,
                           rx_geom: ArrayGeometry, theta: float,
                           convention: str = "exact") -> float:
    """Max relative residual of the three trace expansions behind the closed form."""
    a = steering(tx_geom, theta)
    adot = steering_derivative(tx_geom, theta, convention)
    b = steering(rx_geom, theta)
    delta = rx_geom.wavenumber
    zeta = math.sin(theta) * rx_geom.x - math.cos(theta) * rx_geom.y
    bdot = -1j * delta * zeta * b
    A = np.outer(b, a.conj())
    Adot = np.outer(bdot, a.conj()) + np.outer(b, adot.conj())
    E = W @ W.conj().T
    n_r = rx_geom.size
    aW = a.conj() @ W
    adW = adot.conj() @ W
    cross = aW @ adW.conj().T if aW.ndim > 1 else np.sum(aW * adW.conj())
    s = float(np.sum(zeta))

    pairs = [
        (np.vdot(A, A @ E), n_r * np.sum(np.abs(aW) ** 2)),
        (np.vdot(Adot, A @ E),
         1j * delta * np.sum(np.abs(aW) ** 2) * s + n_r * cross),
        (np.vdot(Adot, Adot @ E),
         delta ** 2 * np.sum(np.abs(aW) ** 2) * float(zeta @ zeta)
         + n_r * np.sum(np.abs(adW) ** 2) + 2.0 * delta * cross.imag * s),
    ]
    worst = 0.0
    for lhs, rhs in pairs:
        denom = max(abs(lhs), abs(rhs))
        if denom == 0.0:
            continue
        worst = max(worst, abs(lhs - rhs) / denom)
    return worst


def avg_fisher(W: np.ndarray, tx_geom: ArrayGeometry, rx_geom: ArrayGeometry,
               rule: GaussHermiteRule, prior, config: SystemConfig,
               normalized: bool = True) -> float:
    """Quadrature average of ``F(theta)`` under one prior (the surrogate
    objective), or the sum over a list of priors for multi-target runs."""
    priors = prior if isinstance(prior, (list, tuple)) else [prior]
    weights = rule.weights if normalized else rule.weights_raw
    total = 0.0
    for p in priors:
        values = efim_theta_batch(W, tx_geom, rx_geom, nodes_to_angles(rule, p),
                                  config.alpha_r, config.block_len,
                                  config.noise_rx, config.derivative_convention)
        total += float(weights @ values)
    return total


def avg_crb_mc(W: np.ndarray, tx_geom: ArrayGeometry, rx_geom: ArrayGeometry,
               prior, n_samples: int, seed: int, config: SystemConfig):
    """Monte-Carlo average CRB ``mean(1/F(theta_i))`` with its standard error.

    Angles are drawn from the prior truncated to ``mean +- 3 std`` so the
    inverse stays integrable; deterministic given the seed.
    """
    if n_samples < 100:
        raise ValueError(f"n_samples must be >= 100, got {n_samples}")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed)]))
    thetas = np.empty(0)
    while thetas.size < n_samples:
        draw = rng.normal(prior.mean, prior.std, size=2 * n_samples)
        keep = np.abs(draw - prior.mean) <= 3.0 * prior.std
        thetas = np.concatenate([thetas, draw[keep]])
    thetas = thetas[:n_samples]
    f = efim_theta_batch(W, tx_geom, rx_geom, thetas, config.alpha_r,
                         config.block_len, config.noise_rx,
                         config.derivative_convention)
    if np.any(f <= SIGNAL_FLOOR):
        raise SignalNullError(float(thetas[f <= SIGNAL_FLOOR][0]))
    crb = 1.0 / f
    return float(crb.mean()), float(crb.std(ddof=1) / math.sqrt(n_samples))
