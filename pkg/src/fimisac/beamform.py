"""Beamformer optimization at fixed surface shapes.

The average-Fisher objective with per-user SINR and total-power constraints is
lifted to covariance variables (one per communication user plus one aggregate
sensing covariance), the fractional Fisher term is linearized through 2x2
Schur-complement PSD blocks, and the resulting SDR is solved by the embedded
conic solver.  A shrinking spectral penalty with SCA restores rank-one
communication covariances, and beams are extracted by eigendecomposition.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, replace

import numpy as np

from . import conic
from .conic import Cone, ConicProblem, ProblemBuilder, SolveStatus
from .fisher import kappa_profile
from .model import (ArrayGeometry, BeamformerSet, SystemConfig, all_sinrs,
                    steering, steering_derivative)
from .quadrature import GaussHermiteRule, nodes_to_angles

RANK_ONE_TARGET = 0.999


class InfeasibleBeamforming(RuntimeError):
    """The SINR/power constraint set admits no covariance solution."""


class RankOneFailure(RuntimeError):
    """Penalty loop exhausted without reaching the rank-one ratio target."""


class ValidationFailure(RuntimeError):
    """Extracted beams violate a re-checked constraint."""


@dataclass(frozen=True)
class SensingDirections:
    """Per-quadrature-node sensing data at fixed shapes.

    ``weights`` are the normalized quadrature weights times the Fisher
    prefactor ``2 T |alpha_r|^2 / sigma_r^2``, so the SDR objective value is
    directly the average-Fisher surrogate.  Multi-target runs concatenate the
    node sets of all priors.
    """

    thetas: np.ndarray
    weights: np.ndarray
    steer: np.ndarray       # (N_t, M)
    steer_dot: np.ndarray   # (N_t, M)
    kappa: np.ndarray       # (M,)
    n_rx: int


def sensing_directions(tx_geom: ArrayGeometry, rx_geom: ArrayGeometry,
                       rule: GaussHermiteRule, priors,
                       config: SystemConfig,
                       normalized: bool = True) -> SensingDirections:
    priors = priors if isinstance(priors, (list, tuple)) else [priors]
    prefactor = (2.0 * config.block_len * abs(config.alpha_r) ** 2
                 / config.noise_rx)
    thetas, weights = [], []
    for prior in priors:
        thetas.append(nodes_to_angles(rule, prior))
        w = rule.weights if normalized else rule.weights_raw
        weights.append(prefactor * w)
    thetas = np.concatenate(thetas)
    weights = np.concatenate(weights)
    steer = steering(tx_geom, thetas)
    steer_dot = steering_derivative(tx_geom, thetas,
                                    config.derivative_convention)
    kappa = kappa_profile(rx_geom, thetas)
    return SensingDirections(thetas, weights, steer, steer_dot, kappa,
                             rx_geom.size)


@dataclass
class SdrLayout:
    """Variable layout of one beamforming SDR instance."""

    comm_slices: list
    sense_slices: list
    schur_slices: list
    gamma_index: np.ndarray
    slack_index: np.ndarray
    n_tx: int

    @property
    def cov_slices(self):
        return list(self.comm_slices) + list(self.sense_slices)


def build_sdr(dirs: SensingDirections, channels, config: SystemConfig,
              aggregate_sensing: bool = True):
    """Encode the Fisher-SDR as a standard-form conic problem.

    Returns ``(problem, layout)``.  Rows: one power row, one SINR row per
    user (when the SINR threshold is positive), and ten equality rows tying
    each embedded 2x2 Schur block to the covariance variables.
    """
    n = config.n_tx
    n_nodes = dirs.thetas.size
    k_users = len(channels)
    r_th = config.sinr_min

    pb = ProblemBuilder("beamform-sdr")
    comm_slices = [pb.add_block(Cone.PSD, 2 * n) for _ in range(k_users)]
    n_sense_blocks = 1 if aggregate_sensing else dirs.n_rx
    sense_slices = [pb.add_block(Cone.PSD, 2 * n)
                    for _ in range(n_sense_blocks)]
    schur_slices = [pb.add_block(Cone.PSD, 4) for _ in range(n_nodes)]
    gamma_sl = pb.add_block(Cone.FREE, n_nodes)
    gamma_index = np.arange(gamma_sl.start, gamma_sl.stop)
    n_slack = 1 + (k_users if r_th > 0 else 0)
    slack_sl = pb.add_block(Cone.NONNEG, n_slack)
    slack_index = np.arange(slack_sl.start, slack_sl.stop)

    cov_slices = comm_slices + sense_slices
    dim_cov = comm_slices[0].stop - comm_slices[0].start if cov_slices else 0

    # Per-node data vectors acting on svec(embed(E)).
    v_aa, v_dd, v_re, v_im = [], [], [], []
    for u in range(n_nodes):
        a = dirs.steer[:, u]
        adot = dirs.steer_dot[:, u]
        v_aa.append(conic.embed_inner_vector(np.outer(a, a.conj())))
        v_dd.append(conic.embed_inner_vector(np.outer(adot, adot.conj())))
        cross = np.outer(a, adot.conj())
        v_re.append(conic.embed_inner_vector(cross))
        v_im.append(conic.embed_inner_vector(1j * cross))

    # Objective: maximize sum_u w_u (N_r gamma_u + kappa_u a^H E a).
    v_obj = sum(w * k * va for w, k, va in zip(dirs.weights, dirs.kappa, v_aa))
    for sl in cov_slices:
        idx = np.arange(sl.start, sl.stop)
        pb.add_cost(idx, -np.asarray(v_obj))
    pb.add_cost(gamma_index, -dirs.weights * dirs.n_rx)

    # Power: Tr(sum E) + slack = P_max (trace of the embedding doubles).
    trace_vec = 0.5 * conic.svec(np.eye(2 * n))
    entries = [(np.arange(sl.start, sl.stop), trace_vec) for sl in cov_slices]
    entries.append((slack_index[0], np.array([1.0])))
    pb.add_row(entries, config.p_max)

    # SINR rows, expressed in noise units (h / sigma_k, rhs 1) so the
    # constraint scale is O(1) regardless of path loss.
    if r_th > 0:
        for i, h in enumerate(channels):
            hn = h / math.sqrt(config.noise_user)
            hv = conic.embed_inner_vector(np.outer(hn, hn.conj()))
            entries = []
            for k, sl in enumerate(comm_slices):
                coef = hv / r_th if k == i else -hv
                entries.append((np.arange(sl.start, sl.stop), coef))
            for sl in sense_slices:
                entries.append((np.arange(sl.start, sl.stop), -hv))
            entries.append((slack_index[1 + i], np.array([-1.0])))
            pb.add_row(entries, 1.0)

    # Schur blocks: embed([[t1 - gamma, z], [z*, t2]]) with
    # t1 = adot^H E adot, t2 = a^H E a, z = a^H E adot.
    sqrt2 = math.sqrt(2.0)
    cov_idx = [np.arange(sl.start, sl.stop) for sl in cov_slices]

    def tie(y_idx, gamma_col, vec, scale):
        entries = [(y_idx, np.array([1.0]))]
        if gamma_col is not None:
            entries.append((gamma_col, np.array([1.0])))
        if vec is not None:
            for idx in cov_idx:
                entries.append((idx, scale * vec))
        pb.add_row(entries, 0.0)

    for u, sl in enumerate(schur_slices):
        y = np.arange(sl.start, sl.stop)
        g = gamma_index[u]
        tie(y[0], g, v_dd[u], -1.0)          # (0,0) = t1 - gamma
        tie(y[1], None, v_re[u], -sqrt2)     # (1,0) = Re z
        tie(y[2], None, v_aa[u], -1.0)       # (1,1) = t2
        tie(y[3], None, None, 0.0)           # (2,0) = 0
        tie(y[4], None, v_im[u], -sqrt2)     # (2,1) = Im z
        tie(y[5], g, v_dd[u], -1.0)          # (2,2) = t1 - gamma
        tie(y[6], None, v_im[u], sqrt2)      # (3,0) = -Im z
        tie(y[7], None, None, 0.0)           # (3,1) = 0
        tie(y[8], None, v_re[u], -sqrt2)     # (3,2) = Re z
        tie(y[9], None, v_aa[u], -1.0)       # (3,3) = t2

    layout = SdrLayout(comm_slices, sense_slices, schur_slices, gamma_index,
                       slack_index, n)
    return pb.build(), layout


@dataclass
class SdrIterate:
    """Converged covariance solution of the penalty loop."""

    comm_covs: list
    sense_cov: np.ndarray
    gammas: np.ndarray
    rho: float
    objective: float
    rank_ratios: np.ndarray
    solution: conic.ConicSolution


def _covariances(solution, layout):
    n = layout.n_tx
    comm = [conic.complex_from_embed_svec(solution.x[sl], n)
            for sl in layout.comm_slices]
    sense = sum(conic.complex_from_embed_svec(solution.x[sl], n)
                for sl in layout.sense_slices)
    if isinstance(sense, int):  # no sensing blocks
        sense = np.zeros((n, n), dtype=complex)
    return comm, sense


def _rank_ratios(comm_covs, p_max: float) -> np.ndarray:
    ratios = []
    for E in comm_covs:
        tr = float(np.trace(E).real)
        if tr <= 1e-12 * p_max:
            ratios.append(1.0)
            continue
        ratios.append(float(np.linalg.eigvalsh(E)[-1]) / tr)
    return np.array(ratios) if ratios else np.empty(0)


def _solve_checked(problem: ConicProblem, tol: float) -> conic.ConicSolution:
    solution = conic.solve(problem, tol=tol)
    if solution.status is SolveStatus.INFEASIBLE:
        raise InfeasibleBeamforming(
            "SDR infeasible: SINR threshold unattainable at this power budget")
    if solution.status is not SolveStatus.OPTIMAL:
        raise conic.NumericalBreakdown(
            f"SDR solve ended with status {solution.status.value} "
            f"(residuals {solution.residuals})")
    return solution


def penalty_sca_loop(dirs: SensingDirections, channels,
                     config: SystemConfig, rho0: float | None = None,
                     rho_shrink: float = 0.5, max_outer: int = 15,
                     rank_tol: float = RANK_ONE_TARGET,
                     solver_tol: float = 1e-7,
                     aggregate_sensing: bool = True) -> SdrIterate:
    """Solve the SDR, then shrink-penalize until communication covariances are
    rank-one.

    The first solve is penalty-free and doubles as the feasibility check; the
    SCA linearization point is its dominant eigenvector.
    """
    problem, layout = build_sdr(dirs, channels, config, aggregate_sensing)
    base_c = problem.c.copy()
    solution = _solve_checked(problem, solver_tol)
    comm, sense = _covariances(solution, layout)
    ratios = _rank_ratios(comm, config.p_max)
    objective = -float(base_c @ solution.x)

    def iterate(rho):
        return SdrIterate(comm, sense,
                          solution.x[layout.gamma_index].copy(), rho,
                          objective, ratios, solution)

    if ratios.size == 0 or np.all(ratios >= rank_tol):
        return iterate(math.inf)

    rho = 10.0 * config.p_max if rho0 is None else rho0
    trace_vec = 0.5 * conic.svec(np.eye(2 * layout.n_tx))
    prev_obj = objective
    for _ in range(max_outer):
        c_pen = base_c.copy()
        for k, sl in enumerate(layout.comm_slices):
            _, vecs = np.linalg.eigh(comm[k])
            v = vecs[:, -1]
            lin = conic.embed_inner_vector(np.outer(v, v.conj()))
            c_pen[sl] += (trace_vec - lin) / rho
        problem.c = c_pen
        solution = _solve_checked(problem, solver_tol)
        comm, sense = _covariances(solution, layout)
        ratios = _rank_ratios(comm, config.p_max)
        objective = -float(base_c @ solution.x)
        converged = (np.all(ratios >= rank_tol)
                     and abs(objective - prev_obj)
                     <= 1e-5 * max(abs(prev_obj), 1e-30))
        prev_obj = objective
        if converged:
            return iterate(rho)
        rho *= rho_shrink
    if np.all(ratios >= rank_tol):
        return iterate(rho)
    raise RankOneFailure(
        f"rank-one ratios {ratios} below {rank_tol} after {max_outer} rounds")


def _phase_normalize(w: np.ndarray) -> np.ndarray:
    idx = int(np.argmax(np.abs(w)))
    if np.abs(w[idx]) == 0.0:
        return w
    return w * (np.abs(w[idx]) / w[idx])


def extract_beams(iterate: SdrIterate, channels,
                  config: SystemConfig) -> BeamformerSet:
    """Factor the covariance iterate into an explicit beamformer.

    Communication beams are the dominant eigenpairs; the sensing covariance is
    factored exactly (columns padded with zeros to ``N_r``).  The result is
    rescaled to the exact power budget and re-validated against every SINR
    constraint; a power transfer from sensing to communication repairs small
    extraction losses.
    """
    n = config.n_tx
    columns = []
    for E in iterate.comm_covs:
        vals, vecs = np.linalg.eigh(E)
        w = math.sqrt(max(vals[-1], 0.0)) * vecs[:, -1]
        columns.append(_phase_normalize(w))
    vals, vecs = np.linalg.eigh(iterate.sense_cov)
    order = np.argsort(vals)[::-1]
    sense_cols = []
    floor = 1e-14 * max(float(vals[-1]), 1e-30)
    for idx in order[:config.n_rx]:
        if vals[idx] > floor:
            sense_cols.append(math.sqrt(vals[idx])
                              * _phase_normalize(vecs[:, idx]))
    while len(sense_cols) < config.n_rx:
        sense_cols.append(np.zeros(n, dtype=complex))
    W = np.column_stack(columns + sense_cols) if columns or sense_cols \
        else np.zeros((n, 0), dtype=complex)
    k_users = len(iterate.comm_covs)

    norm = float(np.sum(np.abs(W) ** 2))
    if norm > 0:
        W = W * math.sqrt(config.p_max / norm)
    beams = BeamformerSet(W, k_users)

    if k_users and config.sinr_min > 0:
        target = config.sinr_min * (1.0 - 1e-4)
        inner_target = config.sinr_min * (1.0 - 2e-5)
        if np.min(all_sinrs(beams, channels, config.noise_user)) < inner_target:
            beams = _repair_sinr(beams, channels, config, inner_target)
        sinrs = all_sinrs(beams, channels, config.noise_user)
        if np.min(sinrs) < target:
            worst = int(np.argmin(sinrs))
            raise ValidationFailure(
                f"user {worst} SINR {sinrs[worst]:.6g} below "
                f"{target:.6g} after extraction")
    if abs(beams.power - config.p_max) > 1e-6 * config.p_max:
        raise ValidationFailure(
            f"power {beams.power} deviates from budget {config.p_max}")
    return beams


def _repair_sinr(beams: BeamformerSet, channels, config: SystemConfig,
                 target: float) -> BeamformerSet:
    """Shift power from sensing to communication columns until SINRs recover."""
    comm, sense = beams.comm, beams.sensing
    p_comm = float(np.sum(np.abs(comm) ** 2))
    p_sense = float(np.sum(np.abs(sense) ** 2))
    if p_comm <= 0 or p_sense <= 0:
        return beams
    total = p_comm + p_sense

    def blend(t):
        boost = math.sqrt(max(total - t * t * p_comm, 0.0) / p_sense)
        return BeamformerSet(np.hstack([t * comm, boost * sense]),
                             beams.n_users)

    def ok(t):
        cand = blend(t)
        return np.min(all_sinrs(cand, channels, config.noise_user)) >= target

    t_max = math.sqrt(total / p_comm)
    if not ok(t_max):
        return blend(t_max)  # let the caller's validation report the failure
    lo, hi = 1.0, t_max
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        if ok(mid):
            hi = mid
        else:
            lo = mid
    return blend(hi)
