"""Dense conic solver for small problems: linear objective over a product of
PSD / nonnegative / free blocks with linear equality rows.

    minimize    c' x
    subject to  A x = b,   x in K

PSD blocks are stored in scaled symmetric vectorization (off-diagonals times
sqrt(2)) so cone projections and inner products are isometric.  The solver is
operator-splitting ADMM alternating projections onto the affine subspace
(cached Cholesky of A A') and the cone product (batched eigendecompositions),
with over-relaxation, Ruiz equilibration, and adaptive penalty.  It is fully
deterministic: identical inputs give bit-identical iterates.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla


class NumericalBreakdown(RuntimeError):
    """Non-finite iterates encountered during the solve."""


class Cone(str, enum.Enum):
    PSD = "psd"
    NONNEG = "nonneg"
    FREE = "free"


class SolveStatus(str, enum.Enum):
    OPTIMAL = "Optimal"
    INFEASIBLE = "Infeasible"
    UNBOUNDED = "Unbounded"
    MAX_ITER = "MaxIter"


@dataclass(frozen=True)
class ConeBlock:
    kind: Cone
    size: int  # matrix order for PSD, vector length otherwise

    @property
    def dim(self) -> int:
        if self.kind is Cone.PSD:
            return self.size * (self.size + 1) // 2
        return self.size


_SVEC_CACHE: dict[int, tuple[np.ndarray, np.ndarray, np.ndarray]] = {}


def _svec_index(n: int):
    """Cached (row, col, scale) arrays of the lower-triangular svec layout."""
    if n not in _SVEC_CACHE:
        rows, cols = np.tril_indices(n)
        scale = np.where(rows == cols, 1.0, np.sqrt(2.0))
        _SVEC_CACHE[n] = (rows, cols, scale)
    return _SVEC_CACHE[n]


def svec(M: np.ndarray) -> np.ndarray:
    """Scaled symmetric vectorization of a real symmetric matrix."""
    rows, cols, scale = _svec_index(M.shape[0])
    return M[rows, cols] * scale


def smat(v: np.ndarray) -> np.ndarray:
    """Inverse of :func:`svec`."""
    d = v.size
    n = int(round((np.sqrt(8 * d + 1) - 1) / 2))
    rows, cols, scale = _svec_index(n)
    M = np.zeros((n, n))
    M[rows, cols] = v / scale
    M[cols, rows] = M[rows, cols]
    return M


def hermitian_embed(H: np.ndarray) -> np.ndarray:
    """Real symmetric embedding ``[[Re H, -Im H], [Im H, Re H]]``.

    ``H >= 0`` iff the embedding is PSD; traces double; for Hermitian M, H:
    ``Re Tr{M^H H} = 0.5 <embed(M), embed(H)>_F``.
    """
    H = np.asarray(H)
    if H.ndim != 2 or H.shape[0] != H.shape[1]:
        raise ValueError("hermitian_embed expects a square matrix")
    if np.max(np.abs(H - H.conj().T)) > 1e-10 * max(1.0, np.max(np.abs(H))):
        raise ValueError("matrix is not Hermitian within 1e-10")
    return np.block([[H.real, -H.imag], [H.imag, H.real]])


def embed_inner_vector(M: np.ndarray) -> np.ndarray:
    """Coefficient vector ``v`` with ``Re Tr{M^H X} = v . svec(embed(X))``.

    Works for any complex square ``M`` by using its Hermitian part, which is
    what a symmetric ``X`` can see.
    """
    herm = 0.5 * (M + M.conj().T)
    return 0.5 * svec(hermitian_embed(herm))


def complex_from_embed_svec(v: np.ndarray, n: int) -> np.ndarray:
    """Recover the complex Hermitian matrix from the svec of its embedding."""
    S = smat(v)
    A = 0.5 * (S[:n, :n] + S[n:, n:])
    B = 0.5 * (S[n:, :n] - S[:n, n:])
    H = A + 1j * B
    return 0.5 * (H + H.conj().T)


@dataclass
class ConicProblem:
    """Standard-form problem data.

    ``rows/cols/vals`` are the COO triplets of the constraint matrix; block
    entries are stacked in declaration order (PSD blocks as svec).
    """

    c: np.ndarray
    rows: np.ndarray
    cols: np.ndarray
    vals: np.ndarray
    b: np.ndarray
    blocks: list[ConeBlock]
    name: str = ""

    @property
    def n_var(self) -> int:
        return sum(blk.dim for blk in self.blocks)

    @property
    def n_rows(self) -> int:
        return self.b.size

    def dense_matrix(self) -> np.ndarray:
        A = np.zeros((self.n_rows, self.n_var))
        np.add.at(A, (self.rows, self.cols), self.vals)
        return A

    def validate(self):
        n, m = self.n_var, self.n_rows
        if self.c.size != n:
            raise ValueError(f"objective length {self.c.size} != {n} variables")
        if self.rows.size and (self.rows.max() >= m or self.rows.min() < 0):
            raise ValueError("row index out of range")
        if self.cols.size and (self.cols.max() >= n or self.cols.min() < 0):
            raise ValueError("column index out of range")

    def dump(self, stream):
        """Plain-text dump: cone header, then rhs, c and A triplets."""
        print(f"problem {self.name or 'unnamed'} vars {self.n_var} "
              f"rows {self.n_rows}", file=stream)
        for blk in self.blocks:
            print(f"cone {blk.kind.value} {blk.size}", file=stream)
        for i, v in enumerate(self.b):
            print(f"b {i} {v!r}", file=stream)
        for j in np.nonzero(self.c)[0]:
            print(f"c {j} {self.c[j]!r}", file=stream)
        for r, cidx, v in zip(self.rows, self.cols, self.vals):
            print(f"A {r} {cidx} {v!r}", file=stream)


class ProblemBuilder:
    """Incremental construction of a :class:`ConicProblem`."""

    def __init__(self, name: str = ""):
        self.name = name
        self.blocks: list[ConeBlock] = []
        self.offsets: list[int] = []
        self._n = 0
        self._cost_idx: list[np.ndarray] = []
        self._cost_val: list[np.ndarray] = []
        self._rows: list[np.ndarray] = []
        self._cols: list[np.ndarray] = []
        self._vals: list[np.ndarray] = []
        self._rhs: list[float] = []

    def add_block(self, kind: Cone, size: int) -> slice:
        blk = ConeBlock(kind, size)
        self.blocks.append(blk)
        self.offsets.append(self._n)
        sl = slice(self._n, self._n + blk.dim)
        self._n += blk.dim
        return sl

    def add_cost(self, indices, values):
        idx = np.atleast_1d(np.asarray(indices, dtype=int))
        val = np.broadcast_to(np.asarray(values, dtype=float), idx.shape)
        self._cost_idx.append(idx)
        self._cost_val.append(np.array(val, dtype=float))

    def add_row(self, entries, rhs: float) -> int:
        """Add one equality row; ``entries`` is a list of (indices, values)."""
        r = len(self._rhs)
        for indices, values in entries:
            idx = np.atleast_1d(np.asarray(indices, dtype=int))
            val = np.broadcast_to(np.asarray(values, dtype=float), idx.shape)
            self._rows.append(np.full(idx.size, r, dtype=int))
            self._cols.append(idx)
            self._vals.append(np.array(val, dtype=float))
        self._rhs.append(float(rhs))
        return r

    def build(self) -> ConicProblem:
        c = np.zeros(self._n)
        for idx, val in zip(self._cost_idx, self._cost_val):
            np.add.at(c, idx, val)
        rows = (np.concatenate(self._rows) if self._rows
                else np.empty(0, dtype=int))
        cols = (np.concatenate(self._cols) if self._cols
                else np.empty(0, dtype=int))
        vals = (np.concatenate(self._vals) if self._vals
                else np.empty(0))
        problem = ConicProblem(c, rows, cols, vals,
                               np.asarray(self._rhs, dtype=float),
                               list(self.blocks), self.name)
        problem.validate()
        return problem


@dataclass
class ConicSolution:
    x: np.ndarray
    dual_eq: np.ndarray
    dual_cone: np.ndarray
    status: SolveStatus
    iterations: int
    objective: float
    primal_residual: float
    dual_residual: float
    gap_residual: float

    @property
    def residuals(self) -> dict:
        return {"primal": self.primal_residual, "dual": self.dual_residual,
                "gap": self.gap_residual}


#: Observers called with every finished ConicSolution (used by diagnostics).
SOLVE_OBSERVERS: list = []


class _ConeOps:
    """Precomputed projection / distance machinery for a block layout."""

    def __init__(self, blocks: list[ConeBlock]):
        offset = 0
        nonneg_idx = []
        free_idx = []
        psd_groups: dict[int, list[int]] = {}
        for blk in blocks:
            if blk.kind is Cone.NONNEG:
                nonneg_idx.append(np.arange(offset, offset + blk.dim))
            elif blk.kind is Cone.FREE:
                free_idx.append(np.arange(offset, offset + blk.dim))
            else:
                psd_groups.setdefault(blk.size, []).append(offset)
            offset += blk.dim
        self.n = offset
        self.nonneg = (np.concatenate(nonneg_idx) if nonneg_idx
                       else np.empty(0, dtype=int))
        self.free = (np.concatenate(free_idx) if free_idx
                     else np.empty(0, dtype=int))
        self.psd = []
        for size, offs in psd_groups.items():
            rows, cols, scale = _svec_index(size)
            dim = size * (size + 1) // 2
            gather = (np.asarray(offs)[:, None] + np.arange(dim)[None, :])
            self.psd.append({"size": size, "gather": gather, "rows": rows,
                             "cols": cols, "scale": scale})

    def _mats(self, v: np.ndarray, group) -> np.ndarray:
        V = v[group["gather"]] / group["scale"]
        g, n = V.shape[0], group["size"]
        M = np.zeros((g, n, n))
        M[:, group["rows"], group["cols"]] = V
        M[:, group["cols"], group["rows"]] = V
        return M

    def project(self, v: np.ndarray) -> np.ndarray:
        out = v.copy()
        if self.nonneg.size:
            out[self.nonneg] = np.maximum(v[self.nonneg], 0.0)
        for group in self.psd:
            M = self._mats(v, group)
            w, U = np.linalg.eigh(M)
            np.maximum(w, 0.0, out=w)
            R = (U * w[:, None, :]) @ np.swapaxes(U, 1, 2)
            out[group["gather"]] = (R[:, group["rows"], group["cols"]]
                                    * group["scale"])
        return out

    def primal_violation(self, v: np.ndarray) -> float:
        """How far v sits outside K (inf-norm style)."""
        worst = 0.0
        if self.nonneg.size:
            worst = max(worst, float(-min(np.min(v[self.nonneg]), 0.0)))
        for group in self.psd:
            w = np.linalg.eigvalsh(self._mats(v, group))
            worst = max(worst, float(-min(w.min(), 0.0)))
        return worst

    def dual_violation(self, s: np.ndarray) -> float:
        """How far s sits outside K* (free blocks dualize to {0})."""
        worst = self.primal_violation(s)
        if self.free.size:
            worst = max(worst, float(np.max(np.abs(s[self.free]))))
        return worst


def _presolve(A: np.ndarray, b: np.ndarray, rank_tol: float = 1e-10):
    """Drop exactly dependent rows; detect inconsistent dependencies.

    Returns (A_kept, b_kept, keep_indices) or None when the dropped rows make
    the system infeasible.
    """
    m = A.shape[0]
    if m == 0:
        return A, b, np.empty(0, dtype=int)
    scale = np.max(np.abs(A), axis=1)
    if np.any(scale == 0):
        zero_rows = np.nonzero(scale == 0)[0]
        if np.any(np.abs(b[zero_rows]) > rank_tol * max(1.0, np.max(np.abs(b)))):
            return None
        keep = np.nonzero(scale > 0)[0]
        A, b = A[keep], b[keep]
        res = _presolve(A, b, rank_tol)
        if res is None:
            return None
        return res[0], res[1], keep[res[2]]
    _, R, piv = sla.qr(A.T, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    if diag.size == 0 or diag[0] == 0.0:
        rank = 0
    else:
        rank = int(np.sum(diag > rank_tol * diag[0]))
    keep = np.sort(piv[:rank])
    if rank == m:
        return A, b, keep
    dropped = np.sort(piv[rank:])
    A_kept, b_kept = A[keep], b[keep]
    coeff, *_ = np.linalg.lstsq(A_kept.T, A[dropped].T, rcond=None)
    recon_b = coeff.T @ b_kept
    if np.any(np.abs(recon_b - b[dropped]) > 1e-8 * (1.0 + np.max(np.abs(b)))):
        return None
    return A_kept, b_kept, keep


def _equilibrate(A: np.ndarray, c: np.ndarray, blocks: list[ConeBlock],
                 iters: int = 15):
    """Ruiz scaling of the stacked ``[A; c']`` system.

    PSD blocks get one scalar per block (any per-entry scaling would break
    cone invariance of the projection); nonnegative and free blocks scale per
    entry.  Returns the scaled matrix, column scales ``d``, row scales ``e``
    and the accumulated cost-row scale.
    """
    m, n = A.shape
    d = np.ones(n)
    e = np.ones(m)
    cost_scale = 1.0
    psd_spans = []
    off = 0
    for blk in blocks:
        if blk.kind is Cone.PSD:
            psd_spans.append(slice(off, off + blk.dim))
        off += blk.dim
    M = np.vstack([A, c[None, :]])
    for _ in range(iters):
        row_max = np.max(np.abs(M), axis=1)
        row_scale = 1.0 / np.sqrt(np.maximum(row_max, 1e-12))
        row_scale[row_max == 0] = 1.0
        M *= row_scale[:, None]
        e *= row_scale[:m]
        cost_scale *= row_scale[m]
        col_max = np.max(np.abs(M), axis=0)
        col_scale = 1.0 / np.sqrt(np.maximum(col_max, 1e-12))
        col_scale[col_max == 0] = 1.0
        for sl in psd_spans:
            blk_max = float(np.max(col_max[sl]))
            col_scale[sl] = (1.0 / np.sqrt(blk_max) if blk_max > 0 else 1.0)
        M *= col_scale[None, :]
        d *= col_scale
    return M[:m], d, e, cost_scale


def solve(problem: ConicProblem, tol: float = 1e-7,
          max_iter: int = 50_000, over_relax: float = 1.6) -> ConicSolution:
    """Solve a conic problem; never silent about failure modes.

    Returns status ``Optimal`` only when the unscaled KKT residuals (equality,
    dual-cone membership, duality gap) are all below ``tol``; divergence
    certificates yield ``Infeasible`` / ``Unbounded``; otherwise ``MaxIter``.
    """
    problem.validate()
    A_full = problem.dense_matrix()
    b_full = problem.b.astype(float)
    c = problem.c.astype(float)
    n = problem.n_var

    pres = _presolve(A_full, b_full)
    if pres is None:
        return ConicSolution(np.zeros(n), np.zeros(problem.n_rows),
                             np.zeros(n), SolveStatus.INFEASIBLE, 0,
                             float("nan"), float("inf"), 0.0, 0.0)
    A, b, kept_rows = pres
    m = A.shape[0]

    ops = _ConeOps(problem.blocks)
    if m:
        As, d, e_row, cost_scale = _equilibrate(A, c, problem.blocks)
    else:
        As, d, e_row, cost_scale = A, np.ones(n), np.ones(0), 1.0
    bs = e_row * b if m else b
    nb = float(np.linalg.norm(bs))
    sigma = 1.0 / nb if nb > 0 else 1.0
    bs = sigma * bs
    cs = cost_scale * d * c
    nc = float(np.linalg.norm(cs))
    cs = cs / nc if nc > 0 else cs
    tau = cost_scale / nc if nc > 0 else cost_scale

    if m:
        AAt = As @ As.T
        try:
            chol = sla.cho_factor(AAt, lower=True, check_finite=False)
        except sla.LinAlgError as exc:  # full row rank after presolve
            raise NumericalBreakdown(f"affine projection factorization: {exc}")

        def proj_affine(v):
            return v - As.T @ sla.cho_solve(chol, As @ v - bs,
                                            check_finite=False)

        def eq_multiplier(target):
            # least-squares mu with As' mu ~ target
            return sla.cho_solve(chol, As @ target, check_finite=False)
    else:
        def proj_affine(v):
            return v

        def eq_multiplier(target):
            return np.zeros(0)

    x = np.zeros(n)
    z = np.zeros(n)
    u = np.zeros(n)
    rho = 1.0
    alpha = over_relax

    def unscaled_kkt(zv, uv):
        x_u = d * zv / sigma
        s_hat = -rho * uv
        mu_hat = eq_multiplier(cs - s_hat)
        mu = np.zeros(problem.n_rows)
        if m:
            mu[kept_rows] = e_row * mu_hat / tau
        s = c - A_full.T @ mu
        obj = float(c @ x_u)
        bmu = float(b_full @ mu)
        if m:
            rp = (float(np.max(np.abs(A_full @ x_u - b_full)))
                  / (1.0 + float(np.max(np.abs(b_full)))))
        else:
            rp = 0.0
        rd = ops.dual_violation(s) / (1.0 + float(np.max(np.abs(s))))
        rg = abs(obj - bmu) / (1.0 + abs(obj) + abs(bmu))
        return x_u, mu, s, obj, rp, rd, rg

    u_mark = u.copy()
    x_mark = x.copy()
    status = SolveStatus.MAX_ITER
    it = 0
    for it in range(1, max_iter + 1):
        x = proj_affine(z - u - cs / rho)
        x_r = alpha * x + (1.0 - alpha) * z
        z_prev = z
        z = ops.project(x_r + u)
        u = u + x_r - z

        if it % 25 == 0:
            if not (np.all(np.isfinite(z)) and np.all(np.isfinite(u))):
                raise NumericalBreakdown(
                    f"non-finite iterates at iteration {it}")
            x_u, mu, s, obj, rp, rd, rg = unscaled_kkt(z, u)
            if max(rp, rd, rg) <= tol:
                status = SolveStatus.OPTIMAL
                break

        if it % 100 == 0 and it >= 200:
            certificate = _divergence_status(
                A_full, b_full, c, d, e_row,
                u - u_mark, x - x_mark, ops, eq_multiplier, kept_rows,
                problem.n_rows, m)
            if certificate is not None:
                status = certificate
                break
            u_mark = u.copy()
            x_mark = x.copy()

        if it % 50 == 0:
            rp_s = float(np.linalg.norm(x - z))
            rd_s = rho * float(np.linalg.norm(z - z_prev))
            if rp_s > 10.0 * rd_s and rho < 1e6:
                rho *= 2.0
                u *= 0.5
            elif rd_s > 10.0 * rp_s and rho > 1e-6:
                rho *= 0.5
                u *= 2.0

    x_u, mu, s, obj, rp, rd, rg = unscaled_kkt(z, u)
    if (status is SolveStatus.MAX_ITER) and max(rp, rd, rg) <= tol:
        status = SolveStatus.OPTIMAL
    solution = ConicSolution(x_u, mu, s, status, it, obj, rp, rd, rg)
    for observer in SOLVE_OBSERVERS:
        observer(solution)
    return solution


def _divergence_status(A_full, b_full, c, d, e_row,
                       du, dx, ops, eq_multiplier, kept_rows, n_rows, m):
    """Certificate tests on iterate differences; None when inconclusive."""
    # Primal infeasibility: a dual ray with A' mu + s = 0, s in K*, b' mu > 0.
    if m and float(np.linalg.norm(du)) > 1e-12:
        s_hat_ray = -du  # direction of the scaled cone dual
        s_ray = s_hat_ray / d
        norm_s = float(np.linalg.norm(s_ray))
        if norm_s > 0:
            s_ray = s_ray / norm_s
            mu_hat = eq_multiplier(-(d * s_ray))
            mu = np.zeros(n_rows)
            mu[kept_rows] = e_row * mu_hat
            lin_res = float(np.max(np.abs(A_full.T @ mu + s_ray)))
            cone_res = ops.dual_violation(s_ray)
            pos = float(b_full @ mu)
            if (lin_res <= 1e-6 and cone_res <= 1e-6
                    and pos > 1e-6 * (1.0 + float(np.max(np.abs(b_full))))):
                return SolveStatus.INFEASIBLE
    # Unboundedness: a primal ray with A x = 0, x in K, c' x < 0.
    if float(np.linalg.norm(dx)) > 1e-12:
        x_ray = d * dx
        norm_x = float(np.linalg.norm(x_ray))
        if norm_x > 0:
            x_ray = x_ray / norm_x
            eq_res = float(np.max(np.abs(A_full @ x_ray))) if m else 0.0
            cone_res = ops.primal_violation(x_ray)
            desc = float(c @ x_ray)
            if (eq_res <= 1e-6 and cone_res <= 1e-6
                    and desc < -1e-6 * (1.0 + float(np.max(np.abs(c))))):
                return SolveStatus.UNBOUNDED
    return None
