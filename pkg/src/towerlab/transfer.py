"""Transfer-operator numerics on towers and interval maps.

Functions on the tower are vectors over (cell, level) states; functions on
the base are vectors over cells. The transfer operator acts backwards:
``(L f)(y) = sum_{T x = y} mu(x) P(x, y) f(x) / mu(y)``. Operator norms are
sup-norms (maximum absolute row sum).

Renewal pieces:

* ``R_j`` -- first return to the base after exactly ``j`` steps,
  ``(R_j)[a', a] = [phi(a) = j] m_a P0[a, a'] / m_a'``.
* ``T_n`` -- base-to-base in ``n`` steps, ``T_n = sum_j R_j T_{n-j}``.
* ``U_n`` -- same recursion with a factor ``rho`` per return.
* ``B_b`` -- tower states that first enter the base at time ``b``.

so that ``1_base L^n = sum_{k+b=n} T_k B_b``.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import TYPE_CHECKING

import numpy as np
import scipy.sparse as sp

from . import kernels
from .dynamics import DoublingMap, IntermittentMap
from .errors import InputError
from .seqcalc import decade_increment
from .tower import TowerSpec, sample_base_points, sample_points, walk
from . import rng as rngmod

if TYPE_CHECKING:
    from .observables import PiecewiseLinearCDF


def sup_norm(A: np.ndarray) -> float:
    A = np.asarray(A)
    if A.ndim == 1:
        return float(np.max(np.abs(A))) if A.size else 0.0
    return float(np.max(np.sum(np.abs(A), axis=-1))) if A.size else 0.0


def sup_norms(stack: np.ndarray) -> np.ndarray:
    """Sup-norm of each matrix in a ``(n, rows, cols)`` stack."""
    return np.max(np.sum(np.abs(stack), axis=-1), axis=-1)


@dataclass
class OperatorSeq:
    """Indexed family ``M_0..M_N`` of dense matrices."""

    matrices: np.ndarray
    role: str
    basis_dim: int
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.role not in ("R", "T", "B", "U"):
            raise InputError(f"unknown operator role {self.role!r}")
        self.matrices = np.asarray(self.matrices, dtype=np.float64)

    def __len__(self) -> int:
        return self.matrices.shape[0]

    def __getitem__(self, i: int) -> np.ndarray:
        return self.matrices[i]

    def norms(self) -> np.ndarray:
        return sup_norms(self.matrices)

    def to_csv(self, path) -> None:
        """One block per index: a ``# role,index`` header then the rows."""
        with open(path, "w", encoding="utf-8") as fh:
            for i, M in enumerate(self.matrices):
                fh.write(f"# role={self.role},index={i}\n")
                for row in np.atleast_2d(M):
                    fh.write(",".join(repr(float(v)) for v in row) + "\n")


# ---------------------------------------------------------------------------
# renewal pieces


def first_return_ops(spec: TowerSpec, j_max: int | None = None) -> OperatorSeq:
    """``R_0..R_{j_max}`` with ``R_0 = 0``; ``j_max`` defaults to ``max phi``."""
    j_max = spec.max_phi if j_max is None else int(j_max)
    if j_max < 1:
        raise InputError("j_max must be >= 1")
    K = spec.n_cells
    m = spec.masses
    # W[a', a] = m_a P[a, a'] / m_a'
    W = (spec.P * m[:, None]).T / m[:, None]
    R = np.zeros((j_max + 1, K, K))
    for a in range(K):
        j = int(spec.phi[a])
        if j <= j_max:
            R[j, :, a] = W[:, a]
    lost = 1.0 - R.sum(axis=0).sum(axis=1)
    truncated = bool(np.max(lost) > 1e-6)
    if truncated:
        warnings.warn(f"first-return operators truncated at j_max={j_max}; missing mass {np.max(lost):.3e}")
    return OperatorSeq(R, "R", K, {"j_max": j_max, "truncated": truncated, "missing_mass": float(np.max(lost))})


def renewal_T(R: OperatorSeq, n_max: int) -> OperatorSeq:
    """``T_0 = I`` and ``T_n = sum_{j=1}^{min(n, j_max)} R_j T_{n-j}``."""
    T = kernels.renewal(np.ascontiguousarray(R.matrices), int(n_max), 1.0)
    return OperatorSeq(T, "T", R.basis_dim, {"n_max": int(n_max)})


def renewal_U(R: OperatorSeq, rho: float, n_max: int) -> OperatorSeq:
    """``U_0 = I`` and ``U_n = rho * sum_j R_j U_{n-j}``."""
    if not (0 < rho <= 1):
        raise InputError("rho must lie in (0, 1]")
    U = kernels.renewal(np.ascontiguousarray(R.matrices), int(n_max), float(rho))
    return OperatorSeq(U, "U", R.basis_dim, {"n_max": int(n_max), "rho": float(rho)})


def boundary_B(spec: TowerSpec, b_max: int) -> OperatorSeq:
    """``B_0..B_{b_max}`` as ``(cells, tower states)`` matrices.

    ``B_0`` restricts to the base. For ``b >= 1`` the state ``(a, phi(a) - b)``
    (a level above the base) reaches base cell ``a'`` at time ``b`` with
    weight ``m_a P0[a, a'] / m_a'``.
    """
    K = spec.n_cells
    S = len(spec.states)
    off = spec.state_offset
    W = (spec.P * spec.masses[:, None]).T / spec.masses[:, None]
    B = np.zeros((b_max + 1, K, S))
    B[0, np.arange(K), off] = 1.0
    for b in range(1, b_max + 1):
        for a in np.nonzero(spec.phi > b)[0]:
            B[b, :, off[a] + spec.phi[a] - b] = W[:, a]
    return OperatorSeq(B, "B", K, {"states": S})


def boundary_B_ones(spec: TowerSpec, b_max: int) -> np.ndarray:
    """``B_b 1`` for ``b = 0..b_max`` without building the state matrices."""
    K = spec.n_cells
    W = (spec.P * spec.masses[:, None]).T / spec.masses[:, None]
    out = np.zeros((b_max + 1, K))
    out[0] = 1.0
    for b in range(1, b_max + 1):
        sel = spec.phi > b
        out[b] = W[:, sel].sum(axis=1)
    return out


def tower_transfer_matrix(spec: TowerSpec) -> np.ndarray:
    """Dense backward kernel ``L[y, x]`` on all tower states."""
    S = len(spec.states)
    off = spec.state_offset
    L = np.zeros((S, S))
    W = (spec.P * spec.masses[:, None]).T / spec.masses[:, None]
    for a in range(spec.n_cells):
        for l in range(1, int(spec.phi[a])):
            L[off[a] + l, off[a] + l - 1] = 1.0
    tops = off + spec.phi - 1
    for ap in range(spec.n_cells):
        L[off[ap], tops] = W[ap]
    return L


def check_decomposition(spec: TowerSpec, n: int) -> float:
    """Max entrywise gap between ``sum_{k+b=n} T_k B_b`` and ``1_base L^n``.

    The reference side is an independent dynamic program: ``n`` explicit
    multiplications by the full-tower transfer matrix.
    """
    if n < 0:
        raise InputError("n must be >= 0")
    R = first_return_ops(spec, max(spec.max_phi, 1))
    T = renewal_T(R, n)
    B = boundary_B(spec, n)
    lhs = np.zeros((spec.n_cells, len(spec.states)))
    for k in range(n + 1):
        lhs += T[k] @ B[n - k]
    L = tower_transfer_matrix(spec)
    ref = np.eye(len(spec.states))[spec.state_offset]
    for _ in range(n):
        ref = ref @ L
    return float(np.max(np.abs(lhs - ref)))


# ---------------------------------------------------------------------------
# visit-penalty integrals


def base_psi_integral(spec: TowerSpec, n_max: int, rho: float | None = None) -> np.ndarray:
    """``int over base, T^-n base`` of ``rho ** psi_n`` for ``n = 0..n_max``."""
    rho = spec.rho if rho is None else rho
    U = renewal_U(first_return_ops(spec), rho, n_max)
    return np.einsum("a,nab,b->n", spec.base_measure, U.matrices, np.ones(spec.n_cells))


def full_psi_integral(spec: TowerSpec, n_max: int, rho: float | None = None) -> np.ndarray:
    """``int over T^-n base`` of ``rho ** psi_n`` for ``n = 0..n_max``.

    Splits by the first entry time ``b`` into the base:
    ``sum_b int_base U_{n-b} B_b 1``.
    """
    rho = spec.rho if rho is None else rho
    U = renewal_U(first_return_ops(spec), rho, n_max)
    V = np.einsum("a,nab->nb", spec.base_measure, U.matrices)
    BB = boundary_B_ones(spec, n_max)
    out = np.zeros(n_max + 1)
    for n in range(n_max + 1):
        out[n] = np.sum(V[n::-1] * BB[: n + 1])
    return out


def psi_integral_mc(
    spec: TowerSpec,
    n_list,
    n_samples: int,
    seed: int,
    threads: int = 1,
    rho: float | None = None,
) -> dict:
    """Monte Carlo estimate of ``int over T^-n base`` of ``rho ** psi_n``.

    Points are exact draws from the tower measure pushed forward by the cell
    chain. Returns means and standard errors per ``n``.
    """
    rho = spec.rho if rho is None else rho
    n_list = [int(v) for v in n_list]
    nmax = max(n_list)

    def chunk(ci, start, stop):
        g = rngmod.stream(seed, "psi-mc", ci)
        cells, levels = sample_points(spec, g, stop - start)
        base, _ = walk(spec, g, cells, levels, nmax)
        visits = np.cumsum(base, axis=1, dtype=np.int64)
        s1 = []
        s2 = []
        for n in n_list:
            before = visits[:, n - 1] if n > 0 else np.zeros(base.shape[0], np.int64)
            val = base[:, n] * rho**before
            s1.append(val.sum())
            s2.append((val * val).sum())
        return np.array(s1), np.array(s2)

    parts = rngmod.map_chunks(chunk, n_samples, threads)
    s1 = sum(p[0] for p in parts)
    s2 = sum(p[1] for p in parts)
    mean = s1 / n_samples
    var = np.maximum(s2 / n_samples - mean**2, 0.0)
    return {"n": n_list, "mean": mean, "stderr": np.sqrt(var / n_samples), "samples": n_samples}


# ---------------------------------------------------------------------------
# decay diagnostics


def projection_Pi(spec: TowerSpec) -> np.ndarray:
    """``Pi g = (sum_a mu(a, 0) g(a)) 1``, the limit of ``T_n``."""
    return np.outer(np.ones(spec.n_cells), spec.base_measure)


def fit_log_linear(n: np.ndarray, y: np.ndarray) -> dict:
    """Least-squares fit of ``log y`` against ``n``."""
    n = np.asarray(n, float)
    ly = np.log(np.asarray(y, float))
    A = np.column_stack([np.ones_like(n), n])
    coef, *_ = np.linalg.lstsq(A, ly, rcond=None)
    resid = ly - A @ coef
    ss = np.sum((ly - ly.mean()) ** 2)
    r2 = 1.0 - np.sum(resid**2) / ss if ss > 0 else 1.0
    return {"slope": float(coef[1]), "intercept": float(coef[0]), "r2": float(r2), "points": int(n.size)}


def fit_log_log(n: np.ndarray, y: np.ndarray) -> dict:
    """Least-squares fit of ``log y`` against ``log n``."""
    out = fit_log_linear(np.log(np.asarray(n, float)), y)
    return out


def op_decay_diagnostics(T: OperatorSeq, spec: TowerSpec, q: float | None = None, floor: float = 1e-13) -> dict:
    """Norm sequences ``||T_n - Pi||`` and ``||T_{n+1} - T_n||`` with checks.

    Reports the weighted partial sums ``sum n^{q-1} ||T_{n+1} - T_n||`` and
    ``sum n^{q-2} ||T_n - Pi||`` with their last-decade increments, and a
    geometric fit of ``||T_n - Pi||`` over ``1 <= n <= max phi`` while the
    norm stays above ``floor``.
    """
    Pi = projection_Pi(spec)
    mats = T.matrices
    dist = sup_norms(mats - Pi[None])
    diff = sup_norms(mats[1:] - mats[:-1])
    q = spec.tail.q if (q is None and spec.tail is not None) else q
    out = {"n": np.arange(mats.shape[0]), "dist_Pi": dist, "diff": diff}
    if q is not None and np.isfinite(q):
        n = np.arange(dist.size, dtype=float)
        ps_diff = np.cumsum(n[:-1] ** (q - 1) * diff)
        ps_dist = np.cumsum(n ** (q - 2) * dist)
        out.update(
            {
                "q": q,
                "partial_diff": ps_diff,
                "partial_dist": ps_dist,
                "increment_diff": decade_increment(ps_diff),
                "increment_dist": decade_increment(ps_dist),
            }
        )
    n_all = np.arange(dist.size)
    sel = (n_all >= 1) & (n_all <= spec.max_phi) & (dist > floor)
    # stop at the first entry under the floor so the window is contiguous
    if np.any(~sel[1:] & (dist[1:] <= floor)):
        first_low = 1 + int(np.argmax(dist[1:] <= floor))
        sel &= n_all < first_low
    if sel.sum() >= 3:
        out["geometric_fit"] = fit_log_linear(n_all[sel], dist[sel])
    return out


# ---------------------------------------------------------------------------
# operator estimates for the base-visit function Phi_m


def phi_forward(spec: TowerSpec, m_max: int, beta: float | None = None) -> np.ndarray:
    """``F[m, a] = E(Phi_m | start at (a, 0))`` for ``m = 0..m_max``.

    ``F_m(a) = 1`` if ``phi(a) > m`` else ``beta * sum_a' P0[a, a'] F_{m - phi(a)}(a')``.
    """
    beta = spec.beta if beta is None else beta
    K = spec.n_cells
    F = np.zeros((m_max + 1, K))
    P = spec.P
    for m in range(m_max + 1):
        for a in range(K):
            j = int(spec.phi[a])
            F[m, a] = 1.0 if j > m else beta * (P[a] @ F[m - j])
    return F


def phi_integrals(spec: TowerSpec, m_max: int, beta: float | None = None) -> np.ndarray:
    """``int Phi_m d mu`` for ``m = 0..m_max`` (forward recursion)."""
    return phi_forward(spec, m_max, beta) @ spec.base_measure


def gamma_function(spec: TowerSpec, U: OperatorSeq, m: int) -> np.ndarray:
    """``L^m Phi_m`` on tower states: ``(U_{m-l} 1)(a)`` at ``(a, l)`` for ``l <= m``."""
    ones = np.ones(spec.n_cells)
    G = np.zeros(len(spec.states))
    off = spec.state_offset
    for a in range(spec.n_cells):
        for l in range(min(int(spec.phi[a]), m + 1)):
            G[off[a] + l] = (U[m - l] @ ones)[a]
    return G


def phi_operator_estimates(spec: TowerSpec, m: int, n: int | None = None, beta: float | None = None) -> dict:
    """Operator-side quantities for ``Phi_m``.

    * ``integral``: ``int Phi_k`` for ``k = 0..m`` by the forward route, and a
      log-log decay fit over ``1 <= k <= min(m, max phi)``.
    * ``transfer``: for ``k <= n``, ``L^k Phi_m`` on base cells equals
      ``(U_k 1) * F_{m-k}`` at cell resolution.
    * ``e``: ``e(b, m) = int_base B_b Gamma`` with ``Gamma = L^m Phi_m``, the
      bound ``sum_i c_{b+m-i} c_i`` with ``c_k = max(||U_k||, ||R_k||)``,
      ``c_0 = 1``, and the closure gap ``|sum_b e(b, m) - int Phi_m|``.
    """
    beta = spec.beta if beta is None else beta
    n = m if n is None else min(int(n), m)
    R = first_return_ops(spec)
    horizon = m + spec.max_phi + 1
    U = renewal_U(R, beta, horizon)
    F = phi_forward(spec, m, beta)
    integral = F @ spec.base_measure
    ones = np.ones(spec.n_cells)
    transfer = np.array([(U[k] @ ones) * F[m - k] for k in range(n + 1)])

    G = gamma_function(spec, U, m)
    b_max = spec.max_phi
    B = boundary_B(spec, b_max)
    e = np.array([spec.base_measure @ (B[b] @ G) for b in range(b_max + 1)])
    Rn = np.zeros(horizon + 1)
    Rn[: len(R)] = R.norms()
    c = np.maximum(U.norms()[: horizon + 1], Rn)
    c[0] = 1.0
    bound = np.array([sum(c[b + m - i] * c[i] for i in range(m + 1)) for b in range(b_max + 1)])

    k = np.arange(1, min(m, spec.max_phi) + 1)
    fit = fit_log_log(k, integral[k]) if k.size >= 3 else None
    return {
        "m": m,
        "integral": integral,
        "decay_fit": fit,
        "transfer_base": transfer,
        "e": e,
        "e_bound": bound,
        "bound_ok": bool(np.all(np.abs(e) <= bound * (1 + 1e-12))),
        "e_nonnegative": bool(np.all(e >= -1e-15)),
        "closure_gap": float(abs(e.sum() - integral[m])),
    }


def phi_integral_mc(spec: TowerSpec, m_list, n_samples: int, seed: int, threads: int = 1, beta: float | None = None) -> dict:
    """Monte Carlo ``int Phi_m``: draw base points, count returns in ``[1, m]``."""
    beta = spec.beta if beta is None else beta
    m_list = [int(v) for v in m_list]
    mmax = max(m_list)

    def chunk(ci, start, stop):
        g = rngmod.stream(seed, "phi-mc", ci)
        size = stop - start
        w = spec.masses * spec.phi
        on_base = g.random(size) < spec.masses.sum() / w.sum()
        cells = sample_base_points(spec, g, size)
        base, _ = walk(spec, g, cells, np.zeros(size, np.int64), mmax)
        returns = np.cumsum(base[:, 1:], axis=1, dtype=np.int64)
        s1, s2 = [], []
        for m in m_list:
            r = returns[:, m - 1] if m > 0 else np.zeros(size, np.int64)
            val = np.where(on_base, beta**r, 0.0)
            s1.append(val.sum())
            s2.append((val * val).sum())
        return np.array(s1), np.array(s2)

    parts = rngmod.map_chunks(chunk, n_samples, threads)
    s1 = sum(p[0] for p in parts)
    s2 = sum(p[1] for p in parts)
    mean = s1 / n_samples
    var = np.maximum(s2 / n_samples - mean**2, 0.0)
    return {"m": m_list, "mean": mean, "stderr": np.sqrt(var / n_samples), "samples": n_samples}


def transfer_phi_mc(spec: TowerSpec, m: int, k: int, n_samples: int, seed: int, beta: float | None = None) -> dict:
    """Monte Carlo ``(L^k Phi_m)(a, 0)`` for every base cell ``a``.

    Uses ``int_{X_k = (a, 0)} Phi_m d mu / mu(a, 0)`` with forward orbits from
    base points.
    """
    beta = spec.beta if beta is None else beta
    g = rngmod.stream(seed, "transfer-phi-mc", 0)
    cells = sample_base_points(spec, g, n_samples)
    base, cell_path = walk(spec, g, cells, np.zeros(n_samples, np.int64), max(m, k))
    returns = np.cumsum(base[:, 1:], axis=1, dtype=np.int64)
    phim = beta ** (returns[:, m - 1] if m > 0 else np.zeros(n_samples, np.int64))
    hit = base[:, k] == 1
    # base points carry total tower mass sum(m)/Z; (a, 0) carries m_a / Z
    K = spec.n_cells
    sums = np.bincount(cell_path[hit, k], weights=phim[hit], minlength=K)
    sq = np.bincount(cell_path[hit, k], weights=phim[hit] ** 2, minlength=K)
    scale = 1.0 / (n_samples * spec.m_bar)
    mean = sums * scale
    var = np.maximum(sq / n_samples - (sums / n_samples) ** 2, 0.0)
    return {"mean": mean, "stderr": np.sqrt(var / n_samples) / spec.m_bar}


# ---------------------------------------------------------------------------
# Ulam discretisation


@dataclass
class UlamOperator:
    grid_size: int
    matrix: sp.csr_matrix
    map_id: str
    density: np.ndarray | None = None
    converged: bool = False
    iterations: int = 0
    residual: float = float("nan")

    @property
    def edges(self) -> np.ndarray:
        return np.linspace(0.0, 1.0, self.grid_size + 1)

    def cdf(self) -> PiecewiseLinearCDF:
        from .observables import PiecewiseLinearCDF

        return PiecewiseLinearCDF(self.edges, np.concatenate(([0.0], np.cumsum(self.density / self.grid_size))))


def _left_inverse(y: np.ndarray, alpha: float) -> np.ndarray:
    """Vectorised bisection inverse of ``x(1 + (2x)^alpha)`` on ``[0, 1/2]``."""
    lo = np.zeros_like(y)
    hi = np.full_like(y, 0.5)
    c = 2.0**alpha
    for _ in range(64):
        mid = 0.5 * (lo + hi)
        below = mid * (1.0 + c * mid**alpha) < y
        lo = np.where(below, mid, lo)
        hi = np.where(below, hi, mid)
    return 0.5 * (lo + hi)


def _branches(system):
    """List of (x_lo, x_hi, forward, inverse) for each increasing full branch."""
    if isinstance(system, DoublingMap):
        return [
            (0.0, 0.5, lambda x: 2 * x, lambda y: y / 2),
            (0.5, 1.0, lambda x: 2 * x - 1, lambda y: (y + 1) / 2),
        ]
    if isinstance(system, IntermittentMap):
        a = system.alpha
        return [
            (0.0, 0.5, lambda x: x * (1 + 2.0**a * x**a), lambda y: _left_inverse(y, a)),
            (0.5, 1.0, lambda x: 2 * x - 1, lambda y: (y + 1) / 2),
        ]
    raise InputError("Ulam discretisation supports interval maps only")


def ulam_build(system, grid: int, tol: float = 1e-12, max_iter: int = 100_000) -> UlamOperator:
    """Ulam matrix ``P[i, j] = |I_i intersect T^-1 I_j| / |I_i|`` and its fixed density.

    Break points are the grid itself plus preimages of the grid under each
    branch, so every sub-interval maps into a single target cell and the
    entries are exact lengths. The invariant density comes from power
    iteration on mass vectors ``v <- v P``.
    """
    if grid < 16:
        raise InputError("grid must be >= 16")
    edges = np.linspace(0.0, 1.0, grid + 1)
    rows, cols, vals = [], [], []
    for lo, hi, fwd, inv in _branches(system):
        pre = inv(edges)
        own = edges[(edges > lo) & (edges < hi)]
        pts = np.unique(np.concatenate([[lo, hi], pre, own]))
        pts = pts[(pts >= lo) & (pts <= hi)]
        mid = 0.5 * (pts[:-1] + pts[1:])
        length = np.diff(pts)
        keep = length > 0
        src = np.minimum((mid[keep] * grid).astype(np.int64), grid - 1)
        dst = np.minimum((np.clip(fwd(mid[keep]), 0.0, 1.0) * grid).astype(np.int64), grid - 1)
        rows.append(src)
        cols.append(dst)
        vals.append(length[keep] * grid)
    P = sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(grid, grid)
    )
    P.sum_duplicates()
    # exact lengths can drift by an ulp; renormalise rows
    rs = np.asarray(P.sum(axis=1)).ravel()
    P = sp.diags(1.0 / rs) @ P
    P = P.tocsr()
    PT = P.T.tocsr()
    v = np.full(grid, 1.0 / grid)
    res = np.inf
    it = 0
    for it in range(1, max_iter + 1):
        w = PT @ v
        w /= w.sum()
        res = float(np.abs(w - v).sum())
        v = w
        if res < tol:
            break
    op = UlamOperator(grid, P, getattr(system, "system_id", str(system)), v * grid, res < tol, it, res)
    if not op.converged:
        warnings.warn(f"Ulam power iteration stopped after {it} steps with residual {res:.2e}")
    return op


def ulam_density_slope(op: UlamOperator, x_lo: float = 1e-3, x_hi: float = 1e-1) -> dict:
    """Log-log slope of the Ulam density over cells centred in ``[x_lo, x_hi]``."""
    centers = 0.5 * (op.edges[:-1] + op.edges[1:])
    sel = (centers >= x_lo) & (centers <= x_hi) & (op.density > 0)
    return fit_log_log(centers[sel], op.density[sel])
