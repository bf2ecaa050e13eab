"""Separately Lipschitz observables and orbit-based statistical estimators.

An :class:`Observable` bundles a function of ``n`` orbit coordinates with
upper bounds ``lip[j]`` on its Lipschitz constant in coordinate ``j``.
Functions are evaluated on arrays whose last axis is the coordinate index,
so a ``(batch, n)`` array of orbits gives ``batch`` values at once.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy import integrate

from . import kernels
from . import rng as rngmod
from .dynamics import DoublingMap, IntermittentMap, ShiftSystem, orbit_batch
from .errors import InputError


@dataclass
class Observable:
    arity: int
    fn: Callable[[np.ndarray], np.ndarray]
    lip: np.ndarray
    label: str = "K"

    def __post_init__(self):
        self.lip = np.broadcast_to(np.asarray(self.lip, float), (self.arity,)).copy()
        if np.any(self.lip < 0):
            raise InputError("Lipschitz constants must be nonnegative")

    def __call__(self, x) -> np.ndarray:
        x = np.asarray(x, float)
        if x.shape[-1] != self.arity:
            raise InputError(f"observable {self.label} expects {self.arity} coordinates, got {x.shape[-1]}")
        return self.fn(x)

    @property
    def lip_sq_sum(self) -> float:
        return float(np.sum(self.lip**2))


@dataclass
class LipFunction:
    """Scalar function of one state with a known Lipschitz constant and sup."""

    f: Callable[[np.ndarray], np.ndarray]
    lip: float
    sup: float
    label: str = "f"

    def __call__(self, x):
        return self.f(np.asarray(x, float))

    def shifted(self, c: float) -> "LipFunction":
        f = self.f
        return LipFunction(lambda x: f(x) - c, self.lip, self.sup + abs(c), f"{self.label}-{c:.6g}")

    def squared(self) -> "LipFunction":
        f = self.f
        return LipFunction(lambda x: f(x) ** 2, 2 * self.lip * self.sup, self.sup**2, f"{self.label}^2")


def cosine(freq: float = 1.0) -> LipFunction:
    return LipFunction(lambda x: np.cos(2 * np.pi * freq * x), 2 * np.pi * abs(freq), 1.0, f"cos(2pi*{freq:g}x)")


def identity() -> LipFunction:
    return LipFunction(lambda x: x, 1.0, 1.0, "id")


def constant(c: float) -> LipFunction:
    return LipFunction(lambda x: np.full(np.shape(x), float(c)), 0.0, abs(c), f"const({c:g})")


def certify_lipschitz(
    obs: Observable,
    sampler: Callable[[np.random.Generator], np.ndarray],
    rng: np.random.Generator,
    trials: int = 1000,
    distance: Callable[[np.ndarray, np.ndarray], np.ndarray] | None = None,
    perturb: Callable[[np.random.Generator, np.ndarray], np.ndarray] | None = None,
) -> dict:
    """Randomised single-coordinate perturbation test of the stated ``lip``.

    Returns the worst observed ratio ``|dK| / (lip_j d(x_j, x_j'))`` over the
    trials (0 when every change is 0) and whether it stays under ``1 + 1e-6``.
    """
    distance = distance or (lambda a, b: np.abs(a - b))
    perturb = perturb or (lambda g, v: g.random())
    worst = 0.0
    violations = 0
    for _ in range(trials):
        x = np.array(sampler(rng), float)
        j = int(rng.integers(obs.arity))
        y = x.copy()
        y[j] = perturb(rng, x[j])
        d = float(distance(x[j], y[j]))
        dk = abs(float(obs(y)) - float(obs(x)))
        if d == 0:
            continue
        if obs.lip[j] == 0:
            if dk > 1e-12:
                violations += 1
                worst = np.inf
            continue
        ratio = dk / (obs.lip[j] * d)
        worst = max(worst, ratio)
        if ratio > 1 + 1e-6:
            violations += 1
    return {"worst_ratio": worst, "violations": violations, "ok": violations == 0}


# ---------------------------------------------------------------------------
# ergodic sums and covariances


def birkhoff(f: LipFunction, n: int) -> Observable:
    """``K(x_0..x_{n-1}) = sum_j f(x_j)``, all ``Lip_j = Lip(f)``."""
    return Observable(n, lambda x: np.sum(f(x), axis=-1), np.full(n, f.lip), f"birkhoff[{f.label}]")


def empirical_covariance(f: LipFunction, n: int, lag: int) -> Observable:
    """``K = (1/n) sum_{j<n} f(x_j) f(x_{j+lag})`` on ``n + lag`` coordinates.

    ``f`` should already be centred. Each coordinate enters at most two
    products, so ``Lip_j <= 2 Lip(f) sup|f| / n``.
    """
    if lag < 0:
        raise InputError("lag must be >= 0")

    def fn(x):
        fx = f(x)
        return np.sum(fx[..., :n] * fx[..., lag : lag + n], axis=-1) / n

    return Observable(n + lag, fn, np.full(n + lag, 2 * f.lip * f.sup / n), f"cov[{f.label},{lag}]")


def reference_mean(system, f: LipFunction, grid: int = 2**12) -> float:
    """``int f d mu`` for the reference invariant measure."""
    if isinstance(system, DoublingMap):
        val, _ = integrate.quad(lambda x: float(f(np.array(x))), 0.0, 1.0, limit=400, epsabs=1e-13)
        return float(val)
    if isinstance(system, IntermittentMap):
        from .transfer import ulam_build

        op = ulam_build(system, grid)
        e = op.edges
        # midpoint rule per cell against the piecewise-constant density
        mid = 0.5 * (e[:-1] + e[1:])
        return float(np.sum(f(mid) * op.density) / grid)
    raise InputError("reference_mean supports interval maps")


def center(system, f: LipFunction) -> LipFunction:
    """``f - int f d mu`` against the reference measure."""
    return f.shifted(reference_mean(system, f))


def autocovariance_reference(
    system,
    f,
    lag_max: int,
    seed: int = 0,
    orbit_len: int = 10**7,
    n_batches: int = 50,
    nodes: int = 64,
) -> dict:
    """``C_f(l) = int f * f o T^l d mu`` for ``l = 0..lag_max``.

    * Doubling map: Gauss-Legendre quadrature of ``f * L^l f`` where
      ``L^l f(y) = 2^-l sum_k f((y + k) / 2^l)``; lags with ``2^l * nodes``
      above ``2^24`` are not resolved and come back as NaN.
    * Shift with ``f`` given as a per-symbol vector ``g`` (function of the
      first symbol): exact sums over the stationary chain.
    * Intermittent map: long-orbit averages with batch-means standard errors.
    """
    if isinstance(system, DoublingMap):
        xg, wg = np.polynomial.legendre.leggauss(nodes)
        y = 0.5 * (xg + 1.0)
        w = 0.5 * wg
        out = np.full(lag_max + 1, np.nan)
        fy = f(y)
        for l in range(lag_max + 1):
            if (2**l) * nodes > 2**24:
                break
            k = np.arange(2**l)
            Lf = f((y[:, None] + k[None, :]) / 2**l).mean(axis=1)
            out[l] = np.sum(w * fy * Lf)
        return {"C": out, "stderr": np.zeros(lag_max + 1), "method": "quadrature"}
    if isinstance(system, ShiftSystem):
        g = np.asarray(f, float)
        pi = system.marginal
        P = np.asarray(system.matrix) if system.is_markov else np.tile(pi, (system.symbol_count, 1))
        out = np.zeros(lag_max + 1)
        h = g.copy()
        for l in range(lag_max + 1):
            out[l] = np.sum(pi * g * h)
            h = P @ h
        return {"C": out, "stderr": np.zeros(lag_max + 1), "method": "exact"}
    if isinstance(system, IntermittentMap):
        g = rngmod.stream(seed, "autocov", 0)
        per = orbit_len // n_batches
        batch_vals = np.empty((n_batches, lag_max + 1))
        x0 = orbit_batch(system, g, n_batches, 1)[:, 0]
        orbits = kernels.intermittent_orbits(x0, system.alpha, per + lag_max)
        fx = f(orbits)
        for l in range(lag_max + 1):
            batch_vals[:, l] = np.mean(fx[:, :per] * fx[:, l : l + per], axis=1)
        C = batch_vals.mean(axis=0)
        se = batch_vals.std(axis=0, ddof=1) / np.sqrt(n_batches)
        return {"C": C, "stderr": se, "method": "batch-means"}
    raise InputError("unsupported system for autocovariance_reference")


# ---------------------------------------------------------------------------
# Kantorovich distance in one dimension


class UniformCDF:
    """Lebesgue measure on [0, 1]."""

    def cdf(self, s):
        return np.clip(s, 0.0, 1.0)

    def cdf_integral(self, s):
        s = np.clip(s, 0.0, 1.0)
        return 0.5 * s * s

    def quantile(self, p):
        return np.clip(p, 0.0, 1.0)


class PiecewiseLinearCDF:
    """CDF of a piecewise-constant density given by knots and CDF values."""

    def __init__(self, knots: np.ndarray, values: np.ndarray):
        self.x = np.asarray(knots, float)
        v = np.asarray(values, float)
        self.F = v / v[-1]
        dx = np.diff(self.x)
        self.G = np.concatenate(([0.0], np.cumsum(0.5 * (self.F[:-1] + self.F[1:]) * dx)))

    def cdf(self, s):
        return np.interp(s, self.x, self.F)

    def cdf_integral(self, s):
        s = np.clip(np.asarray(s, float), self.x[0], self.x[-1])
        i = np.clip(np.searchsorted(self.x, s, side="right") - 1, 0, self.x.size - 2)
        h = s - self.x[i]
        slope = (self.F[i + 1] - self.F[i]) / (self.x[i + 1] - self.x[i])
        return self.G[i] + self.F[i] * h + 0.5 * slope * h * h

    def quantile(self, p):
        p = np.clip(np.asarray(p, float), 0.0, 1.0)
        i = np.clip(np.searchsorted(self.F, p, side="left") - 1, 0, self.x.size - 2)
        dF = self.F[i + 1] - self.F[i]
        frac = np.where(dF > 0, (p - self.F[i]) / np.where(dF > 0, dF, 1.0), 0.0)
        return self.x[i] + np.clip(frac, 0.0, 1.0) * (self.x[i + 1] - self.x[i])


def kantorovich_1d(samples: np.ndarray, ref=None) -> float:
    """``int_0^1 |F_n(s) - F(s)| ds`` for sorted samples in ``[0, 1]``.

    Exact: on each gap between order statistics ``F_n`` is a constant ``c``
    and the integral of ``|c - F|`` splits at ``F^{-1}(c)``.
    """
    ref = UniformCDF() if ref is None else ref
    x = np.asarray(samples, float).ravel()
    n = x.size
    if n == 0:
        raise InputError("need at least one sample")
    if np.any(np.diff(x) < 0):
        raise InputError("samples must be sorted ascending")
    if x[0] < 0 or x[-1] > 1:
        raise InputError("samples must lie in [0, 1]")
    a = np.concatenate(([0.0], x))
    b = np.concatenate((x, [1.0]))
    c = np.arange(n + 1) / n
    G = ref.cdf_integral
    star = np.clip(ref.quantile(c), a, b)
    below = c * (star - a) - (G(star) - G(a))
    above = (G(b) - G(star)) - c * (b - star)
    return float(np.sum(np.maximum(below, 0.0) + np.maximum(above, 0.0)))


def kantorovich_empirical(x: np.ndarray, y: np.ndarray) -> float:
    """Exact ``int |F_x - F_y|`` between two empirical measures."""
    x = np.sort(np.asarray(x, float).ravel())
    y = np.sort(np.asarray(y, float).ravel())
    pts = np.concatenate([x, y])
    pts.sort(kind="mergesort")
    Fx = np.searchsorted(x, pts[:-1], side="right") / x.size
    Fy = np.searchsorted(y, pts[:-1], side="right") / y.size
    return float(np.sum(np.abs(Fx - Fy) * np.diff(pts)))


def empirical_measure_observable(n: int, ref=None) -> Observable:
    """``D_n`` as an observable of the first ``n`` coordinates (``Lip_j = 1/n``)."""
    return Observable(n, lambda x: _dn_rows(np.atleast_2d(x), ref).reshape(np.shape(x)[:-1]), np.full(n, 1.0 / n), "D_n")


def _dn_rows(rows: np.ndarray, ref) -> np.ndarray:
    return np.array([kantorovich_1d(np.sort(r), ref) for r in rows])


def empirical_measure_Dn(system, x0: float, n: int, ref=None) -> float:
    """Kantorovich distance between the first ``n`` orbit points and ``ref``."""
    from .dynamics import generate_orbit

    pts = np.sort(np.asarray(generate_orbit(system, x0, n).points, float))
    return kantorovich_1d(pts, ref)


def dn_curve(system, n_list, trials: int, seed: int, ref=None, threads: int = 1, burn_in: int = 10_000) -> dict:
    """Mean ``D_n`` over ``trials`` orbits for every ``n`` in ``n_list``.

    Each trial uses one orbit of length ``max(n_list)`` and evaluates ``D_n``
    on its prefixes, so the curve is smooth across ``n``.
    """
    n_list = [int(v) for v in n_list]
    nmax = max(n_list)

    def chunk(ci, start, stop):
        g = rngmod.stream(seed, "dn", ci)
        orbits = orbit_batch(system, g, stop - start, nmax, burn_in)
        vals = np.empty((stop - start, len(n_list)))
        for i, orb in enumerate(orbits):
            for k, n in enumerate(n_list):
                vals[i, k] = kantorovich_1d(np.sort(orb[:n]), ref)
        return vals

    vals = np.vstack(rngmod.map_chunks(chunk, trials, threads, chunk=16))
    mean = vals.mean(axis=0)
    se = vals.std(axis=0, ddof=1) / np.sqrt(trials) if trials > 1 else np.zeros(len(n_list))
    return {"n": n_list, "mean": mean, "stderr": se, "trials": trials}


# ---------------------------------------------------------------------------
# kernel density estimation


@dataclass
class KernelSpec:
    """Triangular kernel on [-1, 1] with bandwidth ``a_n = n ** -exponent``."""

    exponent: float = 0.2
    kernel: str = "triangular"

    def __post_init__(self):
        if self.kernel != "triangular":
            raise InputError("only the triangular kernel is built in")
        if not self.exponent > 0:
            raise InputError("bandwidth exponent must be positive")

    @staticmethod
    def psi(u):
        return np.maximum(0.0, 1.0 - np.abs(u))

    def bandwidth(self, n: int) -> float:
        return float(n) ** -self.exponent

    def mass(self) -> float:
        val, _ = integrate.quad(self.psi, -1.0, 1.0, points=[0.0], epsabs=1e-13)
        return float(val)


def kde_estimate(points: np.ndarray, s_grid: np.ndarray, kspec: KernelSpec | None = None, a: float | None = None) -> np.ndarray:
    """``h_n(s) = (1 / (n a)) sum_j psi((s - x_j) / a)`` on ``s_grid``."""
    kspec = kspec or KernelSpec()
    x = np.sort(np.asarray(points, float).ravel())
    n = x.size
    a = kspec.bandwidth(n) if a is None else float(a)
    if a <= 0:
        raise InputError("bandwidth must be positive")
    return kernels.tri_kde(x, np.asarray(s_grid, float), a) / (n * a)


def l1_on_grid(h: np.ndarray, target: np.ndarray, s_grid: np.ndarray) -> float:
    return float(integrate.trapezoid(np.abs(np.asarray(h) - np.asarray(target)), s_grid))


def besov_modulus(h: np.ndarray, t_list, s_grid: np.ndarray | None = None) -> dict:
    """``int |h(s) - h(s - t)| ds`` over ``s`` in ``[t, 1]`` for each ``t``.

    ``h`` is sampled on a uniform grid of ``[0, 1]``; each ``t`` is rounded to
    a whole number of grid steps. The exponent fit is ``None`` when every
    modulus vanishes.
    """
    h = np.asarray(h, float)
    m = h.size - 1
    s_grid = np.linspace(0.0, 1.0, m + 1) if s_grid is None else np.asarray(s_grid)
    ds = s_grid[1] - s_grid[0]
    vals = []
    ts = []
    for t in t_list:
        k = int(round(t / ds))
        if k <= 0 or k >= m:
            raise InputError(f"shift t={t} not resolvable on the grid")
        diff = np.abs(h[k:] - h[:-k])
        vals.append(float(integrate.trapezoid(diff, dx=ds)))
        ts.append(k * ds)
    vals = np.array(vals)
    ts = np.array(ts)
    fit = None
    pos = vals > 0
    if pos.sum() >= 2:
        coef = np.polyfit(np.log(ts[pos]), np.log(vals[pos]), 1)
        fit = float(coef[0])
    return {"t": ts, "modulus": vals, "tau_hat": fit}


# ---------------------------------------------------------------------------
# integrated periodogram


def lag_products(f: np.ndarray) -> np.ndarray:
    """``A_m = sum_j f_j f_{j+m}`` for ``m = 0..n-1``."""
    f = np.asarray(f, float)
    n = f.size
    if n <= 512:
        return np.correlate(f, f, mode="full")[n - 1 :]
    size = 1 << int(np.ceil(np.log2(2 * n)))
    F = np.fft.rfft(f, size)
    return np.fft.irfft(F * np.conj(F), size)[:n]


def integrated_periodogram(f: np.ndarray, omega, m_max: int | None = None, A: np.ndarray | None = None) -> dict:
    """``J_n(omega) = (omega/n) A_0 + (2/n) sum_{m=1}^{m_max} sin(m omega)/m A_m``.

    Equals ``(1/n) int_0^omega |sum_j f_j e^{-ijs}|^2 ds``. ``omega`` may be an
    array. The reported truncation mass is ``(2/n) sum_{m > m_max} |A_m| / m``.
    """
    f = np.asarray(f, float)
    n = f.size
    if n == 0:
        raise InputError("empty signal")
    w = np.atleast_1d(np.asarray(omega, float))
    if np.any(w < 0) or np.any(w > 2 * np.pi + 1e-12):
        raise InputError("omega must lie in [0, 2 pi]")
    A = lag_products(f) if A is None else A
    m_max = n - 1 if m_max is None else min(int(m_max), n - 1)
    m = np.arange(1, m_max + 1)
    J = (w / n) * A[0] + (2.0 / n) * (np.sin(np.outer(w, m)) @ (A[1 : m_max + 1] / m))
    trunc = float((2.0 / n) * np.sum(np.abs(A[m_max + 1 :]) / np.arange(m_max + 1, n))) if m_max < n - 1 else 0.0
    return {"J": J if np.ndim(omega) else float(J[0]), "truncation": trunc}


def periodogram_quadrature(f: np.ndarray, omega: float, panels: int = 10_000, rule: str = "simpson") -> float:
    """Direct ``s``-integration of ``|sum f_j e^{-ijs}|^2 / n`` over ``[0, omega]``.

    ``rule="simpson"`` is composite Simpson on ``panels`` panels;
    ``rule="gauss"`` uses 16-point Gauss-Legendre on each panel.
    """
    f = np.asarray(f, float)
    n = f.size
    if omega == 0:
        return 0.0

    def I(s):
        z = np.exp(-1j * np.outer(s, np.arange(n))) @ f
        return np.abs(z) ** 2 / n

    if rule == "simpson":
        s = np.linspace(0.0, omega, 2 * panels + 1)
        vals = np.concatenate([I(s[i : i + 4096]) for i in range(0, s.size, 4096)])
        return float(integrate.simpson(vals, x=s))
    if rule == "gauss":
        xg, wg = np.polynomial.legendre.leggauss(16)
        edges = np.linspace(0.0, omega, panels + 1)
        h = np.diff(edges)
        nodes = (edges[:-1, None] + 0.5 * h[:, None] * (xg[None, :] + 1)).ravel()
        weights = (0.5 * h[:, None] * wg[None, :]).ravel()
        vals = np.concatenate([I(nodes[i : i + 4096]) for i in range(0, nodes.size, 4096)])
        return float(np.sum(weights * vals))
    raise InputError(f"unknown quadrature rule {rule!r}")


def periodogram_limit(C: np.ndarray, omega, lag_max: int | None = None) -> dict:
    """``J(omega) = C_0 omega + 2 sum_{l=1}^{lag_max} sin(omega l)/l C_l``.

    The tail bound ``2 sum_{l > lag_max} |C_l| / l`` covers the supplied
    entries beyond ``lag_max``.
    """
    C = np.asarray(C, float)
    L = C.size - 1 if lag_max is None else min(int(lag_max), C.size - 1)
    w = np.atleast_1d(np.asarray(omega, float))
    l = np.arange(1, L + 1)
    J = C[0] * w + 2.0 * (np.sin(np.outer(w, l)) @ (C[1 : L + 1] / l))
    tail = float(2.0 * np.sum(np.abs(C[L + 1 :]) / np.arange(L + 1, C.size))) if L < C.size - 1 else 0.0
    return {"J": J if np.ndim(omega) else float(J[0]), "tail_bound": tail}


def omega_grid(N: int) -> np.ndarray:
    return 2.0 * np.pi * np.arange(N + 1) / N


def sup_periodogram_gap(f: np.ndarray, C: np.ndarray, N: int = 256) -> dict:
    """``max_p |J_n(omega_p) - J(omega_p)|`` on ``omega_p = 2 pi p / N``.

    Also reports the discretisation constant ``c_disc`` such that the gap on
    the whole interval exceeds the grid maximum by at most ``c_disc / N``:
    both curves are Lipschitz in ``omega`` with constants
    ``(sum|f|)^2 / n`` and ``|C_0| + 2 sum |C_l|``.
    """
    if N < 2:
        raise InputError("omega grid needs N >= 2")
    f = np.asarray(f, float)
    n = f.size
    w = omega_grid(N)
    Jn = integrated_periodogram(f, w)["J"]
    J = periodogram_limit(C, w)["J"]
    C = np.asarray(C, float)
    c_disc = 2 * np.pi * (np.sum(np.abs(f)) ** 2 / n + abs(C[0]) + 2 * np.sum(np.abs(C[1:])))
    return {"gap": float(np.max(np.abs(Jn - J))), "c_disc": float(c_disc), "N": N}


def periodogram_lip_bound(n: int, lip_f: float, sup_f: float) -> float:
    """Analytic ``Lip_j`` bound for ``x -> sup_omega J_n(omega)``.

    ``dJ/df_j = (2/n) sum_k f_k w(j - k)`` with ``|w(0)| <= 2 pi`` and
    ``sum_{m=1}^{n} |sin(m omega)/m| <= 1 + log n``.
    """
    return 2.0 / n * lip_f * sup_f * (2 * np.pi + 2.0 + 2.0 * np.log(n))


def periodogram_sup_observable(f: LipFunction, n: int, N: int = 256) -> Observable:
    w = omega_grid(N)

    def fn(x):
        x = np.atleast_2d(x)
        out = np.array([np.max(np.abs(integrated_periodogram(f(r), w)["J"])) for r in x])
        return out if out.size > 1 else out[0]

    return Observable(n, fn, np.full(n, periodogram_lip_bound(n, f.lip, f.sup)), f"sup_J[{f.label}]")


# ---------------------------------------------------------------------------
# tracing


def tracing_stats(orbit_x: np.ndarray, candidates: np.ndarray, eps: float, distance=None) -> dict:
    """Pool minima of the mean distance and the mismatch frequency.

    ``S_A = min_y (1/n) sum_j d(x_j, y_j)`` and
    ``M_A = min_y (1/n) #{j : d(x_j, y_j) > eps}`` over candidate orbits ``y``.
    """
    x = np.asarray(orbit_x, float)
    Y = np.atleast_2d(np.asarray(candidates, float))
    if Y.shape[0] == 0:
        raise InputError("candidate pool is empty")
    if Y.shape[1] != x.size:
        raise InputError("candidate orbits must match the orbit length")
    if not eps > 0:
        raise InputError("eps must be positive")
    distance = distance or (lambda a, b: np.abs(a - b))
    D = distance(x[None, :], Y)
    S = D.mean(axis=1)
    M = (D > eps).mean(axis=1)
    return {"S_A": float(S.min()), "M_A": float(M.min()), "pool": int(Y.shape[0])}
