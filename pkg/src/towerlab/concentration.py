"""Monte Carlo deviation tails, weak norms, moment scans and bound curves.

Trials are split into fixed-size chunks with their own random streams (see
:mod:`towerlab.rng`), so every number in a report is independent of the
worker count.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import special, stats

from . import kernels
from . import rng as rngmod
from .dynamics import DoublingMap, IntermittentMap, orbit_batch
from .errors import InputError, InvariantViolation
from .observables import LipFunction, Observable, birkhoff
from .tower import TowerSpec, sample_points, walk

FIT_WINDOW = (1e-3, 1e-1)


# ---------------------------------------------------------------------------
# sampling


def system_orbits(system, g: np.random.Generator, size: int, n: int, burn_in: int) -> np.ndarray:
    """``(size, n)`` orbit coordinates drawn from the invariant measure.

    Towers are reported through the base indicator ``1[height = 0]``.
    """
    if isinstance(system, (DoublingMap, IntermittentMap)):
        return orbit_batch(system, g, size, n, burn_in)
    if isinstance(system, TowerSpec):
        cells, levels = sample_points(system, g, size)
        base, _ = walk(system, g, cells, levels, n - 1)
        return base.astype(float)
    raise InputError(f"unsupported system {system!r}")


def sample_observable(
    system,
    make_obs: Callable[[int], Observable],
    n: int,
    trials: int,
    seed: int,
    tag: str,
    threads: int = 1,
    burn_in: int = 10_000,
) -> np.ndarray:
    """Values of ``make_obs(n)`` on ``trials`` independent orbits."""
    obs = make_obs(n)

    def chunk(ci, start, stop):
        g = rngmod.stream(seed, f"{tag}:n={n}", ci)
        return np.asarray(obs(system_orbits(system, g, stop - start, obs.arity, burn_in)), float)

    return rngmod.concat(rngmod.map_chunks(chunk, trials, threads, chunk=1024))


# ---------------------------------------------------------------------------
# statistics


def wilson_interval(k: np.ndarray, n: int, z: float = 1.959963984540054) -> tuple[np.ndarray, np.ndarray]:
    k = np.asarray(k, float)
    p = k / n
    den = 1 + z * z / n
    centre = (p + z * z / (2 * n)) / den
    half = z * np.sqrt(p * (1 - p) / n + z * z / (4 * n * n)) / den
    lo = np.where(k == 0, 0.0, np.clip(centre - half, 0.0, 1.0))
    hi = np.where(k == n, 1.0, np.clip(centre + half, 0.0, 1.0))
    return lo, hi


def exceedance(dev: np.ndarray, t_grid: np.ndarray) -> np.ndarray:
    """Counts of ``|dev| > t`` for each ``t`` (nonincreasing in ``t``)."""
    a = np.sort(np.abs(dev))
    return a.size - np.searchsorted(a, t_grid, side="right")


def _linfit(x, y):
    A = np.column_stack([np.ones_like(x), x])
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    resid = y - A @ coef
    ss = np.sum((y - y.mean()) ** 2)
    r2 = 1.0 - np.sum(resid**2) / ss if ss > 0 else 1.0
    return float(coef[1]), float(coef[0]), float(r2)


def fit_tail(t: np.ndarray, p_hat: np.ndarray, regime: str, window=FIT_WINDOW) -> dict | None:
    """Tail fit over ``t`` with ``p_hat`` inside ``window``.

    ``exp``: ``log p`` against ``t^2`` (slope reported). ``poly``: ``log p``
    against ``log t``; the reported ``exponent`` is minus the slope.
    """
    t = np.asarray(t, float)
    p = np.asarray(p_hat, float)
    sel = (p >= window[0]) & (p <= window[1]) & (t > 0)
    if sel.sum() < 3:
        return None
    y = np.log(p[sel])
    if regime == "exp":
        slope, icpt, r2 = _linfit(t[sel] ** 2, y)
        return {"regime": "exp", "slope": slope, "intercept": icpt, "r2": r2, "points": int(sel.sum()), "window": list(window)}
    if regime == "poly":
        slope, icpt, r2 = _linfit(np.log(t[sel]), y)
        return {"regime": "poly", "exponent": -slope, "intercept": icpt, "r2": r2, "points": int(sel.sum()), "window": list(window)}
    raise InputError(f"unknown regime {regime!r}")


def weak_norm(samples: np.ndarray, Q: float) -> float:
    """``sup_t t * P(|Z| > t)^{1/Q}`` over the order statistics of ``|Z|``.

    The supremum over ``t`` below the ``i``-th order statistic approaches
    ``a_i * (#{|Z| >= a_i} / N)^{1/Q}``.
    """
    if Q < 1:
        raise InputError("Q must be >= 1")
    a = np.sort(np.abs(np.asarray(samples, float).ravel()))
    if a.size == 0:
        raise InputError("samples must be nonempty")
    N = a.size
    ge = N - np.searchsorted(a, a, side="left")
    return float(np.max(a * (ge / N) ** (1.0 / Q)))


def bound_curve(kind: str, lip, Q: float, C: float, t) -> np.ndarray:
    """Concentration bound as a function of ``t``, clipped at 1.

    ``exp``: ``2 exp(-t^2 / (4 C sum Lip^2))``. ``poly``/``weak``:
    ``C t^{-Q} (sum Lip^2)^{Q/2}``.
    """
    if not C > 0:
        raise InputError("C must be positive")
    s2 = float(np.sum(np.asarray(lip, float) ** 2))
    t = np.asarray(t, float)
    with np.errstate(divide="ignore", over="ignore"):
        if kind == "exp":
            val = 2.0 * np.exp(-(t**2) / (4.0 * C * s2)) if s2 > 0 else np.where(t > 0, 0.0, 2.0)
        elif kind in ("poly", "weak"):
            val = np.where(t > 0, C * np.abs(t) ** (-Q) * s2 ** (Q / 2), np.inf)
        else:
            raise InputError(f"unknown bound kind {kind!r}")
    return np.minimum(val, 1.0)


def calibrate_C(kind: str, lip, Q: float, t: np.ndarray, p_upper: np.ndarray, window_sel: np.ndarray) -> float:
    """Smallest ``C`` whose bound curve dominates ``p_upper`` on the window."""
    s2 = float(np.sum(np.asarray(lip, float) ** 2))
    t = np.asarray(t, float)[window_sel]
    p = np.asarray(p_upper, float)[window_sel]
    if t.size == 0 or s2 == 0:
        return 1.0
    if kind == "exp":
        p = np.minimum(p, 1.0 - 1e-15)
        need = t**2 / (4.0 * s2 * np.log(2.0 / p))
    else:
        need = p * t**Q / s2 ** (Q / 2)
    return float(np.max(need))


# ---------------------------------------------------------------------------
# experiments


@dataclass
class DeviationExperiment:
    system: object
    observable_family: Callable[[int], Observable]
    n_list: list
    trials: int
    t_grid: np.ndarray | None = None
    t_grid_sd: np.ndarray | None = None
    master_seed: int = 0
    centering: str = "empirical-mean"
    reference_value: float | None = None
    regime: str = "exp"
    Q: float = 2.0
    burn_in: int = 10_000
    label: str = "deviation"
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.t_grid is None and self.t_grid_sd is None:
            raise InputError("give t_grid or t_grid_sd", code="MISSING_SERIES")
        grid = self.t_grid if self.t_grid is not None else self.t_grid_sd
        grid = np.asarray(grid, float)
        if grid.size == 0:
            raise InputError("empty t grid", code="MISSING_SERIES")
        if np.any(np.diff(grid) <= 0):
            raise InputError("t grid must be strictly increasing")
        if self.centering not in ("empirical-mean", "reference-value"):
            raise InputError(f"unknown centering {self.centering!r}")
        if self.centering == "reference-value" and self.reference_value is None:
            raise InputError("reference-value centering needs reference_value")


def run_deviation(exp: DeviationExperiment, threads: int = 1) -> dict:
    """Empirical tails ``P(|K - Kbar| > t)`` per ``n`` with fits and bounds.

    The calibrated bound uses the first half of the trials to fit ``C`` so
    the curve dominates their Wilson upper limits on the fit window, then
    checks it against the second half.
    """
    per_n = []
    for n in exp.n_list:
        vals = sample_observable(exp.system, exp.observable_family, n, exp.trials, exp.master_seed, exp.label, threads, exp.burn_in)
        ok = np.isfinite(vals)
        failures = int((~ok).sum())
        if failures > 0.01 * exp.trials:
            raise InvariantViolation(f"{failures} of {exp.trials} trials failed")
        vals = vals[ok]
        N = vals.size
        centre = float(vals.mean()) if exp.centering == "empirical-mean" else float(exp.reference_value)
        dev = vals - centre
        sd = float(dev.std())
        t = np.asarray(exp.t_grid, float) if exp.t_grid is not None else np.asarray(exp.t_grid_sd, float) * sd
        k = exceedance(dev, t)
        p_hat = k / N
        lo, hi = wilson_interval(k, N)
        fit = fit_tail(t, p_hat, exp.regime)
        obs = exp.observable_family(n)
        kind = "exp" if exp.regime == "exp" else "poly"
        half = N // 2
        k_tr = exceedance(dev[:half], t)
        k_te = exceedance(dev[half:], t)
        _, hi_tr = wilson_interval(k_tr, half)
        p_te = k_te / (N - half)
        win = (p_hat >= FIT_WINDOW[0]) & (p_hat <= FIT_WINDOW[1])
        C = calibrate_C(kind, obs.lip, exp.Q, t, hi_tr, win)
        bound = bound_curve(kind, obs.lip, exp.Q, C, t)
        per_n.append(
            {
                "n": int(n),
                "trials": int(N),
                "failures": failures,
                "centre": centre,
                "sd": sd,
                "t": t.tolist(),
                "p_hat": p_hat.tolist(),
                "wilson_lo": lo.tolist(),
                "wilson_hi": hi.tolist(),
                "fit": fit,
                "weak_norm": weak_norm(dev, exp.Q),
                "bound_kind": kind,
                "bound_C": C,
                "bound": bound.tolist(),
                "bound_dominates_test": bool(np.all(p_te[win] <= bound[win])),
                "lip_sq_sum": obs.lip_sq_sum,
            }
        )
    return {"label": exp.label, "regime": exp.regime, "Q": exp.Q, "seed": exp.master_seed, "results": per_n}


def moment_scan(system, f: LipFunction, n_list, trials: int, Q: float, seed: int, threads: int = 1, burn_in: int = 10_000) -> dict:
    """``E|S_n - mean|^Q`` per ``n`` for Birkhoff sums, with a log-log slope.

    Flags ``heavy_tail`` when the top 1% of samples carries more than a
    quarter of a moment estimate.
    """
    moments = []
    heavy = []
    for n in n_list:
        v = sample_observable(system, lambda m: birkhoff(f, m), n, trials, seed, "moment", threads, burn_in)
        a = np.abs(v - v.mean()) ** Q
        m = float(a.mean())
        moments.append(m)
        if m > 0:
            top = np.sort(a)[-max(1, a.size // 100) :]
            heavy.append(bool(top.sum() > 0.25 * a.sum()))
        else:
            heavy.append(False)
    moments = np.array(moments)
    slope = None
    if np.all(moments > 0) and len(n_list) >= 2:
        slope = float(np.polyfit(np.log(n_list), np.log(moments), 1)[0])
    return {"n": list(map(int, n_list)), "moment": moments.tolist(), "Q": Q, "slope": slope, "heavy_tail": heavy}


# ---------------------------------------------------------------------------
# maximal function step


def maximal_averages(lip: np.ndarray, p_max: int) -> np.ndarray:
    """``A(p) = sup_{h >= 1} h^{-1} sum_{j=p-h+1}^{p} lip_j`` for ``p = 0..p_max``."""
    lip = np.asarray(lip, float)
    v = np.zeros(p_max + 1)
    m = min(lip.size, p_max + 1)
    v[:m] = lip[:m]
    C = np.concatenate(([0.0], np.cumsum(v)))
    out = np.empty(p_max + 1)
    for p in range(p_max + 1):
        i = np.arange(p + 1)
        out[p] = np.max((C[p + 1] - C[i]) / (p + 1 - i))
    return out


def maximal_function_check(lip, p_factor: int = 8) -> dict:
    """``sum_p A(p)^2 / sum lip^2`` with a rigorous tail enclosure.

    ``A(p)`` is summed exactly up to ``P = p_factor * (last support index J + 1)``.
    Beyond ``P`` the best window ending at ``p`` starts at some support index
    ``i``, so ``A(p) = max_i S_i / (p - i + 1)`` with suffix sums ``S_i``. The
    tail is at least ``max_i S_i^2 psi1(P - i + 2)`` and at most the smaller
    of ``sum_i S_i^2 psi1(P - i + 2)`` and ``S_0^2 psi1(P - J + 2)``
    (``psi1`` the trigamma function). The ratio uses the upper end.
    """
    lip = np.abs(np.asarray(lip, float))
    denom = float(np.sum(lip**2))
    if denom == 0:
        return {"ratio": 0.0, "ratio_lower": 0.0, "sum": 0.0, "denominator": 0.0}
    J = int(np.nonzero(lip)[0].max())
    lip = lip[: J + 1]
    P = p_factor * (J + 1)
    A = maximal_averages(lip, P)
    head = float(np.sum(A**2))
    S = np.cumsum(lip[::-1])[::-1]
    i = np.arange(J + 1)
    tri = special.polygamma(1, P - i + 2.0)
    tail_hi = min(float(np.sum(S**2 * tri)), float(S[0] ** 2 * special.polygamma(1, P - J + 2.0)))
    tail_lo = float(np.max(S**2 * tri))
    return {
        "ratio": (head + tail_hi) / denom,
        "ratio_lower": (head + tail_lo) / denom,
        "sum": head + tail_hi,
        "denominator": denom,
        "p_max": P,
    }


# ---------------------------------------------------------------------------
# weighted base-visit functional on a tower


def visit_functional_moment_mc(
    spec: TowerSpec,
    L: np.ndarray,
    n_trials: int,
    orbit_len: int | None = None,
    seed: int = 0,
    q: float | None = None,
    threads: int = 1,
) -> dict:
    """Monte Carlo ``E[G^{q-1}] / (sum L^2)^{q-1}``.

    ``G = sum_r (sum_{k >= r} L_k Phi_{k-r}(T^r x))^2`` with ``Phi`` built
    from ``spec.beta``. The inner sums come from the backward recursion
    ``S_r = L_r + beta^{[T^{r+1} x in base]} S_{r+1}`` and only base times
    ``r`` contribute. The same seed gives the same orbits for every ``L``.
    """
    L = np.asarray(L, float)
    if np.any(L < 0):
        raise InputError("L must be nonnegative")
    q = (spec.tail.q if spec.tail is not None else 2.0) if q is None else q
    if q < 2:
        raise InputError("q must be >= 2")
    orbit_len = L.size if orbit_len is None else int(orbit_len)
    if orbit_len < L.size:
        raise InputError("orbit_len must cover the support of L")
    denom = float(np.sum(L**2))
    if denom == 0:
        return {"ratio": 0.0, "stderr": 0.0, "q": q, "trials": n_trials}

    def chunk(ci, start, stop):
        g = rngmod.stream(seed, "technical", ci)
        cells, levels = sample_points(spec, g, stop - start)
        base, _ = walk(spec, g, cells, levels, orbit_len)
        G = kernels.visit_functional(base, np.ascontiguousarray(L), float(spec.beta))
        val = G ** (q - 1)
        return np.array([val.sum(), (val * val).sum()])

    parts = rngmod.map_chunks(chunk, n_trials, threads)
    s = np.sum(parts, axis=0)
    mean = s[0] / n_trials
    var = max(s[1] / n_trials - mean**2, 0.0)
    scale = denom ** (q - 1)
    return {
        "ratio": float(mean / scale),
        "stderr": float(np.sqrt(var / n_trials) / scale),
        "q": q,
        "trials": n_trials,
        "orbit_len": orbit_len,
    }


def visit_functional_direct(spec: TowerSpec, base_row: np.ndarray, L: np.ndarray) -> float:
    """Definition-level evaluation of ``G`` for one orbit (test oracle)."""
    L = np.asarray(L, float)
    beta = spec.beta
    total = 0.0
    for r in range(L.size):
        if not base_row[r]:
            continue
        inner = 0.0
        for k in range(r, L.size):
            returns = int(np.sum(base_row[r + 1 : k + 1]))
            inner += L[k] * beta**returns
        total += inner * inner
    return total


def random_profile(rng: np.random.Generator, support: int = 32) -> np.ndarray:
    """Nonnegative profile with ``sum L^2 = 1`` on ``support`` sites."""
    L = np.abs(rng.standard_normal(support))
    return L / np.sqrt(np.sum(L**2))


def quasi_norm_constant(rng: np.random.Generator, Q: float, pairs: int = 200, size: int = 2000) -> float:
    """Largest observed ``||Z + Z'|| / (||Z|| + ||Z'||)`` for the weak norm."""
    worst = 0.0
    for _ in range(pairs):
        z1 = stats.t.rvs(df=rng.uniform(1.5, 6), size=size, random_state=rng)
        z2 = stats.t.rvs(df=rng.uniform(1.5, 6), size=size, random_state=rng) * rng.uniform(0.1, 10)
        if rng.random() < 0.5:
            z2 = -z1 + z2 * 0.1
        num = weak_norm(z1 + z2, Q)
        den = weak_norm(z1, Q) + weak_norm(z2, Q)
        worst = max(worst, num / den)
    return worst
