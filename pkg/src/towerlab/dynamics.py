"""Interval maps and one-sided shifts: single steps, orbits, invariant draws.

Three systems are provided:

* :class:`IntermittentMap` -- ``x(1 + 2^a x^a)`` on ``[0, 1/2]``, ``2x - 1``
  on ``(1/2, 1]``, with a neutral fixed point at 0.
* :class:`DoublingMap` -- ``x -> 2x mod 1`` with Lebesgue measure.
* :class:`ShiftSystem` -- full shift on ``k`` symbols with a product or
  Markov measure and the metric ``beta ** s(x, y)``.

The tower base for the intermittent map is ``[1/2, 1]``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence, Union

import numpy as np

from . import kernels
from .errors import DomainError, InputError, ReturnTimeCapExceeded

_SLACK = 1e-15
DEFAULT_BURN_IN = 10_000
DEFAULT_RETURN_CAP = 10_000_000


@dataclass(frozen=True)
class IntermittentMap:
    alpha: float

    def __post_init__(self):
        a = float(self.alpha)
        if not (0.0 < a < 1.0):
            raise DomainError(f"alpha must lie strictly inside (0, 1), got {a}")
        object.__setattr__(self, "alpha", a)

    @property
    def system_id(self) -> str:
        return f"intermittent(alpha={self.alpha!r})"

    def step(self, x: float) -> float:
        return intermittent_step(x, self.alpha)

    def branch_endpoints(self) -> dict:
        """Images of the branch endpoints; onto-ness means they hit 0 and 1."""
        a = self.alpha
        return {
            "T(0)": intermittent_step(0.0, a),
            "T(1/2)": intermittent_step(0.5, a),
            "T(1/2+)": 2 * np.nextafter(0.5, 1.0) - 1.0,
            "T(1)": intermittent_step(1.0, a),
        }


@dataclass(frozen=True)
class DoublingMap:
    system_id: str = "doubling"

    def step(self, x: float) -> float:
        return doubling_step(x)


@dataclass(frozen=True)
class ShiftSystem:
    """Full shift on ``symbol_count`` symbols.

    Give either ``probs`` (product measure) or ``matrix`` together with
    ``stationary`` (Markov measure).
    """

    symbol_count: int
    probs: tuple | None = None
    matrix: tuple | None = None
    stationary: tuple | None = None
    beta: float = 0.5
    word_length: int = 64

    def __post_init__(self):
        k = int(self.symbol_count)
        if k < 2:
            raise InputError("symbol_count must be >= 2")
        if not (0.0 < self.beta < 1.0):
            raise DomainError("beta must lie in (0, 1)")
        if self.word_length < 1:
            raise InputError("word_length must be positive")
        if self.probs is not None:
            p = np.asarray(self.probs, float)
            if p.shape != (k,) or np.any(p < 0) or abs(p.sum() - 1.0) > 1e-12:
                raise InputError("probs must be a probability vector of length symbol_count")
            object.__setattr__(self, "probs", tuple(float(v) for v in p))
        elif self.matrix is not None and self.stationary is not None:
            P = np.asarray(self.matrix, float)
            pi = np.asarray(self.stationary, float)
            if P.shape != (k, k) or np.any(P < 0):
                raise InputError("matrix must be a nonnegative k x k array")
            if np.max(np.abs(P.sum(axis=1) - 1.0)) > 1e-12:
                raise InputError("matrix rows must sum to 1")
            if abs(pi.sum() - 1.0) > 1e-12 or np.max(np.abs(P.T @ pi - pi)) > 1e-12:
                raise InputError("stationary vector is not fixed by the matrix transpose")
            object.__setattr__(self, "matrix", tuple(tuple(float(v) for v in r) for r in P))
            object.__setattr__(self, "stationary", tuple(float(v) for v in pi))
        else:
            raise InputError("ShiftSystem needs probs, or matrix and stationary")
        object.__setattr__(self, "symbol_count", k)

    @classmethod
    def bernoulli(cls, p1: float = 0.5, beta: float = 0.5, word_length: int = 64) -> "ShiftSystem":
        return cls(2, probs=(1.0 - p1, p1), beta=beta, word_length=word_length)

    @property
    def is_markov(self) -> bool:
        return self.probs is None

    @property
    def marginal(self) -> np.ndarray:
        return np.asarray(self.probs if self.probs is not None else self.stationary)

    @property
    def system_id(self) -> str:
        kind = "markov" if self.is_markov else "product"
        return f"shift(k={self.symbol_count},{kind},beta={self.beta!r})"

    def sample_words(self, rng: np.random.Generator, size: int, length: int | None = None) -> np.ndarray:
        """``size`` independent words of ``length`` symbols drawn from the measure."""
        length = self.word_length if length is None else int(length)
        k = self.symbol_count
        if not self.is_markov:
            return rng.choice(k, size=(size, length), p=self.marginal).astype(np.int8)
        P = np.asarray(self.matrix)
        cum = np.cumsum(P, axis=1)
        cum[:, -1] = 1.0
        out = np.empty((size, length), np.int8)
        out[:, 0] = rng.choice(k, size=size, p=self.marginal)
        u = rng.random((size, length))
        for j in range(1, length):
            out[:, j] = (cum[out[:, j - 1]] <= u[:, j : j + 1]).sum(axis=1).clip(max=k - 1)
        return out

    def refill(self, rng: np.random.Generator, last: int) -> int:
        k = self.symbol_count
        if not self.is_markov:
            return int(rng.choice(k, p=self.marginal))
        return int(rng.choice(k, p=np.asarray(self.matrix)[last]))

    def separation(self, x: Sequence[int], y: Sequence[int]) -> int:
        """Index of the first differing symbol (``len`` if none)."""
        for i, (a, b) in enumerate(zip(x, y)):
            if a != b:
                return i
        return min(len(x), len(y))

    def distance(self, x: Sequence[int], y: Sequence[int]) -> float:
        return self.beta ** self.separation(x, y)


MapSystem = Union[IntermittentMap, DoublingMap, ShiftSystem]


@dataclass
class Orbit:
    points: list
    seed: int | None
    system_id: str

    def __len__(self) -> int:
        return len(self.points)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.points)


# ---------------------------------------------------------------------------
# single steps


def _check_unit(x: float) -> float:
    x = float(x)
    if not (-_SLACK <= x <= 1.0 + _SLACK) or np.isnan(x):
        raise DomainError(f"state {x!r} outside [0, 1]")
    return min(max(x, 0.0), 1.0)


def intermittent_step(x: float, alpha: float) -> float:
    """One step of the intermittent map, clamped to ``[0, 1]``.

    Examples
    --------
    >>> intermittent_step(0.75, 0.3)
    0.5
    >>> round(intermittent_step(0.25, 0.5), 9)
    0.426776695
    """
    x = _check_unit(x)
    if x <= 0.5:
        y = x * (1.0 + 2.0**alpha * x**alpha)
    else:
        y = 2.0 * x - 1.0
    return min(max(y, 0.0), 1.0)


def doubling_step(x: float) -> float:
    x = _check_unit(x)
    y = 2.0 * x
    return y - 1.0 if y >= 1.0 else y


# ---------------------------------------------------------------------------
# orbits


def generate_orbit(system: MapSystem, x0, n: int, seed: int | None = None) -> Orbit:
    """Orbit of length ``n`` starting at ``x0``.

    Interval maps use plain double arithmetic. Shift words are shifted left
    and refilled at the end from a generator seeded with ``seed``.
    """
    if n < 1:
        raise InputError("orbit length must be >= 1")
    if isinstance(system, IntermittentMap):
        x = _check_unit(x0)
        pts = kernels.intermittent_orbits(np.array([x]), system.alpha, int(n))[0]
        return Orbit([float(v) for v in pts], seed, system.system_id)
    if isinstance(system, DoublingMap):
        pts = [_check_unit(x0)]
        for _ in range(n - 1):
            pts.append(doubling_step(pts[-1]))
        return Orbit(pts, seed, system.system_id)
    if isinstance(system, ShiftSystem):
        word = _parse_word(x0, system.symbol_count)
        rng = np.random.default_rng(seed)
        pts = [tuple(word)]
        for _ in range(n - 1):
            w = pts[-1]
            pts.append(w[1:] + (system.refill(rng, w[-1]),))
        return Orbit(pts, seed, system.system_id)
    raise InputError(f"unsupported system {system!r}")


def _parse_word(x0, k: int) -> tuple:
    if isinstance(x0, str):
        sym = tuple(int(c) for c in x0)
    else:
        sym = tuple(int(c) for c in x0)
    if not sym or min(sym) < 0 or max(sym) >= k:
        raise DomainError("word contains symbols outside the alphabet")
    return sym


def sample_invariant(system: MapSystem, seed: int, burn_in: int = DEFAULT_BURN_IN):
    """One draw from (an approximation of) the invariant measure.

    Exact for the doubling map and shifts. For the intermittent map it is the
    endpoint of a ``burn_in``-step orbit started from a uniform draw.
    """
    if burn_in < 0:
        raise InputError("burn_in must be >= 0")
    rng = np.random.default_rng(seed)
    if isinstance(system, ShiftSystem):
        return tuple(int(s) for s in system.sample_words(rng, 1)[0])
    return float(sample_invariant_batch(system, rng, 1, burn_in)[0])


def sample_invariant_batch(system: MapSystem, rng: np.random.Generator, size: int, burn_in: int = DEFAULT_BURN_IN) -> np.ndarray:
    if isinstance(system, DoublingMap):
        return rng.random(size)
    if isinstance(system, IntermittentMap):
        return kernels.intermittent_burn(rng.random(size), system.alpha, int(burn_in))
    if isinstance(system, ShiftSystem):
        return system.sample_words(rng, size)
    raise InputError(f"unsupported system {system!r}")


def orbit_batch(system: MapSystem, rng: np.random.Generator, size: int, n: int, burn_in: int = DEFAULT_BURN_IN) -> np.ndarray:
    """``(size, n)`` array of orbits started from invariant draws.

    Doubling orbits are built from a fair-bit stream so they never collapse to
    0 the way repeated float doubling does.
    """
    if isinstance(system, DoublingMap):
        bits = rng.integers(0, 2, size=(size, n + 53), dtype=np.uint8)
        return kernels.doubling_orbits(bits, int(n))
    if isinstance(system, IntermittentMap):
        x0 = sample_invariant_batch(system, rng, size, burn_in)
        return kernels.intermittent_orbits(x0, system.alpha, int(n))
    raise InputError("orbit_batch supports interval maps only")


# ---------------------------------------------------------------------------
# return times


def first_return_time(m: IntermittentMap, x: float, cap: int = DEFAULT_RETURN_CAP) -> int:
    """Smallest ``n >= 1`` with ``T^n x`` in ``[1/2, 1]``."""
    x = _check_unit(x)
    if x < 0.5:
        raise DomainError("first_return_time needs x in [1/2, 1]")
    k = int(kernels.return_times(np.array([x]), m.alpha, int(cap))[0])
    if k > cap:
        raise ReturnTimeCapExceeded(f"no return within {cap} steps from x={x!r}")
    return k


def return_time_samples(m: IntermittentMap, rng: np.random.Generator, size: int, cap: int = DEFAULT_RETURN_CAP) -> np.ndarray:
    """Return times of ``size`` uniform points of ``[1/2, 1]``.

    Entries equal to ``cap + 1`` flag stalled orbits; callers decide whether
    to count them as failures.
    """
    x = 0.5 + 0.5 * rng.random(size)
    return kernels.return_times(x, m.alpha, int(cap))


def exact_return_pmf(m: IntermittentMap, n_max: int) -> np.ndarray:
    """``P(phi = n)`` for ``n = 0..n_max`` under uniform law on ``[1/2, 1]``.

    Uses the left-branch preimages ``z_k`` of 1/2: ``phi = 1`` on
    ``[3/4, 1]`` and ``phi = k + 1`` on ``((1 + z_k)/2, (1 + z_{k-1})/2]``.
    """
    z = [0.5]
    for _ in range(n_max):
        z.append(_left_preimage(z[-1], m.alpha))
    z = np.asarray(z)
    pmf = np.zeros(n_max + 1)
    if n_max >= 1:
        pmf[1] = 0.5
    pmf[2:] = z[:-2] - z[1:-1]
    return pmf


def _left_preimage(y: float, alpha: float) -> float:
    lo, hi = 0.0, 0.5
    c = 2.0**alpha
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if mid * (1.0 + c * mid**alpha) < y:
            lo = mid
        else:
            hi = mid
        if hi - lo <= 1e-300 + 1e-17 * hi:
            break
    return 0.5 * (lo + hi)


@dataclass
class TailFit:
    exponent: float
    intercept: float
    r2: float
    window: tuple
    n_points: int
    extra: dict = field(default_factory=dict)


def fit_return_tail(samples: np.ndarray, s_lo: float = 1e-5, s_hi: float = 1e-2) -> TailFit:
    """Tail exponent of ``P(phi = n)`` from return-time samples.

    Regresses ``log P(phi >= n)`` on ``log n`` over the ``n`` whose empirical
    survival lies in ``[s_lo, s_hi]``, weighted by ``sqrt(count >= n)``, and
    adds one to the survival slope. The window and weights are fixed in
    advance, not tuned per sample.
    """
    r = np.asarray(samples, np.int64)
    N = r.size
    cnt = np.bincount(r)
    surv = np.cumsum(cnt[::-1])[::-1] / N
    n = np.arange(cnt.size, dtype=float)
    m = (surv >= s_lo) & (surv <= s_hi) & (n >= 1) & (cnt > 0)
    if m.sum() < 3:
        raise InputError("too few return-time levels inside the fit window")
    x = np.log(n[m])
    y = np.log(surv[m])
    w = np.sqrt(surv[m] * N)
    A = np.column_stack([np.ones_like(x), x])
    coef, *_ = np.linalg.lstsq(A * w[:, None], y * w, rcond=None)
    resid = y - A @ coef
    ybar = np.average(y, weights=w**2)
    r2 = 1.0 - np.sum(w**2 * resid**2) / np.sum(w**2 * (y - ybar) ** 2)
    return TailFit(1.0 - coef[1], coef[0], float(r2), (s_lo, s_hi), int(m.sum()))
