"""Finite sequence calculus with moment claims, plus weight systems.

A :class:`MomentSeq` carries a claimed moment order ``Q``. The claim is
accepted when the partial sums ``S(N) = sum_{n<N} n^Q c_n`` are stable over
the last decade of the horizon: ``(S(N) - S(N/10)) / S(N) < 1%``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InputError, InvariantViolation

DEFAULT_HORIZON = 2**14
STABILITY_TOL = 0.01


def decade_increment(partial_sums: np.ndarray) -> float:
    """Relative growth of a partial-sum sequence over its last decade.

    Returns 0 for an identically zero sequence.
    """
    ps = np.asarray(partial_sums, float)
    if ps.size == 0:
        return 0.0
    n = ps.size
    last = ps[-1]
    earlier = ps[max(n // 10 - 1, 0)]
    if last == 0.0:
        return 0.0
    return float(abs(last - earlier) / abs(last))


def moment_partial_sums(values: np.ndarray, Q: float) -> np.ndarray:
    v = np.asarray(values, float)
    n = np.arange(v.size, dtype=float)
    return np.cumsum(n**Q * v)


@dataclass
class MomentSeq:
    """Nonnegative sequence ``c_0..c_{H-1}`` tagged with a moment order ``Q``."""

    values: np.ndarray
    Q: float
    horizon: int = DEFAULT_HORIZON

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64).ravel()
        if np.any(v < 0) or not np.all(np.isfinite(v)):
            raise InputError("moment sequences must be finite and nonnegative")
        if self.Q < 0:
            raise InputError("moment order must be >= 0")
        h = int(self.horizon)
        if v.size < h:
            v = np.concatenate([v, np.zeros(h - v.size)])
        self.values = v[:h]
        self.horizon = h

    @classmethod
    def from_function(cls, f, Q: float, horizon: int = DEFAULT_HORIZON, start: int = 0) -> "MomentSeq":
        """``c_n = f(n)`` for ``n >= start`` and 0 below."""
        n = np.arange(horizon, dtype=float)
        v = np.zeros(horizon)
        v[start:] = f(n[start:])
        return cls(v, Q, horizon)

    def increment(self, Q: float | None = None) -> float:
        return decade_increment(moment_partial_sums(self.values, self.Q if Q is None else Q))

    def check(self, Q: float | None = None) -> bool:
        """Whether the moment claim (or order ``Q``) passes the decade test."""
        return self.increment(Q) < STABILITY_TOL

    @property
    def total(self) -> float:
        return float(self.values.sum())


def convolve(u: MomentSeq, v: MomentSeq) -> MomentSeq:
    """``w_n = sum_{k<=n} u_k v_{n-k}``, tagged with ``min(Q_u, Q_v)``.

    Raises
    ------
    InputError
        If either input fails its own moment check.
    """
    for name, s in (("u", u), ("v", v)):
        if not s.check():
            raise InputError(f"{name} fails its moment-{s.Q:g} stability check", code="TAG_VERIFICATION")
    h = min(u.horizon, v.horizon)
    w = np.convolve(u.values[:h], v.values[:h])[:h]
    return MomentSeq(np.maximum(w, 0.0), min(u.Q, v.Q), h)


def tail_sum(c: MomentSeq) -> MomentSeq:
    """``d_n = sum_{k>=n} c_k`` (truncated at the horizon), tagged ``Q - 1``."""
    if c.Q < 1:
        raise InputError("tail_sum needs Q >= 1")
    d = np.cumsum(c.values[::-1])[::-1].copy()
    # guard against rounding making the reverse cumsum non-monotone
    d = np.maximum.accumulate(d[::-1])[::-1]
    return MomentSeq(d, c.Q - 1, c.horizon)


# ---------------------------------------------------------------------------
# weight systems


@dataclass
class WeightSystem:
    """Two-index weights ``u(r, k)`` for ``r < k`` built from a sequence ``M``.

    ``Type1``: ``u(r, k) = M_k``. ``Type2``: ``u(r, k)`` is the mean of
    ``M_r..M_{k-1}``. Entries of ``M`` past its length are zero.
    """

    kind: str
    M: np.ndarray

    def __post_init__(self):
        if self.kind not in ("Type1", "Type2"):
            raise InputError(f"unknown weight system kind {self.kind!r}")
        M = np.asarray(self.M, dtype=np.float64).ravel()
        if np.any(M < 0) or not np.all(np.isfinite(M)):
            raise InputError("weights must be finite and nonnegative")
        self.M = M
        self._prefix = np.concatenate(([0.0], np.cumsum(M)))

    @property
    def horizon(self) -> int:
        return self.M.size

    @property
    def Sigma(self) -> float:
        return float(self.M.sum())

    def _M_at(self, k):
        k = np.asarray(k)
        return np.where(k < self.horizon, self.M[np.minimum(k, self.horizon - 1)], 0.0)

    def _block_sum(self, r, k):
        # direct summation; prefix-sum differences cancel badly when early
        # weights dwarf later ones
        r = np.minimum(np.atleast_1d(r), self.horizon)
        k = np.minimum(np.atleast_1d(k), self.horizon)
        out = np.array([self.M[a:b].sum() for a, b in zip(r.ravel(), k.ravel())])
        return out.reshape(r.shape)

    def u(self, r, k):
        scalar = np.ndim(r) == 0 and np.ndim(k) == 0
        r = np.atleast_1d(r)
        k = np.atleast_1d(k)
        if np.any(r >= k):
            raise InputError("u(r, k) is defined for r < k only")
        if self.kind == "Type1":
            out = self._M_at(k) + 0.0 * r
        else:
            out = self._block_sum(r, k) / (k - r)
        return float(out[0]) if scalar else out

    def grid(self, kmax: int) -> np.ndarray:
        """Array ``U[r, k]`` for ``0 <= r < k <= kmax`` (zero elsewhere)."""
        out = np.zeros((kmax + 1, kmax + 1))
        Mk = np.zeros(kmax + 1)
        top = min(kmax + 1, self.horizon)
        Mk[:top] = self.M[:top]
        for r in range(kmax):
            if self.kind == "Type1":
                out[r, r + 1 :] = Mk[r + 1 :]
            else:
                out[r, r + 1 :] = np.cumsum(Mk[r:kmax]) / np.arange(1, kmax - r + 1)
        return out

    def window_sums(self, m: int) -> np.ndarray:
        """``u(r, r + m)`` for every ``r`` with a nonzero window inside the horizon."""
        if m >= self.horizon:
            return np.zeros(0)
        if self.kind == "Type1":
            return self.M[m:].copy()
        return np.convolve(self.M, np.ones(m), mode="valid") / m


def weight_sum_over_r(w: WeightSystem, m: int) -> float:
    """``sum_r u(r, r + m)`` over the horizon; never exceeds ``Sigma``."""
    if m <= 0:
        raise InputError("m must be positive")
    total = float(np.sum(w.window_sums(m)))
    if total > w.Sigma * (1.0 + 1e-12) + 1e-300:
        raise InvariantViolation(f"sum over r of u(r, r+{m}) = {total} exceeds Sigma = {w.Sigma}")
    return total


def build_weight_v(u: WeightSystem, c: MomentSeq, check_kmax: int | None = 64) -> WeightSystem:
    """Weight system ``v`` dominating ``sum_{r<s} u(r, k) c_{s-r}``.

    Type1 input gives ``v = Type1(C M)`` with ``C = sum c``. Type2 input gives
    ``v = Type2(M')`` with ``M'_s = C M_s + sum_{j<s} M_j d_{s-j}`` where
    ``d`` is the tail sum of ``c``. Domination is asserted on the grid
    ``s < k <= check_kmax`` (skip with ``None``).
    """
    if c.Q < 1 or not c.check(1.0):
        raise InputError("c needs a verified order-1 moment")
    C = c.total
    if u.kind == "Type1":
        v = WeightSystem("Type1", C * u.M)
    else:
        d = tail_sum(c).values.copy()
        # sum_{j<s} M_j d_{s-j} is the full convolution with d_0 removed
        d[0] = 0.0
        extra = np.convolve(u.M, d)
        Mp = extra
        Mp[: u.horizon] += C * u.M
        v = WeightSystem("Type2", Mp)
    if check_kmax is not None:
        worst = domination_violation(u, c, v, check_kmax)
        if worst > 0:
            raise InvariantViolation(f"weight domination fails by {worst:.3e}")
    return v


def domination_lhs(u: WeightSystem, c: MomentSeq, kmax: int) -> np.ndarray:
    """``W[s, k] = sum_{r<s} u(r, k) c_{s-r}`` on the grid ``s < k <= kmax``."""
    U = u.grid(kmax)
    idx = np.arange(kmax + 1)
    lag = idx[:, None] - idx[None, :]
    cv = np.concatenate([c.values, np.zeros(max(0, kmax + 1 - c.values.size))])
    Cmat = np.where(lag > 0, cv[np.clip(lag, 0, None)], 0.0)
    return Cmat @ U


def domination_violation(u: WeightSystem, c: MomentSeq, v: WeightSystem, kmax: int, rtol: float = 1e-12) -> float:
    """Largest excess of the left side over ``v(s, k)``; ``<= 0`` means none."""
    W = domination_lhs(u, c, kmax)
    V = v.grid(kmax)
    s, k = np.meshgrid(np.arange(kmax + 1), np.arange(kmax + 1), indexing="ij")
    mask = s < k
    excess = W[mask] - V[mask] * (1.0 + rtol) - 1e-300
    return float(excess.max()) if excess.size else 0.0


def random_weight_system(rng: np.random.Generator, horizon: int = 96) -> WeightSystem:
    """Random summable weights: sparse, geometric or power-law profiles."""
    kind = "Type1" if rng.random() < 0.5 else "Type2"
    n = np.arange(horizon, dtype=float)
    shape = rng.integers(3)
    if shape == 0:
        M = rng.random(horizon) * (rng.random(horizon) < 0.2)
    elif shape == 1:
        M = rng.random() * rng.uniform(0.3, 0.95) ** n
    else:
        M = rng.random() * (n + 1.0) ** -rng.uniform(1.5, 4.0)
    return WeightSystem(kind, M)


def random_order1_sequence(rng: np.random.Generator, horizon: int = DEFAULT_HORIZON) -> MomentSeq:
    """Random nonnegative ``c`` whose order-1 moment passes the decade test."""
    n = np.arange(horizon, dtype=float)
    shape = rng.integers(3)
    if shape == 0:
        v = np.zeros(horizon)
        support = rng.integers(0, 40, size=rng.integers(1, 6))
        v[support] = rng.random(support.size)
    elif shape == 1:
        v = rng.random() * rng.uniform(0.2, 0.9) ** n
    else:
        v = np.zeros(horizon)
        v[1:] = rng.random() * n[1:] ** -rng.uniform(3.5, 5.0)
    return MomentSeq(v, 1.0, horizon)
