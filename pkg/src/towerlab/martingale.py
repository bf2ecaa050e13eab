"""Exact reverse-martingale decompositions on a one-sided full shift.

Observables built here take ``(batch, n, depth)`` arrays of points rather
than flat coordinates; evaluate them through :func:`evaluate`.

Coordinates of an observable are points of the shift, i.e. infinite words.
Observables here only look at the first ``depth`` symbols of each point, so
``K(x_0, ..., x_{n-1})`` with ``x_i = sigma^i x`` depends on the first
``L = n + depth - 1`` symbols of ``x``. Enumerating all ``k^L`` words gives
``K_p = E(K | symbols >= p)`` and ``D_p = K_p - K_{p+1}`` exactly.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .dynamics import ShiftSystem
from .errors import BudgetExceeded, InputError
from .observables import Observable

BUDGET = 2**20


@dataclass
class ExactShiftContext:
    shift: ShiftSystem
    n: int
    depth: int = 6
    tail_symbol: int = 0
    budget: int = BUDGET

    def __post_init__(self):
        if self.shift.is_markov:
            raise InputError("exact enumeration supports product measures only")
        if self.n < 1 or self.depth < 1:
            raise InputError("n and depth must be positive")
        if not (0 <= self.tail_symbol < self.shift.symbol_count):
            raise InputError("tail symbol outside the alphabet")
        if self.shift.symbol_count**self.length > self.budget:
            raise BudgetExceeded(
                f"{self.shift.symbol_count}^{self.length} words exceed the budget {self.budget}"
            )

    @property
    def k(self) -> int:
        return self.shift.symbol_count

    @property
    def length(self) -> int:
        """Number of symbols an arity-``n`` observable can see."""
        return self.n + self.depth - 1

    @property
    def probs(self) -> np.ndarray:
        return self.shift.marginal

    def all_words(self) -> np.ndarray:
        """Every word of ``length`` symbols, first symbol varying slowest."""
        L = self.length
        idx = np.arange(self.k**L)
        return np.stack([(idx // self.k ** (L - 1 - i)) % self.k for i in range(L)], axis=1).astype(np.int8)

    def points(self, words: np.ndarray) -> np.ndarray:
        """``(batch, n, depth)`` array: ``points[:, i]`` is the word shifted by ``i``."""
        words = np.asarray(words)
        if words.shape[-1] < self.length:
            pad = np.full(words.shape[:-1] + (self.length - words.shape[-1],), self.tail_symbol, words.dtype)
            words = np.concatenate([words, pad], axis=-1)
        win = np.lib.stride_tricks.sliding_window_view(words[..., : self.length], self.depth, axis=-1)
        return win[..., : self.n, :]

    def word_weights(self, words: np.ndarray) -> np.ndarray:
        return np.prod(self.probs[np.asarray(words, np.int64)], axis=-1)


# ---------------------------------------------------------------------------
# observables of shift points


def symbol_value(ctx: ExactShiftContext, sym: np.ndarray) -> np.ndarray:
    return np.asarray(sym, float) / (ctx.k - 1)


def feature(ctx: ExactShiftContext, v: np.ndarray) -> Callable[[np.ndarray], np.ndarray]:
    """``h(x) = sum_m v_m beta^m s(x_m)`` with ``s`` in ``[0, 1]``.

    When ``sum |v_m| beta^m`` beyond index ``s`` is at most ``beta^s`` (for
    example ``|v_m| <= 1 - beta``) the feature is 1-Lipschitz for
    ``beta ** s(x, y)``.
    """
    beta = ctx.shift.beta
    w = np.asarray(v, float) * beta ** np.arange(len(v))

    def h(points):
        return symbol_value(ctx, points[..., : len(w)]) @ w

    return h


def random_observable(ctx: ExactShiftContext, rng: np.random.Generator, n: int | None = None) -> Observable:
    """``K = sum_i c_i h_i(x_i) + lam * sin(sum_i e_i g_i(x_i))``.

    ``h_i`` and ``g_i`` are random 1-Lipschitz features, so
    ``Lip_i = |c_i| + |lam| |e_i|``.
    """
    n = ctx.n if n is None else n
    if n > ctx.n:
        raise InputError("observable arity exceeds the context horizon")
    D = ctx.depth
    beta = ctx.shift.beta
    c = rng.uniform(-1.0, 1.0, n)
    e = rng.uniform(-1.0, 1.0, n)
    lam = rng.uniform(-1.0, 1.0)
    V = rng.uniform(-(1 - beta), 1 - beta, (n, D))
    W = rng.uniform(-(1 - beta), 1 - beta, (n, D))
    scale = beta ** np.arange(D)

    def fn(points):
        pts = symbol_value(ctx, points[..., :n, :])
        hv = np.sum(pts * (V * scale), axis=-1)
        gv = np.sum(pts * (W * scale), axis=-1)
        return hv @ c + lam * np.sin(gv @ e)

    lip = np.zeros(ctx.n)
    lip[:n] = np.abs(c) + abs(lam) * np.abs(e)
    return Observable(ctx.n, fn, lip, "random")


def first_symbol_probe(ctx: ExactShiftContext) -> Observable:
    """``K = x_0`` read as a number in ``[0, 1]``."""
    lip = np.zeros(ctx.n)
    lip[0] = 1.0
    return Observable(ctx.n, lambda pts: symbol_value(ctx, pts[..., 0, 0]), lip, "x0")


def distance_probe(ctx: ExactShiftContext, word, j: int = 0) -> Observable:
    """``K = beta ** s(x_j, word)`` with the separation capped at ``depth``."""
    word = np.asarray(word, np.int8)[: ctx.depth]
    beta = ctx.shift.beta

    def fn(pts):
        agree = np.cumprod(pts[..., j, : word.size] == word, axis=-1)
        s = agree.sum(axis=-1)
        return beta**s

    lip = np.zeros(ctx.n)
    lip[j] = 1.0
    return Observable(ctx.n, fn, lip, f"dist@{j}")


def feature_probe(ctx: ExactShiftContext, v, j: int) -> Observable:
    h = feature(ctx, v)
    lip = np.zeros(ctx.n)
    lip[j] = 1.0
    return Observable(ctx.n, lambda pts: h(pts[..., j, :]), lip, f"feature@{j}")


def evaluate(ctx: ExactShiftContext, K: Observable, words: np.ndarray) -> np.ndarray:
    return K.fn(ctx.points(words))


# ---------------------------------------------------------------------------
# exact conditional expectations


def exact_Kp(ctx: ExactShiftContext, K: Observable, p: int, suffix) -> float:
    """``E(K | symbols >= p)`` at the given suffix (symbols ``p, p+1, ...``).

    Missing suffix symbols are filled with the tail symbol.
    """
    if p < 0:
        raise InputError("p must be >= 0")
    if ctx.k**p > ctx.budget:
        raise BudgetExceeded(f"{ctx.k}^{p} prefixes exceed the budget")
    suffix = np.asarray(suffix, np.int8).ravel()
    need = max(ctx.length - p, 0)
    if suffix.size < need:
        suffix = np.concatenate([suffix, np.full(need - suffix.size, ctx.tail_symbol, np.int8)])
    if p == 0:
        return float(np.asarray(evaluate(ctx, K, suffix[None, :]))[0])
    idx = np.arange(ctx.k**p)
    pref = np.stack([(idx // ctx.k ** (p - 1 - i)) % ctx.k for i in range(p)], axis=1).astype(np.int8)
    words = np.concatenate([pref, np.broadcast_to(suffix, (pref.shape[0], suffix.size))], axis=1)
    w = ctx.word_weights(pref)
    return float(np.sum(w * evaluate(ctx, K, words)))


def exact_Dp(ctx: ExactShiftContext, K: Observable, p: int, suffix) -> float:
    """``K_p(suffix) - K_{p+1}(suffix without its first symbol)``."""
    suffix = np.asarray(suffix, np.int8).ravel()
    return exact_Kp(ctx, K, p, suffix) - exact_Kp(ctx, K, p + 1, suffix[1:])


@dataclass
class Decomposition:
    """All ``K_p`` and ``D_p`` as tensors over the remaining symbols."""

    K: np.ndarray
    Kp: list
    Dp: list
    probs: np.ndarray

    @property
    def mean(self) -> float:
        return float(self.Kp[-1])

    def sup_D(self) -> np.ndarray:
        return np.array([float(np.max(np.abs(d))) for d in self.Dp])


def decompose(ctx: ExactShiftContext, K: Observable) -> Decomposition:
    """Full enumeration: ``K_{p+1}`` is the probability-weighted mean of
    ``K_p`` over its leading symbol."""
    L = ctx.length
    vals = np.asarray(evaluate(ctx, K, ctx.all_words()), float).reshape((ctx.k,) * L)
    pr = ctx.probs
    Kp = [vals]
    Dp = []
    cur = vals
    for _ in range(L):
        nxt = np.tensordot(pr, cur, axes=(0, 0))
        Dp.append(cur - nxt[None, ...])
        Kp.append(nxt)
        cur = nxt
    return Decomposition(vals, Kp, Dp, pr)


def martingale_residual(dec: Decomposition) -> float:
    """``max |sum_a prob(a) D_p(a, ...)|`` over all ``p``."""
    return max(float(np.max(np.abs(np.tensordot(dec.probs, d, axes=(0, 0))))) for d in dec.Dp)


def telescoping_residual(dec: Decomposition) -> float:
    """``max |sum_p D_p - (K - E K)|`` on all enumerated words."""
    total = np.zeros_like(dec.K)
    for p, d in enumerate(dec.Dp):
        total = total + d.reshape((1,) * p + d.shape)
    return float(np.max(np.abs(total - (dec.K - dec.mean))))


def tower_residual(ctx: ExactShiftContext, K: Observable, dec: Decomposition, rng: np.random.Generator, draws: int = 20) -> float:
    """Compare the tensor ``K_{p+1}`` with the per-suffix enumeration route."""
    worst = 0.0
    L = ctx.length
    for _ in range(draws):
        p = int(rng.integers(0, L))
        suffix = rng.integers(0, ctx.k, L - p - 1).astype(np.int8)
        direct = exact_Kp(ctx, K, p + 1, suffix)
        tensor = float(dec.Kp[p + 1][tuple(suffix)]) if suffix.size else float(dec.Kp[p + 1])
        worst = max(worst, abs(direct - tensor))
    return worst


def hoeffding_azuma_ratio(ctx: ExactShiftContext, K: Observable, dec: Decomposition | None = None) -> dict:
    """``E e^{K - EK}`` against ``exp(sum_p sup |D_p|^2)``."""
    dec = decompose(ctx, K) if dec is None else dec
    w = ctx.word_weights(ctx.all_words()).reshape(dec.K.shape)
    lhs = float(np.sum(w * np.exp(dec.K - dec.mean)))
    sq = float(np.sum(dec.sup_D() ** 2))
    bound = float(np.exp(sq))
    return {"lhs": lhs, "bound": bound, "ratio": lhs / bound, "sum_sup_D2": sq}


def check_hoeffding_azuma(ctx: ExactShiftContext, batch) -> float:
    """Worst ratio over a batch of observables."""
    return max(hoeffding_azuma_ratio(ctx, K)["ratio"] for K in batch)


def _fit_decay(p: np.ndarray, y: np.ndarray, floor: float) -> dict:
    sel = y > floor
    if sel.sum() < 2:
        return {"C": 0.0, "rho": 0.0, "exact_zero": True, "points": int(sel.sum())}
    coef = np.polyfit(p[sel], np.log(y[sel]), 1)
    return {"C": float(np.exp(coef[1])), "rho": float(np.exp(coef[0])), "exact_zero": False, "points": int(sel.sum())}


def difference_decay(ctx: ExactShiftContext, K: Observable, window: tuple | None = None, floor: float = 1e-13) -> dict:
    """Geometric decay of ``sup |D_p|`` for a probe observable.

    The supremum runs over every enumerated history, which covers all
    suffixes because the probe sees finitely many symbols. ``window``
    restricts the fit to ``p`` in ``[lo, hi]``; the fit reports
    ``exact_zero`` when fewer than two values exceed ``floor``.
    """
    dec = decompose(ctx, K)
    sup = dec.sup_D()
    p = np.arange(sup.size)
    lo, hi = window if window is not None else (0, sup.size - 1)
    sel = (p >= lo) & (p <= hi)
    fit = _fit_decay(p[sel], sup[sel], floor)
    fit["sup_D"] = sup
    return fit


def integral_closeness(ctx: ExactShiftContext, K: Observable, floor: float = 1e-13) -> dict:
    """``sup |K_p - E K|`` over histories for each ``p``, with a geometric fit."""
    dec = decompose(ctx, K)
    gap = np.array([float(np.max(np.abs(kp - dec.mean))) for kp in dec.Kp])
    p = np.arange(gap.size)
    fit = _fit_decay(p, gap, floor)
    fit["gap"] = gap
    return fit
