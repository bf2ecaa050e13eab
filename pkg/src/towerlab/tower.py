"""Synthetic Young towers simulated at (cell, level) resolution.

A tower has base cells ``alpha = 0..K-1`` with masses ``m_alpha`` and return
times ``phi(alpha)``. Level ``l`` of column ``alpha`` has measure
``m_alpha / Z`` with ``Z = sum_alpha m_alpha phi(alpha)``. A point climbs its
column one level per step; from the top it jumps to base cell ``alpha'``
with probability ``P0[alpha, alpha']``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from functools import cached_property, reduce

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components

from . import kernels
from .errors import InputError, InvariantViolation

POLY_EPS = 0.1


@dataclass(frozen=True)
class TailModel:
    """Tail class of the return time: ``exponential``, ``polynomial`` or ``weak``."""

    kind: str
    param: float

    def __post_init__(self):
        if self.kind == "exponential":
            if not self.param > 0:
                raise InputError("Exponential tail needs c0 > 0")
        elif self.kind == "polynomial":
            if not self.param >= 2:
                raise InputError("Polynomial tail needs q >= 2")
        elif self.kind == "weak":
            if not self.param > 2:
                raise InputError("WeakPolynomial tail needs q > 2")
        else:
            raise InputError(f"unknown tail kind {self.kind!r}")
        object.__setattr__(self, "param", float(self.param))

    @property
    def q(self) -> float:
        """Moment order carried by the tail (infinite for exponential tails)."""
        return math.inf if self.kind == "exponential" else self.param

    def weights(self, phi: np.ndarray) -> np.ndarray:
        phi = np.asarray(phi, float)
        if self.kind == "exponential":
            return np.exp(-2.0 * self.param * phi)
        if self.kind == "polynomial":
            return phi ** (-(self.param + 1.0 + POLY_EPS))
        return phi ** (-(self.param + 1.0))

    def to_dict(self) -> dict:
        return {"kind": self.kind, "param": self.param}


def Exponential(c0: float) -> TailModel:
    return TailModel("exponential", c0)


def Polynomial(q: float) -> TailModel:
    return TailModel("polynomial", q)


def WeakPolynomial(q: float) -> TailModel:
    return TailModel("weak", q)


@dataclass(frozen=True, eq=False)
class TowerSpec:
    masses: np.ndarray
    phi: np.ndarray
    P0: np.ndarray | None = None
    beta: float = 0.5
    rho: float = 0.5
    tail: TailModel | None = None

    def __post_init__(self):
        m = np.asarray(self.masses, dtype=np.float64)
        phi = np.asarray(self.phi, dtype=np.int64)
        k = m.shape[0]
        P0 = None if self.P0 is None else np.asarray(self.P0, dtype=np.float64)
        if m.ndim != 1 or k < 1 or phi.shape != (k,) or (P0 is not None and P0.shape != (k, k)):
            raise InputError("masses, phi and P0 must describe the same cells")
        if np.any(m <= 0) or np.any(phi < 1):
            raise InputError("masses must be positive and return times >= 1")
        if not (0 < self.beta < 1 and 0 < self.rho < 1):
            raise InputError("beta and rho must lie in (0, 1)")
        for name, arr in (("masses", m), ("phi", phi), ("P0", P0)):
            if arr is not None:
                arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        self.validate()

    # -- derived quantities -------------------------------------------------
    @property
    def n_cells(self) -> int:
        return self.masses.shape[0]

    @property
    def max_phi(self) -> int:
        return int(self.phi.max())

    @cached_property
    def Z(self) -> float:
        return float(np.sum(self.masses * self.phi))

    @cached_property
    def m_bar(self) -> np.ndarray:
        """Base masses normalised to a probability vector."""
        return self.masses / self.masses.sum()

    @cached_property
    def base_measure(self) -> np.ndarray:
        """Tower measure of each base cell, ``m_alpha / Z``."""
        return self.masses / self.Z

    @property
    def base_mass(self) -> float:
        return float(self.base_measure.sum())

    @property
    def rank_one(self) -> bool:
        """True when no explicit ``P0`` was given (all rows equal ``m_bar``)."""
        return self.P0 is None

    @cached_property
    def P(self) -> np.ndarray:
        """Dense induced transition matrix."""
        if self.P0 is None:
            return np.tile(self.m_bar, (self.n_cells, 1))
        return self.P0

    @cached_property
    def cum(self) -> np.ndarray:
        c = np.cumsum(self.P, axis=1)
        c[:, -1] = 1.0
        return c

    @cached_property
    def states(self) -> list[tuple[int, int]]:
        """All (cell, level) pairs in column-major order."""
        return [(a, l) for a in range(self.n_cells) for l in range(int(self.phi[a]))]

    @cached_property
    def state_offset(self) -> np.ndarray:
        return np.concatenate(([0], np.cumsum(self.phi)[:-1])).astype(np.int64)

    @cached_property
    def state_measure(self) -> np.ndarray:
        return np.repeat(self.masses, self.phi) / self.Z

    def level_mass_total(self) -> float:
        """``sum over (alpha, l)`` of the level masses; equals 1 up to rounding."""
        return math.fsum((self.masses * self.phi / self.Z).tolist())

    # -- invariants ---------------------------------------------------------
    def validate(self) -> None:
        if reduce(math.gcd, (int(v) for v in self.phi)) != 1:
            raise InvariantViolation("tower is periodic: gcd of return times exceeds 1")
        if abs(self.level_mass_total() - 1.0) > 1e-12:
            raise InvariantViolation("level masses do not sum to 1")
        if self.P0 is None:
            return
        if np.any(self.P0 < 0) or np.max(np.abs(self.P0.sum(axis=1) - 1.0)) > 1e-12:
            raise InvariantViolation("P0 must be row-stochastic within 1e-12")
        mb = self.masses / self.masses.sum()
        if np.max(np.abs(mb @ self.P0 - mb)) > 1e-12:
            raise InvariantViolation("normalised base masses are not stationary for P0")
        ncomp, _ = connected_components(csr_matrix(self.P0 > 0), directed=True, connection="strong")
        if ncomp != 1:
            raise InvariantViolation("P0 is not irreducible")

    # -- serialisation ------------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "masses": [float(v) for v in self.masses],
            "phi": [int(v) for v in self.phi],
            "P0": None if self.P0 is None else [[float(v) for v in row] for row in self.P0],
            "beta": float(self.beta),
            "rho": float(self.rho),
            "tail": None if self.tail is None else self.tail.to_dict(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, d: dict) -> "TowerSpec":
        tail = None if d.get("tail") is None else TailModel(d["tail"]["kind"], d["tail"]["param"])
        P0 = None if d.get("P0") is None else np.array(d["P0"])
        return cls(np.array(d["masses"]), np.array(d["phi"]), P0, d["beta"], d["rho"], tail)

    @classmethod
    def from_json(cls, text: str) -> "TowerSpec":
        return cls.from_dict(json.loads(text))


def single_cell_tower(beta: float = 0.5, rho: float = 0.5) -> TowerSpec:
    """Degenerate tower: one cell of height 1, i.e. the base chain itself."""
    return TowerSpec(np.array([1.0]), np.array([1]), np.array([[1.0]]), beta, rho)


def build_tower(
    tail: TailModel,
    n_cells: int,
    seed: int | None = None,
    randomized: bool = False,
    beta: float = 0.5,
    rho: float = 0.5,
    mix: float = 0.2,
) -> TowerSpec:
    """Tower with ``phi(alpha) = alpha`` and masses shaped by ``tail``.

    The default ``P0`` is rank one (every row equals the normalised masses)
    and is kept implicit, so very tall towers stay cheap.
    With ``randomized=True`` it becomes ``(1 - mix) * rank_one + mix * K``
    where ``K`` is a random Metropolis kernel reversible for the masses, so the
    stationary law and irreducibility are preserved.
    """
    if n_cells < 2:
        raise InputError("n_cells must be >= 2")
    phi = np.arange(1, n_cells + 1, dtype=np.int64)
    w = tail.weights(phi)
    masses = w / w.sum()
    P0 = None
    if randomized:
        if not (0 < mix < 1):
            raise InputError("mix must lie in (0, 1)")
        rng = np.random.default_rng(seed)
        prop = rng.random((n_cells, n_cells))
        prop = prop + prop.T
        np.fill_diagonal(prop, 0.0)
        prop /= prop.sum(axis=1).max()
        accept = np.minimum(1.0, masses[None, :] / masses[:, None])
        K = prop * accept
        np.fill_diagonal(K, 0.0)
        np.fill_diagonal(K, 1.0 - K.sum(axis=1))
        P0 = (1.0 - mix) * np.tile(masses, (n_cells, 1)) + mix * K
        P0 /= P0.sum(axis=1, keepdims=True)
    return TowerSpec(masses, phi, P0, beta, rho, tail)


def moment_partial_sums(spec: TowerSpec, q: float) -> np.ndarray:
    """Partial sums of ``sum_alpha m_alpha phi(alpha)^q`` in order of ``phi``."""
    order = np.argsort(spec.phi, kind="stable")
    return np.cumsum(spec.m_bar[order] * spec.phi[order].astype(float) ** q)


# ---------------------------------------------------------------------------
# points and single-orbit dynamics


@dataclass(frozen=True)
class TowerPoint:
    cell: int
    level: int
    seed: int = 0
    cursor: int = 0

    @property
    def height(self) -> int:
        return self.level

    @property
    def projection(self) -> tuple[int, int]:
        return (self.cell, 0)


def _counter_uniform(seed: int, cursor: int) -> float:
    bg = np.random.Philox(key=int(seed) & ((1 << 64) - 1), counter=int(cursor))
    return float(np.random.Generator(bg).random())


def tower_step(spec: TowerSpec, p: TowerPoint) -> TowerPoint:
    """Climb one level, or jump to a base cell drawn from ``P0`` at the top."""
    if not (0 <= p.cell < spec.n_cells and 0 <= p.level < spec.phi[p.cell]):
        raise InputError(f"invalid tower point {p}")
    if p.level + 1 < spec.phi[p.cell]:
        return TowerPoint(p.cell, p.level + 1, p.seed, p.cursor)
    u = _counter_uniform(p.seed, p.cursor)
    nxt = int(min(np.searchsorted(spec.cum[p.cell], u, side="right"), spec.n_cells - 1))
    return TowerPoint(nxt, 0, p.seed, p.cursor + 1)


def tower_orbit(spec: TowerSpec, p: TowerPoint, n: int) -> list[TowerPoint]:
    """``[p, T p, ..., T^n p]``."""
    out = [p]
    for _ in range(n):
        out.append(tower_step(spec, out[-1]))
    return out


def psi_count(spec: TowerSpec, p: TowerPoint, n: int) -> tuple[int, float]:
    """Base visits at times ``0..n-1`` and the penalty ``rho ** visits``."""
    if n < 0:
        raise InputError("n must be >= 0")
    pts = tower_orbit(spec, p, max(n - 1, 0)) if n > 0 else []
    visits = sum(1 for q in pts if q.level == 0)
    return visits, spec.rho**visits


def phi_fn(spec: TowerSpec, p: TowerPoint, n: int) -> float:
    """``beta ** #{1 <= j <= n : T^j p in base}`` for base points, else 0."""
    if n < 0:
        raise InputError("n must be >= 0")
    if p.level != 0:
        return 0.0
    pts = tower_orbit(spec, p, n)[1:]
    returns = sum(1 for q in pts if q.level == 0)
    return spec.beta**returns


@dataclass(frozen=True)
class Separation:
    steps: int
    censored: bool


def separation_time(spec: TowerSpec, traj_a, traj_b, mode: str = "uniform") -> Separation:
    """Separation time of two cell itineraries that both start at height 0.

    ``traj_a[t]`` is the cell of the partition element visited at step ``t``.
    Uniform mode counts steps until the itineraries differ; nonuniform mode
    counts returns to the base (including time 0) before that step.
    """
    a = [int(v) for v in traj_a]
    b = [int(v) for v in traj_b]
    if len(a) != len(b):
        raise InputError("trajectories must have equal length")
    if mode not in ("uniform", "nonuniform"):
        raise InputError(f"unknown separation mode {mode!r}")
    n = len(a)
    diff = next((t for t in range(n) if a[t] != b[t]), n)
    censored = diff == n
    if mode == "uniform":
        return Separation(diff, censored)
    visits = 0
    t = 0
    while t < diff:
        visits += 1
        t += int(spec.phi[a[t]])
    return Separation(visits, censored)


# ---------------------------------------------------------------------------
# batch simulation


def sample_points(spec: TowerSpec, rng: np.random.Generator, size: int) -> tuple[np.ndarray, np.ndarray]:
    """Exact draws ``(cell, level)`` from the tower measure."""
    w = spec.masses * spec.phi
    cells = rng.choice(spec.n_cells, size=size, p=w / w.sum())
    levels = np.floor(rng.random(size) * spec.phi[cells]).astype(np.int64)
    np.minimum(levels, spec.phi[cells] - 1, out=levels)
    return cells.astype(np.int64), levels


def sample_base_points(spec: TowerSpec, rng: np.random.Generator, size: int) -> np.ndarray:
    """Base cells drawn from the normalised base masses."""
    return rng.choice(spec.n_cells, size=size, p=spec.m_bar).astype(np.int64)


def walk(spec: TowerSpec, rng: np.random.Generator, cells: np.ndarray, levels: np.ndarray, n: int):
    """Advance a batch ``n`` steps; returns (base indicator, cell) for times 0..n."""
    u = rng.random((cells.shape[0], int(n)))
    return kernels.tower_walk(spec.phi, spec.cum, np.asarray(cells, np.int64), np.asarray(levels, np.int64), u)
