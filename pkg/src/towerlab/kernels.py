"""Hot loops with two interchangeable implementations.

Each kernel exists as ``<name>_numba`` (compiled scalar loops) and
``<name>_numpy`` (vectorised over the batch axis, Python loop over time).
The unsuffixed public name is bound to one of them according to
:data:`towerlab._accel.USE_NUMBA`. Random inputs are always generated outside
the kernels so both backends consume identical numbers.
"""

from __future__ import annotations

import numpy as np

from ._accel import USE_NUMBA, njit

# ---------------------------------------------------------------------------
# intermittent map orbits


@njit
def _intermittent_orbits_numba(x0, alpha, n):
    b = x0.shape[0]
    out = np.empty((b, n))
    c = 2.0**alpha
    for i in range(b):
        y = x0[i]
        for k in range(n):
            out[i, k] = y
            if y <= 0.5:
                y = y * (1.0 + c * y**alpha)
            else:
                y = 2.0 * y - 1.0
            if y > 1.0:
                y = 1.0
            elif y < 0.0:
                y = 0.0
    return out


def _intermittent_orbits_numpy(x0, alpha, n):
    y = np.array(x0, dtype=np.float64, copy=True)
    out = np.empty((y.shape[0], n))
    c = 2.0**alpha
    for k in range(n):
        out[:, k] = y
        left = y <= 0.5
        y = np.where(left, y * (1.0 + c * y**alpha), 2.0 * y - 1.0)
        np.clip(y, 0.0, 1.0, out=y)
    return out


@njit
def _intermittent_burn_numba(x0, alpha, steps):
    b = x0.shape[0]
    out = np.empty(b)
    c = 2.0**alpha
    for i in range(b):
        y = x0[i]
        for _ in range(steps):
            if y <= 0.5:
                y = y * (1.0 + c * y**alpha)
            else:
                y = 2.0 * y - 1.0
            if y > 1.0:
                y = 1.0
            elif y < 0.0:
                y = 0.0
        out[i] = y
    return out


def _intermittent_burn_numpy(x0, alpha, steps):
    y = np.array(x0, dtype=np.float64, copy=True)
    c = 2.0**alpha
    for _ in range(steps):
        y = np.where(y <= 0.5, y * (1.0 + c * y**alpha), 2.0 * y - 1.0)
        np.clip(y, 0.0, 1.0, out=y)
    return y


@njit
def _return_times_numba(x, alpha, cap):
    """First return to [1/2, 1]; ``cap + 1`` marks a stalled orbit."""
    b = x.shape[0]
    out = np.empty(b, np.int64)
    c = 2.0**alpha
    for i in range(b):
        y = x[i]
        k = 0
        while True:
            if y <= 0.5:
                y = y * (1.0 + c * y**alpha)
            else:
                y = 2.0 * y - 1.0
            if y > 1.0:
                y = 1.0
            elif y < 0.0:
                y = 0.0
            k += 1
            if y >= 0.5:
                break
            if k >= cap:
                k = cap + 1
                break
        out[i] = k
    return out


def _return_times_numpy(x, alpha, cap):
    y = np.array(x, dtype=np.float64, copy=True)
    out = np.zeros(y.shape[0], np.int64)
    active = np.arange(y.shape[0])
    c = 2.0**alpha
    k = 0
    while active.size:
        ya = y[active]
        ya = np.where(ya <= 0.5, ya * (1.0 + c * ya**alpha), 2.0 * ya - 1.0)
        np.clip(ya, 0.0, 1.0, out=ya)
        y[active] = ya
        k += 1
        done = ya >= 0.5
        out[active[done]] = k
        active = active[~done]
        if k >= cap and active.size:
            out[active] = cap + 1
            break
    return out


# ---------------------------------------------------------------------------
# doubling map orbits from a fair-bit stream


@njit
def _doubling_orbits_numba(bits, n):
    # x_j = sum_{k<53} bits[j+k] 2^{-(k+1)}, held exactly as a 53-bit integer
    b = bits.shape[0]
    out = np.empty((b, n))
    mask = (np.int64(1) << 53) - 1
    scale = 2.0**-53
    for i in range(b):
        v = np.int64(0)
        for k in range(53):
            v = (v << 1) | np.int64(bits[i, k])
        for j in range(n):
            out[i, j] = v * scale
            v = ((v << 1) & mask) | np.int64(bits[i, j + 53])
    return out


def _doubling_orbits_numpy(bits, n):
    b = bits.shape[0]
    out = np.empty((b, n))
    mask = np.int64((1 << 53) - 1)
    v = np.zeros(b, np.int64)
    for k in range(53):
        v = (v << 1) | bits[:, k].astype(np.int64)
    scale = 2.0**-53
    for j in range(n):
        out[:, j] = v * scale
        v = ((v << 1) & mask) | bits[:, j + 53].astype(np.int64)
    return out


# ---------------------------------------------------------------------------
# cell-level tower walks


@njit
def _tower_walk_numba(phi, cum, cell0, level0, u):
    """Walk ``u.shape[1]`` steps; returns (base indicator, cell) for times 0..n."""
    b, n = u.shape
    ncell = cum.shape[1]
    base = np.zeros((b, n + 1), np.uint8)
    cells = np.empty((b, n + 1), np.int32)
    for i in range(b):
        a = cell0[i]
        lv = level0[i]
        for t in range(n + 1):
            cells[i, t] = a
            if lv == 0:
                base[i, t] = 1
            if t == n:
                break
            lv += 1
            if lv >= phi[a]:
                x = u[i, t]
                k = 0
                while k < ncell - 1 and cum[a, k] <= x:
                    k += 1
                a = k
                lv = 0
    return base, cells


def _tower_walk_numpy(phi, cum, cell0, level0, u):
    b, n = u.shape
    ncell = cum.shape[1]
    a = np.array(cell0, dtype=np.int64, copy=True)
    lv = np.array(level0, dtype=np.int64, copy=True)
    base = np.zeros((b, n + 1), np.uint8)
    cells = np.empty((b, n + 1), np.int32)
    for t in range(n + 1):
        cells[:, t] = a
        base[:, t] = lv == 0
        if t == n:
            break
        lv += 1
        top = lv >= phi[a]
        if top.any():
            idx = np.nonzero(top)[0]
            rows = cum[a[idx]]
            k = (rows[:, : ncell - 1] <= u[idx, t][:, None]).sum(axis=1)
            a[idx] = k
            lv[idx] = 0
    return base, cells


# ---------------------------------------------------------------------------
# renewal-type matrix recursion  X_n = rho * sum_{j=1}^{min(n,J)} R_j X_{n-j}


@njit
def _renewal_numba(R, n_max, rho):
    jmax, k, _ = R.shape
    jmax -= 1
    out = np.zeros((n_max + 1, k, k))
    for i in range(k):
        out[0, i, i] = 1.0
    for n in range(1, n_max + 1):
        top = min(n, jmax)
        for j in range(1, top + 1):
            out[n] += R[j] @ out[n - j]
        out[n] *= rho
    return out


def _renewal_numpy(R, n_max, rho):
    jmax = R.shape[0] - 1
    k = R.shape[1]
    out = np.zeros((n_max + 1, k, k))
    out[0] = np.eye(k)
    for n in range(1, n_max + 1):
        top = min(n, jmax)
        # R[1..top] against out[n-1 .. n-top]
        hist = out[n - top : n][::-1]
        out[n] = rho * np.einsum("jab,jbc->ac", R[1 : top + 1], hist)
    return out


# ---------------------------------------------------------------------------
# triangular-kernel density sums  sum_j max(0, 1 - |s - x_j| / a)


@njit
def _tri_kde_numba(xs, grid, a):
    # xs sorted ascending; two-pointer window scan
    out = np.zeros(grid.shape[0])
    n = xs.shape[0]
    lo = 0
    for g in range(grid.shape[0]):
        s = grid[g]
        while lo < n and xs[lo] <= s - a:
            lo += 1
        acc = 0.0
        j = lo
        while j < n and xs[j] < s + a:
            acc += 1.0 - abs(s - xs[j]) / a
            j += 1
        out[g] = acc
    return out


def _tri_kde_numpy(xs, grid, a):
    csum = np.concatenate(([0.0], np.cumsum(xs)))
    i_lo = np.searchsorted(xs, grid - a, side="right")
    i_mid = np.searchsorted(xs, grid, side="right")
    i_hi = np.searchsorted(xs, grid + a, side="left")
    nl = i_mid - i_lo
    nr = i_hi - i_mid
    sl = csum[i_mid] - csum[i_lo]
    sr = csum[i_hi] - csum[i_mid]
    left = nl - (nl * grid - sl) / a
    right = nr - (sr - nr * grid) / a
    return left + right


# ---------------------------------------------------------------------------
# backward accumulation for the weighted base-visit functional
#   S_r = L_r + beta^{b_{r+1}} S_{r+1},   G = sum_r (b_r S_r)^2


@njit
def _visit_functional_numba(base, L, beta):
    b, m = base.shape
    nl = L.shape[0]
    out = np.empty(b)
    for i in range(b):
        s = 0.0
        g = 0.0
        for r in range(nl - 1, -1, -1):
            if r + 1 < m and r + 1 < nl and base[i, r + 1]:
                s = L[r] + beta * s
            else:
                s = L[r] + s
            if base[i, r]:
                g += s * s
        out[i] = g
    return out


def _visit_functional_numpy(base, L, beta):
    b, m = base.shape
    nl = L.shape[0]
    s = np.zeros(b)
    g = np.zeros(b)
    for r in range(nl - 1, -1, -1):
        if r + 1 < m and r + 1 < nl:
            fac = np.where(base[:, r + 1] != 0, beta, 1.0)
            s = L[r] + fac * s
        else:
            s = L[r] + s
        g = g + np.where(base[:, r] != 0, s * s, 0.0)
    return g


_KERNELS = (
    "intermittent_orbits",
    "intermittent_burn",
    "return_times",
    "doubling_orbits",
    "tower_walk",
    "renewal",
    "tri_kde",
    "visit_functional",
)


def _bind():
    g = globals()
    suffix = "_numba" if USE_NUMBA else "_numpy"
    for name in _KERNELS:
        g[name] = g["_" + name + suffix]


_bind()

__all__ = list(_KERNELS)
