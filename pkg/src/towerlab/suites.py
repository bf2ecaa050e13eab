"""Self-checking experiment suites with fixed thresholds.

Every suite takes ``(seed, threads)`` and returns a plain dict of floats,
ints, bools and lists. Nothing in a report depends on wall time or on the
worker count, so two runs with the same seed serialize to identical JSON.
Each report carries a ``checks`` mapping of named pass/fail flags.
"""

from __future__ import annotations

import json

import numpy as np

from . import concentration as conc
from . import martingale as mg
from . import rng as rngmod
from . import seqcalc as sc
from . import transfer as tr
from .dynamics import DoublingMap, IntermittentMap, ShiftSystem, fit_return_tail, orbit_batch, return_time_samples
from .errors import InvariantViolation
from .observables import UniformCDF, birkhoff, cosine, dn_curve, identity, integrated_periodogram, periodogram_quadrature, sup_periodogram_gap
from .tower import Exponential, Polynomial, build_tower, single_cell_tower


def to_jsonable(obj):
    """Recursively convert numpy containers and scalars to builtins."""
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return to_jsonable(obj.tolist())
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    return obj


def canonical_json(report: dict) -> str:
    return json.dumps(to_jsonable(report), sort_keys=True, allow_nan=True)


def _fit_slope(x, y) -> float:
    return float(np.polyfit(np.log(np.asarray(x, float)), np.log(np.asarray(y, float)), 1)[0])


# ---------------------------------------------------------------------------


def martingale_suite(seed: int = 0, threads: int = 1, n_obs: int = 100, depth: int = 6) -> dict:
    """Exact decompositions of random observables on the fair coin shift."""
    shift = ShiftSystem.bernoulli(0.5)
    g = rngmod.stream(seed, "martingale-suite")
    mart = []
    tele = []
    tower = []
    ratios = []
    arities = []
    for _ in range(n_obs):
        n = int(g.integers(2, 11))
        ctx = mg.ExactShiftContext(shift, n, depth=depth)
        K = mg.random_observable(ctx, g)
        dec = mg.decompose(ctx, K)
        mart.append(mg.martingale_residual(dec))
        tele.append(mg.telescoping_residual(dec))
        tower.append(mg.tower_residual(ctx, K, dec, g, draws=5))
        ratios.append(mg.hoeffding_azuma_ratio(ctx, K, dec)["ratio"])
        arities.append(n)
    out = {
        "observables": n_obs,
        "arity": arities,
        "max_martingale_residual": max(mart),
        "max_telescoping_residual": max(tele),
        "max_tower_residual": max(tower),
        "max_ha_ratio": max(ratios),
        "ha_ratio": ratios,
    }
    out["checks"] = {
        "martingale_residual": out["max_martingale_residual"] < 1e-12,
        "telescoping_residual": out["max_telescoping_residual"] < 1e-12,
        "hoeffding_azuma": out["max_ha_ratio"] <= 1.0,
    }
    return out


def decomposition_suite(seed: int = 0, threads: int = 1, n_max: int = 20) -> dict:
    """Renewal identity against powers of the full tower matrix."""
    rows = []
    for tail in (Polynomial(2.0), Exponential(1.0)):
        for cells in (2, 5, 20, 50):
            for randomized in (False, True):
                spec = build_tower(tail, cells, seed=seed, randomized=randomized)
                res = max(tr.check_decomposition(spec, n) for n in range(n_max + 1))
                rows.append({"tail": tail.kind, "cells": cells, "randomized": randomized, "residual": res})
    one = single_cell_tower()
    rows.append({"tail": "single", "cells": 1, "randomized": False, "residual": max(tr.check_decomposition(one, n) for n in range(n_max + 1))})
    worst = max(r["residual"] for r in rows)
    return {"rows": rows, "max_residual": worst, "checks": {"renewal_identity": worst < 1e-10}}


def decay_suite(seed: int = 0, threads: int = 1, n_max: int = 2**12) -> dict:
    """Geometric decay for exponential tails, moment stability for polynomial."""
    spec_e = build_tower(Exponential(1.0), 20)
    Te = tr.renewal_T(tr.first_return_ops(spec_e), 64)
    de = tr.op_decay_diagnostics(Te, spec_e)
    spec_p = build_tower(Polynomial(2.0), 50)
    Tp = tr.renewal_T(tr.first_return_ops(spec_p), n_max)
    dp = tr.op_decay_diagnostics(Tp, spec_p)
    geo = de["geometric_fit"]
    out = {
        "exponential": {"geometric_fit": geo, "dist_Pi": de["dist_Pi"][:25]},
        "polynomial": {
            "q": dp["q"],
            "n_max": n_max,
            "increment_diff": dp["increment_diff"],
            "increment_dist": dp["increment_dist"],
            "partial_diff_last": dp["partial_diff"][-1],
            "dist_Pi_sample": dp["dist_Pi"][[1, 10, 100, 1000, n_max]],
        },
    }
    out["checks"] = {
        "exponential_r2": geo["r2"] >= 0.99,
        "exponential_slope_negative": geo["slope"] < 0,
        "polynomial_stable": dp["increment_diff"] < sc.STABILITY_TOL,
    }
    return out


PSI_PROBES = (2, 4, 8, 16, 32)


def psi_suite(seed: int = 0, threads: int = 1, samples: int = 10**6) -> dict:
    """Operator-route base-visit penalty integral against Monte Carlo."""
    spec = build_tower(Polynomial(2.0), 50)
    op = tr.full_psi_integral(spec, 128)
    fit_n = np.array(PSI_PROBES)
    slope = _fit_slope(fit_n, op[fit_n])
    mc = tr.psi_integral_mc(spec, PSI_PROBES, samples, seed, threads)
    z = (mc["mean"] - op[list(PSI_PROBES)]) / mc["stderr"]
    out = {
        "q": 2.0,
        "fit_n": fit_n,
        "decay_exponent": -slope,
        "probes": list(PSI_PROBES),
        "operator": op[list(PSI_PROBES)],
        "mc_mean": mc["mean"],
        "mc_stderr": mc["stderr"],
        "z": z,
    }
    out["checks"] = {"decay_exponent": -slope >= 2.0 - 0.3, "mc_agreement": bool(np.all(np.abs(z) <= 3.0))}
    return out


def return_tail_suite(seed: int = 0, threads: int = 1, returns: int = 10**6, alphas=(0.3, 0.5), cap: int = 10**7) -> dict:
    """Tail exponent of intermittent return times from uniform base points."""
    rows = []
    for a in alphas:
        m = IntermittentMap(a)

        def chunk(ci, start, stop, m=m):
            return return_time_samples(m, rngmod.stream(seed, f"returns:{a}", ci), stop - start, cap)

        r = rngmod.concat(rngmod.map_chunks(chunk, returns, threads, chunk=2**16))
        stalled = int(np.sum(r > cap))
        fit = fit_return_tail(r[r <= cap])
        target = 1.0 / a + 1.0
        rows.append(
            {
                "alpha": a,
                "returns": returns,
                "stalled": stalled,
                "exponent": float(fit.exponent),
                "target": target,
                "r2": fit.r2,
                "points": fit.n_points,
                "pass": abs(fit.exponent - target) <= 0.15 and stalled <= 0.01 * returns,
            }
        )
    return {"rows": rows, "checks": {f"alpha={r['alpha']}": r["pass"] for r in rows}}


def concentration_suite(seed: int = 0, threads: int = 1, n: int = 2**10, trials: int = 10**4) -> dict:
    """Exponential tails for doubling, polynomial tails for intermittent sums."""
    dbl = conc.DeviationExperiment(
        DoublingMap(), lambda k: birkhoff(cosine(), k), [n], trials,
        t_grid_sd=np.linspace(0.05, 5.0, 200), master_seed=seed, regime="exp", label="doubling",
    )
    rd = conc.run_deviation(dbl, threads)["results"][0]
    inter = conc.DeviationExperiment(
        IntermittentMap(0.4), lambda k: birkhoff(identity(), k), [n], trials,
        t_grid_sd=np.geomspace(0.05, 20.0, 300), master_seed=seed, regime="poly", Q=3.0, label="intermittent",
    )
    ri = conc.run_deviation(inter, threads)["results"][0]
    keep = ("fit", "weak_norm", "bound_C", "bound_dominates_test", "sd", "centre")
    out = {"doubling": {k: rd[k] for k in keep}, "intermittent": {k: ri[k] for k in keep}}
    out["checks"] = {
        "doubling_exp_regime": rd["fit"] is not None and rd["fit"]["r2"] >= 0.95 and rd["fit"]["slope"] < 0,
        "intermittent_exponent": ri["fit"] is not None and ri["fit"]["exponent"] >= 2.0,
    }
    return out


def kantorovich_suite(seed: int = 0, threads: int = 1, trials: int = 200, ulam_grid: int = 2**14) -> dict:
    """Mean ``D_n`` slopes; the intermittent reference comes from Ulam's method."""
    n_list = [2**k for k in range(8, 17)]
    d = dn_curve(DoublingMap(), n_list, trials, seed, UniformCDF(), threads)
    op = tr.ulam_build(IntermittentMap(0.3), ulam_grid)
    i = dn_curve(IntermittentMap(0.3), n_list, trials, seed, op.cdf(), threads)
    sd = _fit_slope(n_list, d["mean"])
    si = _fit_slope(n_list, i["mean"])
    out = {
        "n": n_list,
        "doubling": {"mean": d["mean"], "stderr": d["stderr"], "slope": sd},
        "intermittent": {"mean": i["mean"], "stderr": i["stderr"], "slope": si, "ulam_iterations": op.iterations},
    }
    out["checks"] = {"doubling_slope": -0.55 <= sd <= -0.40, "intermittent_slope": si <= -0.25}
    return out


def periodogram_suite(seed: int = 0, threads: int = 1, signals: int = 100, trials: int = 64, n: int = 2**14) -> dict:
    """Closed-form integrated periodogram against quadrature, and the doubling limit."""
    g = rngmod.stream(seed, "periodogram-signals")
    errs = []
    for _ in range(signals):
        m = int(g.integers(2, 257))
        f = g.standard_normal(m)
        w = float(g.uniform(0.0, 2 * np.pi))
        errs.append(abs(integrated_periodogram(f, w)["J"] - periodogram_quadrature(f, w)))
    f = cosine()
    C = np.array([0.5])

    def chunk(ci, start, stop):
        orb = orbit_batch(DoublingMap(), rngmod.stream(seed, "periodogram-doubling", ci), stop - start, n)
        return np.array([sup_periodogram_gap(f(row), C)["gap"] for row in orb])

    gaps = rngmod.concat(rngmod.map_chunks(chunk, trials, threads, chunk=8))
    out = {
        "max_quadrature_error": max(errs),
        "sup_gap_mean": float(gaps.mean()),
        "sup_gap_max": float(gaps.max()),
        "n": n,
        "trials": trials,
        "omega_grid": 256,
    }
    out["checks"] = {"closed_form": out["max_quadrature_error"] <= 1e-8, "doubling_limit": out["sup_gap_mean"] <= 0.05}
    return out


def seqcalc_suite(seed: int = 0, threads: int = 1, instances: int = 1000, kmax: int = 64) -> dict:
    """Window-sum bound and weight domination over random instances."""
    g = rngmod.stream(seed, "seqcalc-suite")
    window_viol = 0
    dom_viol = 0
    worst = -np.inf
    for _ in range(instances):
        w = sc.random_weight_system(g)
        m = int(g.integers(1, w.horizon))
        try:
            sc.weight_sum_over_r(w, m)
        except InvariantViolation:
            window_viol += 1
    for _ in range(instances):
        u = sc.random_weight_system(g)
        c = sc.random_order1_sequence(g)
        v = sc.build_weight_v(u, c, check_kmax=None)
        excess = sc.domination_violation(u, c, v, kmax)
        worst = max(worst, excess)
        dom_viol += excess > 0
    out = {"instances": instances, "window_violations": window_viol, "domination_violations": int(dom_viol), "worst_excess": float(worst)}
    out["checks"] = {"window_sum": window_viol == 0, "domination": dom_viol == 0}
    return out


def appendix_suite(seed: int = 0, threads: int = 1, profiles: int = 50, trials: int = 20_000, support: int = 32) -> dict:
    """Weighted base-visit functional: homogeneity and profile stability."""
    spec = build_tower(Polynomial(2.0), 50)
    g = rngmod.stream(seed, "appendix-profiles")
    ratios = []
    for _ in range(profiles):
        L = conc.random_profile(g, support)
        ratios.append(conc.visit_functional_moment_mc(spec, L, trials, seed=seed, threads=threads)["ratio"])
    ratios = np.array(ratios)
    L = conc.random_profile(g, support)
    a = conc.visit_functional_moment_mc(spec, L, trials, seed=seed, threads=threads)["ratio"]
    b = conc.visit_functional_moment_mc(spec, 7.3 * L, trials, seed=seed, threads=threads)["ratio"]
    centre = float(ratios.mean())
    spread = float(np.max(np.abs(ratios - centre)) / centre)
    out = {
        "ratios": ratios,
        "mean_ratio": centre,
        "max_relative_spread": spread,
        "scaling_relative_error": abs(a - b) / abs(a),
    }
    out["checks"] = {"scaling_invariance": out["scaling_relative_error"] <= 1e-10, "profile_stability": spread <= 0.20}
    return out


SUITES = {
    "martingale": martingale_suite,
    "decomposition": decomposition_suite,
    "decay": decay_suite,
    "psi": psi_suite,
    "return_tails": return_tail_suite,
    "concentration": concentration_suite,
    "kantorovich": kantorovich_suite,
    "periodogram": periodogram_suite,
    "seqcalc": seqcalc_suite,
    "appendix": appendix_suite,
}
