"""Batch runner: ``towerlab <subcommand> --config run.toml``.

Every run writes ``report.json`` (deterministic), ``runtime.json`` (wall
time, worker count, backend), ``effective_config.toml``, ``tables/*.csv``
and ``plots/*.dat`` into the output directory. Exit codes: 0 success,
1 input or configuration error, 2 violated invariant. Errors go to stderr
as one JSON line ``{"code": ..., "message": ...}``.
"""

from __future__ import annotations

import argparse
import copy
import csv
import json
import math
import os
import sys
import time
from pathlib import Path

import numpy as np
import tomli_w

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import _accel
from . import concentration as conc
from . import martingale as mg
from . import rng as rngmod
from . import seqcalc as sc
from . import transfer as tr
from .dynamics import DoublingMap, IntermittentMap, ShiftSystem, fit_return_tail, generate_orbit, orbit_batch, return_time_samples, sample_invariant
from .errors import InputError, InvariantViolation, TowerlabError
from .observables import (
    UniformCDF,
    autocovariance_reference,
    birkhoff,
    center,
    cosine,
    dn_curve,
    empirical_covariance,
    empirical_measure_observable,
    identity,
    KernelSpec,
    kde_estimate,
    l1_on_grid,
    periodogram_sup_observable,
    sup_periodogram_gap,
)
from .suites import to_jsonable
from .tower import Exponential, Polynomial, TowerSpec, WeakPolynomial, build_tower, moment_partial_sums

SCHEMA_VERSION = "towerlab.report/1"
SUBCOMMANDS = (
    "orbit",
    "tower-build",
    "operator-diagnostics",
    "martingale-verify",
    "deviation",
    "estimator",
    "seq-check",
    "appendix-mc",
)

_NUM = (int, float)
REQUIRED = object()

# (default, accepted types); a default of REQUIRED must be supplied
SCHEMA: dict[str, dict[str, tuple]] = {
    "system": {
        "kind": ("auto", (str,)),
        "alpha": (0.4, _NUM),
        "symbols": (2, (int,)),
        "p1": (0.5, _NUM),
        "beta": (0.5, _NUM),
        "word_length": (64, (int,)),
        "tail": ("polynomial", (str,)),
        "tail_param": (2.0, _NUM),
        "cells": (50, (int,)),
        "randomized": (False, (bool,)),
        "mix": (0.2, _NUM),
        "rho": (0.5, _NUM),
        "tower_seed": (0, (int,)),
    },
    "observable": {
        "kind": ("birkhoff", (str,)),
        "function": ("cos", (str,)),
        "freq": (1.0, _NUM),
        "centred": (False, (bool,)),
        "lag": (1, (int,)),
        "omega_points": (256, (int,)),
        "depth": (6, (int,)),
    },
    "experiment": {
        "master_seed": (REQUIRED, (int,)),
        "n": (1024, (int,)),
        "n_list": ([1024], (list,)),
        "trials": (10_000, (int,)),
        "x0": ("invariant", (str, int, float)),
        "burn_in": (10_000, (int,)),
        "t_grid": ("auto", (str, list)),
        "t_scale": ("sd", (str,)),
        "centering": ("empirical-mean", (str,)),
        "reference_value": (0.0, _NUM),
        "regime": ("exp", (str,)),
        "Q": (2.0, _NUM),
        "n_max": (4096, (int,)),
        "n_check": (20, (int,)),
        "psi_samples": (0, (int,)),
        "estimator": ("kantorovich", (str,)),
        "kernel_exponent": (0.2, _NUM),
        "grid": (4096, (int,)),
        "returns": (1_000_000, (int,)),
        "cap": (10_000_000, (int,)),
        "observables": (100, (int,)),
        "instances": (1000, (int,)),
        "kmax": (64, (int,)),
        "profiles": (50, (int,)),
        "support": (32, (int,)),
        "orbit_len": (0, (int,)),
    },
    "output": {
        "tables": (True, (bool,)),
        "plots": (True, (bool,)),
    },
}


class ConfigError(InputError):
    pass


# ---------------------------------------------------------------------------
# configuration


def _check_type(section: str, key: str, value, types):
    if isinstance(value, bool) and bool not in types:
        raise ConfigError(f"{section}.{key}: expected {types[0].__name__}, got bool", code="CONFIG_TYPE")
    if not isinstance(value, types):
        raise ConfigError(f"{section}.{key}: expected {'/'.join(t.__name__ for t in types)}, got {type(value).__name__}", code="CONFIG_TYPE")


def _parse_value(text: str):
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


def apply_overrides(raw: dict, overrides: list[str]) -> dict:
    """Apply ``section.key=value`` overrides; values parse as TOML literals."""
    out = copy.deepcopy(raw)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value", code="CONFIG_OVERRIDE")
        path, value = item.split("=", 1)
        parts = path.strip().split(".")
        if len(parts) != 2:
            raise ConfigError(f"override path {path!r} must be section.key", code="CONFIG_OVERRIDE")
        out.setdefault(parts[0], {})[parts[1]] = _parse_value(value.strip())
    return out


def materialize(raw: dict) -> dict:
    """Strict schema check plus defaults; the result is the effective config."""
    eff = {}
    for section in raw:
        if section not in SCHEMA:
            raise ConfigError(f"unknown section [{section}]", code="CONFIG_UNKNOWN_KEY")
        if not isinstance(raw[section], dict):
            raise ConfigError(f"[{section}] must be a table", code="CONFIG_TYPE")
    for section, fields in SCHEMA.items():
        given = raw.get(section, {})
        for key in given:
            if key not in fields:
                raise ConfigError(f"unknown key {section}.{key}", code="CONFIG_UNKNOWN_KEY")
        eff[section] = {}
        for key, (default, types) in fields.items():
            if key in given:
                value = given[key]
                _check_type(section, key, value, types)
            elif default is REQUIRED:
                raise ConfigError(f"missing required key {section}.{key}", code="CONFIG_MISSING_KEY")
            else:
                value = copy.deepcopy(default)
            eff[section][key] = value
    return eff


def load_config(path: str | None, overrides: list[str], seed: int | None = None) -> dict:
    raw = {}
    if path is not None:
        try:
            with open(path, "rb") as fh:
                raw = tomllib.load(fh)
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}", code="CONFIG_NOT_FOUND") from exc
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"config parse error: {exc}", code="CONFIG_PARSE") from exc
    raw = apply_overrides(raw, overrides)
    if seed is not None:
        raw.setdefault("experiment", {})["master_seed"] = int(seed)
    return materialize(raw)


# ---------------------------------------------------------------------------
# builders


AUTO_KIND = {"martingale-verify": "shift", "tower-build": "tower", "operator-diagnostics": "tower", "appendix-mc": "tower"}


def make_system(s: dict, subcommand: str = ""):
    """System from the ``[system]`` table; ``kind = "auto"`` picks the
    subcommand's natural system (doubling map unless noted in ``AUTO_KIND``)."""
    kind = s["kind"]
    if kind == "auto":
        kind = AUTO_KIND.get(subcommand, "doubling")
    if kind == "doubling":
        return DoublingMap()
    if kind == "intermittent":
        return IntermittentMap(float(s["alpha"]))
    if kind == "shift":
        k = s["symbols"]
        if k == 2:
            return ShiftSystem.bernoulli(float(s["p1"]), beta=float(s["beta"]), word_length=s["word_length"])
        return ShiftSystem(k, probs=np.full(k, 1.0 / k), beta=float(s["beta"]), word_length=s["word_length"])
    if kind == "tower":
        return make_tower({**s, "kind": "tower"})
    raise ConfigError(f"unknown system kind {kind!r}", code="CONFIG_VALUE")


def make_tower(s: dict) -> TowerSpec:
    if s["kind"] not in ("auto", "tower"):
        raise ConfigError(f"this subcommand needs a tower, not {s['kind']!r}", code="CONFIG_VALUE")
    tails = {"polynomial": Polynomial, "exponential": Exponential, "weak": WeakPolynomial}
    if s["tail"] not in tails:
        raise ConfigError(f"unknown tail {s['tail']!r}", code="CONFIG_VALUE")
    return build_tower(
        tails[s["tail"]](float(s["tail_param"])),
        s["cells"],
        seed=s["tower_seed"],
        randomized=s["randomized"],
        beta=float(s["beta"]),
        rho=float(s["rho"]),
        mix=float(s["mix"]),
    )


def make_function(o: dict, system=None):
    if o["function"] == "cos":
        f = cosine(float(o["freq"]))
    elif o["function"] == "identity":
        f = identity()
    else:
        raise ConfigError(f"unknown function {o['function']!r}", code="CONFIG_VALUE")
    if o["centred"] and isinstance(system, (DoublingMap, IntermittentMap)):
        f = center(system, f)
    return f


def reference_cdf(system, grid: int):
    if isinstance(system, DoublingMap):
        return UniformCDF()
    if isinstance(system, IntermittentMap):
        return tr.ulam_build(system, grid).cdf()
    raise ConfigError("a reference distribution needs an interval map", code="CONFIG_VALUE")


def make_family(cfg: dict, system):
    o = cfg["observable"]
    kind = o["kind"]
    if isinstance(system, TowerSpec):
        if kind != "birkhoff":
            raise ConfigError("tower systems support birkhoff observables of the base indicator", code="CONFIG_VALUE")
        return lambda n: birkhoff(identity(), n)
    f = make_function(o, system)
    if kind == "birkhoff":
        return lambda n: birkhoff(f, n)
    if kind == "covariance":
        return lambda n: empirical_covariance(f, n, o["lag"])
    if kind == "periodogram":
        return lambda n: periodogram_sup_observable(f, n, o["omega_points"])
    if kind == "empirical-measure":
        ref = reference_cdf(system, cfg["experiment"]["grid"])
        return lambda n: empirical_measure_observable(n, ref)
    raise ConfigError(f"unknown observable kind {kind!r}", code="CONFIG_VALUE")


def series(x, y, x_label: str, y_label: str) -> dict:
    return {"x_label": x_label, "y_label": y_label, "x": list(np.asarray(x, float)), "y": list(np.asarray(y, float))}


# ---------------------------------------------------------------------------
# subcommands; each returns (results, tables, series)


def cmd_orbit(cfg, threads):
    e = cfg["experiment"]
    system = make_system(cfg["system"])
    seed = e["master_seed"]
    if isinstance(system, TowerSpec):
        raise ConfigError("orbit needs a map or shift system", code="CONFIG_VALUE")
    x0 = e["x0"]
    if x0 == "invariant":
        x0 = sample_invariant(system, seed, e["burn_in"])
    elif isinstance(x0, str):
        raise ConfigError("x0 must be 'invariant' or a number", code="CONFIG_VALUE")
    orb = generate_orbit(system, x0, e["n"], seed)
    pts = orb.as_array()
    if pts.ndim > 1:
        # shift points are words; report the value of the leading symbols
        vals = pts[:, : min(pts.shape[1], 52)] @ (0.5 ** np.arange(1, min(pts.shape[1], 52) + 1))
    else:
        vals = pts
    results = {"system": orb.system_id, "n": int(e["n"]), "mean": float(vals.mean()), "min": float(vals.min()), "max": float(vals.max())}
    tables = {"orbit": (["j", "x"], [[j, float(v)] for j, v in enumerate(vals)])}
    return results, tables, {"orbit": series(np.arange(vals.size), vals, "j", "x")}


def cmd_tower_build(cfg, threads):
    spec = make_tower(cfg["system"])
    spec.validate()
    q = spec.tail.q
    results = {
        "tower": spec.to_dict(),
        "n_cells": spec.n_cells,
        "Z": spec.Z,
        "base_mass": spec.base_mass,
        "q": q,
    }
    if math.isfinite(q):
        ps = moment_partial_sums(spec, q - 0.5) if q > 0.5 else None
        if ps is not None:
            results["moment_increment"] = sc.decade_increment(ps)
    tables = {"cells": (["cell", "phi", "mass"], [[i, int(p), float(m)] for i, (p, m) in enumerate(zip(spec.phi, spec.masses))])}
    return results, tables, {"masses": series(spec.phi, spec.masses, "phi", "mass")}


def cmd_operator_diagnostics(cfg, threads):
    e = cfg["experiment"]
    spec = make_tower(cfg["system"])
    T = tr.renewal_T(tr.first_return_ops(spec), e["n_max"])
    diag = tr.op_decay_diagnostics(T, spec)
    residual = max(tr.check_decomposition(spec, n) for n in range(e["n_check"] + 1)) if e["n_check"] > 0 else 0.0
    if residual > 1e-10:
        raise InvariantViolation(f"renewal identity residual {residual:.3e}")
    psi = tr.full_psi_integral(spec, min(e["n_max"], 256))
    results = {"decomposition_residual": residual, "q": diag.get("q")}
    for k in ("increment_diff", "increment_dist", "geometric_fit"):
        if k in diag:
            results[k] = diag[k]
    if e["psi_samples"] > 0:
        probes = [2, 4, 8, 16, 32]
        mc = tr.psi_integral_mc(spec, probes, e["psi_samples"], e["master_seed"], threads)
        results["psi_mc"] = {"n": probes, "mean": mc["mean"], "stderr": mc["stderr"], "operator": psi[probes]}
    n = diag["n"]
    rows = [[int(i), float(diag["dist_Pi"][i]), float(diag["diff"][i]) if i < diag["diff"].size else float("nan")] for i in n]
    tables = {"decay": (["n", "dist_Pi", "diff"], rows), "psi": (["n", "psi_integral"], [[i, float(v)] for i, v in enumerate(psi)])}
    pos = diag["dist_Pi"] > 0
    plots = {
        "decay": series(n[pos], diag["dist_Pi"][pos], "n", "dist_Pi"),
        "diff": series(np.arange(diag["diff"].size), diag["diff"], "n", "diff"),
        "psi": series(np.arange(psi.size), psi, "n", "psi_integral"),
    }
    return results, tables, plots


def cmd_martingale_verify(cfg, threads):
    s, o, e = cfg["system"], cfg["observable"], cfg["experiment"]
    shift = make_system(s, "martingale-verify")
    if not isinstance(shift, ShiftSystem):
        raise ConfigError("martingale-verify runs on a shift system", code="CONFIG_VALUE")
    g = rngmod.stream(e["master_seed"], "martingale-verify")
    rows = []
    for i in range(e["observables"]):
        n = int(g.integers(2, 11))
        ctx = mg.ExactShiftContext(shift, n, depth=o["depth"])
        K = mg.random_observable(ctx, g)
        dec = mg.decompose(ctx, K)
        ha = mg.hoeffding_azuma_ratio(ctx, K, dec)
        rows.append([i, n, mg.martingale_residual(dec), mg.telescoping_residual(dec), mg.tower_residual(ctx, K, dec, g, draws=5), ha["ratio"]])
    arr = np.array(rows, float)
    results = {
        "observables": len(rows),
        "max_martingale_residual": float(arr[:, 2].max()),
        "max_telescoping_residual": float(arr[:, 3].max()),
        "max_tower_residual": float(arr[:, 4].max()),
        "max_ha_ratio": float(arr[:, 5].max()),
    }
    tables = {"residuals": (["index", "arity", "martingale", "telescoping", "tower", "ha_ratio"], rows)}
    plots = {"ha_ratio": series(arr[:, 0], arr[:, 5], "index", "ha_ratio")}
    if max(results["max_martingale_residual"], results["max_telescoping_residual"]) >= 1e-12 or results["max_ha_ratio"] > 1.0:
        raise InvariantViolation(json.dumps(results))
    return results, tables, plots


def cmd_deviation(cfg, threads):
    e = cfg["experiment"]
    system = make_system(cfg["system"])
    grid = e["t_grid"]
    kw = {}
    if grid == "auto":
        auto = np.linspace(0.05, 5.0, 200) if e["regime"] == "exp" else np.geomspace(0.05, 20.0, 300)
        kw["t_grid_sd"] = auto
    elif isinstance(grid, str):
        raise ConfigError("t_grid must be 'auto' or a list", code="CONFIG_VALUE")
    elif len(grid) == 0:
        raise InputError("t_grid is empty", code="MISSING_SERIES")
    elif e["t_scale"] == "sd":
        kw["t_grid_sd"] = np.asarray(grid, float)
    elif e["t_scale"] == "absolute":
        kw["t_grid"] = np.asarray(grid, float)
    else:
        raise ConfigError(f"unknown t_scale {e['t_scale']!r}", code="CONFIG_VALUE")
    exp = conc.DeviationExperiment(
        system,
        make_family(cfg, system),
        list(e["n_list"]),
        e["trials"],
        master_seed=e["master_seed"],
        centering=e["centering"],
        reference_value=float(e["reference_value"]),
        regime=e["regime"],
        Q=float(e["Q"]),
        burn_in=e["burn_in"],
        label="deviation",
        **kw,
    )
    rep = conc.run_deviation(exp, threads)
    tables = {}
    plots = {}
    for r in rep["results"]:
        n = r["n"]
        rows = list(zip(r["t"], r["p_hat"], r["wilson_lo"], r["wilson_hi"], r["bound"]))
        tables[f"tail_n{n}"] = (["t", "p_hat", "wilson_lo", "wilson_hi", "bound"], rows)
        plots[f"p_hat_n{n}"] = series(r["t"], r["p_hat"], "t", "p_hat")
        plots[f"bound_n{n}"] = series(r["t"], r["bound"], "t", "bound")
    return rep, tables, plots


def cmd_estimator(cfg, threads):
    e, o = cfg["experiment"], cfg["observable"]
    system = make_system(cfg["system"])
    seed = e["master_seed"]
    est = e["estimator"]
    if est == "kantorovich":
        ref = reference_cdf(system, e["grid"])
        d = dn_curve(system, e["n_list"], e["trials"], seed, ref, threads, e["burn_in"])
        slope = float(np.polyfit(np.log(d["n"]), np.log(d["mean"]), 1)[0]) if len(d["n"]) >= 2 else None
        res = {"n": d["n"], "mean": d["mean"], "stderr": d["stderr"], "slope": slope}
        return res, {"dn": (["n", "mean", "stderr"], list(zip(d["n"], d["mean"], d["stderr"])))}, {"dn": series(d["n"], d["mean"], "n", "mean_D_n")}
    if est == "return-tail":
        if not isinstance(system, IntermittentMap):
            raise ConfigError("return-tail needs the intermittent map", code="CONFIG_VALUE")

        def chunk(ci, start, stop):
            return return_time_samples(system, rngmod.stream(seed, "estimator-returns", ci), stop - start, e["cap"])

        r = rngmod.concat(rngmod.map_chunks(chunk, e["returns"], threads, chunk=2**16))
        stalled = int(np.sum(r > e["cap"]))
        if stalled > 0.01 * r.size:
            raise InvariantViolation(f"{stalled} return-time stalls")
        fit = fit_return_tail(r[r <= e["cap"]])
        cnt = np.bincount(r[r <= e["cap"]])
        surv = np.cumsum(cnt[::-1])[::-1] / r.size
        k = np.nonzero(cnt)[0]
        k = k[k >= 1]
        res = {"exponent": fit.exponent, "target": 1.0 / system.alpha + 1.0, "r2": fit.r2, "points": fit.n_points, "stalled": stalled, "returns": int(r.size)}
        return res, {"survival": (["n", "survival"], [[int(i), float(surv[i])] for i in k])}, {"survival": series(k, surv[k], "n", "survival")}
    if est == "kde":
        if not isinstance(system, (DoublingMap, IntermittentMap)):
            raise ConfigError("kde needs an interval map", code="CONFIG_VALUE")
        s_grid = np.linspace(0.0, 1.0, e["grid"] + 1)
        if isinstance(system, DoublingMap):
            target = np.ones_like(s_grid)
        else:
            op = tr.ulam_build(system, e["grid"])
            idx = np.minimum((s_grid * e["grid"]).astype(int), e["grid"] - 1)
            target = op.density[idx]
        kspec = KernelSpec(float(e["kernel_exponent"]))
        n = e["n"]

        def chunk(ci, start, stop):
            orbs = orbit_batch(system, rngmod.stream(seed, "estimator-kde", ci), stop - start, n, e["burn_in"])
            return np.array([l1_on_grid(kde_estimate(row, s_grid, kspec), target, s_grid) for row in orbs])

        l1 = rngmod.concat(rngmod.map_chunks(chunk, e["trials"], threads, chunk=16))
        res = {"n": n, "bandwidth": kspec.bandwidth(n), "mean_l1": float(l1.mean()), "max_l1": float(l1.max()), "trials": int(l1.size)}
        return res, {"l1": (["trial", "l1"], [[i, float(v)] for i, v in enumerate(l1)])}, {"l1": series(np.arange(l1.size), l1, "trial", "l1")}
    if est == "covariance":
        f = make_function({**o, "centred": True}, system)
        lags = np.arange(o["lag"] + 1)
        ref = autocovariance_reference(system, f, int(lags[-1]), seed=seed)
        n = e["n"]

        def chunk(ci, start, stop):
            orbs = orbit_batch(system, rngmod.stream(seed, "estimator-cov", ci), stop - start, n + int(lags[-1]), e["burn_in"])
            return np.array([[empirical_covariance(f, n, int(l))(row[: n + int(l)]) for l in lags] for row in orbs])

        vals = np.vstack(rngmod.map_chunks(chunk, e["trials"], threads, chunk=64))
        mean = vals.mean(axis=0)
        res = {"lags": lags, "mean": mean, "reference": ref["C"], "reference_method": ref["method"], "n": n}
        rows = [[int(l), float(m), float(c)] for l, m, c in zip(lags, mean, ref["C"])]
        return res, {"covariance": (["lag", "mean", "reference"], rows)}, {"covariance": series(lags, mean, "lag", "covariance")}
    if est == "periodogram":
        f = make_function(o, system)
        ref = autocovariance_reference(system, f, 32, seed=seed)
        C = np.nan_to_num(ref["C"])
        n = e["n"]

        def chunk(ci, start, stop):
            orbs = orbit_batch(system, rngmod.stream(seed, "estimator-periodogram", ci), stop - start, n, e["burn_in"])
            return np.array([sup_periodogram_gap(f(row), C, o["omega_points"])["gap"] for row in orbs])

        gaps = rngmod.concat(rngmod.map_chunks(chunk, e["trials"], threads, chunk=8))
        res = {"n": n, "mean_gap": float(gaps.mean()), "max_gap": float(gaps.max()), "trials": int(gaps.size)}
        return res, {"gaps": (["trial", "gap"], [[i, float(v)] for i, v in enumerate(gaps)])}, {"gaps": series(np.arange(gaps.size), gaps, "trial", "sup_gap")}
    if est == "moment-scan":
        f = make_function(o, system)
        m = conc.moment_scan(system, f, e["n_list"], e["trials"], float(e["Q"]), seed, threads, e["burn_in"])
        return m, {"moments": (["n", "moment"], list(zip(m["n"], m["moment"])))}, {"moments": series(m["n"], m["moment"], "n", "moment")}
    raise ConfigError(f"unknown estimator {est!r}", code="CONFIG_VALUE")


def cmd_seq_check(cfg, threads):
    e = cfg["experiment"]
    g = rngmod.stream(e["master_seed"], "seq-check")
    rows = []
    window_viol = 0
    for i in range(e["instances"]):
        w = sc.random_weight_system(g)
        m = int(g.integers(1, w.horizon))
        try:
            total = sc.weight_sum_over_r(w, m)
        except InvariantViolation:
            window_viol += 1
            total = float("nan")
        u = sc.random_weight_system(g)
        c = sc.random_order1_sequence(g)
        v = sc.build_weight_v(u, c, check_kmax=None)
        excess = sc.domination_violation(u, c, v, e["kmax"])
        rows.append([i, u.kind, total, w.Sigma, excess])
    dom_viol = sum(r[4] > 0 for r in rows)
    results = {"instances": e["instances"], "kmax": e["kmax"], "window_violations": window_viol, "domination_violations": int(dom_viol)}
    if window_viol or dom_viol:
        raise InvariantViolation(json.dumps(results))
    tables = {"instances": (["index", "kind", "window_sum", "Sigma", "domination_excess"], rows)}
    return results, tables, {"window_sum": series([r[0] for r in rows], [r[2] / r[3] if r[3] > 0 else 0.0 for r in rows], "index", "window_over_Sigma")}


def cmd_appendix_mc(cfg, threads):
    e = cfg["experiment"]
    spec = make_tower(cfg["system"])
    g = rngmod.stream(e["master_seed"], "appendix-profiles")
    orbit_len = e["orbit_len"] or None
    rows = []
    for i in range(e["profiles"]):
        L = conc.random_profile(g, e["support"])
        r = conc.visit_functional_moment_mc(spec, L, e["trials"], orbit_len, e["master_seed"], threads=threads)
        hl = conc.maximal_function_check(L)
        rows.append([i, r["ratio"], r["stderr"], hl["ratio"]])
    L = conc.random_profile(g, e["support"])
    a = conc.visit_functional_moment_mc(spec, L, e["trials"], orbit_len, e["master_seed"], threads=threads)["ratio"]
    b = conc.visit_functional_moment_mc(spec, 7.3 * L, e["trials"], orbit_len, e["master_seed"], threads=threads)["ratio"]
    ratios = np.array([r[1] for r in rows])
    centre = float(ratios.mean()) if ratios.size else 0.0
    results = {
        "profiles": len(rows),
        "mean_ratio": centre,
        "max_relative_spread": float(np.max(np.abs(ratios - centre)) / centre) if centre > 0 else 0.0,
        "scaling_relative_error": abs(a - b) / abs(a) if a else 0.0,
        "max_maximal_ratio": max((r[3] for r in rows), default=0.0),
    }
    if results["scaling_relative_error"] > 1e-10:
        raise InvariantViolation(f"scaling invariance broken: {results['scaling_relative_error']:.3e}")
    tables = {"profiles": (["index", "ratio", "stderr", "maximal_ratio"], rows)}
    return results, tables, {"ratios": series(np.arange(ratios.size), ratios, "profile", "ratio")}


HANDLERS = {
    "orbit": cmd_orbit,
    "tower-build": cmd_tower_build,
    "operator-diagnostics": cmd_operator_diagnostics,
    "martingale-verify": cmd_martingale_verify,
    "deviation": cmd_deviation,
    "estimator": cmd_estimator,
    "seq-check": cmd_seq_check,
    "appendix-mc": cmd_appendix_mc,
}


# ---------------------------------------------------------------------------
# artifacts


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def emit_plotdata(report: dict, kind: str, out_dir) -> Path:
    """Write ``plots/<kind>.dat``: a ``# x y seed`` header and two columns."""
    s = report.get("series", {}).get(kind)
    if s is None or len(s["x"]) == 0:
        raise InputError(f"report has no series {kind!r}", code="MISSING_SERIES")
    seed = report["config"]["experiment"]["master_seed"]
    path = Path(out_dir) / "plots" / f"{kind}.dat"
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [f"# {s['x_label']} {s['y_label']} seed={seed}"]
    lines += [f"{_fmt(x)} {_fmt(y)}" for x, y in zip(s["x"], s["y"])]
    path.write_text("\n".join(lines) + "\n")
    return path


def write_table(out_dir, name: str, header, rows) -> Path:
    path = Path(out_dir) / "tables" / f"{name}.csv"
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])
    return path


def run(subcommand: str, cfg: dict, out_dir, threads: int = 1) -> dict:
    """Execute a subcommand on an effective config and write all artifacts."""
    if subcommand not in HANDLERS:
        raise InputError(f"unknown subcommand {subcommand!r}", code="UNKNOWN_SUBCOMMAND")
    t0 = time.perf_counter()
    results, tables, plots = HANDLERS[subcommand](cfg, threads)
    wall = time.perf_counter() - t0
    report = to_jsonable({"schema": SCHEMA_VERSION, "subcommand": subcommand, "config": cfg, "results": results, "series": plots})
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(json.dumps(report, sort_keys=True, indent=1) + "\n")
    (out / "effective_config.toml").write_text(tomli_w.dumps(cfg))
    (out / "runtime.json").write_text(json.dumps({"wall_seconds": wall, "threads": threads, "backend": _accel.backend_name()}) + "\n")
    if cfg["output"]["tables"]:
        for name, (header, rows) in tables.items():
            write_table(out, name, header, rows)
    if cfg["output"]["plots"]:
        for kind in plots:
            emit_plotdata(report, kind, out)
    return report


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="towerlab", description="Tower, transfer-operator and concentration experiments.")
    p.add_argument("subcommand", choices=SUBCOMMANDS)
    p.add_argument("--config", help="TOML experiment file")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE")
    p.add_argument("--out", default=None, help="output directory (default: $TOWERLAB_OUT or ./towerlab-out)")
    p.add_argument("--seed", type=int, default=None, help="override experiment.master_seed")
    p.add_argument("--threads", type=int, default=1, help="worker threads; results do not depend on it")
    return p


def _error_line(code: str, message: str) -> str:
    return json.dumps({"code": code, "message": message.replace("\n", " ")})


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        if exc.code in (0, None):
            return 0
        print(_error_line("USAGE", "invalid command line"), file=sys.stderr)
        return 1
    out = args.out or os.environ.get("TOWERLAB_OUT") or "towerlab-out"
    try:
        if args.threads < 1:
            raise InputError("--threads must be >= 1", code="USAGE")
        cfg = load_config(args.config, args.overrides, args.seed)
        report = run(args.subcommand, cfg, out, args.threads)
    except InvariantViolation as exc:
        print(_error_line("INVARIANT_VIOLATION", str(exc)), file=sys.stderr)
        return 2
    except TowerlabError as exc:
        print(_error_line(exc.code, str(exc)), file=sys.stderr)
        return 1
    except (ValueError, TypeError) as exc:
        print(_error_line("INPUT_ERROR", str(exc)), file=sys.stderr)
        return 1
    print(json.dumps({"status": "ok", "subcommand": report["subcommand"], "out": str(out)}))
    return 0


if __name__ == "__main__":
    sys.exit(main())
