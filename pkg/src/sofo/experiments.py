"""Experiment runners behind the CLI verbs. Each writes CSVs plus a summary."""

from __future__ import annotations

import csv
import json
import logging
import math
import re
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from ._jit import resolve_backend
from .analysis import (
    A5Warning,
    compute_mu_bar_f,
    drift_envelope,
    contraction_check,
    estimate_constants,
    estimate_Lf_sigmaf,
    optimal_path,
    psi_sequence,
    theorem1_bound,
    theorem2_bound,
)
from .config import (
    ConfigError,
    build_algorithm,
    build_instance,
    build_phi,
    config_hash,
    instance_streams,
)
from .engine import AlgorithmConfig, run_replications, run_trajectory, write_trajectory_csv
from .objectives import expected_quadratic
from .rng import RandomStream

__all__ = [
    "write_csv",
    "read_csv",
    "run_tracking",
    "run_mse_sweep",
    "run_opf_compare",
    "run_constants_report",
    "run_contraction_test",
    "run_experiment",
    "RUNNERS",
]

log = logging.getLogger(__name__)


def write_csv(path, header, columns):
    """Write equal-length columns with a header row; floats use 17 significant digits."""
    cols = [np.asarray(c) for c in columns]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows([_fmt(c[i]) for c in cols] for i in range(len(cols[0])))


def _fmt(v):
    if isinstance(v, (str, np.str_)):
        return str(v)
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return "%.17g" % float(v)


def read_csv(path) -> dict:
    """Parse a CSV written by :func:`write_csv` into ``{column: array}``."""
    with open(path, newline="") as fh:
        header, *rows = [r for r in csv.reader(fh) if r]
    out = {}
    for j, h in enumerate(header):
        vals = [r[j] for r in rows]
        try:
            out[h] = np.array([float(v) for v in vals])
        except ValueError:
            out[h] = np.array(vals)
    return out


def _dump(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.bool_):
        return bool(o)
    raise TypeError(type(o))


def _finite(x):
    return None if x is None or not np.isfinite(x) else float(x)


def _u0(spec, ustar0, d):
    if spec is None or spec == "ustar":
        return ustar0.copy()
    if spec == "zero":
        return np.zeros(d)
    u0 = np.asarray(spec, dtype=float)
    if u0.shape != (d,):
        raise ConfigError(f"u0 has length {u0.size}, expected {d}")
    return u0


def _pool_map(fn, items, threads):
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            return list(pool.map(fn, items))
    return [fn(i) for i in items]


# ---------------------------------------------------------------------------
# tracking


def run_tracking(cfg, out, seed, replications=1, threads=1, backend=None) -> dict:
    out = Path(out)
    inst = build_instance(cfg, seed)
    world, cset, obj, algo = inst.world, inst.cset, inst.obj, inst.algo
    _, r_run, r_an, _ = instance_streams(seed)
    N, d = algo.horizon, world.dim_u
    tr = cfg.get("tracking", {})
    ustar = optimal_path(obj, world.compliance, world.plant, cset, N, backend=backend)
    u0 = _u0(tr.get("u0"), ustar[0], d)
    rec = run_trajectory(u0, world, cset, obj, algo, r_run.child(), oracle=ustar, backend=backend)
    write_trajectory_csv(rec, out / "trajectory.csv")
    err = rec.tracking_sq_error
    files = ["trajectory.csv"]
    if replications > 1:
        U, _ = run_replications(np.tile(u0, (replications, 1)), world, cset, obj, algo, r_run.child(),
                                backend=backend, threads=threads)
        e = np.sum((U - ustar) ** 2, axis=2)
        err = e.mean(axis=0)
        write_csv(out / "tracking_mse.csv", ["n", "mean_sq_error", "se"],
                  [np.arange(N), err, e.std(axis=0, ddof=1) / math.sqrt(replications)])
        files.append("tracking_mse.csv")

    c = estimate_constants(world, cset, obj, algo, r_an, ustar_path=ustar, backend=backend,
                           samples=tr.get("constants_samples", 20_000), calib_draws=tr.get("calibration_draws", 20_000))
    c.write_report(out / "constants.txt")
    psi = psi_sequence(ustar)
    u0_sq = float(np.sum((u0 - ustar[0]) ** 2))
    env = theorem1_bound(c, psi, u0_sq, N - 1)
    denv = drift_envelope(c, psi, u0_sq, N - 1)
    write_csv(out / "envelope.csv", ["n", "theorem1_bound", "drift_envelope", "empirical_sq_error"],
              [np.arange(N), env, denv, err])
    files += ["constants.txt", "envelope.csv"]

    n0 = int(math.ceil(tr.get("transient_fraction", 0.1) * N))
    post = err[n0:]
    summary = {"horizon": N, "transient_steps": n0, "post_transient_max_sq_error": float(post.max()),
               "post_transient_mean_sq_error": float(post.mean()), "gamma_bar": c.gamma_bar,
               "Upsilon_alpha": c.Upsilon_alpha, "alpha_max": c.alpha_max,
               "envelope_violations": int(np.sum(err > env + 1e-12)),
               "drift_envelope_violations": int(np.sum(err > denv + 1e-12)), "replications": replications}
    in_range = c.alpha < c.alpha_max
    ea, eb, ec, total = theorem2_bound(c, check_range=False)
    summary.update(theorem2_eps_a=ea, theorem2_eps_b=eb, theorem2_eps_c=ec, theorem2_total=total,
                   alpha_in_admissible_range=bool(in_range),
                   ratio_to_theorem2=float(post.max() / total) if total > 0 else None)
    _dump(out / "instance.json", inst.describe())
    _dump(out / "summary.json", summary)
    return {"files": files + ["instance.json", "summary.json"], "summary": summary}


# ---------------------------------------------------------------------------
# MSE sweep


def _alphas(spec):
    a = spec.get("alphas", {"min": 1e-3, "max": 1e-1, "count": 8})
    if isinstance(a, dict):
        if not a["max"] > a["min"]:
            raise ConfigError("alpha grid needs max > min")
        return np.logspace(np.log10(a["min"]), np.log10(a["max"]), a["count"])
    return np.asarray(a, dtype=float)


def mse_for_alpha(inst, alpha, seed, ustar, u0, burn, backend=None):
    """Time-averaged ``||u_n - u*||^2`` over ``[burn, N)``; the compliance draws do not depend on ``alpha``."""
    a = inst.algo
    cfg = AlgorithmConfig(float(alpha), a.eta, a.variant, a.horizon, a.a_recovery)
    r_run = instance_streams(seed)[1]
    U, _ = run_replications(u0[None], inst.world, inst.cset, inst.obj, cfg, r_run, backend=backend)
    return float(np.mean(np.sum((U[0, burn:] - ustar) ** 2, axis=1)))


def fit_loglog_slope(alphas, mse, mask=None):
    alphas, mse = np.asarray(alphas), np.asarray(mse)
    m = (mse > 0) if mask is None else (np.asarray(mask) & (mse > 0))
    if m.sum() < 2:
        return float("nan")
    return float(np.polyfit(np.log(alphas[m]), np.log(mse[m]), 1)[0])


def run_mse_sweep(cfg, out, seed, replications=1, threads=1, backend=None) -> dict:
    out = Path(out)
    inst = build_instance(cfg, seed)
    world, cset, obj, algo = inst.world, inst.cset, inst.obj, inst.algo
    spec = cfg.get("mse_sweep", {})
    if world.plant.disturbance.total_length is not None:
        raise ConfigError("the MSE sweep needs a constant disturbance")
    alphas = _alphas(spec)
    N = algo.horizon
    burn = int(math.floor(spec.get("burn_fraction", 0.5) * N))
    # tight tolerance so that u0 = u* starts at the fixed point up to rounding
    ustar = optimal_path(obj, world.compliance, world.plant, cset, 1, tol=1e-14, backend=backend)[0]
    u0 = _u0(spec.get("u0"), ustar, world.dim_u)
    import warnings

    with warnings.catch_warnings():
        warnings.simplefilter("ignore", A5Warning)
        mu = compute_mu_bar_f(obj, world.compliance, world.plant)
    est = estimate_Lf_sigmaf(obj, world.compliance, world.plant, cset, rng=instance_streams(seed)[2], times=[0],
                             ustar=[ustar], include_eta=False)
    L = est.L_f + obj.eta
    ups = 1.0 - 2.0 * alphas * mu + alphas**2 * L**2
    # mean iteration u <- u - alpha (H u + g) is stable iff alpha < 2 / lambda_max(H)
    lam = float(np.linalg.eigvalsh(expected_quadratic(obj, world.compliance, world.plant).H)[-1])
    mse = np.array(_pool_map(lambda a: mse_for_alpha(inst, a, seed, ustar, u0, burn, backend), alphas, threads))
    stable = alphas * lam < 2.0
    in_theory = ups < 1.0
    included = np.isfinite(mse) & (mse > 0)
    rule = spec.get("fit", "stable")
    if rule == "stable":
        included &= stable
    elif rule == "theorem":
        included &= in_theory
    for a in alphas[~stable]:
        log.warning("alpha=%.3g is outside the stability range (2/lambda_max(H) = %.3g)", a, 2.0 / lam)
    slope = fit_loglog_slope(alphas, mse, included)
    write_csv(out / "mse_sweep.csv", ["alpha", "mse", "tau1", "tau2", "upsilon", "stable", "theorem_range", "included"],
              [alphas, mse, alphas, alphas**2, ups, stable, in_theory, included])
    summary = {"slope": _finite(slope), "points": int(alphas.size), "included": int(included.sum()), "fit": rule,
               "alpha_stable_max": 2.0 / lam, "burn_in": burn, "horizon": N, "mu_bar_f": mu, "L_f": est.L_f,
               "ustar": ustar.tolist()}
    _dump(out / "instance.json", inst.describe())
    _dump(out / "summary.json", summary)
    return {"files": ["mse_sweep.csv", "instance.json", "summary.json"], "summary": summary}


# ---------------------------------------------------------------------------
# OPF comparison


def _slug(text):
    return re.sub(r"[^A-Za-z0-9]+", "_", text).strip("_").lower()


def build_opf_inputs(cfg, seed):
    from .powergrid import DEFAULT_AGENTS, ieee33, load_case, load_profiles, synthetic_profiles

    o = cfg.get("opf", {})
    algo = build_algorithm(cfg["algorithm"])
    agents = tuple(o.get("agents", DEFAULT_AGENTS))
    base_mva = float(o.get("base_mva", 10.0))
    if "branch_csv" in o:
        root = Path(cfg.get("_base_dir", "."))
        case = load_case(root / o["branch_csv"], root / o["node_csv"], base_mva=base_mva, agents=agents,
                         smax_kva=o.get("smax_kva"))
    else:
        case = ieee33(agents, o.get("smax_kva"), base_mva)
    prof_spec = o.get("profiles", {"synthetic": {}})
    if "synthetic" in prof_spec:
        s = prof_spec["synthetic"]
        profiles = synthetic_profiles(case, algo.horizon, instance_streams(seed)[0],
                                      pv_peak_kw=s.get("pv_peak_kw", 1200.0), start_hour=s.get("start_hour", 5.5),
                                      end_hour=s.get("end_hour", 20.5), clouds=s.get("clouds", True),
                                      load_noise=s.get("load_noise", 0.03))
    else:
        root = Path(cfg.get("_base_dir", "."))
        profiles = load_profiles(root / prof_spec["load_csv"], root / prof_spec["pv_csv"], case,
                                 prof_spec.get("dt_minutes"))
    return case, profiles, algo


def run_opf_compare(cfg, out, seed, replications=20, threads=1, backend=None) -> dict:
    from .powergrid import TABLE_DISTRIBUTIONS, OpfWeights, run_opf_experiment, write_profiles

    out = Path(out)
    o = cfg.get("opf", {})
    case, profiles, algo = build_opf_inputs(cfg, seed)
    N = algo.horizon
    dists = [build_phi(s) for s in o["distributions"]] if "distributions" in o else list(TABLE_DISTRIBUTIONS)
    if o.get("include_deterministic", False):
        dists = [None] + dists
    weights = OpfWeights(**o.get("weights", {}))
    trace_agents = [a for a in o.get("trace_agents", [29]) if a in case.agents]
    streams = instance_streams(seed)[1].split(len(dists))
    (out / "traces").mkdir(exist_ok=True)
    write_profiles(profiles.head(N), out / "profiles_load.csv", out / "profiles_pv.csv")
    files = ["profiles_load.csv", "profiles_pv.csv"]

    def one(i):
        return run_opf_experiment(case, profiles, dists[i], algo, replications, streams[i], weights=weights,
                                  backend=backend)

    reports = _pool_map(one, range(len(dists)), threads)
    rows = [row for rep in reports for row in rep.rows()]
    keys = list(rows[0])
    write_csv(out / "opf_table.csv", keys, [[r[k] for r in rows] for k in keys])
    files.append("opf_table.csv")
    for rep in reports:
        for a in trace_agents:
            tr = rep.trace(a)
            name = f"traces/{_slug(rep.phi_label + rep.meta['support'])}_node{a}.csv"
            j = rep.agents.index(a)
            write_csv(out / name, ["n", "time_min", "pbar_kw"] + list(tr),
                      [np.arange(N), profiles.time_min[:N], rep.pbar_kw[:, j]] + list(tr.values()))
            files.append(name)
    summary = {"rows": len(rows), "horizon": N, "replications": replications, "agents": list(case.agents),
               "table": rows}
    _dump(out / "summary.json", summary)
    return {"files": files + ["summary.json"], "summary": summary}


# ---------------------------------------------------------------------------
# constants and contraction


def _analysis_opts(cfg):
    a = cfg.get("analysis", {})
    return (a.get("samples", 20_000), a.get("calibration_draws", 20_000), a.get("calibration_directions", 24),
            a.get("test_states", 10), a.get("draws", 100_000))


def run_constants_report(cfg, out, seed, replications=1, threads=1, backend=None) -> dict:
    out = Path(out)
    inst = build_instance(cfg, seed)
    samples, cdraws, cdirs, _, _ = _analysis_opts(cfg)
    c = estimate_constants(inst.world, inst.cset, inst.obj, inst.algo, instance_streams(seed)[2], samples=samples,
                           calib_draws=cdraws, calib_directions=cdirs, backend=backend)
    c.write_report(out / "constants.txt")
    rep = c.report()
    try:
        rep.update(zip(("theorem2_eps_a", "theorem2_eps_b", "theorem2_eps_c", "theorem2_total"), theorem2_bound(c)))
    except ValueError as exc:
        rep["theorem2_note"] = str(exc)
    _dump(out / "constants.json", rep)
    _dump(out / "instance.json", inst.describe())
    return {"files": ["constants.txt", "constants.json", "instance.json"], "summary": rep}


def random_feasible_states(cset, k, rng, n=0):
    """``k`` points drawn uniformly from the set's bounding box and kept when feasible."""
    lo, hi = cset.bounding_box(n)
    rng = RandomStream(0) if rng is None else rng
    pts = []
    while len(pts) < k:
        U = rng.uniform(lo, hi, (4 * k, lo.size))
        pts.extend(U[cset.contains_many(U, n)])
    return np.array(pts[:k])


def run_contraction_test(cfg, out, seed, replications=1, threads=1, backend=None) -> dict:
    out = Path(out)
    inst = build_instance(cfg, seed)
    samples, cdraws, cdirs, k, draws = _analysis_opts(cfg)
    _, _, r_an, r_test = instance_streams(seed)
    c = estimate_constants(inst.world, inst.cset, inst.obj, inst.algo, r_an, samples=samples, calib_draws=cdraws,
                           calib_directions=cdirs, backend=backend)
    ustar = optimal_path(inst.obj, inst.world.compliance, inst.world.plant, inst.cset, 1, backend=backend)[0]
    r_pts, r_mc = r_test.split(2)
    states = random_feasible_states(inst.cset, k, r_pts)
    res = contraction_check(inst.world, inst.cset, inst.obj, inst.algo, c, states, ustar, r_mc, draws=draws,
                            backend=backend)
    d = inst.world.dim_u
    write_csv(out / "contraction.csv",
              [f"u{i}" for i in range(d)] + ["lhs", "lhs_se", "rhs", "slack", "slack_in_se"],
              [*states.T, res.lhs, res.lhs_se, res.rhs, res.slack, res.slack / np.maximum(res.lhs_se, 1e-300)])
    c.write_report(out / "constants.txt")
    summary = {"worst_slack": res.worst_slack, "worst_state": states[res.worst_index].tolist(),
               "worst_slack_in_se": float(res.slack[res.worst_index] / max(res.lhs_se[res.worst_index], 1e-300)),
               "passed": res.passed, "b2": c.b2, "Upsilon_alpha": c.Upsilon_alpha, "q_alpha": c.q_alpha,
               "draws": draws}
    _dump(out / "summary.json", summary)
    return {"files": ["contraction.csv", "constants.txt", "summary.json"], "summary": summary}


RUNNERS = {
    "tracking": run_tracking,
    "mse_sweep": run_mse_sweep,
    "opf_compare": run_opf_compare,
    "constants": run_constants_report,
    "contraction": run_contraction_test,
}


def run_experiment(cfg: dict, out, seeds=None, replications: Optional[int] = None, threads: int = 1,
                   kind: Optional[str] = None) -> dict:
    """Run one experiment per seed and write ``manifest.json`` into ``out``."""
    kind = kind or cfg["kind"]
    if kind != cfg["kind"]:
        raise ConfigError(f"config describes a {cfg['kind']!r} experiment, not {kind!r}")
    seeds = list(seeds if seeds is not None else cfg.get("seeds", [0]))
    if len(set(seeds)) != len(seeds):
        raise ConfigError("seeds must be distinct")
    reps = int(replications if replications is not None else cfg.get("replications", 20 if kind == "opf_compare" else 1))
    backend = resolve_backend(cfg.get("backend"))
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    results = {}
    for s in seeds:
        sub = out if len(seeds) == 1 else out / f"seed_{s}"
        sub.mkdir(parents=True, exist_ok=True)
        res = RUNNERS[kind](cfg, sub, s, reps, threads, backend)
        prefix = "" if len(seeds) == 1 else f"seed_{s}/"
        results[s] = {"files": [prefix + f for f in res["files"]], "summary": res["summary"]}
    manifest = {"kind": kind, "config_hash": config_hash(cfg), "seeds": seeds, "replications": reps,
                "code_version": __version__, "backend": backend, "spec_version": cfg["spec_version"],
                "files": {str(s): r["files"] for s, r in results.items()}}
    _dump(out / "manifest.json", manifest)
    return {"manifest": manifest, "results": results}
