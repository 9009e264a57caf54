"""Command-line experiment runner.

Every subcommand reads a JSON config (``--config``), takes a mandatory
``--seed`` and writes its outputs under ``--out``:

    manifest.json   resolved config, seed, version (deterministic)
    timing.json     wall-clock timestamps (the only non-deterministic file)
    <outputs>       subcommand-specific CSV/JSON files

Exit codes: 0 success, 2 config error, 3 numeric failure.
"""

import argparse
import csv
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .mixture import MixtureError, SharedCovMixture, symmetric_mixture
from .temper import ScheduleError, TemperatureSchedule, schedule_for

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3


class ConfigError(ValueError):
    pass


# --- config helpers -----------------------------------------------------

def load_config(path):
    if path is None:
        return {}
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ConfigError("config must be a JSON object")
    return cfg


def build_model(spec, base_dir="."):
    """Model from a config entry: a full record, a file path, or a symmetric shorthand."""
    if spec is None:
        raise ConfigError("config needs a 'model' entry")
    if isinstance(spec, str):
        p = Path(base_dir) / spec
        try:
            return SharedCovMixture.from_json(p.read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read model file {p}") from exc
    if "symmetric" in spec:
        s = spec["symmetric"]
        return symmetric_mixture(float(s["separation"]), float(s.get("sigma", 1.0)),
                                 int(s.get("n_components", 2)), int(s.get("dim", 1)))
    return SharedCovMixture.from_dict(spec)


def build_schedule(cfg, model):
    spec = cfg.get("schedule")
    if spec is None:
        return schedule_for(model)
    return TemperatureSchedule(float(spec["D"]), float(spec.get("lam", model.lam_min)), model=model)


def _num(v):
    """JSON-safe float (NaN/inf become strings so the output stays valid JSON)."""
    if isinstance(v, (float, np.floating)):
        v = float(v)
        return v if np.isfinite(v) else repr(v)
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, np.ndarray):
        return [_num(x) for x in v.tolist()]
    if isinstance(v, (list, tuple)):
        return [_num(x) for x in v]
    if isinstance(v, dict):
        return {str(k): _num(x) for k, x in v.items()}
    return v


def write_json(path, obj):
    Path(path).write_text(json.dumps(_num(obj), indent=2, sort_keys=True) + "\n")


def write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])


def log(msg):
    print(msg, file=sys.stderr, flush=True)


# --- subcommands ----------------------------------------------------------

def cmd_fit(cfg, args, out):
    from .efficiency import fit_loss, fit_mle, permutation_error
    from .temper import noise_channel
    model = build_model(cfg.get("model"), args.base_dir)
    kind = args.loss or cfg.get("loss", "gsm")
    if kind not in ("mle", "sm", "gsm"):
        raise ConfigError(f"unknown loss {kind!r}")
    rng = np.random.default_rng(args.seed)
    data_spec = cfg.get("data", {"generate": 10_000})
    if "file" in data_spec:
        try:
            x = np.loadtxt(Path(args.base_dir) / data_spec["file"], delimiter=",", ndmin=2)
        except OSError as exc:
            raise ConfigError(f"cannot read data file: {exc}") from exc
        truth = None
    else:
        x = model.sample(rng, int(data_spec["generate"]))
        truth = model.means
    init_spec = cfg.get("init", "mle")
    if init_spec in ("mle", "truth"):
        init = model.means
    else:
        init = np.asarray(init_spec, dtype=float).reshape(model.means.shape)
    mle = fit_mle(x, init, model)
    schedule = build_schedule(cfg, model) if kind == "gsm" else None
    if kind == "mle":
        res = mle
    else:
        start = mle.means if init_spec == "mle" else init
        data = noise_channel(x, schedule, rng) if kind == "gsm" else x
        res = fit_loss(data, kind, start, model, schedule=schedule,
                       tol=float(cfg.get("tol", 1e-7)), max_iter=int(cfg.get("max_iter", 2000)))
    record = {"loss": kind, "n": int(len(x)), "means": res.means, "converged": res.converged,
              "n_iter": res.n_iter}
    if truth is not None:
        record["error"] = permutation_error(res.means, truth)
    write_json(out / "fit.json", record)
    rows = [tuple(t) for t in res.trace]
    header = ["iter", "step"] if kind == "mle" else ["iter", "loss", "grad_norm"]
    write_csv(out / "trace.csv", header, rows)
    if not res.converged:
        log("fit did not converge; best iterate written")
    return record


SWEEP_HEADER = ["D", "K", "n", "ratio_sm", "ratio_sm_stderr", "ratio_gsm", "ratio_gsm_stderr",
                "cp_oracle", "cp_bound", "rhs_thm31", "beta_max", "seed", "replicas", "n_fit",
                "median_err_mle", "median_err_sm", "median_err_gsm", "error"]


def _read_sweep(path):
    if not path.exists():
        return {}
    with open(path, newline="") as fh:
        return {(float(r["D"]), int(r["K"])): r for r in csv.DictReader(fh)}


def cmd_sweep(cfg, args, out):
    from .efficiency import cell_seeds, run_cells
    kind = cfg.get("kind", "separation")
    mc = int(cfg.get("mc", 100_000))
    hessian = cfg.get("hessian", "fd" if kind == "separation" else "gauss_newton")
    oracle = bool(cfg.get("with_oracle", kind == "separation"))
    bound = bool(cfg.get("with_bound", kind == "separation"))
    sigma = float(cfg.get("sigma", 1.0))
    replicas = int(cfg.get("replicas", 0))
    n_fit = int(cfg.get("n", mc))
    if kind == "separation":
        grid = [float(D) for D in cfg.get("D_grid", [2, 4, 6])]
        cells = [(D, 2, symmetric_mixture(D, sigma)) for D in grid]
    elif kind == "components":
        radius = float(cfg.get("radius", 4.0))
        cells = [(2 * radius, int(K), symmetric_mixture(2 * radius, sigma, n_components=int(K)))
                 for K in cfg.get("K_grid", [2, 4, 8])]
    else:
        raise ConfigError(f"unknown sweep kind {kind!r}")
    seeds = cell_seeds(args.seed, len(cells))
    previous = _read_sweep(out / "sweep.csv") if args.resume else {}
    tasks, keep = [], {}
    for (D, K, model), s in zip(cells, seeds):
        old = previous.get((D, K))
        if old is not None and old["error"] == "":
            keep[(D, K)] = [old[h] for h in SWEEP_HEADER]
            continue
        tasks.append(dict(model=model, mc=mc, seed=s, with_oracle=oracle, with_bound=bound,
                          D=D, hessian=hessian, replicas=replicas, n_fit=n_fit))
    log(f"sweep: {len(tasks)} cell(s) to run, {len(keep)} reused")
    done = {(r.D, r.K): r for r in run_cells(tasks, args.workers)}
    rows = []
    for D, K, _ in cells:
        if (D, K) in keep:
            rows.append(keep[(D, K)])
        else:
            rec = done[(D, K)].to_dict()
            rows.append([rec[h] for h in SWEEP_HEADER])
    write_csv(out / "sweep.csv", SWEEP_HEADER, rows)
    long_rows = []
    for r in rows:
        for name in ("ratio_sm", "ratio_gsm", "cp_oracle", "cp_bound", "median_err_sm", "median_err_gsm"):
            long_rows.append([r[0], r[1], name, r[SWEEP_HEADER.index(name)]])
    write_csv(out / "sweep_long.csv", ["D", "K", "quantity", "value"], long_rows)
    ok = sum(1 for r in rows if r[-1] == "")
    if ok == 0:
        raise NumericFailure("every sweep cell failed")
    return {"cells": len(rows), "succeeded": ok,
            "beta_max": [float(r[SWEEP_HEADER.index("beta_max")]) for r in rows]}


def cmd_poincare_bound(cfg, args, out):
    from .poincare import total_bound
    model = build_model(cfg.get("model"), args.base_dir)
    b = total_bound(model, build_schedule(cfg, model))
    write_json(out / "breakdown.json", b.to_dict())
    return {"c_total": b.c_total}


def cmd_poincare_oracle(cfg, args, out):
    from . import poincare as pc
    target = cfg.get("target", "ctld")
    if target == "gaussian":
        ld, axes = pc.gaussian_target(float(cfg.get("sigma", 1.0)), n=int(cfg.get("n", 200)))
    elif target == "mixture":
        ld, axes = pc.mixture_target(build_model(cfg.get("model"), args.base_dir))
    elif target == "temperature":
        model = build_model(cfg.get("model"), args.base_dir)
        ld, axes = pc.temperature_target(build_schedule(cfg, model))
    elif target == "ctld":
        model = build_model(cfg.get("model"), args.base_dir)
        ld, axes = pc.ctld_target(model, build_schedule(cfg, model))
    else:
        raise ConfigError(f"unknown oracle target {target!r}")
    value, levels = pc.spectral_oracle(ld, axes, return_levels=True)
    rec = {"target": target, "poincare_constant": value, "levels": levels}
    write_json(out / "oracle.json", rec)
    return rec


def cmd_decomp_verify(cfg, args, out):
    from .poincare import decomposition_check, discrete_gaussian_instance
    inst = discrete_gaussian_instance(int(cfg.get("n_states", 10)), cfg.get("centers", [2.0, 6.0]),
                                      float(cfg.get("width", 1.5)), cfg.get("weights", [0.5, 0.5]))
    rep = decomposition_check(inst, int(cfg.get("trials", 100)), np.random.default_rng(args.seed))
    write_json(out / "decomposition.json", rep.to_dict())
    if not rep.passed:
        raise NumericFailure(f"{rep.violations} decomposition violation(s)")
    return rep.to_dict()


def cmd_hermite_verify(cfg, args, out):
    from . import hermite as hm
    max_order = int(args.max_order or cfg.get("max_order", 3))
    mc = int(cfg.get("mc", 200_000))
    rng = np.random.default_rng(args.seed)
    d = int(cfg.get("dim", 2))
    A = rng.standard_normal((d, d))
    cov = A @ A.T + np.eye(d)
    x = rng.standard_normal(d)
    checks = []
    for k in range(1, max_order + 1):
        h = hm.hermite_tensor(k, x, cov, mc=mc, rng=rng)
        hn = hm.hermite_tensor(k, -x, cov)
        # zero-variance entries (order 1) must agree to rounding
        slack = 4.0 * h.mc_stderr + 1e-10 * (1.0 + np.abs(h.entries))
        z = float(np.max(np.abs(h.entries - h.mc_entries) / slack))
        checks.append({"check": f"integral_form_order{k}", "value": z, "passed": z <= 1.0})
        par = float(np.max(np.abs(hn.entries - (-1) ** k * h.entries)))
        checks.append({"check": f"parity_order{k}", "value": par, "passed": par == 0.0})
    mu = rng.standard_normal(d)
    for k1 in range(0, max_order + 1):
        for k2 in range(0, max_order + 1 - k1):
            if k1 + k2 == 0:
                continue
            err = _mixed_fd_error(k1, k2, x, mu, cov)
            checks.append({"check": f"mixed_ratio_{k1}_{k2}", "value": err, "passed": err <= 1e-4})
    moments = []
    for dd in (1, 2, 3):
        for lam in (0.5, 1.0, 2.0):
            for k1, k2 in [(1, 0), (0, 1), (1, 1), (0, 2), (2, 1)]:
                if k1 + k2 > max_order:
                    continue
                row = hm.moment_bound_report(k1, k2, 1, lam * np.eye(dd), np.zeros(dd), 20_000, rng)
                moments.append(row.to_dict())
    write_csv(out / "hermite_moments.csv", ["k1", "k2", "k", "d", "lam_min", "lhs", "rhs", "ratio"],
              [[m["k1"], m["k2"], m["k"], m["d"], m["lam_min"], m["lhs"], m["rhs"], m["ratio"]]
               for m in moments])
    passed = all(c["passed"] for c in checks)
    write_json(out / "hermite.json", {"max_order": max_order, "checks": checks, "passed": passed})
    if not passed:
        raise NumericFailure("a Hermite identity check failed")
    return {"passed": passed}


def _mixed_fd_error(k1, k2, x, mu, cov, h=1e-3):
    """Relative error of the Hermite mixed-derivative ratio against nested central differences."""
    from .hermite import mixed_derivative_ratio
    d = len(x)
    P = np.linalg.inv(cov)
    phi = lambda xx, mm: np.exp(-0.5 * (xx - mm) @ P @ (xx - mm))
    target = mixed_derivative_ratio(k1, k2, x, mu, cov)
    idx = np.indices((d,) * (k1 + k2)).reshape(k1 + k2, -1).T
    E = np.eye(d)
    fd = []
    for multi in idx:
        tot = 0.0
        for signs in np.array(np.meshgrid(*[[1, -1]] * len(multi))).reshape(len(multi), -1).T:
            dm = sum(s * E[i] for s, i in zip(signs[:k1], multi[:k1])) if k1 else 0.0
            dx = sum(s * E[i] for s, i in zip(signs[k1:], multi[k1:])) if k2 else 0.0
            tot += np.prod(signs) * phi(x + h * dx, mu + h * dm)
        fd.append(tot / (2 * h) ** len(multi) / phi(x, mu))
    fd = np.array(fd)
    return float(np.max(np.abs(fd - target)) / max(np.max(np.abs(target)), 1e-12))


def cmd_ctld_sample(cfg, args, out):
    from .sde import ChainState, run_chain
    model = build_model(cfg.get("model"), args.base_dir)
    schedule = build_schedule(cfg, model)
    steps = int(float(args.steps if args.steps is not None else cfg.get("steps", 100_000)))
    dt = float(cfg.get("dt", 1e-2 * min(1.0, schedule.lam)))
    thin = int(cfg.get("thin", 100))
    x0 = cfg.get("x0", model.means[-1].tolist())
    init = ChainState.single(x0, float(cfg.get("beta0", 0.0)))
    rng = np.random.default_rng(args.seed)
    traj, rep = run_chain(init, steps, dt, thin, model, schedule, rng,
                          frozen_beta=bool(cfg.get("frozen_beta", False)))
    header = ["chain", "step", "beta"] + [f"x{i}" for i in range(model.dim)]
    write_csv(out / "trajectory.csv", header, traj.tolist())
    summary = rep.to_dict()
    summary.update({"beta_max": schedule.beta_max, "discretization": "euler-maruyama, folded reflection"})
    write_json(out / "mixing.json", summary)
    return summary


def cmd_loss_check(cfg, args, out):
    from . import losses
    from .temper import noise_channel
    p = build_model(cfg.get("model"), args.base_dir)
    schedule = build_schedule(cfg, p)
    qs = [p.with_means(np.asarray(m, dtype=float)) for m in cfg.get("alternatives", [])]
    if not qs:
        qs = [p.with_means(p.means * 1.1), p.with_means(p.means * 0.9)]
    n = int(cfg.get("mc", 200_000))
    rng = np.random.default_rng(args.seed)
    x = p.sample(rng, n)
    ts = noise_channel(x, schedule, rng)
    rows = []
    for j, q in enumerate(qs):
        dq = p.unrotate(p.terms(x).score) - q.unrotate(q.terms(x).score)
        sm_dir = 0.5 * np.sum(dq ** 2, axis=1)
        sm_ibp = losses.sm_per_sample(q, x)[0]
        sx, sb = losses._gsm_population_on(p, q, schedule, ts, split=True)
        gsm_ibp = losses.gsm_ctld_per_sample(q, schedule, ts).total
        for kind, v in (("SM_population", sm_dir), ("SM_ibp", sm_ibp),
                        ("GSM_population", sx + sb), ("GSM_ibp", gsm_ibp)):
            rows.append([j, kind, float(v.mean()), float(v.std(ddof=1) / np.sqrt(n)), n, args.seed])
    write_csv(out / "losses.csv", ["model", "kind", "value", "std_error", "n_points", "seed"], rows)
    return {"rows": len(rows)}


class NumericFailure(RuntimeError):
    pass


COMMANDS = {
    "fit": cmd_fit,
    "sweep": cmd_sweep,
    "poincare-bound": cmd_poincare_bound,
    "poincare-oracle": cmd_poincare_oracle,
    "decomp-verify": cmd_decomp_verify,
    "hermite-verify": cmd_hermite_verify,
    "ctld-sample": cmd_ctld_sample,
    "loss-check": cmd_loss_check,
}


def make_parser():
    ap = argparse.ArgumentParser(prog="ctld", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="JSON config file")
        sp.add_argument("--seed", type=int, required=True)
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--workers", type=int, default=os.cpu_count() or 1)
        if name == "fit":
            sp.add_argument("--loss", choices=["mle", "sm", "gsm"])
        if name == "sweep":
            sp.add_argument("--resume", action="store_true", help="re-run only failed or missing cells")
        if name == "ctld-sample":
            sp.add_argument("--steps", type=float)
        if name == "hermite-verify":
            sp.add_argument("--max-order", type=int, dest="max_order")
    return ap


def main(argv=None):
    args = make_parser().parse_args(argv)
    for opt in ("loss", "resume", "steps", "max_order"):
        if not hasattr(args, opt):
            setattr(args, opt, None)
    out = Path(args.out)
    started = time.time()
    try:
        if args.seed < 0 or args.seed >= 2 ** 64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        cfg = load_config(args.config)
        args.base_dir = str(Path(args.config).parent) if args.config else "."
        out.mkdir(parents=True, exist_ok=True)
        manifest = {"command": args.command, "seed": args.seed, "config": cfg,
                    "version": f"ctld-{__version__}", "workers_requested": args.workers}
        write_json(out / "manifest.json", manifest)
        log(f"{args.command}: running")
        summary = COMMANDS[args.command](cfg, args, out)
        manifest["summary"] = summary
        write_json(out / "manifest.json", manifest)
        code = EXIT_OK
    except (ConfigError, MixtureError, ScheduleError, KeyError, TypeError) as exc:
        code = _fail(out, exc, EXIT_CONFIG)
    except (NumericFailure, FloatingPointError, RuntimeError, np.linalg.LinAlgError) as exc:
        code = _fail(out, exc, EXIT_NUMERIC)
    except ValueError as exc:
        code = _fail(out, exc, EXIT_CONFIG)
    try:
        write_json(out / "timing.json", {"started": started, "finished": time.time()})
    except OSError:
        pass
    return code


def _fail(out, exc, code):
    rec = {"error": type(exc).__name__, "message": str(exc), "exit_code": code}
    log(json.dumps(rec))
    try:
        out.mkdir(parents=True, exist_ok=True)
        write_json(out / "error.json", rec)
    except OSError:
        pass
    return code


if __name__ == "__main__":
    sys.exit(main())
