"""
Command-line interface: ``robustglmm {simulate,fit,experiment,diagnose}``.

Every subcommand reads one configuration file (see ``docs/config.md``).
On failure a single line ``error: <ErrorClass>: <message>`` goes to stderr
and the exit status is 1 (2 for usage errors).  Runs are stateless; an
interrupted experiment is simply started again.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .config import RunConfig, load_config
from .core import (CovStructure, EstimatorKind, Family, ParameterPoint, extract_g_params,
                   read_dataset_csv, write_dataset_csv)
from .errors import ConfigError, InsufficientGrid, RobustGLMMError
from .experiments import (contaminate, fit_convergence_rate, run_consistency_experiment,
                          simulate, tail_decay_from_curve, write_curves_csv,
                          write_plot_data)


def default_threads() -> int:
    try:
        return len(os.sched_getaffinity(0))
    except AttributeError:
        return os.cpu_count() or 1


def _fmt_vec(v) -> str:
    return "[" + ", ".join(f"{x:.10g}" for x in np.ravel(v)) + "]"


def cmd_simulate(cfg: RunConfig, out: Path) -> None:
    sim = cfg.sim_config()
    rep = cfg.get("simulation", "replication")
    data = simulate(sim, rep)
    if sim.contamination is not None:
        c = sim.contamination
        data = contaminate(data, c.fraction, c.shift, c.target)
    write_dataset_csv(data, out)
    print(f"n={data.n} m={data.m} p={data.p} q={data.q} seed={sim.seed} "
          f"replication={rep} rows={data.n * data.m} out={out}")


def _fit(cfg: RunConfig, data, estimator=None):
    estimator = estimator or cfg.estimator()
    settings = cfg.fit_settings()
    if cfg.family is Family.GAUSSIAN:
        from .lmm import fit_lmm
        return fit_lmm(data, estimator, structure=cfg.structure, opts=settings.opts)
    from .logistic import fit_logistic, gh_rule
    return fit_logistic(data, estimator, rule=gh_rule(settings.gh_order),
                        structure=cfg.structure, opts=settings.opts)


def cmd_fit(cfg: RunConfig, data_path: Path, out: Optional[Path]) -> None:
    data = read_dataset_csv(data_path)
    res = _fit(cfg, data)
    G = res.G(cfg.structure) if data.q else np.zeros((0, 0))
    est = res.estimator
    print(f"estimator={est.label}")
    print(f"beta={_fmt_vec(res.point.beta)}")
    if res.point.sigma0_sq is not None:
        print(f"sigma0_sq={res.point.sigma0_sq:.10g}")
    print(f"G={_fmt_vec(G)}")
    print(f"loss={res.loss:.12g} iterations={res.iterations} "
          f"converged={str(res.converged).lower()} termination={res.termination}")
    record = {
        "estimator": est.kind.value,
        "alpha": est.alpha,
        "family": cfg.family.value,
        "beta": [float(b) for b in res.point.beta],
        "sigma0_sq": res.point.sigma0_sq,
        "G": G.tolist(),
        "loss": res.loss,
        "grad_norm": res.grad_norm,
        "iterations": res.iterations,
        "converged": res.converged,
        "termination": res.termination,
    }
    out = out or data_path.with_suffix(".fit.json")
    out.write_text(json.dumps(record, indent=2) + "\n")


def cmd_experiment(cfg: RunConfig, out_dir: Path, threads: int) -> None:
    sim = cfg.experiment_config()
    e = cfg.values["experiment"]
    out_dir.mkdir(parents=True, exist_ok=True)
    curves = run_consistency_experiment(sim, e["estimators"], cfg.fit_settings(),
                                        e["epsilons"], threads)
    o = cfg.values["output"]
    write_curves_csv(curves, out_dir / o["curves"], e["record_timing"])
    write_plot_data(curves, out_dir / o["plot_data"])
    lines = ["estimator,slope,intercept,r_squared,tail_epsilon,tail_decay,tail_r_squared"]
    for c in curves:
        try:
            r = fit_convergence_rate(c)
            rate = f"{r.slope:.6f},{r.intercept:.6f},{r.r_squared:.6f}"
        except InsufficientGrid:
            rate = "NA,NA,NA"
        tail = ",,"
        if e["tail_epsilon"] is not None:
            try:
                t = tail_decay_from_curve(c, e["tail_epsilon"])
                tail = f"{e['tail_epsilon']:g},{t.decay:.6f},{t.r_squared:.6f}"
            except InsufficientGrid:
                tail = f"{e['tail_epsilon']:g},NA,NA"
        lines.append(f"{c.label},{rate},{tail}")
    (out_dir / o["summary"]).write_text("\n".join(lines) + "\n")
    print("\n".join(lines))


def _truth_point(cfg: RunConfig, q: int) -> ParameterPoint:
    cfg.require("simulation", "beta0", "sigma_u_sq")
    s = cfg.values["simulation"]
    G = s["sigma_u_sq"] * np.eye(q)
    g = extract_g_params(G, cfg.structure) if q else np.zeros(0)
    return ParameterPoint(np.asarray(s["beta0"]), s["sigma0_sq"], g)


def cmd_diagnose(cfg: RunConfig, data_path: Path) -> None:
    from . import diagnostics as dg
    from .lmm import fit_lmm

    if cfg.family is not Family.GAUSSIAN:
        raise ConfigError("diagnostics are available for the gaussian family only")
    data = read_dataset_csv(data_path)
    d = cfg.values["diagnostics"]
    if d["point"] == "truth":
        point = _truth_point(cfg, data.q)
    else:
        point = fit_lmm(data, structure=cfg.structure, opts=cfg.optimizer_options()).point
    sub = data
    if d["groups"] is not None:
        sub = type(data)(data.y[:d["groups"]], data.X[:d["groups"]], data.Z[:d["groups"]])
    st = cfg.structure
    for name in d["conditions"]:
        if name == "A3":
            rep = dg.check_A3(data, point, structure=st)
        elif name == "B1":
            rep = dg.check_B1(data, point, st)
        elif name == "B3":
            rep = dg.check_B3(data, point, d["alpha"], d["groups"], st)
        elif name == "B4":
            rep = dg.check_B4(dg.marginal_covariances(sub, point, st))
        else:
            rep = dg.check_B5(dg.marginal_covariances(sub, point, st), d["alpha"],
                              d["mc_draws"], d["seed"])
        print(rep.line())
    if d["alpha_grid"] is not None:
        first = dg.b3_first_violation(data, point, d["alpha_grid"], st)
        print(f"name=B3_sweep first_violating_alpha={'none' if first is None else f'{first:g}'}")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="robustglmm",
                                 description="Robust M-estimation for mixed models.")
    sub = ap.add_subparsers(dest="command", required=True)
    p = sub.add_parser("simulate", help="simulate one dataset to CSV")
    p.add_argument("--config", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    p = sub.add_parser("fit", help="fit one estimator to a dataset CSV")
    p.add_argument("--config", required=True, type=Path)
    p.add_argument("--data", required=True, type=Path)
    p.add_argument("--out", type=Path, help="JSON result (default: <data>.fit.json)")
    p = sub.add_parser("experiment", help="run the Monte-Carlo consistency experiment")
    p.add_argument("--config", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path, help="output directory")
    p.add_argument("--threads", type=int, default=None)
    p = sub.add_parser("diagnose", help="check regularity conditions on a dataset")
    p.add_argument("--config", required=True, type=Path)
    p.add_argument("--data", required=True, type=Path)
    return ap


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        if args.command == "simulate":
            cmd_simulate(cfg, args.out)
        elif args.command == "fit":
            cmd_fit(cfg, args.data, args.out)
        elif args.command == "experiment":
            threads = args.threads if args.threads is not None else default_threads()
            if threads < 1:
                raise ConfigError("--threads must be at least 1")
            cmd_experiment(cfg, args.out, threads)
        else:
            cmd_diagnose(cfg, args.data)
    except (RobustGLMMError, OSError, ValueError) as err:
        msg = " ".join(str(err).split())
        print(f"error: {type(err).__name__}: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
