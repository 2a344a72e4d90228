"""Command line entry point: ``diffqc {train,eval,gradcheck,verify}``.

Every subcommand writes ``summary.json`` into the output directory, also when
it fails, and exits nonzero if any check did not pass.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import autodiff as ad
from ._kernels import backend
from .agent import AgentParams, init_params, load_checkpoint, save_checkpoint
from .config import PRESETS, ConfigError, RunConfig, load_preset, parse_config
from .integrator import StepSpec, evolve_batch
from .realspace import batch_fidelity, fidelity
from .reinforce import HISTORY_FIELDS as PG_FIELDS
from .reinforce import train_reinforce
from .systems import build_parametron, build_spin_chain, cat_state, drift_eigenstate, ghz_state, neel_indices
from .trainer import (
    HISTORY_FIELDS,
    NormDriftError,
    TrainingError,
    evaluate,
    make_test_set,
    rollout,
    train,
)

log = logging.getLogger("diffqc")

GRADCHECK_TOL = 1e-5
EIGEN_CAT_MIN = 0.99
GHZ_DRIFT_TOL = 1e-6


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="run configuration file")
    p.add_argument("--preset", choices=sorted(PRESETS), help="built-in hyperparameter set")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int, help="override the number of training epochs")
    p.add_argument("--threads", type=int)
    p.add_argument("--deterministic", action="store_true", help="serial reduction for bit-exact reruns")
    p.add_argument("--dt-mode", choices=("substep", "interval"))
    p.add_argument("--out", type=Path, help="output directory")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="diffqc", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    _common(sub.add_parser("train", help="train an agent; writes history.csv, eval.csv and a checkpoint"))
    ev = sub.add_parser("eval", help="evaluate a checkpoint on the test set")
    _common(ev)
    ev.add_argument("--checkpoint", type=Path, help="checkpoint manifest (default: OUT/checkpoint.json)")
    gc = sub.add_parser("gradcheck", help="compare tape gradients with central differences")
    _common(gc)
    gc.add_argument("--n-steps", type=int, default=10)
    gc.add_argument("--n-sub", type=int, default=5)
    gc.add_argument("--batch", type=int, default=4)
    gc.add_argument("--eps", type=float, default=1e-3)
    gc.add_argument("--coords", type=int, default=500)
    gc.add_argument("--tol", type=float, default=GRADCHECK_TOL)
    _common(sub.add_parser("verify", help="check eigen-cat overlap, Neel degeneracy and GHZ drift invariance"))
    return parser


def resolve_config(args) -> RunConfig:
    run = {}
    if args.seed is not None:
        run["seed"] = args.seed
    if args.threads is not None:
        run["threads"] = args.threads
    if args.deterministic:
        run["deterministic"] = True
    if args.dt_mode is not None:
        run["dt_mode"] = args.dt_mode
    if args.out is not None:
        run["out"] = str(args.out)
    overrides = {"run": run}
    if args.config is not None:
        rc = parse_config(args.config, args.preset, overrides)
    elif args.preset is not None:
        rc = load_preset(args.preset, overrides)
    else:
        raise ConfigError("give --config PATH or --preset NAME")
    if args.epochs is not None:
        section = "reinforce" if rc.mode == "reinforce" else "train"
        overrides.setdefault(section, {})["epochs"] = args.epochs
        rc = parse_config(args.config, args.preset, overrides) if args.config else load_preset(args.preset, overrides)
    return rc


def _meta(rc: RunConfig) -> dict:
    return {"config_hash": rc.config_hash, "seed": rc.seed}


def _write_summary(out: Path, summary: dict) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True, default=float) + "\n")


def cmd_train(rc: RunConfig) -> dict:
    cfg = rc.train
    out = rc.out
    out.mkdir(parents=True, exist_ok=True)
    if rc.mode == "reinforce":
        r = rc.reinforce
        cfg = dataclasses.replace(cfg, batch=r["batch"], epochs=r["epochs"], lr=r["lr"])
        params, history = train_reinforce(cfg, sigma2=r["sigma2"])
        fields = PG_FIELDS
    else:
        params, history = train(cfg)
        fields = HISTORY_FIELDS
    history.write_csv(out / "history.csv", fields, _meta(rc))
    ckpt = save_checkpoint(params, out / "checkpoint", rc.config_hash, rc.seed)
    task = cfg.task
    ev = evaluate(params, make_test_set(task, cfg.eval_set_size, rc.seed), task.horizon, task.target, task.system)
    ev.write_csv(out / "eval.csv", _meta(rc))
    last = history.rows[-1]
    return {
        "ok": True,
        "epochs": len(history),
        "final_epoch": {k: last[k] for k in fields},
        "evaluation": ev.summary(),
        "checkpoint": str(ckpt),
    }


def cmd_eval(rc: RunConfig, checkpoint: Path | None) -> dict:
    path = checkpoint or rc.out / "checkpoint.json"
    params, manifest = load_checkpoint(path)
    task = rc.train.task
    params.arch.check_system(task.dim, task.num_controls)
    ev = evaluate(params, make_test_set(task, rc.train.eval_set_size, rc.seed), task.horizon, task.target, task.system)
    rc.out.mkdir(parents=True, exist_ok=True)
    ev.write_csv(rc.out / "eval.csv", _meta(rc))
    return {
        "ok": True,
        "checkpoint": str(path),
        "checkpoint_config_hash": manifest.get("config_hash"),
        "evaluation": ev.summary(),
    }


def gradcheck_report(rc: RunConfig, n_steps=10, n_sub=5, batch=4, eps=1e-3, coords=500, seed=0) -> dict:
    """Relative error of the rollout-loss gradient on a truncated horizon."""
    cfg = rc.train
    spec = StepSpec(n_steps, n_sub, cfg.task.horizon.dt)
    task = dataclasses.replace(cfg.task, horizon=spec)
    x0 = task.sample_batch(rc.seed, 1, 1, batch)
    arch = cfg.arch
    start = init_params(arch, rc.seed).arrays()

    def f(tensors):
        ro = rollout(task.system, AgentParams(arch, tensors), x0, spec, task.target, cfg.weights)
        return ad.mean(ro.loss)

    t0 = time.perf_counter()
    rep = ad.grad_check(f, start, eps=eps, max_coords=coords, seed=seed, report=True)
    return {
        "max_rel_error": rep.max_rel_error,
        "checked": rep.checked,
        "skipped_kinks": rep.skipped_kinks,
        "eps": eps,
        "n_steps": n_steps,
        "n_sub": n_sub,
        "batch": batch,
        "seconds": time.perf_counter() - t0,
    }


def cmd_gradcheck(rc: RunConfig, args) -> dict:
    rep = gradcheck_report(rc, args.n_steps, args.n_sub, args.batch, args.eps, args.coords, rc.seed)
    rep["tolerance"] = args.tol
    rep["ok"] = bool(rep["max_rel_error"] < args.tol)
    return rep


def verify_claims(rc: RunConfig) -> dict:
    """The three system-level statements the experiments rely on."""
    task = rc.train.task
    p = task.params
    checks = {}

    if task.kind == "parametron":
        U, G, D, alpha = p["U"], p["G"], p["D"], p["alpha"]
    else:
        U, G, D, alpha = 1.0, -4.0, 16, 2.0
    para = build_parametron(U, G, D)
    overlap = fidelity(drift_eigenstate(para, 1), cat_state(alpha, D))
    checks["eigen_cat"] = {"U": U, "G": G, "D": D, "alpha": alpha, "fidelity": overlap, "ok": bool(overlap > EIGEN_CAT_MIN)}

    if task.kind == "spin_chain":
        M, J, spec = p["M"], p["J"], task.horizon
    else:
        M, J = 3, 1.0
        spec = load_preset("ghz-m3").train.task.horizon
    chain = build_spin_chain(M, J)
    energies = np.diag(chain.drift.h_re)
    lowest = np.sort(energies)
    neel = [float(energies[i]) for i in neel_indices(M)]
    degenerate = bool(
        abs(lowest[0] - lowest[1]) < 1e-12
        and lowest[2] - lowest[1] > 1e-9
        and all(abs(e - lowest[0]) < 1e-12 for e in neel)
    )
    checks["neel_degeneracy"] = {"M": M, "J": J, "two_lowest": lowest[:2].tolist(), "neel_energies": neel, "ok": degenerate}

    ghz = ghz_state(M)
    x = ghz.stacked[None, :]
    zero = np.zeros((1, chain.num_controls))
    worst = 0.0
    for _ in range(spec.n_steps):
        x = evolve_batch(chain, x, zero, spec.n_sub, spec.dt)
        worst = max(worst, abs(1.0 - float(batch_fidelity(x, ghz)[0])))
    checks["ghz_drift_invariance"] = {"M": M, "horizon": spec.horizon, "max_fidelity_change": worst, "ok": bool(worst < GHZ_DRIFT_TOL)}
    return {"ok": all(c["ok"] for c in checks.values()), "checks": checks}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    out = args.out or Path("runs/out")
    summary = {"command": args.command, "backend": backend()}
    try:
        rc = resolve_config(args)
        out = rc.out
        summary.update(config_hash=rc.config_hash, seed=rc.seed, preset=rc.preset, mode=rc.mode)
        if args.command == "train":
            summary.update(cmd_train(rc))
        elif args.command == "eval":
            summary.update(cmd_eval(rc, args.checkpoint))
        elif args.command == "gradcheck":
            summary.update(cmd_gradcheck(rc, args))
        else:
            summary.update(verify_claims(rc))
    except (ConfigError, TrainingError, NormDriftError, FileNotFoundError, ValueError) as exc:
        summary.update(ok=False, error=f"{type(exc).__name__}: {exc}")
        print(f"error: {exc}", file=sys.stderr)
    _write_summary(out, summary)
    print(json.dumps({k: v for k, v in summary.items() if k != "final_epoch"}, indent=2, sort_keys=True, default=float))
    return 0 if summary.get("ok") else 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
