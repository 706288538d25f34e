"""Command-line entry point: ``gradguide {fit,sample,alg1,alg2,verify,figures}``.

Runs are configured by a TOML file with flat tables (see ``DEFAULTS`` for every
key).  ``--seed`` and ``--out`` override the file; ``--threads`` bounds the
sampler's worker count and never changes results.
"""

from __future__ import annotations

import argparse
import copy
import json
import math
import sys
import time
from pathlib import Path
from typing import Any

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .dataset import (
    Dataset,
    GaussianDist,
    generate_gaussian,
    generate_subspace,
    load_dataset,
    mean_off_support_ratio,
    random_basis,
)
from .guidance import BetaRule, GuidanceSpec
from .io import atomic_write_text, config_hash, write_csv
from .objective import DistNorm, Linear, Objective, QuadScalar, make_theta
from .optimizer import (
    CSV_COLUMNS,
    Alg2Rules,
    BatchSchedule,
    OptConfig,
    csv_rows,
    run_alg1,
    run_alg2,
)
from .sampler import SamplerConfig, sample, save_batch
from .schedule import NoiseSchedule
from .score import (
    LinearScoreModel,
    fit_full_linear,
    fit_mean_only,
    fit_subspace,
    freeze,
    model_from_dict,
)
from . import verify as verify_mod

__all__ = ["main", "load_config", "ConfigError", "DEFAULTS"]

DEFAULTS: dict[str, Any] = {
    "seed": 0,
    "out": "runs",
    "schedule": {"kind": "constant", "rate": 1.0, "horizon": 10.0, "knots": []},
    "dataset": {"kind": "subspace", "D": 64, "d": 16, "n": 5000, "path": ""},
    "score": {"class": "subspace", "model_path": ""},
    "objective": {"kind": "quad_scalar", "ratio": 9.0, "scale": 1.0, "a": 3.0, "c": 10.0,
                  "b_value": 4.0, "c0": 5.0, "w": 0.5},
    "guidance": {"kind": "loss", "sigma": 1.0, "beta_rule": "gaussian_theory", "beta_c": 1.0,
                 "delta": 0.9, "gamma": 1.0},
    "sampler": {"T": 10.0, "n_steps": 200, "batch": 512, "mode": "sde", "final_noise": False},
    "optimizer": {"K": 20, "lambda": 4.0, "batch": "constant", "B": 512, "B0": 256, "ratio": 4.0,
                  "cap": 65536, "exact_mean": False, "eta_rule": "two_over_L_plus_2lambda",
                  "eta": 0.0, "lambda_rule": "L_logK_over_4K", "alg2_lambda": 0.0},
    "figures": {"K": 20, "batch": 256, "lambdas": [4.0, 8.0, 16.0], "alg2_K": 50,
                "delta_loss": 0.9, "delta_naive": 0.2, "panel_deltas": [0.05, 0.2, 1.0]},
    "verify": {"fast": False},
}

SCORE_CLASSES = ("mean_only", "full_linear", "subspace", "frozen_cov")


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending field."""


# -- configuration -----------------------------------------------------------

def _merge(base: dict, over: dict, where: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, val in over.items():
        name = f"{where}{key}"
        if key not in base:
            raise ConfigError(f"{name}: unknown key")
        if isinstance(base[key], dict):
            if not isinstance(val, dict):
                raise ConfigError(f"{name}: expected a table")
            out[key] = _merge(base[key], val, f"{name}.")
        else:
            out[key] = val
    return out


def load_config(path: str | Path | None = None, overrides: dict | None = None) -> dict:
    raw: dict = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"--config: file {p} does not exist")
        with open(p, "rb") as fh:
            try:
                raw = tomllib.load(fh)
            except tomllib.TOMLDecodeError as exc:
                raise ConfigError(f"--config: {exc}") from exc
    cfg = _merge(DEFAULTS, raw)
    for key, val in (overrides or {}).items():
        if val is not None:
            cfg[key] = val
    _validate(cfg)
    return cfg


def _expect(cfg: dict, section: str, key: str, kind, cond=None, msg: str = ""):
    val = cfg[section][key] if section else cfg[key]
    name = f"{section}.{key}" if section else key
    if kind is float:
        ok = isinstance(val, (int, float)) and not isinstance(val, bool) and math.isfinite(val)
    elif kind is int:
        ok = isinstance(val, int) and not isinstance(val, bool)
    else:
        ok = isinstance(val, kind)
    if not ok:
        raise ConfigError(f"{name}: expected {kind.__name__}, got {val!r}")
    if cond is not None and not cond(val):
        raise ConfigError(f"{name}: {msg} (got {val!r})")
    return val


def _choice(cfg, section, key, options):
    return _expect(cfg, section, key, str, lambda v: v in options, f"must be one of {list(options)}")


def _validate(cfg: dict) -> None:
    _expect(cfg, "", "seed", int, lambda v: 0 <= v < 2 ** 64, "must be an unsigned 64-bit integer")
    _expect(cfg, "", "out", str)
    _choice(cfg, "schedule", "kind", ("constant", "tabulated"))
    _expect(cfg, "schedule", "rate", float, lambda v: v > 0, "must be positive")
    _expect(cfg, "schedule", "horizon", float, lambda v: v > 0, "must be positive")
    _expect(cfg, "schedule", "knots", list)
    _choice(cfg, "dataset", "kind", ("subspace", "gaussian", "load"))
    _expect(cfg, "dataset", "D", int, lambda v: v >= 1, "must be >= 1")
    _expect(cfg, "dataset", "d", int, lambda v: 1 <= v <= cfg["dataset"]["D"], "must lie in [1, D]")
    _expect(cfg, "dataset", "n", int, lambda v: v >= 2, "must be >= 2")
    _expect(cfg, "dataset", "path", str)
    if cfg["dataset"]["kind"] == "load" and not Path(cfg["dataset"]["path"]).exists():
        raise ConfigError(f"dataset.path: file {cfg['dataset']['path']!r} does not exist")
    _choice(cfg, "score", "class", SCORE_CLASSES)
    _expect(cfg, "score", "model_path", str)
    if cfg["score"]["model_path"] and not Path(cfg["score"]["model_path"]).exists():
        raise ConfigError(f"score.model_path: file {cfg['score']['model_path']!r} does not exist")
    _choice(cfg, "objective", "kind", ("linear", "quad_scalar", "dist_norm"))
    for key in ("ratio", "scale", "a", "c", "b_value", "c0", "w"):
        _expect(cfg, "objective", key, float)
    _expect(cfg, "objective", "scale", float, lambda v: v >= 0, "must be non-negative")
    _expect(cfg, "objective", "ratio", float, lambda v: v >= 0, "must be non-negative")
    _expect(cfg, "objective", "w", float, lambda v: v > 0, "must be positive")
    _choice(cfg, "guidance", "kind", ("loss", "naive", "none"))
    _expect(cfg, "guidance", "sigma", float, lambda v: v > 0, "must be positive")
    _choice(cfg, "guidance", "beta_rule", ("gaussian_theory", "subspace_theory", "constant"))
    _expect(cfg, "guidance", "beta_c", float, lambda v: v > 0, "must be positive")
    _expect(cfg, "guidance", "delta", float)
    _expect(cfg, "guidance", "gamma", float, lambda v: v > 0, "must be positive")
    _expect(cfg, "sampler", "T", float, lambda v: 0 < v <= cfg["schedule"]["horizon"],
            "must lie in (0, schedule.horizon]")
    _expect(cfg, "sampler", "n_steps", int, lambda v: v >= 1, "must be >= 1")
    _expect(cfg, "sampler", "batch", int, lambda v: v >= 1, "must be >= 1")
    _choice(cfg, "sampler", "mode", ("sde", "analytic_oracle"))
    _expect(cfg, "sampler", "final_noise", bool)
    _expect(cfg, "optimizer", "K", int, lambda v: v >= 1, "must be >= 1")
    _expect(cfg, "optimizer", "lambda", float, lambda v: v > 0, "must be positive")
    _choice(cfg, "optimizer", "batch", ("constant", "geometric"))
    for key in ("B", "B0", "cap"):
        _expect(cfg, "optimizer", key, int, lambda v: v >= 1, "must be >= 1")
    _expect(cfg, "optimizer", "ratio", float, lambda v: v >= 1, "must be >= 1")
    _expect(cfg, "optimizer", "exact_mean", bool)
    _choice(cfg, "optimizer", "eta_rule", ("two_over_L_plus_2lambda", "explicit"))
    _choice(cfg, "optimizer", "lambda_rule", ("L_logK_over_4K", "explicit"))
    _expect(cfg, "optimizer", "eta", float, lambda v: v >= 0, "must be non-negative")
    _expect(cfg, "optimizer", "alg2_lambda", float, lambda v: v >= 0, "must be non-negative")
    if cfg["optimizer"]["eta_rule"] == "explicit" and not cfg["optimizer"]["eta"] > 0:
        raise ConfigError("optimizer.eta: must be positive when eta_rule = 'explicit'")
    if cfg["optimizer"]["lambda_rule"] == "explicit" and not cfg["optimizer"]["alg2_lambda"] > 0:
        raise ConfigError("optimizer.alg2_lambda: must be positive when lambda_rule = 'explicit'")
    _expect(cfg, "figures", "K", int, lambda v: v >= 1, "must be >= 1")
    _expect(cfg, "figures", "alg2_K", int, lambda v: v >= 2, "must be >= 2")
    _expect(cfg, "figures", "batch", int, lambda v: v >= 1, "must be >= 1")
    _expect(cfg, "figures", "delta_loss", float)
    _expect(cfg, "figures", "delta_naive", float)
    _expect(cfg, "figures", "lambdas", list,
            lambda v: len(v) > 0 and all(isinstance(x, (int, float)) and x > 0 for x in v),
            "must be a non-empty list of positive numbers")
    _expect(cfg, "figures", "panel_deltas", list,
            lambda v: len(v) == 3 and all(isinstance(x, (int, float)) and not isinstance(x, bool) for x in v),
            "must list one number per reward panel (3)")
    _expect(cfg, "verify", "fast", bool)


def _hash_view(cfg: dict) -> dict:
    """Everything that can change results; output location is excluded."""
    return {k: v for k, v in cfg.items() if k != "out"}


# -- builders ----------------------------------------------------------------

def build_schedule(cfg: dict) -> NoiseSchedule:
    s = cfg["schedule"]
    try:
        if s["kind"] == "constant":
            return NoiseSchedule.constant(s["rate"], s["horizon"])
        return NoiseSchedule.tabulated(s["knots"], s["horizon"])
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"schedule: {exc}") from exc


def build_dataset(cfg: dict) -> Dataset:
    d = cfg["dataset"]
    seed = cfg["seed"]
    if d["kind"] == "load":
        return load_dataset(d["path"])
    if d["kind"] == "subspace":
        basis = random_basis(d["D"], d["d"], seed)
        return generate_subspace(basis, d["n"], seed + 1)
    rng = np.random.default_rng(seed)
    Q, _ = np.linalg.qr(rng.standard_normal((d["D"], d["D"])))
    cov = (Q * rng.uniform(0.2, 1.0, d["D"])) @ Q.T
    return generate_gaussian(GaussianDist(np.zeros(d["D"]), cov), d["n"], seed + 1)


def fit_model(cfg: dict, data: Dataset) -> LinearScoreModel:
    kind = cfg["score"]["class"]
    if kind == "mean_only":
        return fit_mean_only(data)
    if kind == "full_linear":
        return fit_full_linear(data)
    if kind == "subspace":
        return fit_subspace(data, d=cfg["dataset"]["d"])
    return freeze(fit_full_linear(data), data.basis)


def build_model(cfg: dict) -> LinearScoreModel:
    path = cfg["score"]["model_path"]
    if path:
        return model_from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
    return fit_model(cfg, build_dataset(cfg))


def build_objective(cfg: dict, model: LinearScoreModel) -> Objective:
    o = cfg["objective"]
    D = model.dim
    if o["kind"] == "dist_norm":
        return DistNorm(np.full(D, o["b_value"]), o["c0"], o["w"])
    if model.basis is not None:
        theta = make_theta(model.basis, o["ratio"], cfg["seed"] + 7)
    else:
        theta = np.random.default_rng(cfg["seed"] + 7).standard_normal(D)
        theta /= np.linalg.norm(theta)
    # scale = 0 gives a zero gradient for the linear objective
    theta = o["scale"] * theta
    if o["kind"] == "linear":
        return Linear(theta)
    return QuadScalar(theta, o["a"], o["c"])


def build_beta_rule(cfg: dict) -> BetaRule:
    g = cfg["guidance"]
    if g["beta_rule"] == "constant":
        return BetaRule.constant(g["beta_c"])
    return BetaRule(g["beta_rule"])


def build_sampler(cfg: dict, threads: int) -> SamplerConfig:
    s = cfg["sampler"]
    return SamplerConfig(T=float(s["T"]), n_steps=s["n_steps"], batch=s["batch"], seed=cfg["seed"],
                         mode=s["mode"], final_noise=s["final_noise"], threads=threads)


def build_opt(cfg: dict, threads: int) -> OptConfig:
    o = cfg["optimizer"]
    sched = BatchSchedule(o["batch"], o["B"], o["B0"], float(o["ratio"]), o["cap"])
    rules = Alg2Rules(o["eta_rule"], o["eta"] or None, o["lambda_rule"], o["alg2_lambda"] or None)
    return OptConfig(K=o["K"], lam=float(o["lambda"]), batch_schedule=sched,
                     sigma=float(cfg["guidance"]["sigma"]), beta_rule=build_beta_rule(cfg),
                     exact_mean=o["exact_mean"], sampler=build_sampler(cfg, threads), alg2=rules,
                     guidance="naive" if cfg["guidance"]["kind"] == "naive" else "loss")


# -- commands ----------------------------------------------------------------

def cmd_fit(cfg: dict, out: Path, threads: int) -> int:
    model = build_model(cfg)
    body = {"config": config_hash(_hash_view(cfg)), **model.to_dict()}
    atomic_write_text(out / "model.json", json.dumps(body, sort_keys=True) + "\n")
    print(f"wrote {out / 'model.json'} ({model.kind}, D={model.dim})")
    return 0


def cmd_sample(cfg: dict, out: Path, threads: int) -> int:
    schedule = build_schedule(cfg)
    model = build_model(cfg)
    g_cfg = cfg["guidance"]
    if g_cfg["kind"] == "none":
        spec = GuidanceSpec("none", np.zeros(model.dim), gamma=g_cfg["gamma"])
    else:
        obj = build_objective(cfg, model)
        mu = model.implied_gaussian().mean
        g = np.asarray(obj.grad(mu), dtype=float)
        spec = GuidanceSpec(g_cfg["kind"], g, g_cfg["delta"] + g @ mu, g_cfg["sigma"],
                            build_beta_rule(cfg), g_cfg["gamma"])
    scfg = build_sampler(cfg, threads)
    batch = sample(model, spec, scfg, schedule)
    h = config_hash(_hash_view(cfg))
    save_batch(out / "samples.csv", batch, {"guidance": spec.to_dict()}, {"config": h})
    rows = [("mean", j, v) for j, v in enumerate(batch.mean)]
    rows += [("var", j, v) for j, v in enumerate(np.diag(batch.cov))]
    if model.basis is not None:
        rows.append(("mean_off_support_ratio", "", mean_off_support_ratio(batch.samples, model.basis)))
    write_csv(out / "sample_stats.csv", ("stat", "index", "value"), rows, _hash_view(cfg))
    print(f"wrote {out / 'samples.csv'} ({scfg.batch} samples) and {out / 'sample_stats.csv'}")
    return 0


def _cmd_alg(cfg: dict, out: Path, threads: int, alg: int) -> int:
    schedule = build_schedule(cfg)
    model = build_model(cfg)
    obj = build_objective(cfg, model)
    opt = build_opt(cfg, threads)
    run = run_alg1 if alg == 1 else run_alg2
    state = run(model, obj, opt, schedule, seed=cfg["seed"])
    path = out / f"alg{alg}_trajectory.csv"
    write_csv(path, CSV_COLUMNS, csv_rows(state), _hash_view(cfg))
    last = state.history[-1]
    print(f"wrote {path}: K={state.k} f={last.f:.6g} gap={last.gap:.3g}")
    return 0


def cmd_alg1(cfg, out, threads):
    return _cmd_alg(cfg, out, threads, 1)


def cmd_alg2(cfg, out, threads):
    return _cmd_alg(cfg, out, threads, 2)


def cmd_verify(cfg: dict, out: Path, threads: int) -> int:
    t0 = time.perf_counter()
    reports = verify_mod.run_suite(seed=cfg["seed"], fast=cfg["verify"]["fast"])
    verify_mod.write_reports(out / "verify_report.csv", reports, _hash_view(cfg))
    table = verify_mod.summary_table(reports)
    atomic_write_text(out / "verify_summary.txt", table)
    print(table, end="")
    print(f"({time.perf_counter() - t0:.1f} s)")
    return 0 if all(r.passed for r in reports) else 1


def cmd_figures(cfg: dict, out: Path, threads: int) -> int:
    """CSVs for the guidance comparison, the alg1 reward curves and the alg2 reward curve.

    The guidance comparison uses the increment target ``y_k = delta + g_k^T z``
    for both guidance types.  The alg1 reward CSV holds two families per panel:
    ``increment`` rows use that target with the panel's delta, and ``one_step``
    rows use the target derived from ``lambda``, for each configured lambda.
    Only the one-step rows have a regularised optimum, so only they carry
    ``gap_to_x_star``.
    """
    schedule = build_schedule(cfg)
    seed = cfg["seed"]
    f = cfg["figures"]
    basis, model = verify_mod.subspace_setup(cfg["dataset"]["D"], cfg["dataset"]["d"], seed,
                                              cfg["dataset"]["n"])
    sampler = SamplerConfig(T=cfg["sampler"]["T"], n_steps=cfg["sampler"]["n_steps"],
                            batch=f["batch"], seed=seed, threads=threads)
    const = BatchSchedule("constant", B=f["batch"])
    h = _hash_view(cfg)
    quad9 = QuadScalar(make_theta(basis, 9.0, seed + 7), 3.0, 10.0)

    rows = []
    for alg, run in (("alg1", run_alg1), ("alg2", run_alg2)):
        for kind in ("naive", "loss"):
            opt = OptConfig(K=f["K"], lam=f["lambdas"][0], batch_schedule=const, sampler=sampler,
                            guidance=kind, alg2=Alg2Rules(), delta=f["delta_" + kind])
            state = run(model, quad9, opt, schedule, seed=seed)
            rows += [(alg, kind, r.k, r.sample_ratio, r.f) for r in state.history]
    write_csv(out / "fig_guidance_offsupport.csv",
              ("algorithm", "guidance", "k", "mean_off_support_ratio", "f"), rows, h)

    panels = {
        "a_theta_in_span": QuadScalar(make_theta(basis, 0.0, seed + 11), 3.0, 10.0),
        "b_theta_ratio9": quad9,
        "c_b_const4": DistNorm(np.full(basis.D, 4.0), 5.0, 0.5),
    }
    rows = []
    for (panel, obj), delta in zip(panels.items(), f["panel_deltas"]):
        opt = OptConfig(K=f["K"], lam=f["lambdas"][0], batch_schedule=const, sampler=sampler,
                        delta=float(delta))
        state = run_alg1(model, obj, opt, schedule, seed=seed)
        rows += [(panel, "increment", float(delta), r.k, r.f, None) for r in state.history]
        for lam in f["lambdas"]:
            opt = OptConfig(K=f["K"], lam=float(lam), batch_schedule=const, sampler=sampler)
            state = run_alg1(model, obj, opt, schedule, seed=seed)
            rows += [(panel, "one_step", float(lam), r.k, r.f, r.gap) for r in state.history]
    write_csv(out / "fig_alg1_reward.csv", ("panel", "target", "parameter", "k", "f", "gap_to_x_star"), rows, h)

    opt = OptConfig(K=f["alg2_K"], batch_schedule=const, sampler=sampler, alg2=Alg2Rules())
    st2 = run_alg2(model, quad9, opt, schedule, seed=seed)
    rows = [(r.k, r.f, r.gap, r.sample_ratio) for r in st2.history]
    write_csv(out / "fig_alg2_reward.csv", ("k", "f", "gap_to_f_star", "mean_off_support_ratio"), rows, h)
    print(f"wrote figure CSVs to {out}")
    return 0


COMMANDS = {
    "fit": cmd_fit,
    "sample": cmd_sample,
    "alg1": cmd_alg1,
    "alg2": cmd_alg2,
    "verify": cmd_verify,
    "figures": cmd_figures,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gradguide", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", type=Path, default=None, help="TOML run configuration")
    p.add_argument("--seed", type=int, default=None, help="master seed (overrides the config)")
    p.add_argument("--out", type=Path, default=None, help="output directory (overrides the config)")
    p.add_argument("--threads", type=int, default=1, help="sampler worker threads")
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.threads < 1:
            raise ConfigError("--threads: must be >= 1")
        cfg = load_config(args.config, {"seed": args.seed,
                                        "out": None if args.out is None else str(args.out)})
        return COMMANDS[args.command](cfg, Path(cfg["out"]), args.threads)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, TypeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
