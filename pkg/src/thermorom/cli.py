"""Config-driven command line entry point.

Subcommands: gen-data, train, active-train, eval-map, thermo, spectrum,
bound, indicator-corr, timing.  Every run writes into an output directory
containing a snapshot of the config, a manifest, and the command's
artifacts, so results are reconstructable from the directory alone.

Exit codes: 0 success, 2 config error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import shutil
import sys

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import __version__
from .active import ActiveConfig, active_train, corner_points, error_indicator
from .autoencoder import AutoEncoder, IdentityAutoEncoder, load_autoencoder
from .datasets import ArchiveError, TrajectoryDataset
from .evaluation import (bound_terms, correlate, error_map, latent_spectrum,
                         rom_rollout, thermo_rollout, timing_report,
                         trajectory_error)
from .generic import PGFinn, load_model
from .losses import LossWeights
from .optim import NonFiniteGradientError, NonFiniteLossError
from .systems import SolverError, generate_dataset, get_system
from .training import TrainSchedule, train

EXIT_CONFIG = 2
EXIT_NUMERICAL = 3


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# config loading and validation

_DEFAULTS = {
    "run": {"seed": 0, "out_dir": "runs/out", "jobs": 1},
    "system": {"name": None, "n_x": 1000, "m": 1.0, "k": 10.0, "beta": 1.0},
    "data": {"dt": None, "horizon": None, "keep_every_t": None, "keep_every_x": None,
             "train_mus": None, "domain_lo": None, "domain_hi": None, "archive": ""},
    "autoencoder": {"kind": "dense", "sizes": [200, 100, 5], "seed": 0},
    "model": {"latent_dim": 5, "n_skew": None, "hidden": [40, 40, 40, 40], "seed": 1,
              "known_energy_entropy": False, "scale_mu": True},
    "loss": {"lam_rec": 1e-1, "lam_jac": 1e-9, "lam_mod": 1e-7,
             "jac_mode": "with_derivatives", "int_scheme": "euler"},
    "train": {"phases": [[15000, 50]], "lr": 1e-4, "lr_decay": 0.99,
              "lr_decay_every": 2000, "checkpoint_every": 500},
    "active": {"n_additions": 4, "update_every": 3000, "pool_size": 16, "stride": 10},
    "eval": {"model_dir": "", "test_mus": None, "rollout": "euler", "n_steps": None},
}

_SYSTEM_NAMES = ("gas_containers", "thermo_mass", "burgers")


def load_config(path, overrides=()):
    try:
        with open(path, "rb") as f:
            cfg = tomllib.load(f)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except tomllib.TOMLDecodeError as err:
        raise ConfigError(f"{path}: {err}")
    merged = {}
    for section, defaults in _DEFAULTS.items():
        merged[section] = dict(defaults)
        user = cfg.get(section, {})
        if not isinstance(user, dict):
            raise ConfigError(f"{section}: expected a table")
        for key, value in user.items():
            if key not in defaults:
                raise ConfigError(f"{section}.{key}: unknown key")
            merged[section][key] = value
    for section in cfg:
        if section not in _DEFAULTS:
            raise ConfigError(f"{section}: unknown section")
    for item in overrides:
        _apply_override(merged, item)
    _validate(merged)
    return merged


def _apply_override(cfg, item):
    if "=" not in item:
        raise ConfigError(f"--set needs key=value, got {item!r}")
    key, raw = item.split("=", 1)
    parts = key.split(".")
    if len(parts) != 2 or parts[0] not in cfg or parts[1] not in cfg[parts[0]]:
        raise ConfigError(f"--set {key}: no such config key")
    try:
        value = tomllib.loads(f"x = {raw}")["x"]
    except tomllib.TOMLDecodeError:
        value = raw  # bare string
    cfg[parts[0]][parts[1]] = value


def _require(cond, path, message):
    if not cond:
        raise ConfigError(f"{path}: {message}")


def _validate(cfg):
    _require(cfg["system"]["name"] in _SYSTEM_NAMES, "system.name",
             f"must be one of {_SYSTEM_NAMES}")
    _require(isinstance(cfg["run"]["seed"], int), "run.seed", "must be an integer")
    _require(cfg["run"]["jobs"] >= 1, "run.jobs", "must be >= 1")
    lo, hi = cfg["data"]["domain_lo"], cfg["data"]["domain_hi"]
    _require(lo is not None and hi is not None, "data.domain_lo/domain_hi",
             "parameter domain is required")
    _require(len(lo) == len(hi), "data.domain_lo", "length must match domain_hi")
    _require(all(a < b for a, b in zip(lo, hi)), "data.domain_lo",
             "lower bounds must be below upper bounds")
    phases = cfg["train"]["phases"]
    _require(isinstance(phases, list) and phases, "train.phases", "need [[epochs, batch], ...]")
    for i, ph in enumerate(phases):
        _require(isinstance(ph, list) and len(ph) == 2, f"train.phases[{i}]",
                 "need [epochs, batch_size]")
        _require(ph[0] >= 0 and ph[1] >= 1, f"train.phases[{i}]", "invalid sizes")
    for key in ("lam_rec", "lam_jac", "lam_mod"):
        _require(cfg["loss"][key] >= 0, f"loss.{key}", "must be non-negative")
    _require(cfg["loss"]["jac_mode"] in ("with_derivatives", "frobenius"),
             "loss.jac_mode", "unknown mode")
    _require(cfg["loss"]["int_scheme"] in ("euler", "rk4"), "loss.int_scheme",
             "unknown scheme")
    ae = cfg["autoencoder"]
    _require(ae["kind"] in ("dense", "identity"), "autoencoder.kind", "unknown kind")
    if cfg["model"]["known_energy_entropy"]:
        _require(cfg["system"]["name"] != "burgers", "model.known_energy_entropy",
                 "no closed-form energy/entropy for this system")
        _require(ae["kind"] == "identity", "model.known_energy_entropy",
                 "known functions require the identity autoencoder")


# ---------------------------------------------------------------------------
# config -> objects


def build_system(cfg):
    name = cfg["system"]["name"]
    if name == "burgers":
        return get_system(name, n_x=cfg["system"]["n_x"])
    if name == "gas_containers":
        return get_system(name, m=cfg["system"]["m"])
    return get_system(name, k=cfg["system"]["k"], beta=cfg["system"]["beta"])


def parse_mus(spec, lo, hi, path="data.train_mus"):
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    if isinstance(spec, list):
        return [np.atleast_1d(np.asarray(m, dtype=float)) for m in spec]
    if spec == "corners":
        return list(corner_points(lo, hi))
    if isinstance(spec, str) and spec.startswith("uniform:"):
        n = int(spec.split(":")[1])
        if lo.size != 1:
            raise ConfigError(f"{path}: 'uniform:n' needs a 1-D domain")
        return [np.array([a]) for a in np.linspace(lo[0], hi[0], n)]
    if isinstance(spec, str) and spec.startswith("grid:"):
        counts = [int(c) for c in spec.split(":")[1].split("x")]
        if len(counts) != lo.size:
            raise ConfigError(f"{path}: grid rank must match the domain dimension")
        axes = [np.linspace(a, b, n) for a, b, n in zip(lo, hi, counts)]
        mesh = np.meshgrid(*axes, indexing="ij")
        return [np.array(p) for p in zip(*(m.ravel() for m in mesh))]
    raise ConfigError(f"{path}: cannot parse {spec!r}")


def gen_kwargs(cfg):
    data = cfg["data"]
    out = {}
    for src, dst in (("dt", "dt"), ("horizon", "horizon"),
                     ("keep_every_t", "keep_every_t"), ("keep_every_x", "keep_every_x")):
        if data[src] is not None:
            out[dst] = data[src]
    return out


def build_dataset(cfg, system, mus=None, jobs=1):
    if cfg["data"]["archive"]:
        return TrajectoryDataset.load(cfg["data"]["archive"])
    if mus is None:
        spec = cfg["data"]["train_mus"]
        if spec is None:
            raise ConfigError("data.train_mus: required when no archive is given")
        mus = parse_mus(spec, cfg["data"]["domain_lo"], cfg["data"]["domain_hi"])
    return generate_dataset(system, mus, jobs=jobs, **gen_kwargs(cfg))


def build_autoencoder(cfg, system):
    if cfg["autoencoder"]["kind"] == "identity":
        return IdentityAutoEncoder(system.n_state)
    sizes = list(cfg["autoencoder"]["sizes"])
    if sizes[0] != system.n_state:
        raise ConfigError(f"autoencoder.sizes: first size {sizes[0]} != state dimension "
                          f"{system.n_state} (after subsampling, set it to match)")
    return AutoEncoder.create(sizes, seed=cfg["autoencoder"]["seed"])


def build_model(cfg, system, latent_dim):
    m = cfg["model"]
    known = system.known_functions() if m["known_energy_entropy"] else None
    mu_range = None
    if m["scale_mu"]:
        mu_range = (cfg["data"]["domain_lo"], cfg["data"]["domain_hi"])
    return PGFinn.create(latent_dim, system.mu_dim, n_skew=m["n_skew"],
                         hidden=tuple(m["hidden"]), seed=m["seed"], known=known,
                         mu_range=mu_range)


def build_weights(cfg):
    c = cfg["loss"]
    return LossWeights(c["lam_rec"], c["lam_jac"], c["lam_mod"],
                       c["jac_mode"], c["int_scheme"])


def build_schedule(cfg, seed):
    t = cfg["train"]
    return TrainSchedule(phases=[tuple(p) for p in t["phases"]], lr=t["lr"],
                         lr_decay=t["lr_decay"], lr_decay_every=t["lr_decay_every"],
                         seed=seed, checkpoint_every=t["checkpoint_every"])


def latent_dim_of(cfg, system):
    if cfg["autoencoder"]["kind"] == "identity":
        return system.n_state
    return cfg["autoencoder"]["sizes"][-1]


def load_trained(cfg, args):
    model_dir = args.model_dir or cfg["eval"]["model_dir"]
    if not model_dir:
        raise ConfigError("eval.model_dir (or --model-dir): required for this command")
    ae = load_autoencoder(os.path.join(model_dir, "autoencoder"))
    model = load_model(os.path.join(model_dir, "model"))
    return ae, model


def prepare_out_dir(args, cfg, command):
    out = args.out_dir or cfg["run"]["out_dir"]
    os.makedirs(out, exist_ok=True)
    shutil.copy(args.config, os.path.join(out, "config.toml"))
    manifest = {"command": command, "seed": cfg["run"]["seed"],
                "version": __version__, "argv": sys.argv[1:]}
    with open(os.path.join(out, "run.json"), "w") as f:
        json.dump(manifest, f, indent=2)
    return out


def test_mus_of(cfg, default_spec):
    spec = cfg["eval"]["test_mus"] or default_spec
    return parse_mus(spec, cfg["data"]["domain_lo"], cfg["data"]["domain_hi"],
                     path="eval.test_mus")


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(cfg, args):
    out = prepare_out_dir(args, cfg, "gen-data")
    system = build_system(cfg)
    mus = parse_mus(cfg["data"]["train_mus"], cfg["data"]["domain_lo"],
                    cfg["data"]["domain_hi"])
    ds = generate_dataset(system, mus, jobs=cfg["run"]["jobs"], **gen_kwargs(cfg))
    ds.provenance["seed"] = cfg["run"]["seed"]
    ds.save(os.path.join(out, "data"))
    print(f"wrote {len(ds.trajectories)} trajectories to {out}/data")
    return 0


def _built_training_pieces(cfg, args):
    system = build_system(cfg)
    ae = build_autoencoder(cfg, system)
    model = build_model(cfg, system, latent_dim_of(cfg, system))
    weights = build_weights(cfg)
    schedule = build_schedule(cfg, cfg["run"]["seed"])
    return system, ae, model, weights, schedule


def cmd_train(cfg, args):
    out = prepare_out_dir(args, cfg, "train")
    system, ae, model, weights, schedule = _built_training_pieces(cfg, args)
    ds = build_dataset(cfg, system, jobs=cfg["run"]["jobs"])
    result = train(ds, ae, model, weights, schedule, out_dir=out)
    if result.aborted:
        print(f"training aborted: {result.error}", file=sys.stderr)
        return EXIT_NUMERICAL
    print(f"trained {schedule.total_epochs} epochs; final loss "
          f"{result.history[-1]['total']:.6e}; artifacts in {out}")
    return 0


def cmd_active_train(cfg, args):
    out = prepare_out_dir(args, cfg, "active-train")
    system, ae, model, weights, schedule = _built_training_pieces(cfg, args)
    lo = np.asarray(cfg["data"]["domain_lo"], dtype=float)
    hi = np.asarray(cfg["data"]["domain_hi"], dtype=float)
    ds = build_dataset(cfg, system, mus=list(corner_points(lo, hi)),
                       jobs=cfg["run"]["jobs"])
    a = cfg["active"]
    acfg = ActiveConfig(domain_lo=lo, domain_hi=hi, n_additions=a["n_additions"],
                        update_every=a["update_every"], pool_size=a["pool_size"],
                        stride=a["stride"], seed=cfg["run"]["seed"],
                        gen_kwargs=gen_kwargs(cfg))
    result = active_train(ds, ae, model, weights, schedule, acfg, system, out_dir=out)
    if result.train.aborted:
        print(f"training aborted: {result.train.error}", file=sys.stderr)
        return EXIT_NUMERICAL
    mus = [tr.mu.tolist() for tr in ds.trajectories]
    print(f"finished with {len(mus)} training points: {mus}; artifacts in {out}")
    return 0


def cmd_eval_map(cfg, args):
    out = prepare_out_dir(args, cfg, "eval-map")
    system = build_system(cfg)
    ae, model = load_trained(cfg, args)
    mus = test_mus_of(cfg, "grid:5x5" if system.mu_dim == 2 else "uniform:21")
    truth = generate_dataset(system, mus, jobs=cfg["run"]["jobs"], **gen_kwargs(cfg))
    training_mus = None
    if cfg["data"]["train_mus"] is not None:
        training_mus = parse_mus(cfg["data"]["train_mus"], cfg["data"]["domain_lo"],
                                 cfg["data"]["domain_hi"])
    res = error_map(ae, model, truth, training_mus=training_mus,
                    method=cfg["eval"]["rollout"])
    with open(os.path.join(out, "error_map.csv"), "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow([f"mu{i}" for i in range(system.mu_dim)] + ["error", "is_training"])
        for mu, err, flag in zip(res["mus"], res["errors"], res["is_training"]):
            writer.writerow(list(mu) + [err, int(flag)])
    with open(os.path.join(out, "summary.json"), "w") as f:
        json.dump({"mean": res["mean"], "max": res["max"]}, f, indent=2)
    print(f"max relative error {res['max']:.4f}, mean {res['mean']:.4f}; map in {out}")
    return 0


def cmd_thermo(cfg, args):
    out = prepare_out_dir(args, cfg, "thermo")
    system = build_system(cfg)
    ae, model = load_trained(cfg, args)
    mus = test_mus_of(cfg, "corners")
    ds_kwargs = gen_kwargs(cfg)
    dt = (ds_kwargs.get("dt", system.default_dt)
          * (ds_kwargs.get("keep_every_t", system.default_keep[0])))
    n_steps = cfg["eval"]["n_steps"] or int(round(
        ds_kwargs.get("horizon", system.default_horizon) / dt))
    for i, mu in enumerate(mus):
        z0 = ae.encode(system.initial_state(mu))
        series = thermo_rollout(model, z0, mu, dt, n_steps, method=cfg["eval"]["rollout"])
        with open(os.path.join(out, f"thermo_{i:03d}.csv"), "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["t", "energy", "entropy", "entropy_rate"])
            for row in zip(series.t, series.energy, series.entropy, series.entropy_rate):
                writer.writerow(row)
    print(f"wrote {len(mus)} thermodynamic rollouts to {out}")
    return 0


def cmd_spectrum(cfg, args):
    out = prepare_out_dir(args, cfg, "spectrum")
    system = build_system(cfg)
    ae, model = load_trained(cfg, args)
    mus = test_mus_of(cfg, "corners")
    ds_kwargs = gen_kwargs(cfg)
    dt = (ds_kwargs.get("dt", system.default_dt)
          * (ds_kwargs.get("keep_every_t", system.default_keep[0])))
    n_steps = cfg["eval"]["n_steps"] or int(round(
        ds_kwargs.get("horizon", system.default_horizon) / dt))
    centroids = {}
    for i, mu in enumerate(mus):
        roll = rom_rollout(ae, model, system.initial_state(mu), mu, dt, n_steps,
                           method=cfg["eval"]["rollout"])
        freqs, mags, cents = latent_spectrum(roll.Z, dt)
        with open(os.path.join(out, f"spectrum_{i:03d}.csv"), "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["freq_hz"] + [f"dim{j}" for j in range(mags.shape[1])])
            for k in range(len(freqs)):
                writer.writerow([freqs[k]] + list(mags[k]))
        centroids[str(list(mu))] = cents.tolist()
    with open(os.path.join(out, "centroids.json"), "w") as f:
        json.dump(centroids, f, indent=2)
    print(f"wrote {len(mus)} latent spectra to {out}")
    return 0


def cmd_bound(cfg, args):
    out = prepare_out_dir(args, cfg, "bound")
    system = build_system(cfg)
    ae, model = load_trained(cfg, args)
    mus = test_mus_of(cfg, cfg["data"]["train_mus"] or "corners")
    truth = generate_dataset(system, mus, jobs=cfg["run"]["jobs"], **gen_kwargs(cfg))
    ratios = []
    for i, tr in enumerate(truth.trajectories):
        roll = rom_rollout(ae, model, tr.U[0], tr.mu, truth.dt, tr.U.shape[0] - 1,
                           method=cfg["eval"]["rollout"])
        if roll.diverged:
            print(f"rollout diverged at mu={tr.mu}", file=sys.stderr)
            return EXIT_NUMERICAL
        res = bound_terms(ae, model, tr, roll.Z)
        with open(os.path.join(out, f"bound_{i:03d}.csv"), "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["t", "eps_int", "eps_rec", "eps_jac", "eps_mod",
                             "error", "ratio"])
            for row in zip(res["t"], res["eps_int"], res["eps_rec"], res["eps_jac"],
                           res["eps_mod"], res["error"], res["ratio"]):
                writer.writerow(row)
        ratios.extend(res["ratio"][np.isfinite(res["ratio"])].tolist())
    ratios = np.array(ratios)
    summary = {"ratio_max": float(np.max(ratios)), "ratio_median": float(np.median(ratios)),
               "max_over_median": float(np.max(ratios) / np.median(ratios))}
    with open(os.path.join(out, "summary.json"), "w") as f:
        json.dump(summary, f, indent=2)
    print(f"bound diagnostics in {out}; max/median ratio "
          f"{summary['max_over_median']:.2f}")
    return 0


def cmd_indicator_corr(cfg, args):
    out = prepare_out_dir(args, cfg, "indicator-corr")
    system = build_system(cfg)
    ae, model = load_trained(cfg, args)
    mus = test_mus_of(cfg, "grid:4x4" if system.mu_dim == 2 else "uniform:16")
    truth = generate_dataset(system, mus, jobs=cfg["run"]["jobs"], **gen_kwargs(cfg))
    n_steps = truth.trajectories[0].U.shape[0] - 1
    stride = cfg["active"]["stride"]
    indicators, errors = [], []
    for tr in truth.trajectories:
        indicators.append(error_indicator(ae, model, tr.mu, system, truth.dt,
                                          n_steps, stride, cfg["eval"]["rollout"]))
        errors.append(trajectory_error(ae, model, tr, truth.dt, cfg["eval"]["rollout"]))
    pearson, spearman = correlate(np.array(indicators), np.array(errors))
    with open(os.path.join(out, "pairs.csv"), "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow([f"mu{i}" for i in range(system.mu_dim)] + ["indicator", "error"])
        for mu, ind, err in zip(mus, indicators, errors):
            writer.writerow(list(mu) + [ind, err])
    with open(os.path.join(out, "summary.json"), "w") as f:
        json.dump({"pearson": pearson, "spearman": spearman, "n": len(mus)}, f, indent=2)
    print(f"indicator correlation over {len(mus)} parameters: "
          f"pearson {pearson:.3f}, spearman {spearman:.3f}")
    return 0


def cmd_timing(cfg, args):
    out = prepare_out_dir(args, cfg, "timing")
    system = build_system(cfg)
    ae, model = load_trained(cfg, args)
    mus = test_mus_of(cfg, "corners")
    ds_kwargs = gen_kwargs(cfg)
    dt = (ds_kwargs.get("dt", system.default_dt)
          * (ds_kwargs.get("keep_every_t", system.default_keep[0])))
    n_steps = cfg["eval"]["n_steps"] or int(round(
        ds_kwargs.get("horizon", system.default_horizon) / dt))
    report = timing_report(ae, model, system, mus[0], dt, n_steps,
                           method=cfg["eval"]["rollout"])
    with open(os.path.join(out, "timing.json"), "w") as f:
        json.dump(report, f, indent=2)
    print(f"FOM {report['fom_s']:.4f}s vs ROM {report['rom_s']:.4f}s: "
          f"{report['speedup']:.1f}x speed-up")
    return 0


_COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "active-train": cmd_active_train,
    "eval-map": cmd_eval_map,
    "thermo": cmd_thermo,
    "spectrum": cmd_spectrum,
    "bound": cmd_bound,
    "indicator-corr": cmd_indicator_corr,
    "timing": cmd_timing,
}


def make_parser():
    parser = argparse.ArgumentParser(
        prog="thermorom",
        description="Thermodynamically consistent reduced-order modeling")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="TOML configuration file")
        p.add_argument("--seed", type=int, default=None, help="override run.seed")
        p.add_argument("--jobs", type=int, default=None, help="bound intra-run parallelism")
        p.add_argument("--out-dir", default=None, help="override run.out_dir")
        p.add_argument("--model-dir", default=None,
                       help="trained run artifacts (final/ directory) for eval commands")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config key, e.g. --set train.lr=1e-3")
    return parser


def main(argv=None):
    args = make_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, overrides=args.set)
        if args.seed is not None:
            cfg["run"]["seed"] = args.seed
        if args.jobs is not None:
            cfg["run"]["jobs"] = args.jobs
        return _COMMANDS[args.command](cfg, args)
    except (ConfigError, ArchiveError) as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except (SolverError, NonFiniteLossError, NonFiniteGradientError,
            FloatingPointError) as err:
        print(f"numerical failure: {err}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
