"""Experiment runner.

Subcommands: sampler-bench | gmm-unsup | gmm-ssl | anomaly | generate |
interpolate | conditional.  Every run takes a TOML config (unknown keys
rejected) plus flag overrides, writes its outputs as CSV files into --out,
and drops a resolved_config.toml recording every default actually used.
Runs are deterministic given (config, seed) regardless of --threads.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from . import anomaly as anomaly_mod
from . import evaluation, models, targets, training
from .autodiff import NonFiniteError
from .models import LabeledExample
from .samplers import (ChainDivergedError, SamplerConfig, ancestral_rows,
                       conditional_revise, interpolate_latent, rng_stream,
                       rng_streams, sample_model)
from .training import TrainConfig, TrainingDivergedError


class ConfigError(Exception):
    pass


ALL_SAMPLERS = ("ld_exact", "hmc_exact", "sgld", "sghmc", "coopnet")

_REVISION_DEFAULTS = {
    "kind": "sgld",
    "steps": 10,
    "delta": 0.01,
    "schedule": [],          # empty = constant delta
    "beta": 0.1,
    "inner_steps": 1,
    "coop_lx": 20,
    "coop_lh": 20,
}

DEFAULTS = {
    "sampler-bench": {
        "dim": 10,
        "chains": 200,
        "steps": 2000,
        "schedule": [10.0, 1000.0, 2.0],
        "beta": 0.1,
        "inner_steps": 1,
        "coop_lx": 20,
        "coop_lh": 20,
        "samplers": list(ALL_SAMPLERS),
        "seed": 0,
        "threads": 1,
    },
    "gmm-unsup": {
        "iterations": 40000,
        "batch_size": 100,
        "lr_potential": 0.001,
        "lr_generator": 0.001,
        "adam_beta1": 0.5,
        "adam_beta2": 0.9,
        "data_n": 1600,
        "sigma": 0.05,
        "latent_dim": 2,
        "potential_hidden": [100, 100],
        "generator_hidden": [50, 50],
        "coverage_reps": 100,
        "eval_samples": 1000,
        "metric_every": 200,
        "revision": dict(_REVISION_DEFAULTS),
        "seed": 0,
        "threads": 1,
    },
    "gmm-ssl": {
        "iterations": 24000,
        "batch_size": 100,
        "lr_potential": 0.001,
        "lr_generator": 0.001,
        "adam_beta1": 0.5,
        "adam_beta2": 0.9,
        "unlabeled_n": 400,
        "labels_per_class": 4,
        "alpha_d": 10.0,
        "alpha_c": 10.0,
        "alpha_p": 0.0,
        "heldout_n": 1000,
        "grid_res": 100,
        "grid_lo": -3.0,
        "grid_hi": 3.0,
        "sigma": 0.05,
        "latent_dim": 2,
        "potential_hidden": [100, 100],
        "generator_hidden": [50, 50],
        "metric_every": 200,
        "revision": dict(_REVISION_DEFAULTS),
        "seed": 0,
        "threads": 1,
    },
    "anomaly": {
        "iterations": 4000,
        "train_n": 2000,
        "test_normal": 800,
        "test_anomaly": 200,
        "quantile": 0.0,     # 0 = use the true anomaly fraction of the test set
        "alpha_p": 0.1,
        "sigma": 0.1,
        "train_csv": "",
        "test_csv": "",
        "label_col": -1,
        "latent_dim": 5,
        "seed": 0,
        "threads": 1,
    },
    "generate": {
        "checkpoint_potential": "",
        "checkpoint_generator": "",
        "n": 1000,
        "revise": True,
        "revision": dict(_REVISION_DEFAULTS),
        "seed": 0,
        "threads": 1,
    },
    "interpolate": {
        "checkpoint_generator": "",
        "steps": 10,
        "h1": [],
        "h2": [],
        "seed": 0,
        "threads": 1,
    },
    "conditional": {
        "checkpoint_potential": "",
        "checkpoint_generator": "",
        "label": 1,
        "n": 100,
        "revision": dict(_REVISION_DEFAULTS),
        "seed": 0,
        "threads": 1,
    },
}


# -- config plumbing -----------------------------------------------------------

def _merge(defaults: dict, override: dict, path: str = "") -> dict:
    out = {k: (dict(v) if isinstance(v, dict) else v) for k, v in defaults.items()}
    for key, value in override.items():
        if key not in defaults:
            raise ConfigError(f"unknown config key: {path}{key}")
        if isinstance(defaults[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {path}{key} must be a table")
            out[key] = _merge(defaults[key], value, path + key + ".")
        else:
            out[key] = value
    return out


def _toml_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, str):
        return json.dumps(v)
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, int):
        return str(v)
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    raise ConfigError(f"cannot serialize config value {v!r}")


def _dump_toml(cfg: dict) -> str:
    lines, tables = [], []
    for key, value in cfg.items():
        if isinstance(value, dict):
            tables.append((key, value))
        else:
            lines.append(f"{key} = {_toml_value(value)}")
    for name, table in tables:
        lines.append("")
        lines.append(f"[{name}]")
        for key, value in table.items():
            lines.append(f"{key} = {_toml_value(value)}")
    return "\n".join(lines) + "\n"


def load_config(command: str, path: str | None) -> dict:
    defaults = DEFAULTS[command]
    if path is None:
        return _merge(defaults, {})
    try:
        with open(path, "rb") as fh:
            file_cfg = tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"invalid TOML in {path}: {exc}") from None
    return _merge(defaults, file_cfg)


def _write_resolved(cfg: dict, out_dir: str):
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "resolved_config.toml"), "w") as fh:
        fh.write(_dump_toml(cfg))


def _revision_config(rev: dict, kind=None, schedule=None) -> SamplerConfig:
    sched = schedule if schedule is not None else (
        tuple(rev["schedule"]) if rev["schedule"] else None)
    return SamplerConfig(
        kind=kind if kind is not None else rev["kind"],
        steps=rev["steps"],
        delta=None if sched else rev["delta"],
        schedule=sched,
        beta=rev["beta"],
        inner_steps=rev["inner_steps"],
        coop_lx=rev["coop_lx"],
        coop_lh=rev["coop_lh"],
    )


def _fmt(v: float) -> str:
    return repr(float(v))


def _write_samples_csv(path, rows, header=None, labels=None):
    rows = np.atleast_2d(rows)
    cols = header or [f"x{i + 1}" for i in range(rows.shape[1])]
    with open(path, "w") as fh:
        if labels is not None:
            fh.write(",".join(cols) + ",label\n")
            for row, lab in zip(rows, labels):
                fh.write(",".join(_fmt(v) for v in row) + f",{lab}\n")
        else:
            fh.write(",".join(cols) + "\n")
            for row in rows:
                fh.write(",".join(_fmt(v) for v in row) + "\n")


def _load_net(path, expect_kind):
    if not path:
        raise ConfigError(f"a {expect_kind} checkpoint path is required")
    try:
        net = models.load_checkpoint(path)
    except FileNotFoundError:
        raise ConfigError(f"checkpoint not found: {path}") from None
    except (json.JSONDecodeError, KeyError) as exc:
        raise ConfigError(f"corrupt checkpoint {path}: {exc}") from None
    kind = "potential" if isinstance(net, models.PotentialNet) else "generator"
    if kind != expect_kind:
        raise ConfigError(f"{path} holds a {kind} model, expected {expect_kind}")
    return net


# -- subcommands ---------------------------------------------------------------

def cmd_sampler_bench(cfg: dict, out_dir: str) -> int:
    for name in cfg["samplers"]:
        if name not in ALL_SAMPLERS:
            raise ConfigError(f"unknown sampler {name!r}")
    bench = targets.benchmark_target(cfg["dim"], rng_stream(cfg["seed"], label=11))
    schedule = tuple(cfg["schedule"])

    def run(kind):
        scfg = SamplerConfig(kind=kind, steps=0, delta=None, schedule=schedule,
                             beta=cfg["beta"], inner_steps=cfg["inner_steps"],
                             coop_lx=cfg["coop_lx"], coop_lh=cfg["coop_lh"])
        return evaluation.sampler_benchmark(bench, scfg, cfg["chains"],
                                            cfg["steps"], seed=cfg["seed"])

    kinds = list(cfg["samplers"])
    if cfg["threads"] > 1:
        with ThreadPoolExecutor(max_workers=cfg["threads"]) as pool:
            curves = list(pool.map(run, kinds))
    else:
        curves = [run(kind) for kind in kinds]

    evaluation.write_kl_curves(os.path.join(out_dir, "kl_curve.csv"), curves)
    with open(os.path.join(out_dir, "summary.csv"), "w") as fh:
        fh.write("sampler,initial_kl,final_kl\n")
        for curve in curves:
            fh.write(f"{curve.sampler},{_fmt(curve.initial_kl)},{_fmt(curve.final_kl)}\n")
    return 0


def _gmm_nets(cfg, num_outputs=1):
    init_rng = rng_stream(cfg["seed"], label=2)
    pot = models.potential_mlp(2, hidden=tuple(cfg["potential_hidden"]),
                               num_outputs=num_outputs, rng=init_rng)
    gen = models.generator_mlp(cfg["latent_dim"], 2,
                               hidden=tuple(cfg["generator_hidden"]),
                               sigma=cfg["sigma"], rng=init_rng)
    return pot, gen


def _train_config(cfg, **kwargs) -> TrainConfig:
    return TrainConfig(
        iterations=cfg["iterations"], batch_size=cfg["batch_size"],
        lr_potential=cfg["lr_potential"], lr_generator=cfg["lr_generator"],
        adam_beta1=cfg["adam_beta1"], adam_beta2=cfg["adam_beta2"],
        sampler=_revision_config(cfg["revision"]),
        seed=cfg["seed"], metric_every=cfg["metric_every"], **kwargs)


def cmd_gmm_unsup(cfg: dict, out_dir: str) -> int:
    spec = targets.gmm_32_modes()
    data, _ = targets.gmm_sample(spec, cfg["data_n"], rng_stream(cfg["seed"], label=3))
    pot, gen = _gmm_nets(cfg)
    training.train(pot, gen, data, _train_config(cfg), out_dir=out_dir)

    rev_cfg = _revision_config(cfg["revision"])

    def generation_source(rng):
        _, x = models.ancestral_sample(gen, rng, 100)
        return x

    def revision_source(rng):
        x, _ = sample_model(pot, gen, rev_cfg, rng.spawn(100))
        return x

    rep_gen = evaluation.mode_coverage(generation_source, spec.means,
                                       reps=cfg["coverage_reps"], seed=cfg["seed"])
    rep_rev = evaluation.mode_coverage(revision_source, spec.means,
                                       reps=cfg["coverage_reps"], seed=cfg["seed"])
    evaluation.write_coverage_csv(os.path.join(out_dir, "coverage_generation.csv"), rep_gen)
    evaluation.write_coverage_csv(os.path.join(out_dir, "coverage_revision.csv"), rep_rev)

    n_dump = cfg["eval_samples"]
    dump_rng = rng_stream(cfg["seed"], label=5)
    _, x_gen = models.ancestral_sample(gen, dump_rng, n_dump)
    x_rev, _ = sample_model(pot, gen, rev_cfg, rng_streams(cfg["seed"], n_dump, label=6))
    with open(os.path.join(out_dir, "samples.csv"), "w") as fh:
        fh.write("source,x1,x2\n")
        for row in x_gen:
            fh.write(f"generation,{_fmt(row[0])},{_fmt(row[1])}\n")
        for row in x_rev:
            fh.write(f"revision,{_fmt(row[0])},{_fmt(row[1])}\n")
    return 0


def cmd_gmm_ssl(cfg: dict, out_dir: str) -> int:
    spec = targets.gmm_two_rings()
    data_rng = rng_stream(cfg["seed"], label=3)
    unlabeled, _ = targets.gmm_sample(spec, cfg["unlabeled_n"], data_rng)

    per_ring = spec.num_components // 2
    labeled = []
    for cls in (1, 2):
        sub = targets.GmmSpec(spec.means[(cls - 1) * per_ring: cls * per_ring],
                              spec.sigma)
        pts, _ = targets.gmm_sample(sub, cfg["labels_per_class"], data_rng)
        labeled.extend(LabeledExample(x, cls) for x in pts)

    pot, gen = _gmm_nets(cfg, num_outputs=2)
    tc = _train_config(cfg, alpha_d=cfg["alpha_d"], alpha_c=cfg["alpha_c"],
                       alpha_p=cfg["alpha_p"])
    training.train(pot, gen, unlabeled, tc, labeled=labeled, out_dir=out_dir)

    x_lab = np.stack([ex.x for ex in labeled])
    y_lab = np.array([ex.y for ex in labeled])
    pred_lab = np.argmax(models.classifier_probs(pot, x_lab), axis=1) + 1
    labeled_correct = int((pred_lab == y_lab).sum())

    held_x, held_comp = targets.gmm_sample(spec, cfg["heldout_n"],
                                           rng_stream(cfg["seed"], label=4))
    held_y = held_comp // per_ring + 1
    pred = np.argmax(models.classifier_probs(pot, held_x), axis=1) + 1
    heldout_acc = float((pred == held_y).mean())

    with open(os.path.join(out_dir, "accuracy.csv"), "w") as fh:
        fh.write("metric,value\n")
        fh.write(f"labeled_correct,{labeled_correct}\n")
        fh.write(f"labeled_total,{len(labeled)}\n")
        fh.write(f"heldout_accuracy,{_fmt(heldout_acc)}\n")

    res = cfg["grid_res"]
    axis = np.linspace(cfg["grid_lo"], cfg["grid_hi"], res)
    xx, yy = np.meshgrid(axis, axis)
    grid = np.column_stack([xx.ravel(), yy.ravel()])
    u = np.asarray(models.potential(pot, grid))
    per_class = models.class_potentials(pot, grid)
    with open(os.path.join(out_dir, "grid.csv"), "w") as fh:
        fh.write("x1,x2,u,u_y1,u_y2\n")
        for row, uv, cls_row in zip(grid, u, per_class):
            fh.write(f"{_fmt(row[0])},{_fmt(row[1])},{_fmt(uv)},"
                     f"{_fmt(cls_row[0])},{_fmt(cls_row[1])}\n")
    return 0


def cmd_anomaly(cfg: dict, out_dir: str) -> int:
    if cfg["train_csv"] or cfg["test_csv"]:
        if not (cfg["train_csv"] and cfg["test_csv"]):
            raise ConfigError("need both train_csv and test_csv for CSV ingestion")
        train_x, _ = anomaly_mod.load_csv_dataset(cfg["train_csv"])
        test_x, test_y = anomaly_mod.load_csv_dataset(cfg["test_csv"],
                                                      label_col=cfg["label_col"])
        if test_y is None:
            raise ConfigError("test_csv must carry a label column")
        base = anomaly_mod.synthetic_ring_recipe(seed=cfg["seed"],
                                                 iterations=cfg["iterations"],
                                                 sigma=cfg["sigma"],
                                                 alpha_p=cfg["alpha_p"])
        dim = train_x.shape[1]
        init_rng = rng_stream(cfg["seed"], label=2)
        pot = models.potential_mlp(dim, hidden=(60, 30, 10), activation="tanh",
                                   weight_norm=True, rng=init_rng)
        gen = models.generator_mlp(cfg["latent_dim"], dim, hidden=(32, 32),
                                   activation="tanh", batch_norm=True,
                                   final_weight_norm=True, sigma=cfg["sigma"],
                                   rng=init_rng)
        quantile = cfg["quantile"] if cfg["quantile"] > 0 else float(np.mean(test_y))
        recipe = anomaly_mod.AnomalyRecipe(train_x, test_x, test_y, pot, gen,
                                           base.config, quantile=quantile)
    else:
        recipe = anomaly_mod.synthetic_ring_recipe(
            seed=cfg["seed"], train_n=cfg["train_n"],
            test_normal=cfg["test_normal"], test_anomaly=cfg["test_anomaly"],
            iterations=cfg["iterations"], sigma=cfg["sigma"],
            alpha_p=cfg["alpha_p"])
        if cfg["quantile"] > 0:
            recipe.quantile = cfg["quantile"]
    anomaly_mod.run_anomaly(recipe, out_dir=out_dir)
    return 0


def cmd_generate(cfg: dict, out_dir: str) -> int:
    gen = _load_net(cfg["checkpoint_generator"], "generator")
    streams = rng_streams(cfg["seed"], cfg["n"], label=0)
    if cfg["revise"]:
        pot = _load_net(cfg["checkpoint_potential"], "potential")
        x, _ = sample_model(pot, gen, _revision_config(cfg["revision"]), streams)
    else:
        x, _ = ancestral_rows(gen, streams)
    _write_samples_csv(os.path.join(out_dir, "samples.csv"), x)
    return 0


def cmd_interpolate(cfg: dict, out_dir: str) -> int:
    gen = _load_net(cfg["checkpoint_generator"], "generator")
    rng = rng_stream(cfg["seed"], label=9)
    h1 = np.array(cfg["h1"], dtype=np.float64) if cfg["h1"] else rng.standard_normal(gen.latent_dim)
    h2 = np.array(cfg["h2"], dtype=np.float64) if cfg["h2"] else rng.standard_normal(gen.latent_dim)
    path = interpolate_latent(gen, h1, h2, cfg["steps"])
    _write_samples_csv(os.path.join(out_dir, "path.csv"), path)
    return 0


def cmd_conditional(cfg: dict, out_dir: str) -> int:
    pot = _load_net(cfg["checkpoint_potential"], "potential")
    gen = _load_net(cfg["checkpoint_generator"], "generator")
    streams = rng_streams(cfg["seed"], cfg["n"], label=0)
    x = conditional_revise(pot, gen, cfg["label"],
                           _revision_config(cfg["revision"]), streams)
    _write_samples_csv(os.path.join(out_dir, "samples.csv"), x,
                       labels=[cfg["label"]] * cfg["n"])
    return 0


COMMANDS = {
    "sampler-bench": cmd_sampler_bench,
    "gmm-unsup": cmd_gmm_unsup,
    "gmm-ssl": cmd_gmm_ssl,
    "anomaly": cmd_anomaly,
    "generate": cmd_generate,
    "interpolate": cmd_interpolate,
    "conditional": cmd_conditional,
}


def _float_list(text: str) -> list:
    return [float(v) for v in text.split(",") if v != ""]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="nrfkit", description="Neural random field experiment runner")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", default=None, help="TOML config file")
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--threads", type=int, default=None)
        if name == "sampler-bench":
            sp.add_argument("--samplers", default=None,
                            help="comma-separated sampler subset")
            sp.add_argument("--dim", type=int, default=None)
            sp.add_argument("--chains", type=int, default=None)
            sp.add_argument("--steps", type=int, default=None)
        if name in ("gmm-unsup", "gmm-ssl", "anomaly"):
            sp.add_argument("--iterations", type=int, default=None)
        if name == "anomaly":
            sp.add_argument("--train-csv", default=None)
            sp.add_argument("--test-csv", default=None)
            sp.add_argument("--label-col", type=int, default=None)
            sp.add_argument("--quantile", type=float, default=None)
        if name == "generate":
            sp.add_argument("--revise", choices=("true", "false"), default=None)
            sp.add_argument("--n", type=int, default=None)
        if name == "conditional":
            sp.add_argument("--label", type=int, default=None)
            sp.add_argument("--n", type=int, default=None)
        if name == "interpolate":
            sp.add_argument("--steps", type=int, default=None)
            sp.add_argument("--h1", default=None, help="comma-separated floats")
            sp.add_argument("--h2", default=None, help="comma-separated floats")
        if name in ("generate", "conditional"):
            sp.add_argument("--checkpoint-potential", default=None)
            sp.add_argument("--checkpoint-generator", default=None)
        if name == "interpolate":
            sp.add_argument("--checkpoint-generator", default=None)
    return parser


_OVERRIDES = {
    "seed": "seed", "threads": "threads", "iterations": "iterations",
    "dim": "dim", "chains": "chains", "steps": "steps", "n": "n",
    "label": "label", "quantile": "quantile", "label_col": "label_col",
    "train_csv": "train_csv", "test_csv": "test_csv",
    "checkpoint_potential": "checkpoint_potential",
    "checkpoint_generator": "checkpoint_generator",
}


def _apply_overrides(cfg: dict, args: argparse.Namespace) -> dict:
    for attr, key in _OVERRIDES.items():
        value = getattr(args, attr, None)
        if value is not None and key in cfg:
            cfg[key] = value
    if getattr(args, "samplers", None) is not None:
        cfg["samplers"] = [s.strip() for s in args.samplers.split(",") if s.strip()]
    if getattr(args, "revise", None) is not None:
        cfg["revise"] = args.revise == "true"
    for attr in ("h1", "h2"):
        value = getattr(args, attr, None)
        if value is not None:
            cfg[attr] = _float_list(value)
    return cfg


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else 1
    try:
        cfg = load_config(args.command, args.config)
        cfg = _apply_overrides(cfg, args)
        os.makedirs(args.out, exist_ok=True)
        _write_resolved(cfg, args.out)
        return COMMANDS[args.command](cfg, args.out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except (NonFiniteError, ChainDivergedError, TrainingDivergedError,
            np.linalg.LinAlgError) as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
