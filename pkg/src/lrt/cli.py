"""Experiment harness: config files, scenario runners, console entry point.

Experiments are described by a plain-text config of ``[section]`` blocks
holding ``key = value`` lines. Every key has a default, so the empty
string is a valid config, and `format_config` always emits the full
key set, which makes configs self-documenting once written back out.
A parsed `ExperimentConfig` serializes and reparses to an equal value.

The four runners map onto the console subcommands:

    run          online-training scenarios (control, dist_shift,
                 drift_analog, drift_digital) over schemes x seeds
    ablate       component knock-outs plus the estimator variant grid
    sweep        rank x weight-bitwidth accuracy matrix
    convergence  quadratic-regression trajectory logging

Each runner writes CSV files under the configured output directory and
prints a one-line summary per result group. Runs fan out over a thread
pool; every (scheme, seed) job owns its network and trainer, and the
sample stream is addressed by index only, so execution order cannot
change any result.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import dataclasses
import statistics
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

from .convex import (
    DESK_DIMS,
    FULL_DIMS,
    make_problem,
    run_lrt_regression,
    run_noisy_sgd,
    write_trajectory,
)
from .data import (
    default_shift_schedule,
    format_schedule,
    load_idx_pair,
    make_partitions,
    parse_schedule,
    synthetic_digits,
)
from .quant import default_profile, float_profile
from .trainer import (
    SCHEMES,
    DriftModel,
    Trainer,
    UpdatePolicy,
    build_network,
    policy_for_scheme,
)

SCENARIOS = ("control", "dist_shift", "drift_analog", "drift_digital",
             "convergence", "ablation", "sweep")
TRAINING_SCENARIOS = SCENARIOS[:4]
ARCHES = ("cnn", "mlp")
VARIANTS = ("biased", "unbiased")
PROFILES = ("quantized", "float")
RUN_COLUMNS = ("step", "accuracy", "loss", "write_events", "max_writes")


class ConfigError(ValueError):
    """Raised for unparseable or out-of-range config input."""


@dataclass(frozen=True)
class ExperimentConfig:
    """Complete description of one harness invocation.

    Attribute defaults are the source of truth for config defaults;
    the parse and format tables below map them onto file keys.
    """

    # [experiment]
    scenario: str = "control"
    out: str = "results"
    seeds: tuple = (0, 1, 2, 3, 4)
    samples: int = 0
    log_every: int = 100
    workers: int = 0
    desk_scale: bool = True
    # [network]
    arch: str = "cnn"
    rank: int = 4
    kappa_th: float = 100.0
    conv_variant: str = "biased"
    fc_variant: str = "biased"
    batch_norm: bool = True
    fc_width: int = 64
    conv_batch: int = 10
    dense_batch: int = 100
    # [policy]
    base_lr: float = 0.01
    bias_lr: float | None = None
    rho_min: float = 0.01
    schemes: tuple = SCHEMES
    # [quant]
    profile: str = "quantized"
    weight_bits: int = 8
    # [data]
    data_seed: int = 0
    images: str = "synthetic"
    labels: str = "none"
    schedule: str | None = None
    # [drift]
    drift_scale: float = 10.0
    drift_period: int = 10
    drift_horizon: float = 1e6
    # [convergence]
    cvx_dims: str = "desk"
    cvx_steps: int = 50
    cvx_mode: str = "lrt"
    cvx_variant: str = "biased"
    cvx_rank: int = 10
    cvx_noise: float = 0.5
    cvx_schedule: str = "constant"
    cvx_quantized: bool = False
    # [ablation]
    ablation_samples: int = 10000
    ablation_tail: int = 500
    # [sweep]
    sweep_ranks: tuple = (1, 2, 4, 8)
    sweep_bits: tuple = (1, 2, 4, 8)
    sweep_samples: int = 2000
    sweep_tail: int = 500


def _parse_bool(text, where):
    lowered = text.lower()
    if lowered in ("true", "yes", "on", "1"):
        return True
    if lowered in ("false", "no", "off", "0"):
        return False
    raise ConfigError(f"{where}: expected a boolean, got {text!r}")


def _parse_int(text, where, lo=None, hi=None):
    try:
        value = int(text)
    except ValueError:
        raise ConfigError(f"{where}: expected an integer, got {text!r}") from None
    if lo is not None and value < lo:
        raise ConfigError(f"{where}: must be at least {lo}, got {value}")
    if hi is not None and value > hi:
        raise ConfigError(f"{where}: must be at most {hi}, got {value}")
    return value


def _parse_float(text, where, lo=None, lo_open=False):
    try:
        value = float(text)
    except ValueError:
        raise ConfigError(f"{where}: expected a number, got {text!r}") from None
    if value != value:
        raise ConfigError(f"{where}: nan is not a valid value")
    if lo is not None:
        if lo_open and value <= lo:
            raise ConfigError(f"{where}: must be greater than {lo}, got {value}")
        if not lo_open and value < lo:
            raise ConfigError(f"{where}: must be at least {lo}, got {value}")
    return value


def _parse_choice(text, where, options):
    if text not in options:
        raise ConfigError(
            f"{where}: expected one of {', '.join(options)}, got {text!r}"
        )
    return text


def _parse_ints(text, where, lo=None, hi=None):
    parts = text.split()
    if not parts:
        raise ConfigError(f"{where}: expected at least one integer")
    return tuple(_parse_int(p, where, lo, hi) for p in parts)


def _parse_schemes(text, where):
    parts = tuple(text.split())
    if not parts:
        raise ConfigError(f"{where}: expected at least one scheme")
    for part in parts:
        if part not in SCHEMES:
            raise ConfigError(
                f"{where}: unknown scheme {part!r}, expected a subset of"
                f" {', '.join(SCHEMES)}"
            )
    if len(set(parts)) != len(parts):
        raise ConfigError(f"{where}: duplicate scheme")
    return parts


def _parse_bias_lr(text, where):
    if text == "auto":
        return None
    return _parse_float(text, where, lo=0.0)


def _parse_stream_schedule(text, where):
    if text == "auto":
        return None
    try:
        parsed = parse_schedule(text)
    except ValueError as exc:
        raise ConfigError(f"{where}: {exc}") from None
    return format_schedule(parsed)


def _fmt_bool(value):
    return "true" if value else "false"


def _fmt_ints(value):
    return " ".join(str(v) for v in value)


def _fmt_bias_lr(value):
    return "auto" if value is None else repr(value)


def _fmt_schedule(value):
    return "auto" if value is None else value


@dataclass(frozen=True)
class _Key:
    attr: str
    key: str
    parse: object
    fmt: object = str


def _choice(options):
    return lambda text, where: _parse_choice(text, where, options)


_SCHEMA = {
    "experiment": (
        _Key("scenario", "scenario", _choice(SCENARIOS)),
        _Key("out", "out", lambda t, w: t),
        _Key("seeds", "seeds", _parse_ints, _fmt_ints),
        _Key("samples", "samples",
             lambda t, w: _parse_int(t, w, lo=0)),
        _Key("log_every", "log_every",
             lambda t, w: _parse_int(t, w, lo=1)),
        _Key("workers", "workers",
             lambda t, w: _parse_int(t, w, lo=0)),
        _Key("desk_scale", "desk_scale", _parse_bool, _fmt_bool),
    ),
    "network": (
        _Key("arch", "arch", _choice(ARCHES)),
        _Key("rank", "rank", lambda t, w: _parse_int(t, w, lo=1)),
        _Key("kappa_th", "kappa_th",
             lambda t, w: _parse_float(t, w, lo=0.0, lo_open=True), repr),
        _Key("conv_variant", "conv_variant", _choice(VARIANTS)),
        _Key("fc_variant", "fc_variant", _choice(VARIANTS)),
        _Key("batch_norm", "batch_norm", _parse_bool, _fmt_bool),
        _Key("fc_width", "fc_width", lambda t, w: _parse_int(t, w, lo=1)),
        _Key("conv_batch", "conv_batch",
             lambda t, w: _parse_int(t, w, lo=1)),
        _Key("dense_batch", "dense_batch",
             lambda t, w: _parse_int(t, w, lo=1)),
    ),
    "policy": (
        _Key("base_lr", "base_lr",
             lambda t, w: _parse_float(t, w, lo=0.0, lo_open=True), repr),
        _Key("bias_lr", "bias_lr", _parse_bias_lr, _fmt_bias_lr),
        _Key("rho_min", "rho_min",
             lambda t, w: _parse_float(t, w, lo=0.0), repr),
        _Key("schemes", "schemes", _parse_schemes, _fmt_ints),
    ),
    "quant": (
        _Key("profile", "profile", _choice(PROFILES)),
        _Key("weight_bits", "weight_bits",
             lambda t, w: _parse_int(t, w, lo=1, hi=16)),
    ),
    "data": (
        _Key("data_seed", "seed", lambda t, w: _parse_int(t, w)),
        _Key("images", "images", lambda t, w: t),
        _Key("labels", "labels", lambda t, w: t),
        _Key("schedule", "schedule", _parse_stream_schedule, _fmt_schedule),
    ),
    "drift": (
        _Key("drift_scale", "scale",
             lambda t, w: _parse_float(t, w, lo=0.0), repr),
        _Key("drift_period", "period",
             lambda t, w: _parse_int(t, w, lo=1)),
        _Key("drift_horizon", "horizon",
             lambda t, w: _parse_float(t, w, lo=0.0, lo_open=True), repr),
    ),
    "convergence": (
        _Key("cvx_dims", "dims", _choice(("desk", "full"))),
        _Key("cvx_steps", "steps", lambda t, w: _parse_int(t, w, lo=1)),
        _Key("cvx_mode", "mode", _choice(("sgd", "lrt"))),
        _Key("cvx_variant", "variant", _choice(VARIANTS)),
        _Key("cvx_rank", "rank", lambda t, w: _parse_int(t, w, lo=1)),
        _Key("cvx_noise", "noise_sigma",
             lambda t, w: _parse_float(t, w, lo=0.0), repr),
        _Key("cvx_schedule", "lr_schedule",
             _choice(("constant", "inv_sqrt"))),
        _Key("cvx_quantized", "quantized", _parse_bool, _fmt_bool),
    ),
    "ablation": (
        _Key("ablation_samples", "samples",
             lambda t, w: _parse_int(t, w, lo=1)),
        _Key("ablation_tail", "tail", lambda t, w: _parse_int(t, w, lo=1)),
    ),
    "sweep": (
        _Key("sweep_ranks", "ranks",
             lambda t, w: _parse_ints(t, w, lo=1), _fmt_ints),
        _Key("sweep_bits", "bits",
             lambda t, w: _parse_ints(t, w, lo=1, hi=16), _fmt_ints),
        _Key("sweep_samples", "samples",
             lambda t, w: _parse_int(t, w, lo=1)),
        _Key("sweep_tail", "tail", lambda t, w: _parse_int(t, w, lo=1)),
    ),
}


def parse_config(text) -> ExperimentConfig:
    """Parse config text, rejecting unknown keys and bad values."""
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"bad config syntax: {exc}") from None
    known = {s: {k.key: k for k in keys} for s, keys in _SCHEMA.items()}
    for section in cp.sections():
        if section not in known:
            raise ConfigError(f"unknown section [{section}]")
        for key in cp.options(section):
            if key not in known[section]:
                raise ConfigError(f"[{section}] {key}: unknown key")
    kwargs = {}
    for section, keys in _SCHEMA.items():
        for spec in keys:
            if cp.has_option(section, spec.key):
                raw = cp.get(section, spec.key).strip()
                kwargs[spec.attr] = spec.parse(raw, f"[{section}] {spec.key}")
    return ExperimentConfig(**kwargs)


def format_config(cfg) -> str:
    """Serialize a config with every key explicit, one section per block."""
    blocks = []
    for section, keys in _SCHEMA.items():
        lines = [f"[{section}]"]
        for spec in keys:
            lines.append(f"{spec.key} = {spec.fmt(getattr(cfg, spec.attr))}")
        blocks.append("\n".join(lines))
    return "\n\n".join(blocks) + "\n"


def read_config(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(text)


def write_config(cfg, path) -> None:
    Path(path).write_text(format_config(cfg))


def _quant_profile(cfg):
    if cfg.profile == "float":
        return float_profile()
    return default_profile(cfg.weight_bits)


def _stream_sources(cfg):
    if cfg.images == "synthetic":
        n = 6000 if cfg.desk_scale else 60000
        return synthetic_digits(cfg.data_seed, n)
    if cfg.labels == "none":
        raise ConfigError("[data] labels: required when images is a path")
    return load_idx_pair(cfg.images, cfg.labels)


_partition_cache = {}


def _partitions(cfg):
    """Build (or reuse) the source partitions for a config.

    Partitions are immutable once built and expensive to regenerate, so
    repeat invocations inside one process share them. Path-based
    sources key on file modification times to stay current.
    """
    key = (cfg.images, cfg.labels, cfg.data_seed, cfg.desk_scale)
    if cfg.images != "synthetic":
        try:
            key += tuple(Path(p).stat().st_mtime_ns
                         for p in (cfg.images, cfg.labels))
        except OSError as exc:
            raise ConfigError(f"[data] images: {exc}") from None
    if key not in _partition_cache:
        if len(_partition_cache) >= 4:
            _partition_cache.pop(next(iter(_partition_cache)))
        images, labels = _stream_sources(cfg)
        _partition_cache[key] = make_partitions(
            images, labels, seed=cfg.data_seed, desk_scale=cfg.desk_scale)
    return _partition_cache[key]


def _build_stream(cfg):
    """Materialize the online stream an experiment trains against."""
    parts = _partitions(cfg)
    schedule = None
    if cfg.schedule is not None:
        schedule = parse_schedule(cfg.schedule)
    elif cfg.scenario == "dist_shift":
        schedule = default_shift_schedule(
            parts.online_count // parts.block_size)
    stream = parts.stream(seed=cfg.data_seed, schedule=schedule)
    samples = cfg.samples if cfg.samples else len(stream)
    if samples > len(stream):
        raise ConfigError(
            f"[experiment] samples: stream provides only {len(stream)}")
    return stream, samples


def _policy(cfg, scheme):
    if cfg.bias_lr is None:
        return policy_for_scheme(scheme, base_lr=cfg.base_lr,
                                 rho_min=cfg.rho_min)
    mode = "lrt" if scheme == "lrt_maxnorm" else scheme
    return UpdatePolicy(mode=mode, base_lr=cfg.base_lr,
                        bias_lr=cfg.bias_lr, rho_min=cfg.rho_min)


def _network(cfg, scheme, seed, profile, **overrides):
    kwargs = dict(
        profile=profile, scheme=scheme, rank=cfg.rank,
        kappa_th=cfg.kappa_th,
        variant={"conv": cfg.conv_variant, "dense": cfg.fc_variant},
        batch_norm=cfg.batch_norm, fc_width=cfg.fc_width,
        conv_batch=cfg.conv_batch, dense_batch=cfg.dense_batch, seed=seed,
    )
    kwargs.update(overrides)
    return build_network(cfg.arch, **kwargs)


def _drift_model(cfg):
    kind = {"drift_analog": "analog", "drift_digital": "digital"}.get(
        cfg.scenario)
    if kind is None:
        return None
    return DriftModel(kind=kind, scale=cfg.drift_scale,
                      period=cfg.drift_period, horizon=cfg.drift_horizon)


def _mean_sd(values):
    mean = statistics.fmean(values)
    sd = statistics.stdev(values) if len(values) > 1 else 0.0
    return mean, sd


def _tail_accuracy(corrects, tail):
    window = corrects[-min(tail, len(corrects)):]
    return sum(window) / len(window)


def _pool_size(cfg, n_jobs):
    return cfg.workers if cfg.workers else min(4, max(1, n_jobs))


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def _train_run(cfg, stream, samples, scheme, seed, profile,
               net_overrides=None, tail=500):
    """Train one (scheme, seed) job and return its logged records."""
    net = _network(cfg, scheme, seed, profile, **(net_overrides or {}))
    trainer = Trainer(net, _policy(cfg, scheme), drift=_drift_model(cfg),
                      seed=seed)
    rows = []
    corrects = []
    for i in range(samples):
        x, y = stream[i]
        rec = trainer.step(x, y)
        corrects.append(rec["correct"])
        if (i + 1) % cfg.log_every == 0 or i + 1 == samples:
            rows.append([rec[c] for c in RUN_COLUMNS])
    return {
        "rows": rows,
        "tail_accuracy": _tail_accuracy(corrects, tail),
        "max_writes": rows[-1][RUN_COLUMNS.index("max_writes")],
    }


def run_scenario(cfg) -> list:
    """Train every configured scheme x seed pair on one scenario.

    Each job writes ``{scenario}_{scheme}_s{seed}.csv`` with columns
    ``step, accuracy, loss, write_events, max_writes`` (accuracy is the
    debiased EMA), and ``{scenario}_summary.csv`` aggregates the tail
    window accuracy and peak per-cell write count across seeds.
    """
    if cfg.scenario not in TRAINING_SCENARIOS:
        raise ConfigError(f"[experiment] scenario: {cfg.scenario!r} is not"
                          " a training scenario")
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    profile = _quant_profile(cfg)
    stream, samples = _build_stream(cfg)
    jobs = [(scheme, seed) for scheme in cfg.schemes for seed in cfg.seeds]

    def one(job):
        scheme, seed = job
        result = _train_run(cfg, stream, samples, scheme, seed, profile)
        path = out / f"{cfg.scenario}_{scheme}_s{seed}.csv"
        _write_csv(path, RUN_COLUMNS, result["rows"])
        return path, result

    with ThreadPoolExecutor(max_workers=_pool_size(cfg, len(jobs))) as pool:
        results = list(pool.map(one, jobs))

    paths = [path for path, _ in results]
    summary_rows = []
    for scheme in cfg.schemes:
        picked = [res for (s, _), (_, res) in zip(jobs, results)
                  if s == scheme]
        acc_m, acc_sd = _mean_sd([r["tail_accuracy"] for r in picked])
        mw_m, mw_sd = _mean_sd([float(r["max_writes"]) for r in picked])
        summary_rows.append(
            [scheme, len(picked), repr(acc_m), repr(acc_sd),
             repr(mw_m), repr(mw_sd)])
        print(f"{cfg.scenario} {scheme}: accuracy {acc_m:.4f} +/- {acc_sd:.4f}"
              f" | max writes {mw_m:.1f} +/- {mw_sd:.1f}"
              f" ({len(picked)} seeds)")
    summary = out / f"{cfg.scenario}_summary.csv"
    _write_csv(summary, ("scheme", "runs", "accuracy_mean", "accuracy_sd",
                         "max_writes_mean", "max_writes_sd"), summary_rows)
    paths.append(summary)
    return paths


def _ablation_conditions(cfg):
    """Knock-out list plus the conv/fc estimator variant grid."""
    base = dict(scheme="lrt", overrides={}, kappa=cfg.kappa_th,
                conv=cfg.conv_variant, fc=cfg.fc_variant)
    rows = [("baseline", base)]
    rows.append(("bias_only", dict(base, scheme="bias_only")))
    rows.append(("no_streaming_norm",
                 dict(base, overrides={"batch_norm": False})))
    rows.append(("no_bias_training", dict(base, bias_lr=0.0)))
    rows.append(("kappa_1e8",
                 dict(base, overrides={"kappa_th": 1e8}, kappa=1e8)))
    for conv in VARIANTS:
        for fc in VARIANTS:
            over = {"variant": {"conv": conv, "dense": fc}}
            rows.append((f"conv_{conv}_fc_{fc}",
                         dict(base, overrides=over, conv=conv, fc=fc)))
    return rows


def run_ablation(cfg) -> list:
    """Score every ablation condition with and without max-norm scaling.

    The metric is the fraction correct over the final ``tail`` samples
    of a control-scenario run, averaged across seeds. Output is one
    wide CSV row per condition.
    """
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    profile = _quant_profile(cfg)
    base_cfg = dataclasses.replace(cfg, scenario="control",
                                   samples=cfg.ablation_samples)
    stream, samples = _build_stream(base_cfg)
    conditions = _ablation_conditions(cfg)
    jobs = [(idx, max_norm, seed)
            for idx in range(len(conditions))
            for max_norm in (False, True)
            for seed in cfg.seeds]

    def one(job):
        idx, max_norm, seed = job
        name, cond = conditions[idx]
        run_cfg = base_cfg
        if cond.get("bias_lr") is not None:
            run_cfg = dataclasses.replace(base_cfg, bias_lr=cond["bias_lr"])
        overrides = dict(cond["overrides"], max_norm=max_norm)
        result = _train_run(run_cfg, stream, samples, cond["scheme"], seed,
                            profile, net_overrides=overrides,
                            tail=cfg.ablation_tail)
        return result["tail_accuracy"]

    with ThreadPoolExecutor(max_workers=_pool_size(cfg, len(jobs))) as pool:
        scores = list(pool.map(one, jobs))

    by_job = dict(zip(jobs, scores))
    table = []
    for idx, (name, cond) in enumerate(conditions):
        cells = [name, cond["conv"], cond["fc"], repr(cond["kappa"])]
        for max_norm in (False, True):
            acc = [by_job[(idx, max_norm, seed)] for seed in cfg.seeds]
            mean, sd = _mean_sd(acc)
            cells.extend([repr(mean), repr(sd)])
        table.append(cells)
        print(f"ablation {name}: plain {float(cells[4]):.4f} +/-"
              f" {float(cells[5]):.4f} | max_norm {float(cells[6]):.4f} +/-"
              f" {float(cells[7]):.4f}")
    path = out / "ablation.csv"
    _write_csv(path, ("condition", "conv_variant", "fc_variant", "kappa_th",
                      "accuracy_plain_mean", "accuracy_plain_sd",
                      "accuracy_maxnorm_mean", "accuracy_maxnorm_sd"), table)
    return [path]


def run_sweep(cfg) -> list:
    """Fill the rank x weight-bitwidth accuracy matrix for max-norm LRT.

    Each cell trains ``sweep_samples`` control samples per seed with the
    default profile narrowed to the cell's weight bitwidth, then scores
    the final ``sweep_tail`` window. Cells hold means across seeds.
    """
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    base_cfg = dataclasses.replace(cfg, scenario="control",
                                   samples=cfg.sweep_samples)
    stream, samples = _build_stream(base_cfg)
    jobs = [(rank, bits, seed) for rank in cfg.sweep_ranks
            for bits in cfg.sweep_bits for seed in cfg.seeds]

    def one(job):
        rank, bits, seed = job
        result = _train_run(base_cfg, stream, samples, "lrt_maxnorm", seed,
                            default_profile(bits),
                            net_overrides={"rank": rank},
                            tail=cfg.sweep_tail)
        return result["tail_accuracy"]

    with ThreadPoolExecutor(max_workers=_pool_size(cfg, len(jobs))) as pool:
        scores = list(pool.map(one, jobs))

    by_job = dict(zip(jobs, scores))
    rows = []
    for rank in cfg.sweep_ranks:
        cells = [rank]
        for bits in cfg.sweep_bits:
            mean, _ = _mean_sd([by_job[(rank, bits, seed)]
                                for seed in cfg.seeds])
            cells.append(repr(mean))
        rows.append(cells)
        shown = " ".join(f"{float(c):.4f}" for c in cells[1:])
        print(f"sweep rank {rank}: {shown}")
    path = out / "sweep.csv"
    header = ["rank"] + [f"bits_{b}" for b in cfg.sweep_bits]
    _write_csv(path, header, rows)
    return [path]


def run_convergence(cfg) -> list:
    """Log quadratic-regression trajectories for the configured solver."""
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    n_i, batch, n_o = DESK_DIMS if cfg.cvx_dims == "desk" else FULL_DIMS
    quant_spec = None
    if cfg.cvx_quantized:
        quant_spec = default_profile(cfg.weight_bits).weights
    paths = []
    for seed in cfg.seeds:
        problem = make_problem(seed=seed, n_i=n_i, batch=batch, n_o=n_o)
        if cfg.cvx_mode == "sgd":
            rows, _ = run_noisy_sgd(problem, cfg.cvx_noise,
                                    steps=cfg.cvx_steps,
                                    schedule=cfg.cvx_schedule, seed=seed)
        else:
            rows, _ = run_lrt_regression(problem, variant=cfg.cvx_variant,
                                         r=cfg.cvx_rank, steps=cfg.cvx_steps,
                                         schedule=cfg.cvx_schedule, seed=seed,
                                         quant_spec=quant_spec)
        path = out / f"convergence_{cfg.cvx_mode}_s{seed}.csv"
        write_trajectory(rows, path)
        paths.append(path)
        print(f"convergence {cfg.cvx_mode} seed {seed}: final loss"
              f" {rows[-1]['loss']:.6g} in {len(rows)} steps")
    return paths


def _apply_flags(cfg, args):
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seeds=(args.seed,))
    if args.out is not None:
        cfg = dataclasses.replace(cfg, out=args.out)
    if args.desk_scale:
        cfg = dataclasses.replace(cfg, desk_scale=True)
    if args.float_mode:
        cfg = dataclasses.replace(cfg, profile="float")
    return cfg


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="lrt",
        description="Low-rank online training simulator.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    commands = {
        "run": "train schemes x seeds on the configured scenario",
        "ablate": "score component knock-outs and estimator variants",
        "sweep": "rank x weight-bitwidth accuracy matrix",
        "convergence": "quadratic-regression trajectory logging",
    }
    for name, help_text in commands.items():
        cmd = sub.add_parser(name, help=help_text)
        cmd.add_argument("config", help="path to a config file")
        cmd.add_argument("--seed", type=int, default=None,
                         help="replace the seed list with this one seed")
        cmd.add_argument("--out", default=None,
                         help="override the output directory")
        cmd.add_argument("--desk-scale", action="store_true",
                         help="force desk-scale data partitions")
        cmd.add_argument("--float-mode", action="store_true",
                         help="run with the all-identity quant profile")
    return parser


_RUNNERS = {
    "run": run_scenario,
    "ablate": run_ablation,
    "sweep": run_sweep,
    "convergence": run_convergence,
}


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        cfg = _apply_flags(read_config(args.config), args)
        _RUNNERS[args.command](cfg)
    except (ConfigError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
