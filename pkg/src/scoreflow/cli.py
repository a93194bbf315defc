"""Command-line entry point: ``scoreflow <command> --config cfg.json --out DIR``.

Configs are flat JSON objects.  Every command accepts a fixed set of keys
(unknown keys are errors), fills in defaults, and echoes the resolved
config to ``manifest.json`` so that it can be fed straight back in.

Exit codes: 0 success, 1 configuration or input error, 2 schedule
validation failure, 3 numerical failure (non-finite output or an RK45
step-size underflow).
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from pathlib import Path

import numpy as np

from . import samplers
from .classifier import BayesClassifier, TrainedClassifier, clf_train
from .datasets import drumlets
from .evalsuite import Check, empirical_moments, relative_error, w2_gaussian
from .kernel import WEIGHTINGS
from .oracle import GaussianMixture, OracleEps
from .schedules import CSV_COLUMNS, RELATIONS, make_schedule, validate
from .scorenet import eps_fn_of, train
from .tensorfile import NonFiniteError, atomic_write_text, load_checkpoint, read_tensor, save_checkpoint, \
    write_json, write_tensor

CHUNK_ROWS = 1024
ROUND_TRIP_TOL = 1e-3
W2_TOL = {"sde": 0.07, "ode": 0.07, "reparam_sde": 0.07, "rk45": 0.07, "ddim": 0.10}
UNIT_GAUSSIAN = [{"weight": 1.0, "mean": [0.0], "var": [1.0], "class": 0}]


class ConfigError(Exception):
    """Bad configuration or input; exit code 1."""


class NumericalError(Exception):
    """Non-finite output or integrator failure; exit code 3."""


# -- configuration ---------------------------------------------------------------

SCHEDULE_KEYS = {"seed": 0, "curve": "cos", "relation": "vp", "s": 0.006, "gamma": None, "eta": None}
SAMPLER_KEYS = {"method": "sde", "steps": 400, "rtol": 1e-5, "atol": 1e-5}
MODEL_KEYS = {"model": "oracle", "mixture": UNIT_GAUSSIAN, "checkpoint": None}
NET_KEYS = {"hidden": [128, 128, 128], "emb_hidden": 128, "n_freq": 32, "freq_std": 4.0}
DATA_KEYS = {"dataset": "mixture2d", "n_data": 20000, "epochs": 1, "batch_size": 128, "max_steps": None,
             "lr": 2e-4}

COMMAND_KEYS = {
    "schedule": {**SCHEDULE_KEYS, "grid_size": 256},
    "sample": {**SCHEDULE_KEYS, **SAMPLER_KEYS, **MODEL_KEYS, "batch": 1000},
    "train": {**SCHEDULE_KEYS, **DATA_KEYS, **NET_KEYS, "mixture": None, "weighting": "sigma2",
              "ema_rate": 0.999},
    "train-clf": {**SCHEDULE_KEYS, **DATA_KEYS, **NET_KEYS, "mixture": None},
    "encode": {**SCHEDULE_KEYS, **MODEL_KEYS, "input": None, "rtol": 1e-5, "atol": 1e-5},
    "inpaint": {**SCHEDULE_KEYS, **SAMPLER_KEYS, **MODEL_KEYS, "input": None, "mask": None, "batch": 1},
    "interp": {**SCHEDULE_KEYS, **SAMPLER_KEYS, **MODEL_KEYS, "method": "ode", "input": None, "input2": None,
               "lam": 0.5, "mode": "latent", "t_mid": 0.5, "combine": "spherical", "shared_noise": True},
    "variations": {**SCHEDULE_KEYS, **SAMPLER_KEYS, **MODEL_KEYS, "input": None, "t_level": 0.5, "repeats": 1},
    "guide": {**SCHEDULE_KEYS, **SAMPLER_KEYS, **MODEL_KEYS, "classifier": "bayes", "labels": [0],
              "weights": [1.0], "batch": 1000},
}
PATH_KEYS = ("checkpoint", "input", "input2", "mask", "classifier")
DEFAULT_2D_MIXTURE = [
    {"weight": 0.5, "mean": [1.0, 1.0], "var": [0.25, 0.25], "class": 0},
    {"weight": 0.5, "mean": [-1.0, -1.0], "var": [0.25, 0.25], "class": 1},
]


def resolve_config(command: str, raw: dict, base_dir: Path, seed: int | None = None) -> dict:
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    allowed = COMMAND_KEYS[command]
    unknown = sorted(set(raw) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown config key(s) for '{command}': {', '.join(unknown)}")
    cfg = {k: json.loads(json.dumps(v)) for k, v in allowed.items()}
    cfg.update(raw)
    if seed is not None:
        cfg["seed"] = seed
    for k in PATH_KEYS:
        if k in cfg and isinstance(cfg[k], str) and not (k == "classifier" and cfg[k] == "bayes"):
            cfg[k] = str((base_dir / cfg[k]).resolve())
    if not isinstance(cfg["seed"], int) or isinstance(cfg["seed"], bool) or cfg["seed"] < 0:
        raise ConfigError("seed: must be a nonnegative integer")
    return cfg


def _schedule(cfg):
    if cfg["relation"] not in RELATIONS:
        raise ConfigError(f"relation: unknown relation {cfg['relation']!r}; expected one of {sorted(RELATIONS)}")
    if cfg["curve"] not in ("cos", "exp"):
        raise ConfigError(f"curve: unknown curve {cfg['curve']!r}; expected 'cos' or 'exp'")
    try:
        return make_schedule(cfg["curve"], cfg["relation"], s=cfg["s"], gamma=cfg["gamma"], eta=cfg["eta"])
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"schedule: {exc}") from exc


def _sampler_config(cfg, schedule):
    try:
        return samplers.SamplerConfig(schedule, cfg["steps"], cfg["method"], cfg["rtol"], cfg["atol"])
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"sampler: {exc}") from exc


def _mixture(spec, key="mixture"):
    try:
        return GaussianMixture.from_spec(spec)
    except (ValueError, TypeError, KeyError) as exc:
        raise ConfigError(f"{key}: {exc}") from exc


def _read_input(cfg, key):
    if cfg.get(key) is None:
        raise ConfigError(f"{key}: a tensor file path is required")
    path = Path(cfg[key])
    if not path.exists():
        raise ConfigError(f"{key}: no such file {path}")
    try:
        return read_tensor(path).astype(float)
    except ValueError as exc:
        raise ConfigError(f"{key}: {exc}") from exc


def _load_net(path, key, kind):
    if path is None or not Path(path).exists() or not Path(path).with_suffix(".json").exists():
        raise ConfigError(f"{key}: checkpoint {path} (and its .json sidecar) must exist")
    try:
        net, side = load_checkpoint(path)
    except (ValueError, KeyError, TypeError) as exc:
        raise ConfigError(f"{key}: {exc}") from exc
    if side.get("kind") != kind:
        raise ConfigError(f"{key}: expected a {kind} checkpoint, got {side.get('kind')!r}")
    return net, side


def _model(cfg, schedule):
    """Returns ``(eps_fn, dim, mixture or None)``."""
    if cfg["model"] == "oracle":
        gm = _mixture(cfg["mixture"])
        return OracleEps(gm, schedule.relation), gm.dim, gm
    if cfg["model"] == "checkpoint":
        net, _ = _load_net(cfg["checkpoint"], "checkpoint", "scorenet")
        return eps_fn_of(net), net.in_dim, None
    raise ConfigError(f"model: expected 'oracle' or 'checkpoint', got {cfg['model']!r}")


def _as_rows(x, dim, key):
    x = np.atleast_2d(x)
    if x.ndim != 2 or x.shape[1] != dim:
        raise ConfigError(f"{key}: expected rows of dimension {dim}, got shape {x.shape}")
    return x


def _positive_int(cfg, key, minimum=1):
    v = cfg[key]
    if not isinstance(v, int) or isinstance(v, bool) or v < minimum:
        raise ConfigError(f"{key}: must be an integer >= {minimum}")
    return v


# -- seeded chunking --------------------------------------------------------------


def chunked(seed: int, n: int, fn):
    """Run ``fn(rows, rng)`` over consecutive chunks with spawned per-chunk streams.

    Chunk ``c`` always covers rows [c*CHUNK_ROWS, (c+1)*CHUNK_ROWS) and always
    receives the ``c``-th child of the master seed, so results do not depend
    on how chunks are scheduled.
    """
    bounds = [(i, min(i + CHUNK_ROWS, n)) for i in range(0, n, CHUNK_ROWS)]
    children = np.random.SeedSequence(seed).spawn(len(bounds))
    return np.concatenate([fn(slice(a, b), np.random.default_rng(ss)) for (a, b), ss in zip(bounds, children)])


# -- output helpers ---------------------------------------------------------------


def _write_tensor(path, arr):
    try:
        write_tensor(path, arr)
    except NonFiniteError as exc:
        raise NumericalError(f"{path.name}: {exc}") from exc


def _moments_record(x, gm=None, method=None):
    rec = {}
    if x.shape[0] >= 2:
        mean, var = empirical_moments(x)
        rec.update(mean=mean.tolist(), var=var.tolist())
        if gm is not None and np.all(var > 0):
            tm, tv = gm.moments()
            w2 = w2_gaussian(mean, var, tm, tv)
            rec.update(truth_mean=tm.tolist(), truth_var=tv.tolist(), w2=w2)
            if method in W2_TOL:
                rec["checks"] = [Check("w2", w2, W2_TOL[method]).to_record()]
    return rec


# -- commands ---------------------------------------------------------------------


def cmd_schedule(cfg, out: Path):
    sch = _schedule(cfg)
    rep = validate(sch, grid_size=_positive_int(cfg, "grid_size", 2))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for row in rep.rows:
        w.writerow([repr(float(v)) for v in row])
    atomic_write_text(out / "schedule.csv", buf.getvalue())
    checks = [Check("residual_a", rep.max_residual_a, 1e-3), Check("residual_b", rep.max_residual_b, 1e-3),
              Check("residual_c", rep.max_residual_c, 1e-3), Check("residual_d", rep.max_residual_d, 1e-9)]
    write_json(out / "metrics.json", {"checks": [c.to_record() for c in checks], "t_min": sch.t_min})
    for c in checks:
        print(f"{'PASS' if c.passed else 'FAIL'} {c.name} {c.value:.3e} (tol {c.tolerance:g})")
    print("PASS" if rep.passed else "FAIL")
    return 0 if rep.passed else 2


def cmd_sample(cfg, out: Path):
    sch = _schedule(cfg)
    scfg = _sampler_config(cfg, sch)
    eps, dim, gm = _model(cfg, sch)
    n = _positive_int(cfg, "batch")
    x = chunked(cfg["seed"], n, lambda rows, rng: samplers.sample(eps, scfg, (rows.stop - rows.start, dim), rng))
    _write_tensor(out / "samples.crsh", x)
    write_json(out / "metrics.json", _moments_record(x, gm, cfg["method"]))
    return 0


def _training_data(cfg):
    n = _positive_int(cfg, "n_data")
    rng = np.random.default_rng(np.random.SeedSequence(cfg["seed"]).spawn(3)[2])
    if cfg["dataset"] == "drumlet":
        if cfg["mixture"] is not None:
            raise ConfigError("mixture: only used with dataset 'mixture2d'")
        return drumlets(n, rng)
    if cfg["dataset"] == "mixture2d":
        gm = _mixture(cfg["mixture"] if cfg["mixture"] is not None else DEFAULT_2D_MIXTURE)
        return gm.sample(n, rng)
    raise ConfigError(f"dataset: expected 'mixture2d' or 'drumlet', got {cfg['dataset']!r}")


def _net_kwargs(cfg):
    hidden = cfg["hidden"]
    if not isinstance(hidden, list) or not hidden or not all(isinstance(h, int) and h > 0 for h in hidden):
        raise ConfigError("hidden: must be a nonempty list of positive integers")
    return {"hidden": tuple(hidden), "emb_hidden": _positive_int(cfg, "emb_hidden"),
            "n_freq": _positive_int(cfg, "n_freq"), "freq_std": float(cfg["freq_std"])}


def _loop_args(cfg):
    if cfg["max_steps"] is not None:
        _positive_int(cfg, "max_steps", 0)
    return {"epochs": _positive_int(cfg, "epochs", 0), "batch_size": _positive_int(cfg, "batch_size"),
            "max_steps": cfg["max_steps"], "lr": float(cfg["lr"])}


def _write_loss_csv(path, losses):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["epoch", "loss"])
    for i, v in enumerate(losses):
        w.writerow([i, repr(float(v))])
    atomic_write_text(path, buf.getvalue())


def cmd_train(cfg, out: Path):
    sch = _schedule(cfg)
    if cfg["weighting"] not in WEIGHTINGS:
        raise ConfigError(f"weighting: expected one of {WEIGHTINGS}, got {cfg['weighting']!r}")
    if not 0.0 <= cfg["ema_rate"] < 1.0:
        raise ConfigError("ema_rate: must lie in [0, 1)")
    data, _ = _training_data(cfg)
    res = train(data, sch, cfg["weighting"], seed=cfg["seed"], ema_rate=cfg["ema_rate"], **_loop_args(cfg),
                **_net_kwargs(cfg))
    meta = {"kind": "scorenet", "seed": cfg["seed"], "step": res.steps}
    save_checkpoint(out / "raw.crsh", res.net, meta)
    save_checkpoint(out / "ema.crsh", res.ema_net, meta)
    _write_loss_csv(out / "loss.csv", res.epoch_losses)
    return 0


def cmd_train_clf(cfg, out: Path):
    sch = _schedule(cfg)
    data, labels = _training_data(cfg)
    try:
        res = clf_train(data, labels, sch, seed=cfg["seed"], **_loop_args(cfg), **_net_kwargs(cfg))
    except ValueError as exc:
        raise ConfigError(f"dataset: {exc}") from exc
    meta = {"kind": "classifier", "seed": cfg["seed"], "step": len(res.step_losses),
            "classes": res.classifier.classes.tolist()}
    save_checkpoint(out / "clf.crsh", res.classifier.net, meta)
    _write_loss_csv(out / "loss.csv", res.epoch_losses)
    return 0


def cmd_encode(cfg, out: Path):
    sch = _schedule(cfg)
    eps, dim, gm = _model(cfg, sch)
    x0 = _as_rows(_read_input(cfg, "input"), dim, "input")
    z = samplers.encode(eps, sch, x0, cfg["rtol"], cfg["atol"])
    err = relative_error(samplers.decode(eps, sch, z, cfg["rtol"], cfg["atol"]), x0)
    _write_tensor(out / "latents.crsh", z)
    rec = {"round_trip_error": err}
    if gm is not None:
        rec["checks"] = [Check("round_trip_error", err, ROUND_TRIP_TOL).to_record()]
    write_json(out / "metrics.json", rec)
    return 0


def cmd_inpaint(cfg, out: Path):
    sch = _schedule(cfg)
    scfg = _sampler_config(cfg, sch)
    if scfg.method not in ("sde", "ode"):
        raise ConfigError("method: inpainting supports 'sde' or 'ode'")
    eps, dim, _ = _model(cfg, sch)
    ref = _read_input(cfg, "input")
    mask = _read_input(cfg, "mask")
    if mask.shape != (dim,) or ref.shape[-1] != dim:
        raise ConfigError(f"mask: shape {mask.shape} and input shape {ref.shape} must match dimension {dim}")
    if not np.all((mask == 0) | (mask == 1)):
        raise ConfigError("mask: entries must be 0 or 1")
    refs = ref[None] if ref.ndim == 1 else ref
    n = _positive_int(cfg, "batch") if ref.ndim == 1 else refs.shape[0]
    refs = np.broadcast_to(refs, (n, dim))

    def run(rows, rng):
        spec = samplers.InpaintSpec(mask, refs[rows])
        return samplers.inpaint(eps, scfg, spec, (rows.stop - rows.start, dim), rng)

    x = chunked(cfg["seed"], n, run)
    _write_tensor(out / "samples.crsh", x)
    return 0


def cmd_interp(cfg, out: Path):
    sch = _schedule(cfg)
    scfg = _sampler_config(cfg, sch)
    eps, dim, _ = _model(cfg, sch)
    x1 = _as_rows(_read_input(cfg, "input"), dim, "input")
    x2 = _as_rows(_read_input(cfg, "input2"), dim, "input2")
    if x1.shape != x2.shape:
        raise ConfigError(f"input2: shape {x2.shape} differs from input {x1.shape}")
    lam = cfg["lam"]
    if not 0.0 <= lam <= 1.0:
        raise ConfigError("lam: must lie in [0, 1]")
    if cfg["mode"] == "latent":
        x = samplers.interpolate_latent(eps, sch, x1, x2, lam, scfg.rtol, scfg.atol)
    elif cfg["mode"] == "t_indexed":
        if scfg.method not in ("sde", "ode"):
            raise ConfigError("method: t-indexed interpolation denoises with 'sde' or 'ode'")
        if cfg["combine"] not in ("spherical", "linear"):
            raise ConfigError("combine: expected 'spherical' or 'linear'")
        if not sch.t_min < cfg["t_mid"] <= 1.0:
            raise ConfigError("t_mid: must lie in (t_min, 1]")
        x = chunked(cfg["seed"], x1.shape[0], lambda rows, rng: samplers.t_indexed_interpolate(
            eps, scfg, x1[rows], x2[rows], lam, cfg["t_mid"], rng, shared_noise=bool(cfg["shared_noise"]),
            combine=cfg["combine"], denoiser=scfg.method))
    else:
        raise ConfigError(f"mode: expected 'latent' or 't_indexed', got {cfg['mode']!r}")
    _write_tensor(out / "interp.crsh", x)
    return 0


def cmd_variations(cfg, out: Path):
    sch = _schedule(cfg)
    scfg = _sampler_config(cfg, sch)
    eps, dim, _ = _model(cfg, sch)
    x0 = np.repeat(_as_rows(_read_input(cfg, "input"), dim, "input"), _positive_int(cfg, "repeats"), axis=0)
    if not sch.t_min <= cfg["t_level"] <= 1.0:
        raise ConfigError("t_level: must lie in [t_min, 1]")
    x = chunked(cfg["seed"], x0.shape[0],
                lambda rows, rng: samplers.variations(eps, scfg, x0[rows], cfg["t_level"], rng))
    _write_tensor(out / "variations.crsh", x)
    return 0


def cmd_guide(cfg, out: Path):
    sch = _schedule(cfg)
    scfg = _sampler_config(cfg, sch)
    eps, dim, gm = _model(cfg, sch)
    if cfg["classifier"] == "bayes":
        if gm is None:
            raise ConfigError("classifier: 'bayes' needs an oracle model")
        clf = BayesClassifier(gm, sch.relation)
    else:
        net, side = _load_net(cfg["classifier"], "classifier", "classifier")
        clf = TrainedClassifier(net, side["classes"])
        if net.in_dim != dim:
            raise ConfigError(f"classifier: input dimension {net.in_dim} does not match the model ({dim})")
    labels, weights = cfg["labels"], cfg["weights"]
    if not isinstance(labels, list) or not isinstance(weights, list) or len(labels) != len(weights) or not labels:
        raise ConfigError("labels/weights: must be equal-length nonempty lists")
    known = set(np.asarray(clf.classes).tolist())
    bad = [y for y in labels if y not in known]
    if bad:
        raise ConfigError(f"labels: unknown class label(s) {bad}; known {sorted(known)}")
    try:
        spec = samplers.GuidanceSpec(clf.guidance_grad(), labels, weights)
    except ValueError as exc:
        raise ConfigError(f"weights: {exc}") from exc
    guided = samplers.guided_eps(eps, spec)
    n = _positive_int(cfg, "batch")
    x = chunked(cfg["seed"], n, lambda rows, rng: samplers.sample(guided, scfg, (rows.stop - rows.start, dim), rng))
    _write_tensor(out / "samples.crsh", x)
    rec = _moments_record(x)
    if gm is not None:
        pred = gm.classes[gm.class_log_posterior(x).argmax(axis=1)]
        rec["class_fractions"] = {str(int(y)): float(np.mean(pred == y)) for y in gm.classes}
    write_json(out / "metrics.json", rec)
    return 0


COMMANDS = {
    "schedule": cmd_schedule,
    "sample": cmd_sample,
    "train": cmd_train,
    "train-clf": cmd_train_clf,
    "encode": cmd_encode,
    "inpaint": cmd_inpaint,
    "interp": cmd_interp,
    "variations": cmd_variations,
    "guide": cmd_guide,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="scoreflow", description="Score-based diffusion toolkit for toy data.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, type=Path, help="flat JSON config")
        p.add_argument("--out", required=True, type=Path, help="output directory")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
    return parser


def run(command: str, config_path: Path, out: Path, seed: int | None = None) -> int:
    try:
        raw = json.loads(Path(config_path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {config_path}: {exc}") from exc
    cfg = resolve_config(command, raw, Path(config_path).resolve().parent, seed)
    out.mkdir(parents=True, exist_ok=True)
    code = COMMANDS[command](cfg, out)
    write_json(out / "manifest.json", cfg)
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return run(args.command, args.config, args.out, args.seed)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (NumericalError, samplers.IntegrationError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
