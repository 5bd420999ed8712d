"""`abc-hmm`: JSON-configured runs with CSV/JSON artifacts.

Every run is described by a strict-schema JSON config (unknown fields are
rejected, defaults are applied and echoed back) and produces three files in
the output directory, written atomically (temp file + rename):

* ``rows.csv``    command- or study-specific rows, pinned header,
* ``summary.json`` metrics, the echoed config, library version, master seed,
* ``log.txt``     a short human-readable account of the run.

All randomness flows from the single master seed in the config, so rerunning
any command with an identical config is byte-identical on rows.csv.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import tempfile
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import __version__
from .estimators import FlatPrior, GaussianPrior, abc_mle, abc_posterior
from .inference import log_likelihood
from .models import make_spec, simulate
from .studies import (
    ROW_FIELDS,
    StudyResult,
    bias_rate_study,
    bvm_study,
    clt_study,
    dyadic_gradient_check,
    optimal_eps_study,
    surface_convergence_study,
)

__all__ = ["RunConfig", "ConfigError", "parse_config", "run", "emit_csv", "main"]


class ConfigError(ValueError):
    """Config rejected; the message carries the offending field path."""


_TOP_KEYS = {"command", "model", "epsilon", "n", "seed", "theta", "obs", "prior", "study", "output_dir"}
_COMMANDS = {"simulate", "loglik", "mle", "posterior", "study"}
_MODEL_KEYS = {"family", "params", "theta"}
_PRIOR_KEYS = {"kind", "mean", "sd"}

_STUDY_KEYS = {
    "surface_convergence": {"name", "family", "params", "theta_star", "epsilon_list", "n_list", "grid_points"},
    "bias_rate": {"name", "family", "params", "theta_star", "epsilon_list", "method", "quad_tol", "search_tol", "n_long"},
    "dyadic_gradient": {"name", "k_list", "truncation"},
    "clt": {"name", "family", "params", "theta_star", "epsilon", "n", "replications", "grid_points", "xtol"},
    "bvm": {"name", "family", "params", "theta_star", "epsilon", "n_list", "prior", "fine_grid_points"},
    "optimal_eps": {"name", "family", "params", "theta_star", "n_list", "epsilon_grid", "replications", "grid_points"},
}

DEFAULT_STUDIES = {
    "surface_convergence": {
        "family": "gaussian_scale",
        "params": {},
        "theta_star": [1.0],
        "epsilon_list": [0.4, 0.2, 0.1, 0.05],
        "n_list": [1000, 4000, 16000, 64000],
        "grid_points": 50,
    },
    "bias_rate": {
        "family": "gaussian_scale",
        "params": {},
        "theta_star": [1.0],
        "epsilon_list": [0.4, 0.28284271247461906, 0.2, 0.1414213562373095, 0.1],
    },
    "dyadic_gradient": {"k_list": [0, 1, 2], "truncation": 20},
    "clt": {
        "family": "gaussian_scale",
        "params": {},
        "theta_star": [1.0],
        "epsilon": 0.5,
        "n": 2000,
        "replications": 500,
    },
    "bvm": {
        "family": "gaussian_scale",
        "params": {},
        "theta_star": [1.0],
        "epsilon": 0.3,
        "n_list": [500, 2000, 8000],
        "prior": {"kind": "flat"},
    },
    "optimal_eps": {
        "family": "gaussian_scale",
        "params": {},
        "theta_star": [1.0],
        "n_list": [1000, 10000, 100000],
        "epsilon_grid": [0.1, 0.1414213562373095, 0.2, 0.28284271247461906, 0.4, 0.5656854249492381, 0.8],
        "replications": 160,
    },
}


@dataclass
class RunConfig:
    command: str
    model: Optional[dict] = None
    epsilon: float = 0.0
    n: Optional[int] = None
    seed: int = 0
    theta: Optional[list] = None
    obs: Optional[list] = None
    prior: Optional[dict] = None
    study: Optional[dict] = None
    output_dir: str = "abc-hmm-out"

    def to_dict(self) -> dict:
        out = {"command": self.command, "epsilon": self.epsilon, "seed": self.seed,
               "output_dir": self.output_dir}
        for key in ("model", "n", "theta", "obs", "prior", "study"):
            v = getattr(self, key)
            if v is not None:
                out[key] = v
        return out


def _require_number(value, path, minimum=None, integer=False):
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"{path}: expected a number, got {value!r}")
    if integer and int(value) != value:
        raise ConfigError(f"{path}: expected an integer, got {value!r}")
    if minimum is not None and value < minimum:
        raise ConfigError(f"{path}: must be >= {minimum}, got {value}")
    return int(value) if integer else float(value)


def _require_list(value, path):
    if not isinstance(value, list) or not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in value):
        raise ConfigError(f"{path}: expected a list of numbers")
    return [float(v) for v in value]


def parse_config(source) -> RunConfig:
    """Validate a config given as a dict, JSON text, or a path to a JSON file."""
    if isinstance(source, RunConfig):
        source = source.to_dict()
    if isinstance(source, (str, os.PathLike)) and not str(source).lstrip().startswith("{"):
        try:
            with open(source) as fh:
                text = fh.read()
        except OSError as exc:
            raise ConfigError(f"cannot read config file {source}: {exc}") from exc
        source = text
    if isinstance(source, str):
        try:
            source = json.loads(source)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"malformed JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}") from exc
    if not isinstance(source, dict):
        raise ConfigError("config must be a JSON object")

    unknown = set(source) - _TOP_KEYS
    if unknown:
        raise ConfigError(f"unknown config field(s): {sorted(unknown)}")
    if "command" not in source:
        raise ConfigError("command: required")
    command = source["command"]
    if command not in _COMMANDS:
        raise ConfigError(f"command: {command!r} is not one of {sorted(_COMMANDS)}")

    cfg = RunConfig(command=command)
    if "epsilon" in source:
        cfg.epsilon = _require_number(source["epsilon"], "epsilon", minimum=0.0)
    if "seed" in source:
        cfg.seed = _require_number(source["seed"], "seed", minimum=0, integer=True)
        if cfg.seed >= 2**64:
            raise ConfigError("seed: must fit in 64 bits")
    if "n" in source:
        cfg.n = _require_number(source["n"], "n", minimum=1, integer=True)
    if "output_dir" in source:
        if not isinstance(source["output_dir"], str):
            raise ConfigError("output_dir: expected a string")
        cfg.output_dir = source["output_dir"]
    if "obs" in source:
        cfg.obs = _require_list(source["obs"], "obs")
    if "theta" in source:
        cfg.theta = _require_list(source["theta"], "theta")

    if "model" in source:
        model = source["model"]
        if not isinstance(model, dict):
            raise ConfigError("model: expected an object")
        unknown = set(model) - _MODEL_KEYS
        if unknown:
            raise ConfigError(f"model: unknown field(s) {sorted(unknown)}")
        if "family" not in model:
            raise ConfigError("model.family: required")
        out_model = {"family": model["family"], "params": model.get("params", {})}
        if not isinstance(out_model["params"], dict):
            raise ConfigError("model.params: expected an object")
        if "theta" in model:
            out_model["theta"] = _require_list(model["theta"], "model.theta")
        cfg.model = out_model

    if "prior" in source:
        prior = source["prior"]
        if not isinstance(prior, dict) or set(prior) - _PRIOR_KEYS:
            raise ConfigError("prior: expected an object with kind/mean/sd")
        if prior.get("kind", "flat") not in ("flat", "gaussian"):
            raise ConfigError(f"prior.kind: unknown kind {prior.get('kind')!r}")
        cfg.prior = prior

    if "study" in source:
        st = source["study"]
        if not isinstance(st, dict):
            raise ConfigError("study: expected an object")
        name = st.get("name")
        if name not in _STUDY_KEYS:
            raise ConfigError(f"study.name: {name!r} is not one of {sorted(_STUDY_KEYS)}")
        unknown = set(st) - _STUDY_KEYS[name]
        if unknown:
            raise ConfigError(f"study: unknown field(s) {sorted(unknown)} for {name}")
        merged = dict(DEFAULT_STUDIES[name])
        merged.update({k: v for k, v in st.items() if k != "name"})
        merged["name"] = name
        cfg.study = merged

    if command == "study" and cfg.study is None:
        raise ConfigError("study: required for the study command")
    if command in ("loglik", "mle", "posterior") and cfg.obs is None:
        raise ConfigError(f"obs: required for the {command} command")
    if command in ("simulate", "loglik", "mle", "posterior") and cfg.model is None:
        raise ConfigError(f"model: required for the {command} command")
    if command == "simulate" and cfg.n is None:
        raise ConfigError("n: required for the simulate command")
    return cfg


# ---------------------------------------------------------------------------
# artifact writing
# ---------------------------------------------------------------------------


def _atomic_write(path: str, text: str):
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", text=True)
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _csv_text(fields, rows) -> str:
    import io

    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\r\n")
    writer.writerow(fields)
    for row in rows:
        writer.writerow(["" if row.get(f) is None else row[f] for f in fields])
    return buf.getvalue()


def emit_csv(study: StudyResult, path: str):
    """Write the study rows as RFC-4180 CSV with the pinned per-study header."""
    if not study.rows:
        raise ValueError("study produced no rows")
    _atomic_write(path, _csv_text(ROW_FIELDS[study.study_name], study.rows))


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serialisable: {type(o)}")


def _write_summary(path, command, config: RunConfig, metrics: dict):
    payload = {
        "command": command,
        "config": config.to_dict(),
        "metrics": metrics,
        "library_version": __version__,
        "master_seed": config.seed,
    }
    _atomic_write(path, json.dumps(payload, indent=2, sort_keys=True, default=_json_default) + "\n")


def _build_prior(prior_cfg):
    if prior_cfg is None or prior_cfg.get("kind", "flat") == "flat":
        return FlatPrior()
    return GaussianPrior(prior_cfg["mean"], prior_cfg["sd"])


def _theta_fields(d):
    return [f"theta_{i}" for i in range(d)]


_STUDY_RUNNERS = {}


def _run_study(study_cfg: dict, seed: int) -> StudyResult:
    name = study_cfg["name"]
    kw = {k: v for k, v in study_cfg.items() if k != "name"}
    if name == "dyadic_gradient":
        return dyadic_gradient_check(kw["k_list"], kw.get("truncation", 20))
    spec = make_spec(kw.pop("family"), **kw.pop("params", {}))
    theta_star = kw.pop("theta_star")
    if name == "surface_convergence":
        return surface_convergence_study(
            spec, kw["epsilon_list"], kw["n_list"], seed=seed, theta_star=theta_star,
            grid_points=kw.get("grid_points", 50),
        )
    if name == "bias_rate":
        method_cfg = {"theta_star": theta_star}
        for key in ("method", "quad_tol", "search_tol", "n_long"):
            if key in kw:
                method_cfg[key] = kw[key]
        method_cfg.setdefault("seed", seed)
        return bias_rate_study(spec, kw["epsilon_list"], method_cfg)
    if name == "clt":
        return clt_study(
            spec, kw["epsilon"], kw["n"], kw["replications"], seed=seed, theta_star=theta_star,
            grid_points=kw.get("grid_points", 64), xtol=kw.get("xtol", 1e-6),
        )
    if name == "bvm":
        return bvm_study(
            spec, kw["epsilon"], kw["n_list"], prior=_build_prior(kw.get("prior")), seed=seed,
            theta_star=theta_star, fine_grid_points=kw.get("fine_grid_points", 801),
        )
    if name == "optimal_eps":
        return optimal_eps_study(
            spec, kw["n_list"], kw["epsilon_grid"], kw["replications"], seed=seed,
            theta_star=theta_star, grid_points=kw.get("grid_points", 48),
        )
    raise ConfigError(f"study.name: unknown study {name!r}")


def run(config: RunConfig) -> dict:
    """Execute a validated config; writes rows.csv / summary.json / log.txt.

    Returns the metrics dict that went into summary.json.
    """
    out = config.output_dir
    os.makedirs(out, exist_ok=True)
    log_lines = [f"abc-hmm {__version__}", f"command: {config.command}", f"master seed: {config.seed}"]

    if config.command == "study":
        result = _run_study(config.study, config.seed)
        fields = ROW_FIELDS[result.study_name]
        rows = result.rows
        metrics = result.summary
        log_lines.append(f"study: {result.study_name} ({len(rows)} rows)")
    else:
        spec = make_spec(config.model["family"], **config.model.get("params", {}))
        theta = config.model.get("theta") or config.theta
        if config.command == "simulate":
            if theta is None:
                raise ConfigError("model.theta: required for the simulate command")
            traj = simulate(spec, theta, config.n, config.seed)
            fields = ["step", "hidden", "observed"]
            rows = [{"step": 0, "hidden": int(traj.hidden[0]), "observed": None}]
            rows += [
                {"step": k + 1, "hidden": int(traj.hidden[k + 1]), "observed": float(traj.observed[k])}
                for k in range(config.n)
            ]
            metrics = {"n": config.n, "theta": list(theta)}
        elif config.command == "loglik":
            if theta is None:
                raise ConfigError("model.theta: required for the loglik command")
            res = log_likelihood(spec, theta, config.epsilon, config.obs)
            fields = ["step", "log_normalizer"]
            rows = [{"step": k + 1, "log_normalizer": float(v)} for k, v in enumerate(res.per_step)]
            metrics = {"loglik": res.loglik, "zero_step": res.zero_step}
        elif config.command == "mle":
            res = abc_mle(spec, config.epsilon, config.obs)
            d = spec.theta_space.dim
            fields = ["eval_index"] + _theta_fields(d) + ["objective"]
            rows = []
            for i, (t, v) in enumerate(res.optimizer_trace):
                row = {"eval_index": i, "objective": v}
                row.update({f"theta_{j}": t[j] for j in range(d)})
                rows.append(row)
            metrics = {
                "theta_hat": res.theta_hat.tolist(),
                "loglik_at_hat": res.loglik_at_hat,
                "on_boundary": res.on_boundary,
            }
        elif config.command == "posterior":
            post = abc_posterior(spec, config.epsilon, config.obs, _build_prior(config.prior))
            d = spec.theta_space.dim
            fields = _theta_fields(d) + ["log_unnorm", "weight"]
            rows = []
            for i in range(post.theta_grid.shape[0]):
                row = {f"theta_{j}": float(post.theta_grid[i, j]) for j in range(d)}
                row["log_unnorm"] = float(post.log_unnorm[i])
                row["weight"] = float(post.weights[i])
                rows.append(row)
            metrics = {
                "mean": post.mean().tolist(),
                "sd": post.sd().tolist(),
                "mode": post.mode().tolist(),
            }
        else:  # pragma: no cover - parse_config already rejects this
            raise ConfigError(f"unknown command {config.command}")
        log_lines.append(f"{config.command}: {len(rows)} rows")

    _atomic_write(os.path.join(out, "rows.csv"), _csv_text(fields, rows))
    _write_summary(os.path.join(out, "summary.json"), config.command, config, metrics)
    log_lines.append("wrote rows.csv, summary.json")
    _atomic_write(os.path.join(out, "log.txt"), "\n".join(log_lines) + "\n")
    return metrics


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def _num_list(text):
    return [float(tok) for tok in text.split(",") if tok.strip() != ""]


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="abc-hmm",
        description="Tolerance-smoothed likelihood inference for hidden Markov models.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="path to a JSON config file")
        p.add_argument("--json", dest="inline_json", help="inline JSON config text")
        p.add_argument("--out", help="output directory")
        p.add_argument("--seed", type=int, help="master seed")
        p.add_argument("--epsilon", type=float, help="tolerance")

    for name in ("simulate", "loglik", "mle", "posterior"):
        p = sub.add_parser(name)
        common(p)
        p.add_argument("--family", help="built-in model family name")
        p.add_argument("--theta", type=_num_list, help="comma-separated parameter vector")
        p.add_argument("--obs", type=_num_list, help="comma-separated observations")
        p.add_argument("--n", type=int, help="number of observations to simulate")

    p = sub.add_parser("study")
    common(p)
    p.add_argument("name", help="study name, e.g. bias-rate, dyadic-gradient, clt, bvm, "
                                "surface-convergence, optimal-eps")
    p.add_argument("--k", type=lambda s: [int(v) for v in s.split(",")], help="k list (dyadic-gradient)")
    p.add_argument("--replications", type=int, help="replication count override")
    p.add_argument("--n", type=int, help="sample size override (clt)")

    args = parser.parse_args(argv)

    try:
        base = {}
        if args.config:
            with open(args.config) as fh:
                base = json.load(fh)
        elif args.inline_json:
            base = json.loads(args.inline_json)
        base["command"] = args.command
        if args.out is not None:
            base["output_dir"] = args.out
        if args.seed is not None:
            base["seed"] = args.seed
        if args.epsilon is not None:
            base["epsilon"] = args.epsilon
        if args.command == "study":
            study = dict(base.get("study") or {})
            study["name"] = args.name.replace("-", "_")
            if args.k is not None:
                study["k_list"] = args.k
            if args.replications is not None:
                study["replications"] = args.replications
            if args.n is not None:
                study["n"] = args.n
            base["study"] = study
        else:
            model = dict(base.get("model") or {})
            if args.family is not None:
                model["family"] = args.family
            if args.theta is not None:
                model["theta"] = args.theta
            if model:
                base["model"] = model
            if args.obs is not None:
                base["obs"] = args.obs
            if args.n is not None:
                base["n"] = args.n
        config = parse_config(base)
    except (ConfigError, json.JSONDecodeError, OSError) as exc:
        print(json.dumps({"error": {"type": "config", "message": str(exc)}}), file=sys.stderr)
        return 2

    try:
        run(config)
    except Exception as exc:  # surfaced as machine-readable runtime errors
        print(json.dumps({"error": {"type": "runtime", "message": str(exc)}}), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
