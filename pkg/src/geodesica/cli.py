"""Command-line front end.

Subcommands: train, eval, trace, field, frechet, cluster, compare-spline.
Exit codes: 0 success, 2 usage/config/input error, 3 numerical abort,
4 checkpoint or manifold mismatch.

Run configuration is sectioned key-value text (INI) or JSON with the same
sections::

    [manifold]  name, dim, bounds_low, bounds_high,
                gmm_weights, gmm_means, gmm_covs (row-major, flattened)
    [network]   width, depth, fourier_features, fourier_scale
    [training]  updates, batch, lr, decay, decay_interval, kind, source,
                p_side, log_every, eps_diag, quad_nodes, dtype
    [sampler]   kind, weight, delta, burn_in, chains, thin
    [run]       seed, out

Lists are comma separated. Unknown sections and keys are rejected.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import dataclasses
import json
import logging
import os
import subprocess
import sys
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from . import apps, baseline, eikonal, geoflow, geodesic, manifold, sampling
from .errors import (ConfigError, DiagonalSample, GeodesicaError, IoFault, ManifoldMismatch, NonFiniteLoss,
                     NumericalFault, OutOfBounds, SchemaMismatch, SegmentEscapedDomain, StalledFlow,
                     TrajectoryEscapedDomain)

log = logging.getLogger("geodesica")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_MISMATCH = 0, 2, 3, 4

SCHEMA = {
    "manifold": {"name": str, "dim": int, "bounds_low": "floats", "bounds_high": "floats",
                 "gmm_weights": "floats", "gmm_means": "floats", "gmm_covs": "floats"},
    "network": {"width": int, "depth": int, "fourier_features": int, "fourier_scale": float},
    "training": {"updates": int, "batch": int, "lr": float, "decay": float, "decay_interval": int,
                 "kind": str, "source": "floats", "p_side": bool, "log_every": int, "eps_diag": float,
                 "quad_nodes": int, "dtype": str},
    "sampler": {"kind": str, "weight": float, "delta": float, "burn_in": int, "chains": int, "thin": int},
    "run": {"seed": int, "out": str},
}


@dataclasses.dataclass
class RunConfig:
    manifold: manifold.Manifold
    training: eikonal.TrainingConfig
    sampler: sampling.SamplerConfig
    seed: int = 0
    out: str = "run"
    raw: dict = dataclasses.field(default_factory=dict)


def _coerce(section, key, value, kind):
    where = f"[{section}] {key}"
    try:
        if kind == "floats":
            if isinstance(value, str):
                return [float(v) for v in value.split(",") if v.strip()]
            return [float(v) for v in np.ravel(np.asarray(value, dtype=float))]
        if kind is bool:
            if isinstance(value, bool):
                return value
            low = str(value).strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        if kind is int and isinstance(value, float) and not value.is_integer():
            raise ValueError(value)
        return kind(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{where}: cannot read {value!r} as {getattr(kind, '__name__', kind)}") from None


def parse_config_text(text: str, fmt: str) -> dict:
    """Raw nested dict from INI or JSON text, checked against the schema."""
    if fmt == "json":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"line {exc.lineno} column {exc.colno}: {exc.msg}") from None
        if not isinstance(data, dict) or not all(isinstance(v, dict) for v in data.values()):
            raise ConfigError("JSON config must be an object of section objects")
    else:
        cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
        try:
            cp.read_string(text)
        except configparser.Error as exc:
            raise ConfigError(str(exc).replace("\n", " ")) from None
        data = {s: dict(cp[s]) for s in cp.sections()}
    out = {}
    for section, values in data.items():
        if section not in SCHEMA:
            raise ConfigError(f"unknown section [{section}]; expected one of {sorted(SCHEMA)}")
        out[section] = {}
        for key, value in values.items():
            if key not in SCHEMA[section]:
                raise ConfigError(f"[{section}] unknown key {key!r}; expected one of {sorted(SCHEMA[section])}")
            out[section][key] = _coerce(section, key, value, SCHEMA[section][key])
    return out


def build_config(raw: dict) -> RunConfig:
    m = raw.get("manifold", {})
    if "name" not in m:
        raise ConfigError("[manifold] name is required")
    bounds = None
    if "bounds_low" in m or "bounds_high" in m:
        if not ("bounds_low" in m and "bounds_high" in m):
            raise ConfigError("[manifold] give both bounds_low and bounds_high")
        bounds = (m["bounds_low"], m["bounds_high"])
    gmm_keys = [k for k in ("gmm_weights", "gmm_means", "gmm_covs") if k in m]
    gmm = None
    if gmm_keys:
        if len(gmm_keys) != 3:
            raise ConfigError("[manifold] give all of gmm_weights, gmm_means and gmm_covs")
        dim = m.get("dim", 2)
        k = len(m["gmm_weights"])
        if len(m["gmm_means"]) != k * dim or len(m["gmm_covs"]) != k * dim * dim:
            raise ConfigError(f"[manifold] gmm_means needs {k * dim} and gmm_covs {k * dim * dim} numbers")
        gmm = {"weights": m["gmm_weights"], "means": np.reshape(m["gmm_means"], (k, dim)),
               "covs": np.reshape(m["gmm_covs"], (k, dim, dim))}
    try:
        if gmm is not None and m["name"] != "gmm":
            raise ValueError("gmm_* keys apply to the gmm manifold only")
        man = manifold.builtin(m["name"], m.get("dim", 2), gmm=gmm, bounds=bounds)
        tc = eikonal.TrainingConfig(**raw.get("network", {}), **raw.get("training", {}))
        tc.validate(man)
        run = raw.get("run", {})
        seed = run.get("seed", 0)
        sc = sampling.SamplerConfig(**raw.get("sampler", {}), seed=seed)
        sc.validate()
    except (ValueError, OutOfBounds) as exc:
        raise ConfigError(str(exc)) from None
    return RunConfig(man, tc, sc, seed, run.get("out", "run"), raw)


def load_config(path) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    fmt = "json" if str(path).endswith(".json") else "ini"
    return build_config(parse_config_text(text, fmt))


# output helpers -----------------------------------------------------------------------------


def _fmt(x) -> str:
    return f"{float(x):.17g}"


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (float, np.floating)):
        # Shortest repr round-trips, which is at most 17 significant digits.
        return float(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n")


def _git_describe() -> str:
    try:
        res = subprocess.run(["git", "describe", "--always", "--dirty"], capture_output=True, text=True,
                             timeout=10, cwd=Path(__file__).resolve().parent)
        return res.stdout.strip() or "unknown"
    except (OSError, subprocess.SubprocessError):
        return "unknown"


def write_manifest(out: Path, command: str, args: dict, config: dict | None = None, seed=None) -> None:
    write_json(out / "run_manifest.json", {
        "command": command, "args": args, "config": config, "seed": seed,
        "git_describe": _git_describe(), "numpy": np.__version__,
    })


def _point(text: str, what: str) -> np.ndarray:
    try:
        return np.array([float(v) for v in text.split(",")])
    except ValueError:
        raise ConfigError(f"cannot parse {what} {text!r}; expected comma-separated numbers") from None


def _read_points(path, what: str) -> np.ndarray:
    try:
        with open(path) as fh:
            first = fh.readline()
        skip = 0 if baseline._is_numeric_row(first) else 1
        return np.loadtxt(path, delimiter=",", skiprows=skip, ndmin=2)
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot read {what} from {path}: {exc}") from None


def _out_dir(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _model_from_args(args):
    man = load_config(args.config).manifold if getattr(args, "config", None) else None
    if getattr(args, "exact", False):
        if man is None:
            if not args.manifold:
                raise ConfigError("--exact needs --manifold or --config")
            man = manifold.builtin(args.manifold, args.dim)
        model = eikonal.exact_distance_for(man)
        if model is None:
            raise ConfigError(f"no closed-form distance for manifold {man.name!r}")
        return model
    if not args.checkpoint:
        raise ConfigError("--checkpoint is required")
    return eikonal.load_model(args.checkpoint, man)


# commands -----------------------------------------------------------------------------------


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    seed = cfg.seed if args.seed is None else args.seed
    cfg.sampler.seed = seed
    out = _out_dir(args.out or cfg.out)
    write_manifest(out, "train", {"config": str(args.config)}, cfg.raw, seed)
    sampler = sampling.make_sampler(cfg.manifold, cfg.sampler)
    ckpt = out / "model.ckpt"
    res = eikonal.train(cfg.manifold, cfg.training, sampler, seed=seed, checkpoint_path=ckpt)
    with open(out / "loss.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["update", "loss", "lr"])
        for t, lv, lr in res.history:
            w.writerow([t, _fmt(lv), _fmt(lr)])
    print(json.dumps({"checkpoint": str(ckpt), "final_loss": res.history[-1][1] if res.history else None}))
    return EXIT_OK


def axiom_checks(model, n_pairs: int = 10_000, seed: int = 0) -> dict:
    man = model.manifold
    rng = np.random.default_rng(seed)
    p = rng.uniform(man.bounds_low, man.bounds_high, (n_pairs, man.dim))
    q = rng.uniform(man.bounds_low, man.bounds_high, (n_pairs, man.dim))
    if getattr(model, "kind", None) == "single_point":
        p[:] = model.source
    d_pq = np.asarray(model.distance(p, q))
    d_pp = np.asarray(model.distance(p, p))
    lower = eikonal.pullback_euclidean(man, p, q)
    out = {
        "pairs": n_pairs,
        "M1_max_abs_self_distance": float(np.max(np.abs(d_pp))),
        "M2_min_distance": float(np.min(d_pq)),
        "M5_violations": int(np.sum(d_pq < lower)),
    }
    if getattr(model, "symmetric", False):
        d_qp = np.asarray(model.distance(q, p))
        out["M3_max_abs_asymmetry"] = float(np.max(np.abs(d_pq - d_qp)))
        out["M3_bit_exact_violations"] = int(np.sum(d_pq != d_qp))
    return out


def cmd_eval(args) -> int:
    model = _model_from_args(args)
    man = model.manifold
    report = {"manifold": man.ident, "axioms": axiom_checks(model, args.axiom_pairs, args.seed)}
    oracle = eikonal.exact_distance_for(man)
    if args.oracle:
        if oracle is None:
            raise ConfigError(f"no analytic oracle for manifold {man.name!r}")
        report["relative_l2_error"] = eikonal.relative_error(model, oracle.distance, args.n_pairs, args.seed)
    rng = np.random.default_rng(args.seed + 1)
    q = sampling.UniformSampler(man, args.seed + 1).draw(args.n_pairs)
    p = (np.broadcast_to(model.source, q.shape) if getattr(model, "kind", None) == "single_point"
         else sampling.UniformSampler(man, int(rng.integers(2 ** 31))).draw(args.n_pairs))
    keep = eikonal.pullback_euclidean(man, p, q) >= eikonal.EPS_DIAG
    r = eikonal.eikonal_residual(model, p[keep], q[keep])
    report["residual"] = {"mean": float(np.mean(r)), "rms": float(np.sqrt(np.mean(r * r))),
                          "max_abs": float(np.max(np.abs(r))), "pairs": int(keep.sum())}
    text = json.dumps(_jsonable(report), indent=2, sort_keys=True)
    if args.out:
        out = _out_dir(args.out)
        (out / "eval.json").write_text(text + "\n")
        write_manifest(out, "eval", vars_clean(args))
    print(text)
    return EXIT_OK


def vars_clean(args) -> dict:
    return {k: v for k, v in vars(args).items() if k != "func"}


def cmd_trace(args) -> int:
    model = _model_from_args(args)
    man = model.manifold
    p, q = _point(args.p, "--p"), _point(args.q, "--q")
    man.check_bounds(p, "--p")
    man.check_bounds(q, "--q")
    curve = geoflow.trace_geodesic(model, p, q, args.steps)
    out = _out_dir(args.out)
    curve.to_csv(out / "curve.csv")
    summary = {"length": geodesic.curve_length(man, curve), "distance": float(model.distance(p, q)),
               "nodes": len(curve.lambdas)}
    write_json(out / "trace.json", summary)
    write_manifest(out, "trace", vars_clean(args))
    print(json.dumps(_jsonable(summary)))
    return EXIT_OK


def cmd_field(args) -> int:
    model = _model_from_args(args)
    p = _point(args.p, "--p")
    model.manifold.check_bounds(p, "--p")
    field = geoflow.field_on_grid(model, p, args.resolution)
    out = _out_dir(args.out)
    field.to_csv(out / "field.csv")
    write_manifest(out, "field", vars_clean(args))
    print(json.dumps({"rows": len(field.values), "min": float(field.values.min())}))
    return EXIT_OK


def cmd_frechet(args) -> int:
    model = _model_from_args(args)
    x = _read_points(args.samples, "samples")
    model.manifold.check_bounds(x, "samples")
    res = apps.frechet_mean(model, x, chains=args.chains, lr=args.lr, iters=args.iters, seed=args.seed)
    out = _out_dir(args.out)
    summary = {"mean": res.mean, "best_chain": res.best_chain, "chains": res.chains,
               "objective": float(res.objective[-1, res.best_chain]), "spread": res.spread,
               "iterations": len(res.trajectory) - 1}
    write_json(out / "frechet.json", summary)
    with open(out / "trajectory.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        n = x.shape[1]
        w.writerow(["iteration", "chain"] + [f"x{i + 1}" for i in range(n)] + ["objective"])
        for t, (pts, obj) in enumerate(zip(res.trajectory, res.objective)):
            for c in range(res.chains):
                w.writerow([t, c] + [_fmt(v) for v in pts[c]] + [_fmt(obj[c])])
    write_manifest(out, "frechet", vars_clean(args))
    print(json.dumps(_jsonable(summary)))
    return EXIT_OK


def cmd_cluster(args) -> int:
    model = _model_from_args(args)
    x = _read_points(args.samples, "samples")
    model.manifold.check_bounds(x, "samples")
    res = apps.kmeans(model, x, args.k, seed=args.seed, max_iters=args.max_iters)
    out = _out_dir(args.out)
    summary = {"centroids": res.centroids, "iterations": res.iterations, "converged": res.converged,
               "objective": res.objective}
    write_json(out / "cluster.json", summary)
    res.to_csv(out / "assignments.csv", x)
    with open(out / "objective.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "objective"])
        for i, v in enumerate(res.objective, 1):
            w.writerow([i, _fmt(v)])
    if args.baselines:
        b1, b2 = apps.kmeans_euclidean_baselines(model.manifold, x, args.k, seed=args.seed)
        apps.write_clusterings_csv(out / "comparison.csv", x,
                                   {"geodesic": res, "intrinsic_l2": b1, "ambient_l2": b2})
    write_manifest(out, "cluster", vars_clean(args))
    print(json.dumps(_jsonable({"iterations": res.iterations, "converged": res.converged})))
    return EXIT_OK


def cmd_compare_spline(args) -> int:
    model = _model_from_args(args)
    pairs = _read_points(args.pairs, "pairs")
    if pairs.shape[1] != 2 * model.manifold.dim:
        raise ConfigError(f"pairs file needs {2 * model.manifold.dim} columns")
    out = _out_dir(args.out)
    rows = baseline.compare_against_model(model, pairs, out / "comparison.csv", lr=args.lr,
                                          max_iters=args.max_iters, k_knots=args.knots)
    write_manifest(out, "compare-spline", vars_clean(args))
    print(json.dumps({"pairs": len(rows), "converged": sum(r.converged for r in rows)}))
    return EXIT_OK


# parser ---------------------------------------------------------------------------------------


def _model_flags(sp, exact: bool = True):
    sp.add_argument("--checkpoint", help="trained model checkpoint")
    sp.add_argument("--config", help="run config; its manifold must match the checkpoint")
    if exact:
        sp.add_argument("--exact", action="store_true", help="use the closed-form distance instead of a model")
        sp.add_argument("--manifold", help="builtin manifold name (with --exact)")
        sp.add_argument("--dim", type=int, default=2)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="geodesica", description=__doc__.split("\n")[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("train", help="train a distance model from a run config")
    sp.add_argument("--config", required=True)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="relative error, metric axioms and residual statistics")
    _model_flags(sp)
    sp.add_argument("--oracle", action="store_true", help="compare against the analytic distance")
    sp.add_argument("--n-pairs", type=int, default=4096)
    sp.add_argument("--axiom-pairs", type=int, default=10_000)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("trace", help="trace the geodesic from q back to p")
    _model_flags(sp)
    sp.add_argument("--p", required=True)
    sp.add_argument("--q", required=True)
    sp.add_argument("--steps", type=int, default=geoflow.STEPS)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_trace)

    sp = sub.add_parser("field", help="distance field and flow on a grid around p")
    _model_flags(sp)
    sp.add_argument("--p", required=True)
    sp.add_argument("--resolution", type=int, default=64)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_field)

    sp = sub.add_parser("frechet", help="Frechet mean of a sample CSV")
    _model_flags(sp)
    sp.add_argument("--samples", required=True)
    sp.add_argument("--chains", type=int, default=apps.CHAINS)
    sp.add_argument("--iters", type=int, default=1000)
    sp.add_argument("--lr", type=float, default=apps.FRECHET_LR)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_frechet)

    sp = sub.add_parser("cluster", help="k-means with the learned distance")
    _model_flags(sp)
    sp.add_argument("--samples", required=True)
    sp.add_argument("--k", type=int, required=True)
    sp.add_argument("--max-iters", type=int, default=50)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--baselines", action="store_true", help="also emit Euclidean clusterings side by side")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_cluster)

    sp = sub.add_parser("compare-spline", help="spline baseline lengths against the model distance")
    _model_flags(sp)
    sp.add_argument("--pairs", required=True, help="CSV with p1..pn,q1..qn per row")
    sp.add_argument("--lr", type=float, default=1e-3)
    sp.add_argument("--max-iters", type=int, default=50_000)
    sp.add_argument("--knots", type=int, default=baseline.K_KNOTS)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_compare_spline)
    return ap


def _thread_limit():
    value = os.environ.get("GEODESICA_THREADS")
    if not value:
        return nullcontext()
    try:
        n = int(value)
        if n < 1:
            raise ValueError
    except ValueError:
        raise ConfigError(f"GEODESICA_THREADS must be a positive integer, got {value!r}") from None
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with _thread_limit():
            return args.func(args)
    except (ConfigError, OutOfBounds, DiagonalSample, SegmentEscapedDomain) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NonFiniteLoss, NumericalFault, StalledFlow, TrajectoryEscapedDomain) as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ManifoldMismatch, SchemaMismatch, IoFault) as exc:
        print(f"mismatch: {exc}", file=sys.stderr)
        return EXIT_MISMATCH
    except GeodesicaError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
