"""Command-line pipeline: data generation, training, estimation, benchmarks,
plots.

All subcommands take JSON config files with flag overrides (flags win), and
every run writes a manifest.json echoing the fully resolved configuration so
any output can be reproduced from its manifest alone. A single --seed feeds
every subsystem through labelled hashing.

Exit codes: 0 success, 1 runtime failure, 2 usage error, 3 config error.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, bench, nn, pathint, pfode
from .bench import BenchConfig
from .errors import InvalidArgumentError, SchemaError
from .gmm import (
    benchmark_mixture,
    gmm_log_density,
    gmm_sample,
    load_mixture,
    mixture_to_dict,
    save_mixture,
)
from .pathint import EstimateConfig
from .pfode import OdeConfig
from .rng import derive_key
from .train import save_loss_history, train, train_config_from_dict


def _out_dir(args) -> Path:
    out = os.environ.get("DDE_OUT") or args.out or "."
    p = Path(out)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _write_manifest(out: Path, command: str, config: dict) -> None:
    manifest = {"tool": "diffdens", "version": __version__,
                "command": command, "config": config}
    with open(out / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _load_json(path: str) -> dict:
    try:
        with open(path) as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise SchemaError("config file not found", path) from None
    except json.JSONDecodeError as exc:
        raise SchemaError(f"not valid JSON: {exc}", path) from exc


# ---------------------------------------------------------------------------
# gen-data
# ---------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    out = _out_dir(args)
    if args.mixture:
        mix = load_mixture(args.mixture)
        gen = {"mixture_file": args.mixture}
    else:
        mix = benchmark_mixture(
            args.dim, n_components=args.components,
            seed=args.mixture_seed, half_width=args.half_width,
            comp_std=args.comp_std,
        )
        gen = {
            "dim": args.dim, "components": args.components,
            "mixture_seed": args.mixture_seed, "half_width": args.half_width,
            "comp_std": args.comp_std,
        }
    save_mixture(mix, out / "mixture.json")
    data = gmm_sample(mix, args.n_train, seed=derive_key(args.seed, "data") % 2**63)
    np.save(out / "train_data.npy", data)
    pts = gmm_sample(mix, args.n_points, seed=derive_key(args.seed, "points") % 2**63)
    with open(out / "test_points.json", "w") as fh:
        json.dump({"points": pts.tolist()}, fh)
        fh.write("\n")
    config = {"generator": gen, "n_train": args.n_train,
              "n_points": args.n_points, "seed": args.seed,
              "mixture": mixture_to_dict(mix)}
    _write_manifest(out, "gen-data", config)
    print(f"gen-data: mixture K={len(mix.components)} D={mix.dim}, "
          f"{args.n_train} training samples, {args.n_points} test points -> {out}")
    return 0


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def cmd_train(args) -> int:
    out = _out_dir(args)
    conf = _load_json(args.config) if args.config else {}
    tconf = dict(conf.get("train", {}))
    if args.seed is not None:
        tconf["seed"] = derive_key(args.seed, "train") % 2**63
    for flag in ("n_samples", "n_throws", "n_epochs", "objective"):
        v = getattr(args, flag)
        if v is not None:
            tconf[flag] = v
    if args.process is not None:
        tconf["process"] = {"kind": args.process}
    cfg = train_config_from_dict(tconf)
    data_path = args.data or conf.get("data")
    if data_path:
        data = np.load(data_path)
        mix_echo = {"data": str(data_path)}
    else:
        mix_spec = conf.get("mixture")
        if mix_spec is None:
            raise SchemaError("no training data: give --data or a 'mixture' config entry",
                              args.config or "<flags>")
        from .gmm import mixture_from_dict

        mix = mixture_from_dict(mix_spec)
        data = gmm_sample(mix, cfg.n_samples,
                          seed=derive_key(cfg.seed, "train-data") % 2**63)
        mix_echo = {"mixture": mix_spec}
    if data.shape[0] != cfg.n_samples:
        cfg = train_config_from_dict({**cfg.to_dict(), "n_samples": int(data.shape[0])})
    t0 = time.perf_counter()
    params, history = train(cfg, data)
    wall = time.perf_counter() - t0
    ckpt = out / "checkpoint.bin"
    nn.save_checkpoint(ckpt, params, cfg.objective, cfg.process)
    save_loss_history(out / "loss_history.csv", history)
    _write_manifest(out, "train", {"train": cfg.to_dict(), **mix_echo})
    print(f"train: {cfg.objective} {cfg.process.kind} D={data.shape[1]} "
          f"N={cfg.n_samples} n_t={cfg.n_throws} n_ep={cfg.n_epochs} "
          f"loss={history[-1].mean_loss:.4f} ({wall:.1f}s) -> {ckpt}")
    return 0


# ---------------------------------------------------------------------------
# estimate
# ---------------------------------------------------------------------------

def _load_points(path: str) -> np.ndarray:
    obj = _load_json(path)
    pts = obj.get("points")
    if not isinstance(pts, list) or not pts:
        raise SchemaError("'points' must be a non-empty list", f"{path}$.points")
    return np.asarray(pts, dtype=float)


def cmd_estimate(args) -> int:
    out = _out_dir(args)
    params, objective, proc = nn.load_checkpoint(args.checkpoint)
    points = _load_points(args.points)
    mix = load_mixture(args.mixture) if args.mixture else None
    seed = args.seed if args.seed is not None else 0
    rows = []
    if args.method == "path":
        for i in range(points.shape[0]):
            cfg = EstimateConfig(
                n_throws=args.n_throws, s_min=args.s_min, chunk=args.chunk,
                seed=derive_key(seed, "estimate", i) % 2**63,
            )
            est = pathint.log_density(objective, params, proc, points[i], cfg)
            rows.append([i, est.value, est.std_error, est.n_rejected,
                         est.wall_time, None])
        est_echo = cfg.to_dict()
    else:
        for i in range(points.shape[0]):
            cfg = OdeConfig(
                rtol=args.rtol, atol=args.atol, n_eps=args.n_eps,
                noise=args.noise, trace_mode=args.trace_mode,
                s_min=args.s_min, seed=derive_key(seed, "estimate", i) % 2**63,
            )
            r = pfode.log_density_ode(objective, params, proc, points[i], cfg)
            se = (float(np.std(r.values, ddof=1) / np.sqrt(len(r.values)))
                  if r.values else float("nan"))
            rows.append([i, r.logp, se, 0, r.wall_time, r.n_steps])
        est_echo = cfg.to_dict()
    csv_path = out / f"estimates_{args.method}.csv"
    header = ["x_index", "logp_true", "logp_est", "std_error", "n_rejected",
              "wall_time_s"]
    if args.method == "ode":
        header.append("n_steps")
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for i, value, se, nrej, wt, nsteps in rows:
            truth = f"{gmm_log_density(mix, points[i]):.10g}" if mix else ""
            rec = [i, truth, f"{value:.10g}", f"{se:.10g}", nrej, f"{wt:.6f}"]
            if args.method == "ode":
                rec.append(nsteps)
            w.writerow(rec)
    _write_manifest(out, "estimate", {
        "method": args.method, "checkpoint": args.checkpoint,
        "points": args.points, "mixture": args.mixture, "seed": seed,
        "estimate": est_echo,
    })
    print(f"estimate: {args.method} over {points.shape[0]} points -> {csv_path}")
    return 0


# ---------------------------------------------------------------------------
# benchmark
# ---------------------------------------------------------------------------

def cmd_benchmark(args) -> int:
    out = _out_dir(args)
    conf = _load_json(args.config)
    bconf = dict(conf.get("bench", {}))
    if args.seed is not None:
        bconf["master_seed"] = args.seed
    if args.workers is not None:
        bconf["workers"] = args.workers
    bcfg = BenchConfig(**bconf)
    if args.timing:
        params, objective, proc = nn.load_checkpoint(args.checkpoint)
        points = _load_points(args.points)[: bcfg.timing_samples]
        methods = args.methods.split(",")
        est_cfg = EstimateConfig(n_throws=conf.get("estimate", {}).get("n_throws", 100_000),
                                 seed=bcfg.master_seed)
        ode_cfg = OdeConfig(**conf.get("ode", {}))
        rows = bench.timing_compare(params, proc, objective, methods, points,
                                    est_cfg, ode_cfg)
        csv_path = out / "timing.csv"
        bench.write_timing_csv(csv_path, rows)
        summary = bench.timing_summary(rows)
        _write_manifest(out, "benchmark-timing", {
            "bench": bcfg.to_dict(), "methods": methods,
            "estimate": est_cfg.to_dict(), "ode": ode_cfg.to_dict(),
            "summary": summary,
        })
        for m, s in summary.items():
            print(f"timing {m}: mean {s['mean_s']:.3f}s cv {s['cv']:.2f} "
                  f"[{s['min_s']:.3f}, {s['max_s']:.3f}] n={s['n']}")
        return 0
    grid = conf.get("grid")
    if not grid:
        raise SchemaError("benchmark config needs a non-empty 'grid'", f"{args.config}$.grid")
    base = conf.get("base", {})
    csv_path = out / (args.results_name or "results.csv")
    rows = bench.sweep(base, grid, csv_path, bcfg)
    _write_manifest(out, "benchmark", {"base": base, "grid": grid,
                                       "bench": bcfg.to_dict()})
    print(f"benchmark: {len(rows)} rows -> {csv_path}")
    return 0


# ---------------------------------------------------------------------------
# plot
# ---------------------------------------------------------------------------

def cmd_plot(args) -> int:
    spec = {"kind": args.kind, "x": args.x}
    if args.out:
        spec["out"] = args.out
    files = bench.render_plots(args.results, spec)
    for f in files:
        print(f"plot: {f}")
    return 0


# ---------------------------------------------------------------------------
# parser / main
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="diffdens",
        description="Train small diffusion models on Gaussian mixtures and "
                    "estimate log densities by path integral or flow ODE.",
        epilog="Config precedence: flags override JSON config values. "
               "DDE_OUT overrides --out.",
    )
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a benchmark mixture and samples")
    g.add_argument("--out", help="output directory (default: cwd, or DDE_OUT)")
    g.add_argument("--mixture", help="sample an existing mixture spec JSON")
    g.add_argument("--dim", type=int, default=2)
    g.add_argument("--components", type=int, default=6)
    g.add_argument("--half-width", type=float, default=2.5)
    g.add_argument("--comp-std", type=float, default=0.6)
    g.add_argument("--mixture-seed", type=int, default=bench.MIXTURE_SEED)
    g.add_argument("--n-train", type=int, default=8192)
    g.add_argument("--n-points", type=int, default=100)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a model from a config file")
    t.add_argument("--config", help="experiment config JSON")
    t.add_argument("--data", help="training data .npy (overrides config)")
    t.add_argument("--out")
    t.add_argument("--seed", type=int)
    t.add_argument("--n-samples", type=int)
    t.add_argument("--n-throws", type=int)
    t.add_argument("--n-epochs", type=int)
    t.add_argument("--objective", choices=["sm", "em"])
    t.add_argument("--process", choices=["vp", "ve"])
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("estimate", help="log densities at test points")
    e.add_argument("--method", choices=["path", "ode"], default="path")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--points", required=True, help='JSON {"points": [[...], ...]}')
    e.add_argument("--mixture", help="mixture spec for the logp_true column")
    e.add_argument("--out")
    e.add_argument("--seed", type=int)
    e.add_argument("--n-throws", type=int, default=100_000)
    e.add_argument("--chunk", type=int, default=16384)
    e.add_argument("--s-min", type=float, default=1e-3)
    e.add_argument("--n-eps", type=int, default=1000)
    e.add_argument("--noise", choices=["gaussian", "rademacher"], default="gaussian")
    e.add_argument("--rtol", type=float, default=1e-5)
    e.add_argument("--atol", type=float, default=1e-5)
    e.add_argument("--trace-mode", choices=["per-step", "delayed"], default="per-step")
    e.set_defaults(func=cmd_estimate)

    b = sub.add_parser("benchmark", help="parameter sweep or timing comparison")
    b.add_argument("--config", required=True)
    b.add_argument("--out")
    b.add_argument("--seed", type=int)
    b.add_argument("--workers", type=int)
    b.add_argument("--results-name")
    b.add_argument("--timing", action="store_true",
                   help="run the per-sample timing comparison instead of a sweep")
    b.add_argument("--checkpoint", help="timing mode: model checkpoint")
    b.add_argument("--points", help="timing mode: shared points JSON")
    b.add_argument("--methods", default="path,ode")
    b.set_defaults(func=cmd_benchmark)

    pl = sub.add_parser("plot", help="render SVG plots from a results CSV")
    pl.add_argument("--results", required=True)
    pl.add_argument("--kind", choices=["kl", "timing"], default="kl")
    pl.add_argument("--x", default="N", help="swept column for KL plots")
    pl.add_argument("--out")
    pl.set_defaults(func=cmd_plot)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (SchemaError, InvalidArgumentError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 3
    except Exception as exc:  # categorized runtime failure
        print(f"error [{type(exc).__name__}]: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
