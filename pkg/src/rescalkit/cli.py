"""Command-line surface: generate data, factorize, select k, benchmark.

Every run writes a manifest.json with all resolved parameters; ``rerun``
replays a manifest. Exit codes: 0 success, 2 usage error, 3 data error,
4 numerical failure.

RESCALK_THREADS caps the BLAS thread pools backing the local kernels (it
must be read before the numeric stack loads, hence the lazy imports here).
"""

from __future__ import annotations

import functools
import json
import os
import sys
from pathlib import Path

if os.environ.get("RESCALK_THREADS"):
    os.environ.setdefault("OMP_NUM_THREADS", os.environ["RESCALK_THREADS"])
    os.environ.setdefault("OPENBLAS_NUM_THREADS", os.environ["RESCALK_THREADS"])
    os.environ.setdefault("MKL_NUM_THREADS", os.environ["RESCALK_THREADS"])

import click

EXIT_DATA = 3
EXIT_NUMERICAL = 4


def _write_json(path: Path, payload: dict) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")


def _manifest(out: Path, subcommand: str, params: dict) -> None:
    from . import __version__

    _write_json(out / "manifest.json", {
        "tool": "rescalkit",
        "version": __version__,
        "subcommand": subcommand,
        "parameters": params,
    })


def _handle_errors(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        from .errors import NumericalError, RescalkitError

        try:
            return fn(*args, **kwargs)
        except NumericalError as e:
            click.echo(f"numerical failure: {e}", err=True)
            sys.exit(EXIT_NUMERICAL)
        except RescalkitError as e:
            click.echo(f"error: {e}", err=True)
            sys.exit(EXIT_DATA)
        except OSError as e:
            click.echo(f"i/o error: {e}", err=True)
            sys.exit(EXIT_DATA)

    return wrapper


def _parse_grid(p: int) -> int:
    import math

    if p < 1 or math.isqrt(p) ** 2 != p:
        raise click.UsageError(f"--grid must be a positive perfect square, got {p}")
    return p


@click.group()
@click.version_option(package_name="rescalkit")
def main():
    """Non-negative RESCAL factorization with automatic model selection."""


@main.command()
@click.option("--n", type=int, required=True, help="Entity count.")
@click.option("--m", type=int, required=True, help="Relation count.")
@click.option("--k", type=int, required=True, help="Planted latent dimension.")
@click.option("--noise", type=float, default=0.01, show_default=True,
              help="Relative elementwise noise bound.")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--density", type=float, default=1.0, show_default=True,
              help="Keep only the largest entries down to this density (<1 writes sparse).")
@click.option("--sigma", type=float, default=None, help="Feature bump width in (0,1).")
@click.option("--min-spacing", type=float, default=None, help="Minimum bump center distance.")
@click.option("--pedestal", type=float, default=0.0, show_default=True,
              help="Positive feature offset as a fraction of the peak.")
@click.option("--feature-mode", type=click.Choice(["bumps", "iid"]), default="bumps",
              show_default=True)
@click.option("--precision", type=click.Choice(["32", "64"]), default="64", show_default=True)
@click.option("--out", type=click.Path(path_type=Path), required=True)
@_handle_errors
def synth(n, m, k, noise, seed, density, sigma, min_spacing, pedestal,
          feature_mode, precision, out):
    """Generate a planted tensor plus ground-truth files."""
    from .synth import SynthSpec, generate, sparsify
    from .tensor import save_tensor

    out.mkdir(parents=True, exist_ok=True)
    spec = SynthSpec(
        n=n, m=m, k_true=k, sigma=sigma, min_spacing=min_spacing, noise=noise,
        seed=seed, feature_mode=feature_mode, pedestal=pedestal,
        precision=int(precision),
    )
    x, a_true, r_true = generate(spec)
    if density < 1.0:
        x = sparsify(x, density)
        tensor_path = out / "x.coo"
        save_tensor(x, tensor_path, format="sparse-coo")
    else:
        tensor_path = out / "x.rsk"
        save_tensor(x, tensor_path, format="dense-binary")
    _write_json(out / "ground_truth.json", {
        "n": n, "m": m, "k_true": k,
        "a_true": a_true.tolist(), "r_true": r_true.tolist(),
    })
    params = {
        "n": n, "m": m, "k": k, "noise": noise, "seed": seed, "density": density,
        "sigma": sigma, "min_spacing": min_spacing, "pedestal": pedestal,
        "feature_mode": feature_mode, "precision": int(precision),
        "out": str(out), "tensor_file": tensor_path.name,
    }
    _manifest(out, "synth", params)
    click.echo(f"wrote {tensor_path}")


@main.command()
@click.option("--input", "input_path", type=click.Path(exists=True, path_type=Path), required=True)
@click.option("--k", type=int, required=True)
@click.option("--iters", type=int, default=200, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--grid", type=int, default=1, show_default=True,
              help="Rank count p for the in-process grid (perfect square).")
@click.option("--init", type=click.Choice(["random", "nndsvd"]), default="random",
              show_default=True)
@click.option("--tol", type=float, default=None, help="Stop when relative error < tol.")
@click.option("--eps", type=float, default=1e-16, show_default=True)
@click.option("--out", type=click.Path(path_type=Path), required=True)
@_handle_errors
def rescal(input_path, k, iters, seed, grid, init, tol, eps, out):
    """Factorize a tensor; writes factors and the error trace."""
    from .rescal import RescalFactors, SolverConfig, finalize_normalize, nndsvd_init, rescal_solve
    from .dist_rescal import solve_on_grid
    from .tensor import RelTensor, load_tensor, save_matrix, save_tensor

    p = _parse_grid(grid)
    out.mkdir(parents=True, exist_ok=True)
    x = load_tensor(input_path)
    cfg = SolverConfig(max_iters=iters, tolerance=tol, epsilon=eps, init=init, seed=seed)
    if p == 1:
        factors, trace = rescal_solve(x, k, cfg)
    else:
        initial = nndsvd_init(x, k, eps=eps) if init == "nndsvd" else None
        factors, trace, _ = solve_on_grid(x, k, cfg, p, initial=initial)
    factors = finalize_normalize(factors)
    save_matrix(factors.A, out / "a.rskm")
    save_tensor(RelTensor(factors.R), out / "r.rsk", format="dense-binary")
    _write_json(out / "trace.json", {
        "k": k,
        "iterations_run": len(trace),
        "final_rel_error": float(trace[-1]) if len(trace) else None,
        "rel_error_trace": [float(v) for v in trace],
    })
    params = {
        "input": str(input_path), "k": k, "iters": iters, "seed": seed,
        "grid": p, "init": init, "tol": tol, "eps": eps, "out": str(out),
    }
    _manifest(out, "rescal", params)
    final = f"{trace[-1]:.6e}" if len(trace) else "untracked"
    click.echo(f"final relative error: {final}")


@main.command()
@click.option("--input", "input_path", type=click.Path(exists=True, path_type=Path), required=True)
@click.option("--k-min", type=int, required=True)
@click.option("--k-max", type=int, required=True)
@click.option("--r", type=int, default=10, show_default=True, help="Perturbations per k.")
@click.option("--iters", type=int, default=300, show_default=True)
@click.option("--delta", type=float, default=0.02, show_default=True,
              help="Resampling noise half-width.")
@click.option("--tau-s", type=float, default=0.75, show_default=True,
              help="Minimum-silhouette threshold for k selection.")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--grid", type=int, default=1, show_default=True)
@click.option("--init", type=click.Choice(["random", "nndsvd"]), default="random",
              show_default=True)
@click.option("--out", type=click.Path(path_type=Path), required=True)
@_handle_errors
def rescalk(input_path, k_min, k_max, r, iters, delta, tau_s, seed, grid, init, out):
    """Estimate the latent-community count; writes a report and curve data."""
    import csv as _csv

    from .dist_rescal import PerturbConfig
    from .grid import spawn_grid
    from .model_select import rescalk as run_rescalk
    from .rescal import RescalFactors, SolverConfig
    from .tensor import RelTensor, load_tensor, save_matrix, save_tensor

    if k_min > k_max:
        raise click.UsageError(f"--k-min {k_min} exceeds --k-max {k_max}")
    p = _parse_grid(grid)
    out.mkdir(parents=True, exist_ok=True)
    x = load_tensor(input_path)
    cfg = SolverConfig(max_iters=iters, init=init, seed=seed)
    pcfg = PerturbConfig(delta=delta, base_seed=seed)
    if p == 1:
        report = run_rescalk(x, k_min, k_max, r, cfg, pcfg, tau_s=tau_s)
    else:
        results = spawn_grid(
            p, lambda ctx: run_rescalk(x, k_min, k_max, r, cfg, pcfg, ctx=ctx, tau_s=tau_s),
            timeout=120.0,
        )
        report = results[0]
    _write_json(out / "report.json", report.to_json_dict())
    with open(out / "curves.csv", "w", newline="", encoding="utf-8") as f:
        w = _csv.writer(f)
        w.writerow(["k", "s_min", "s_avg", "rel_error"])
        for e in report.entries:
            w.writerow([e.k, f"{e.s_min:.12g}", f"{e.s_avg:.12g}", f"{e.rel_error:.12g}"])
    best = report.entry(report.k_opt)
    save_matrix(best.medians, out / "a_opt.rskm")
    save_tensor(RelTensor(best.core), out / "r_opt.rsk", format="dense-binary")
    params = {
        "input": str(input_path), "k_min": k_min, "k_max": k_max, "r": r,
        "iters": iters, "delta": delta, "tau_s": tau_s, "seed": seed,
        "grid": p, "init": init, "out": str(out),
    }
    _manifest(out, "rescalk", params)
    flag = " (low confidence)" if report.low_confidence else ""
    click.echo(f"k_opt = {report.k_opt}{flag}")


@main.command()
@click.option("--kind", type=click.Choice(["strong", "weak", "k"]), required=True)
@click.option("--p", "p_csv", default="1,4", show_default=True,
              help="Comma-separated rank counts (perfect squares).")
@click.option("--n", type=int, default=64, show_default=True)
@click.option("--m", type=int, default=4, show_default=True)
@click.option("--k", type=int, default=8, show_default=True)
@click.option("--k-list", default="2,4,8", show_default=True,
              help="Latent dimensions for kind=k.")
@click.option("--density", type=float, default=1.0, show_default=True)
@click.option("--iters", type=int, default=10, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", type=click.Path(path_type=Path), required=True)
@_handle_errors
def bench(kind, p_csv, n, m, k, k_list, density, iters, seed, out):
    """Run the scaling harness; writes scaling.csv."""
    from .perf import HarnessConfig, scaling_harness, write_scaling_csv

    try:
        p_values = tuple(int(v) for v in p_csv.split(",") if v.strip())
        k_values = tuple(int(v) for v in k_list.split(",") if v.strip())
    except ValueError as e:
        raise click.UsageError(f"bad list: {e}") from e
    for p in p_values:
        _parse_grid(p)
    out.mkdir(parents=True, exist_ok=True)
    base = HarnessConfig(
        n=n, m=m, k=k, p_list=p_values, k_list=k_values, density=density,
        iters=iters, seed=seed,
    )
    records = scaling_harness(kind, base)
    write_scaling_csv(records, out / "scaling.csv")
    params = {
        "kind": kind, "p": list(p_values), "n": n, "m": m, "k": k,
        "k_list": list(k_values), "density": density, "iters": iters,
        "seed": seed, "out": str(out),
    }
    _manifest(out, "bench", params)
    match = all(r.words_match for r in records)
    click.echo(f"{len(records)} rows; counted vs predicted words: "
               f"{'exact' if match else 'MISMATCH'}")


@main.command()
@click.argument("manifest", type=click.Path(exists=True, path_type=Path))
@click.option("--out", type=click.Path(path_type=Path), default=None,
              help="Override the output directory.")
@_handle_errors
def rerun(manifest, out):
    """Replay a recorded run from its manifest."""
    with open(manifest, encoding="utf-8") as f:
        doc = json.load(f)
    sub = doc.get("subcommand")
    params = dict(doc.get("parameters", {}))
    if sub not in ("synth", "rescal", "rescalk", "bench"):
        raise click.UsageError(f"manifest has unknown subcommand {sub!r}")
    if out is not None:
        params["out"] = str(out)
    params.pop("tensor_file", None)
    args = [sub]
    for key, value in params.items():
        if value is None:
            continue
        flag = "--" + key.replace("_", "-")
        if key == "input":
            flag = "--input"
        if key == "p" and sub == "bench":
            value = ",".join(str(v) for v in value)
        if key == "k_list" and sub == "bench":
            value = ",".join(str(v) for v in value)
        args.extend([flag, str(value)])
    main(args=args, standalone_mode=False)


if __name__ == "__main__":
    main()
