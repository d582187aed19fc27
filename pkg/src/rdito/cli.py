"""Command-line entry point tying the toolkit together.

Subcommands: derive-table, density, gf, fn, simulate, perturb, compare.
Exit codes: 0 success, 1 comparison failure, 2 usage/config error, 3 runtime
model error.  Every output is written atomically (temp file + rename) and
accompanied by a run manifest with the resolved configuration, seed, tool
version, wall-clock time and output digests.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import os
import sys
import tempfile
from datetime import datetime, timezone

import numpy as np
from scipy import stats

from . import __version__, algebra, models, perturb, simulate

EXIT_OK = 0
EXIT_COMPARE = 1
EXIT_USAGE = 2
EXIT_RUNTIME = 3


class UsageError(Exception):
    pass


class RuntimeModelError(Exception):
    pass


# ---------------------------------------------------------------------------
# Plumbing: atomic writes and manifests
# ---------------------------------------------------------------------------


def atomic_write(path: str, text: str) -> None:
    """Write text to path via a temp file in the same directory + rename."""
    path = os.path.abspath(path)
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(path), prefix=".rdito-tmp-")
    try:
        with os.fdopen(fd, "w") as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _digest(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(65536), b""):
            h.update(block)
    return "sha256:" + h.hexdigest()


def write_manifest(base: str, command: str, config: dict, seed, outputs) -> str:
    """Emit `<base>.manifest.json` describing a completed run."""
    manifest = {
        "command": command,
        "config": config,
        "seed": seed,
        "version": __version__,
        "wall_clock": datetime.now(timezone.utc).isoformat(),
        "outputs": {os.path.basename(p): _digest(p) for p in outputs},
    }
    path = base + ".manifest.json"
    atomic_write(path, json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def _read_json_file(path: str, label: str) -> str:
    try:
        with open(path) as f:
            text = f.read()
    except OSError as e:
        raise UsageError(f"cannot read {label} {path}: {e}")
    try:
        json.loads(text)
    except json.JSONDecodeError as e:
        raise UsageError(
            f"malformed JSON in {label} {path}: line {e.lineno} column {e.colno}: {e.msg}"
        )
    return text


def _load_spec(path: str) -> models.ModelSpec:
    text = _read_json_file(path, "model config")
    try:
        return models.ModelSpec.from_json(text)
    except (models.ModelError, KeyError, TypeError, ValueError) as e:
        raise UsageError(f"invalid model config {path}: {e}")


def _apply_threads(args) -> None:
    if getattr(args, "threads", None) is not None:
        os.environ["RD_THREADS"] = str(args.threads)


# ---------------------------------------------------------------------------
# derive-table
# ---------------------------------------------------------------------------


def _parse_family(name: str) -> algebra.NoiseFamily:
    base = name
    param = None
    if name.startswith("B") and name[1:].isdigit():
        base, param = "B", int(name[1:])
    try:
        return algebra.make_family(base, param)
    except algebra.AlgebraError as e:
        raise UsageError(str(e))


def cmd_derive_table(args) -> int:
    fams = [_parse_family(n) for n in args.families]
    table = algebra.derive_table(fams)
    outputs = []
    if args.out:
        atomic_write(args.out + ".txt", table.render_text())
        atomic_write(args.out + ".json", table.render_json())
        outputs = [args.out + ".txt", args.out + ".json"]
        write_manifest(
            args.out,
            "derive-table",
            {"families": list(args.families), "allow_unrecognized": args.allow_unrecognized},
            None,
            outputs,
        )
    else:
        sys.stdout.write(table.render_text())
    if not table.all_recognized() and not args.allow_unrecognized:
        print("error: table contains unrecognized products", file=sys.stderr)
        return EXIT_COMPARE
    return EXIT_OK


# ---------------------------------------------------------------------------
# density / gf / fn
# ---------------------------------------------------------------------------


def _cell_averaged_csv(model_text: str, spec: models.ModelSpec, times, refine: int) -> str:
    """Density CSV with cell averages instead of midpoint values.

    The model is re-instantiated on a refine-times finer grid (so v must be
    given analytically, not as a table) and block-averaged back down; this is
    the quantity a histogram estimator converges to.
    """
    obj = json.loads(model_text)
    if "shape" not in obj or not isinstance(obj.get("v"), dict) or "table" in obj["v"]:
        raise UsageError("--cell-average needs a grid model with an analytic v field")
    obj["shape"] = [int(n) * refine for n in obj["shape"]]
    fine = models.ModelSpec.from_json(json.dumps(obj))
    coarse = spec.grid()
    lines = [f"# model,{spec.kind},cell-averaged,t={','.join(repr(float(t)) for t in times)}"]
    lines.append("t," + ",".join(f"x{i}" for i in range(spec.d)) + ",value")
    axes = coarse.axes()
    for t in times:
        res = models.density(fine, t)
        for fg in (res if isinstance(res, tuple) else (res,)):
            vals = fg.values
            for ax, n in enumerate(coarse.shape):
                # composite trapezoid over each cell (periodic wrap)
                vals = 0.5 * (vals + np.roll(vals, -1, axis=ax))
                vals = vals.reshape(
                    vals.shape[:ax] + (n, refine) + vals.shape[ax + 1:]
                ).mean(axis=ax + 1)
            for idx in np.ndindex(coarse.shape):
                coords = ",".join(repr(float(axes[a][i])) for a, i in enumerate(idx))
                lines.append(f"{float(t)!r},{coords},{float(vals[idx])!r}")
    return "\n".join(lines) + "\n"


def cmd_density(args) -> int:
    spec = _load_spec(args.model)
    try:
        if args.cell_average:
            text = _cell_averaged_csv(
                _read_json_file(args.model, "model config"), spec, args.t, args.refine
            )
        else:
            text = models.density_csv(spec, args.t)
    except models.ModelError as e:
        raise RuntimeModelError(str(e))
    if args.out:
        atomic_write(args.out, text)
        write_manifest(
            args.out,
            "density",
            {"model": json.loads(_read_json_file(args.model, "model config")), "t": args.t},
            None,
            [args.out],
        )
    else:
        sys.stdout.write(text)
    return EXIT_OK


def _test_function(spec: models.ModelSpec, text: str | None):
    if spec.kind == "DiscreteDeath":
        return float(text) if text is not None else 1.0
    g = spec.grid()
    if text is None:
        return g.with_values(np.ones(g.shape))
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as e:
        raise UsageError(f"malformed --u JSON: line {e.lineno} column {e.colno}: {e.msg}")
    try:
        return models._field_from_json(obj, g.box, g.shape)
    except models.ModelError as e:
        raise UsageError(f"invalid --u field: {e}")


def cmd_gf(args) -> int:
    spec = _load_spec(args.model)
    u = _test_function(spec, args.u)
    lines = ["t,log_gf"]
    try:
        for t in args.t:
            if spec.kind == "DeathDiffusion":
                val = models.death_diffusion_log_gf(spec, models.GFQuery(u=u, t=t))
            elif spec.kind == "BrownianTree":
                val = models.brownian_tree_log_gf(spec, models.GFQuery(u=u, t=t))
            elif spec.kind == "DiscreteDeath":
                val = math.log(
                    models.discrete_death_gf(spec.v, spec.rate("mu").const, t, u)
                )
            else:
                raise UsageError(f"no generating functional for kind {spec.kind}")
            lines.append(f"{float(t)!r},{float(val)!r}")
    except models.ModelError as e:
        raise RuntimeModelError(str(e))
    text = "\n".join(lines) + "\n"
    if args.out:
        atomic_write(args.out, text)
        write_manifest(args.out, "gf", {"model": args.model, "t": args.t, "u": args.u},
                       None, [args.out])
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_fn(args) -> int:
    spec = _load_spec(args.model)
    if spec.kind != "DeathDiffusion":
        raise UsageError(f"n-point density is implemented for DeathDiffusion, not {spec.kind}")
    points = []
    if args.points:
        for chunk in args.points.split(";"):
            chunk = chunk.strip()
            if chunk:
                points.append([float(x) for x in chunk.split(",")])
    lines = ["t,value"]
    try:
        for t in args.t:
            val = models.death_diffusion_fn(spec, points, t)
            lines.append(f"{float(t)!r},{float(val)!r}")
    except models.ModelError as e:
        raise RuntimeModelError(str(e))
    text = "\n".join(lines) + "\n"
    if args.out:
        atomic_write(args.out, text)
        write_manifest(args.out, "fn", {"model": args.model, "t": args.t,
                                        "points": args.points}, None, [args.out])
    else:
        sys.stdout.write(text)
    return EXIT_OK


# ---------------------------------------------------------------------------
# simulate / perturb
# ---------------------------------------------------------------------------


def cmd_simulate(args) -> int:
    spec = _load_spec(args.model)
    sim_text = _read_json_file(args.sim, "simulation config")
    try:
        sim = simulate.SimConfig.from_json(sim_text)
    except (simulate.SimError, KeyError, TypeError, ValueError) as e:
        raise UsageError(f"invalid simulation config {args.sim}: {e}")
    if args.seed is not None:
        sim = simulate.SimConfig(
            dt=sim.dt, replicas=sim.replicas, seed=args.seed,
            shape=sim.shape, kernel=sim.kernel, chunk=sim.chunk,
        )
    u = _test_function(spec, args.u) if args.u else None
    try:
        report = simulate.run(spec, sim, args.t_end, u=u)
    except simulate.SimError as e:
        raise RuntimeModelError(str(e))
    grid_path = args.out + "_grid.csv"
    scalars_path = args.out + "_scalars.json"
    atomic_write(grid_path, report.grid_csv())
    atomic_write(scalars_path, report.scalars_json() + "\n")
    write_manifest(
        args.out,
        "simulate",
        {
            "model": json.loads(_read_json_file(args.model, "model config")),
            "sim": json.loads(sim_text),
            "t_end": args.t_end,
            "u": args.u,
        },
        sim.seed,
        [grid_path, scalars_path],
    )
    return EXIT_OK


def cmd_perturb(args) -> int:
    spec = _load_spec(args.model)
    if spec.kind != "Annihilation":
        raise UsageError(f"perturb needs an Annihilation model, got {spec.kind}")
    try:
        if args.method == "dyson":
            series = perturb.dyson_tree_density(
                perturb.momentum_grid(spec), args.t_end, args.steps
            )
        else:
            series = perturb.mean_field_pde(spec, args.t_end, args.steps)
    except perturb.PerturbError as e:
        raise RuntimeModelError(str(e))
    text = series.csv()
    if args.out:
        atomic_write(args.out, text)
        write_manifest(
            args.out,
            "perturb",
            {"model": args.model, "t_end": args.t_end, "steps": args.steps,
             "method": args.method},
            None,
            [args.out],
        )
    else:
        sys.stdout.write(text)
    return EXIT_OK


# ---------------------------------------------------------------------------
# compare
# ---------------------------------------------------------------------------


def _load_values(path: str):
    """Read a value table: (values, ses).

    Accepts either field CSVs with a `t,...,value` header (se = 0) or
    simulate grid CSVs (`name,index,value` rows; pairs density rows with
    density_se rows).
    """
    try:
        with open(path) as f:
            lines = [ln.strip() for ln in f if ln.strip() and not ln.startswith("#")]
    except OSError as e:
        raise UsageError(f"cannot read {path}: {e}")
    if not lines:
        raise UsageError(f"{path} is empty")
    header = lines[0].split(",")
    if header[0] == "name":
        vals: dict[str, list[float]] = {}
        for ln in lines[1:]:
            name, _, value = ln.split(",")
            vals.setdefault(name, []).append(float(value))
        means = []
        ses = []
        for key in sorted(vals):
            if key.endswith("_se"):
                continue
            se_key = key + "_se"
            means.extend(vals[key])
            ses.extend(vals.get(se_key, [0.0] * len(vals[key])))
        return np.array(means), np.array(ses)
    if header[-1] != "value":
        raise UsageError(f"{path}: unrecognized table header {lines[0]!r}")
    values = [float(ln.split(",")[-1]) for ln in lines[1:]]
    return np.array(values), np.zeros(len(values))


def cmd_compare(args) -> int:
    ref, _ = _load_values(args.analytic)
    mc, se = _load_values(args.mc)
    if len(ref) != len(mc):
        raise UsageError(
            f"point counts differ: {len(ref)} in {args.analytic}, {len(mc)} in {args.mc}"
        )
    floor = np.sqrt(np.maximum(ref, 0.0) * args.se_scale)
    se_eff = np.maximum(se, floor)
    diff = mc - ref
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(diff == 0.0, 0.0, diff / se_eff)
    z = np.where(np.isnan(z), np.inf, z)
    n = len(z)
    outliers = int(np.sum(np.abs(z) > args.sigma))
    p = 2.0 * (1.0 - stats.norm.cdf(args.sigma))
    allowed = int(stats.binom.ppf(0.99, n, p))
    ok = outliers <= allowed
    summary = {
        "points": n,
        "sigma": args.sigma,
        "outliers": outliers,
        "allowed_outliers": allowed,
        "max_abs_z": float(np.max(np.abs(z))) if n else 0.0,
        "pass": bool(ok),
    }
    text = json.dumps(summary, indent=2, sort_keys=True) + "\n"
    if args.out:
        atomic_write(args.out, text)
        write_manifest(
            args.out,
            "compare",
            {"analytic": args.analytic, "mc": args.mc, "sigma": args.sigma,
             "se_scale": args.se_scale},
            None,
            [args.out],
        )
    else:
        sys.stdout.write(text)
    return EXIT_OK if ok else EXIT_COMPARE


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------


def _build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None,
                        help="override the rng seed from the config")
    common.add_argument("--threads", type=int, default=None,
                        help="cap worker threads (sets RD_THREADS)")
    common.add_argument("--out", default=None, help="output path or prefix")

    p = argparse.ArgumentParser(prog="rdito", description=__doc__)
    p.add_argument("--version", action="version", version=f"rdito {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    dt = sub.add_parser("derive-table", parents=[common],
                        help="derive an Ito product table for noise families")
    dt.add_argument("families", nargs="+",
                    help="family names (A, Adag, Lambda, dt, B<m>, Xi, Omega, M, X, Y)")
    dt.add_argument("--allow-unrecognized", action="store_true")
    dt.set_defaults(fn=cmd_derive_table)

    de = sub.add_parser("density", parents=[common],
                        help="closed-form density of a model on its grid")
    de.add_argument("model", help="model spec JSON file")
    de.add_argument("--t", type=float, nargs="+", required=True)
    de.add_argument("--cell-average", action="store_true",
                    help="emit per-cell averages (the histogram estimator's "
                         "target) instead of midpoint values")
    de.add_argument("--refine", type=int, default=8,
                    help="sub-sampling factor for --cell-average")
    de.set_defaults(fn=cmd_density)

    gf = sub.add_parser("gf", parents=[common],
                        help="log generating functional at a test function")
    gf.add_argument("model")
    gf.add_argument("--t", type=float, nargs="+", required=True)
    gf.add_argument("--u", default=None,
                    help="test function JSON (field spec), default u == 1")
    gf.set_defaults(fn=cmd_gf)

    fn = sub.add_parser("fn", parents=[common],
                        help="n-point weighted probability density")
    fn.add_argument("model")
    fn.add_argument("--t", type=float, nargs="+", required=True)
    fn.add_argument("--points", default="",
                    help="positions: comma-separated coords, ';' between points")
    fn.set_defaults(fn=cmd_fn)

    si = sub.add_parser("simulate", parents=[common],
                        help="particle Monte Carlo run with estimator report")
    si.add_argument("model")
    si.add_argument("sim", help="simulation config JSON file")
    si.add_argument("--t-end", type=float, required=True)
    si.add_argument("--u", default=None, help="test function for the GF estimator")
    si.set_defaults(fn=cmd_simulate)

    pe = sub.add_parser("perturb", parents=[common],
                        help="tree-level density of the annihilation model")
    pe.add_argument("model")
    pe.add_argument("--t-end", type=float, required=True)
    pe.add_argument("--steps", type=int, required=True)
    pe.add_argument("--method", choices=("dyson", "meanfield"), default="dyson")
    pe.set_defaults(fn=cmd_perturb)

    co = sub.add_parser("compare", parents=[common],
                        help="z-score comparison of two value tables")
    co.add_argument("analytic")
    co.add_argument("mc")
    co.add_argument("--sigma", type=float, default=3.0)
    co.add_argument("--se-scale", type=float, default=0.0,
                    help="Poisson SE floor scale: 1/(cell volume * replicas) "
                         "for histogram densities")
    co.set_defaults(fn=cmd_compare)
    return p


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    _apply_threads(args)
    if getattr(args, "fn", None) is cmd_simulate and args.out is None:
        print("error: simulate requires --out", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.fn(args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except RuntimeModelError as e:
        print(f"runtime error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
