"""Command-line experiment runner.

Subcommands: ``solve``, ``compare``, ``sweep-eps``, ``sweep-mesh``. All write
CSV (see ``record.CSV_HEADER``). Exit status: 0 converged, 2 ran but did not
converge, 1 error.
"""

from __future__ import annotations

import argparse
import csv
import io
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np

from .core import SolveConfig, gibbs_kernel
from .errors import TransportError
from .newton import newton_solve
from .problems import (
    GridSpec,
    bump_pair_1d,
    digit_blob,
    gaussian_pair_2d,
    image_histogram,
    load_histogram_csv,
    load_image_pgm,
    median_cost_scale,
    squared_euclidean_cost,
)
from .sinkhorn import sinkhorn_solve

OUTDIR_ENV = "SINKHORN_NEWTON_OUTDIR"

EXIT_OK, EXIT_ERROR, EXIT_NOT_CONVERGED = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # exit status 2 is reserved for "did not converge"
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_ERROR, f"{self.prog}: error: {message}\n")


@dataclass
class Instance:
    a: np.ndarray
    b: np.ndarray
    C: np.ndarray
    one_d: bool
    label: str


# ---------------------------------------------------------------- parsing


def _float_list(text):
    items = [t for t in text.split(",") if t.strip()]
    if not items:
        raise argparse.ArgumentTypeError("empty value list")
    try:
        return [float(t) for t in items]
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a list of numbers: {text!r}") from None


def _int_list(text):
    vals = _float_list(text)
    if any(v != int(v) or v < 2 for v in vals):
        raise argparse.ArgumentTypeError(f"not a list of integers >= 2: {text!r}")
    return [int(v) for v in vals]


def _cost_spec(text):
    kind, _, size = text.partition(":")
    if kind not in ("grid1d", "grid2d") or not size.isdigit():
        raise argparse.ArgumentTypeError("cost must be grid1d:N or grid2d:N")
    return GridSpec(1 if kind == "grid1d" else 2, int(size))


def _epsilon(text, C):
    """``1e-3`` or a multiple of the median cost such as ``0.1q50``."""
    text = text.strip()
    if text.endswith("q50"):
        factor = text[:-3].rstrip("*") or "1"
        return float(factor) * median_cost_scale(C)
    return float(text)


def _cg_max(text, inst):
    if text == "auto":
        if not inst.one_d:
            raise UsageError("--cg-max auto (ceil(n/12)) is only defined for 1-D mesh problems")
        return math.ceil(inst.a.size / 12)
    try:
        return int(text)
    except ValueError:
        raise UsageError(f"--cg-max must be an integer or 'auto', got {text!r}") from None


def load_config_file(path):
    """``key = value`` lines; ``#`` starts a comment. Keys use flag names without dashes."""
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise UsageError(f"{path}:{lineno}: expected key=value")
            out[key.strip().replace("-", "_")] = value.strip()
    return out


def _add_instance_args(p, with_problem=True):
    if with_problem:
        p.add_argument("--problem", choices=["gauss2d", "bump1d", "blobs", "images"],
                       help="built-in instance (omit when using --a/--b)")
    p.add_argument("--grid", type=int, default=20, help="points per axis for gauss2d")
    p.add_argument("--n", type=int, default=1000, help="mesh size for bump1d")
    p.add_argument("--a", help="source histogram CSV")
    p.add_argument("--b", help="target histogram CSV")
    p.add_argument("--cost", type=_cost_spec, help="grid1d:N or grid2d:N (with --a/--b)")
    p.add_argument("--image-a", help="source PGM image")
    p.add_argument("--image-b", help="target PGM image")
    p.add_argument("--gamma", type=float, default=0.1, help="image offset before normalizing")
    p.add_argument("--seed", type=int, default=0, help="seed for the synthetic blob images")


def _add_solver_args(p, epsilon="1e-3", tol=1e-13, cg_max="34"):
    p.add_argument("--epsilon", default=epsilon, help="float, or a multiple of the median cost like 0.1q50")
    p.add_argument("--tol", type=float, default=tol, help="stopping threshold on the marginal violation")
    p.add_argument("--cg-tol", type=float, default=None, help="CG tolerance (defaults to --tol)")
    p.add_argument("--cg-max", default=cg_max, help="CG iteration cap, or 'auto' = ceil(n/12) for 1-D meshes")
    p.add_argument("--max-iter", type=int, default=None,
                   help="outer iteration cap (default 1000 for Newton, 10^6 for Sinkhorn)")
    p.add_argument("--plan-error", action="store_true",
                   help="also log ||P^k - P*||_1 (solves twice)")


def _add_output_args(p):
    p.add_argument("-o", "--output", help=f"output CSV (relative paths resolve under ${OUTDIR_ENV})")


def build_parser():
    parser = _Parser(prog="sinkhorn-newton", description=__doc__.splitlines()[0])
    parser.add_argument("--config", help="key=value file; command-line flags take precedence")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("solve", help="run one solver on one instance")
    _add_instance_args(p)
    _add_solver_args(p)
    p.add_argument("--solver", choices=["sinkhorn", "newton_primal", "newton_dual"],
                   default="newton_primal")
    _add_output_args(p)

    p = sub.add_parser("compare", help="Sinkhorn vs Newton on the same instance")
    _add_instance_args(p)
    _add_solver_args(p)
    p.add_argument("--newton-form", choices=["newton_primal", "newton_dual"], default="newton_primal")
    _add_output_args(p)

    p = sub.add_parser("sweep-eps", help="Newton over epsilon = q50 * factor and image offsets")
    _add_instance_args(p, with_problem=False)
    _add_solver_args(p, tol=1e-12, cg_max="66")
    p.add_argument("--factors", type=_float_list, default=[1, 0.1, 0.01, 0.005],
                   help="comma-separated multiples of the median cost")
    p.add_argument("--gammas", type=_float_list, default=[0.1], help="comma-separated image offsets")
    p.add_argument("--seed-b", type=int, default=None, help="seed of the target blob (default seed+1)")
    p.add_argument("--solver", choices=["newton_primal", "newton_dual"], default="newton_primal")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--log", help="per-iteration CSV of all runs")
    _add_output_args(p)

    p = sub.add_parser("sweep-mesh", help="Newton on the 1-D bump pair for several mesh sizes")
    _add_solver_args(p, tol=1e-10, cg_max="auto")
    p.add_argument("--ns", type=_int_list, default=[1000, 2000, 4000, 8000],
                   help="comma-separated mesh sizes")
    p.add_argument("--solver", choices=["newton_primal", "newton_dual"], default="newton_primal")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--log", help="per-iteration CSV of all runs")
    _add_output_args(p)
    return parser


def parse_args(argv):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        try:
            values = load_config_file(args.config)
        except OSError as exc:
            parser.error(f"cannot read config file: {exc}")
        except UsageError as exc:
            parser.error(str(exc))
        sub = parser._subparsers._group_actions[0].choices[args.command]
        known = {a.dest: a for a in sub._actions}
        defaults = {}
        for key, raw in values.items():
            if key not in known:
                parser.error(f"unknown config key {key!r}")
            action = known[key]
            if action.nargs == 0:
                defaults[key] = raw.lower() in ("1", "true", "yes", "on")
            else:
                defaults[key] = action.type(raw) if action.type else raw
        sub.set_defaults(**defaults)
        args = parser.parse_args(argv)
    return args


# -------------------------------------------------------------- instances


def build_instance(args) -> Instance:
    problem = getattr(args, "problem", None)
    if args.a or args.b:
        if not (args.a and args.b and args.cost):
            raise UsageError("--a, --b and --cost must be given together")
        a = load_histogram_csv(args.a)
        b = load_histogram_csv(args.b)
        grid = args.cost
        if grid.n != a.size or grid.n != b.size:
            raise UsageError(f"cost grid has {grid.n} points but histograms have {a.size}, {b.size}")
        return Instance(a, b, squared_euclidean_cost(grid), grid.dimension == 1, "csv")
    if problem == "gauss2d":
        a, b, grid = gaussian_pair_2d(args.grid)
        return Instance(a, b, squared_euclidean_cost(grid), False, f"gauss2d:{args.grid}")
    if problem == "bump1d":
        a, b, grid = bump_pair_1d(args.n)
        return Instance(a, b, squared_euclidean_cost(grid), True, f"bump1d:{args.n}")
    if problem == "blobs":
        return blob_instance(args.seed, args.seed + 1, args.gamma)
    if problem == "images":
        if not (args.image_a and args.image_b):
            raise UsageError("--problem images needs --image-a and --image-b")
        return image_instance(load_image_pgm(args.image_a), load_image_pgm(args.image_b), args.gamma)
    raise UsageError("choose --problem or give --a/--b/--cost")


def image_instance(img_a, img_b, gamma, label="images"):
    if img_a.shape != img_b.shape or img_a.shape[0] != img_a.shape[1]:
        raise UsageError("images must be square and of equal size")
    grid = GridSpec(2, img_a.shape[0])
    a = image_histogram(img_a, gamma)
    b = image_histogram(img_b, gamma)
    return Instance(a, b, squared_euclidean_cost(grid), False, label)


def blob_instance(seed_a, seed_b, gamma):
    return image_instance(digit_blob(seed_a), digit_blob(seed_b), gamma,
                          label=f"blobs:{seed_a}:{seed_b}")


# ---------------------------------------------------------------- running


def make_config(args, inst, solver):
    eps = _epsilon(str(args.epsilon), inst.C)
    max_iter = args.max_iter
    if max_iter is None:
        max_iter = 10**6 if solver == "sinkhorn" else 1000
    return SolveConfig(
        epsilon=eps,
        outer_tol=args.tol,
        max_outer_iters=max_iter,
        cg_tol=args.cg_tol if args.cg_tol is not None else args.tol,
        cg_max_iters=_cg_max(str(args.cg_max), inst),
        solver_kind=solver,
    )


def run_solver(inst: Instance, config: SolveConfig, plan_error=False):
    """Run the configured solver; with ``plan_error`` a second identical pass logs ``||P^k - P*||_1``."""
    K = gibbs_kernel(inst.C, config.epsilon)
    solve = sinkhorn_solve if config.solver_kind == "sinkhorn" else newton_solve
    _, plan, rec = solve(K, inst.a, inst.b, config, C=inst.C)
    if plan_error:
        _, plan, rec = solve(K, inst.a, inst.b, config, C=inst.C, reference_plan=plan)
    return rec


@contextmanager
def _open_output(path):
    if path is None:
        yield sys.stdout
        return
    outdir = os.environ.get(OUTDIR_ENV)
    if outdir and not os.path.isabs(path):
        os.makedirs(outdir, exist_ok=True)
        path = os.path.join(outdir, path)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        yield fh


def cmd_solve(args):
    inst = build_instance(args)
    config = make_config(args, inst, args.solver)
    rec = run_solver(inst, config, args.plan_error)
    with _open_output(args.output) as fh:
        rec.write_csv(fh)
    return EXIT_OK if rec.converged else EXIT_NOT_CONVERGED


def cmd_compare(args):
    inst = build_instance(args)
    recs = []
    for solver in ("sinkhorn", args.newton_form):
        config = make_config(args, inst, solver)
        recs.append((solver, run_solver(inst, config, args.plan_error)))
    with _open_output(args.output) as fh:
        for i, (solver, rec) in enumerate(recs):
            rec.write_csv(fh, header=(i == 0), prefix=[("solver", solver)])
    return EXIT_OK if all(r.converged for _, r in recs) else EXIT_NOT_CONVERGED


SUMMARY_HEADER = ("run", "label", "epsilon", "gamma", "n", "solver", "converged",
                  "outer_iters", "total_cg_iters", "final_violation", "wall_time_s", "error")


def _sweep_job(job):
    """Run one sweep entry; failures are caught and reported, not raised."""
    label, builder, eps_text, gamma, n, ns = job
    try:
        inst = builder()
        config = make_config(ns, inst, ns.solver)
        rec = run_solver(inst, config, ns.plan_error)
        return label, config.epsilon, gamma, n, rec, ""
    except (TransportError, UsageError, ValueError, OverflowError) as exc:
        return label, float("nan"), gamma, n, None, f"{type(exc).__name__}: {exc}"


class _BlobBuilder:
    def __init__(self, seed_a, seed_b, gamma):
        self.args = (seed_a, seed_b, gamma)

    def __call__(self):
        return blob_instance(*self.args)


class _ImageBuilder:
    def __init__(self, path_a, path_b, gamma):
        self.args = (path_a, path_b, gamma)

    def __call__(self):
        pa, pb, gamma = self.args
        return image_instance(load_image_pgm(pa), load_image_pgm(pb), gamma)


class _BumpBuilder:
    def __init__(self, n):
        self.n = n

    def __call__(self):
        a, b, grid = bump_pair_1d(self.n)
        return Instance(a, b, squared_euclidean_cost(grid), True, f"bump1d:{self.n}")


def _run_sweep(jobs, workers):
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(_sweep_job, jobs))
    return [_sweep_job(j) for j in jobs]


def _write_sweep(args, results):
    rc = EXIT_OK
    with _open_output(args.output) as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SUMMARY_HEADER)
        for run, (label, eps, gamma, n, rec, err) in enumerate(results):
            if rec is None:
                rc = EXIT_NOT_CONVERGED
                w.writerow([run, label, repr(eps), _num(gamma), n, args.solver, "", "", "", "", "", err])
                continue
            if not rec.converged:
                rc = EXIT_NOT_CONVERGED
            w.writerow([run, label, repr(eps), _num(gamma), n, args.solver, int(rec.converged),
                        rec.outer_iterations, rec.total_cg_iterations, repr(rec.final_violation),
                        repr(rec.wall_time), ""])
    if args.log:
        with _open_output(args.log) as fh:
            first = True
            for run, (label, eps, gamma, n, rec, _) in enumerate(results):
                if rec is None:
                    continue
                rec.write_csv(fh, header=first, prefix=[("run", run), ("label", label),
                                                        ("epsilon", repr(eps))])
                first = False
    return rc


def _num(x):
    return "" if x is None else repr(float(x))


def cmd_sweep_eps(args):
    jobs = []
    for gamma in args.gammas:
        if args.image_a or args.image_b:
            if not (args.image_a and args.image_b):
                raise UsageError("--image-a and --image-b must be given together")
            builder = _ImageBuilder(args.image_a, args.image_b, gamma)
            n = None
        else:
            seed_b = args.seed_b if args.seed_b is not None else args.seed + 1
            builder = _BlobBuilder(args.seed, seed_b, gamma)
            n = 784
        for factor in args.factors:
            ns = argparse.Namespace(**vars(args))
            ns.epsilon = f"{factor!r}q50"
            label = f"gamma={gamma!r},eps={factor!r}*q50"
            jobs.append((label, builder, ns.epsilon, gamma, n, ns))
    return _write_sweep(args, _run_sweep(jobs, args.workers))


def cmd_sweep_mesh(args):
    jobs = []
    for n in args.ns:
        ns = argparse.Namespace(**vars(args))
        jobs.append((f"n={n}", _BumpBuilder(n), args.epsilon, None, n, ns))
    return _write_sweep(args, _run_sweep(jobs, args.workers))


COMMANDS = {
    "solve": cmd_solve,
    "compare": cmd_compare,
    "sweep-eps": cmd_sweep_eps,
    "sweep-mesh": cmd_sweep_mesh,
}


def main(argv=None):
    args = parse_args(sys.argv[1:] if argv is None else argv)
    try:
        return COMMANDS[args.command](args)
    except (TransportError, UsageError, OSError, ValueError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
