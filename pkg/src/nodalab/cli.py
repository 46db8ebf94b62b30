"""Command-line entry point: ``nodalab <command> [options]``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import platform
import sys
import time
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .errors import ConfigError, NodalabError

logger = logging.getLogger("nodalab")

COMMANDS = ("spectrum", "deficiency-table", "hadamard-check", "criticality", "morse-index", "minimize", "contours")


def fmt(x: float) -> str:
    return f"{x:.17g}"


def _mode(text: str) -> tuple[int, int]:
    try:
        m, k = (int(t) for t in text.split(","))
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"mode must look like 1,2 (got {text!r})") from exc
    if m < 1 or k < 1:
        raise argparse.ArgumentTypeError("mode indices must be positive")
    return m, k


def _positive(kind):
    def parse(text):
        v = kind(text)
        if v <= 0:
            raise argparse.ArgumentTypeError(f"expected a positive value, got {text}")
        return v
    return parse


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--domain", default="rect:1x0.618", help="rect:AxB or disk:R")
    common.add_argument("--res", type=_positive(float), default=256, help="grid nodes per unit length")
    common.add_argument("--config", help="JSON run configuration; its values override flags")
    common.add_argument("--out", default=".", help="output directory")
    common.add_argument("--threads", type=_positive(int), default=None,
                        help="worker count (default: NODALAB_THREADS or all cores)")
    common.add_argument("--tol", type=_positive(float), default=1e-9, help="eigensolver residual tolerance")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="nodalab", description="Nodal partitions and the energy of equipartitions.")
    parser.add_argument("--version", action="version", version=f"nodalab {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    s = sub.add_parser("spectrum", parents=[common], help="lowest Dirichlet eigenvalues")
    s.add_argument("--count", type=_positive(int), default=12)

    s = sub.add_parser("deficiency-table", parents=[common], help="nodal counts and deficiencies")
    s.add_argument("--n-max", type=_positive(int), default=12)

    s = sub.add_parser("hadamard-check", parents=[common], help="shape derivative versus finite differences")
    s.add_argument("--mode", type=_mode, default=(1, 2))
    s.add_argument("--K", type=_positive(int), default=4)
    s.add_argument("--eps", type=_positive(float), default=1e-3)

    s = sub.add_parser("criticality", parents=[common], help="gradient of Lambda_c at a nodal partition")
    s.add_argument("--n", type=_positive(int), default=3, help="spectral index")
    s.add_argument("--K", type=_positive(int), default=4)
    s.add_argument("--displace", type=float, default=0.02, help="comparison displacement of the first interface")

    s = sub.add_parser("morse-index", parents=[common], help="Hessian of Lambda on the equipartitions")
    s.add_argument("--mode", type=_mode, default=(1, 2))
    s.add_argument("--K", type=_positive(int), default=4)
    s.add_argument("--dt", type=_positive(float), default=1e-2)

    s = sub.add_parser("minimize", parents=[common], help="gradient descent of Lambda")
    s.add_argument("--mode", type=_mode, default=(2, 1))
    s.add_argument("--K", type=_positive(int), default=4)
    s.add_argument("--perturb", type=float, default=0.02, help="amplitude of the starting displacement")
    s.add_argument("--unstable", action="store_true", help="start along the most negative Hessian direction")
    s.add_argument("--max-iters", type=_positive(int), default=50)

    s = sub.add_parser("contours", parents=[common], help="nodal lines of one eigenfunction as CSV")
    s.add_argument("--n", type=_positive(int), default=3)
    return parser


def _resolve(args) -> dict:
    from .geometry import config_from_dict, load_config, parse_domain

    cfg = {"resolution": args.res, "spec": parse_domain(args.domain)}
    if args.config:
        doc = load_config(args.config)
        cfg["spec"] = doc["spec"]
        if "resolution" in doc:
            cfg["resolution"] = float(doc["resolution"])
        for key, val in doc.items():
            if key not in ("domain", "resolution", "potential", "spec"):
                attr = key.replace("-", "_")
                if not hasattr(args, attr):
                    raise ConfigError(f"unknown config key {key!r}")
                if attr == "mode":
                    val = tuple(val)
                setattr(args, attr, val)
    if cfg["resolution"] <= 0:
        raise ConfigError("resolution must be positive")
    threads = args.threads or os.environ.get("NODALAB_THREADS") or os.cpu_count() or 1
    try:
        cfg["threads"] = int(threads)
    except ValueError as exc:
        raise ConfigError(f"bad thread count {threads!r}") from exc
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"output directory {out} is not writable") from exc
    if not os.access(out, os.W_OK):
        raise ConfigError(f"output directory {out} is not writable")
    cfg["out"] = out
    return cfg


def _spectrum(grid, count, tol):
    from .eigensolver import assemble_operator, lowest_eigenpairs

    return lowest_eigenpairs(assemble_operator(grid), count, tol)


def _mode_index(grid, p, tol):
    """Rank of the eigenvalue matching the seed partition, with its nodal count."""
    from .nodal import nodal_count
    from .shape_calculus import xi_map

    lam = float(np.mean(xi_map(p)))
    pairs = _spectrum(grid, 20, tol)
    k = int(np.argmin([abs(q.lam - lam) for q in pairs]))
    if abs(pairs[k].lam - lam) > 1e-2 * lam:
        raise NodalabError("seed partition matches no computed eigenvalue")
    return k + 1, nodal_count(pairs[k], grid), pairs[k]


def cmd_spectrum(args, cfg, grid, report):
    from .eigensolver import export_spectrum_csv

    pairs = _spectrum(grid, args.count, args.tol)
    export_spectrum_csv(pairs, cfg["out"] / "spectrum.csv")
    for q in pairs:
        print(q.n, fmt(q.lam))
    report["files"] = ["spectrum.csv"]


def cmd_deficiency(args, cfg, grid, report):
    from .nodal import deficiency_table, export_deficiency_csv

    pairs = _spectrum(grid, args.n_max, args.tol)
    rows = deficiency_table(pairs, grid)
    export_deficiency_csv(rows, cfg["out"] / "deficiency.csv")
    print("n lambda nu d bipartite is_tree generic")
    for r in rows:
        print(r.n, fmt(r.lam), r.nu, r.deficiency, r.bipartite, r.is_tree, r.genericity.generic)
    report["files"] = ["deficiency.csv"]


def _seed(grid, mode):
    from .geometry import build_straight_partition

    if grid.spec.kind != "rectangle":
        raise ConfigError("--mode seeds need a rectangle domain")
    return build_straight_partition(grid, *mode)


def cmd_hadamard(args, cfg, grid, report):
    from .geometry import PerturbationBasis, PerturbationCoords, displace_interfaces
    from .shape_calculus import SimplexWeights, export_gradient_json, grad_lambda_c, xi_jacobian, xi_map

    p = _seed(grid, args.mode)
    basis = PerturbationBasis.for_partition(p, args.K)
    J = xi_jacobian(p, basis)
    F = np.zeros_like(J)
    for k in range(basis.dim):
        v = np.zeros(basis.dim)
        v[k] = args.eps
        plus = xi_map(displace_interfaces(p, PerturbationCoords(basis, v)))
        minus = xi_map(displace_interfaces(p, PerturbationCoords(basis, -v)))
        F[:, k] = (plus - minus) / (2 * args.eps)
    scale = np.abs(J).max(axis=1, keepdims=True)
    rel = np.abs(J - F) / np.maximum(np.abs(F), 1e-2 * scale)
    c = SimplexWeights.uniform(p.nu)
    export_gradient_json(grad_lambda_c(p, c, basis), c, cfg["out"] / "gradient.json",
                         hadamard=J.tolist(), finite_difference=F.tolist(), relative_error=rel.tolist(),
                         eps=args.eps)
    print("max relative error", fmt(float(rel.max())))
    report["files"] = ["gradient.json"]
    report["max_relative_error"] = float(rel.max())


def cmd_criticality(args, cfg, grid, report):
    from .geometry import PerturbationBasis, PerturbationCoords, displace_interfaces
    from .nodal import nodal_partition
    from .shape_calculus import (criticality_residual, export_criticality_json, export_gradient_json,
                                 grad_lambda_c, matched_derivative_mismatch)

    pairs = _spectrum(grid, args.n, args.tol)
    psi = pairs[args.n - 1]
    p, nu = nodal_partition(psi, grid)
    if nu < 2:
        raise NodalabError("criticality needs at least two nodal domains")
    basis = PerturbationBasis.for_partition(p, args.K)
    c, gnorm = criticality_residual(p, psi, basis)
    mismatch = matched_derivative_mismatch(p, c)
    extra = {"n": args.n, "lambda": psi.lam, "nu": nu}
    if args.displace:
        q = displace_interfaces(p, PerturbationCoords.single(basis, 0, 0, args.displace))
        extra["displaced_gradient_norm"] = grad_lambda_c(q, c, basis).norm
        extra["displacement"] = args.displace
    export_criticality_json(c, gnorm, mismatch, cfg["out"] / "criticality.json", **extra)
    export_gradient_json(grad_lambda_c(p, c, basis), c, cfg["out"] / "gradient.json")
    print("c", " ".join(fmt(x) for x in c.c))
    print("gradient_norm", fmt(gnorm))
    if "displaced_gradient_norm" in extra:
        print("displaced_gradient_norm", fmt(extra["displaced_gradient_norm"]))
    print("mismatch", " ".join(fmt(m) for m in mismatch))
    report["files"] = ["criticality.json", "gradient.json"]


def cmd_morse(args, cfg, grid, report):
    from .equipartition import export_hessian_json, hessian_of_lambda
    from .geometry import PerturbationBasis

    p = _seed(grid, args.mode)
    n, nu, _ = _mode_index(grid, p, args.tol)
    d = n - nu
    basis = PerturbationBasis.for_partition(p, args.K)
    rep = hessian_of_lambda(p, basis, args.dt)
    export_hessian_json(rep, cfg["out"] / "hessian.json", mode=args.mode, n=n, d_n=d)
    print("n", n, "nu", nu, "d_n", d)
    print("eigenvalues", " ".join(fmt(e) for e in rep.eigenvalues))
    print("tau", fmt(rep.tau))
    print("morse_index", rep.morse_index, "mu0_index", rep.mu0_index, "nondegenerate", rep.nondegenerate)
    print("MORSE == DEFICIENCY:", "yes" if rep.morse_index == d else "no")
    report["files"] = ["hessian.json"]
    report["morse_index"] = rep.morse_index
    report["deficiency"] = d


def cmd_minimize(args, cfg, grid, report):
    from .equipartition import export_descent_csv, hessian_of_lambda, minimize_lambda
    from .geometry import PerturbationBasis, PerturbationCoords, curve_distance, export_curves_csv

    p = _seed(grid, args.mode)
    basis = PerturbationBasis.for_partition(p, args.K)
    if p.nu < 2:
        raise ConfigError("descent needs at least two subdomains")
    if args.unstable:
        rep = hessian_of_lambda(p, basis)
        v = rep.tangent_basis @ rep.eigenvectors[:, 0]
        start = rep.base_coords + args.perturb * v / np.max(np.abs(v))
    else:
        start = np.zeros(basis.dim)
        start[basis.offsets[0] + 1] = args.perturb
    res = minimize_lambda(p, basis, PerturbationCoords(basis, start), max_iters=args.max_iters)
    export_descent_csv(res, cfg["out"] / "descent.csv")
    export_curves_csv(res.partition.interfaces, cfg["out"] / "curves.csv")
    for row in res.trace:
        print(row["iteration"], fmt(row["Lambda"]), fmt(row["gradient_norm"]), fmt(row["step"]))
    dist = curve_distance(p, res.partition)
    print("stopped:", res.reason, "curve distance to seed", fmt(dist))
    report["files"] = ["descent.csv", "curves.csv"]
    report["converged"] = res.converged


def cmd_contours(args, cfg, grid, report):
    from .geometry import export_curves_csv
    from .nodal import nodal_partition

    pairs = _spectrum(grid, args.n, args.tol)
    p, nu = nodal_partition(pairs[args.n - 1], grid)
    export_curves_csv(p.interfaces, cfg["out"] / "contours.csv")
    print("nu", nu, "interfaces", len(p.interfaces))
    report["files"] = ["contours.csv"]


HANDLERS = {
    "spectrum": cmd_spectrum,
    "deficiency-table": cmd_deficiency,
    "hadamard-check": cmd_hadamard,
    "criticality": cmd_criticality,
    "morse-index": cmd_morse,
    "minimize": cmd_minimize,
    "contours": cmd_contours,
}


def _versions() -> dict:
    import scipy
    import skimage

    return {"nodalab": __version__, "python": platform.python_version(), "numpy": np.__version__,
            "scipy": scipy.__version__, "scikit-image": skimage.__version__}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    t0 = time.perf_counter()
    report: dict = {}
    try:
        from .eigensolver import DEFAULT_SEED
        from .geometry import build_grid

        cfg = _resolve(args)
        grid = build_grid(cfg["spec"], cfg["resolution"])
        t_grid = time.perf_counter() - t0
        HANDLERS[args.command](args, cfg, grid, report)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (NodalabError, ValueError, ArithmeticError, np.linalg.LinAlgError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    manifest = {
        "command": args.command,
        "argv": list(argv) if argv is not None else sys.argv[1:],
        "config": {k: (list(v) if isinstance(v, tuple) else v) for k, v in vars(args).items()
                   if k not in ("command",)},
        "domain": cfg["spec"].label(),
        "resolution": cfg["resolution"],
        "threads": cfg["threads"],
        "seed": DEFAULT_SEED,
        "versions": _versions(),
        "timings": {"grid_seconds": t_grid, "total_seconds": time.perf_counter() - t0},
        "report": report,
    }
    (cfg["out"] / "run.json").write_text(json.dumps(manifest, indent=2, default=str))
    return 0


run_command = main

if __name__ == "__main__":
    sys.exit(main())
