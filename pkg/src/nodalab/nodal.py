"""Nodal domains, nodal counts and deficiencies of computed eigenfunctions."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import networkx as nx
import numpy as np
from scipy.spatial import cKDTree
from skimage import measure

from .eigensolver import EigenPair, extended_field, inward_derivative
from .errors import GeometryError, NodalError
from .geometry import (
    CURVE_SPACING,
    MIN_SUBDOMAIN_NODES,
    Grid,
    InterfaceCurve,
    Partition,
    _assemble_cuts,
    _components,
    _graph_from_labels,
    _orient_curves,
    clearance,
    deformation_field,
    polyline_length,
    resample_polyline,
)

logger = logging.getLogger("nodalab")

DEAD_BAND = 1e-8
GAP_THRESHOLD = 1e-6
GRADIENT_FRACTION = 0.05


@dataclass(frozen=True)
class GenericityReport:
    simple_eigenvalue: bool
    min_gradient_on_nodal_set: float
    max_gradient: float
    gradient_regular: bool
    boundary_normal_derivative_regular: bool
    interfaces_disjoint: bool

    @property
    def generic(self) -> bool:
        return (self.simple_eigenvalue and self.gradient_regular
                and self.boundary_normal_derivative_regular and self.interfaces_disjoint)


@dataclass(frozen=True)
class NodalReport:
    n: int
    lam: float
    nu: int
    deficiency: int
    bipartite: bool
    is_tree: bool
    genericity: GenericityReport


def _grid_of(pair: EigenPair, grid: Optional[Grid]) -> Grid:
    if grid is None:
        if pair.operator is None:
            raise ValueError("eigenpair carries no operator; pass the grid")
        grid = pair.operator.grid
    return grid


def _signed_field(pair: EigenPair, grid: Grid) -> np.ndarray:
    """psi on the mask with the dead band flattened to exact zeros."""
    psi = np.where(grid.mask, pair.psi, 0.0)
    band = DEAD_BAND * np.abs(psi).max()
    return np.where(np.abs(psi) > band, psi, 0.0)


def _sign_structure(psi: np.ndarray, grid: Grid):
    """Labels of the strict-sign components, cut fractions and graph."""
    sign = np.sign(psi).astype(int)
    on = grid.mask & (sign == 0)
    # zero crossing along each edge by linear interpolation
    a, b = psi[:-1, :], psi[1:, :]
    change_x = (sign[:-1, :] * sign[1:, :]) < 0
    tx = np.where(change_x, a / np.where(change_x, a - b, 1.0), np.inf)
    a, b = psi[:, :-1], psi[:, 1:]
    change_y = (sign[:, :-1] * sign[:, 1:]) < 0
    ty = np.where(change_y, a / np.where(change_y, a - b, 1.0), np.inf)
    cuts = _assemble_cuts(grid, tx, np.where(change_x, tx, -np.inf), ty, np.where(change_y, ty, -np.inf), on)
    active = grid.mask & ~on
    comp = _components(active, cuts.cut_x, cuts.cut_y)
    labels = np.zeros(grid.shape, dtype=int)
    order = np.arange(comp.size).reshape(comp.shape).T.ravel()
    flat = comp.ravel()[order]
    seen = {}
    for c in flat[flat >= 0]:
        if c not in seen:
            seen[c] = len(seen) + 1
    for c, lab in seen.items():
        labels[comp == c] = lab
    nu = len(seen)
    counts = np.bincount(labels.ravel(), minlength=nu + 1)[1:]
    if nu and counts.min() < MIN_SUBDOMAIN_NODES:
        raise NodalError(f"nodal domain under-resolved (refine grid): {counts.min()} nodes")
    graph = _graph_from_labels(labels, cuts)
    return labels, nu, graph, cuts


def _nodal_contours(psi: np.ndarray, grid: Grid) -> list[np.ndarray]:
    """Zero contours of ``psi`` in physical coordinates, open ones extended to the boundary."""
    raw = measure.find_contours(psi, 0.0, mask=grid.mask)
    spec = grid.spec
    out = []
    for c in raw:
        pts = np.asarray(grid.origin) + grid.h * c
        if len(pts) < 2 or polyline_length(pts)[-1] < 2 * grid.h:
            continue
        closed = np.allclose(pts[0], pts[-1])
        if not closed:
            k = min(4, len(pts) - 1)
            start = spec.ray_to_boundary(pts[0], pts[0] - pts[k])
            end = spec.ray_to_boundary(pts[-1], pts[-1] - pts[-1 - k])
            pts = np.vstack([start, pts, end])
        pts = resample_polyline(pts, CURVE_SPACING * grid.h)
        if closed:
            pts[-1] = pts[0]
        out.append(pts)
    return out


def nodal_partition(pair: EigenPair, grid: Optional[Grid] = None) -> tuple[Partition, int]:
    """Nodal partition of a full-domain eigenfunction.

    Subdomains are the 4-connected components of ``{psi > t}`` and
    ``{psi < -t}`` with ``t = 1e-8 max|psi|``; nodes in the dead band sit on
    the nodal set.  Interfaces are the marching-squares zero contours, with
    open contours carried out to the boundary.
    """
    grid = _grid_of(pair, grid)
    psi = _signed_field(pair, grid)
    labels, nu, graph, cuts = _sign_structure(psi, grid)
    curves = []
    for pts in _nodal_contours(psi, grid):
        kind = "closed" if np.allclose(pts[0], pts[-1]) else "boundary_attached"
        c = InterfaceCurve(kind, pts)
        try:
            c = c.with_field(deformation_field(c, grid))
        except GeometryError as exc:  # an oblique contour only limits later displacement
            logger.warning("no deformation field for a nodal contour: %s", exc)
        curves.append(c)
    curves = _orient_curves(curves, labels, grid)
    rho = 0.25 * clearance(curves, grid.spec) if curves else np.inf
    return Partition(grid, tuple(curves), labels, nu, graph, cuts, rho), nu


def nodal_count(pair: EigenPair, grid: Optional[Grid] = None) -> int:
    grid = _grid_of(pair, grid)
    return _sign_structure(_signed_field(pair, grid), grid)[1]


def nodal_deficiency(n: int, nu: int) -> int:
    if nu < 1:
        raise ValueError("nodal count must be positive")
    if nu > n:
        raise NodalError("Courant violation: check eigenvalue ordering/resolution")
    return n - nu


def partition_graph(p: Partition) -> tuple[nx.Graph, bool, bool]:
    """Adjacency graph of the subdomains with its bipartite and tree flags."""
    g = nx.Graph()
    g.add_nodes_from(range(1, p.nu + 1))
    g.add_edges_from(p.graph)
    bipartite = nx.is_bipartite(g)
    tree = p.nu >= 1 and nx.is_tree(g)
    return g, bool(bipartite), bool(tree)


def _boundary_samples(grid: Grid):
    """Boundary points, inward normals and a corner-distance weight, spaced about h."""
    spec = grid.spec
    h = grid.h
    if spec.kind == "disk":
        n = max(int(np.ceil(2 * np.pi * spec.r / h)), 16)
        ang = np.linspace(0.0, 2 * np.pi, n, endpoint=False)
        u = np.column_stack([np.cos(ang), np.sin(ang)])
        return [(spec.r * u, -u, np.full(n, np.inf))]
    edges = []
    for p0, p1, inward in (((0, 0), (spec.a, 0), (0, 1)), ((spec.a, 0), (spec.a, spec.b), (-1, 0)),
                           ((spec.a, spec.b), (0, spec.b), (0, -1)), ((0, spec.b), (0, 0), (1, 0))):
        p0, p1 = np.array(p0, float), np.array(p1, float)
        L = np.hypot(*(p1 - p0))
        n = max(int(np.ceil(L / h)), 4)
        t = (np.arange(n) + 0.5) / n
        pts = p0 + t[:, None] * (p1 - p0)
        corner = np.minimum(t, 1 - t) * L
        edges.append((pts, np.tile(np.array(inward, float), (n, 1)), corner))
    return edges


def _boundary_regular(pair: EigenPair, grid: Grid, band: float) -> bool:
    """Zeros of the boundary normal derivative are simple sign changes."""
    ext = extended_field(pair)
    traces = [(inward_derivative(pair, pts, nrm, ext), corner) for pts, nrm, corner in _boundary_samples(grid)]
    gmax = max(np.nanmax(np.abs(g)) for g, _ in traces)
    if not np.isfinite(gmax) or gmax == 0:
        return False
    for g, corner in traces:
        keep = (corner > band) & np.isfinite(g)
        g = g[keep]
        if len(g) < 3:
            continue
        a = np.abs(g)
        flips = np.sign(g[:-1]) * np.sign(g[1:]) < 0
        # slope across a sign change compared with the typical slope scale
        jump = np.abs(np.diff(g))
        if np.any(flips & (jump < GRADIENT_FRACTION * gmax * grid.h / grid.spec.diameter)):
            return False
        # near-zero local minimum without a sign change: a double zero
        interior = (a[1:-1] <= a[:-2]) & (a[1:-1] <= a[2:]) & (a[1:-1] < 1e-3 * gmax)
        near_flip = flips[:-1] | flips[1:]
        if np.any(interior & ~near_flip):
            return False
    return True


def _gradient_on_nodal_set(psi: np.ndarray, grid: Grid, band: float):
    """Smallest and largest cell gradient over cells crossed by the zero set."""
    h = grid.h
    m = grid.mask
    cell = m[:-1, :-1] & m[1:, :-1] & m[:-1, 1:] & m[1:, 1:]
    p00, p10, p01, p11 = psi[:-1, :-1], psi[1:, :-1], psi[:-1, 1:], psi[1:, 1:]
    gx = 0.5 * ((p10 - p00) + (p11 - p01)) / h
    gy = 0.5 * ((p01 - p00) + (p11 - p10)) / h
    g = np.hypot(gx, gy)
    lo = np.minimum(np.minimum(p00, p10), np.minimum(p01, p11))
    hi = np.maximum(np.maximum(p00, p10), np.maximum(p01, p11))
    crossed = cell & (lo <= 0) & (hi >= 0) & (hi > lo)
    X, Y = grid.coords()
    cx = 0.25 * (X[:-1, :-1] + X[1:, :-1] + X[:-1, 1:] + X[1:, 1:])
    cy = 0.25 * (Y[:-1, :-1] + Y[1:, :-1] + Y[:-1, 1:] + Y[1:, 1:])
    inner = grid.spec.signed_distance(cx, cy) > band
    gmax = float(g[cell].max()) if np.any(cell) else 0.0
    sel = crossed & inner
    gmin = float(g[sel].min()) if np.any(sel) else gmax
    return gmin, gmax


def genericity_check(pair: EigenPair, spectrum: Sequence[EigenPair], grid: Optional[Grid] = None) -> GenericityReport:
    """Discrete surrogates of the genericity conditions; reports, never certifies."""
    grid = _grid_of(pair, grid)
    lams = sorted(float(q.lam) for q in spectrum)
    k = int(np.argmin([abs(l - pair.lam) for l in lams]))
    gaps = [abs(lams[k] - lams[j]) for j in (k - 1, k + 1) if 0 <= j < len(lams)]
    simple = all(g > GAP_THRESHOLD * abs(pair.lam) for g in gaps)

    psi = _signed_field(pair, grid)
    band = max(4 * grid.h, 0.02 * grid.spec.diameter)
    gmin, gmax = _gradient_on_nodal_set(psi, grid, band)
    regular = gmin > GRADIENT_FRACTION * gmax
    boundary = _boundary_regular(pair, grid, band)

    contours = _nodal_contours(psi, grid)
    disjoint = True
    trees = [cKDTree(c) for c in contours]
    for s in range(len(contours)):
        for t in range(s + 1, len(contours)):
            if np.min(trees[t].query(contours[s])[0]) <= grid.h:
                disjoint = False
    return GenericityReport(bool(simple), gmin, gmax, bool(regular), bool(boundary), disjoint)


def deficiency_table(spectrum: Sequence[EigenPair], grid: Optional[Grid] = None) -> list[NodalReport]:
    """One row per simple eigenvalue of a sorted spectrum."""
    rows = []
    if not spectrum:
        return rows
    grid = _grid_of(spectrum[0], grid)
    for k, pair in enumerate(spectrum):
        n = pair.n if pair.n else k + 1
        gen = genericity_check(pair, spectrum, grid)
        if not gen.simple_eigenvalue:
            logger.warning("eigenvalue %d is not simple; skipped", n)
            continue
        labels, nu, graph, cuts = _sign_structure(_signed_field(pair, grid), grid)
        d = nodal_deficiency(n, nu)
        p = Partition(grid, (), labels, nu, graph, cuts)
        _, bip, tree = partition_graph(p)
        rows.append(NodalReport(n, float(pair.lam), nu, d, bip, tree, gen))
    return rows


def export_deficiency_csv(rows: Sequence[NodalReport], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["n", "lambda", "nu", "d", "bipartite", "is_tree", "generic"])
        for r in rows:
            w.writerow([r.n, repr(r.lam), r.nu, r.deficiency, r.bipartite, r.is_tree, r.genericity.generic])
