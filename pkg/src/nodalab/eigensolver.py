"""Discrete Dirichlet Schroedinger operator and its lowest eigenpairs.

Five-point Laplacian plus potential.  Where a stencil arm is cut by the
boundary or an interface at fraction ``theta`` of a step, the missing
neighbour is replaced by the linear ghost value ``u (theta - 1) / theta``,
which adds ``1/(theta h^2)`` to the diagonal and keeps the matrix symmetric.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import ArpackNoConvergence, LinearOperator, eigsh, splu

from .errors import EigensolverError
from .geometry import DIRECTIONS, MIN_SUBDOMAIN_NODES, Grid, InterfaceCurve, Partition, _components

logger = logging.getLogger("nodalab")

DEFAULT_TOL = 1e-9
DEFAULT_SEED = 20240611


@dataclass(frozen=True, eq=False)
class DiscreteOperator:
    grid: Grid
    matrix: sparse.csr_matrix
    active: np.ndarray  # (nx, ny) bool
    nodes: np.ndarray  # flat grid indices of the unknowns, in matrix order
    theta: np.ndarray  # (4, nx, ny) cut fractions used for the stencil
    target: Optional[int] = None

    @property
    def dimension(self) -> int:
        return len(self.nodes)

    def restrict(self, u: np.ndarray) -> np.ndarray:
        return np.asarray(u).ravel()[self.nodes]

    def extend(self, v: np.ndarray) -> np.ndarray:
        u = np.zeros(self.grid.shape)
        u.ravel()[self.nodes] = v
        return u


@dataclass(frozen=True, eq=False)
class EigenPair:
    """Eigenvalue and grid eigenfunction, normalized so that ``h^2 sum psi^2 = 1``."""

    lam: float
    psi: np.ndarray
    n: int = 1
    residual: float = 0.0
    operator: Optional[DiscreteOperator] = field(default=None, repr=False)


@dataclass(frozen=True)
class TraceSamples:
    """Outward normal derivative of a ground state sampled along a curve."""

    interface_id: int
    sigma: np.ndarray
    dpsi_dn: np.ndarray
    weights: np.ndarray


def assemble_operator(grid: Grid, labels: Optional[np.ndarray] = None, target_label: Optional[int] = None,
                      cuts=None) -> DiscreteOperator:
    """Matrix of ``-Delta_h + V`` on a region of the grid.

    With no ``labels`` the region is all of Omega.  With ``labels`` and
    ``cuts`` (from a :class:`Partition`) the region is subdomain
    ``target_label``, or the union of all subdomains with Dirichlet
    interfaces when ``target_label`` is ``None``.
    """
    h = grid.h
    nx, ny = grid.shape
    if labels is None:
        region = grid.mask.copy()
        theta = grid.bcut
        lab = region.astype(int)
    else:
        lab = np.where(grid.mask, labels, 0)
        region = lab > 0 if target_label is None else lab == target_label
        theta = cuts.theta if cuts is not None else grid.bcut
    count = int(region.sum())
    if count < MIN_SUBDOMAIN_NODES:
        raise EigensolverError(f"subdomain under-resolved ({count} active nodes)")
    if target_label is not None:
        comp = _components(region, np.zeros((nx - 1, ny), bool), np.zeros((nx, ny - 1), bool))
        if len(np.unique(comp[region])) != 1:
            raise EigensolverError("subdomain disconnected")

    index = -np.ones((nx, ny), dtype=np.int64)
    index[region] = np.arange(count)
    diag = grid.potential[region].astype(float).copy()
    rows, cols, vals = [], [], []
    I, J = np.nonzero(region)
    for d, (dx, dy) in enumerate(DIRECTIONS):
        th = theta[d][I, J]
        ni, nj = I + dx, J + dy
        inside = (ni >= 0) & (ni < nx) & (nj >= 0) & (nj < ny)
        nb = np.full(len(I), -1)
        nb[inside] = index[ni[inside], nj[inside]]
        same = inside & (nb >= 0) & (lab[np.clip(ni, 0, nx - 1), np.clip(nj, 0, ny - 1)] == lab[I, J])
        coupled = same & ~np.isfinite(th)
        diag += np.where(coupled, 1.0, 1.0 / np.where(np.isfinite(th), th, 1.0)) / h**2
        src = index[I, J]
        rows.append(src[coupled])
        cols.append(nb[coupled])
        vals.append(np.full(int(coupled.sum()), -1.0 / h**2))
    rows.append(np.arange(count))
    cols.append(np.arange(count))
    vals.append(diag)
    A = sparse.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(count, count)
    )
    nodes = np.ravel_multi_index((I, J), (nx, ny))
    return DiscreteOperator(grid, A, region, nodes, theta, target_label)


def _centroid_node(op: DiscreteOperator) -> int:
    I, J = np.nonzero(op.active)
    ci, cj = I.mean(), J.mean()
    return int(np.argmin((I - ci) ** 2 + (J - cj) ** 2))


def lowest_eigenpairs(op: DiscreteOperator, count: int = 1, tol: float = DEFAULT_TOL,
                      v0: Optional[np.ndarray] = None, seed: int = DEFAULT_SEED) -> list[EigenPair]:
    """Lowest ``count`` eigenpairs by shift-invert Lanczos (ARPACK).

    The start vector is ``v0`` when given (a grid function), else all ones
    for a single pair and a seeded Gaussian vector otherwise.
    """
    if count < 1 or count > 20:
        raise ValueError("count must be between 1 and 20")
    n = op.dimension
    if count >= n:
        raise ValueError("count must be smaller than the operator dimension")
    A = op.matrix
    if v0 is not None:
        start = op.restrict(v0)
        if not np.any(start):
            start = np.ones(n)
    elif count == 1:
        start = np.ones(n)
    else:
        start = np.random.default_rng(seed).standard_normal(n)
    vmin = float(op.grid.potential[op.active].min())
    shift = vmin - 1.0 if vmin < 0 else 0.0
    # symmetric minimum-degree ordering: about half the fill of the default
    lu = splu((A - shift * sparse.identity(n, format="csr")).tocsc(), permc_spec="MMD_AT_PLUS_A")
    inv = LinearOperator(A.shape, matvec=lu.solve, dtype=float)
    ncv = min(n - 1, max(2 * count + 1, 8 if count == 1 else 20))
    try:
        w, V = eigsh(A, k=count, sigma=shift, which="LM", v0=start, OPinv=inv, ncv=ncv,
                     tol=min(tol, 1e-12) * 1e-2)
    except ArpackNoConvergence as exc:
        raise EigensolverError(f"eigensolver failed: {exc}") from exc
    order = np.argsort(w)
    w, V = w[order], V[:, order]
    h = op.grid.h
    out = []
    ref = _centroid_node(op)
    for k in range(count):
        v = V[:, k]
        v = v / (h * np.linalg.norm(v))
        if k == 0 and count >= 1:
            s = np.sign(v[ref]) or np.sign(v.sum()) or 1.0
        else:
            big = np.flatnonzero(np.abs(v) > 1e-3 * np.abs(v).max())[0]
            s = np.sign(v[big])
        v = s * v
        r = A @ v - w[k] * v
        res = float(np.linalg.norm(r) / (max(abs(w[k]), 1.0) * np.linalg.norm(v)))
        if res > tol:
            raise EigensolverError(f"eigensolver failed: residual {res:.3e}")
        out.append(EigenPair(float(w[k]), op.extend(v), k + 1, res, op))
    for a in range(count):
        for b in range(a):
            ip = h * h * float(np.dot(out[a].psi.ravel(), out[b].psi.ravel()))
            if abs(ip) > 1e-8:
                logger.warning("eigenvectors %d and %d not orthogonal (%.2e)", a + 1, b + 1, ip)
    return out


def subdomain_operator(p: Partition, j: int) -> DiscreteOperator:
    return assemble_operator(p.grid, p.labels, j, p.cuts)


def partition_operator(p: Partition) -> DiscreteOperator:
    """Block operator on all subdomains with Dirichlet conditions on every interface."""
    return assemble_operator(p.grid, p.labels, None, p.cuts)


def subdomain_groundstate(p: Partition, j: int, tol: float = DEFAULT_TOL,
                          v0: Optional[np.ndarray] = None) -> EigenPair:
    """Ground state of subdomain ``j``; cached on the partition."""
    cache = p._cache.setdefault("ground", {})
    if j not in cache:
        op = subdomain_operator(p, j)
        cache[j] = lowest_eigenpairs(op, 1, tol, v0=v0)[0]
    return cache[j]


def groundstates(p: Partition, tol: float = DEFAULT_TOL, warm: Optional[Partition] = None) -> list[EigenPair]:
    """Ground states of all subdomains, labels ``1..nu`` in order."""
    out = []
    for j in range(1, p.nu + 1):
        v0 = None
        if warm is not None and "ground" in warm._cache and j in warm._cache["ground"]:
            v0 = warm._cache["ground"][j].psi
        out.append(subdomain_groundstate(p, j, tol, v0=v0))
    return out


def rayleigh_quotient(psi: np.ndarray, op: DiscreteOperator) -> float:
    """``<A psi, psi> / <psi, psi>`` for a grid function vanishing off the operator's region."""
    psi = np.asarray(psi, dtype=float)
    v = op.restrict(psi)
    off = np.abs(psi[~op.active]).max() if np.any(~op.active) else 0.0
    if off > 1e-12 * max(np.abs(v).max(initial=0.0), 1.0):
        raise ValueError("function does not vanish on the Dirichlet nodes")
    nrm = float(v @ v)
    if nrm == 0.0:
        raise ValueError("zero function")
    return float(v @ (op.matrix @ v)) / nrm


# -- traces -------------------------------------------------------------------


def extended_field(pair: EigenPair) -> np.ndarray:
    """Eigenfunction on its region plus ghost values two layers out (NaN beyond)."""
    op = pair.operator
    nx, ny = op.grid.shape
    ext = np.full((nx, ny), np.nan)
    ext[op.active] = pair.psi[op.active]
    acc = np.zeros((nx, ny))
    cnt = np.zeros((nx, ny))
    I, J = np.nonzero(op.active)
    for d, (dx, dy) in enumerate(DIRECTIONS):
        th = op.theta[d][I, J]
        ni, nj = I + dx, J + dy
        ok = np.isfinite(th) & (ni >= 0) & (ni < nx) & (nj >= 0) & (nj < ny)
        ok &= ~op.active[np.clip(ni, 0, nx - 1), np.clip(nj, 0, ny - 1)]
        g = pair.psi[I[ok], J[ok]] * (th[ok] - 1.0) / th[ok]
        np.add.at(acc, (ni[ok], nj[ok]), g)
        np.add.at(cnt, (ni[ok], nj[ok]), 1.0)
    ghost = (cnt > 0) & ~op.active
    ext[ghost] = acc[ghost] / cnt[ghost]
    # second layer: linear extrapolation along the axes
    known = np.isfinite(ext)
    acc[:] = 0.0
    cnt[:] = 0.0
    for dx, dy in DIRECTIONS:
        v1 = np.full((nx, ny), np.nan)
        v2 = np.full((nx, ny), np.nan)
        sl = lambda a, s: a[max(s[0], 0): nx + min(s[0], 0), max(s[1], 0): ny + min(s[1], 0)]
        dst = lambda a, s: a[max(-s[0], 0): nx + min(-s[0], 0), max(-s[1], 0): ny + min(-s[1], 0)]
        dst(v1, (dx, dy))[...] = sl(ext, (dx, dy))
        dst(v2, (2 * dx, 2 * dy))[...] = sl(ext, (2 * dx, 2 * dy))
        ok = ~known & np.isfinite(v1) & np.isfinite(v2)
        acc[ok] += 2 * v1[ok] - v2[ok]
        cnt[ok] += 1
    fill = cnt > 0
    ext[fill] = acc[fill] / cnt[fill]
    return ext


def interpolate(ext: np.ndarray, grid: Grid, pts: np.ndarray) -> np.ndarray:
    """Bilinear interpolation of a grid field (NaN where unknown corners dominate)."""
    g = grid.to_index(pts)
    nx, ny = ext.shape
    # points less than half a cell outside the lattice (stencils at curve
    # endpoints on a straight edge) are clamped onto it
    for ax, n in ((0, nx), (1, ny)):
        c = np.clip(g[:, ax], 0, n - 1)
        g[:, ax] = np.where(np.abs(g[:, ax] - c) < 0.5, c, g[:, ax])
    i0 = np.minimum(np.floor(g[:, 0]).astype(int), nx - 2)
    j0 = np.minimum(np.floor(g[:, 1]).astype(int), ny - 2)
    fx = g[:, 0] - i0
    fy = g[:, 1] - j0
    out = np.full(len(g), np.nan)
    ok = (i0 >= 0) & (i0 < nx - 1) & (j0 >= 0) & (j0 < ny - 1)
    i, j, a, b = i0[ok], j0[ok], fx[ok], fy[ok]
    total = np.zeros(len(i))
    known = np.zeros(len(i))
    for di, dj, wt in ((0, 0, (1 - a) * (1 - b)), (1, 0, a * (1 - b)), (0, 1, (1 - a) * b), (1, 1, a * b)):
        v = ext[i + di, j + dj]
        fin = np.isfinite(v)
        total += np.where(fin, wt * np.where(fin, v, 0.0), 0.0)
        known += np.where(fin, wt, 0.0)
    # unknown corners carrying under half the weight (a sample just past
    # the outer boundary at a curve endpoint) are dropped and the rest renormalized
    good = known > 0.5
    res = np.full(len(i), np.nan)
    res[good] = total[good] / known[good]
    out[ok] = res
    return out


def inward_derivative(pair: EigenPair, pts: np.ndarray, inward: np.ndarray, ext: Optional[np.ndarray] = None) -> np.ndarray:
    """Derivative along ``inward`` at boundary points (psi = 0 there), one-sided second order.

    Uses bilinear samples at offsets h and 2h: ``(4 f(h) - f(2h)) / 2h``.
    """
    h = pair.operator.grid.h
    if ext is None:
        ext = extended_field(pair)
    f1 = interpolate(ext, pair.operator.grid, pts + h * inward)
    f2 = interpolate(ext, pair.operator.grid, pts + 2 * h * inward)
    return (4 * f1 - f2) / (2 * h)


def default_nquad(curve: InterfaceCurve, h: float) -> int:
    return max(100, int(np.ceil(curve.base_length / h)))


def normal_derivative(pair: EigenPair, curve: InterfaceCurve, side: str, n_quad: Optional[int] = None,
                      interface_id: int = 0) -> TraceSamples:
    """Outward normal derivative of ``pair`` (a ground state on the given side of ``curve``)."""
    if side not in ("left", "right"):
        raise ValueError("side must be 'left' or 'right'")
    h = pair.operator.grid.h
    if n_quad is None:
        n_quad = default_nquad(curve, h)
    sig, pts, normals, w, _ = curve.quadrature(n_quad)
    sgn = 1.0 if side == "right" else -1.0
    d_in = inward_derivative(pair, pts, sgn * normals)
    if np.any(np.isnan(d_in)):
        raise EigensolverError("trace stencil out of domain")
    return TraceSamples(interface_id, sig, -d_in, w)


# -- export -------------------------------------------------------------------


def export_spectrum_csv(pairs: Sequence[EigenPair], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["n", "lambda", "residual"])
        for p in pairs:
            w.writerow([p.n, repr(p.lam), repr(p.residual)])


def export_eigenfunction_csv(pair: EigenPair, path: str | Path) -> None:
    """Grid dump: a header line ``nx, ny, h`` then one row per grid line ``j``."""
    g = pair.operator.grid
    with open(path, "w", newline="") as fh:
        fh.write(f"# nx={g.nx}, ny={g.ny}, h={g.h!r}, x0={g.origin[0]!r}, y0={g.origin[1]!r}\n")
        np.savetxt(fh, pair.psi.T, delimiter=",", fmt="%.17g")
