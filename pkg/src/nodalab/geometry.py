"""Domains, grids, interface curves and partitions.

Arrays on the grid are indexed ``[i, j]`` with ``x = x0 + i*h`` and
``y = y0 + j*h``.  Interfaces are polylines; subdomains are recovered from
the grid edges they cut, and every cut keeps its exact crossing fraction so
that the cut-cell stencil in :mod:`nodalab.eigensolver` depends continuously
on the interface position.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import sparse
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from .errors import ConfigError, GeometryError

logger = logging.getLogger("nodalab")

# +x, -x, +y, -y
DIRECTIONS = ((1, 0), (-1, 0), (0, 1), (0, -1))

# crossings closer than this (in units of h) to a node put the node on the curve
_ON_NODE_TOL = 1e-9
# curve sample spacing in units of h
CURVE_SPACING = 0.5


@dataclass(frozen=True)
class DomainSpec:
    """The domain Omega and the potential V.

    ``kind`` is ``"rectangle"`` (``[0, a] x [0, b]``) or ``"disk"`` (radius
    ``r`` centred at the origin).  ``potential`` is either ``None`` (V = 0), a
    callable ``V(x, y)`` or an array of node values matching the grid.
    """

    kind: str
    a: float = 1.0
    b: float = 1.0
    r: float = 1.0
    potential: Optional[Callable[[np.ndarray, np.ndarray], np.ndarray] | np.ndarray] = None

    def __post_init__(self):
        if self.kind == "rectangle":
            if not (self.a > 0 and self.b > 0):
                raise ConfigError("rectangle sides must be positive")
        elif self.kind == "disk":
            if not self.r > 0:
                raise ConfigError("disk radius must be positive")
        else:
            raise ConfigError(f"unknown domain kind {self.kind!r}")

    @classmethod
    def rectangle(cls, a: float, b: float, potential=None) -> "DomainSpec":
        return cls("rectangle", a=float(a), b=float(b), potential=potential)

    @classmethod
    def disk(cls, r: float, potential=None) -> "DomainSpec":
        return cls("disk", r=float(r), potential=potential)

    def label(self) -> str:
        if self.kind == "rectangle":
            return f"rect:{self.a:g}x{self.b:g}"
        return f"disk:{self.r:g}"

    @property
    def area(self) -> float:
        if self.kind == "rectangle":
            return self.a * self.b
        return np.pi * self.r**2

    @property
    def diameter(self) -> float:
        if self.kind == "rectangle":
            return float(np.hypot(self.a, self.b))
        return 2 * self.r

    # -- boundary geometry -------------------------------------------------

    def signed_distance(self, x, y):
        """Distance to the boundary, positive inside."""
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        if self.kind == "rectangle":
            inside = np.minimum(np.minimum(x, self.a - x), np.minimum(y, self.b - y))
            dx = np.maximum(np.maximum(-x, x - self.a), 0.0)
            dy = np.maximum(np.maximum(-y, y - self.b), 0.0)
            outside = np.hypot(dx, dy)
            return np.where(inside >= 0, inside, -outside)
        return self.r - np.hypot(x, y)

    def axis_distance(self, x, y, direction: tuple[int, int]):
        """Distance from interior points to the boundary along a grid axis."""
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        dx, dy = direction
        if self.kind == "rectangle":
            if dx == 1:
                return self.a - x
            if dx == -1:
                return x
            if dy == 1:
                return self.b - y
            return y
        if dx != 0:
            reach = np.sqrt(np.maximum(self.r**2 - y**2, 0.0))
            return reach - dx * x
        reach = np.sqrt(np.maximum(self.r**2 - x**2, 0.0))
        return reach - dy * y

    def project(self, p) -> np.ndarray:
        """Nearest boundary point."""
        p = np.asarray(p, dtype=float)
        if self.kind == "disk":
            n = np.hypot(p[0], p[1])
            if n == 0:
                return np.array([self.r, 0.0])
            return p * (self.r / n)
        x, y = p
        cands = [
            (abs(x), np.array([0.0, np.clip(y, 0, self.b)])),
            (abs(self.a - x), np.array([self.a, np.clip(y, 0, self.b)])),
            (abs(y), np.array([np.clip(x, 0, self.a), 0.0])),
            (abs(self.b - y), np.array([np.clip(x, 0, self.a), self.b])),
        ]
        return min(cands, key=lambda c: c[0])[1]

    def tangent(self, p) -> np.ndarray:
        """Unit boundary tangent at a boundary point (counter-clockwise)."""
        p = np.asarray(p, dtype=float)
        if self.kind == "disk":
            t = np.array([-p[1], p[0]])
            return t / np.hypot(*t)
        x, y = p
        d = [abs(y), abs(self.a - x), abs(self.b - y), abs(x)]
        edge = int(np.argmin(d))
        return [np.array([1.0, 0.0]), np.array([0.0, 1.0]), np.array([-1.0, 0.0]), np.array([0.0, -1.0])][edge]

    def slide(self, p, direction, s: float) -> np.ndarray:
        """Move a boundary point by signed arclength ``s`` along the boundary.

        The sense of motion is that of ``direction`` (a tangent vector).
        """
        p = np.asarray(p, dtype=float)
        t = self.tangent(p)
        sgn = 1.0 if np.dot(t, direction) >= 0 else -1.0
        if self.kind == "disk":
            ang = np.arctan2(p[1], p[0]) + sgn * s / self.r
            return self.r * np.array([np.cos(ang), np.sin(ang)])
        q = p + sgn * s * t
        tol = 1e-12 * max(self.a, self.b)
        if q[0] < -tol or q[0] > self.a + tol or q[1] < -tol or q[1] > self.b + tol:
            raise GeometryError("perturbation too large: interface endpoint slid past a corner")
        return q

    def ray_to_boundary(self, p, d) -> np.ndarray:
        """First boundary point on the ray ``p + t d``, ``t >= 0``."""
        p = np.asarray(p, dtype=float)
        d = np.asarray(d, dtype=float)
        d = d / np.hypot(*d)
        if self.kind == "disk":
            b = np.dot(p, d)
            c = np.dot(p, p) - self.r**2
            t = -b + np.sqrt(max(b * b - c, 0.0))
            return p + t * d
        ts = []
        for k, lim in ((0, 0.0), (0, self.a), (1, 0.0), (1, self.b)):
            if abs(d[k]) > 1e-14:
                t = (lim - p[k]) / d[k]
                if t >= -1e-12:
                    q = p + t * d
                    if -1e-9 <= q[0] <= self.a + 1e-9 and -1e-9 <= q[1] <= self.b + 1e-9:
                        ts.append(max(t, 0.0))
        if not ts:
            raise GeometryError("ray does not reach the boundary")
        return p + min(ts) * d


@dataclass(frozen=True, eq=False)
class Grid:
    """Uniform lattice covering Omega with a Dirichlet mask.

    ``bcut[d]`` holds, for masked nodes whose neighbour in direction ``d`` is
    not masked, the distance to the boundary along that axis in units of h
    (``inf`` elsewhere).
    """

    spec: DomainSpec
    nx: int
    ny: int
    h: float
    origin: tuple[float, float]
    mask: np.ndarray
    bcut: np.ndarray
    potential: np.ndarray

    @property
    def shape(self) -> tuple[int, int]:
        return (self.nx, self.ny)

    @property
    def n_interior(self) -> int:
        return int(self.mask.sum())

    def coords(self) -> tuple[np.ndarray, np.ndarray]:
        x = self.origin[0] + self.h * np.arange(self.nx)
        y = self.origin[1] + self.h * np.arange(self.ny)
        return np.meshgrid(x, y, indexing="ij")

    def to_index(self, pts) -> np.ndarray:
        """Continuous grid coordinates of physical points."""
        pts = np.asarray(pts, dtype=float)
        return (pts - np.asarray(self.origin)) / self.h

    def node_label(self, labels: np.ndarray, pts) -> np.ndarray:
        """Label of the grid node nearest to each point (0 off-grid)."""
        g = np.rint(self.to_index(np.atleast_2d(pts))).astype(int)
        ok = (g[:, 0] >= 0) & (g[:, 0] < self.nx) & (g[:, 1] >= 0) & (g[:, 1] < self.ny)
        out = np.zeros(len(g), dtype=int)
        out[ok] = labels[g[ok, 0], g[ok, 1]]
        return out


def _components(active: np.ndarray, cut_x: np.ndarray, cut_y: np.ndarray):
    """4-connected components of ``active`` nodes across uncut edges."""
    nx, ny = active.shape
    idx = np.arange(nx * ny).reshape(nx, ny)
    ex = active[:-1, :] & active[1:, :] & ~cut_x
    ey = active[:, :-1] & active[:, 1:] & ~cut_y
    rows = np.concatenate([idx[:-1, :][ex], idx[:, :-1][ey]])
    cols = np.concatenate([idx[1:, :][ex], idx[:, 1:][ey]])
    adj = sparse.coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(nx * ny, nx * ny))
    n, comp = connected_components(adj, directed=False)
    comp = comp.reshape(nx, ny)
    comp = np.where(active, comp, -1)
    return comp


def build_grid(spec: DomainSpec, resolution: float) -> Grid:
    """Discretize Omega with spacing ``h = 1/resolution``.

    The mask marks the lattice nodes strictly inside Omega.
    """
    if resolution <= 0:
        raise ConfigError("resolution must be positive")
    if resolution < 16:
        logger.warning("resolution %s is below the recommended minimum of 16", resolution)
    h = 1.0 / float(resolution)
    if spec.kind == "rectangle":
        nx = int(np.floor(spec.a / h + 1e-9)) + 2
        ny = int(np.floor(spec.b / h + 1e-9)) + 2
        origin = (0.0, 0.0)
    else:
        n = int(np.ceil(spec.r / h)) + 1
        nx = ny = 2 * n + 1
        origin = (-n * h, -n * h)
    grid = Grid(spec, nx, ny, h, origin, np.zeros((nx, ny), bool), np.zeros((4, nx, ny)), np.zeros((nx, ny)))
    X, Y = grid.coords()
    mask = spec.signed_distance(X, Y) > _ON_NODE_TOL * h
    mask[0, :] = mask[-1, :] = mask[:, 0] = mask[:, -1] = False

    comp = _components(mask, np.zeros((nx - 1, ny), bool), np.zeros((nx, ny - 1), bool))
    if len(np.unique(comp[mask])) != 1:
        raise GeometryError("domain discretization disconnected")

    bcut = np.full((4, nx, ny), np.inf)
    for d, (dx, dy) in enumerate(DIRECTIONS):
        nb = np.zeros_like(mask)
        nb[max(-dx, 0): nx - max(dx, 0), max(-dy, 0): ny - max(dy, 0)] = mask[
            max(dx, 0): nx - max(-dx, 0) or None, max(dy, 0): ny - max(-dy, 0) or None
        ]
        sel = mask & ~nb
        dist = spec.axis_distance(X[sel], Y[sel], (dx, dy)) / h
        bcut[d][sel] = np.clip(dist, _ON_NODE_TOL, 1.0)

    pot = np.zeros((nx, ny))
    V = spec.potential
    if callable(V):
        pot[mask] = np.asarray(V(X[mask], Y[mask]), dtype=float) * np.ones(int(mask.sum()))
    elif V is not None:
        V = np.asarray(V, dtype=float)
        if V.shape != (nx, ny):
            raise ConfigError(f"potential array shape {V.shape} does not match grid {(nx, ny)}")
        pot[mask] = V[mask]
    if not np.all(np.isfinite(pot[mask])):
        raise ConfigError("potential is not finite on the grid")
    return Grid(spec, nx, ny, h, origin, mask, bcut, pot)


# -- curves -----------------------------------------------------------------


def polyline_length(points: np.ndarray) -> np.ndarray:
    """Cumulative arclength along a polyline."""
    seg = np.hypot(*np.diff(points, axis=0).T)
    return np.concatenate([[0.0], np.cumsum(seg)])


def resample_polyline(points: np.ndarray, spacing: float) -> np.ndarray:
    """Resample at (nearly) uniform arclength, keeping both ends."""
    points = np.asarray(points, dtype=float)
    s = polyline_length(points)
    keep = np.concatenate([[True], np.diff(s) > 1e-14])
    points, s = points[keep], s[keep]
    n = max(int(np.ceil(s[-1] / spacing)), 2)
    t = np.linspace(0.0, s[-1], n + 1)
    return np.column_stack([np.interp(t, s, points[:, 0]), np.interp(t, s, points[:, 1])])


def _vertex_tangents(points: np.ndarray, closed: bool) -> np.ndarray:
    """Unit tangents by central differences of the polyline."""
    if closed:
        core = points[:-1]
        t = np.roll(core, -1, axis=0) - np.roll(core, 1, axis=0)
        t = np.vstack([t, t[:1]])
    else:
        t = np.empty_like(points)
        t[1:-1] = points[2:] - points[:-2]
        t[0] = points[1] - points[0]
        t[-1] = points[-1] - points[-2]
    return t / np.linalg.norm(t, axis=1)[:, None]


@dataclass(frozen=True, eq=False)
class InterfaceCurve:
    """Oriented polyline separating two subdomains.

    The unit normal ``N`` is the tangent rotated clockwise, so it points from
    ``left_label`` into ``right_label``.  ``param`` is the arclength of the
    chart's base curve and ``field`` its deformation field; both travel with
    the points when the curve is displaced.  ``offset`` is the accumulated
    normal displacement relative to that base.
    """

    kind: str
    points: np.ndarray
    left_label: int = 0
    right_label: int = 0
    param: Optional[np.ndarray] = None
    field: Optional[np.ndarray] = None
    offset: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.kind not in ("closed", "boundary_attached"):
            raise GeometryError(f"unknown curve kind {self.kind!r}")
        pts = np.asarray(self.points, dtype=float)
        object.__setattr__(self, "points", pts)
        if self.kind == "closed" and not np.allclose(pts[0], pts[-1]):
            raise GeometryError("closed curve must end where it starts")
        if self.param is None:
            object.__setattr__(self, "param", polyline_length(pts))
        if self.offset is None:
            object.__setattr__(self, "offset", np.zeros(len(pts)))

    @property
    def closed(self) -> bool:
        return self.kind == "closed"

    @property
    def base_length(self) -> float:
        return float(self.param[-1])

    @property
    def length(self) -> float:
        return float(polyline_length(self.points)[-1])

    def tangents(self) -> np.ndarray:
        return _vertex_tangents(self.points, self.closed)

    def normals(self) -> np.ndarray:
        t = self.tangents()
        return np.column_stack([t[:, 1], -t[:, 0]])

    def with_field(self, field: np.ndarray) -> "InterfaceCurve":
        return replace(self, field=np.asarray(field, dtype=float))

    def with_labels(self, left: int, right: int) -> "InterfaceCurve":
        return replace(self, left_label=int(left), right_label=int(right))

    def quadrature(self, n_quad: int):
        """Composite trapezoid rule in the base parameter.

        Returns ``(sigma, points, normals, weights, field)`` at ``n_quad + 1``
        nodes.  Weights include the stretch of the current curve relative to
        its base, so for an undisplaced curve they sum to its length.
        """
        s = self.param
        sig = np.linspace(0.0, s[-1], n_quad + 1)
        pts = np.column_stack([np.interp(sig, s, self.points[:, 0]), np.interp(sig, s, self.points[:, 1])])
        t = np.diff(self.points, axis=0)
        ds = np.diff(s)
        stretch_seg = np.hypot(*t.T) / ds
        mids = 0.5 * (s[:-1] + s[1:])
        stretch = np.interp(sig, mids, stretch_seg)
        vt = self.tangents()
        tq = np.column_stack([np.interp(sig, s, vt[:, 0]), np.interp(sig, s, vt[:, 1])])
        tq /= np.linalg.norm(tq, axis=1)[:, None]
        normals = np.column_stack([tq[:, 1], -tq[:, 0]])
        w = np.full(n_quad + 1, s[-1] / n_quad)
        w[0] *= 0.5
        w[-1] *= 0.5
        w = w * stretch
        if self.field is None:
            M = normals.copy()
        else:
            M = np.column_stack([np.interp(sig, s, self.field[:, 0]), np.interp(sig, s, self.field[:, 1])])
            M /= np.linalg.norm(M, axis=1)[:, None]
        return sig, pts, normals, w, M


def straight_curve(p0, p1, h: float, left: int = 0, right: int = 0) -> InterfaceCurve:
    p0 = np.asarray(p0, dtype=float)
    p1 = np.asarray(p1, dtype=float)
    n = max(int(np.ceil(np.hypot(*(p1 - p0)) / (CURVE_SPACING * h))), 2)
    t = np.linspace(0.0, 1.0, n + 1)[:, None]
    return InterfaceCurve("boundary_attached", p0 + t * (p1 - p0), left, right)


def circle_curve(center, radius: float, h: float, left: int = 0, right: int = 0) -> InterfaceCurve:
    """Counter-clockwise circle; its normal points outward (left = inside)."""
    n = max(int(np.ceil(2 * np.pi * radius / (CURVE_SPACING * h))), 8)
    a = np.linspace(0.0, 2 * np.pi, n + 1)
    pts = np.column_stack([center[0] + radius * np.cos(a), center[1] + radius * np.sin(a)])
    pts[-1] = pts[0]
    return InterfaceCurve("closed", pts, left, right)


def deformation_field(curve: InterfaceCurve, grid: Grid, blend_fraction: float = 0.25) -> np.ndarray:
    """Unit field M on the curve points: N in the bulk, tangent to the boundary at endpoints.

    Near each endpoint of a boundary-attached curve, M is the normalized
    combination ``(1 - w) N + w T`` with ``T`` the boundary tangent oriented
    along N and ``w = cos^2(pi d / 2l)`` for arclength ``d < l`` from the
    endpoint, ``l = blend_fraction * length``.
    """
    N = curve.normals()
    if curve.closed:
        return N
    spec = grid.spec
    s = polyline_length(curve.points)
    L = s[-1]
    ell = blend_fraction * L
    M = N.copy()
    for end, dist in ((0, s), (-1, L - s)):
        p = curve.points[end]
        T = spec.tangent(spec.project(p))
        if np.dot(T, N[end]) < 0:
            T = -T
        if np.dot(T, N[end]) < 0.5:
            raise GeometryError("transversality violated: interface nearly tangent to the boundary")
        w = np.where(dist < ell, np.cos(0.5 * np.pi * dist / ell) ** 2, 0.0)
        M = (1 - w)[:, None] * M + w[:, None] * T
    M /= np.linalg.norm(M, axis=1)[:, None]
    if np.any(np.einsum("ij,ij->i", M, N) < 0.5 - 1e-12):
        raise GeometryError("transversality violated: deformation field too oblique")
    return M


# -- perturbation coordinates -------------------------------------------------


@dataclass(frozen=True)
class PerturbationBasis:
    """Truncated Fourier modes of normal displacement, per interface.

    Boundary-attached curves carry ``1, cos(pi m s / L)`` (``K + 1`` modes);
    closed curves ``1, cos(2 pi m s / L), sin(2 pi m s / L)`` (``2K + 1``).
    Mode 0 of every interface is the constant shift.
    """

    K: int
    kinds: tuple[str, ...]
    lengths: tuple[float, ...]

    @classmethod
    def for_partition(cls, p: "Partition", K: int = 4) -> "PerturbationBasis":
        return cls(int(K), tuple(c.kind for c in p.interfaces), tuple(c.base_length for c in p.interfaces))

    def modes(self, s: int) -> int:
        return self.K + 1 if self.kinds[s] == "boundary_attached" else 2 * self.K + 1

    @property
    def offsets(self) -> np.ndarray:
        return np.concatenate([[0], np.cumsum([self.modes(s) for s in range(len(self.kinds))])]).astype(int)

    @property
    def dim(self) -> int:
        return int(self.offsets[-1])

    def labels(self) -> list[tuple[int, str]]:
        out = []
        for s, kind in enumerate(self.kinds):
            out.append((s, "const"))
            for m in range(1, self.K + 1):
                out.append((s, f"cos{m}"))
                if kind == "closed":
                    out.append((s, f"sin{m}"))
        return out

    def constant_indices(self) -> np.ndarray:
        return self.offsets[:-1].copy()

    def functions(self, s: int, sigma: np.ndarray) -> np.ndarray:
        """Mode values, shape ``(modes(s), len(sigma))``."""
        sigma = np.asarray(sigma, dtype=float)
        L = self.lengths[s]
        rows = [np.ones_like(sigma)]
        for m in range(1, self.K + 1):
            if self.kinds[s] == "boundary_attached":
                rows.append(np.cos(np.pi * m * sigma / L))
            else:
                rows.append(np.cos(2 * np.pi * m * sigma / L))
                rows.append(np.sin(2 * np.pi * m * sigma / L))
        return np.array(rows)

    def displacement(self, s: int, sigma: np.ndarray, values: np.ndarray) -> np.ndarray:
        a = np.asarray(values)[self.offsets[s]: self.offsets[s + 1]]
        return a @ self.functions(s, sigma)


@dataclass(frozen=True)
class PerturbationCoords:
    """Amplitudes of the Fourier displacement modes (local chart coordinates)."""

    basis: PerturbationBasis
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float).copy()
        if v.shape != (self.basis.dim,):
            raise ValueError(f"expected {self.basis.dim} amplitudes, got {v.shape}")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @classmethod
    def zeros(cls, basis: PerturbationBasis) -> "PerturbationCoords":
        return cls(basis, np.zeros(basis.dim))

    @classmethod
    def single(cls, basis: PerturbationBasis, s: int, mode: int, amplitude: float) -> "PerturbationCoords":
        v = np.zeros(basis.dim)
        v[basis.offsets[s] + mode] = amplitude
        return cls(basis, v)

    def amplitudes(self, s: int) -> np.ndarray:
        return self.values[self.basis.offsets[s]: self.basis.offsets[s + 1]]

    def __neg__(self):
        return PerturbationCoords(self.basis, -self.values)


# -- partitions ---------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Cuts:
    """Per-node cut fractions toward each axis neighbour (units of h; inf = uncut)."""

    theta: np.ndarray  # (4, nx, ny)
    on_curve: np.ndarray  # (nx, ny) bool
    cut_x: np.ndarray  # (nx-1, ny) bool, edge (i,j)-(i+1,j) crossed
    cut_y: np.ndarray  # (nx, ny-1) bool


@dataclass(frozen=True, eq=False)
class Partition:
    """Interfaces, per-node labels (1..nu, 0 = on a curve or outside) and the partition graph."""

    grid: Grid
    interfaces: tuple[InterfaceCurve, ...]
    labels: np.ndarray
    nu: int
    graph: tuple[tuple[int, int], ...]
    cuts: Cuts
    rho: float = np.inf
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def adjacency(self) -> dict[int, list[int]]:
        adj = {j: [] for j in range(1, self.nu + 1)}
        for a, b in self.graph:
            adj[a].append(b)
            adj[b].append(a)
        return adj

    def counts(self) -> np.ndarray:
        return np.bincount(self.labels.ravel(), minlength=self.nu + 1)[1:]

    def side_labels(self, pts: np.ndarray, normals: np.ndarray, side: int) -> np.ndarray:
        """Label of the subdomain found a short step off the curve on one side.

        ``side = +1`` looks along ``+N`` (the right side), ``-1`` along ``-N``.
        """
        h = self.grid.h
        out = self.grid.node_label(self.labels, pts + side * 1.5 * h * normals)
        miss = out == 0
        if np.any(miss):
            out[miss] = self.grid.node_label(self.labels, pts[miss] + side * 2.5 * h * normals[miss])
        return out


def _curve_crossings(points: np.ndarray, grid: Grid):
    """Crossings of a polyline with grid lines.

    Returns ``(xi, xj, xt)`` for vertical edges ``(i, j)-(i, j+1)`` and
    ``(yi, yj, yt)`` for horizontal edges ``(i, j)-(i+1, j)``, with ``t`` the
    fraction from the lower node.  Grid lines are half-open so a vertex lying
    on a line is counted once.
    """
    g = grid.to_index(points)
    P, Q = g[:-1], g[1:]
    out = []
    for ax in (0, 1):
        lo = np.minimum(P[:, ax], Q[:, ax])
        hi = np.maximum(P[:, ax], Q[:, ax])
        flo = np.floor(lo)
        cnt = (np.floor(hi) - flo).astype(int)
        # a vertex exactly on a line belongs to the segment ending there
        cnt = np.maximum(cnt, 0)
        seg = np.repeat(np.arange(len(P)), cnt)
        if len(seg) == 0:
            out.append((np.zeros(0, int), np.zeros(0, int), np.zeros(0)))
            continue
        first = np.repeat(np.cumsum(cnt) - cnt, cnt)
        line = flo[seg] + 1 + (np.arange(len(seg)) - first)
        d = Q[seg, ax] - P[seg, ax]
        t = (line - P[seg, ax]) / d
        other = P[seg, 1 - ax] + t * (Q[seg, 1 - ax] - P[seg, 1 - ax])
        base = np.floor(other)
        frac = other - base
        fix = frac > 1 - _ON_NODE_TOL
        base[fix] += 1
        frac[fix] = 0.0
        out.append((line.astype(int), base.astype(int), frac))
    (vi, vj, vt), (hj, hi_, ht) = out
    # for horizontal grid lines the roles are swapped: line index is j
    return (vi, vj, vt), (hi_, hj, ht)


def _cuts_from_curves(interfaces: Sequence[InterfaceCurve], grid: Grid):
    nx, ny = grid.shape
    tx_min = np.full((nx - 1, ny), np.inf)
    tx_max = np.full((nx - 1, ny), -np.inf)
    ty_min = np.full((nx, ny - 1), np.inf)
    ty_max = np.full((nx, ny - 1), -np.inf)
    on = np.zeros((nx, ny), bool)
    records = []
    for s, c in enumerate(interfaces):
        (vi, vj, vt), (hi_, hj, ht) = _curve_crossings(c.points, grid)
        for i, j, t, vertical in ((vi, vj, vt, True), (hi_, hj, ht, False)):
            ok = (i >= 0) & (i < nx) & (j >= 0) & (j < ny)
            i, j, t = i[ok], j[ok], t[ok]
            node = t < _ON_NODE_TOL
            on[i[node], j[node]] = True
            i, j, t = i[~node], j[~node], t[~node]
            if vertical:
                ok = j < ny - 1
                np.minimum.at(ty_min, (i[ok], j[ok]), t[ok])
                np.maximum.at(ty_max, (i[ok], j[ok]), t[ok])
            else:
                ok = i < nx - 1
                np.minimum.at(tx_min, (i[ok], j[ok]), t[ok])
                np.maximum.at(tx_max, (i[ok], j[ok]), t[ok])
            records.append((s, vertical, i[ok], j[ok], t[ok]))
    return tx_min, tx_max, ty_min, ty_max, on, records


def _assemble_cuts(grid: Grid, tx_min, tx_max, ty_min, ty_max, on) -> Cuts:
    nx, ny = grid.shape
    theta = grid.bcut.copy()
    theta[0][:-1, :] = np.minimum(theta[0][:-1, :], tx_min)
    theta[1][1:, :] = np.minimum(theta[1][1:, :], 1.0 - tx_max)
    theta[2][:, :-1] = np.minimum(theta[2][:, :-1], ty_min)
    theta[3][:, 1:] = np.minimum(theta[3][:, 1:], 1.0 - ty_max)
    # neighbours lying on a curve are Dirichlet nodes one step away
    theta[0][:-1, :] = np.where(on[1:, :], np.minimum(theta[0][:-1, :], 1.0), theta[0][:-1, :])
    theta[1][1:, :] = np.where(on[:-1, :], np.minimum(theta[1][1:, :], 1.0), theta[1][1:, :])
    theta[2][:, :-1] = np.where(on[:, 1:], np.minimum(theta[2][:, :-1], 1.0), theta[2][:, :-1])
    theta[3][:, 1:] = np.where(on[:, :-1], np.minimum(theta[3][:, 1:], 1.0), theta[3][:, 1:])
    theta = np.maximum(theta, _ON_NODE_TOL)
    cut_x = np.isfinite(tx_min) | on[:-1, :] | on[1:, :]
    cut_y = np.isfinite(ty_min) | on[:, :-1] | on[:, 1:]
    return Cuts(theta, on, cut_x, cut_y)


# grid edges needed before two subdomains count as adjacent; diagonal
# quadrants meeting at an interface crossing share one or two at most
MIN_CONTACT_EDGES = 3


def _graph_from_labels(labels: np.ndarray, cuts: Cuts) -> tuple[tuple[int, int], ...]:
    found = []
    a, b = labels[:-1, :], labels[1:, :]
    sel = (a > 0) & (b > 0) & (a != b)
    found.append((a[sel], b[sel]))
    a, b = labels[:, :-1], labels[:, 1:]
    sel = (a > 0) & (b > 0) & (a != b)
    found.append((a[sel], b[sel]))
    # across single on-curve nodes, opposite neighbours only
    on = cuts.on_curve
    a, b, c = labels[:-2, :], labels[2:, :], on[1:-1, :]
    sel = c & (a > 0) & (b > 0) & (a != b)
    found.append((a[sel], b[sel]))
    a, b, c = labels[:, :-2], labels[:, 2:], on[:, 1:-1]
    sel = c & (a > 0) & (b > 0) & (a != b)
    found.append((a[sel], b[sel]))
    a = np.concatenate([f[0] for f in found])
    b = np.concatenate([f[1] for f in found])
    if len(a) == 0:
        return ()
    pairs, counts = np.unique(np.column_stack([np.minimum(a, b), np.maximum(a, b)]), axis=0, return_counts=True)
    return tuple((int(x), int(y)) for (x, y), n in zip(pairs, counts) if n >= MIN_CONTACT_EDGES)


def _is_connected(nu: int, graph) -> bool:
    if nu <= 1:
        return True
    adj = {j: set() for j in range(1, nu + 1)}
    for a, b in graph:
        adj[a].add(b)
        adj[b].add(a)
    seen, stack = {1}, [1]
    while stack:
        v = stack.pop()
        for w in adj[v] - seen:
            seen.add(w)
            stack.append(w)
    return len(seen) == nu


def _orient_curves(interfaces, labels, grid):
    """Attach the dominant (left, right) labels to every curve."""
    out = []
    for c in interfaces:
        _, pts, normals, _, _ = c.quadrature(max(20, len(c.points) - 1))
        probe = Partition(grid, (), labels, 0, (), None)
        left = probe.side_labels(pts, normals, -1)
        right = probe.side_labels(pts, normals, +1)
        ok = (left > 0) & (right > 0) & (left != right)
        if not np.any(ok):
            out.append(c)
            continue
        pairs, counts = np.unique(np.column_stack([left[ok], right[ok]]), axis=0, return_counts=True)
        lft, rgt = pairs[np.argmax(counts)]
        out.append(c.with_labels(lft, rgt))
    return tuple(out)


MIN_SUBDOMAIN_NODES = 16
# pieces this small next to a larger piece of the same subdomain are slivers
SLIVER_NODES = 4


def rasterize_partition(interfaces: Sequence[InterfaceCurve], grid: Grid,
                        reference: Optional[np.ndarray] = None,
                        rho: float = np.inf) -> Partition:
    """Labels, cut fractions and partition graph induced by the curves.

    Without ``reference`` the components are numbered in scan order (rows
    bottom to top, left to right within a row).  With ``reference`` (the
    labels of the undisplaced partition) each component inherits the label it
    overlaps most, keeping subdomain numbering consistent inside a chart.
    """
    tx_min, tx_max, ty_min, ty_max, on, _ = _cuts_from_curves(interfaces, grid)
    on &= grid.mask
    cuts = _assemble_cuts(grid, tx_min, tx_max, ty_min, ty_max, on)
    active = grid.mask & ~on
    comp = _components(active, cuts.cut_x, cuts.cut_y)
    ids = np.unique(comp[active])
    nx, ny = grid.shape
    labels = np.zeros((nx, ny), dtype=int)
    if reference is None:
        order = np.arange(nx * ny).reshape(nx, ny).T.ravel()  # y-outer scan
        first = {}
        for flat in order:
            c = comp.flat[flat]
            if c >= 0 and c not in first:
                first[c] = len(first) + 1
        for c, lab in first.items():
            labels[comp == c] = lab
        nu = len(first)
    else:
        nu = int(reference.max())
        taken = {}
        sizes = {c: int(np.sum(comp == c)) for c in ids}
        for c in sorted(ids, key=lambda c: -sizes[c]):
            sel = comp == c
            votes = np.bincount(reference[sel], minlength=nu + 1)
            votes[0] = 0
            lab = int(np.argmax(votes))
            if lab in taken and sizes[c] < SLIVER_NODES:
                # a node or two cut off where two curves cross: Dirichlet
                logger.debug("dropping a %d-node sliver of subdomain %d", sizes[c], lab)
                continue
            if votes[lab] == 0:
                raise GeometryError("partition degenerated: a subdomain lost contact with its origin")
            if lab in taken:
                raise GeometryError("partition degenerated: subdomain split or merged")
            taken[lab] = c
            labels[sel] = lab
        if len(taken) != nu:
            raise GeometryError("partition degenerated: subdomain vanished")
    counts = np.bincount(labels.ravel(), minlength=nu + 1)[1:]
    if np.any(counts < MIN_SUBDOMAIN_NODES):
        raise GeometryError(f"subdomain under-resolved ({counts.min()} nodes)")
    graph = _graph_from_labels(labels, cuts)
    interfaces = _orient_curves(interfaces, labels, grid)
    return Partition(grid, tuple(interfaces), labels, nu, graph, cuts, rho)


def polylines_intersect(a: np.ndarray, b: np.ndarray) -> bool:
    """True if any segment of polyline ``a`` meets a segment of ``b``."""
    p, r = a[:-1], np.diff(a, axis=0)
    q, t = b[:-1], np.diff(b, axis=0)
    # prune by bounding boxes before the pairwise test
    lo_a, hi_a = np.minimum(a[:-1], a[1:]), np.maximum(a[:-1], a[1:])
    lo_b, hi_b = np.minimum(b[:-1], b[1:]), np.maximum(b[:-1], b[1:])
    ia, ib = np.nonzero(
        (lo_a[:, None, 0] <= hi_b[None, :, 0]) & (lo_b[None, :, 0] <= hi_a[:, None, 0])
        & (lo_a[:, None, 1] <= hi_b[None, :, 1]) & (lo_b[None, :, 1] <= hi_a[:, None, 1])
    )
    if len(ia) == 0:
        return False
    r, t, d = r[ia], t[ib], q[ib] - p[ia]
    den = r[:, 0] * t[:, 1] - r[:, 1] * t[:, 0]
    ok = np.abs(den) > 1e-300
    u = np.where(ok, (d[:, 0] * t[:, 1] - d[:, 1] * t[:, 0]) / np.where(ok, den, 1.0), -1.0)
    v = np.where(ok, (d[:, 0] * r[:, 1] - d[:, 1] * r[:, 0]) / np.where(ok, den, 1.0), -1.0)
    return bool(np.any(ok & (u >= 0) & (u <= 1) & (v >= 0) & (v <= 1)))


def clearance(interfaces: Sequence[InterfaceCurve], spec: DomainSpec) -> float:
    """Minimum gap between disjoint curves and between curves and boundary pieces they do not touch."""
    gaps = []
    trees = [cKDTree(c.points) for c in interfaces]
    for s, c in enumerate(interfaces):
        pts = c.points
        if c.closed:
            gaps.append(float(np.min(spec.signed_distance(pts[:, 0], pts[:, 1]))))
        elif spec.kind == "rectangle":
            touched = set()
            for p in (pts[0], pts[-1]):
                d = [abs(p[0]), abs(spec.a - p[0]), abs(p[1]), abs(spec.b - p[1])]
                touched.add(int(np.argmin(d)))
            dist = [pts[:, 0], spec.a - pts[:, 0], pts[:, 1], spec.b - pts[:, 1]]
            for e in range(4):
                if e not in touched:
                    gaps.append(float(np.min(dist[e])))
        else:
            s_arc = polyline_length(pts)
            mid = (s_arc > 0.25 * s_arc[-1]) & (s_arc < 0.75 * s_arc[-1])
            gaps.append(float(np.min(spec.signed_distance(pts[mid, 0], pts[mid, 1]))))
        for t in range(s + 1, len(interfaces)):
            # crossing curves (straight grids) are excluded from the gap
            if not polylines_intersect(pts, interfaces[t].points):
                gaps.append(float(np.min(trees[t].query(pts)[0])))
    return min(gaps) if gaps else np.inf


def make_partition(interfaces: Sequence[InterfaceCurve], grid: Grid, rho: Optional[float] = None) -> Partition:
    """Base partition: attach deformation fields, rasterize, pick the chart radius."""
    curves = [c.with_field(deformation_field(c, grid)) if c.field is None else c for c in interfaces]
    if rho is None:
        rho = 0.25 * clearance(curves, grid.spec)
    p = rasterize_partition(curves, grid, rho=rho)
    if not _is_connected(p.nu, p.graph):
        raise GeometryError("partition graph is disconnected")
    return p


def build_straight_partition(grid: Grid, m: int, k: int) -> Partition:
    """The ``m * k`` congruent-rectangle partition seeding the nodal partition of mode (m, k).

    Vertical interfaces run bottom to top (normal points to +x), horizontal
    ones left to right (normal points to -y).
    """
    spec = grid.spec
    if spec.kind != "rectangle":
        raise GeometryError("straight partitions need a rectangle")
    if m < 1 or k < 1:
        raise ValueError("m and k must be positive")
    curves = []
    for c in range(1, m):
        x = spec.a * c / m
        curves.append(straight_curve((x, 0.0), (x, spec.b), grid.h))
    for r in range(1, k):
        y = spec.b * r / k
        curves.append(straight_curve((0.0, y), (spec.a, y), grid.h))
    return make_partition(curves, grid)


def displace_interfaces(p: Partition, coords: PerturbationCoords) -> Partition:
    """Move every curve point by ``f_s(sigma) M`` and re-rasterize.

    Endpoints of boundary-attached curves slide along the boundary.  Labels
    keep the numbering of ``p``.
    """
    values = coords.values
    if not np.any(values):
        return p
    basis = coords.basis
    if len(basis.kinds) != len(p.interfaces):
        raise ValueError("coordinates do not match the partition")
    spec = p.grid.spec
    moved = []
    for s, c in enumerate(p.interfaces):
        f = basis.displacement(s, c.param, values)
        total = c.offset + f
        if np.max(np.abs(total)) > p.rho * (1 + 1e-12):
            raise GeometryError(
                f"perturbation too large: displacement {np.max(np.abs(total)):.4g} exceeds rho={p.rho:.4g}"
            )
        M = c.field
        pts = c.points + f[:, None] * M
        if not c.closed:
            pts[0] = spec.slide(c.points[0], M[0], f[0])
            pts[-1] = spec.slide(c.points[-1], M[-1], f[-1])
        else:
            pts[-1] = pts[0]
        moved.append(replace(c, points=pts, offset=total))
    for s in range(len(moved)):
        for t in range(s + 1, len(moved)):
            if not polylines_intersect(p.interfaces[s].points, p.interfaces[t].points):
                after = np.min(cKDTree(moved[t].points).query(moved[s].points)[0])
                if after < 0.5 * p.grid.h:
                    raise GeometryError("partition degenerated: interfaces collide")
    q = rasterize_partition(moved, p.grid, reference=p.labels, rho=p.rho)
    if q.graph != p.graph:
        raise GeometryError("partition degenerated: adjacency changed")
    return q


def curve_distance(p: Partition, q: Partition) -> float:
    """Largest pointwise distance between corresponding curves of two partitions in one chart."""
    d = 0.0
    for a, b in zip(p.interfaces, q.interfaces):
        d = max(d, float(np.max(np.abs(a.offset - b.offset))))
    return d


# -- IO -----------------------------------------------------------------------


def parse_domain(text: str) -> DomainSpec:
    """``rect:1x0.618`` or ``disk:1``."""
    try:
        kind, dims = text.split(":", 1)
        if kind in ("rect", "rectangle"):
            a, b = dims.lower().split("x")
            return DomainSpec.rectangle(float(a), float(b))
        if kind == "disk":
            return DomainSpec.disk(float(dims))
    except ValueError as exc:
        raise ConfigError(f"cannot parse domain {text!r}") from exc
    raise ConfigError(f"cannot parse domain {text!r}")


def load_config(path: str | Path) -> dict:
    """Read a JSON run configuration into a dict with a ``DomainSpec`` under ``spec``."""
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return config_from_dict(doc, base=Path(path).parent)


def config_from_dict(doc: dict, base: Path = Path(".")) -> dict:
    dom = doc.get("domain")
    if not isinstance(dom, dict) or "kind" not in dom:
        raise ConfigError("config needs a domain object with a kind")
    pot = doc.get("potential", "zero")
    potential = None
    if isinstance(pot, dict) and "grid_file" in pot:
        f = Path(pot["grid_file"])
        if not f.is_absolute():
            f = base / f
        try:
            potential = np.load(f) if f.suffix == ".npy" else np.loadtxt(f, delimiter=",")
        except OSError as exc:
            raise ConfigError(f"cannot read potential file {f}") from exc
    elif pot != "zero":
        raise ConfigError(f"unsupported potential {pot!r}")
    if dom["kind"] == "rectangle":
        spec = DomainSpec.rectangle(dom["a"], dom["b"], potential)
    elif dom["kind"] == "disk":
        spec = DomainSpec.disk(dom["r"], potential)
    else:
        raise ConfigError(f"unknown domain kind {dom['kind']!r}")
    out = dict(doc)
    out["spec"] = spec
    return out


def export_curves_csv(interfaces: Sequence[InterfaceCurve], path: str | Path) -> None:
    """Polylines as rows ``interface_id, s, x, y``."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["interface_id", "s", "x", "y"])
        for k, c in enumerate(interfaces):
            s = polyline_length(c.points)
            for sk, (x, y) in zip(s, c.points):
                w.writerow([k, repr(float(sk)), repr(float(x)), repr(float(y))])
