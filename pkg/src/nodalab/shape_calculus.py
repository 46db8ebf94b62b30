"""Shape derivatives of subdomain ground energies and the partition functionals.

Sign conventions: an interface's normal ``N`` points from its left subdomain
into its right one, and a displacement ``f`` moves curve points by ``f M``.
Moving along ``+N`` grows the left subdomain and shrinks the right one, so

    d lambda_left  = -int (d psi_left / dn)^2  f (M.N)
    d lambda_right = +int (d psi_right / dn)^2 f (M.N)

with ``d/dn`` the outward normal derivative of each side.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Sequence, Union

import networkx as nx
import numpy as np

from .eigensolver import (
    DEFAULT_TOL,
    EigenPair,
    default_nquad,
    extended_field,
    groundstates,
    inward_derivative,
    normal_derivative,
    subdomain_groundstate,
)
from .errors import NodalabError
from .geometry import InterfaceCurve, Partition, PerturbationBasis

logger = logging.getLogger("nodalab")


@dataclass(frozen=True)
class SimplexWeights:
    c: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.c, dtype=float).copy()
        if c.ndim != 1 or len(c) == 0:
            raise ValueError("weights must be a nonempty vector")
        if np.any(c < -1e-14) or abs(c.sum() - 1.0) > 1e-10:
            raise ValueError("weights must lie on the unit simplex")
        c.setflags(write=False)
        object.__setattr__(self, "c", c)

    @classmethod
    def uniform(cls, nu: int) -> "SimplexWeights":
        return cls(np.full(nu, 1.0 / nu))

    @classmethod
    def normalized(cls, v) -> "SimplexWeights":
        v = np.abs(np.asarray(v, dtype=float))
        return cls(v / v.sum())


@dataclass(frozen=True)
class GradientVector:
    functional: str
    values: np.ndarray
    basis: PerturbationBasis

    @property
    def norm(self) -> float:
        return float(np.linalg.norm(self.values))

    def entries(self) -> list[dict]:
        return [{"interface": s, "mode": m, "value": float(v)} for (s, m), v in zip(self.basis.labels(), self.values)]


@dataclass(frozen=True, eq=False)
class InterfaceTraces:
    """Both one-sided outward normal derivatives along one interface."""

    interface_id: int
    sigma: np.ndarray
    weights: np.ndarray
    m_dot_n: np.ndarray
    left: np.ndarray  # subdomain label on the -N side, per point
    right: np.ndarray
    d_left: np.ndarray  # outward derivative of the left ground state
    d_right: np.ndarray


def interface_traces(p: Partition, n_quad: Optional[int] = None, tol: float = DEFAULT_TOL) -> list[InterfaceTraces]:
    """Traces of the subdomain ground states on every interface; cached on the partition.

    Each quadrature point reads its own side labels, so a curve bordering
    several subdomains on one side is handled point by point.
    """
    cache = p._cache.setdefault("traces", {})
    if n_quad in cache:
        return cache[n_quad]
    states = groundstates(p, tol)
    exts = {}
    out = []
    for s, curve in enumerate(p.interfaces):
        nq = n_quad or default_nquad(curve, p.grid.h)
        sig, pts, normals, w, M = curve.quadrature(nq)
        sides = []
        for side, dom in ((-1, curve.left_label), (+1, curve.right_label)):
            lab = p.side_labels(pts, normals, side)
            lab = _fill_missing(lab, dom)
            d = np.full(len(pts), np.nan)
            for j in np.unique(lab):
                if j not in exts:
                    exts[j] = extended_field(states[j - 1])
                sel = lab == j
                d[sel] = -inward_derivative(states[j - 1], pts[sel], side * normals[sel], exts[j])
            if np.any(np.isnan(d)):
                where = np.round(sig[np.isnan(d)], 4).tolist()
                raise NodalabError(f"trace stencil out of domain on interface {s} at arclength {where}")
            sides.append((lab, d))
        out.append(InterfaceTraces(s, sig, w, np.einsum("ij,ij->i", M, normals),
                                   sides[0][0], sides[1][0], sides[0][1], sides[1][1]))
    cache[n_quad] = out
    return out


def _fill_missing(lab: np.ndarray, default: int) -> np.ndarray:
    """Give unlabeled points (endpoints on the boundary) the label of the nearest labeled point."""
    ok = np.nonzero(lab > 0)[0]
    if len(ok) == 0:
        return np.full_like(lab, default)
    idx = np.arange(len(lab))
    nearest = ok[np.clip(np.searchsorted(ok, idx), 0, len(ok) - 1)]
    before = ok[np.clip(np.searchsorted(ok, idx) - 1, 0, len(ok) - 1)]
    pick = np.where(np.abs(before - idx) < np.abs(nearest - idx), before, nearest)
    return lab[pick]


def _mode_values(phi, sigma: np.ndarray) -> np.ndarray:
    if callable(phi):
        return np.asarray(phi(sigma), dtype=float) * np.ones_like(sigma)
    phi = np.asarray(phi, dtype=float)
    return phi * np.ones_like(sigma) if phi.ndim == 0 else phi


def hadamard_derivative(pair: EigenPair, curve: InterfaceCurve, phi: Union[Callable, np.ndarray, float],
                        field: Optional[np.ndarray] = None, side: Optional[str] = None,
                        n_quad: Optional[int] = None) -> float:
    """First variation of the ground energy of ``pair``'s subdomain when ``curve`` moves by ``phi M``.

    ``phi`` is a function of arclength, an array on the quadrature nodes or a
    constant.  ``side`` defaults to the side whose label matches the pair's
    subdomain.
    """
    if side is None:
        target = pair.operator.target if pair.operator is not None else None
        side = "right" if target is not None and target == curve.right_label else "left"
    if field is not None:
        curve = curve.with_field(field)
    tr = normal_derivative(pair, curve, side, n_quad)
    _, _, normals, _, M = curve.quadrature(len(tr.sigma) - 1)
    mn = np.einsum("ij,ij->i", M, normals)
    f = _mode_values(phi, tr.sigma)
    # with f measured along N the outward displacement is -f on the right side
    sgn = 1.0 if side == "left" else -1.0
    return float(-sgn * np.sum(tr.weights * tr.dpsi_dn**2 * f * mn))


def xi_map(p: Partition, tol: float = DEFAULT_TOL) -> np.ndarray:
    return np.array([q.lam for q in groundstates(p, tol)])


def lambda_c(p: Partition, c: SimplexWeights, tol: float = DEFAULT_TOL) -> float:
    c = c.c if isinstance(c, SimplexWeights) else np.asarray(c)
    return float(c @ xi_map(p, tol))


def xi_jacobian(p: Partition, basis: PerturbationBasis, n_quad: Optional[int] = None) -> np.ndarray:
    """Derivatives of every subdomain ground energy along every basis mode, shape ``(nu, dim)``."""
    J = np.zeros((p.nu, basis.dim))
    for tr in interface_traces(p, n_quad):
        s = tr.interface_id
        phis = basis.functions(s, tr.sigma)
        wl = -tr.weights * tr.d_left**2 * tr.m_dot_n
        wr = tr.weights * tr.d_right**2 * tr.m_dot_n
        for j in np.unique(tr.left):
            sel = tr.left == j
            J[j - 1, basis.offsets[s]: basis.offsets[s + 1]] += phis[:, sel] @ wl[sel]
        for j in np.unique(tr.right):
            sel = tr.right == j
            J[j - 1, basis.offsets[s]: basis.offsets[s + 1]] += phis[:, sel] @ wr[sel]
    return J


def grad_lambda_c(p: Partition, c: SimplexWeights, basis: PerturbationBasis,
                  n_quad: Optional[int] = None) -> GradientVector:
    c = c.c if isinstance(c, SimplexWeights) else np.asarray(c)
    return GradientVector("Lambda_c", c @ xi_jacobian(p, basis, n_quad), basis)


def psi_masses(p: Partition, psi: EigenPair) -> SimplexWeights:
    """Discrete ``||psi||^2`` on each subdomain, renormalized onto the simplex."""
    h2 = p.grid.h**2
    lab = p.labels.ravel()
    m = np.bincount(lab, weights=h2 * psi.psi.ravel() ** 2, minlength=p.nu + 1)[1:]
    return SimplexWeights.normalized(m)


def criticality_residual(p: Partition, psi: EigenPair, basis: PerturbationBasis) -> tuple[SimplexWeights, float]:
    c = psi_masses(p, psi)
    return c, grad_lambda_c(p, c, basis).norm


def _two_coloring(p: Partition) -> dict[int, int]:
    g = nx.Graph()
    g.add_nodes_from(range(1, p.nu + 1))
    g.add_edges_from(p.graph)
    if not nx.is_bipartite(g):
        raise NodalabError("partition graph is not bipartite")
    color = nx.bipartite.color(g)
    return {j: (1 if color[j] == 0 else -1) for j in g.nodes}


def matched_derivative_mismatch(p: Partition, c: SimplexWeights, threshold: float = 0.1) -> list[float]:
    """Spread of the ratio of the weighted one-sided normal derivatives, per interface.

    With ``a_k = +-sqrt(c_k)`` signed by a 2-coloring of the partition graph,
    the ratio ``a_left dpsi_left/dN / (a_right dpsi_right/dN)`` is one when
    the weighted ground states glue to a smooth function.
    """
    colors = _two_coloring(p)
    a = np.array([0.0] + [colors[j] * np.sqrt(c.c[j - 1]) for j in range(1, p.nu + 1)])
    out = []
    for tr in interface_traces(p):
        # derivatives along +N: the left outward normal is N, the right one -N
        num = a[tr.left] * tr.d_left
        den = -a[tr.right] * tr.d_right
        ok = np.abs(den) > threshold * np.abs(den).max()
        if not np.any(ok) or np.abs(den).max() == 0:
            raise NodalabError("trace too small to compare")
        r = num[ok] / den[ok]
        out.append(float((r.max() - r.min()) / np.median(r)))
    return out


def matched_derivative_check(p: Partition, psi: EigenPair) -> float:
    if p.nu < 2:
        raise ValueError("need at least two subdomains")
    return max(matched_derivative_mismatch(p, psi_masses(p, psi)))


def export_gradient_json(grad: GradientVector, c: SimplexWeights, path: str | Path, **extra) -> None:
    doc = {
        "functional": grad.functional,
        "c": [float(x) for x in c.c],
        "basis": {"K": grad.basis.K, "kinds": list(grad.basis.kinds), "lengths": list(grad.basis.lengths)},
        "entries": grad.entries(),
        "norms": {"l2": grad.norm, "max": float(np.max(np.abs(grad.values)))},
    }
    doc.update(extra)
    Path(path).write_text(json.dumps(doc, indent=2))


def export_criticality_json(c: SimplexWeights, gradient_norm: float, mismatch: Sequence[float],
                            path: str | Path, **extra) -> None:
    doc = {"c": [float(x) for x in c.c], "gradient_norm": float(gradient_norm),
           "mismatch_per_interface": [float(m) for m in mismatch]}
    doc.update(extra)
    Path(path).write_text(json.dumps(doc, indent=2))
