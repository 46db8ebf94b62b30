"""Equipartitions near a base partition: projection, tangent space, Hessian of Lambda, descent.

Everything lives in the perturbation chart of a base partition ``p``: a
point is a coordinate vector for :func:`displace_interfaces`.  Tangent
vectors are orthonormal in those coordinates, which fixes the metric the
Hessian eigenvalues refer to.
"""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.linalg import null_space

from .errors import GeometryError, NodalabError, ProjectionError
from .geometry import Partition, PerturbationBasis, PerturbationCoords, displace_interfaces
from .eigensolver import groundstates
from .shape_calculus import SimplexWeights, xi_jacobian, xi_map

logger = logging.getLogger("nodalab")

PROJECTION_RTOL = 1e-6
HESSIAN_RTOL = 1e-9
RANK_RTOL = 1e-8


@dataclass(frozen=True, eq=False)
class ProjectionResult:
    coords: PerturbationCoords
    residual_norm: float
    newton_iterations: int
    partition: Partition
    energies: np.ndarray

    @property
    def value(self) -> float:
        return float(self.energies.max())


@dataclass(frozen=True, eq=False)
class HessianReport:
    tangent_basis: np.ndarray
    hessian: np.ndarray
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    morse_index: int
    mu0_index: int
    zero_band: tuple[float, float]
    dt: float
    K: int
    dim: int
    base_value: float
    raw_asymmetry: float
    tangent_gradient_norm: float
    critical: bool
    evaluations: int
    seconds: float
    base_coords: np.ndarray = field(repr=False, default=None)

    @property
    def tangent_dim(self) -> int:
        return int(self.tangent_basis.shape[1])

    @property
    def tau(self) -> float:
        return self.zero_band[1]

    @property
    def nondegenerate(self) -> bool:
        return self.morse_index == self.mu0_index


def equipartition_residual(p: Partition) -> np.ndarray:
    lam = xi_map(p)
    return lam[:-1] - lam[-1]


def residual_jacobian(p: Partition, basis: PerturbationBasis) -> np.ndarray:
    """Derivative of :func:`equipartition_residual` along the basis modes, ``(nu - 1, dim)``."""
    J = xi_jacobian(p, basis)
    return J[:-1] - J[-1]


def _rank(A: np.ndarray) -> int:
    if A.size == 0:
        return 0
    s = np.linalg.svd(A, compute_uv=False)
    return int(np.sum(s > RANK_RTOL * s[0])) if s[0] > 0 else 0


def project_to_equipartition(p: Partition, coords: PerturbationCoords, rtol: float = PROJECTION_RTOL,
                             max_iter: int = 30, strict: bool = False) -> ProjectionResult:
    """Newton iteration on the constant shifts until all ground energies agree.

    Stops when the residual norm is at most ``rtol`` times the largest
    ground energy.  When the constant shifts cannot reach every direction of
    the residual (crossing interfaces), the step falls back to the
    minimum-norm solution over all modes, or raises a transversality
    failure when ``strict`` is set.
    """
    basis = coords.basis
    x = np.array(coords.values, dtype=float)
    const = basis.constant_indices()
    prev = None
    for it in range(max_iter + 1):
        q = displace_interfaces(p, PerturbationCoords(basis, x))
        lam = np.array([s.lam for s in groundstates(q, warm=prev)])
        r = lam[:-1] - lam[-1]
        rn = float(np.linalg.norm(r))
        if rn <= rtol * lam.max():
            return ProjectionResult(PerturbationCoords(basis, x), rn, it, q, lam)
        if it == max_iter:
            break
        D = residual_jacobian(q, basis)
        Dc = D[:, const]
        if _rank(Dc) == p.nu - 1:
            step, *_ = np.linalg.lstsq(Dc, -r, rcond=None)
            x[const] += step
        elif strict:
            raise ProjectionError("transversality failure (non-generic)")
        else:
            if _rank(D) < p.nu - 1:
                raise ProjectionError("transversality failure (non-generic)")
            x += np.linalg.pinv(D, rcond=RANK_RTOL) @ (-r)
        prev = q
    raise ProjectionError(f"projection diverged: residual {rn:.3e} after {max_iter} iterations")


def tangent_basis(p: Partition, basis: PerturbationBasis) -> np.ndarray:
    """Orthonormal basis of the kernel of the residual Jacobian, ``(dim, dim - nu + 1)``."""
    D = residual_jacobian(p, basis)
    if _rank(D) < p.nu - 1:
        raise ProjectionError("transversality failure: residual Jacobian rank deficient")
    if p.nu == 1:
        return np.eye(basis.dim)
    T = null_space(D, rcond=RANK_RTOL)
    return T


def lagrange_weights(p: Partition, basis: PerturbationBasis) -> SimplexWeights:
    """Simplex weights annihilating the constant-shift derivatives of the ground energies.

    At a critical equipartition these are the weights that make the
    weighted functional stationary along every mode.
    """
    J = xi_jacobian(p, basis)[:, basis.constant_indices()]
    if p.nu == 1:
        return SimplexWeights(np.ones(1))
    u, s, vt = np.linalg.svd(J.T)
    c = vt[-1]
    if c.sum() < 0:
        c = -c
    return SimplexWeights.normalized(np.clip(c, 0.0, None) + 1e-300)


class EquipartitionChart:
    """Lambda on the equipartition set, evaluated in the chart of a base partition.

    Results are memoized on the coordinate vector so repeated stencil points
    cost nothing.
    """

    def __init__(self, p: Partition, basis: PerturbationBasis, rtol: float = PROJECTION_RTOL):
        self.p = p
        self.basis = basis
        self.rtol = rtol
        self._memo: dict[bytes, ProjectionResult] = {}
        self.evaluations = 0

    def project(self, x: np.ndarray) -> ProjectionResult:
        x = np.asarray(x, dtype=float)
        key = x.tobytes()
        if key not in self._memo:
            self.evaluations += 1
            self._memo[key] = project_to_equipartition(self.p, PerturbationCoords(self.basis, x), self.rtol)
        return self._memo[key]

    def value(self, x: np.ndarray) -> float:
        return self.project(x).value


def lambda_on_E(p: Partition, coords: PerturbationCoords, rtol: float = PROJECTION_RTOL) -> float:
    """Lambda (the largest subdomain ground energy) after projecting onto the equipartitions."""
    return project_to_equipartition(p, coords, rtol).value


def morse_indices(report, tau: Optional[float] = None) -> tuple[int, int, bool]:
    """``(mu, mu0, nondegenerate)`` from a report or an array of eigenvalues."""
    if isinstance(report, HessianReport):
        eig = report.eigenvalues
        tau = report.tau if tau is None else tau
    else:
        eig = np.asarray(report, dtype=float)
        if tau is None:
            raise ValueError("tau is required with raw eigenvalues")
    mu = int(np.sum(eig < -tau))
    mu0 = int(np.sum(eig <= tau))
    if mu > mu0:
        raise AssertionError("Morse index exceeds the mu0 index")
    return mu, mu0, mu == mu0


def hessian_of_lambda(p: Partition, basis: PerturbationBasis, dt: float = 1e-2,
                      rtol: float = HESSIAN_RTOL, critical_rtol: float = 1e-3) -> HessianReport:
    """Finite-difference Hessian of Lambda restricted to the equipartitions through ``p``.

    Entry ``(a, b)`` uses the four points ``x0 + dt(+-v_a +- v_b)``; diagonal
    entries reduce to ``x0 +- 2 dt v_a``.  Every point is projected back onto
    the equipartitions before Lambda is read.
    """
    t0 = time.perf_counter()
    chart = EquipartitionChart(p, basis, rtol)
    try:
        base = chart.project(np.zeros(basis.dim))
    except (GeometryError, ProjectionError) as exc:
        raise ProjectionError(f"base partition cannot be projected: {exc}") from exc
    x0 = base.coords.values.copy()
    q0 = base.partition
    T = tangent_basis(q0, basis)
    c = lagrange_weights(q0, basis)
    grad = c.c @ xi_jacobian(q0, basis)
    gnorm = float(np.linalg.norm(T.T @ grad))
    lam0 = base.value
    critical = gnorm <= critical_rtol * lam0
    if not critical:
        logger.warning("Hessian requested away from a critical point (tangent gradient %.3e)", gnorm)

    def F(v):
        try:
            return chart.value(x0 + v)
        except NodalabError as exc:
            raise ProjectionError(f"Hessian stencil point failed ({exc}); displacement {v.tolist()}") from exc

    n = T.shape[1]
    H = np.zeros((n, n))
    for a in range(n):
        va = dt * T[:, a]
        H[a, a] = (F(2 * va) - 2 * lam0 + F(-2 * va)) / (4 * dt**2)
        for b in range(a):
            vb = dt * T[:, b]
            H[a, b] = (F(va + vb) - F(va - vb) - F(vb - va) + F(-va - vb)) / (4 * dt**2)
            H[b, a] = H[a, b]
    # each off-diagonal pair shares its four samples, so the raw matrix is symmetric
    raw_asym = float(np.linalg.norm(H - H.T) / max(np.linalg.norm(H), 1e-300))
    Hs = 0.5 * (H + H.T)
    eig, vec = np.linalg.eigh(Hs)
    tau = max(1e-3 * abs(lam0), 10 * rtol * abs(lam0) / dt**2)
    mu, mu0, _ = morse_indices(eig, tau)
    return HessianReport(T, Hs, eig, vec, mu, mu0, (-tau, tau), dt, basis.K, basis.dim, lam0, raw_asym,
                         gnorm, bool(critical), chart.evaluations, time.perf_counter() - t0, x0)


def gradient_hessian(p: Partition, basis: PerturbationBasis, report: HessianReport) -> np.ndarray:
    """Second route to the tangent Hessian: central differences of the shape gradient.

    Column ``b`` is ``T^T (grad Lambda_c(x+) - grad Lambda_c(x-)) / 2 dt`` at the
    projections of ``x0 +- dt T_b``, with the stationarity weights of the base
    point held fixed.  Unlike the four-point stencil the result is not
    symmetric by construction.
    """
    chart = EquipartitionChart(p, basis, HESSIAN_RTOL)
    x0 = report.base_coords
    c = lagrange_weights(chart.project(x0).partition, basis)
    T = report.tangent_basis
    dt = report.dt
    G = np.zeros((T.shape[1], T.shape[1]))
    for b in range(T.shape[1]):
        plus = c.c @ xi_jacobian(chart.project(x0 + dt * T[:, b]).partition, basis)
        minus = c.c @ xi_jacobian(chart.project(x0 - dt * T[:, b]).partition, basis)
        G[:, b] = T.T @ (plus - minus) / (2 * dt)
    return G


@dataclass
class DescentResult:
    partition: Partition
    coords: PerturbationCoords
    trace: list[dict]
    converged: bool
    reason: str

    @property
    def values(self) -> list[float]:
        return [row["Lambda"] for row in self.trace]


def minimize_lambda(start: Partition, basis: PerturbationBasis, coords: Optional[PerturbationCoords] = None,
                    max_iters: int = 50, gtol: Optional[float] = None, rtol: float = 1e-9,
                    max_step: Optional[float] = None) -> DescentResult:
    """Projected gradient descent of Lambda over the equipartitions in the chart of ``start``.

    The search direction is minus the tangent projection of the gradient of
    Lambda_c.  Weights are uniform while the gradient is large and switch to
    the stationarity weights once its norm drops below 0.1.  Steps start at
    the Barzilai-Borwein length and are halved until the sufficient-decrease
    test passes.
    """
    chart = EquipartitionChart(start, basis, rtol)
    x = np.zeros(basis.dim) if coords is None else np.array(coords.values, dtype=float)
    cur = chart.project(x)
    x = cur.coords.values.copy()
    lam = cur.value
    gtol = 1e-3 * lam if gtol is None else gtol
    max_step = 0.25 * start.rho if max_step is None else max_step
    if not np.isfinite(max_step):
        max_step = 0.05
    trace = []
    prev_x = prev_g = None
    alpha = None
    gnorm_prev = np.inf
    reason = "max_iters"
    converged = False
    for it in range(max_iters + 1):
        q = cur.partition
        J = xi_jacobian(q, basis)
        T = tangent_basis(q, basis)
        c = SimplexWeights.uniform(q.nu) if gnorm_prev >= 0.1 else lagrange_weights(q, basis)
        g_full = T @ (T.T @ (c.c @ J))
        gnorm = float(np.linalg.norm(g_full))
        trace.append({"iteration": it, "Lambda": lam, "gradient_norm": gnorm,
                      "step": 0.0 if alpha is None or it == 0 else float(alpha)})
        gnorm_prev = gnorm
        if gnorm < gtol:
            converged, reason = True, "gradient"
            break
        if it == max_iters:
            break
        if prev_x is not None:
            s = x - prev_x
            y = g_full - prev_g
            sy = float(s @ y)
            alpha = float(s @ s) / sy if sy > 0 else 2 * alpha
        else:
            alpha = 0.2 * max_step / gnorm
        alpha = min(alpha, max_step / gnorm)
        accepted = None
        while alpha * gnorm > 1e-9:
            try:
                trial = chart.project(x - alpha * g_full)
            except (GeometryError, ProjectionError):
                alpha *= 0.5
                continue
            if trial.value <= lam - 1e-4 * alpha * gnorm**2:
                accepted = trial
                break
            alpha *= 0.5
        if accepted is None:
            reason = "line search stalled"
            break
        assert accepted.value <= lam, "descent increased Lambda"
        prev_x, prev_g = x, g_full
        cur = accepted
        x = cur.coords.values.copy()
        lam = cur.value
    logger.info("descent stopped after %d iterations (%s), Lambda=%.12g", len(trace) - 1, reason, lam)
    return DescentResult(cur.partition, cur.coords, trace, converged, reason)


def pullback_value(p: Partition, weights: Sequence[float]) -> float:
    """Rayleigh quotient of ``sum_j c_j psi_1(P_j)`` for the block operator of ``p``."""
    from .eigensolver import partition_operator, rayleigh_quotient

    states = groundstates(p)
    psi = sum(cj * s.psi for cj, s in zip(weights, states))
    return rayleigh_quotient(psi, partition_operator(p))


def export_hessian_json(report: HessianReport, path: str | Path, mode=None, n=None, d_n=None) -> None:
    doc = {
        "mode": list(mode) if mode is not None else None,
        "n": n,
        "d_n": d_n,
        "dim": report.dim,
        "tangent_dim": report.tangent_dim,
        "K": report.K,
        "dt": report.dt,
        "tau": report.tau,
        "eigenvalues": [float(e) for e in report.eigenvalues],
        "morse_index": report.morse_index,
        "mu0_index": report.mu0_index,
        "nondegenerate": report.nondegenerate,
        "raw_asymmetry": report.raw_asymmetry,
        "critical": report.critical,
        "tangent_gradient_norm": report.tangent_gradient_norm,
        "Lambda": report.base_value,
        "evaluations": report.evaluations,
        "metric": "Euclidean in Fourier amplitudes (orthonormal tangent basis)",
    }
    Path(path).write_text(json.dumps(doc, indent=2))


def export_descent_csv(result: DescentResult, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "Lambda", "gradient_norm", "step"])
        for row in result.trace:
            w.writerow([row["iteration"], repr(row["Lambda"]), repr(row["gradient_norm"]), repr(row["step"])])
