import json

import numpy as np
import pytest

from nodalab.equipartition import (
    EquipartitionChart,
    HessianReport,
    equipartition_residual,
    export_descent_csv,
    export_hessian_json,
    gradient_hessian,
    lagrange_weights,
    lambda_on_E,
    minimize_lambda,
    morse_indices,
    project_to_equipartition,
    pullback_value,
    residual_jacobian,
    tangent_basis,
)
from nodalab.errors import ProjectionError
from nodalab.geometry import PerturbationBasis, PerturbationCoords, curve_distance
from nodalab.shape_calculus import xi_map


def test_residual_of_symmetric_split(straight256):
    p = straight256(1, 2)
    r = equipartition_residual(p)
    assert r.shape == (1,)
    # y = 0.309 falls between grid lines, so the halves agree only to discretization level
    assert abs(r[0]) < 1e-6 * xi_map(p).max()


def test_residual_of_unequal_split(straight256):
    p = straight256(1, 2)
    b = PerturbationBasis.for_partition(p, 4)
    from nodalab.geometry import displace_interfaces

    q = displace_interfaces(p, PerturbationCoords.single(b, 0, 0, 0.03))
    assert abs(equipartition_residual(q)[0]) > 1.0
    D = residual_jacobian(q, b)
    assert D.shape == (1, b.dim)


def test_projection_fixed_point(straight256):
    p = straight256(1, 2)
    b = PerturbationBasis.for_partition(p, 4)
    r = project_to_equipartition(p, PerturbationCoords.zeros(b))
    assert r.newton_iterations <= 1
    assert np.max(np.abs(r.coords.values)) < 1e-6


def test_projection_undoes_constant_shift(straight256):
    p = straight256(1, 2)
    b = PerturbationBasis.for_partition(p, 4)
    r = project_to_equipartition(p, PerturbationCoords.single(b, 0, 0, 0.03))
    assert abs(r.coords.values[0]) < 1e-3
    assert r.residual_norm <= 1e-6 * r.value


def test_projection_of_cosine_bump(straight256):
    p = straight256(1, 2)
    b = PerturbationBasis.for_partition(p, 4)
    r = project_to_equipartition(p, PerturbationCoords.single(b, 0, 1, 0.02), rtol=1e-6)
    lam = r.energies
    assert np.ptp(lam) <= 1e-6 * lam.max()
    # only the constant mode moves
    assert r.coords.values[1] == 0.02
    assert np.all(r.coords.values[2:] == 0.0)


def test_projection_strict_on_crossing_seed(straight256):
    p = straight256(2, 2)
    b = PerturbationBasis.for_partition(p, 4)
    x = np.zeros(b.dim)
    x[0] = 0.01
    with pytest.raises(ProjectionError, match="transversality"):
        project_to_equipartition(p, PerturbationCoords(b, x), strict=True)
    r = project_to_equipartition(p, PerturbationCoords(b, x))
    assert r.residual_norm <= 1e-6 * r.value


@pytest.mark.parametrize("mk, tdim", [((1, 2), 4), ((2, 1), 4), ((3, 1), 8), ((2, 2), 7)])
def test_tangent_dimension(straight256, mk, tdim):
    p = straight256(*mk)
    b = PerturbationBasis.for_partition(p, 4)
    T = tangent_basis(p, b)
    assert T.shape == (b.dim, tdim)
    assert np.allclose(T.T @ T, np.eye(tdim), atol=1e-10)
    assert np.max(np.abs(residual_jacobian(p, b) @ T)) < 1e-8 * np.abs(residual_jacobian(p, b)).max()


def test_lagrange_weights_half_split(straight256):
    p = straight256(1, 2)
    b = PerturbationBasis.for_partition(p, 4)
    assert lagrange_weights(p, b).c == pytest.approx([0.5, 0.5], abs=1e-6)
    assert lagrange_weights(straight256(1, 1), PerturbationBasis.for_partition(straight256(1, 1), 4)).c == [1.0]


def test_lambda_on_E_matches_chart(straight256):
    p = straight256(1, 2)
    b = PerturbationBasis.for_partition(p, 4)
    coords = PerturbationCoords.single(b, 0, 2, 0.01)
    chart = EquipartitionChart(p, b)
    assert lambda_on_E(p, coords) == pytest.approx(chart.value(coords.values), rel=1e-12)
    chart.value(coords.values)
    assert chart.evaluations == 1


def test_morse_indices_from_eigenvalues():
    assert morse_indices([-5.0, 2.0, 3.0], tau=0.1) == (1, 1, True)
    assert morse_indices([-5.0, 0.05, 3.0], tau=0.1) == (1, 2, False)
    assert morse_indices([1.0, 2.0], tau=0.1) == (0, 0, True)
    with pytest.raises(ValueError):
        morse_indices([1.0])


def test_pullback_identity(straight256):
    p = straight256(1, 2)
    b = PerturbationBasis.for_partition(p, 4)
    r = project_to_equipartition(p, PerturbationCoords.single(b, 0, 1, 0.015), rtol=1e-9)
    for w in ([0.5, 0.5], [0.8, 0.2], [0.1, 0.9]):
        w = np.sqrt(np.asarray(w))
        assert pullback_value(r.partition, w) == pytest.approx(r.value, rel=1e-6)


@pytest.mark.slow
@pytest.mark.parametrize("mk, mu", [((2, 1), 0), ((1, 2), 1)])
def test_hessian_report(hessian256, mk, mu):
    p, b, rep = hessian256(*mk)
    assert isinstance(rep, HessianReport)
    assert rep.critical
    assert rep.tangent_dim == 4
    assert rep.raw_asymmetry <= 1e-3
    assert (rep.morse_index, rep.nondegenerate) == (mu, True)
    assert rep.tau == pytest.approx(1e-3 * rep.base_value)


@pytest.mark.slow
@pytest.mark.parametrize("mk", [(2, 1), (1, 2)])
def test_gradient_route_hessian_agrees(hessian256, mk):
    p, b, rep = hessian256(*mk)
    G = gradient_hessian(p, b, rep)
    asym = np.linalg.norm(G - G.T) / np.linalg.norm(G)
    assert asym < 1e-2
    Gs = 0.5 * (G + G.T)
    eig = np.linalg.eigvalsh(Gs)
    assert morse_indices(eig, rep.tau) == (rep.morse_index, rep.mu0_index, rep.nondegenerate)
    assert np.linalg.norm(Gs - rep.hessian) / np.linalg.norm(rep.hessian) < 5e-2


@pytest.mark.slow
def test_crossing_seed_unstable_direction_with_six_modes(hessian256):
    _, b, rep = hessian256(2, 2, K=6)
    assert rep.critical and rep.nondegenerate
    assert rep.morse_index == 1
    v = rep.tangent_basis @ rep.eigenvectors[:, 0]
    labels = b.labels()
    top = sorted(range(b.dim), key=lambda i: -abs(v[i]))[:2]
    # the lines rotate about the crossing: odd cosines dominate, constants stay put
    assert all(labels[i][1] in ("cos1", "cos3", "cos5") for i in top)


@pytest.mark.slow
def test_descent_reconverges_to_vertical_split(straight256, spectrum256):
    p = straight256(2, 1)
    b = PerturbationBasis.for_partition(p, 4)
    base = project_to_equipartition(p, PerturbationCoords.zeros(b), rtol=1e-9)
    res = minimize_lambda(p, b, PerturbationCoords.single(b, 0, 1, 0.02))
    lam2 = spectrum256[1].lam
    assert res.converged
    assert res.trace[-1]["gradient_norm"] < 1e-3 * lam2
    assert curve_distance(res.partition, base.partition) < 2e-3
    assert abs(res.values[-1] - lam2) / lam2 < 1e-2
    assert all(b_ <= a for a, b_ in zip(res.values, res.values[1:]))


@pytest.mark.slow
def test_descent_escapes_horizontal_saddle(hessian256, spectrum256):
    p, b, rep = hessian256(1, 2)
    assert rep.eigenvalues[0] < -rep.tau
    x = rep.base_coords + 0.01 * rep.tangent_basis @ rep.eigenvectors[:, 0]
    res = minimize_lambda(p, b, PerturbationCoords(b, x), max_iters=10)
    lam3 = spectrum256[2].lam
    assert res.values[-1] < lam3 * (1 - 1e-3)
    assert np.all(np.diff(res.values) <= 0)


def test_descent_from_minimum_stops_at_once(straight256):
    p = straight256(2, 1)
    b = PerturbationBasis.for_partition(p, 4)
    res = minimize_lambda(p, b)
    assert res.converged and len(res.trace) <= 2


def test_exports(straight128, tmp_path):
    p = straight128(2, 1)
    b = PerturbationBasis.for_partition(p, 2)
    res = minimize_lambda(p, b, max_iters=2)
    export_descent_csv(res, tmp_path / "d.csv")
    lines = (tmp_path / "d.csv").read_text().splitlines()
    assert lines[0] == "iteration,Lambda,gradient_norm,step" and len(lines) == len(res.trace) + 1
    T = np.eye(2)
    rep = HessianReport(T, np.diag([-1.0, 2.0]), np.array([-1.0, 2.0]), T, 1, 1, (-0.1, 0.1), 1e-2, 2,
                        3, 50.0, 0.0, 1e-5, True, 9, 0.1)
    export_hessian_json(rep, tmp_path / "h.json", mode=(1, 2), n=3, d_n=1)
    doc = json.loads((tmp_path / "h.json").read_text())
    assert doc["morse_index"] == 1 and doc["nondegenerate"] and doc["mode"] == [1, 2]
    assert doc["tangent_dim"] == 2 and doc["tau"] == 0.1
