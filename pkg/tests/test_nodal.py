import numpy as np
import pytest

from nodalab.eigensolver import assemble_operator, groundstates, lowest_eigenpairs
from nodalab.errors import NodalError
from nodalab.geometry import DomainSpec, build_grid
from nodalab.nodal import (
    deficiency_table,
    export_deficiency_csv,
    genericity_check,
    nodal_count,
    nodal_deficiency,
    nodal_partition,
    partition_graph,
)


def test_ground_state_has_one_domain(spectrum128):
    p, nu = nodal_partition(spectrum128[0])
    assert nu == 1 and p.interfaces == ()


def test_mode_one_two_splits_horizontally(spectrum128):
    p, nu = nodal_partition(spectrum128[2])
    assert nu == 2 and len(p.interfaces) == 1
    c = p.interfaces[0]
    assert c.kind == "boundary_attached"
    assert np.max(np.abs(c.points[:, 1] - 0.309)) < 2 * p.grid.h
    assert c.points[:, 0].min() == pytest.approx(0.0, abs=1e-12)
    assert c.points[:, 0].max() == pytest.approx(1.0, abs=1e-12)


def test_mode_four_one_has_three_vertical_lines(spectrum128):
    p, nu = nodal_partition(spectrum128[5])
    assert nu == 4 and len(p.interfaces) == 3
    xs = sorted(float(np.mean(c.points[:, 0])) for c in p.interfaces)
    assert xs == pytest.approx([0.25, 0.5, 0.75], abs=2 * p.grid.h)
    for c in p.interfaces:
        assert np.ptp(c.points[:, 0]) < 2 * p.grid.h


@pytest.mark.parametrize("n, nu, d", [(1, 1, 0), (3, 2, 1), (6, 4, 2)])
def test_nodal_deficiency(n, nu, d):
    assert nodal_deficiency(n, nu) == d


def test_courant_violation_raises():
    with pytest.raises(NodalError, match="Courant"):
        nodal_deficiency(2, 3)
    with pytest.raises(ValueError):
        nodal_deficiency(2, 0)


def test_partition_graph_examples(spectrum128, straight128, disk_spectrum):
    p, _ = nodal_partition(spectrum128[2])
    g, bip, tree = partition_graph(p)
    assert sorted(g.edges) == [(1, 2)] and bip and tree
    g, bip, tree = partition_graph(straight128(3, 2))
    assert g.number_of_nodes() == 6 and g.number_of_edges() == 7
    assert bip and not tree
    disk, nu = nodal_partition(disk_spectrum[5])
    assert nu == 2 and len(disk.interfaces) == 1 and disk.interfaces[0].kind == "closed"
    g, bip, tree = partition_graph(disk)
    assert g.number_of_edges() == 1 and bip and tree


def test_adjacent_domains_have_opposite_signs(spectrum128):
    for pair in spectrum128[:8]:
        p, nu = nodal_partition(pair)
        sign = {j: np.sign(pair.psi[p.labels == j].sum()) for j in range(1, nu + 1)}
        for a, b in p.graph:
            assert sign[a] == -sign[b]


def test_genericity_examples(spectrum128, grid128):
    rep = genericity_check(spectrum128[2], spectrum128, grid128)
    assert rep.generic
    assert rep.min_gradient_on_nodal_set > 0.05 * rep.max_gradient
    rep1 = genericity_check(spectrum128[0], spectrum128, grid128)
    assert rep1.generic
    # crossing nodal lines of the (2,2) mode
    rep5 = genericity_check(spectrum128[4], spectrum128, grid128)
    assert not rep5.generic
    assert not rep5.gradient_regular and not rep5.interfaces_disjoint


def test_degenerate_square_pair():
    g = build_grid(DomainSpec.rectangle(1.0, 1.0), 64)
    pairs = lowest_eigenpairs(assemble_operator(g), 3)
    rep = genericity_check(pairs[1], pairs, g)
    assert not rep.simple_eigenvalue and not rep.generic
    rows = deficiency_table(pairs, g)
    assert [r.n for r in rows] == [1]


def test_disk_radial_mode_is_generic(disk_spectrum, disk_grid):
    rep = genericity_check(disk_spectrum[5], disk_spectrum, disk_grid)
    assert rep.generic


def test_first_two_modes_have_no_deficiency():
    g = build_grid(DomainSpec.rectangle(1.0, 0.618), 96)
    rows = deficiency_table(lowest_eigenpairs(assemble_operator(g), 2), g)
    assert [(r.n, r.nu, r.deficiency) for r in rows] == [(1, 1, 0), (2, 2, 0)]


def test_empty_table():
    assert deficiency_table([]) == []


def test_deficiency_table_at_128(spectrum128, grid128, oracle):
    rows = deficiency_table(spectrum128, grid128)
    assert [[r.n, r.nu, r.deficiency] for r in rows] == oracle["deficiency_rows"]
    assert all(r.bipartite for r in rows)
    assert all(r.is_tree for r in rows if r.genericity.generic)
    assert all(r.deficiency >= 0 for r in rows)


def test_nodal_count_refinement_stable(spectrum128, spectrum256):
    assert [nodal_count(q) for q in spectrum128] == [nodal_count(q) for q in spectrum256]


def test_subdomain_energies_match(spectrum128):
    for n in (3, 4, 6):
        p, _ = nodal_partition(spectrum128[n - 1])
        lam = spectrum128[n - 1].lam
        for q in groundstates(p):
            assert abs(q.lam - lam) / lam < 1e-2


def test_export(spectrum128, grid128, tmp_path):
    rows = deficiency_table(spectrum128[:3], grid128)
    export_deficiency_csv(rows, tmp_path / "d.csv")
    lines = (tmp_path / "d.csv").read_text().splitlines()
    assert lines[0] == "n,lambda,nu,d,bipartite,is_tree,generic"
    assert lines[3].split(",")[2:4] == ["2", "1"]
