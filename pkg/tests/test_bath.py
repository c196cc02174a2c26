import itertools

import numpy as np
import pytest
from scipy import constants

from nvcce.bath import (
    CRYSTAL_TO_NV,
    DIAMOND_LATTICE_CONSTANT,
    HyperfineTable,
    LatticeConfig,
    Provenance,
    SurfaceConfig,
    assign_hyperfine,
    bath_from_json,
    bath_to_json,
    diamond_sites,
    dipolar_coupling,
    generate_bulk_bath,
    generate_surface_bath,
    nitrogen_site,
    point_dipole_hyperfine,
    read_hyperfine_table,
    truncate_bath,
    write_hyperfine_table,
)
from nvcce.errors import ConfigurationError
from nvcce.spin_core import C13, F19, GYRO_ELECTRON, H1, HyperfineTensor

A = DIAMOND_LATTICE_CONSTANT


def brute_force_sites(radius):
    """Conventional cubic cell + 8-atom basis, enumerated cell by cell."""
    basis = np.array(
        [[0, 0, 0], [0, 0.5, 0.5], [0.5, 0, 0.5], [0.5, 0.5, 0], [0.25, 0.25, 0.25], [0.25, 0.75, 0.75], [0.75, 0.25, 0.75], [0.75, 0.75, 0.25]]
    )
    n = int(radius / A) + 2
    out = []
    for cell in itertools.product(range(-n, n + 1), repeat=3):
        for b in basis:
            p = (np.array(cell) + b) * A
            if np.linalg.norm(p) <= radius:
                out.append(p)
    return np.array(out)


def test_nv_frame_is_rotation():
    assert np.allclose(CRYSTAL_TO_NV @ CRYSTAL_TO_NV.T, np.eye(3))
    assert np.isclose(np.linalg.det(CRYSTAL_TO_NV), 1.0)
    assert np.allclose(nitrogen_site(), [0, 0, A * np.sqrt(3) / 4])


@pytest.mark.parametrize("radius", [3.0, 6.0, 9.5])
def test_site_enumeration_matches_brute_force(radius):
    ours = diamond_sites(A, radius)
    ref = brute_force_sites(radius)
    assert len(ours) == len(ref)
    r1 = np.sort(np.linalg.norm(ours, axis=1))
    r2 = np.sort(np.linalg.norm(ref, axis=1))
    assert np.allclose(r1, r2)


def test_full_abundance_small_radius():
    ref = brute_force_sites(3.0)
    ref = ref[np.linalg.norm(ref, axis=1) > 0.5]
    ref = ref[np.linalg.norm(ref - A / 4, axis=1) > 1e-6]  # nitrogen site
    bath = generate_bulk_bath(LatticeConfig(abundance=1.0, r_bath=3.0, seed=1))
    assert len(bath) == len(ref) == 27
    shells = np.round(sorted(s.r for s in bath), 3)
    assert list(np.unique(shells)) == [1.545, 2.522, 2.958]
    bath_with_n = generate_bulk_bath(LatticeConfig(abundance=1.0, r_bath=3.0, exclude_nitrogen_site=False))
    assert len(bath_with_n) == 28


def test_zero_abundance_empty():
    assert generate_bulk_bath(LatticeConfig(abundance=0.0, r_bath=20)) == []


def test_config_validation():
    with pytest.raises(ConfigurationError):
        LatticeConfig(abundance=1.5)
    with pytest.raises(ConfigurationError):
        LatticeConfig(r_bath=0)
    with pytest.raises(ConfigurationError):
        SurfaceConfig(mix_ratio=-0.1)


def test_mean_count_over_seeds():
    r = 30.0
    n_sites = len(diamond_sites(A, r)) - 2  # vacancy and nitrogen sites removed
    p = 0.0107
    counts = np.array([len(generate_bulk_bath(LatticeConfig(abundance=p, r_bath=r, seed=s))) for s in range(1000)])
    expected = n_sites * p
    sigma_mean = np.sqrt(n_sites * p * (1 - p) / len(counts))
    assert abs(counts.mean() - expected) < 3 * sigma_mean
    # analytic continuum estimate from the site density 8/a^3
    assert expected == pytest.approx(p * 8 / A**3 * 4 / 3 * np.pi * r**3, rel=0.02)


def test_bulk_bath_deterministic_and_sorted():
    cfg = LatticeConfig(r_bath=25, seed=42)
    a, b = generate_bulk_bath(cfg), generate_bulk_bath(cfg)
    assert bath_to_json(a) == bath_to_json(b)
    azz = [abs(s.azz) for s in a]
    assert azz == sorted(azz, reverse=True)
    assert all(s.r > 0.5 for s in a)
    assert bath_to_json(generate_bulk_bath(LatticeConfig(r_bath=25, seed=43))) != bath_to_json(a)


def test_surface_fluorine_only():
    bath = generate_surface_bath(SurfaceConfig(termination="fluorine", mix_ratio=0.1), LatticeConfig(r_bath=30))
    assert bath and all(s.species is F19 for s in bath)


def test_surface_mixed_fraction():
    cfg = SurfaceConfig(termination="mixed", mix_ratio=0.7, depth=5.0, lateral_extent=200)
    bath = generate_surface_bath(cfg, LatticeConfig(r_bath=150, seed=7))
    n = len(bath)
    assert n >= 10_000
    frac = np.mean([s.species is F19 for s in bath])
    assert abs(frac - 0.7) < 3 * np.sqrt(0.7 * 0.3 / n)
    assert {s.species for s in bath} == {F19, H1}


def test_surface_depth_and_density():
    depth = 12.0
    bath = generate_surface_bath(SurfaceConfig(termination="hydrogen", depth=depth), LatticeConfig(r_bath=30))
    assert min(s.r for s in bath) >= depth - 1e-9
    # number of sites in the disk ~ (2/a^2) * pi (r^2 - d^2)
    assert len(bath) == pytest.approx(2 / A**2 * np.pi * (30**2 - depth**2), rel=0.05)
    assert 300 <= len(bath) <= 400


def test_point_dipole_prefactor_against_si():
    # hbar * gamma_e * gamma_n * mu0/(4pi) / r^3 in rad/s, converted to MHz.
    g_e = GYRO_ELECTRON * 1e10 * 2 * np.pi  # rad/s/T
    g_n = C13.gyro * 1e10 * 2 * np.pi
    r = 10e-10
    coupling_hz = constants.mu_0 / (4 * np.pi) * constants.hbar * g_e * g_n / r**3 / (2 * np.pi)
    t = point_dipole_hyperfine((0, 0, 10.0), GYRO_ELECTRON, C13.gyro)
    assert t.azz == pytest.approx(2 * coupling_hz / 1e6, rel=1e-9)
    assert t.azz == pytest.approx(0.0398, abs=2e-4)


def test_point_dipole_symmetries():
    t = point_dipole_hyperfine((0, 0, 4.0)).a
    assert np.allclose(t, np.diag(np.diag(t)))
    assert np.isclose(t[2, 2], -2 * t[0, 0]) and np.isclose(t[0, 0], t[1, 1])
    t2 = point_dipole_hyperfine((0, 0, 8.0)).a
    assert np.allclose(t2, t / 8)
    tx = point_dipole_hyperfine((5.0, 0, 0)).a
    ty = point_dipole_hyperfine((0, 5.0, 0)).a
    rot = np.array([[0, -1, 0], [1, 0, 0], [0, 0, 1.0]])
    assert np.allclose(rot @ tx @ rot.T, ty)
    for p in [(1.0, 2.0, -3.0), (7.0, 0.1, 0.2)]:
        a = point_dipole_hyperfine(p).a
        assert np.abs(a - a.T).max() <= 1e-9 * np.abs(a).max()
        assert abs(np.trace(a)) <= 1e-9 * np.abs(a).max()
    with pytest.raises(ConfigurationError):
        point_dipole_hyperfine((0, 0, 0))


def test_dipolar_coupling_forms():
    j = dipolar_coupling((0, 0, 0), (0, 0, 2.0), H1.gyro, H1.gyro)
    assert j[2, 2] < 0 and np.isclose(abs(j[2, 2]), 2 * abs(j[0, 0]))
    jf = dipolar_coupling((0, 0, 0), (0, 0, 2.0), F19.gyro, F19.gyro)
    assert np.allclose(j, jf * (H1.gyro / F19.gyro) ** 2)
    p, q = (0.3, -1.0, 2.0), (2.5, 0.4, -0.7)
    assert np.allclose(dipolar_coupling(p, q, H1.gyro, F19.gyro), dipolar_coupling(q, p, F19.gyro, H1.gyro))
    with pytest.raises(ConfigurationError):
        dipolar_coupling(p, p, 1, 1)


def test_assign_hyperfine_and_table_io(tmp_path):
    bath = generate_bulk_bath(LatticeConfig(r_bath=15, seed=3, abundance=0.05))
    assert all(s.provenance is Provenance.POINT_DIPOLE for s in assign_hyperfine(bath, None))
    empty = HyperfineTable(np.zeros((0, 3)), ())
    assert all(s.provenance is Provenance.POINT_DIPOLE for s in assign_hyperfine(bath, empty))

    target = bath[-1]
    tensor = HyperfineTensor(np.diag([0.1, 0.1, 0.6]))
    table = HyperfineTable(np.array([target.position]) + 0.01, (tensor,), match_tolerance=0.05)
    path = tmp_path / "hf.txt"
    write_hyperfine_table(table, path)
    text = path.read_text()
    path.write_text("# comment\n\n" + text)
    table2 = read_hyperfine_table(path, match_tolerance=0.05)
    out = assign_hyperfine(bath, table2)
    tab = [s for s in out if s.provenance is Provenance.TABULATED]
    assert len(tab) == 1 and tab[0].azz == 0.6
    # re-sorted so the tabulated coupling takes its place by |A_zz|
    azz = [abs(s.azz) for s in out]
    assert azz == sorted(azz, reverse=True)


def test_table_rejects_duplicates_and_ambiguous():
    t = HyperfineTensor(np.eye(3))
    with pytest.raises(ConfigurationError):
        HyperfineTable(np.array([[0, 0, 1.0], [0, 0, 1.05]]), (t, t), match_tolerance=0.1)
    bath = generate_bulk_bath(LatticeConfig(abundance=1.0, r_bath=3.0))
    p = np.array(bath[0].position)
    table = HyperfineTable(np.array([p + [0.3, 0, 0], p - [0.3, 0, 0]]), (t, t), match_tolerance=0.35)
    with pytest.raises(ConfigurationError, match="several"):
        assign_hyperfine(bath, table)


def test_truncate_and_json_roundtrip():
    bath = generate_bulk_bath(LatticeConfig(r_bath=20, seed=5, abundance=0.05))
    cut = truncate_bath(bath, 0.05)
    assert all(abs(s.azz) < 0.05 for s in cut)
    back = bath_from_json(bath_to_json(bath))
    assert bath_to_json(back) == bath_to_json(bath)
