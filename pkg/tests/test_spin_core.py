import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nvensemble.config import default_constants, load_constants
from nvensemble.spin_core import (
    PM1,
    SX,
    SZ,
    DimensionError,
    DipoleValidityError,
    Drive,
    HyperfineTensor,
    NuclearSpinSite,
    RelaxationParams,
    SpinSpecies,
    SpinSystemSpec,
    StaticField,
    build_rotating_frame_hamiltonian,
    carbon13,
    distance_from_hyperfine,
    embed,
    gradient_broadening,
    larmor_frequency,
    linewidth_from_t2star,
    make_system,
    nv_field_at,
    point_dipole_hyperfine,
)


def test_larmor_scales_linearly_with_field():
    c = carbon13()
    assert larmor_frequency(c, StaticField(0.0)) == 0.0
    assert larmor_frequency(c, StaticField(200.0)) == pytest.approx(220.0)


def test_species_and_field_validation():
    with pytest.raises(ValueError):
        SpinSpecies("x", 0.0)
    with pytest.raises(ValueError):
        SpinSpecies("x", 1.0, 1.0)
    with pytest.raises(ValueError):
        StaticField(-1.0)
    with pytest.raises(ValueError):
        StaticField(1.0, (1.0, 1.0, 0.0))
    with pytest.raises(ValueError):
        HyperfineTensor(math.nan, 0.0)
    with pytest.raises(ValueError):
        RelaxationParams(nuclear_T1=0.0)


def test_site_cannot_sit_on_the_nv():
    with pytest.raises(ValueError):
        NuclearSpinSite((0.0, 0.0, 0.0), carbon13(), HyperfineTensor(1, 1))


def test_dimension_cap():
    with pytest.raises(DimensionError):
        make_system([(1.0, 1.0)] * 11)
    spec = make_system([(1.0, 1.0)] * 3)
    assert spec.dimension == 16
    with pytest.raises(DimensionError):
        SpinSystemSpec(spec.field, spec.sites, max_sites=2)


def test_point_dipole_on_axis_and_magic_angle():
    const = default_constants()
    r = 1.0
    on_axis = point_dipole_hyperfine((0.0, 0.0, r))
    assert on_axis.A_perpendicular == pytest.approx(0.0, abs=1e-12)
    # on-axis coupling 2 C / r^3 with C = gamma_n * dipole field scale
    from nvensemble.spin_core import dipole_field_coefficient

    assert on_axis.A_parallel == pytest.approx(2 * const.gamma_c13_khz_per_gauss * dipole_field_coefficient())
    magic = math.acos(1 / math.sqrt(3))
    hf = point_dipole_hyperfine((r * math.sin(magic), 0.0, r * math.cos(magic)))
    assert hf.A_parallel == pytest.approx(0.0, abs=1e-9)


def test_dipole_field_scale_matches_textbook_value():
    from nvensemble.spin_core import dipole_field_coefficient

    # mu0/(4 pi) * h * gamma_e = 1.8568e-27 T m^3 -> 18.57 G nm^3
    assert dipole_field_coefficient() == pytest.approx(18.57, rel=1e-3)


def test_dipole_floor():
    with pytest.raises(DipoleValidityError):
        point_dipole_hyperfine((0.0, 0.0, 0.2))
    with pytest.raises(DipoleValidityError):
        nv_field_at((0.1, 0.0, 0.0), -1)


@settings(max_examples=200, deadline=None)
@given(r=st.floats(0.45, 5.0), theta=st.floats(0.0, math.pi), phi=st.floats(0.0, 2 * math.pi))
def test_distance_inversion_round_trip(r, theta, phi):
    pos = (r * math.sin(theta) * math.cos(phi), r * math.sin(theta) * math.sin(phi), r * math.cos(theta))
    hf = point_dipole_hyperfine(pos)
    if math.hypot(hf.A_parallel, hf.A_perpendicular) < 1e-9:
        return
    assert distance_from_hyperfine(hf) == pytest.approx(r, rel=1e-9)


def test_distance_axial_geometry_exact_on_axis_only():
    hf = point_dipole_hyperfine((0.0, 0.0, 1.3))
    assert distance_from_hyperfine(hf, geometry="axial") == pytest.approx(1.3, rel=1e-12)
    off = point_dipole_hyperfine((1.0, 0.0, 0.6))
    assert distance_from_hyperfine(off, geometry="axial") != pytest.approx(math.hypot(1.0, 0.6), rel=1e-3)
    with pytest.raises(ValueError):
        distance_from_hyperfine(HyperfineTensor(0.0, 0.0))
    with pytest.raises(ValueError):
        distance_from_hyperfine(hf, geometry="tilted")


def test_nv_field_vanishes_in_ms0_and_gradient_is_radial_derivative():
    pos = np.array([0.3, 0.2, 0.9])
    assert nv_field_at(pos, 0) == (0.0, 0.0)
    bz, grad = nv_field_at(pos, -1)
    h = 1e-4
    u = pos / np.linalg.norm(pos)
    numeric = (nv_field_at(pos + h * u, -1)[0] - nv_field_at(pos - h * u, -1)[0]) / (2 * h)
    assert grad == pytest.approx(numeric, rel=1e-6)
    with pytest.raises(ValueError):
        nv_field_at(pos, 1)


def test_gradient_broadening_and_linewidth():
    assert gradient_broadening(10.0, 2.0, carbon13()) == pytest.approx(22.0)
    assert linewidth_from_t2star(1.0) == pytest.approx(1 / math.pi)
    with pytest.raises(ValueError):
        linewidth_from_t2star(0.0)
    with pytest.raises(ValueError):
        gradient_broadening(-1.0, 1.0, carbon13())


def test_hamiltonian_is_hermitian_and_block_structured():
    spec = make_system([(50.0, 30.0), (-10.0, 5.0)])
    h = build_rotating_frame_hamiltonian(spec)
    assert np.allclose(h, h.conj().T)
    dn = 4
    # without MW the NV populations are conserved: no ms0 <-> ms-1 blocks
    assert np.allclose(h[:dn, dn:], 0)
    # ms=0 block: bare Zeeman only
    wl = larmor_frequency(carbon13(), spec.field)
    zeeman = wl * (embed(SZ, 0, 2) + embed(SZ, 1, 2))
    assert np.allclose(h[:dn, :dn], zeeman)
    hf = 50 * embed(SZ, 0, 2) + 30 * embed(SX, 0, 2) - 10 * embed(SZ, 1, 2) + 5 * embed(SX, 1, 2)
    assert np.allclose(h[dn:, dn:], zeeman + hf)


def test_single_site_ms_minus1_splitting():
    spec = make_system([(50.0, 20.0)])
    h = build_rotating_frame_hamiltonian(spec)
    w = np.linalg.eigvalsh(h[2:, 2:])
    wl = larmor_frequency(carbon13(), spec.field)
    assert w[1] - w[0] == pytest.approx(math.hypot(wl + 50.0, 20.0))


def test_drives():
    spec = make_system([(50.0, 20.0)])
    h = build_rotating_frame_hamiltonian(spec, Drive("MW", 100.0, math.pi / 2, 3.0))
    # MW term 100 * Sy on the NV plus detuning on ms=-1
    assert h[0, 2] == pytest.approx(-50j)
    h_rf = build_rotating_frame_hamiltonian(spec, Drive("RF", 5.0, 0.0, 0.0))
    # rotating frame of the RF: A_perp dropped, nuclear Zeeman removed
    assert np.allclose(h_rf[:2, :2], 5.0 * SX)
    assert np.allclose(h_rf[2:, 2:], 5.0 * SX + 50.0 * SZ)
    with pytest.raises(ValueError):
        Drive("laser", 1.0)
    with pytest.raises(ValueError):
        build_rotating_frame_hamiltonian(spec, [Drive("MW", 1.0), Drive("MW", 2.0)])


def test_projector_convention():
    assert np.allclose(PM1, np.diag([0, 1]))


def test_constants_overrides(tmp_path, monkeypatch):
    c = load_constants(overrides={"B0_gauss": 300})
    assert c.B0_gauss == 300.0 and isinstance(c.B0_gauss, float)
    f = tmp_path / "c.json"
    f.write_text('{"constants": {"contrast": 0.2}}')
    monkeypatch.setenv("NVENSEMBLE_CONFIG", str(f))
    assert load_constants().contrast == 0.2
    with pytest.raises(KeyError):
        load_constants(overrides={"nope": 1})


def test_50khz_coupling_distance_and_gradient_scale():
    # A_par ~ A_perp ~ 50 kHz puts the nucleus at about 0.72 nm (point-dipole, within 15%)
    r = distance_from_hyperfine(HyperfineTensor(50.0, 50.0))
    assert abs(r / 0.72 - 1) < 0.15
    # at the polar angle where A_par = A_perp (3 cos^2 t - 1 = 3 sin t cos t), 0.72 nm away,
    # the gradient is within an order of magnitude of the quoted 33 G/nm
    from scipy.optimize import brentq

    t = brentq(lambda a: 3 * math.cos(a) ** 2 - 1 - 3 * math.sin(a) * math.cos(a), 0.0, 0.9)
    _, grad = nv_field_at((0.72 * math.sin(t), 0.0, 0.72 * math.cos(t)), -1)
    assert 33 / 10 < abs(grad) < 33 * 10
    # on the NV axis the bare estimate is larger than that band
    assert abs(nv_field_at((0.0, 0.0, 0.72), -1)[1]) > 33 * 10
