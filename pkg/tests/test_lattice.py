import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nvensemble import lattice
from nvensemble.config import default_constants
from nvensemble.lattice import GroupLabel, GroupProbabilities, LayerProfile
from nvensemble.spin_core import point_dipole_hyperfine


def test_group_labels():
    assert [g.count for g in GroupLabel] == [0, 1, 2, 3]
    assert GroupLabel.from_count(2) is GroupLabel.C
    with pytest.raises(ValueError):
        GroupLabel.from_count(4)


def test_profile_json_round_trip_and_defaults():
    p = LayerProfile.from_constants()
    assert (p.d_over_Z, p.lambda_over_Z) == (0.39, 0.2)
    assert p.nv_depth == pytest.approx(p.z0 + p.d / 2)
    assert LayerProfile.from_json(p.to_json()) == p
    assert '"units"' in p.to_json()
    with pytest.raises(ValueError):
        LayerProfile.from_constants(d_over_Z=-0.1)


def test_concentration_profile_shape():
    p = LayerProfile.from_constants(lambda_over_Z=0.01)
    mid = p.z0 + p.d / 2
    assert lattice.concentration_at(p, mid) == pytest.approx(p.c_peak, rel=1e-6)
    assert lattice.concentration_at(p, p.z0 - 5.0) == pytest.approx(p.c_baseline, rel=1e-6)
    z = np.linspace(p.z0 - 3, p.z0 + p.d + 3, 200)
    c = lattice.concentration_at(p, z)
    assert np.all((c >= p.c_baseline - 1e-12) & (c <= p.c_peak + 1e-12))


def test_group_probabilities_validation_and_csv():
    g = GroupProbabilities.from_percent(72.75, 13.065, 9.075, 5.11)
    assert GroupProbabilities.from_csv(g.to_csv()) == g
    with pytest.raises(ValueError):
        GroupProbabilities.from_array([0.5, 0.5, 0.5, 0.0])


@settings(max_examples=50, deadline=None)
@given(st.floats(0.0, 1.0))
def test_binomial_first_shell(c):
    p = lattice.first_shell_group_probabilities(c).as_array()
    expected = [math.comb(3, k) * c**k * (1 - c) ** (3 - k) for k in range(4)]
    assert np.allclose(p, expected)


def test_depth_average_of_uniform_layer_is_binomial():
    p = LayerProfile.from_constants(c_peak=0.3, c_baseline=0.3)
    avg = lattice.depth_averaged_group_probabilities(p, lattice.uniform_depth_distribution(0.0, 2.0))
    assert np.allclose(avg.as_array(), lattice.first_shell_group_probabilities(0.3).as_array(), atol=1e-9)


def test_single_c_fit_recovers_binomial_data():
    obs = lattice.first_shell_group_probabilities(0.12)
    fit = lattice.fit_group_model(obs, "single-c")
    assert fit.parameters["c"] == pytest.approx(0.12, abs=1e-6)
    assert fit.total_residual < 1e-12


def test_group_fits_for_every_table_column():
    for values in lattice.REFERENCE_GROUP_PERCENT.values():
        obs = GroupProbabilities.from_percent(*values)
        for model in ("single-c", "two-region", "profile"):
            fit = lattice.fit_group_model(obs, model)
            assert fit.total_residual >= 0
            assert np.isclose(fit.fitted.as_array().sum(), 1.0)
    with pytest.raises(ValueError):
        lattice.fit_group_model(obs, "quadratic")


def test_lattice_geometry():
    const = default_constants()
    t = lattice.site_table(2.0, const)
    assert t.first_shell.sum() == 3
    shell = t.positions[t.first_shell]
    assert np.allclose(np.linalg.norm(shell, axis=1), const.lattice_constant_nm * math.sqrt(3) / 4)
    # NV axis is z: the nitrogen neighbour was removed, the three carbons sit symmetrically below
    assert np.allclose(shell[:, 2], shell[0, 2])
    assert np.all(t.a_par[t.first_shell] == 130e3)
    # nearest neighbour spacing of diamond
    d = np.linalg.norm(t.positions[:, None, :] - t.positions[None, :, :], axis=2)
    d[d == 0] = np.inf
    assert d.min() == pytest.approx(const.lattice_constant_nm * math.sqrt(3) / 4, rel=1e-9)


def test_site_couplings_match_point_dipole_outside_the_floor():
    t = lattice.site_table(1.5)
    far = np.flatnonzero(np.linalg.norm(t.positions, axis=1) > 0.5)[:20]
    for i in far:
        hf = point_dipole_hyperfine(t.positions[i])
        assert t.a_par[i] == pytest.approx(hf.A_parallel)
        assert t.a_perp[i] == pytest.approx(hf.A_perpendicular)


def test_bath_sampling_reproducible_and_conditioned():
    p = LayerProfile.from_constants()
    a = lattice.sample_bath_configuration(p, seed=5, radius=1.5)
    b = lattice.sample_bath_configuration(p, seed=5, radius=1.5)
    assert a == b
    for g in GroupLabel:
        cfg = lattice.sample_bath_configuration(p, condition=g, seed=3, radius=1.5)
        assert cfg.group is g
        assert all(not s.first_shell for s in cfg.bath_sites())
    empty = LayerProfile.from_constants(c_peak=0.0, c_baseline=0.0)
    with pytest.raises(lattice.ConditionUnreachable):
        lattice.sample_bath_configuration(empty, condition="D", seed=0, radius=1.0,
                                          const=default_constants().replace(conditioned_retry_cap=1000))


def test_occupation_fraction_matches_concentration():
    p = LayerProfile.from_constants(c_peak=0.25, c_baseline=0.25)
    n_sites = lattice.site_table(2.0).n
    occ = [len(lattice.sample_bath_configuration(p, seed=s, radius=2.0).sites) for s in range(20)]
    assert np.mean(occ) / n_sites == pytest.approx(0.25, rel=0.02)


def test_configuration_linewidth_is_second_moment():
    sites = lattice.sample_bath_configuration(LayerProfile.from_constants(), seed=1, radius=1.5).bath_sites()
    expected = math.sqrt(sum((s.hyperfine.A_parallel * 1e-3) ** 2 for s in sites)) / 2
    assert lattice.configuration_linewidth(sites) == pytest.approx(expected)
    assert lattice.configuration_linewidth(sites, 0.5) == pytest.approx(expected + 0.5)


def test_simulate_linewidths_reproducible_and_ordered():
    p = LayerProfile.from_constants()
    a = lattice.simulate_linewidths(p, 2000, seed=4)
    b = lattice.simulate_linewidths(p, 2000, seed=4)
    assert a == b
    assert set(a) == set(GroupLabel)
    assert all(e.delta_nu > default_constants().intrinsic_linewidth_mhz for e in a.values())


def test_reweighted_group_statistics_match_rejection_sampling():
    """Importance weights over depth equal the distribution of explicitly conditioned draws."""
    p = LayerProfile.from_constants()
    window = (p.nv_depth, p.nv_depth)  # fixed depth: weights are constant, so groups share the bath law
    est = lattice.simulate_linewidths(p, 4000, seed=2, depth_window=window, radius=1.5)
    direct = [lattice.configuration_linewidth(lattice.sample_bath_configuration(p, "B", seed=s, radius=1.5),
                                              default_constants().intrinsic_linewidth_mhz) for s in range(400)]
    assert est[GroupLabel.B].delta_nu == pytest.approx(np.mean(direct), rel=0.03)


def test_layer_fit_input_validation():
    est = lattice.simulate_linewidths(LayerProfile.from_constants(), 100, seed=0)
    with pytest.raises(ValueError):
        lattice.fit_layer_profile([est[GroupLabel.A]])
    zero = [lattice.LinewidthEstimate(g, 0.0, 0.0, 1) for g in ("A", "B")]
    with pytest.raises(ValueError):
        lattice.fit_layer_profile(zero)
