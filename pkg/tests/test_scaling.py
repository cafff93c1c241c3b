import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import max_rel_err, rotation_matrix

from ropekit.rotary import FrequencyBasis, apply_rotary, default_basis
from ropekit.scaling import (
    AlphaProfile,
    LogBasis,
    alpha_codellama,
    alpha_pi,
    alpha_yarn,
    basis_from_log,
    chain_step,
    log_basis,
    scale_basis,
    scale_positions,
)


# ---------------------------------------------------------------------------
# profiles


def test_alpha_pi_values():
    assert np.array_equal(alpha_pi(1.0, 8), np.ones(4))
    assert np.array_equal(alpha_pi(4.0, 4), [0.25, 0.25])
    assert np.array_equal(alpha_pi(16.0, 128), np.full(64, 0.0625))
    with pytest.raises(ValueError):
        alpha_pi(0.5, 4)


def test_alpha_yarn_values():
    assert np.array_equal(alpha_yarn(1.0, 8), np.ones(4))
    assert np.allclose(alpha_yarn(4.0, 4), [1.0, 0.25], rtol=1e-14)
    assert np.allclose(
        alpha_yarn(2.0, 8), [1.0, 2 ** (-1 / 3), 2 ** (-2 / 3), 0.5], rtol=1e-14
    )
    with pytest.raises(ValueError):
        alpha_yarn(2.0, 2)
    with pytest.raises(ValueError):
        alpha_yarn(0.9, 8)


def test_alpha_yarn_endpoints():
    # 0-based indexing puts the profile exactly on [1, 1/t]
    for d in (4, 8, 64, 128):
        a = alpha_yarn(7.0, d)
        assert a[0] == 1.0
        assert abs(a[-1] - 1.0 / 7.0) < 1e-14


@settings(max_examples=40, deadline=None)
@given(st.floats(1.0, 64.0), st.sampled_from([4, 8, 64]))
def test_alpha_yarn_monotone(t, d):
    a = alpha_yarn(t, d)
    assert np.all(np.diff(a) <= 1e-15)
    # non-increasing in t for i >= 1
    a2 = alpha_yarn(t + 1.0, d)
    assert np.all(a2[1:] <= a[1:] + 1e-15)


def test_alpha_codellama_values():
    assert alpha_codellama(8)[0] == 1.0
    assert np.allclose(alpha_codellama(4), [1.0, 0.1], rtol=1e-14)


def test_alpha_codellama_equals_retuned_base():
    for d in (4, 8, 64, 128):
        scaled = scale_basis(default_basis(d), alpha_codellama(d))
        retuned = default_basis(d, base=1e6)
        assert max_rel_err(scaled.theta, retuned.theta) < 1e-12


def test_profile_wrapper():
    assert np.array_equal(AlphaProfile("pi", 8)(1.0), np.ones(4))
    assert np.array_equal(AlphaProfile("yarn", 8)(1.0), np.ones(4))
    cl = AlphaProfile("codellama", 8)
    assert np.array_equal(cl(1.0), cl(16.0))  # t-independent
    assert not cl.t_dependent
    assert np.array_equal(AlphaProfile("identity", 8)(5.0), np.ones(4))
    with pytest.raises(ValueError):
        AlphaProfile("ntk", 8)


# ---------------------------------------------------------------------------
# basis and index scaling


def test_scale_basis_identity_and_product():
    b = default_basis(4)
    assert np.array_equal(scale_basis(b, np.ones(2)).theta, b.theta)
    scaled = scale_basis(FrequencyBasis([1.0, 0.01], 4), np.array([1.0, 0.25]))
    assert np.allclose(scaled.theta, [1.0, 0.0025], rtol=1e-15)


def test_scale_basis_log_is_additive():
    b = default_basis(8)
    alpha = alpha_yarn(3.0, 8)
    scaled = scale_basis(b, alpha)
    assert np.allclose(np.log(scaled.theta), np.log(b.theta) + np.log(alpha), rtol=1e-12)


def test_scale_basis_rejects_bad_alpha():
    b = default_basis(4)
    with pytest.raises(ValueError):
        scale_basis(b, np.array([1.0, 0.0]))
    with pytest.raises(ValueError):
        scale_basis(b, np.ones(3))


def test_scale_positions():
    pos = np.arange(1.0, 9.0)
    assert np.array_equal(scale_positions(pos, 1.0), pos)
    assert np.array_equal(scale_positions(pos, 4.0), pos / 4.0)


def test_scale_positions_equals_scaled_basis_rotation():
    # f(x, m/t, theta) == f(x, m, theta/t), checked against the dense oracle
    r = np.random.default_rng(0)
    d, t, m = 8, 4.0, 13.0
    basis = default_basis(d)
    x = r.normal(size=d)
    a = apply_rotary(x, float(scale_positions([m], t)[0]), basis)
    shrunk = scale_basis(basis, alpha_pi(t, d))
    b = apply_rotary(x, m, shrunk)
    oracle = rotation_matrix(shrunk.theta, m) @ x
    assert np.max(np.abs(a - b)) < 1e-12
    assert np.max(np.abs(a - oracle)) < 1e-12


# ---------------------------------------------------------------------------
# progressive chain


def test_chain_step_identity():
    z = log_basis(default_basis(8))
    alpha = alpha_yarn(2.0, 8)
    out = chain_step(z, alpha, alpha)
    assert np.array_equal(out.z, z.z)


def test_chain_telescopes_to_direct_form():
    d = 8
    z1 = log_basis(default_basis(d))
    a1 = np.ones(d // 2)
    a2 = alpha_yarn(2.0, d)
    a4 = alpha_yarn(4.0, d)
    chained = chain_step(chain_step(z1, a1, a2), a2, a4)
    direct = LogBasis(z1.z + np.log(a4))
    assert max_rel_err(chained.z, direct.z, floor=1e-12) < 1e-12


def test_chain_pi_shifts_by_log_t():
    d = 6
    z1 = log_basis(default_basis(d))
    out = chain_step(z1, np.ones(d // 2), alpha_pi(3.0, d))
    assert np.allclose(out.z, z1.z - np.log(3.0), rtol=1e-14)


def test_chain_rejects_nonpositive():
    z = log_basis(default_basis(4))
    with pytest.raises(ValueError):
        chain_step(z, np.array([1.0, -1.0]), np.ones(2))


def test_log_basis_roundtrip():
    b = default_basis(16)
    assert max_rel_err(basis_from_log(log_basis(b), 16).theta, b.theta) < 1e-15
