import math

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from gmce.gfunc import GSpec, g_eval, g_grads, g_inverse, g_log, identity_theta, mu

ONE = np.array([1.0])


@pytest.mark.parametrize("theta, expected", [([1.0], 1.0), ([0.5], 0.5), ([-3.0], 1e-6)])
def test_mu_linear(theta, expected):
    assert mu(GSpec(theta), ONE) == pytest.approx(expected, rel=1e-15)


def test_mu_log_link_positive():
    spec = GSpec([-40.0], link="log-link")
    assert spec.link == "log"
    assert 0 < mu(spec, ONE) == pytest.approx(math.exp(-40.0))


def test_mu_dimension_mismatch():
    with pytest.raises(ValueError, match="dimension"):
        mu(GSpec([1.0, 2.0]), ONE)


def test_unknown_link_and_floor():
    with pytest.raises(ValueError):
        GSpec([1.0], link="probit")
    with pytest.raises(ValueError):
        GSpec([1.0], mu_floor=0.0)


def spec_with(m, nu=0.0):
    return GSpec([m], nu={0: nu})


def test_g_eval_examples():
    assert g_eval(spec_with(1.0), 0.37, 0, ONE) == pytest.approx(0.37, rel=1e-15)
    assert g_eval(spec_with(2.0), 3.0, 0, ONE) == pytest.approx(9.0, rel=1e-15)
    assert g_eval(spec_with(1.0, math.log(2)), 5.0, 0, ONE) == pytest.approx(10.0, rel=1e-15)


def test_g_inverse_examples():
    assert g_inverse(spec_with(2.0), 9.0, 0, ONE) == pytest.approx(3.0, rel=1e-15)
    assert g_inverse(spec_with(1.0), 0.123, 0, ONE) == pytest.approx(0.123, rel=1e-15)


def test_g_log_examples():
    assert g_log(spec_with(1.0), math.e, 0, ONE) == pytest.approx(1.0, rel=1e-15)
    assert g_log(spec_with(0.5), math.e**2, 0, ONE) == pytest.approx(1.0, rel=1e-15)


def test_g_log_no_underflow():
    # exp-then-log would give -inf here
    assert g_log(spec_with(3.0), 1e-300, 0, ONE) == pytest.approx(3.0 * math.log(1e-300))


@pytest.mark.parametrize("fn", [g_eval, g_log, g_inverse])
@pytest.mark.parametrize("bad", [0.0, -1.0])
def test_domain_errors(fn, bad):
    with pytest.raises(ValueError):
        fn(spec_with(1.0), bad, 0, ONE)


def test_dlog_g_dp_finite_difference(rng):
    for _ in range(20):
        m, p = rng.uniform(0.1, 3.0), rng.uniform(0.05, 5.0)
        spec, h = spec_with(m, rng.normal()), 1e-6 * p
        fd = (g_log(spec, p + h, 0, ONE) - g_log(spec, p - h, 0, ONE)) / (2 * h)
        assert fd == pytest.approx(m / p, rel=1e-7)


def test_round_trip_random(rng):
    for _ in range(100):
        p, m, nu = rng.uniform(1e-3, 1e3), rng.uniform(0.05, 4.0), rng.normal()
        spec = spec_with(m, nu)
        assert g_inverse(spec, g_eval(spec, p, 0, ONE), 0, ONE) == pytest.approx(p, rel=1e-12)


def test_grads_examples():
    d_log, _ = g_grads(GSpec([1.0]), math.e, 0, ONE)
    np.testing.assert_allclose(d_log, [1.0])
    phi = np.array([0.3, -1.2])
    d_log, _ = g_grads(GSpec([0.0, 0.0], link="log"), 2.5, 0, phi)
    np.testing.assert_allclose(d_log, phi * math.log(2.5), rtol=1e-15)


def test_grads_clamped_zero():
    d_log, d_inv = g_grads(GSpec([-2.0]), 0.4, 0, ONE)
    assert d_log.tolist() == [0.0] and d_inv.tolist() == [0.0]


def test_grads_finite_differences(rng):
    worst = 0.0
    for i in range(50):
        link = "linear" if i % 2 else "log"
        phi = rng.uniform(0.2, 1.5, size=(3, 2))
        theta = rng.uniform(0.3, 1.0, size=2) if link == "linear" else rng.normal(scale=0.5, size=2)
        nu = {s: float(rng.normal()) for s in range(3)}
        s, p = int(rng.integers(3)), float(rng.uniform(0.05, 3.0))
        d_log, d_inv = g_grads(GSpec(theta, link=link, nu=nu), p, s, phi)
        for k in range(2):
            e = np.zeros(2)
            e[k] = 1e-6
            up, dn = GSpec(theta + e, link=link, nu=nu), GSpec(theta - e, link=link, nu=nu)
            fd_log = (g_log(up, p, s, phi) - g_log(dn, p, s, phi)) / 2e-6
            fd_inv = (np.log(g_inverse(up, p, s, phi)) - np.log(g_inverse(dn, p, s, phi))) / 2e-6
            for a, n in ((d_log[k], fd_log), (d_inv[k], fd_inv)):
                worst = max(worst, abs(a - n) / max(1.0, abs(a), abs(n)))
    assert worst < 1e-6


positive = st.floats(1e-8, 1e8)
mus = st.floats(0.01, 5.0)
nus = st.floats(-5.0, 5.0)


@settings(max_examples=200)
@given(p=positive, m=mus, nu=nus)
def test_inverse_round_trip_property(p, m, nu):
    spec = spec_with(m, nu)
    h = g_eval(spec, p, 0, ONE)
    assume(0 < h < np.inf)
    assert g_inverse(spec, h, 0, ONE) == pytest.approx(p, rel=1e-12)


@settings(max_examples=200)
@given(p1=st.floats(1e-4, 1e4), p2=st.floats(1e-4, 1e4), m=mus, nu=nus)
def test_multiplicative_property(p1, p2, m, nu):
    spec = spec_with(m, nu)
    # exp(nu) factor once: G(p1 p2) e^nu = G(p1) G(p2)
    lhs = g_eval(spec, p1 * p2, 0, ONE) * math.exp(nu)
    rhs = g_eval(spec, p1, 0, ONE) * g_eval(spec, p2, 0, ONE)
    assert lhs == pytest.approx(rhs, rel=1e-12)


@settings(max_examples=200)
@given(p1=positive, p2=positive, m=mus)
def test_monotone_property(p1, p2, m):
    assume(p1 < p2 * (1 - 1e-9))
    spec = spec_with(m)
    assert g_log(spec, p1, 0, ONE) < g_log(spec, p2, 0, ONE)


@settings(max_examples=100)
@given(p=st.floats(1e-6, 1e6), rows=st.integers(1, 6), seed=st.integers(0, 1000))
def test_identity_specialization(p, rows, seed):
    phi = np.column_stack([np.ones(rows), np.random.default_rng(seed).uniform(0, 1, rows)])
    for link in ("linear", "log"):
        spec = GSpec(identity_theta(phi, link), link=link)
        np.testing.assert_allclose(spec.mu_values(phi), 1.0, rtol=1e-12)
        assert g_eval(spec, p, 0, phi) == pytest.approx(p, rel=1e-11)


def test_serialization_round_trip():
    spec = GSpec([0.2, -1.0], link="log", mu_floor=1e-4, nu_default=0.5, nu={2: 1.5})
    back = GSpec.from_dict(spec.to_dict())
    assert back.to_dict() == spec.to_dict()
    assert back.nu_of(2) == 1.5 and back.nu_of(0) == 0.5
    assert set(spec.to_dict()) >= {"link", "theta_mu", "nu_default", "mu_floor"}
