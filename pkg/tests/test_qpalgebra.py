import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qpreduce.errors import BasisError, DimError
from qpreduce.qpalgebra import (FrequencyBasis, PolyEvaluator, QPMatrix, QPSeries, QPStatePoly, compose,
                                fit_series, poly_apply, poly_mul, poly_substitute, series_ddt, series_mul)

from oracles import BASIS, polys, series, symmetric

OTHER = FrequencyBasis((1.0, math.sqrt(3.0)), ("a", "c"))

# ----------------------------------------------------------------------------
# frequency basis


def test_commensurate_parametric_frequencies_are_rejected():
    with pytest.raises(BasisError, match="commensurate"):
        FrequencyBasis((1.0, 2.0), ("a", "b"))
    with pytest.raises(BasisError):
        FrequencyBasis((3.0, 7.0), ("a", "b"))


def test_incommensurate_and_extended_bases_are_accepted():
    b = FrequencyBasis((2 * math.pi, 7.0), ("w1", "w2"))
    ext = b.extend(["wf"], [7.0])
    assert ext.k == 3 and b.is_prefix_of(ext)


@pytest.mark.parametrize("omegas,labels", [((1.0, 1.5), ("a", "a")), ((-1.0,), ("a",)), ((0.0,), ("a",))])
def test_invalid_bases(omegas, labels):
    with pytest.raises(BasisError):
        FrequencyBasis(omegas, labels)


# ----------------------------------------------------------------------------
# series_mul


def test_unit_series_is_multiplicative_identity():
    s = QPSeries(BASIS, {(1, 0): 0.3 - 0.2j, (0, -2): 1.5})
    assert (QPSeries.constant(BASIS, 1.0) * s).coeffs == s.coeffs


def test_cos_squared_product_to_sum():
    c = QPSeries.cos(BASIS, 0)
    assert (c * c).coeffs == pytest.approx({(0, 0): 0.5, (2, 0): 0.25, (-2, 0): 0.25})


def test_product_of_random_five_term_series_pointwise():
    rng = np.random.default_rng(7)
    t = np.linspace(0, 20, 100)
    for _ in range(20):
        a, b = (QPSeries(BASIS, {tuple(rng.integers(-3, 4, 2)): complex(*rng.normal(size=2)) for _ in range(5)},
                         trunc_order=6) for _ in range(2))
        assert np.abs((a * b)(t) - a(t) * b(t)).max() <= 1e-10


def test_series_on_different_bases_do_not_mix():
    with pytest.raises(BasisError):
        QPSeries.cos(BASIS, 0) * QPSeries.cos(OTHER, 0)


@settings(max_examples=200, deadline=None)
@given(series(), series(), st.integers(0, 3))
def test_truncated_product_restricts_exact_product(a, b, P):
    exact = series_mul(a, b, trunc_order=6).coeffs
    trunc = series_mul(a, b, trunc_order=P).coeffs
    expected = {p: c for p, c in exact.items() if max(abs(x) for x in p) <= P}
    assert trunc.keys() == expected.keys()
    for p in trunc:
        assert trunc[p] == pytest.approx(expected[p], abs=1e-14)


@settings(max_examples=200, deadline=None)
@given(series(real=True), series(real=True))
def test_real_series_closure(a, b):
    for s in (a * b, series_ddt(a), a + b, a * 2.5):
        assert s.real_flag
        assert symmetric(s.idx, s.val, 0)


# ----------------------------------------------------------------------------
# series_ddt


def test_derivative_of_constant_vanishes():
    assert series_ddt(QPSeries.constant(BASIS, 3.0)).is_zero()


def test_derivative_of_cosine():
    d = series_ddt(QPSeries.cos(BASIS, 0, harmonic=2)).coeffs
    w = 2.0
    assert d[(2, 0)] == pytest.approx(1j * w / 2)
    assert d[(-2, 0)] == pytest.approx(-1j * w / 2)


@settings(max_examples=200, deadline=None)
@given(series(), st.floats(0.0, 30.0))
def test_derivative_matches_central_difference(s, t):
    h = 1e-5
    fd = (s(t + h) - s(t - h)) / (2 * h)
    exact = series_ddt(s)(t)
    scale = max(1.0, float(np.sum(np.abs(series_ddt(s).val))))
    assert abs(fd - exact) <= 1e-6 * scale


# ----------------------------------------------------------------------------
# poly_apply


def test_zero_polynomial_evaluates_to_zero():
    assert poly_apply(QPStatePoly.zero(BASIS, 3), 1.3, [1, 2, 3]) == 0


def test_monomial_arithmetic():
    p = QPStatePoly.monomial(BASIS, (2, 1))
    assert poly_apply(p, 0.77, [2, 3]) == pytest.approx(12)


def test_wrong_state_length():
    with pytest.raises(DimError):
        poly_apply(QPStatePoly.monomial(BASIS, (1, 1)), 0.0, [1.0, 2.0, 3.0])


@settings(max_examples=100, deadline=None)
@given(polys(), st.floats(0.0, 10.0), st.lists(st.floats(-1.5, 1.5), min_size=3, max_size=3))
def test_evaluation_matches_extended_precision(p, t, z):
    mpmath.mp.dps = 40
    w = [mpmath.mpf(1), mpmath.sqrt(2)]
    total, scale = mpmath.mpc(0), mpmath.mpf(0)
    for (mono, q), c in p.terms.items():
        term = mpmath.mpc(c.real, c.imag) * mpmath.expj(t * (q[0] * w[0] + q[1] * w[1]))
        for zi, e in zip(z, mono):
            term *= mpmath.mpf(zi) ** e
        total += term
        scale += abs(term)
    got = poly_apply(p, t, z)
    assert abs(mpmath.mpc(got.real, got.imag) - total) <= 1e-12 * max(scale, 1)


def test_fast_evaluator_matches_direct():
    rng = np.random.default_rng(3)
    terms = {(tuple(rng.integers(0, 3, 4)), tuple(rng.integers(-3, 4, 2))): complex(*rng.normal(size=2))
             for _ in range(40)}
    ps = [QPStatePoly(BASIS, 4, terms), QPStatePoly.zero(BASIS, 4), QPStatePoly(BASIS, 4, terms) * 0.5j]
    ev = PolyEvaluator(ps)
    for _ in range(10):
        t, z = rng.uniform(0, 10), rng.normal(size=4) + 1j * rng.normal(size=4)
        assert np.abs(ev(t, z) - poly_apply(ps, t, z)).max() <= 1e-12 * max(1, np.abs(ev(t, z)).max())


# ----------------------------------------------------------------------------
# poly_substitute and composition


def test_zero_slave_map_annihilates_slave_monomials():
    p = QPStatePoly.monomial(BASIS, (2, 0, 1))
    out = poly_substitute(p, [QPStatePoly.zero(BASIS, 2)], master_dim=2)
    assert out.is_zero()


def test_pure_master_polynomial_is_unchanged():
    p = QPStatePoly(BASIS, 3, {((2, 1, 0), (1, 0)): 0.5, ((0, 1, 0), (0, 0)): 2.0})
    out = poly_substitute(p, [QPStatePoly.variable(BASIS, 2, 0)], master_dim=2)
    assert out.terms == pytest.approx({((2, 1), (1, 0)): 0.5, ((0, 1), (0, 0)): 2.0})


def test_slave_substitution_matches_pointwise_evaluation():
    rng = np.random.default_rng(11)
    c = 0.7 - 0.4j
    p = QPStatePoly.monomial(BASIS, (1, 0, 1))
    z3 = QPStatePoly.monomial(BASIS, (2, 0), c=c, p=(0, 1))
    out = poly_substitute(p, [z3], master_dim=2)
    for _ in range(50):
        t = rng.uniform(0, 20)
        z = rng.normal(size=2) + 1j * rng.normal(size=2)
        slave = c * np.exp(1j * math.sqrt(2) * t) * z[0] ** 2
        assert abs(poly_apply(out, t, z) - poly_apply(p, t, [z[0], z[1], slave])) <= 1e-10


def test_substitution_checks_dimensions():
    p = QPStatePoly.monomial(BASIS, (1, 0, 1))
    with pytest.raises(DimError):
        poly_substitute(p, [], master_dim=2)
    with pytest.raises(DimError):
        poly_substitute(p, [QPStatePoly.zero(BASIS, 3)], master_dim=2)


@settings(max_examples=100, deadline=None)
@given(polys(n=2), polys(n=2), polys(n=2), st.floats(0, 5), st.lists(st.floats(-1, 1), min_size=2, max_size=2))
def test_composition_is_evaluation_homomorphism(p, s1, s2, t, z):
    out = compose(p, [s1, s2], max_degree=40, trunc_order=60)
    inner = [poly_apply(s1, t, z), poly_apply(s2, t, z)]
    expected = poly_apply(p, t, inner)
    assert abs(poly_apply(out, t, z) - expected) <= 1e-9 * max(1.0, abs(expected))


@settings(max_examples=100, deadline=None)
@given(polys(real=True), polys(real=True))
def test_real_polynomial_closure(p, q):
    for r in (poly_mul(p, q), p.ddt(), p.diff(0), p + q):
        assert r.real_flag
        assert symmetric(r.keys, r.vals, r.state_dim)


# ----------------------------------------------------------------------------
# canonical form, fitting and matrices


def test_purge_is_idempotent():
    s = QPSeries(BASIS, {(1, 0): 1e-15, (0, 1): 1.0, (2, 2): 3e-16j})
    assert s.coeffs == {(0, 1): 1.0}
    again = QPSeries(BASIS, s.coeffs)
    assert again.coeffs == s.coeffs
    Q = QPMatrix(BASIS, [[0, 0], [1, 0]], np.array([np.eye(2), 1e-16 * np.ones((2, 2))]))
    assert Q.purge().purge().idx.tolist() == Q.purge().idx.tolist() == [[0, 0]]


def test_fit_recovers_known_series():
    s = QPSeries(BASIS, {(1, -1): 0.3 + 0.1j, (-1, 1): 0.3 - 0.1j, (0, 0): 0.5, (2, 0): 0.2, (-2, 0): 0.2})
    t = np.arange(0, 200, 0.05)
    fit, rms = fit_series(BASIS, t, s(t).real, (3, 3))
    assert rms < 1e-10
    for p, c in s.coeffs.items():
        assert fit.coeffs[p] == pytest.approx(c, abs=1e-9)


def test_matrix_evaluation_derivative_and_products():
    e = [[QPSeries.cos(BASIS, 0), QPSeries.sin(BASIS, 1)], [QPSeries.constant(BASIS, 2.0), QPSeries.cos(BASIS, 1, 3.0)]]
    Q = QPMatrix.from_entries(e)
    t = np.array([0.0, 0.4, 2.5])
    direct = np.array([[[e[i][j](tt) for j in range(2)] for i in range(2)] for tt in t])
    assert np.abs(Q(t) - direct).max() < 1e-14
    C = np.array([[1.0, 2.0], [0.5, -1.0]])
    assert np.abs((Q @ C)(t) - Q(t) @ C).max() < 1e-14
    assert np.abs((C @ Q)(t) - C @ Q(t)).max() < 1e-14
    h = 1e-6
    fd = (Q(1.0 + h) - Q(1.0 - h)) / (2 * h)
    assert np.abs(Q.ddt()(1.0) - fd).max() < 1e-6
    assert Q.asymmetry() < 1e-15 and np.abs(Q.as_real()(t).imag).max() < 1e-15
