import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import with_parametric_amplitude
from oracles import BASIS, diagonal_spectrum, homological_residual, random_homological_case
from qpreduce.augmentation import ParametricTerm, QPLinearSystem, augment, modal
from qpreduce.cli import Pipeline, parse_config
from qpreduce.errors import IrreducibleResonance
from qpreduce.normal_form import classify, homological_solve, normal_form_iterate
from qpreduce.qpalgebra import FrequencyBasis, QPStatePoly
from qpreduce.simkit import integrate


# ----------------------------------------------------------------------------
# homological equation


def test_empty_input_gives_empty_transform():
    f = [QPStatePoly.zero(BASIS, 2) for _ in range(2)]
    h, retained, report = homological_solve(diagonal_spectrum([1j, -1j]), f)
    assert all(p.is_zero() for p in h) and all(p.is_zero() for p in retained)
    assert report.entries == []


def test_single_term_coefficient():
    lam = [0.75j, 1j]
    f = [QPStatePoly.zero(BASIS, 2), QPStatePoly.monomial(BASIS, (2, 0), c=1.0)]
    h, retained, _ = homological_solve(diagonal_spectrum(lam), f)
    assert h[1].terms == {((2, 0), (0, 0)): pytest.approx(-2j)}
    assert retained[1].is_zero()


def test_classic_cubic_resonance_is_retained():
    f = [QPStatePoly.monomial(BASIS, (2, 1), c=0.3), QPStatePoly.zero(BASIS, 2)]
    h, retained, report = homological_solve(diagonal_spectrum([1j, -1j]), f)
    assert h[0].is_zero()
    assert retained[0].terms == {((2, 1), (0, 0)): 0.3}
    assert [e.classification for e in report.exact()] == ["exact"]


def test_classification_thresholds():
    assert classify(0.0, 1e-6) == "exact"
    assert classify(5e-13j, 1e-6) == "exact"
    assert classify(1e-9, 1e-6) == "near"
    assert classify(1e-6, 1e-6) == "clear"


@settings(max_examples=300, deadline=None)
@given(st.complex_numbers(max_magnitude=1e-2), st.floats(1e-9, 1e-2), st.floats(1e-9, 1e-2))
def test_shrinking_tolerance_only_frees_terms(d, tol_a, tol_b):
    small, large = sorted((tol_a, tol_b))
    if classify(d, large) == "clear":
        assert classify(d, small) == "clear"
    if classify(d, small) != "clear":
        assert abs(d) < small


@pytest.mark.parametrize("seed", range(6))
def test_homological_solution_satisfies_equation_symbolically(seed):
    lam, f = random_homological_case(seed)
    h, retained, report = homological_solve(diagonal_spectrum(lam), f, order=2)
    assert homological_residual(f, h, retained, lam, BASIS.omegas) <= 1e-12


def test_symbolic_oracle_with_resonant_terms_retained():
    lam = np.array([-1j, 1j, -2j, 2j])
    f = [QPStatePoly(BASIS, 4, {((2, 1, 0, 0), (0, 0)): 0.5, ((1, 0, 1, 0), (1, 0)): 0.2 + 0.1j,
                                ((0, 0, 2, 0), (0, 1)): -0.3}, max_degree=3, trunc_order=3)
         for _ in range(4)]
    h, retained, report = homological_solve(diagonal_spectrum(lam), f)
    assert not retained[0].is_zero() and report.retained()
    assert homological_residual(f, h, retained, lam, BASIS.omegas) <= 1e-12


# ----------------------------------------------------------------------------
# iterated normal form


def test_constant_coefficient_system_keeps_its_eigenvalues():
    B0 = np.array([[0, 1, 0, 0], [-3, 0, 0, 0], [0, 0, 0, 1], [0, 0, -5, 0]], float)
    aug = augment(QPLinearSystem(B0, [], BASIS))
    spec = modal(aug.Bbar0, aug.n_physical, aug.fictitious_pairs)
    nit, jbar, report = normal_form_iterate(aug, spec)
    assert nit.is_identity()
    assert np.array_equal(jbar.diagonal, spec.physical)
    assert report.retained() == []


def test_section4_jbar_reproduces_reported_values(section4):
    """Reported: -1.78i, +1.78i, -2.29i, +2.29i (two decimals, truncated)."""
    jbar = section4.analyze()[3].diagonal
    assert np.abs(jbar.real).max() <= 1e-8
    assert np.abs(jbar.imag - np.array([-1.78, 1.78, -2.29, 2.29])).max() <= 0.01


def test_section4_jbar_regression(section4):
    jbar = section4.analyze()[3].diagonal
    assert jbar.imag == pytest.approx([-1.789262, 1.789262, -2.296038, 2.296038], abs=1e-6)


def test_fictitious_constants_equal_quarter_frequency_squared(section4):
    """Reported constants: pi^2 and 3.5^2."""
    consts = section4.analyze()[3].fictitious_constants
    assert consts["w1"] == pytest.approx(math.pi ** 2, rel=1e-12)
    assert consts["w2"] == pytest.approx(3.5 ** 2, rel=1e-12)


def test_jbar_occurs_in_conjugate_pairs(section4):
    jbar = section4.analyze()[3].diagonal
    assert jbar[1] == np.conj(jbar[0]) and jbar[3] == np.conj(jbar[2])


def test_small_amplitudes_approach_unperturbed_frequencies(bundled_cfg):
    pipe = Pipeline(parse_config(with_parametric_amplitude(bundled_cfg, 0.1)))
    jbar = pipe.analyze()[3].diagonal
    target = np.array([-1j * math.sqrt(3), 1j * math.sqrt(3), -1j * math.sqrt(5), 1j * math.sqrt(5)])
    assert np.abs(jbar - target).max() <= 0.01


def test_jbar_frequency_matches_spectrum_of_direct_integration(bundled_cfg):
    pipe = Pipeline(parse_config(with_parametric_amplitude(bundled_cfg, 0.5)))
    jbar = pipe.analyze()[3].diagonal
    lin = pipe.system.linear
    step = 0.01
    tr = integrate(lambda t, x: lin.A(t) @ x, np.array([0.1, 0, 0, 0]), (0, 400), step)
    x = tr.states[:, 0]
    omega = 2 * np.pi * np.fft.rfftfreq(len(x), step)
    peak = omega[np.argmax(np.abs(np.fft.rfft(x * np.hanning(len(x)))))]
    assert abs(peak - abs(jbar[0].imag)) <= omega[1]


def test_principal_parametric_resonance_is_irreducible():
    basis = FrequencyBasis((2.0,), ("w",))
    sys = QPLinearSystem(np.array([[0, 1], [-1, 0.0]]), [ParametricTerm(1, 0, 0.1, 0)], basis)
    aug = augment(sys)
    spec = modal(aug.Bbar0, aug.n_physical, aug.fictitious_pairs)
    with pytest.raises(IrreducibleResonance) as err:
        normal_form_iterate(aug, spec)
    assert err.value.entries


def test_resonance_report_document(section4):
    doc = section4.analyze()[4].to_dict()
    assert {"tolerance", "entries", "min_divisor"} <= set(doc)
    assert doc["tolerance"] == pytest.approx(1e-6 * 7.0)
