"""Series arithmetic against symbolic and pointwise oracles."""

import numpy as np
import pytest
import sympy
from hypothesis import given, settings, strategies as st

from kamtori.series import (
    Caps, FTSeries, NormParams, StructureError, add, scale, multiply, poisson_bracket,
    linear_part, truncate_fourier, average, majorant_norm, evaluate, dumps, loads,
    d_theta, d_action,
)

CAPS = Caps(12, 4, 0.5, 1.0)


def series_from(terms, n=2, S=1, caps=CAPS, reality=False):
    return FTSeries.from_terms(n, S, terms, caps, reality=reality)


def to_sympy(p, sample=0):
    th = sympy.symbols(f"t1:{p.n + 1}", real=True)
    I = sympy.symbols(f"I1:{p.n + 1}", real=True)
    expr = 0
    for k, l, c in zip(p.modes, p.powers, p.coeffs[:, sample]):
        phase = sympy.exp(sympy.I * sum(int(ki) * t for ki, t in zip(k, th)))
        mono = sympy.Mul(*[v ** int(li) for v, li in zip(I, l)])
        expr += sympy.nsimplify(complex(c).real) * phase * mono
        expr += sympy.I * sympy.nsimplify(complex(c).imag) * phase * mono
    return expr, th, I


def sympy_eval(expr, th, I, theta, act):
    f = sympy.lambdify(list(th) + list(I), expr, "numpy")
    return np.asarray(f(*theta.T, *act.T), dtype=complex)


modes = st.tuples(st.integers(-3, 3), st.integers(-3, 3))
powers = st.tuples(st.integers(0, 2), st.integers(0, 2))
coef = st.complex_numbers(max_magnitude=2.0, allow_nan=False, allow_infinity=False)
terms = st.lists(st.tuples(modes, powers, coef), min_size=1, max_size=5)


def points(rng, m=7, n=2):
    return rng.uniform(0, 2 * np.pi, (m, n)), rng.uniform(-0.7, 0.7, (m, n))


# -- construction -----------------------------------------------------------------

def test_from_terms_merges_duplicates():
    p = series_from([((1, 0), (0, 0), 1.0), ((1, 0), (0, 0), 2.0)])
    assert p.n_terms == 1
    assert p.coefficient((1, 0), (0, 0))[0] == 3.0


def test_over_cap_terms_go_to_residual():
    caps = Caps(2, 1, 1.0, 2.0)
    p = FTSeries.from_terms(1, 1, [((3,), (0,), 0.5), ((1,), (2,), 0.25), ((1,), (1,), 1.0)],
                            caps, reality=False)
    assert p.n_terms == 1
    # residual = 0.5 e^3 + 0.25 e^1 2^2
    assert p.residual == pytest.approx(0.5 * np.exp(3) + 0.25 * np.e * 4, rel=1e-14)


def test_reality_violation_is_rejected():
    with pytest.raises(ValueError):
        FTSeries.from_terms(1, 1, [((1,), (0,), 1.0)], CAPS, reality=True)


def test_negative_powers_rejected():
    with pytest.raises(ValueError):
        FTSeries.from_terms(1, 1, [((0,), (-1,), 1.0)], CAPS, reality=False)


def test_incompatible_operands():
    a = series_from([((1, 0), (0, 0), 1.0)])
    b = FTSeries.from_terms(2, 2, [((1, 0), (0, 0), 1.0)], CAPS, reality=False)
    with pytest.raises(StructureError):
        add(a, b)
    c = FTSeries.from_terms(2, 1, [((1, 0), (0, 0), 1.0)], Caps(5, 4), reality=False)
    with pytest.raises(StructureError):
        multiply(a, c)


# -- algebra against oracles ----------------------------------------------------------

@settings(max_examples=40, deadline=None)
@given(terms, terms)
def test_product_matches_pointwise_product(ta, tb):
    rng = np.random.default_rng(0)
    big = Caps(40, 10)
    a, b = series_from(ta, caps=big), series_from(tb, caps=big)
    th, I = points(rng)
    ab = multiply(a, b)
    got = evaluate(ab, th, I)
    want = evaluate(a, th, I) * evaluate(b, th, I)
    assert np.allclose(got, want, rtol=1e-12, atol=1e-12)
    assert ab.residual == 0.0


def test_product_over_caps_keeps_mass_in_residual():
    caps = Caps(2, 1, 1.0, 1.0)
    a = series_from([((1, 0), (1, 0), 1.0)], caps=caps)
    b = series_from([((1, 1), (0, 0), 2.0), ((0, 0), (0, 0), 1.0)], caps=caps)
    ab = multiply(a, b)
    # (2,1) has |k| = 3 > 2: its weighted mass 2 e^3 must be accounted for
    assert ab.residual == pytest.approx(2 * np.exp(3), rel=1e-14)
    assert ab.n_terms == 1


def test_bracket_matches_symbolic_oracle():
    rng = np.random.default_rng(3)
    a = series_from([((1, 0), (1, 0), 0.3), ((0, 2), (0, 1), -0.5j), ((1, -1), (2, 0), 0.25)])
    b = series_from([((2, 1), (0, 1), 1.5), ((0, 0), (1, 1), 0.7), ((-1, 0), (0, 0), 2.0)])
    ea, th, I = to_sympy(a)
    eb, _, _ = to_sympy(b)
    bracket = sum(sympy.diff(ea, th[i]) * sympy.diff(eb, I[i])
                  - sympy.diff(ea, I[i]) * sympy.diff(eb, th[i]) for i in range(2))
    theta, act = points(rng, 9)
    want = sympy_eval(bracket, th, I, theta, act)
    got = evaluate(poisson_bracket(a, b), theta, act)
    assert np.allclose(got, want, rtol=1e-12, atol=1e-12)


def test_derivatives_match_symbolic_oracle():
    rng = np.random.default_rng(4)
    a = series_from([((1, 2), (1, 2), 0.3 + 0.1j), ((0, -3), (0, 1), 1.0)])
    ea, th, I = to_sympy(a)
    theta, act = points(rng, 5)
    for i in range(2):
        assert np.allclose(evaluate(d_theta(a, i), theta, act),
                           sympy_eval(sympy.diff(ea, th[i]), th, I, theta, act))
        assert np.allclose(evaluate(d_action(a, i), theta, act),
                           sympy_eval(sympy.diff(ea, I[i]), th, I, theta, act))


@settings(max_examples=30, deadline=None)
@given(terms, terms)
def test_bracket_antisymmetry(ta, tb):
    a, b = series_from(ta), series_from(tb)
    s = add(poisson_bracket(a, b), poisson_bracket(b, a))
    assert s.n_terms == 0 or np.abs(s.coeffs).max() <= 1e-12 * (1 + np.abs(
        poisson_bracket(a, b).coeffs).max(initial=0))


@settings(max_examples=15, deadline=None)
@given(terms, terms, terms)
def test_jacobi_identity(ta, tb, tc):
    big = Caps(40, 10)
    a, b, c = (FTSeries.from_terms(2, 1, t, big, reality=False) for t in (ta, tb, tc))
    pb = poisson_bracket
    j = add(add(pb(a, pb(b, c)), pb(b, pb(c, a))), pb(c, pb(a, b)))
    rng = np.random.default_rng(1)
    th, I = points(rng)
    scale_ = 1 + max(np.abs(evaluate(pb(a, pb(b, c)), th, I)).max(), 1.0)
    assert np.abs(evaluate(j, th, I)).max() <= 1e-10 * scale_


@settings(max_examples=30, deadline=None)
@given(terms, terms, st.floats(0.1, 2.0), st.floats(0.2, 1.5))
def test_norm_is_submultiplicative(ta, tb, s, r):
    big = Caps(40, 10)
    a, b = (FTSeries.from_terms(2, 1, t, big, reality=False) for t in (ta, tb))
    na, nb = majorant_norm(a, s=s, r=r), majorant_norm(b, s=s, r=r)
    assert majorant_norm(multiply(a, b), s=s, r=r) <= na * nb * (1 + 1e-12)
    assert majorant_norm(add(a, b), s=s, r=r) <= (na + nb) * (1 + 1e-12)


def test_norm_value_by_hand():
    p = series_from([((1, 0), (0, 0), 0.5), ((-1, 1), (1, 1), -2.0)])
    # 0.5 e^{s} + 2 e^{2 s} r^2
    assert majorant_norm(p, NormParams(0.3, 0.5)) == pytest.approx(
        0.5 * np.exp(0.3) + 2 * np.exp(0.6) * 0.25, rel=1e-15)


def test_per_sample_norm_and_mask():
    p = FTSeries.from_terms(1, 3, [((1,), (0,), np.array([1.0, 2.0, 3.0]))], CAPS,
                            reality=False)
    v = majorant_norm(p, s=0.0, r=1.0, per_sample=True)
    assert np.allclose(v, [1, 2, 3])
    assert majorant_norm(p, s=0.0, r=1.0, samples=[0, 1]) == 2.0


# -- splits -----------------------------------------------------------------------------

@settings(max_examples=30, deadline=None)
@given(terms, st.integers(0, 6))
def test_truncation_adds_back(t, K):
    p = series_from(t)
    head, tail = truncate_fourier(p, K)
    back = add(head, tail)
    assert np.array_equal(back.modes, p.modes) and np.array_equal(back.coeffs, p.coeffs)
    assert np.all(np.abs(head.modes).sum(axis=1) <= K)
    assert np.all(np.abs(tail.modes).sum(axis=1) > K)


def test_linear_part_and_average():
    p = series_from([((1, 0), (0, 0), 1.0), ((1, 0), (1, 0), 2.0), ((0, 0), (1, 1), 3.0),
                     ((0, 0), (0, 1), 4.0)])
    lp = linear_part(p)
    assert sorted(lp.powers.sum(axis=1).tolist()) == [0, 1, 1]
    av = average(p)
    assert np.all(av.modes == 0) and av.n_terms == 2


def test_scale_per_sample():
    p = FTSeries.from_terms(1, 2, [((1,), (0,), 1.0)], CAPS, reality=False)
    q = scale(p, np.array([2.0, -1.0]))
    assert np.allclose(q.coeffs[0], [2.0, -1.0])


def test_real_series_evaluates_real():
    p = FTSeries.from_terms(1, 1, [((1,), (0,), 0.5 - 0.25j), ((-1,), (0,), 0.5 + 0.25j)],
                            CAPS)
    th = np.linspace(0, 6, 11)[:, None]
    v = evaluate(p, th, np.zeros_like(th))
    assert np.abs(v.imag).max() < 1e-15
    assert np.allclose(v.real, np.cos(th[:, 0]) + 0.5 * np.sin(th[:, 0]))


# -- text format --------------------------------------------------------------------------

@settings(max_examples=30, deadline=None)
@given(terms)
def test_text_round_trip_is_exact(t):
    p = series_from(t, S=1)
    p.residual = 1.25e-17
    q = loads(dumps(p))
    assert np.array_equal(p.modes, q.modes)
    assert np.array_equal(p.powers, q.powers)
    assert np.array_equal(p.coeffs, q.coeffs)
    assert q.residual == p.residual and q.caps == p.caps


def test_malformed_record():
    text = dumps(series_from([((1, 0), (0, 0), 1.0)])) + "1 0 ; 0 0 ; 0\n"
    with pytest.raises(ValueError, match="malformed"):
        loads(text)
