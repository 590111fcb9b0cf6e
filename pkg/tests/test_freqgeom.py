"""Frequency geometry: degrees, dilations and bad-set measures against independent oracles."""

import numpy as np
import pytest

from kamtori.divisors import DivisorParams, check_dio_elliptic
from kamtori.freqgeom import (
    FreqMap, DegreeUndefinedError, HypothesisError, NoSolutionGuarantee, RankConditionError,
    rank_tests, brouwer_degree, boundary_margin, solve_dilation, bruno_family, bad_set_2d,
    resonance_measure_2d, dio_window_1d, elliptic_dilation, ratio_degree, solve_ratio,
    union_measure,
)

GOLDEN = np.array([1.0, (1 + 5 ** 0.5) / 2])
SQUARE = (np.array([-1.0, -1.0]), np.array([1.0, 1.0]))


def winding_degree(fmap, box, target, per_edge=4001):
    """Degree in 2-D as the winding number of ``omega(boundary) - target`` about 0."""
    (a1, a2), (b1, b2) = box
    t = np.linspace(0, 1, per_edge, endpoint=False)
    path = np.concatenate([
        np.column_stack([a1 + (b1 - a1) * t, np.full_like(t, a2)]),
        np.column_stack([np.full_like(t, b1), a2 + (b2 - a2) * t]),
        np.column_stack([b1 - (b1 - a1) * t, np.full_like(t, b2)]),
        np.column_stack([np.full_like(t, a1), b2 - (b2 - a2) * t]),
    ])
    v = fmap(path) - target
    ang = np.arctan2(v[:, 1], v[:, 0])
    d = np.diff(np.append(ang, ang[0]))
    d = (d + np.pi) % (2 * np.pi) - np.pi
    return int(round(d.sum() / (2 * np.pi)))


def interval_degree(f, a, b, target):
    """Degree in 1-D from the signs at the end points."""
    return int((np.sign(f(b) - target) - np.sign(f(a) - target)) / 2)


IDENTITY = FreqMap.from_expressions(["xi1", "xi2"])
CUBE = FreqMap.from_expressions(["xi1**3", "xi2**3"])
FOLD = FreqMap.from_expressions(["xi1**2", "xi2"])
ODD = FreqMap.from_expressions(["xi1**3", "xi2**5"])

DEGREE_CASES = [
    (IDENTITY, (np.array([1.0, 1.3]), np.array([2.0, 1.7])), np.array([1.4, 1.5]), 1),
    (CUBE, SQUARE, np.array([0.1, 0.1]), 1),
    (FOLD, SQUARE, np.array([0.1, 0.0]), 0),
    (ODD, SQUARE, np.array([-0.3, 0.2]), 1),
]


# -- ranks -------------------------------------------------------------------------------

def test_rank_tests():
    assert rank_tests(IDENTITY, [0.3, 0.4]) == (2, 2)
    dup = FreqMap.from_expressions(["xi1", "xi1"], dim=2)
    assert rank_tests(dup, [0.5, 0.1])[0] == 1
    circle = FreqMap.from_expressions(["cos(xi)", "sin(xi)"], dim=1)
    assert rank_tests(circle, [0.7]) == (1, 2)


# -- degree ------------------------------------------------------------------------------

@pytest.mark.parametrize("fmap,box,target,want", DEGREE_CASES)
def test_degree_matches_winding_number(fmap, box, target, want):
    res = brouwer_degree(fmap, box, target)
    assert res.degree == want
    assert winding_degree(fmap, box, target) == want
    # the preimages really are preimages, and their signs add up to the degree
    if res.preimages.shape[0]:
        assert np.allclose(fmap(res.preimages), target, atol=1e-12)
    assert int(res.signs.sum()) == res.degree


def test_fold_preimages_by_hand():
    res = brouwer_degree(FOLD, SQUARE, [0.1, 0.0])
    xs = sorted(res.preimages[:, 0])
    assert xs == pytest.approx([-0.1 ** 0.5, 0.1 ** 0.5], abs=1e-12)
    assert sorted(res.signs.tolist()) == [-1, 1]


def test_degree_on_boundary_image_is_undefined():
    with pytest.raises(DegreeUndefinedError):
        brouwer_degree(CUBE, SQUARE, [1.0, 0.125])


@pytest.mark.parametrize("fmap,box,target,want", DEGREE_CASES)
def test_degree_stable_under_half_margin_perturbations(fmap, box, target, want):
    margin = boundary_margin(fmap, box, target)
    rng = np.random.default_rng(11)
    for _ in range(10):
        c = rng.normal(size=2)
        A = rng.normal(size=(2, 2))
        freq = rng.uniform(0.5, 3.0, 2)
        # |hat| <= |c| + |A|_2 <= margin / 2 after scaling
        scale = 0.5 * margin / (np.linalg.norm(c) + np.linalg.norm(A, 2))

        def hat(x, c=c, A=A, freq=freq, scale=scale):
            return scale * (c + np.sin(x * freq) @ A.T)

        pert = fmap.perturbed(hat)
        assert brouwer_degree(pert, box, target).degree == want
        assert winding_degree(pert, box, target) == want


def test_ratio_degree_of_circle_map():
    # tan(xi) is increasing: degree +1 for the ratio sin / cos
    sin = FreqMap.from_expressions(["sin(xi)"], dim=1)
    cos = FreqMap.from_expressions(["cos(xi)"], dim=1)
    res = ratio_degree(sin, cos, ([0.2], [1.2]), [0.7])
    want = interval_degree(np.tan, 0.2, 1.2, np.tan(0.7))
    assert res.degree == want == 1


def test_ratio_degree_closed_form():
    xi = FreqMap.from_expressions(["xi"], dim=1)
    Omega = FreqMap.from_expressions(["1 + 0.1*xi"], dim=1)
    res = ratio_degree(xi, Omega, ([0.5], [2.0]), [1.2])
    assert res.degree == 1
    assert res.preimages[:, 0] == pytest.approx([1.2], abs=1e-12)
    # Omega identically 1 reduces to the degree of omega itself
    one = FreqMap.from_expressions(["1 + 0*xi"], dim=1)
    assert ratio_degree(xi, one, ([0.5], [2.0]), [1.2]).degree == 1


def test_solve_ratio_against_grid_oracle():
    xi = FreqMap.from_expressions(["xi"], dim=1)
    hat = lambda x: 0.01 * np.sin(x)  # noqa: E731
    Omega = FreqMap.from_expressions(["1 + 0.1*xi"], dim=1)
    sol, scale = solve_ratio(xi.perturbed(hat), Omega, ([0.5], [2.0]), [1.2])
    grid = np.linspace(0.5, 2.0, 1_500_001)[:, None]
    ratio = (grid + hat(grid)) / (1 + 0.1 * grid)
    best = grid[np.argmin(np.abs(ratio - 1.2 / 1.12)), 0]
    assert sol.xi[0] == pytest.approx(best, abs=1e-6)
    assert sol.residual <= 1e-10
    assert scale == pytest.approx((1 + 0.1 * sol.xi[0]) / 1.12, rel=1e-14)


def test_ratio_requires_nonvanishing_Omega():
    xi = FreqMap.from_expressions(["xi"], dim=1)
    with pytest.raises(HypothesisError):
        ratio_degree(xi, FreqMap.from_expressions(["xi - 1"], dim=1), ([0.5], [2.0]), [1.2])


# -- dilations -----------------------------------------------------------------------------

def test_solve_dilation_trivial():
    sol = solve_dilation(IDENTITY, (np.array([1.0, 1.3]), np.array([2.0, 1.7])), [1.4, 1.5])
    assert np.allclose(sol.xi, [1.4, 1.5], atol=1e-14) and sol.lam == 0.0


def test_solve_dilation_against_grid_minimiser():
    hat = lambda x: np.column_stack([0.01 * np.sin(x[:, 0]), np.zeros(x.shape[0])])  # noqa: E731
    box = (np.array([1.0, 1.3]), np.array([2.0, 1.7]))
    sol = solve_dilation(IDENTITY.perturbed(hat), box, [1.4, 1.5])
    # the second component decouples; a dense scan in xi1 locates the root
    x1 = np.linspace(1.0, 2.0, 2_000_001)
    best = x1[np.argmin(np.abs(x1 + 0.01 * np.sin(x1) - 1.4))]
    assert sol.xi == pytest.approx([best, 1.5], abs=1e-6)
    assert sol.residual <= 1e-10


def test_solve_dilation_odd_power_covers_shrunken_box():
    hat = lambda x: 1e-3 * np.cos(x)  # noqa: E731
    rng = np.random.default_rng(5)
    for target in rng.uniform(-0.9, 0.9, (5, 2)):
        sol = solve_dilation(ODD.perturbed(hat), SQUARE, target)
        x = sol.xi
        assert np.abs(np.array([x[0] ** 3, x[1] ** 5]) + 1e-3 * np.cos(x) - target).max() <= 1e-10


def test_solve_dilation_needs_nonzero_degree():
    with pytest.raises(NoSolutionGuarantee):
        solve_dilation(FOLD, SQUARE, [0.1, 0.0])


def test_solve_dilation_rejects_large_perturbation():
    with pytest.raises(NoSolutionGuarantee):
        solve_dilation(CUBE.perturbed(lambda x: np.full_like(x, 1.0)), SQUARE, [0.1, 0.1])


CIRCLE2 = FreqMap.from_expressions(["cos(xi1)", "sin(xi1)"], dim=2)


def test_bruno_family_unperturbed_is_trivial():
    fam = bruno_family(CIRCLE2, (np.array([0.2, -1.0]), np.array([1.2, 1.0])), [0.7, 0.0],
                       delta0=0.2, count=9)
    assert fam.sigma == 0.0
    assert np.abs(fam.lam).max() <= 1e-14
    assert np.allclose(fam.xi[:, 0], 0.7, atol=1e-12)
    mid = int(np.argmin(np.abs(fam.eta)))
    assert np.allclose(fam.xi[mid], [0.7, 0.0], atol=1e-12)


def test_bruno_family_circle_closed_form():
    # a radial perturbation eps xi2 (cos xi1, sin xi1) keeps the direction, so the
    # family stays at xi1 = xi01 and lambda(eta) = eps (xi02 + eta)
    eps = 1e-3

    def hat(x):
        return eps * x[:, 1:2] * np.column_stack([np.cos(x[:, 0]), np.sin(x[:, 0])])

    fmap = CIRCLE2.perturbed(hat)
    fam = bruno_family(fmap, (np.array([0.2, -1.0]), np.array([1.2, 1.0])), [0.7, 0.3],
                       delta0=0.2, count=9)
    assert fam.continuation_axis == 1
    assert np.allclose(fam.xi[:, 0], 0.7, atol=1e-12)
    assert np.allclose(fam.lam, eps * (0.3 + fam.eta), atol=1e-13)
    assert fam.residual.max() <= 1e-12
    assert np.all(np.abs(fam.lam) <= fam.fit_constant * (np.abs(fam.eta) + fam.sigma)
                  * (1 + 1e-12))


def test_bruno_family_rank_failure():
    with pytest.raises(RankConditionError, match="rank of d omega"):
        bruno_family(IDENTITY, (np.array([1.0, 1.3]), np.array([2.0, 1.7])), [1.4, 1.5])


# -- measures ------------------------------------------------------------------------------

def scan_bad_2d(omega0, alpha, tau, lam0, K, N):
    """Midpoint scan of the shifted-pair bad set; per k1 only the nearest k2 can be close."""
    h = lam0 / N
    lam = (np.arange(N) + 0.5) * h
    bad = np.zeros(N, dtype=bool)
    for k1 in range(1, K + 1):
        x = k1 * (omega0[0] + lam)
        k2 = np.rint(-x / omega0[1])
        nk = k1 + np.abs(k2)
        bad |= (np.abs(x + k2 * omega0[1]) < alpha / (2 * nk ** (2 * tau + 2))) & (nk <= K)
    return lam, bad, h


def inside(points, merged):
    idx = np.searchsorted(merged[:, 0], points, side="right") - 1
    ok = idx >= 0
    return ok & (points < merged[np.maximum(idx, 0), 1])


def test_bad_set_small_K_by_hand():
    w, alpha, tau = np.array([0.6, 1.1]), 0.5, 1.0
    # K = 1 leaves k = (1, 0) and (0, 1): |0.6 + lam| and 1.1 stay above alpha / 4
    assert bad_set_2d(w, alpha, tau, 0.6, 1)[1] == 0.0
    # K = 2 adds (1, -1), bad for |lam - 0.5| < alpha / (2 2^4); (2, 0), (0, 2) and
    # (1, 1) stay far from zero
    merged, meas = bad_set_2d(w, alpha, tau, 0.6, 2)
    d = alpha / (2 * 2 ** 4)
    assert merged.ravel().tolist() == pytest.approx([0.5 - d, 0.5 + d], abs=1e-15)
    assert meas == pytest.approx(2 * d, abs=1e-15)
    # cutting the interval at lam0 keeps only the covered part
    assert bad_set_2d(w, alpha, tau, 0.5, 2)[1] == pytest.approx(d, abs=1e-15)


def test_bad_set_matches_fine_scan():
    lam0, K = 0.01, 200
    merged, meas = bad_set_2d(GOLDEN, 0.05, 1.5, lam0, K)
    lam, bad, h = scan_bad_2d(GOLDEN, 0.05, 1.5, lam0, K, 10 ** 6)
    assert abs(bad.sum() * h - meas) <= h
    # every flagged scan point lies in an exact interval, and no interval wider than a
    # cell is missed by the scan
    assert np.all(inside(lam[bad], merged))
    for a, b in merged:
        if b - a > h:
            assert np.any(bad[(lam >= a) & (lam < b)])


def test_resonance_measure_fields():
    rep = resonance_measure_2d(GOLDEN, 0.05, 1.5, 0.02, 200)
    assert [p[0] for p in rep.scan] == [0.02, 0.01, 0.005]
    assert rep.measure == rep.scan[0][1]
    assert np.all(np.diff(rep.intervals, axis=0)[:, 0] > 0)
    lines = rep.to_csv().splitlines()
    assert lines[0] == "kind,lower,upper" and len(lines) == 1 + len(rep.intervals)


def test_resonance_measure_input_checks():
    with pytest.raises(HypothesisError):
        resonance_measure_2d(np.array([1.0, 2.0]), 0.05, 1.5, 0.01, 20)
    with pytest.raises(HypothesisError):
        resonance_measure_2d(GOLDEN, 0.05, 1.5, 0.6, 20)


def test_bad_set_is_monotone_in_K():
    small, _ = bad_set_2d(GOLDEN, 0.05, 1.5, 0.02, 50)
    big, _ = bad_set_2d(GOLDEN, 0.05, 1.5, 0.02, 200)
    # good set at K is contained in the good set at K' < K: bad sets grow with K
    for a, b in small:
        assert np.any((big[:, 0] <= a) & (big[:, 1] >= b))


def test_bad_measure_nondecreasing_in_alpha():
    ms = [bad_set_2d(GOLDEN, a, 1.5, 0.02, 100)[1] for a in (0.01, 0.02, 0.04, 0.08)]
    assert np.all(np.diff(ms) >= 0)


def test_union_measure():
    merged, m = union_measure([[0, 1], [0.5, 2], [3, 4], [5, 5]])
    assert merged.tolist() == [[0, 2], [3, 4]] and m == 3.0


NU0 = 2 ** 0.5


def scan_window(omega0, nu0, mu0, alpha, tau, sigma, K, N):
    h = 2 * sigma / N
    lam = -sigma + (np.arange(N) + 0.5) * h
    hv = lam * mu0 / (1 + lam)
    bad = np.zeros(N, dtype=bool)
    for k1 in range(-K, K + 1):
        # only the nearest k2 can come within delta <= alpha / 2 < omega02 / 2 of zero
        base = k1 * omega0[0] + nu0 - hv
        k2 = np.rint(-base / omega0[1])
        nk = abs(k1) + np.abs(k2)
        f = base + k2 * omega0[1]
        with np.errstate(divide="ignore"):
            bad |= (nk > 0) & (nk <= K) & (np.abs(f) < alpha / (2 * nk ** (2 * tau + 1)))
    return lam, bad, h


def test_window_matches_fine_scan():
    sigma, K = 1e-3, 100
    rep = dio_window_1d(GOLDEN, NU0, 1.0, None, 0.05, 1.5, sigma, K)
    lam, bad, h = scan_window(GOLDEN, NU0, 1.0, 0.05, 1.5, sigma, K, 10 ** 6)
    assert abs(bad.sum() * h - rep.measure) <= max(len(rep.intervals), 1) * h
    assert np.all(inside(lam[bad], rep.intervals))
    # admissible set is the complement inside I_sigma
    total = rep.measure + float(np.sum(rep.admissible[:, 1] - rep.admissible[:, 0]))
    assert total == pytest.approx(2 * sigma, rel=1e-12)


def test_window_small_sigma_is_all_admissible():
    rep = dio_window_1d(GOLDEN, NU0, 1.0, None, 0.05, 1.5, 1e-7, 50)
    assert rep.measure == 0.0
    assert rep.admissible.tolist() == [[-1e-7, 1e-7]]


def test_window_bad_fraction_shrinks():
    fr = [dio_window_1d(GOLDEN, NU0, 1.0, None, 0.05, 1.5, s, 100).measure / s
          for s in (0.08, 0.04, 0.02)]
    assert fr[0] > 0 and fr[2] < fr[0]


def test_window_degenerate_mu0():
    with pytest.raises(HypothesisError, match="mu0 = 0"):
        dio_window_1d(GOLDEN, NU0, 0.0, None, 0.05, 1.5, 1e-3, 10)


# -- elliptic ------------------------------------------------------------------------------

def brute_elliptic_margin(omega, Omega, alpha, tau, K):
    """Minimum of |<k,omega> + <l,Omega>| max(|k|, 1)^tau / alpha.

    ``l`` runs over 0, 1 and 2 (the 1-D lattice up to sign) and ``0 < |k| + |l|``,
    ``|k| <= K``.
    """
    best = np.inf
    ks = [(a, b) for a in range(-K, K + 1) for b in range(-K, K + 1) if abs(a) + abs(b) <= K]
    ks = np.array(ks)
    nk = np.abs(ks).sum(axis=1)
    kw = ks @ omega
    norm = np.where(nk > 0, nk, 1.0) ** tau
    for off in (0.0, Omega[0], 2 * Omega[0]):
        val = np.abs(kw + off) * norm / alpha
        if off == 0.0:
            val = val[nk > 0]
        best = min(best, float(val.min()))
    return best


def bump(w, c=np.array([1.0, 1.6])):
    return np.exp(-np.sum((w - c) ** 2))


def test_elliptic_dilation_end_to_end():
    M = np.array([[0.1], [0.0]])
    oh = lambda w: 1e-4 * bump(w) * np.ones(2)  # noqa: E731
    Oh = lambda w: 1e-4 * bump(w) * np.ones(1)  # noqa: E731
    box = (np.array([0.5, 1.0]), np.array([1.5, 2.2]))
    res = elliptic_dilation(GOLDEN, [2 ** 0.5 / 2 + 0.05], M, oh, Oh, box, 0.05, 1.5, 1e-3,
                            30)
    assert res.residual.max() <= 1e-10
    for lam, v, rep in zip(res.lam, res.varpi, res.reports):
        w = v + oh(v)
        assert np.abs(w - (1 + lam) * GOLDEN).max() <= 1e-10
        W = np.array([2 ** 0.5 / 2 + 0.05]) + v @ M + Oh(v)
        check = check_dio_elliptic(w, W, DivisorParams(0.05 / 4, 4.0, 30))
        assert rep.passed == check.passed
        assert rep.margin == pytest.approx(check.margin, rel=1e-12)
        assert rep.passed
        assert brute_elliptic_margin(w, W, 0.05 / 4, 4.0, 30) >= 1


def test_elliptic_trivial_case_keeps_margins():
    beta = np.array([2 ** 0.5 / 2 + 0.05])
    M = np.zeros((2, 1))
    box = (np.array([0.5, 1.0]), np.array([1.5, 2.2]))
    res = elliptic_dilation(GOLDEN, beta, M, None, None, box, 0.05, 1.5, 1e-3, 30,
                            lambdas=[0.0])
    assert np.array_equal(res.varpi[0], GOLDEN)
    ref = check_dio_elliptic(GOLDEN, beta, DivisorParams(0.05 / 4, 4.0, 30))
    assert res.reports[0].margin == ref.margin


def test_elliptic_M_zero_windows_reduce_to_dio_window():
    beta = np.array([2 ** 0.5 / 2 + 0.05])
    box = (np.array([0.5, 1.0]), np.array([1.5, 2.2]))
    res = elliptic_dilation(GOLDEN, beta, np.zeros((2, 1)), None, None, box, 0.05, 1.5,
                            1e-3, 30)
    for l, win in res.windows.items():
        ref = dio_window_1d(GOLDEN, l[0] * beta[0], l[0] * beta[0], None, 0.05, 1.5, 1e-3, 30)
        assert np.array_equal(win.intervals, ref.intervals)


def test_elliptic_beta_zero_is_rejected():
    with pytest.raises(HypothesisError, match="<l, beta> = 0"):
        elliptic_dilation(GOLDEN, [0.0], np.zeros((2, 1)), None, None,
                          (np.array([0.5, 1.0]), np.array([1.5, 2.2])), 0.05, 1.5, 1e-3, 10)
