"""Frequency geometry: rank tests, Brouwer degree, dilation solvers and
finite-K resonance measures.

Everything here works on a :class:`FreqMap`, a vectorized map from a
parameter box in R^d to frequencies in R^n, optionally carrying a small
perturbation so that ``omega_* = omega + omega_hat``.  Degrees are computed
by counting signed preimages, and all "sufficiently small" hypotheses are
replaced by computed margins that are reported back to the caller.
"""

from __future__ import annotations

from dataclasses import dataclass, field
import csv
import io

import numpy as np
from scipy import optimize
from scipy.interpolate import RegularGridInterpolator
import sympy

from .divisors import DivisorParams, check_dio, check_dio_elliptic, ell_set, l1_ball, min_margin

__all__ = [
    "FreqGeomError", "HypothesisError", "DegreeUndefinedError", "NoSolutionGuarantee",
    "RankConditionError", "SolverError",
    "FreqMap", "DegreeResult", "DilationSolution", "BrunoFamily", "MeasureReport",
    "EllipticDilation",
    "rank_tests", "boundary_margin", "brouwer_degree", "solve_dilation", "bruno_family",
    "resonance_measure_2d", "bad_set_2d", "dio_window_1d", "elliptic_dilation",
    "ratio_degree", "solve_ratio", "engine_frequency_map", "union_measure",
]


class FreqGeomError(ValueError):
    """Base class for frequency-geometry failures."""


class HypothesisError(FreqGeomError):
    """A hypothesis of the requested construction does not hold."""


class DegreeUndefinedError(HypothesisError):
    """The target lies on (or numerically at) the image of the boundary, or a
    preimage is degenerate, so the sign count is not defined."""


class NoSolutionGuarantee(HypothesisError):
    """Degree zero, or a perturbation too large for the computed margin."""


class RankConditionError(HypothesisError):
    """A rank condition fails; the message names the failing rank."""


class SolverError(FreqGeomError):
    """A root solve did not converge."""


# -- frequency maps -------------------------------------------------------------

def _as_batch(xi, dim):
    xi = np.asarray(xi, dtype=float)
    single = xi.ndim <= 1
    return np.atleast_2d(xi).reshape(-1, dim), single


class FreqMap:
    """Vectorized frequency map ``omega(xi)``, R^dim -> R^n.

    Parameters
    ----------
    fn : callable
        Maps an (M, dim) array to (M, n).
    n, dim : int
        Output and input dimension (``dim`` defaults to ``n``).
    jac : callable, optional
        Maps (M, dim) to (M, n, dim).  Central differences are used otherwise.
    perturbation : callable, optional
        ``omega_hat`` with the same signature as ``fn``; calls return
        ``omega + omega_hat``.
    perturbation_jac : callable, optional
        Jacobian of the perturbation.  Central differences otherwise.
    """

    def __init__(self, fn, n, dim=None, jac=None, perturbation=None, perturbation_jac=None,
                 label=""):
        self.fn = fn
        self.n = int(n)
        self.dim = int(dim if dim is not None else n)
        self.jac = jac
        self.perturbation = perturbation
        self.perturbation_jac = perturbation_jac
        self.label = label

    # evaluation
    def _eval(self, f, xi):
        x, single = _as_batch(xi, self.dim)
        out = np.asarray(f(x), dtype=float).reshape(x.shape[0], self.n)
        return out[0] if single else out

    def base(self, xi):
        return self._eval(self.fn, xi)

    def hat(self, xi):
        if self.perturbation is None:
            x, single = _as_batch(xi, self.dim)
            z = np.zeros((x.shape[0], self.n))
            return z[0] if single else z
        return self._eval(self.perturbation, xi)

    def __call__(self, xi):
        out = self.base(xi)
        if self.perturbation is not None:
            out = out + self.hat(xi)
        if not np.all(np.isfinite(out)):
            raise FreqGeomError(f"frequency map {self.label!r} is not finite at {xi}")
        return out

    def _fd(self, f, x):
        M = x.shape[0]
        J = np.empty((M, self.n, self.dim))
        for j in range(self.dim):
            h = 1e-6 * np.maximum(1.0, np.abs(x[:, j]))
            xp, xm = x.copy(), x.copy()
            xp[:, j] += h
            xm[:, j] -= h
            fp = np.asarray(f(xp), float).reshape(M, self.n)
            fm = np.asarray(f(xm), float).reshape(M, self.n)
            J[:, :, j] = (fp - fm) / (2 * h[:, None])
        return J

    def jacobian(self, xi, include_perturbation=True):
        """``d omega / d xi`` as (n, dim), or (M, n, dim) for a batch."""
        x, single = _as_batch(xi, self.dim)
        if self.jac is not None:
            J = np.asarray(self.jac(x), dtype=float).reshape(x.shape[0], self.n, self.dim)
        else:
            J = self._fd(self.fn, x)
        if include_perturbation and self.perturbation is not None:
            if self.perturbation_jac is not None:
                J = J + np.asarray(self.perturbation_jac(x), float).reshape(J.shape)
            else:
                J = J + self._fd(self.perturbation, x)
        return J[0] if single else J

    # construction helpers
    def unperturbed(self) -> "FreqMap":
        return FreqMap(self.fn, self.n, self.dim, self.jac, label=self.label)

    def perturbed(self, perturbation, perturbation_jac=None) -> "FreqMap":
        return FreqMap(self.fn, self.n, self.dim, self.jac, perturbation, perturbation_jac,
                       self.label)

    def components(self, index) -> "FreqMap":
        """The map restricted to the output components ``index``."""
        index = list(index)
        fn, jac, hat, hjac = self.fn, self.jac, self.perturbation, self.perturbation_jac
        return FreqMap(
            lambda x: np.asarray(fn(x), float).reshape(x.shape[0], -1)[:, index],
            len(index), self.dim,
            None if jac is None else (lambda x: np.asarray(jac(x), float)[:, index, :]),
            None if hat is None else
            (lambda x: np.asarray(hat(x), float).reshape(x.shape[0], -1)[:, index]),
            None if hjac is None else (lambda x: np.asarray(hjac(x), float)[:, index, :]),
            self.label,
        )

    @classmethod
    def from_expressions(cls, exprs, dim=None, label=""):
        """Build a map from expression strings in the variables ``xi1 .. xid``.

        ``xi`` is accepted as an alias of ``xi1`` when ``dim == 1``.  The
        Jacobian is obtained symbolically.
        """
        exprs = [exprs] if isinstance(exprs, str) else list(exprs)
        dim = int(dim if dim is not None else len(exprs))
        syms = sympy.symbols(" ".join(f"xi{i + 1}" for i in range(dim)) + " _pad")[:dim]
        local = {f"xi{i + 1}": s for i, s in enumerate(syms)}
        if dim == 1:
            local["xi"] = syms[0]
        parsed = [sympy.sympify(e, locals=local) for e in exprs]
        free = set().union(*(p.free_symbols for p in parsed)) - set(syms)
        if free:
            raise ValueError(f"unknown symbols in frequency map: {sorted(map(str, free))}")
        f_num = sympy.lambdify(syms, parsed, "numpy")
        jac_exprs = [[sympy.diff(p, s) for s in syms] for p in parsed]
        j_num = sympy.lambdify(syms, jac_exprs, "numpy")
        n = len(parsed)

        def fn(x):
            cols = f_num(*x.T)
            return np.stack([np.broadcast_to(np.asarray(c, float), (x.shape[0],))
                             for c in cols], axis=1)

        def jac(x):
            rows = j_num(*x.T)
            out = np.empty((x.shape[0], n, dim))
            for i in range(n):
                for j in range(dim):
                    out[:, i, j] = np.broadcast_to(np.asarray(rows[i][j], float),
                                                   (x.shape[0],))
            return out

        return cls(fn, n, dim, jac, label=label or ", ".join(exprs))

    @classmethod
    def from_table(cls, axes, values, method="cubic", label="table"):
        """Interpolate values given on a tensor grid: ``values`` has shape
        ``(len(axes[0]), ..., len(axes[d-1]), n)``."""
        axes = [np.asarray(a, float) for a in axes]
        values = np.asarray(values, float)
        n = values.shape[-1]
        interp = RegularGridInterpolator(axes, values, method=method)
        return cls(lambda x: interp(x), n, len(axes), label=label)


def _box(box):
    lower, upper = (np.atleast_1d(np.asarray(b, dtype=float)) for b in box)
    if lower.shape != upper.shape or np.any(lower >= upper):
        raise ValueError("box must be (lower, upper) with lower < upper componentwise")
    return lower, upper


def _box_grid(lower, upper, per_axis):
    axes = [np.linspace(lo, hi, per_axis) for lo, hi in zip(lower, upper)]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=1)


# -- rank tests ---------------------------------------------------------------------

def _num_rank(A, rel=1e-8):
    sv = np.linalg.svd(np.atleast_2d(A), compute_uv=False)
    if sv.size == 0 or sv[0] == 0:
        return 0
    return int(np.sum(sv > rel * sv[0]))


def rank_tests(fmap: FreqMap, xi):
    """Numerical ranks of ``d omega`` and of ``(d omega^T, omega^T)`` at ``xi``.

    Singular values below ``1e-8`` times the largest one count as zero.
    """
    J = fmap.jacobian(xi)
    w = fmap(xi)
    return _num_rank(J), _num_rank(np.column_stack([J, w]))


# -- Brouwer degree -------------------------------------------------------------------

@dataclass
class DegreeResult:
    degree: int
    boundary_margin: float
    level: int
    preimages: np.ndarray
    signs: np.ndarray
    target: np.ndarray

    def as_dict(self):
        return {"degree": self.degree, "boundary_margin": self.boundary_margin,
                "level": self.level, "preimages": self.preimages.tolist(),
                "signs": self.signs.tolist(), "target": self.target.tolist()}


def _boundary_points(lower, upper, per_edge):
    d = lower.size
    if d == 1:
        return np.array([[lower[0]], [upper[0]]])
    pts = []
    for axis in range(d):
        others = [i for i in range(d) if i != axis]
        face = _box_grid(lower[others], upper[others], per_edge)
        for val in (lower[axis], upper[axis]):
            p = np.empty((face.shape[0], d))
            p[:, others] = face
            p[:, axis] = val
            pts.append(p)
    return np.concatenate(pts)


def boundary_margin(fmap: FreqMap, box, target, per_edge=257):
    """Minimum of ``|omega(xi) - target|`` over a dense sampling of the box boundary."""
    lower, upper = _box(box)
    pts = _boundary_points(lower, upper, per_edge)
    return float(np.linalg.norm(fmap(pts) - np.asarray(target, float), axis=1).min())


def _newton_batch(fmap, x0, target, lower, upper, iters=60, tol=1e-13):
    """Damped Newton from many starts at once; returns (x, converged)."""
    x = x0.copy()
    width = upper - lower
    scale = 1.0 + np.abs(target).max()
    done = np.zeros(x.shape[0], dtype=bool)
    for _ in range(iters):
        act = ~done
        if not np.any(act):
            break
        xa = x[act]
        F = fmap(xa) - target
        res = np.abs(F).max(axis=1)
        ok = res <= tol * scale
        idx = np.flatnonzero(act)
        done[idx[ok]] = True
        if np.all(ok):
            break
        J = fmap.jacobian(xa)
        with np.errstate(all="ignore"):
            try:
                step = np.linalg.solve(J, F[..., None])[..., 0]
            except np.linalg.LinAlgError:
                step = np.stack([np.linalg.lstsq(Ji, Fi, rcond=None)[0] for Ji, Fi in zip(J, F)])
        step = np.where(np.isfinite(step), step, 0.0)
        # limit steps to half the box so starts do not fly off
        lim = np.abs(step / (0.5 * width)).max(axis=1, keepdims=True)
        step = step / np.maximum(lim, 1.0)
        xa = xa - step
        # starts that leave a slightly enlarged box are abandoned
        out = np.any(xa < lower - 0.05 * width, axis=1) | np.any(xa > upper + 0.05 * width,
                                                                  axis=1)
        x[act] = xa
        done[idx[out & ~ok]] = True
    F = fmap(x) - target
    conv = np.abs(F).max(axis=1) <= 1e3 * tol * scale
    inside = np.all(x >= lower - 1e-12 * width, axis=1) & np.all(x <= upper + 1e-12 * width,
                                                                   axis=1)
    return x, conv & inside


def _preimages(fmap, lower, upper, target, level):
    cells = 2 ** level
    h = (upper - lower) / cells
    centres = _box_grid(lower + h / 2, upper - h / 2, cells)
    x, ok = _newton_batch(fmap, centres, target, lower, upper)
    roots = x[ok]
    if roots.shape[0] == 0:
        return roots
    # merge duplicates found from different starts
    tol = 1e-7 * (upper - lower).max()
    keep = []
    for r in roots[np.lexsort(roots.T[::-1])]:
        if not any(np.abs(r - q).max() <= tol for q in keep):
            keep.append(r)
    return np.array(keep)


def brouwer_degree(fmap: FreqMap, box, target, level=2, max_level=7) -> DegreeResult:
    """Degree of ``omega`` on ``box`` at ``target`` by signed preimage counting.

    Preimages are located by Newton's method from the centres of a uniform
    subdivision with ``2**level`` cells per axis; the subdivision is refined
    until degree and preimage count agree across one refinement.

    Raises
    ------
    DegreeUndefinedError
        If the boundary margin is not positive, a preimage is degenerate, or
        the count does not stabilize by ``max_level``.
    """
    lower, upper = _box(box)
    target = np.atleast_1d(np.asarray(target, dtype=float))
    if fmap.n != fmap.dim or lower.size != fmap.dim or target.size != fmap.n:
        raise ValueError("degree needs a square map matching the box and target dimensions")
    margin = boundary_margin(fmap, (lower, upper), target)
    if not margin > 1e-12 * (1.0 + np.abs(target).max()):
        raise DegreeUndefinedError(
            f"target {target.tolist()} lies on the image of the boundary "
            f"(boundary margin {margin:.3g}); the degree is undefined")
    prev = None
    for L in range(level, max_level + 1):
        roots = _preimages(fmap, lower, upper, target, L)
        if roots.shape[0]:
            dets = np.linalg.det(fmap.jacobian(roots).reshape(-1, fmap.n, fmap.n))
            scale = np.abs(fmap.jacobian(_box_grid(lower, upper, 5))).max() ** fmap.n
            if np.any(np.abs(dets) <= 1e-10 * max(scale, 1e-300)):
                bad = roots[int(np.argmin(np.abs(dets)))]
                raise DegreeUndefinedError(
                    f"degenerate preimage at {bad.tolist()} (Jacobian determinant ~ 0); "
                    "perturb the target")
            signs = np.sign(dets).astype(int)
        else:
            signs = np.zeros(0, dtype=int)
        deg = int(signs.sum())
        if prev is not None and prev[0] == deg and prev[1] == roots.shape[0]:
            return DegreeResult(deg, margin, L, roots, signs, target)
        prev = (deg, roots.shape[0])
    raise DegreeUndefinedError(f"preimage count did not stabilize up to level {max_level}")


# -- dilation solvers -----------------------------------------------------------------

@dataclass
class DilationSolution:
    xi: np.ndarray
    lam: float
    residual: float
    degree: int
    boundary_margin: float
    perturbation_bound: float

    def as_dict(self):
        return {"xi": self.xi.tolist(), "lambda": self.lam, "residual": self.residual,
                "degree": self.degree, "boundary_margin": self.boundary_margin,
                "perturbation_bound": self.perturbation_bound}


def _root(fun, jac, x0):
    sol = optimize.root(fun, x0, jac=jac, method="hybr", options={"xtol": 1e-15})
    return sol.x, sol.success


def solve_dilation(fmap: FreqMap, box, omega0, lam_fn=None, tol=1e-10, grid_per_axis=33,
                   level=2, max_level=7) -> DilationSolution:
    """Find ``xi_*`` with ``omega_*(xi_*) = (1 + lambda(xi_*)) omega0``.

    The unperturbed map must have non-zero degree at ``omega0`` and the
    perturbation ``omega_hat - lambda omega0``, sampled on a grid, must stay
    below the boundary margin; both are checked before solving.

    When the map has one more output than inputs, the last frequency
    component must be constant and ``lam_fn`` is required: the reduced
    system in the first ``n - 1`` components is solved and the last
    component is matched through ``lambda``.
    """
    lower, upper = _box(box)
    omega0 = np.atleast_1d(np.asarray(omega0, float))
    if lam_fn is None:
        lam_fn = lambda x: np.zeros(np.atleast_2d(x).shape[0])  # noqa: E731
    if fmap.n == fmap.dim:
        red = list(range(fmap.n))
    elif fmap.n == fmap.dim + 1:
        red = list(range(fmap.n - 1))
    else:
        raise ValueError("solve_dilation needs n == dim or n == dim + 1")
    base = fmap.unperturbed().components(red)
    deg = brouwer_degree(base, (lower, upper), omega0[red], level, max_level)
    if deg.degree == 0:
        raise NoSolutionGuarantee(f"degree of the unperturbed map at {omega0.tolist()} is 0")

    grid = _box_grid(lower, upper, grid_per_axis)
    lam_grid = np.asarray(lam_fn(grid), float).reshape(-1)
    shift = fmap.hat(grid)[:, red] - lam_grid[:, None] * omega0[red]
    sigma = float(np.linalg.norm(shift, axis=1).max())
    if not sigma < deg.boundary_margin:
        raise NoSolutionGuarantee(
            f"perturbation bound {sigma:.3g} is not below the boundary margin "
            f"{deg.boundary_margin:.3g}; the degree argument does not apply")

    full = fmap.components(red)

    def fun(x):
        lam = float(np.asarray(lam_fn(x[None, :]), float).reshape(-1)[0])
        return full(x) - (1.0 + lam) * omega0[red]

    def jac(x):
        # the lambda term is differenced; the map Jacobian is exact when available
        J = full.jacobian(x)
        h = 1e-7
        for j in range(fmap.dim):
            e = np.zeros(fmap.dim)
            e[j] = h
            dl = (np.asarray(lam_fn((x + e)[None, :]), float).reshape(-1)[0]
                  - np.asarray(lam_fn((x - e)[None, :]), float).reshape(-1)[0]) / (2 * h)
            J[:, j] -= dl * omega0[red]
        return J

    best = None
    for start in deg.preimages:
        x, _ = _root(fun, jac, start)
        if np.any(x < lower) or np.any(x > upper):
            continue
        lam = float(np.asarray(lam_fn(x[None, :]), float).reshape(-1)[0])
        res = float(np.linalg.norm(fmap(x) - (1.0 + lam) * omega0))
        if best is None or res < best[2]:
            best = (x, lam, res)
        if res <= tol:
            break
    if best is None or best[2] > tol:
        raise SolverError(f"no solution with residual <= {tol:g} found "
                          f"(best {None if best is None else best[2]})")
    return DilationSolution(best[0], best[1], best[2], deg.degree, deg.boundary_margin, sigma)


@dataclass
class BrunoFamily:
    eta: np.ndarray
    xi: np.ndarray
    lam: np.ndarray
    residual: np.ndarray
    pivot_component: int
    continuation_axis: int
    sigma: float
    fit_constant: float

    def as_dict(self):
        return {"eta": self.eta.tolist(), "xi": self.xi.tolist(), "lambda": self.lam.tolist(),
                "residual": self.residual.tolist(), "pivot_component": self.pivot_component,
                "continuation_axis": self.continuation_axis, "sigma": self.sigma,
                "fit_constant": self.fit_constant}


def bruno_family(fmap: FreqMap, box, xi0, delta0=0.1, count=21, pivot_floor=1e-3,
                 grid_per_axis=21) -> BrunoFamily:
    """One-parameter family of dilations ``omega_*(xi_*(eta)) = (1 + lambda(eta)) omega0``.

    ``omega0 = omega(xi0)``.  The unperturbed map must satisfy the Bruno
    condition at ``xi0``: rank ``n - 1`` for the Jacobian and rank ``n`` once
    ``omega`` is appended.  A pivot frequency component ``j`` with
    ``|omega_j| >= pivot_floor`` and a continuation axis ``i`` are chosen so
    that the reduced ratio map ``omega_tilde / omega_j`` is non-degenerate in
    the remaining parameters; along ``xi_i = xi0_i + eta`` the reduced system
    is solved by continuation and ``lambda = omega_*j(xi_*) / omega0_j - 1``.

    ``fit_constant`` is the smallest ``C`` with ``|lambda| <= C (|eta| + sigma)``
    over the family, ``sigma`` being the sampled sup of ``|omega_hat|``.
    """
    lower, upper = _box(box)
    xi0 = np.atleast_1d(np.asarray(xi0, float))
    n, d = fmap.n, fmap.dim
    if d != n:
        raise ValueError("the Bruno continuation needs as many parameters as frequencies")
    base = fmap.unperturbed()
    r1, r2 = rank_tests(base, xi0)
    if r1 != n - 1:
        raise RankConditionError(f"rank of d omega is {r1}, expected n - 1 = {n - 1}")
    if r2 != n:
        raise RankConditionError(f"rank of (d omega^T, omega^T) is {r2}, expected n = {n}")
    w0 = base(xi0)
    J0 = base.jacobian(xi0)

    best = None
    for j in range(n):
        if abs(w0[j]) < pivot_floor:
            continue
        others = [c for c in range(n) if c != j]
        # d (omega_c / omega_j) = (J_c w_j - w_c J_j) / w_j^2
        R = (J0[others, :] * w0[j] - np.outer(w0[others], J0[j, :])) / w0[j] ** 2
        for i in range(d):
            cols = [c for c in range(d) if c != i]
            sub = R[:, cols]
            smin = np.linalg.svd(sub, compute_uv=False).min() if sub.size else 1.0
            if best is None or smin > best[0]:
                best = (smin, j, i)
    if best is None or best[0] <= 1e-8:
        raise RankConditionError("no pivot makes the reduced ratio map non-degenerate")
    _, j, i = best
    others = [c for c in range(n) if c != j]
    free = [c for c in range(d) if c != i]
    target = w0[others] / w0[j]

    def reduced(xf, xi_i):
        x = np.empty(d)
        x[free] = xf
        x[i] = xi_i
        w = fmap(x)
        return w[others] / w[j] - target, x

    etas = np.linspace(-delta0, delta0, count)
    order = np.argsort(np.abs(etas), kind="stable")
    xis = np.empty((count, d))
    lams = np.empty(count)
    res = np.empty(count)
    start_for = {}
    for idx in order:
        eta = etas[idx]
        # continue from the nearest already solved eta on the same side
        solved = [k for k in start_for if np.sign(etas[k]) in (np.sign(eta), 0)]
        x0 = xi0[free] if not solved else start_for[min(solved, key=lambda k: abs(etas[k] - eta))]
        sol = optimize.root(lambda xf: reduced(xf, xi0[i] + eta)[0], x0, method="hybr",
                            options={"xtol": 1e-14})
        if not sol.success and np.abs(reduced(sol.x, xi0[i] + eta)[0]).max() > 1e-10:
            raise SolverError(f"continuation failed at eta = {eta:g}")
        _, x = reduced(sol.x, xi0[i] + eta)
        if np.any(x < lower - 1e-12) or np.any(x > upper + 1e-12):
            raise SolverError(f"continuation left the box at eta = {eta:g}")
        start_for[idx] = sol.x
        w = fmap(x)
        lam = w[j] / w0[j] - 1.0
        xis[idx] = x
        lams[idx] = lam
        res[idx] = np.linalg.norm(w - (1.0 + lam) * w0)
    grid = _box_grid(lower, upper, grid_per_axis)
    sigma = float(np.linalg.norm(fmap.hat(grid), axis=1).max())
    denom = np.abs(etas) + sigma
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(denom > 0, np.abs(lams) / np.where(denom > 0, denom, 1.0), 0.0)
    return BrunoFamily(etas, xis, lams, res, j, i, sigma, float(ratio.max()))


# -- measures ---------------------------------------------------------------------------

def union_measure(intervals):
    """Merge (m, 2) intervals; returns (merged, total length)."""
    iv = np.asarray(intervals, float).reshape(-1, 2)
    iv = iv[iv[:, 1] > iv[:, 0]]
    if iv.shape[0] == 0:
        return np.zeros((0, 2)), 0.0
    iv = iv[np.argsort(iv[:, 0], kind="stable")]
    merged = [iv[0].copy()]
    for a, b in iv[1:]:
        if a <= merged[-1][1]:
            merged[-1][1] = max(merged[-1][1], b)
        else:
            merged.append(np.array([a, b]))
    merged = np.array(merged)
    return merged, float(np.sum(merged[:, 1] - merged[:, 0]))


@dataclass
class MeasureReport:
    """Bad-set measure on an interval at a finite cutoff."""

    interval: tuple
    measure: float
    K: int
    intervals: np.ndarray
    exponent: float = float("nan")
    scan: list = field(default_factory=list)  # (interval length, measure) pairs used in fits
    admissible: np.ndarray | None = None
    notes: list = field(default_factory=list)

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(["kind", "lower", "upper"])
        for a, b in self.intervals:
            w.writerow(["bad", repr(float(a)), repr(float(b))])
        if self.admissible is not None:
            for a, b in self.admissible:
                w.writerow(["admissible", repr(float(a)), repr(float(b))])
        return buf.getvalue()

    def as_dict(self):
        return {"interval": list(self.interval), "measure": self.measure, "K": self.K,
                "bad_intervals": len(self.intervals), "exponent": self.exponent,
                "scan": [list(p) for p in self.scan], "notes": list(self.notes)}


def bad_set_2d(omega0, alpha, tau, lam0, K):
    """Exact bad intervals in ``[0, lam0]`` for the shifted pair.

    The bad set is the union over ``0 < |k|_1 <= K`` of
    ``{lam : |k1 (omega01 + lam) + k2 omega02| < alpha / (2 |k|^(2 tau + 2))}``.
    """
    w1, w2 = (float(v) for v in omega0)
    kk = l1_ball(2, int(K))
    kk = kk[np.any(kk != 0, axis=1)]
    norm = np.abs(kk).sum(axis=1).astype(float)
    delta = alpha / (2.0 * norm ** (2 * tau + 2))
    f0 = kk[:, 0] * w1 + kk[:, 1] * w2
    out = []
    k1 = kk[:, 0].astype(float)
    lin = k1 != 0
    # k1 != 0: |k1| |lam - c| < delta with c = -f0 / k1
    c = -f0[lin] / k1[lin]
    half = delta[lin] / np.abs(k1[lin])
    a = np.maximum(c - half, 0.0)
    b = np.minimum(c + half, lam0)
    hit = b > a
    out.append(np.column_stack([a[hit], b[hit]]))
    # k1 == 0: the condition does not depend on lam
    if np.any(np.abs(f0[~lin]) < delta[~lin]):
        out.append(np.array([[0.0, lam0]]))
    return union_measure(np.concatenate(out))


def resonance_measure_2d(omega0, alpha, tau, lam0, K, fit_levels=3) -> MeasureReport:
    """Exact finite-K bad measure on ``[0, lam0]`` with an exponent fit.

    The fit regresses ``log meas`` on ``log lam0`` over
    ``lam0, lam0/2, ..., lam0/2**(fit_levels-1)``; the notes record the
    excess ``exponent - 1``.

    Raises
    ------
    HypothesisError
        If ``omega0`` fails the Diophantine scan up to ``K`` or
        ``lam0 > |omega01| / 2``.
    """
    omega0 = np.asarray(omega0, float)
    if omega0.shape != (2,):
        raise ValueError("resonance_measure_2d works with frequency pairs")
    rep = check_dio(omega0, DivisorParams(alpha, tau, int(K)))
    if not rep.passed:
        raise HypothesisError(f"omega0 fails the Diophantine condition at k = {rep.worst_k} "
                              f"(margin {rep.margin:.4g})")
    if not 0 < lam0 <= abs(omega0[0]) / 2:
        raise HypothesisError("lam0 must lie in (0, |omega01| / 2]")
    merged, meas = bad_set_2d(omega0, alpha, tau, lam0, K)
    scan = [(lam0, meas)]
    for level in range(1, fit_levels):
        l = lam0 / 2 ** level
        scan.append((l, bad_set_2d(omega0, alpha, tau, l, K)[1]))
    lams = np.array([p[0] for p in scan])
    ms = np.array([p[1] for p in scan])
    notes = []
    if fit_levels >= 2 and np.all(ms > 0):
        exponent = float(np.polyfit(np.log(lams), np.log(ms), 1)[0])
        notes.append(f"excess exponent {exponent - 1:.4g}")
    else:
        exponent = float("nan")
        if fit_levels >= 2:
            notes.append("a bad set is empty; no exponent fit")
    return MeasureReport((0.0, float(lam0)), meas, int(K), merged, exponent, scan, None, notes)


def _window_h(mu0, mu_hat, omega0):
    def h(lam):
        return (lam * mu0 - mu_hat((1.0 + lam) * omega0)) / (1.0 + lam)
    return h


def dio_window_1d(omega0, nu0, mu0, mu_hat, alpha, tau, sigma, K, monotone_points=2001):
    """Bad and admissible dilation sets in ``I_sigma = [-sigma, sigma]``.

    ``f_k(lam) = <omega0, k> + nu0 - (lam mu0 - mu_hat((1+lam) omega0)) / (1+lam)``
    and ``lam`` is bad when ``|f_k(lam)| < alpha / (2 |k|^(2 tau + 1))`` for some
    ``0 < |k|_1 <= K``.  The ``lam``-dependent part ``h`` is shared by all ``k``
    and must be strictly monotone on ``I_sigma`` (checked on a grid), so each
    bad set is an interval obtained by inverting ``h``.

    ``mu_hat`` maps an n-vector to a scalar (``None`` means zero).
    """
    omega0 = np.atleast_1d(np.asarray(omega0, float))
    if mu0 == 0:
        raise HypothesisError("mu0 = 0: the dilation is not transversal to the resonances")
    if mu_hat is None:
        mu_hat = lambda w: 0.0  # noqa: E731
    if not 0 < sigma < 1:
        raise ValueError("sigma must lie in (0, 1)")
    margin, k = min_margin(omega0, float(nu0), alpha, tau, int(K))
    if margin < 1:
        raise HypothesisError(f"(omega0, nu0) fails the margin test at k = {k} "
                              f"(margin {margin:.4g})")
    h = _window_h(float(mu0), mu_hat, omega0)
    grid = np.linspace(-sigma, sigma, monotone_points)
    hv = np.array([h(l) for l in grid])
    dh = np.diff(hv)
    if not (np.all(dh > 0) or np.all(dh < 0)):
        raise HypothesisError("the dilation term is not monotone on I_sigma; "
                              "sigma or mu_hat is too large")
    lo_h, hi_h = float(hv.min()), float(hv.max())
    increasing = dh[0] > 0

    kk = l1_ball(omega0.size, int(K))
    kk = kk[np.any(kk != 0, axis=1)]
    ck = kk @ omega0 + nu0
    norm = np.abs(kk).sum(axis=1).astype(float)
    delta = alpha / (2.0 * norm ** (2 * tau + 1))
    # bad iff h(lam) in (ck - delta, ck + delta)
    hit = (ck + delta > lo_h) & (ck - delta < hi_h)

    def inverse(v):
        if v <= lo_h:
            return -sigma if increasing else sigma
        if v >= hi_h:
            return sigma if increasing else -sigma
        return optimize.brentq(lambda l: h(l) - v, -sigma, sigma, xtol=1e-15, rtol=1e-15)

    iv = []
    for c, dl in zip(ck[hit], delta[hit]):
        a, b = inverse(c - dl), inverse(c + dl)
        iv.append((min(a, b), max(a, b)))
    merged, meas = union_measure(np.array(iv) if iv else np.zeros((0, 2)))
    admissible = _complement(merged, -sigma, sigma)
    rep = MeasureReport((-float(sigma), float(sigma)), meas, int(K), merged,
                        admissible=admissible)
    rep.notes.append(f"bad fraction {meas / (2 * sigma):.4g}")
    return rep


def _complement(merged, a, b):
    out = []
    cur = a
    for lo, hi in merged:
        if lo > cur:
            out.append((cur, min(lo, b)))
        cur = max(cur, hi)
    if cur < b:
        out.append((cur, b))
    return np.array(out).reshape(-1, 2)


def _intersect(sets, a, b):
    """Intersection of unions of intervals (each a merged (m, 2) array)."""
    cur = np.array([[a, b]])
    for s in sets:
        nxt = []
        for lo, hi in cur:
            for c, d in s:
                x, y = max(lo, c), min(hi, d)
                if y > x:
                    nxt.append((x, y))
        cur = np.array(nxt).reshape(-1, 2)
    return cur


@dataclass
class EllipticDilation:
    lam: np.ndarray
    varpi: np.ndarray
    residual: np.ndarray
    reports: list
    admissible: np.ndarray
    windows: dict

    @property
    def margins(self):
        return np.array([r.margin for r in self.reports])

    def as_dict(self):
        return {"lambda": self.lam.tolist(), "varpi": self.varpi.tolist(),
                "residual": self.residual.tolist(),
                "membership": [r.as_dict() for r in self.reports],
                "admissible": self.admissible.tolist()}


def _invert(omega_hat, w, tol=1e-13):
    """Solve ``v + omega_hat(v) = w`` by Newton from ``v = w``."""
    sol = optimize.root(lambda v: v + omega_hat(v) - w, w, method="hybr",
                        options={"xtol": 1e-15})
    res = float(np.abs(sol.x + omega_hat(sol.x) - w).max())
    if res > tol * (1 + np.abs(w).max()):
        raise SolverError(f"Newton inversion failed near {w.tolist()} (residual {res:.3g})")
    return sol.x


def elliptic_dilation(omega0, beta, M, omega_hat, Omega_hat, box, alpha, tau, sigma, K,
                      lambdas=None, max_points=5, tol=1e-10) -> EllipticDilation:
    """Dilations of ``omega0`` that keep the elliptic non-resonance conditions.

    Normal frequencies are ``Omega(w) = beta + w M`` perturbed by
    ``Omega_hat``; tangential ones are ``w + omega_hat(w)``.  For each
    ``l`` with ``1 <= |l|_1 <= 2`` a window is computed with
    :func:`dio_window_1d`; their intersection is the admissible set.  For
    each chosen ``lam`` the perturbed map is inverted at ``(1 + lam) omega0``
    and the membership of the resulting pair is scanned at
    ``(alpha / 4, 2 tau + 1)`` up to ``K``.
    """
    omega0 = np.atleast_1d(np.asarray(omega0, float))
    beta = np.atleast_1d(np.asarray(beta, float))
    M = np.asarray(M, float).reshape(omega0.size, beta.size)
    lower, upper = _box(box)
    zero_w = lambda w: np.zeros(omega0.size)  # noqa: E731
    zero_W = lambda w: np.zeros(beta.size)  # noqa: E731
    omega_hat = omega_hat or zero_w
    Omega_hat = Omega_hat or zero_W
    ells = ell_set(beta.size)
    for l in ells:
        if np.dot(l, beta) == 0:
            raise HypothesisError(f"<l, beta> = 0 for l = {list(l)}")
    Omega0 = beta + omega0 @ M
    rep0 = check_dio_elliptic(omega0, Omega0, DivisorParams(alpha, tau, int(K)))
    if not rep0.passed:
        raise HypothesisError(f"(omega0, Omega0) fails the elliptic scan: {rep0.as_dict()}")

    def Omega_tilde(w):
        v = _invert(omega_hat, np.asarray(w, float))
        return -omega_hat(v) @ M + Omega_hat(v)

    windows = {}
    for l in ells:
        l_arr = np.asarray(l, float)
        windows[l] = dio_window_1d(omega0, float(l_arr @ Omega0), float(l_arr @ beta),
                                   lambda w, l_arr=l_arr: float(l_arr @ Omega_tilde(w)),
                                   alpha, tau, sigma, K)
    admissible = _intersect([w.admissible for w in windows.values()], -sigma, sigma)
    if lambdas is None:
        lengths = admissible[:, 1] - admissible[:, 0]
        pick = np.argsort(-lengths, kind="stable")[:max_points]
        lambdas = [0.5 * (admissible[p, 0] + admissible[p, 1]) for p in np.sort(pick)]
        if any(lo <= 0 <= hi for lo, hi in admissible):
            lambdas = [0.0] + [l for l in lambdas if l != 0.0][: max_points - 1]
    lams, varpis, res, reports = [], [], [], []
    dp = DivisorParams(alpha / 4, 2 * tau + 1, int(K))
    for lam in lambdas:
        if not any(lo <= lam <= hi for lo, hi in admissible):
            raise HypothesisError(f"lambda = {lam:g} is outside the admissible set")
        w = (1.0 + lam) * omega0
        v = _invert(omega_hat, w)
        if np.any(v < lower) or np.any(v > upper):
            raise SolverError(f"varpi = {v.tolist()} leaves the domain")
        w_star = v + omega_hat(v)
        W_star = beta + v @ M + Omega_hat(v)
        r = float(np.linalg.norm(w_star - w))
        if r > tol:
            raise SolverError(f"residual {r:.3g} exceeds {tol:g} at lambda = {lam:g}")
        lams.append(lam)
        varpis.append(v)
        res.append(r)
        reports.append(check_dio_elliptic(w_star, W_star, dp))
    return EllipticDilation(np.array(lams), np.array(varpis).reshape(-1, omega0.size),
                            np.array(res), reports, admissible, windows)


# -- ratio reduction ----------------------------------------------------------------

def _ratio_map(fmap: FreqMap, Omega: FreqMap):
    if Omega.n != 1 or Omega.dim != fmap.dim:
        raise ValueError("Omega must be a scalar map on the same parameters")

    def fn(x):
        return fmap(x).reshape(x.shape[0], -1) / Omega(x).reshape(x.shape[0], 1)

    def jac(x):
        w = fmap(x).reshape(x.shape[0], -1)
        W = Omega(x).reshape(x.shape[0], 1)
        Jw = fmap.jacobian(x).reshape(x.shape[0], fmap.n, fmap.dim)
        JW = Omega.jacobian(x).reshape(x.shape[0], 1, fmap.dim)
        return Jw / W[:, :, None] - w[:, :, None] * JW / (W ** 2)[:, :, None]

    return FreqMap(fn, fmap.n, fmap.dim, jac, label=f"({fmap.label})/({Omega.label})")


def _check_Omega(Omega, lower, upper, per_axis=33):
    vals = Omega(_box_grid(lower, upper, per_axis)).reshape(-1)
    c = float(np.abs(vals).min())
    if not c > 0 or np.any(np.sign(vals) != np.sign(vals[0])):
        raise HypothesisError(f"Omega vanishes on the box (min |Omega| = {c:.3g})")
    return c


def ratio_degree(fmap: FreqMap, Omega: FreqMap, box, xi0, **kw) -> DegreeResult:
    """Degree of ``omega / Omega`` at ``omega(xi0) / Omega(xi0)``."""
    lower, upper = _box(box)
    _check_Omega(Omega, lower, upper)
    xi0 = np.atleast_1d(np.asarray(xi0, float))
    target = fmap(xi0) / Omega(xi0)[0]
    return brouwer_degree(_ratio_map(fmap, Omega), (lower, upper), target, **kw)


def solve_ratio(fmap: FreqMap, Omega: FreqMap, box, xi0, tol=1e-10, **kw):
    """``xi_*`` with ``(omega_*, Omega_*)(xi_*) = Omega(xi_*) (1 + lam) / Omega0 (omega0, Omega0)``.

    Here ``lam = Omega_hat / Omega`` at ``xi_*``.  Returns
    ``(DilationSolution, Omega_scale)`` where ``Omega_scale = Omega(xi_*) / Omega0``.
    """
    lower, upper = _box(box)
    _check_Omega(Omega, lower, upper)
    xi0 = np.atleast_1d(np.asarray(xi0, float))
    w0 = fmap.base(xi0)
    W0 = float(Omega.base(xi0)[0])
    ratio = _ratio_map(fmap, Omega)
    base_ratio = _ratio_map(fmap.unperturbed(), Omega.unperturbed())
    deg = brouwer_degree(base_ratio, (lower, upper), w0 / W0, **kw)
    if deg.degree == 0:
        raise NoSolutionGuarantee("degree of the ratio map is 0")
    grid = _box_grid(lower, upper, 33)
    sigma = float(np.linalg.norm(ratio(grid) - base_ratio(grid), axis=1).max())
    if not sigma < deg.boundary_margin:
        raise NoSolutionGuarantee(f"ratio perturbation {sigma:.3g} exceeds the boundary "
                                  f"margin {deg.boundary_margin:.3g}")
    best = None
    for start in deg.preimages:
        x, _ = _root(lambda x: ratio(x) - w0 / W0, lambda x: ratio.jacobian(x), start)
        if np.any(x < lower) or np.any(x > upper):
            continue
        res = float(np.linalg.norm(ratio(x) - w0 / W0))
        if best is None or res < best[1]:
            best = (x, res)
    if best is None or best[1] > tol:
        raise SolverError("ratio dilation solve failed")
    x = best[0]
    W = float(Omega.base(x)[0])
    lam = float(Omega.hat(x)[0]) / W
    w_star, W_star = fmap(x), float(Omega(x)[0])
    scale = W / W0 * (1 + lam)
    resid = float(np.linalg.norm(np.append(w_star, W_star) - scale * np.append(w0, W0)))
    return DilationSolution(x, lam, resid, deg.degree, deg.boundary_margin, sigma), W / W0


# -- engine-backed frequency maps --------------------------------------------------

def engine_frequency_map(family, result, label="omega_*"):
    """``omega_*`` of a completed run as a :class:`FreqMap`.

    The perturbation at an arbitrary parameter is obtained by replaying the
    run's schedule on that parameter (:func:`kamtori.kam.replay_frequency`).
    Its derivative is of the size of the drift and is neglected in Newton
    solves; residuals are always evaluated on the full map.
    """
    from .kam import replay_frequency  # local import keeps freqgeom usable without runs
    from .series import Caps

    cfg = result.config
    caps = Caps(cfg.K_max or 4 * result.schedule[0].K, cfg.d_max, cfg.s, cfg.r)
    n = result.omega0.shape[1]
    dim = result.grid.dim

    def hat(x):
        H = family.at(x, caps)
        return replay_frequency(H, result.schedule, cfg) - H.omega

    def fn(x):
        return np.asarray(family.omega_fn(x), float).reshape(x.shape[0], n)

    return FreqMap(fn, n, dim, perturbation=hat,
                   perturbation_jac=lambda x: np.zeros((x.shape[0], n, dim)), label=label)

