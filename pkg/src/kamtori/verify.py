"""Independent checks of a finished run.

Stage flows are integrated numerically (DOP853) from the generating
functions, so the checks do not share the engine's Lie-series truncation.
Angles are carried as a base point plus an accumulated displacement, which
keeps the small displacement free of the round-off of O(1) angle values.
"""

from __future__ import annotations

from dataclasses import dataclass, field
import csv
import io

import numpy as np
from scipy.integrate import solve_ivp

from .series import FTSeries

__all__ = [
    "MapEvaluation", "ResidualReport", "AtlasIntegrationError", "eval_atlas",
    "symplectic_check", "conjugacy_residual", "torus_residual", "map_distance",
    "action_points", "theta_grid",
]

RTOL = 1e-12
ATOL = 1e-300
FD_STEP = 1e-6


class AtlasIntegrationError(RuntimeError):
    pass


@dataclass
class MapEvaluation:
    """Image of a batch of points; ``theta_out`` is reduced mod 2 pi."""

    theta_in: np.ndarray
    I_in: np.ndarray
    displacement: np.ndarray
    I_out: np.ndarray
    stages: list = field(default_factory=list)

    @property
    def theta_out(self):
        return np.mod(self.theta_in + self.displacement, 2 * np.pi)

    @property
    def theta_unwrapped(self):
        return self.theta_in + self.displacement


@dataclass
class ResidualReport:
    """Sup of a residual over an explicit point set, with the settings used."""

    name: str
    sup_residual: float
    grid_size: int
    sample: int
    clean: bool | None = None
    weights: tuple | None = None
    settings: dict = field(default_factory=dict)
    warnings: list = field(default_factory=list)
    details: dict = field(default_factory=dict)
    points: np.ndarray | None = None
    values: np.ndarray | None = None

    @property
    def excluded(self):
        return self.clean is False

    def to_text(self):
        lines = [f"[{self.name}]", f"sample = {self.sample}",
                 f"sup_residual = {self.sup_residual!r}", f"grid_size = {self.grid_size}",
                 f"clean = {self.clean}", f"excluded = {self.excluded}"]
        if self.weights is not None:
            lines.append(f"weights = {self.weights}")
        for k, v in self.settings.items():
            lines.append(f"setting.{k} = {v}")
        for k, v in self.details.items():
            lines.append(f"{k} = {v!r}")
        for w in self.warnings:
            lines.append(f"warning = {w}")
        return "\n".join(lines) + "\n"

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf)
        if self.points is None:
            w.writerow(["point", "residual"])
            return buf.getvalue()
        d = self.points.shape[1]
        w.writerow(["check", "sample"] + [f"x{i + 1}" for i in range(d)] + ["residual"])
        for p, v in zip(self.points, self.values):
            w.writerow([self.name, self.sample] + [repr(float(x)) for x in p] + [repr(float(v))])
        return buf.getvalue()


class _Evaluator:
    """Fast value and gradient of one series at one sample.

    Phases are assembled from per-angle power tables, so a batch costs one
    complex multiply per term instead of one complex exponential.
    """

    def __init__(self, p: FTSeries, sample: int):
        keep = p.coeffs[:, sample] != 0
        self.n = p.n
        self.modes = p.modes[keep]
        self.powers = p.powers[keep]
        self.c = p.coeffs[keep, sample]
        self.kmax = int(np.abs(self.modes).max()) if self.modes.size else 0

    def _phase(self, theta):
        M = theta.shape[0]
        ph = np.ones((M, self.c.size), dtype=complex)
        for d in range(self.n):
            z = np.exp(1j * theta[:, d])
            tab = np.empty((M, 2 * self.kmax + 1), dtype=complex)
            tab[:, self.kmax] = 1.0
            for m in range(1, self.kmax + 1):
                tab[:, self.kmax + m] = tab[:, self.kmax + m - 1] * z
            tab[:, : self.kmax] = np.conj(tab[:, : self.kmax : -1])
            ph *= tab[:, self.modes[:, d] + self.kmax]
        return ph

    def _mono(self, I, skip=None):
        out = np.ones((I.shape[0], self.c.size))
        dmax = int(self.powers.max()) if self.powers.size else 0
        for d in range(self.n):
            e = self.powers[:, d] - (1 if d == skip else 0)
            if not np.any(e > 0):
                continue
            tab = np.ones((I.shape[0], dmax + 1))
            for m in range(1, dmax + 1):
                tab[:, m] = tab[:, m - 1] * I[:, d]
            # negative exponents only occur where the caller's weight vanishes
            out *= tab[:, np.maximum(e, 0)]
        return out

    def value(self, theta, I):
        if self.c.size == 0:
            return np.zeros(theta.shape[0])
        return ((self._phase(theta) * self._mono(I)) @ self.c).real

    def gradients(self, theta, I):
        """``(dF/dtheta, dF/dI)`` as (M, n) arrays."""
        M = theta.shape[0]
        if self.c.size == 0:
            return np.zeros((M, self.n)), np.zeros((M, self.n))
        ph = self._phase(theta)
        mono = self._mono(I)
        pm = ph * mono
        dth = np.stack([(pm @ (1j * self.modes[:, d] * self.c)).real for d in range(self.n)], 1)
        dI = np.zeros((M, self.n))
        for d in range(self.n):
            w = self.powers[:, d] * self.c
            if np.any(w):
                dI[:, d] = ((ph * self._mono(I, skip=d)) @ w).real
        return dth, dI


class _Field:
    """Hamiltonian vector field of one generating function at one sample."""

    def __init__(self, F: FTSeries, sample: int):
        self.ev = _Evaluator(F, sample)

    def __call__(self, theta, I):
        dth, dI = self.ev.gradients(theta, I)
        return dI, -dth


def _flow(field_, theta_base, I0, stage):
    M, n = theta_base.shape

    def rhs(_t, y):
        d = y[: M * n].reshape(M, n)
        I = y[M * n :].reshape(M, n)
        a, b = field_(theta_base + d, I)
        return np.concatenate([a.ravel(), b.ravel()])

    y0 = np.concatenate([np.zeros(M * n), I0.ravel()])
    # absolute tolerance scaled to this stage's motion over unit time
    atol = max(RTOL * float(np.abs(rhs(0.0, y0)).max()), ATOL)
    sol = solve_ivp(rhs, (0.0, 1.0), y0, method="DOP853", rtol=RTOL, atol=atol,
                    first_step=1.0)
    if not sol.success:
        raise AtlasIntegrationError(f"integration of stage {stage} failed: {sol.message}")
    y = sol.y[:, -1]
    return y[: M * n].reshape(M, n), y[M * n :].reshape(M, n), sol.nfev


def eval_atlas(atlas, sample, theta, I, keep_log=False) -> MapEvaluation:
    """Apply ``Phi_0 o ... o Phi_{J-1}`` (last stage first) to a batch of points."""
    theta = np.atleast_2d(np.asarray(theta, dtype=float))
    I = np.atleast_2d(np.asarray(I, dtype=float))
    if theta.shape != I.shape:
        raise ValueError("theta and I batches must have the same shape")
    disp = np.zeros_like(theta)
    cur = I.copy()
    log = []
    for stage in range(len(atlas.gens) - 1, -1, -1):
        f = _Field(atlas.gens[stage], sample)
        d, cur, nfev = _flow(f, theta + disp, cur, stage)
        disp = disp + d
        if keep_log:
            log.append({"stage": stage, "nfev": nfev,
                        "max_step_displacement": float(np.abs(d).max())})
    return MapEvaluation(theta, I, disp, cur, log)


def theta_grid(n, N):
    axes = [2 * np.pi * np.arange(N) / N] * n
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=1)


def action_points(n, radius, count, seed=0):
    """``count`` actions in the l1 ball of ``radius``: the origin first, then seeded draws."""
    rng = np.random.default_rng(seed)
    pts = [np.zeros(n)]
    while len(pts) < count:
        v = rng.uniform(-1, 1, n)
        v *= radius * rng.random() / max(np.abs(v).sum(), 1e-300)
        pts.append(v)
    return np.array(pts)


def _clean_tag(clean, report):
    if clean is False:
        report.warnings.append("sample is not in the final Diophantine set; the identity is "
                               "not claimed here and the value is excluded from acceptance")


def symplectic_check(atlas, sample, points, clean=None) -> ResidualReport:
    """sup over points of max |DPhi^T J DPhi - J| with central differences."""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    M, two_n = points.shape
    n = two_n // 2
    h = FD_STEP
    base_th, base_I = [], []
    for j in range(two_n):
        for sgn in (1.0, -1.0):
            p = points.copy()
            p[:, j] += sgn * h
            base_th.append(p[:, :n])
            base_I.append(p[:, n:])
    th = np.concatenate(base_th)
    Ia = np.concatenate(base_I)
    ev = eval_atlas(atlas, sample, th, Ia)
    # displacement relative to the unperturbed base angle keeps differences exact
    out_th = ev.displacement.reshape(two_n, 2, M, n)
    out_I = ev.I_out.reshape(two_n, 2, M, n)
    D = np.zeros((M, two_n, two_n))
    for j in range(two_n):
        dth = (out_th[j, 0] - out_th[j, 1]) / (2 * h)
        if j < n:
            dth[:, j] += 1.0
        dI = (out_I[j, 0] - out_I[j, 1]) / (2 * h)
        D[:, :n, j] = dth
        D[:, n:, j] = dI
    Jm = np.block([[np.zeros((n, n)), np.eye(n)], [-np.eye(n), np.zeros((n, n))]])
    R = np.einsum("mji,jk,mkl->mil", D, Jm, D) - Jm
    vals = np.abs(R).reshape(M, -1).max(axis=1)
    rep = ResidualReport("symplectic", float(vals.max()) if M else 0.0, M, sample, clean,
                         settings={"fd_step": h, "rtol": RTOL}, points=points, values=vals)
    _clean_tag(clean, rep)
    return rep


def _ham_value(H, sample, theta, I):
    om = H.omega[sample]
    return H.energy[sample] + I @ om + _Evaluator(H.P, sample).value(theta, I)


def conjugacy_residual(H0, H_star, atlas, sample, theta, I, clean=None) -> ResidualReport:
    """sup |H0(Phi(theta, I)) - H_star(theta, I)| over the given real points."""
    theta = np.atleast_2d(theta)
    I = np.atleast_2d(I)
    ev = eval_atlas(atlas, sample, theta, I)
    lhs = _ham_value(H0, sample, ev.theta_unwrapped, ev.I_out)
    rhs = _ham_value(H_star, sample, theta, I)
    vals = np.abs(lhs - rhs)
    scale_ = np.abs(rhs)
    rep = ResidualReport("conjugacy", float(vals.max()), theta.shape[0], sample, clean,
                         settings={"rtol": RTOL}, points=np.hstack([theta, I]), values=vals,
                         details={"sup_abs_H": float(scale_.max()),
                                  "sup_relative": float((vals / (1 + scale_)).max())})
    _clean_tag(clean, rep)
    return rep


def _spectral_derivatives(f, n, N):
    """Partial derivatives along each angle of a periodic field sampled on theta_grid."""
    shape = (N,) * n + f.shape[1:]
    F = np.fft.fftn(f.reshape(shape), axes=tuple(range(n)))
    freq = np.fft.fftfreq(N, d=1.0 / N)
    if N % 2 == 0:
        freq[N // 2] = 0.0
    out = []
    for j in range(n):
        sh = [1] * len(shape)
        sh[j] = N
        d = np.fft.ifftn(1j * freq.reshape(sh) * F, axes=tuple(range(n))).real
        out.append(d.reshape(f.shape))
    return out


def _torus_sup(H0, omega_star, atlas, sample, n, N, drift=None):
    th = theta_grid(n, N)
    ev = eval_atlas(atlas, sample, th, np.zeros_like(th))
    P = H0.P
    Ith = ev.I_out
    arg = ev.theta_unwrapped
    dPdth, dPdI = _Evaluator(P, sample).gradients(arg, Ith)
    dD = _spectral_derivatives(ev.displacement, n, N)
    dI = _spectral_derivatives(Ith, n, N)
    DKw_th = sum(omega_star[j] * dD[j] for j in range(n))
    DKw_I = sum(omega_star[j] * dI[j] for j in range(n))
    # X_H0(K) - DK omega_*, with the identity part of DK cancelled analytically
    shift = -np.asarray(drift) if drift is not None else H0.omega[sample] - omega_star
    res_th = shift + dPdI - DKw_th
    res_I = -dPdth - DKw_I
    vals = np.maximum(np.abs(res_th).max(axis=1), np.abs(res_I).max(axis=1))
    return vals, th, ev


def torus_residual(H0, omega_star, atlas, sample, N=32, clean=None, drift=None) -> ResidualReport:
    """sup_theta |X_H0(K(theta)) - DK(theta) omega_*| for K(theta) = Phi(theta, 0).

    ``DK`` is the spectral derivative on the uniform ``N``-point angle grid.
    The grid is flagged too coarse when halving it changes the sup by more
    than 10%.  Passing ``drift = omega_* - omega`` (as accumulated by the
    engine) avoids the round-off of forming that difference from two O(1)
    frequency values.
    """
    omega_star = np.asarray(omega_star, dtype=float)
    n = omega_star.size
    vals, th, ev = _torus_sup(H0, omega_star, atlas, sample, n, N, drift)
    sup = float(vals.max())
    half, _, _ = _torus_sup(H0, omega_star, atlas, sample, n, max(N // 2, 2), drift)
    sup_half = float(half.max())
    change = abs(sup - sup_half) / sup if sup > 0 else (0.0 if sup_half == 0 else np.inf)
    dk = np.abs(ev.displacement).max()
    rep = ResidualReport("torus", sup, th.shape[0], sample, clean,
                         settings={"N": N, "derivative": "spectral", "rtol": RTOL},
                         points=th, values=vals,
                         details={"sup_half_grid": sup_half, "relative_change": change,
                                  "stable": change <= 0.1, "sup_displacement": float(dk)})
    if change > 0.1:
        rep.warnings.append("angle grid too coarse: halving it changes the residual by "
                            f"{100 * change:.1f}%")
    _clean_tag(clean, rep)
    return rep


def map_distance(atlas, sample, theta, I, rho, r, E0=None, clean=None) -> ResidualReport:
    """sup |W (Phi - id)| with W = diag(1/rho, 1/r); reports the ratio to ``E0``."""
    ev = eval_atlas(atlas, sample, theta, I)
    w = np.hstack([ev.displacement / rho, (ev.I_out - np.atleast_2d(I)) / r])
    vals = np.abs(w).max(axis=1)
    sup = float(vals.max())
    details = {}
    if E0:
        details["ratio_to_E0"] = sup / E0
    rep = ResidualReport("map_distance", sup, vals.size, sample, clean, weights=(rho, r),
                         points=np.hstack([np.atleast_2d(theta), np.atleast_2d(I)]),
                         values=vals, details=details)
    _clean_tag(clean, rep)
    return rep
