"""KAM iteration: schedule, homological equation, Lie transforms and the driver.

A Hamiltonian is ``e(xi) + <omega(xi), I> + P(xi; theta, I)`` stored per
parameter sample.  One step removes the Fourier-truncated linear-in-I part of
``P`` with a generating function obtained from the cut-off small divisors, so
it is defined at every sample; the step is a genuine conjugacy only where the
divisors are clean.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict, replace
import hashlib
import math
import os
import configparser
import csv
import logging

import numpy as np

from .series import (
    Caps, NormParams, FTSeries, add, scale, poisson_bracket, linear_part,
    truncate_fourier, average, majorant_norm, dumps, loads,
)
from .divisors import DivisorParams, extended_inverses, build_Pi
from .grid import ParamGrid

log = logging.getLogger(__name__)

__all__ = [
    "KamError", "SmallnessError", "NestingError", "ScheduleViolation",
    "LieBlowUpError", "PostconditionError",
    "StepParams", "Hamiltonian", "HamiltonianFamily", "SymplecticAtlas",
    "RunConfig", "StepDiagnostics", "KamRun", "LieResult",
    "tau_prime", "init_schedule", "advance_schedule", "nesting_gap",
    "normal_form", "solve_homological", "homological_residual",
    "lie_transform", "kam_step", "run", "replay_frequency", "load_run",
]


class KamError(RuntimeError):
    """Base class of engine refusals and aborts."""


class SmallnessError(KamError):
    def __init__(self, message, required_gamma=None):
        super().__init__(message)
        self.required_gamma = required_gamma


class NestingError(KamError):
    def __init__(self, message, quantities=None):
        super().__init__(message)
        self.quantities = quantities or {}


class ScheduleViolation(KamError):
    def __init__(self, message, step=None, diagnostics=None):
        super().__init__(message)
        self.step = step
        self.diagnostics = diagnostics


class LieBlowUpError(KamError):
    pass


class PostconditionError(KamError):
    pass


# -- schedule -----------------------------------------------------------------

def tau_prime(n, tau, m=0):
    return n + (m + 1) * tau + m


@dataclass(frozen=True)
class StepParams:
    """Parameters of step ``j``; ``alpha``/``tau``/``tau_p`` are global."""

    j: int
    s: float
    rho: float
    r: float
    alpha_j: float
    E: float
    eps: float
    eta: float
    K: int
    alpha: float
    tau: float
    tau_p: float
    n: int

    @property
    def divisors(self) -> DivisorParams:
        return DivisorParams(self.alpha_j, self.tau, self.K)

    @property
    def norm(self) -> NormParams:
        return NormParams(self.s, self.r, self.alpha_j)


def _cutoff_K(E, rho):
    # smallest integer K with exp(-K rho) <= E
    K = math.ceil(-math.log(E) / rho)
    while math.exp(-K * rho) > E:
        K += 1
    while K > 1 and math.exp(-(K - 1) * rho) <= E:
        K -= 1
    return max(int(K), 1)


def init_schedule(s, r, alpha, tau, n, m=0, gamma=None, eps_input=None) -> StepParams:
    """Parameters of step 0.

    ``gamma`` defaults to the smallest admissible value for ``eps_input``
    (so that the schedule starts exactly at the measured perturbation size).

    Raises
    ------
    SmallnessError
        if ``eps_input > alpha r s^tau' gamma`` or if ``E_0 >= 1``.
    """
    if m != 0:
        raise ValueError("only m = 0 parameter regularity is supported")
    if not (s > 0 and r > 0 and 0 < alpha <= 1):
        raise ValueError("need s > 0, r > 0 and 0 < alpha <= 1")
    if not tau > n - 1:
        raise ValueError(f"tau must exceed n - 1 = {n - 1}")
    tp = tau_prime(n, tau, m)
    scale_ = alpha * r * s ** tp
    required = None if eps_input is None else eps_input / scale_
    if gamma is None:
        if required is None:
            raise ValueError("give gamma or the measured perturbation size")
        gamma = required
    if required is not None and eps_input > scale_ * gamma * (1 + 1e-12):
        raise SmallnessError(
            f"perturbation size {eps_input:.6g} exceeds alpha r s^tau' gamma = "
            f"{scale_ * gamma:.6g}; required gamma >= {required:.6g}",
            required_gamma=required,
        )
    rho = s / 20.0
    E = 2.0 * 20.0 ** tp * gamma
    if not 0 < E < 1:
        raise SmallnessError(
            f"E_0 = {E:.6g} is not below 1 (gamma = {gamma:.6g}); "
            f"need gamma < {1 / (2 * 20.0 ** tp):.6g}",
            required_gamma=required,
        )
    a0 = alpha / 2.0
    return StepParams(0, s, rho, r, a0, E, E * a0 * r * rho ** tp, math.sqrt(E),
                      _cutoff_K(E, rho), alpha, tau, tp, n)


def nesting_gap(sp: StepParams):
    """Return ``(lhs, rhs)`` of ``2 K^(tau+1) eps <= (alpha_{j+1} - alpha_j) r``."""
    a_next = (1.0 - 1.0 / 2 ** (sp.j + 3)) * sp.alpha
    return 2.0 * sp.K ** (sp.tau + 1) * sp.eps, (a_next - sp.alpha_j) * sp.r


def advance_schedule(sp: StepParams, c_growth: float) -> StepParams:
    """Parameters of step ``j + 1`` after checking the nesting condition."""
    lhs, rhs = nesting_gap(sp)
    if lhs > rhs:
        raise NestingError(
            f"nesting condition fails at step {sp.j}: 2 K^(tau+1) eps = {lhs:.6g} > "
            f"(alpha_+ - alpha_j) r = {rhs:.6g} (K = {sp.K}, eps = {sp.eps:.6g})",
            {"j": sp.j, "K": sp.K, "eps": sp.eps, "lhs": lhs, "rhs": rhs},
        )
    rho = sp.rho / 2.0
    r = sp.eta * sp.r
    E = c_growth * sp.E ** 1.5
    if not 0 < E < 1:
        raise SmallnessError(f"E_{sp.j + 1} = {E:.6g} is not below 1; c_growth too large")
    a = (1.0 - 1.0 / 2 ** (sp.j + 3)) * sp.alpha
    return StepParams(sp.j + 1, sp.s - 5.0 * sp.rho, rho, r, a, E,
                      E * a * r * rho ** sp.tau_p, math.sqrt(E), _cutoff_K(E, rho),
                      sp.alpha, sp.tau, sp.tau_p, sp.n)


# -- Hamiltonians -------------------------------------------------------------

def normal_form(omega, caps, sample_key=None) -> FTSeries:
    """The series <omega(xi), I> for a frequency table (S, n)."""
    omega = np.atleast_2d(np.asarray(omega, dtype=float))
    S, n = omega.shape
    modes = np.zeros((n, n), dtype=np.int64)
    powers = np.eye(n, dtype=np.int64)
    out = FTSeries.zero(n, S, caps, True, sample_key)
    return add(out, FTSeries(n, modes, powers, omega.T.astype(complex), caps, True, 0.0,
                             sample_key))


def _split_constant(P: FTSeries):
    const = np.real(P.coefficient(np.zeros(P.n, int), np.zeros(P.n, int)))
    keep = np.any(P.modes != 0, axis=1) | np.any(P.powers != 0, axis=1)
    return P.select(keep), const


@dataclass
class Hamiltonian:
    """``energy + <omega, I> + P`` with a per-sample frequency table (S, n)."""

    omega: np.ndarray
    P: FTSeries
    energy: np.ndarray | None = None

    def __post_init__(self):
        self.omega = np.atleast_2d(np.asarray(self.omega, dtype=float))
        if self.omega.shape != (self.P.n_samples, self.P.n):
            raise ValueError("frequency table must be (samples, n)")
        if not np.all(np.isfinite(self.omega)):
            raise ValueError("frequencies must be finite")
        P, const = _split_constant(self.P)
        self.P = P
        base = np.zeros(P.n_samples) if self.energy is None else np.asarray(self.energy, float)
        self.energy = base + const

    @property
    def n(self):
        return self.P.n

    def series(self) -> FTSeries:
        """Full Hamiltonian as one series (energy included)."""
        z = np.zeros(self.n, dtype=np.int64)
        e = FTSeries.from_terms(self.n, self.P.n_samples, [(z, z, self.energy)], self.P.caps,
                                True, self.P.sample_key)
        return add(add(normal_form(self.omega, self.P.caps, self.P.sample_key), self.P), e)

    def restrict_samples(self, index):
        index = np.atleast_1d(np.asarray(index))
        return Hamiltonian(self.omega[index], self.P.restrict_samples(index), self.energy[index])


@dataclass
class HamiltonianFamily:
    """A parameter family defined by callables.

    ``omega_fn`` maps an (S, d) array of parameters to (S, n) frequencies;
    ``terms`` is a list of ``(k, l, coeff_fn)`` with ``coeff_fn`` mapping the
    parameters to (S,) complex coefficients.  Real Hamiltonians list only one
    of each ``(k, l)``, ``(-k, l)`` pair when ``symmetrize`` is set, the
    conjugate partner being added automatically.
    """

    n: int
    omega_fn: object
    terms: list
    symmetrize: bool = False

    def at(self, samples, caps, sample_key=None) -> Hamiltonian:
        samples = np.atleast_2d(np.asarray(samples, dtype=float))
        S = samples.shape[0]
        omega = np.asarray(self.omega_fn(samples), dtype=float).reshape(S, self.n)
        built = []
        for k, l, fn in self.terms:
            c = np.broadcast_to(np.asarray(fn(samples), dtype=complex), (S,)).copy()
            built.append((tuple(k), tuple(l), c))
            if self.symmetrize and any(k):
                built.append((tuple(-v for v in k), tuple(l), np.conj(c)))
        P = FTSeries.from_terms(self.n, S, built, caps, True, sample_key)
        return Hamiltonian(omega, P)


@dataclass
class SymplecticAtlas:
    """Generating functions whose time-1 flows compose to the normalizing map.

    The map after ``J`` stages is ``Phi_0 o Phi_1 o ... o Phi_{J-1}``.
    """

    gens: list = field(default_factory=list)
    params: list = field(default_factory=list)

    def __len__(self):
        return len(self.gens)

    def append(self, F, sp):
        self.gens.append(F)
        self.params.append(sp)


# -- homological equation and Lie series ----------------------------------------

def solve_homological(R_K: FTSeries, omega, dp: DivisorParams) -> FTSeries:
    """Generating function with ``F_k = g_k R_k`` for ``0 < |k| <= K`` and ``F_0 = 0``."""
    if R_K.n_terms and R_K.max_degree() > 1:
        raise ValueError("right-hand side must have Taylor degree <= 1")
    keep = np.any(R_K.modes != 0, axis=1) & (np.abs(R_K.modes).sum(axis=1) <= dp.K)
    R = R_K.select(keep)
    if R.n_terms == 0:
        return R
    g, _, _ = extended_inverses(omega, R.modes, dp.alpha, dp.tau)
    return R._like(R.modes, R.powers, R.coeffs * g, residual=0.0)


def homological_residual(F: FTSeries, R_K: FTSeries, omega) -> FTSeries:
    """``{N, F} + R_K - [R_K]`` with ``N = <omega, I>``."""
    N = normal_form(omega, F.caps, F.sample_key)
    return add(add(poisson_bracket(N, F), R_K), scale(average(R_K), -1.0))


@dataclass
class LieResult:
    series: FTSeries
    tail: float
    term_norms: list


def _adjoint_sum(G, F, weights, norm, check_growth=True):
    """``sum_j weights[j] ad_F^j G`` for ``j < len(weights) - 1``.

    The last weight is used only for the tail estimate (first omitted term).
    """
    total = scale(G, weights[0])
    term = G
    norms = [majorant_norm(G, norm)]
    tail = 0.0
    for j in range(1, len(weights)):
        if term.n_terms == 0 and term.residual == 0.0:
            break
        term = poisson_bracket(term, F)
        nj = majorant_norm(term, norm)
        wn = abs(weights[j]) * nj
        if j == len(weights) - 1:
            tail = wn
            break
        if check_growth and j >= 2 and norms[-1] > 0 and wn > norms[-1]:
            raise LieBlowUpError(
                f"adjoint term {j} grows ({wn:.3g} > {norms[-1]:.3g}); "
                "the generating function is too large for the chosen caps")
        norms.append(wn)
        total = add(total, scale(term, weights[j]))
    return total, tail, norms


def lie_transform(H: FTSeries, F: FTSeries, j_max: int, norm: NormParams | None = None,
                  check_growth=True) -> LieResult:
    """Truncated Lie series ``H o X_F^1 = sum_{j <= j_max} ad_F^j H / j!``.

    ``ad_F H = {H, F}``.  The tail is the norm of the first omitted term.
    """
    if j_max < 1:
        raise ValueError("j_max must be >= 1")
    norm = norm or NormParams(1.0, 1.0)
    w = [1.0 / math.factorial(j) for j in range(j_max + 2)]
    total, tail, norms = _adjoint_sum(H, F, w, norm, check_growth)
    return LieResult(total, tail, norms)


# -- one step -----------------------------------------------------------------

@dataclass
class StepDiagnostics:
    j: int
    clean: np.ndarray
    margins: np.ndarray
    omega_hat: np.ndarray
    energy_shift: np.ndarray
    eps_next: np.ndarray
    eps_schedule_next: float
    measured_E_next: np.ndarray
    lie_tail: float
    crosscheck: np.ndarray | None
    crosscheck_tol: float
    homological: np.ndarray
    residual: float
    n_terms: int


@dataclass
class RunConfig:
    """Scheme and engine settings.  ``stop_tol`` is relative to ``eps_0``."""

    s: float
    r: float
    alpha: float
    tau: float
    m: int = 0
    gamma: float | None = None
    c_growth: float = 10.0
    j_max: int = 6
    stop_tol: float = 1e-14
    j_stop: int = 8
    K_check_mult: int = 4
    K_max: int | None = None
    d_max: int = 3
    prune_tol: float = 1e-18
    crosscheck: bool = True

    def __post_init__(self):
        for name in ("s", "r", "alpha", "tau", "c_growth", "stop_tol"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        for name in ("j_max", "j_stop", "K_check_mult", "d_max"):
            if not getattr(self, name) >= 1:
                raise ValueError(f"{name} must be >= 1")
        if self.m != 0:
            raise ValueError("only m = 0 is supported")


def kam_step(H: Hamiltonian, sp: StepParams, cfg: RunConfig, *, enforce=True,
             clean=None, margins=None):
    """One normalization step.

    Returns ``(H_next, F, sp_next, diagnostics)``.  ``enforce`` turns on the
    cross-check and the schedule abort (both are restricted to clean samples).
    """
    P = H.P
    S = P.n_samples
    if clean is None:
        clean, margins = build_Pi(None, H.omega, sp.divisors)
    sp_next = advance_schedule(sp, cfg.c_growth)
    norm_next = NormParams(sp_next.s, sp_next.r)

    R = linear_part(P)
    R_K, _ = truncate_fourier(R, sp.K)
    avg = average(R_K)
    F = solve_homological(R_K, H.omega, sp.divisors)

    hom = homological_residual(F, R_K, H.omega)
    rk = majorant_norm(R_K, sp.norm, per_sample=True)
    hn = majorant_norm(hom, sp.norm, per_sample=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        hom_rel = np.where(rk > 0, hn / np.where(rk > 0, rk, 1.0), 0.0)

    jm = cfg.j_max
    w1 = [1.0 / (math.factorial(j) * (j + 1) * (j + 2)) for j in range(jm + 1)]
    w2 = [1.0 / (math.factorial(j) * (j + 2)) for j in range(jm + 1)]
    w3 = [1.0 / math.factorial(j) for j in range(jm + 2)]
    A, t1, _ = _adjoint_sum(poisson_bracket(avg, F), F, w1, norm_next, enforce)
    B, t2, _ = _adjoint_sum(poisson_bracket(R_K, F), F, w2, norm_next, enforce)
    C, t3, _ = _adjoint_sum(add(P, scale(R_K, -1.0)), F, w3, norm_next, enforce)
    P_next = add(add(A, B), C)
    tail = t1 + t2 + t3

    zero = np.zeros(P.n, dtype=np.int64)
    omega_hat = np.stack([np.real(avg.coefficient(zero, np.eye(P.n, dtype=np.int64)[i]))
                          for i in range(P.n)], axis=1).reshape(S, P.n)
    e_shift = np.real(avg.coefficient(zero, zero))

    cross = None
    cross_tol = 0.0
    if enforce and cfg.crosscheck and np.any(clean):
        full = add(normal_form(H.omega, P.caps, P.sample_key), P)
        lt = lie_transform(full, F, jm, norm_next, check_growth=False)
        rhs = add(add(normal_form(H.omega, P.caps, P.sample_key), avg), P_next)
        diff = add(lt.series, scale(rhs, -1.0))
        cross = majorant_norm(diff, norm_next, per_sample=True)
        floor = 64 * np.finfo(float).eps * majorant_norm(full, norm_next)
        cross_tol = lt.tail + tail + lt.series.residual + P_next.residual + floor

    P_next = P_next.prune(cfg.prune_tol, sp_next.s, sp_next.r)
    H_next = Hamiltonian(H.omega + omega_hat, P_next, H.energy + e_shift)
    eps_next = majorant_norm(H_next.P, norm_next, per_sample=True)
    scale_next = sp_next.alpha_j * sp_next.r * sp_next.rho ** sp_next.tau_p
    diag = StepDiagnostics(
        sp.j, clean, margins, omega_hat, e_shift, eps_next, sp_next.eps,
        eps_next / scale_next, tail, cross, cross_tol, hom_rel,
        H_next.P.residual, H_next.P.n_terms,
    )
    if enforce and np.any(clean):
        worst = float(eps_next[clean].max())
        if worst > sp_next.eps:
            raise ScheduleViolation(
                f"step {sp.j}: measured |P_+| = {worst:.6g} exceeds eps_+ = "
                f"{sp_next.eps:.6g} at a clean sample (raise c_growth, caps or j_max)",
                step=sp.j, diagnostics=diag)
    return H_next, F, sp_next, diag


# -- driver -------------------------------------------------------------------

@dataclass
class KamRun:
    grid: ParamGrid
    config: RunConfig
    omega0: np.ndarray
    omega_star: np.ndarray
    drift: np.ndarray
    updates: list
    energy: np.ndarray
    atlas: SymplecticAtlas
    schedule: list
    history: list
    margins: list
    pi_star: np.ndarray
    pi_star_margins: np.ndarray
    K_check: int
    H_final: Hamiltonian
    eps0_input: float
    checks: dict
    notes: list = field(default_factory=list)
    status: str = "complete"

    @property
    def eps_final(self):
        return self.schedule[-1].eps

    def clean_flags(self, j):
        return self.margins[j] >= 1.0

    def H_star(self) -> Hamiltonian:
        return self.H_final


def _history_row(j, sp, H, clean, margins, drift, diag, eps0):
    meas = majorant_norm(H.P, sp.norm, per_sample=True)
    row = {
        "j": j,
        "eps_measured": float(meas[clean].max()) if np.any(clean) else float("nan"),
        "eps_measured_all": float(meas.max()),
        "eps_schedule": sp.eps,
        "s": sp.s, "rho": sp.rho, "r": sp.r, "alpha_j": sp.alpha_j, "E": sp.E, "K": sp.K,
        "clean_fraction": float(np.mean(clean)),
        "drift_max": float(np.abs(drift).sum(axis=1).max()),
        "update_max": float("nan"), "lie_tail": float("nan"),
        "crosscheck_max": float("nan"), "crosscheck_tol": float("nan"),
        "homological_max": float("nan"),
    }
    if diag is not None:
        cm = diag.crosscheck
        row.update({
            "update_max": float(np.abs(diag.omega_hat).sum(axis=1).max()),
            "lie_tail": float(diag.lie_tail),
            "crosscheck_max": float(cm[clean].max()) if cm is not None and np.any(clean)
            else float("nan"),
            "crosscheck_tol": float(diag.crosscheck_tol),
            "homological_max": float(diag.homological[clean].max()) if np.any(clean)
            else float("nan"),
        })
    return row


HISTORY_COLUMNS = [
    "j", "eps_measured", "eps_measured_all", "eps_schedule", "s", "rho", "r", "alpha_j",
    "E", "K", "clean_fraction", "drift_max", "update_max", "lie_tail", "crosscheck_max",
    "crosscheck_tol", "homological_max",
]


def _checked_schedule(cfg, n, eps_in):
    sp = init_schedule(cfg.s, cfg.r, cfg.alpha, cfg.tau, n, cfg.m, cfg.gamma, eps_in)
    if cfg.c_growth * math.sqrt(sp.E) >= 1:
        raise SmallnessError(
            f"c_growth sqrt(E_0) = {cfg.c_growth * math.sqrt(sp.E):.4g} >= 1: the schedule "
            f"does not contract; need gamma < "
            f"{1 / (cfg.c_growth ** 2 * 2 * 20.0 ** sp.tau_p):.6g}",
            required_gamma=eps_in / (cfg.alpha * cfg.r * cfg.s ** sp.tau_p))
    return sp


def run(H0: Hamiltonian, grid: ParamGrid, cfg: RunConfig, out_dir=None,
        resume_from=None) -> KamRun:
    """Iterate until ``eps_j < stop_tol eps_0`` or ``j = j_stop``.

    With ``out_dir`` the state is written after each step; ``resume_from=j``
    restarts from the stored state of step ``j``.
    """
    n = H0.n
    if len(grid) != H0.P.n_samples:
        raise ValueError("grid and Hamiltonian sample counts differ")
    eps_in = majorant_norm(H0.P, s=cfg.s, r=cfg.r)
    if eps_in == 0.0:
        # nothing to normalize; any admissible gamma gives the same (empty) iteration
        tp = tau_prime(n, cfg.tau, cfg.m)
        gamma = cfg.gamma if cfg.gamma is not None else 1e-3 / (2 * 20.0 ** tp)
        sp0 = init_schedule(cfg.s, cfg.r, cfg.alpha, cfg.tau, n, cfg.m, gamma, None)
    else:
        sp0 = _checked_schedule(cfg, n, eps_in)
    K_max = cfg.K_max or 4 * sp0.K
    caps = Caps(K_max, cfg.d_max, cfg.s, cfg.r)
    key = grid.fingerprint()
    H = Hamiltonian(H0.omega, replace(H0.P.with_caps(caps), sample_key=key), H0.energy)
    omega0 = H.omega.copy()
    drift = np.zeros_like(omega0)
    updates, history, margins_all = [], [], []
    atlas = SymplecticAtlas()
    schedule = [sp0]
    sp = sp0
    start = 0
    if resume_from is not None:
        if out_dir is None:
            raise ValueError("resuming needs the run directory")
        state = _load_state(out_dir, resume_from, caps, key)
        for j in range(resume_from):
            sp = advance_schedule(sp, cfg.c_growth)
            schedule.append(sp)
        H = Hamiltonian(omega0 + state["drift"], state["P"], state["energy"])
        drift = state["drift"]
        updates, history, margins_all = state["updates"], state["history"], state["margins"]
        atlas = state["atlas"]
        start = resume_from
    if out_dir is not None:
        _write_setup(out_dir, cfg, grid, H0, caps)

    j = start
    status = "complete"
    while True:
        clean, margins = build_Pi(None, H.omega, sp.divisors)
        lhs, rhs = nesting_gap(sp)
        if lhs > rhs:
            raise NestingError(f"nesting condition fails at step {sp.j}: 2 K^(tau+1) eps = "
                               f"{lhs:.6g} > (alpha_+ - alpha_j) r = {rhs:.6g}",
                               {"lhs": lhs, "rhs": rhs, "K": sp.K, "eps": sp.eps})
        finished = (H.P.n_terms == 0 and H.P.residual == 0.0) or j >= cfg.j_stop
        if not finished and j > 0 and sp.eps < cfg.stop_tol * sp0.eps:
            finished = True
        if finished:
            history.append(_history_row(j, sp, H, clean, margins, drift, None, sp0.eps))
            margins_all.append(margins)
            if out_dir is not None:
                _write_state(out_dir, j, H, drift, updates, margins)
            break
        try:
            H_next, F, sp_next, diag = kam_step(H, sp, cfg, clean=clean, margins=margins)
        except KamError as exc:
            history.append(_history_row(j, sp, H, clean, margins, drift,
                                        getattr(exc, "diagnostics", None), sp0.eps))
            if out_dir is not None:
                _write_history(out_dir, history)
                _write_manifest(out_dir, cfg, schedule, "aborted", str(exc), eps_in)
            raise
        history.append(_history_row(j, sp, H, clean, margins, drift, diag, sp0.eps))
        margins_all.append(margins)
        if out_dir is not None:
            _write_state(out_dir, j, H, drift, updates, margins)
        updates.append(diag.omega_hat)
        drift = drift + diag.omega_hat
        atlas.append(F, sp)
        H = Hamiltonian(omega0 + drift, H_next.P, H_next.energy)
        sp = sp_next
        schedule.append(sp)
        j += 1
        if out_dir is not None:
            _write_gen(out_dir, j - 1, F)
            _write_history(out_dir, history)
            _write_manifest(out_dir, cfg, schedule, "running", f"step {j - 1} done", eps_in)

    omega_star = omega0 + drift
    K_check = cfg.K_check_mult * schedule[-1].K
    dp_star = DivisorParams(cfg.alpha, cfg.tau, K_check)
    pi_star, pi_margins = build_Pi(grid, omega_star, dp_star, channel="in_Pi_star")
    for jj, m in enumerate(margins_all):
        grid.set_flag(f"clean_{jj}", m >= 1.0)

    checks = _postconditions(omega0, drift, updates, schedule, margins_all, pi_star, cfg)
    notes = []
    if not np.any(pi_star):
        notes.append("no sample is Diophantine at the final check: the conjugacy "
                     "conclusion is vacuous for this run")
    result = KamRun(grid, cfg, omega0, omega_star, drift, updates, H.energy, atlas, schedule,
                    history, margins_all, pi_star, pi_margins, K_check, H, eps_in, checks,
                    notes, status)
    if out_dir is not None:
        _write_history(out_dir, history)
        _write_omega_star(out_dir, result)
        _write_manifest(out_dir, cfg, schedule, status, "; ".join(notes), eps_in, checks)
    failed = [k for k, v in checks.items() if not v]
    if failed:
        raise PostconditionError(f"post-condition checks failed: {failed}")
    return result


def _postconditions(omega0, drift, updates, schedule, margins_all, pi_star, cfg):
    sp0 = schedule[0]
    l1 = np.abs(drift).sum(axis=1)
    checks = {"drift_total": bool(np.all(l1 <= 2 * sp0.eps / sp0.r))}
    ok = True
    acc = np.zeros_like(drift)
    partial = [acc]
    for u in updates:
        acc = acc + u
        partial.append(acc)
    for j, sp in enumerate(schedule):
        rest = np.abs(drift - partial[j]).sum(axis=1)
        ok &= bool(np.all(rest <= 2 * sp.eps / sp.r))
    checks["drift_per_step"] = ok
    checks["telescoping"] = bool(np.array_equal(partial[-1], drift))
    checks["containment"] = bool(all(np.all(~pi_star | (m >= 1.0)) for m in margins_all))
    return checks


def replay_frequency(H_single: Hamiltonian, schedule, cfg: RunConfig):
    """Frequency ``omega_*`` of a single-sample Hamiltonian using a fixed schedule.

    No aborts are raised; this evaluates the limit frequency map at parameters
    outside the run's sample grid.
    """
    H = H_single
    K_max = cfg.K_max or 4 * schedule[0].K
    caps = Caps(K_max, cfg.d_max, cfg.s, cfg.r)
    H = Hamiltonian(H.omega, H.P.with_caps(caps), H.energy)
    omega0 = H.omega.copy()
    drift = np.zeros_like(omega0)
    for sp in schedule[:-1]:
        if H.P.n_terms == 0:
            break
        clean = np.zeros(H.P.n_samples, dtype=bool)
        H_next, _, _, diag = kam_step(H, sp, cfg, enforce=False, clean=clean,
                                      margins=np.zeros(H.P.n_samples))
        drift = drift + diag.omega_hat
        H = Hamiltonian(omega0 + drift, H_next.P, H_next.energy)
    return omega0 + drift


# -- persistence ----------------------------------------------------------------

def _fmt(x):
    return repr(float(x))


def _write_setup(out_dir, cfg, grid, H0, caps):
    os.makedirs(os.path.join(out_dir, "atlas"), exist_ok=True)
    os.makedirs(os.path.join(out_dir, "state"), exist_ok=True)
    with open(os.path.join(out_dir, "samples.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["index"] + [f"xi{i + 1}" for i in range(grid.dim)])
        for i, x in enumerate(grid.samples):
            w.writerow([i] + [_fmt(v) for v in x])


def _write_gen(out_dir, j, F):
    with open(os.path.join(out_dir, "atlas", f"F_{j}.fts"), "w") as fh:
        fh.write(dumps(F))


def _write_table(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def _write_state(out_dir, j, H, drift, updates, margins):
    base = os.path.join(out_dir, "state")
    with open(os.path.join(base, f"P_{j}.fts"), "w") as fh:
        fh.write(dumps(H.P))
    n = drift.shape[1]
    rows = [[i] + [_fmt(v) for v in drift[i]] + [_fmt(H.energy[i]), _fmt(margins[i])]
            for i in range(drift.shape[0])]
    _write_table(os.path.join(base, f"state_{j}.csv"),
                 ["index"] + [f"drift{i + 1}" for i in range(n)] + ["energy", "margin"], rows)
    if updates:
        u = updates[-1]
        rows = [[i] + [_fmt(v) for v in u[i]] for i in range(u.shape[0])]
        _write_table(os.path.join(base, f"update_{len(updates) - 1}.csv"),
                     ["index"] + [f"omega_hat{i + 1}" for i in range(n)], rows)


def _write_history(out_dir, history):
    rows = [[r[c] if c in ("j", "K") else _fmt(r[c]) for c in HISTORY_COLUMNS] for r in history]
    _write_table(os.path.join(out_dir, "history.csv"), HISTORY_COLUMNS, rows)


def _write_omega_star(out_dir, res: KamRun):
    n = res.omega0.shape[1]
    d = res.grid.dim
    header = (["index"] + [f"xi{i + 1}" for i in range(d)] + [f"omega{i + 1}" for i in range(n)]
              + [f"omega_star{i + 1}" for i in range(n)] + ["drift_l1", "in_pi_star",
                                                            "margin_star"])
    rows = []
    for i in range(len(res.grid)):
        rows.append([i] + [_fmt(v) for v in res.grid.samples[i]]
                    + [_fmt(v) for v in res.omega0[i]] + [_fmt(v) for v in res.omega_star[i]]
                    + [_fmt(np.abs(res.drift[i]).sum()), int(res.pi_star[i]),
                       _fmt(res.pi_star_margins[i])])
    _write_table(os.path.join(out_dir, "omega_star.csv"), header, rows)


def _write_manifest(out_dir, cfg, schedule, status, message, eps_in, checks=None):
    cp = configparser.ConfigParser()
    cp["config"] = {k: str(v) for k, v in asdict(cfg).items()}
    cp["status"] = {"state": status, "steps_completed": str(len(schedule) - 1),
                    "message": message.replace("%", "%%"), "eps_input": _fmt(eps_in)}
    for sp in schedule:
        cp[f"schedule_{sp.j}"] = {k: (str(v) if isinstance(v, int) else _fmt(v))
                                  for k, v in asdict(sp).items()}
    if checks:
        cp["checks"] = {k: str(v) for k, v in checks.items()}
    with open(os.path.join(out_dir, "manifest.ini"), "w") as fh:
        cp.write(fh)


def _read_table(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return rows[0], rows[1:]


def _load_state(out_dir, j, caps, key):
    base = os.path.join(out_dir, "state")
    path = os.path.join(base, f"P_{j}.fts")
    if not os.path.exists(path):
        raise FileNotFoundError(f"no stored state for step {j} in {out_dir}")
    with open(path) as fh:
        P = loads(fh.read(), sample_key=key).with_caps(caps)
    _, rows = _read_table(os.path.join(base, f"state_{j}.csv"))
    arr = np.array([[float(v) for v in r[1:]] for r in rows])
    drift, energy = arr[:, :-2], arr[:, -2]
    margins = []
    for i in range(j):
        _, rr = _read_table(os.path.join(base, f"state_{i}.csv"))
        margins.append(np.array([float(r[-1]) for r in rr]))
    updates = []
    for i in range(j):
        _, rr = _read_table(os.path.join(base, f"update_{i}.csv"))
        updates.append(np.array([[float(v) for v in r[1:]] for r in rr]))
    header, hrows = _read_table(os.path.join(out_dir, "history.csv"))
    history = []
    for r in hrows[:j]:
        row = dict(zip(header, r))
        history.append({c: (int(row[c]) if c in ("j", "K") else float(row[c]))
                        for c in HISTORY_COLUMNS})
    atlas = SymplecticAtlas()
    for i in range(j):
        with open(os.path.join(out_dir, "atlas", f"F_{i}.fts")) as fh:
            atlas.gens.append(loads(fh.read(), sample_key=key).with_caps(caps))
    return {"P": P, "drift": drift, "energy": energy, "margins": margins,
            "updates": updates, "history": history, "atlas": atlas}


def load_run(out_dir):
    """Read a run directory back.

    Returns a dict with the manifest, history, frequency table, the atlas,
    the samples and the final Hamiltonian (``omega_star`` + stored ``P_J``).
    """
    expected = ["manifest.ini", "history.csv", "omega_star.csv", "samples.csv"]
    missing = [f for f in expected if not os.path.exists(os.path.join(out_dir, f))]
    if missing:
        raise FileNotFoundError(f"run directory {out_dir} lacks {missing}; expected {expected}")
    cp = configparser.ConfigParser()
    cp.read(os.path.join(out_dir, "manifest.ini"))
    header, rows = _read_table(os.path.join(out_dir, "history.csv"))
    history = [{c: float(v) for c, v in zip(header, r)} for r in rows]
    oh, orows = _read_table(os.path.join(out_dir, "omega_star.csv"))
    _, srows = _read_table(os.path.join(out_dir, "samples.csv"))
    samples = np.array([[float(v) for v in r[1:]] for r in srows])
    key = hashlib.sha1(np.ascontiguousarray(samples).tobytes()).hexdigest()[:16]
    d = samples.shape[1]
    n = (len(oh) - 4 - d) // 2
    table = np.array([[float(v) for v in r] for r in orows])
    omega0 = table[:, 1 + d : 1 + d + n]
    omega_star = table[:, 1 + d + n : 1 + d + 2 * n]
    pi_star = table[:, -2].astype(int).astype(bool)
    J = int(cp["status"]["steps_completed"])
    need = [os.path.join("state", f"P_{J}.fts"), os.path.join("state", f"state_{J}.csv")]
    need += [os.path.join("atlas", f"F_{j}.fts") for j in range(J)]
    missing = [f for f in need if not os.path.exists(os.path.join(out_dir, f))]
    if missing:
        raise FileNotFoundError(f"run directory {out_dir} lacks {missing}")
    gens = []
    for j in range(J):
        with open(os.path.join(out_dir, "atlas", f"F_{j}.fts")) as fh:
            gens.append(loads(fh.read(), sample_key=key))
    with open(os.path.join(out_dir, "state", f"P_{J}.fts")) as fh:
        P = loads(fh.read(), sample_key=key)
    _, st = _read_table(os.path.join(out_dir, "state", f"state_{J}.csv"))
    st = np.array([[float(v) for v in r[1:]] for r in st])
    drift, energy = st[:, :-2], st[:, -2]
    H_final = Hamiltonian(omega_star, P, energy)
    return {"manifest": cp, "history": history, "omega_star_header": oh,
            "omega_star_rows": orows, "atlas": SymplecticAtlas(gens, []), "samples": samples,
            "omega0": omega0, "omega_star": omega_star, "drift": drift, "pi_star": pi_star,
            "H_final": H_final, "steps": J}
