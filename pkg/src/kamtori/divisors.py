"""Smooth cutoff, extended inverse small divisors and Diophantine scans.

``|k|`` is the l1 norm everywhere.  Membership tests are always at a finite
cutoff ``K`` (``0 < |k|_1 <= K``).
"""

from __future__ import annotations

from dataclasses import dataclass, field
import itertools
import math

import numpy as np

__all__ = [
    "CutoffFn",
    "cutoff",
    "phi_h",
    "phi_h_derivative",
    "DivisorParams",
    "DioReport",
    "extended_inverse",
    "extended_inverses",
    "check_dio",
    "check_dio_elliptic",
    "build_Pi",
    "min_margin",
    "ell_set",
    "l1_ball",
]


def _f(u):
    u = np.asarray(u, dtype=float)
    out = np.zeros_like(u)
    pos = u > 0
    out[pos] = np.exp(-1.0 / u[pos])
    return out


def _df(u):
    u = np.asarray(u, dtype=float)
    out = np.zeros_like(u)
    pos = u > 0
    out[pos] = np.exp(-1.0 / u[pos]) / u[pos] ** 2
    return out


class CutoffFn:
    """phi(t) = psi(2|t| - 1) with psi(u) = f(u) / (f(u) + f(1 - u)), f(u) = exp(-1/u).

    phi vanishes on |t| <= 1/2, equals 1 on |t| >= 1 and is C-infinity.
    """

    def __call__(self, t):
        u = 2.0 * np.abs(np.asarray(t, dtype=float)) - 1.0
        a, b = _f(u), _f(1.0 - u)
        return a / (a + b)

    def derivative(self, t):
        t = np.asarray(t, dtype=float)
        u = 2.0 * np.abs(t) - 1.0
        a, b = _f(u), _f(1.0 - u)
        da, db = _df(u), _df(1.0 - u)
        den = (a + b) ** 2
        # d psi/du = (a' b + a b') / (a + b)^2 ; du/dt = 2 sign(t)
        return 2.0 * np.sign(t) * (da * b + a * db) / den


cutoff = CutoffFn()


def phi_h(t, h):
    """Rescaled cutoff phi(t / h): 0 for |t| <= h/2, 1 for |t| >= h."""
    if not h > 0:
        raise ValueError(f"cutoff width must be positive, got {h}")
    return cutoff(np.asarray(t, dtype=float) / h)


def phi_h_derivative(t, h):
    if not h > 0:
        raise ValueError(f"cutoff width must be positive, got {h}")
    return cutoff.derivative(np.asarray(t, dtype=float) / h) / h


@dataclass(frozen=True)
class DivisorParams:
    alpha: float
    tau: float
    K: int

    def __post_init__(self):
        if not 0 < self.alpha <= 1:
            raise ValueError("alpha must lie in (0, 1]")
        if self.K < 1:
            raise ValueError("divisor cutoff K must be >= 1")


@dataclass
class DioReport:
    """Outcome of a finite-K Diophantine scan.

    ``margin`` is the minimum over tested k of ``|<omega, k> + offset| |k|^tau / alpha``;
    membership holds iff ``margin >= 1``.
    """

    passed: bool
    worst_k: tuple
    margin: float
    K: int
    worst_l: tuple | None = None
    families: dict = field(default_factory=dict)
    note: str = ""

    def as_dict(self):
        return {
            "pass": self.passed,
            "worst_k": list(self.worst_k),
            "worst_l": None if self.worst_l is None else list(self.worst_l),
            "margin": self.margin,
            "K": self.K,
            "families": dict(self.families),
            "note": self.note,
        }


def extended_inverse(omega, k, dp: DivisorParams):
    """g_k = phi_h(<omega, k>) / (i <omega, k>) with h = alpha / |k|^tau.

    ``omega`` may be (n,) or a table (S, n); returns a scalar or (S,).
    """
    k = np.asarray(k)
    if not np.any(k):
        raise ValueError("the extended inverse is undefined for k = 0")
    omega = np.asarray(omega, dtype=float)
    t = omega @ k
    h = dp.alpha / float(np.abs(k).sum()) ** dp.tau
    phi = phi_h(t, h)
    with np.errstate(divide="ignore", invalid="ignore"):
        g = np.where(phi > 0, phi / (1j * np.where(t == 0, 1.0, t)), 0.0 + 0.0j)
    return g[()] if g.ndim == 0 else g


def extended_inverses(omega_table, modes, alpha, tau):
    """Matrix g[k, sample] for every row of ``modes`` (k = 0 rows give 0)."""
    omega_table = np.atleast_2d(np.asarray(omega_table, dtype=float))
    modes = np.asarray(modes)
    t = modes @ omega_table.T  # (N, S)
    norm = np.abs(modes).sum(axis=1).astype(float)
    nonzero = norm > 0
    h = np.where(nonzero, alpha / np.where(nonzero, norm, 1.0) ** tau, 1.0)
    phi = cutoff(t / h[:, None])
    phi[~nonzero] = 0.0
    with np.errstate(divide="ignore", invalid="ignore"):
        g = np.where(phi > 0, phi / (1j * np.where(t == 0, 1.0, t)), 0.0 + 0.0j)
    return g, phi, t


# -- Diophantine scans --------------------------------------------------------

_BRUTE_LIMIT = 250_000


def l1_ball(dim, K):
    """All integer vectors of length ``dim`` with |k|_1 <= K (rows)."""
    if dim == 0:
        return np.zeros((1, 0), dtype=np.int64)
    if dim == 1:
        return np.arange(-K, K + 1, dtype=np.int64)[:, None]
    rows = []
    for head in range(-K, K + 1):
        rest = l1_ball(dim - 1, K - abs(head))
        rows.append(np.column_stack([np.full(rest.shape[0], head, dtype=np.int64), rest]))
    return np.concatenate(rows)


def _ball_size(dim, K):
    # lattice points in the l1 ball: choose i nonzero coordinates, their signs and sizes
    return sum(2 ** i * math.comb(dim, i) * math.comb(K, i) for i in range(min(dim, K) + 1))


def _scored(vals, kk, alpha, tau):
    norm = np.abs(kk).sum(axis=1).astype(float)
    return np.abs(vals) * norm ** tau / alpha


def min_margin(omega, offset, alpha, tau, K):
    """Exact min over 0 < |k|_1 <= K of |<omega,k> + offset| |k|^tau / alpha."""
    omega = np.asarray(omega, dtype=float)
    n = omega.size
    if n == 1 or _ball_size(n, K) <= _BRUTE_LIMIT:
        kk = l1_ball(n, K)
        kk = kk[np.any(kk != 0, axis=1)]
        m = _scored(kk @ omega + offset, kk, alpha, tau)
        i = int(np.argmin(m))
        return float(m[i]), tuple(int(v) for v in kk[i])
    p = int(np.argmax(np.abs(omega)))
    wp = omega[p]
    others = [i for i in range(n) if i != p]
    pre = l1_ball(n - 1, K)
    budget = K - np.abs(pre).sum(axis=1)
    x = pre @ omega[others] + offset
    centre = -x / wp

    def best(offsets):
        kp = np.floor(centre)[:, None] + offsets[None, :]
        kp = kp.astype(np.int64)
        ok = np.abs(kp) <= budget[:, None]
        vals = x[:, None] + wp * kp
        norm = np.abs(pre).sum(axis=1)[:, None] + np.abs(kp)
        ok &= norm > 0
        with np.errstate(invalid="ignore"):
            score = np.where(ok, np.abs(vals) * norm.astype(float) ** tau / alpha, np.inf)
        flat = int(np.argmin(score))
        r, c = divmod(flat, score.shape[1])
        k = np.zeros(n, dtype=np.int64)
        k[others] = pre[r]
        k[p] = kp[r, c]
        return float(score[r, c]), tuple(int(v) for v in k)

    m1, k1 = best(np.array([-1, 0, 1, 2]))
    # any k_p farther than W from the centre has margin above m1
    W = int(np.ceil(m1 * alpha / abs(wp))) + 2
    if W > K:
        W = K + 1
    if not np.isfinite(m1):
        W = K + 1
    chunk = max(1, 20_000_000 // pre.shape[0])
    m, k = m1, k1
    offs = np.arange(-W, W + 2)
    for start in range(0, offs.size, chunk):
        mm, kk = best(offs[start : start + chunk])
        if mm < m:
            m, k = mm, kk
    return m, k


def check_dio(omega, dp: DivisorParams) -> DioReport:
    """Scan |<omega, k>| >= alpha / |k|^tau over 0 < |k|_1 <= K."""
    margin, k = min_margin(omega, 0.0, dp.alpha, dp.tau, int(dp.K))
    return DioReport(margin >= 1.0, k, margin, int(dp.K), families={"k": margin})


def ell_set(nbar):
    """l in Z^nbar with 1 <= |l|_1 <= 2, one of each +-l pair."""
    out = []
    for l in itertools.product(range(-2, 3), repeat=nbar):
        s = sum(abs(v) for v in l)
        if 1 <= s <= 2:
            neg = tuple(-v for v in l)
            if neg not in out:
                out.append(l)
    return out


def check_dio_elliptic(omega, Omega, dp: DivisorParams) -> DioReport:
    """Finite-K scan of the elliptic non-resonance set.

    Families: ``"normal"`` |<l, Omega>| >= alpha for 1 <= |l| <= 2;
    ``"mixed"`` |<omega,k> + <l,Omega>| >= alpha/|k|^tau for k != 0, 1 <= |l| <= 2;
    ``"k"`` the plain l = 0 condition (same as :func:`check_dio`).
    """
    omega = np.atleast_1d(np.asarray(omega, dtype=float))
    Omega = np.atleast_1d(np.asarray(Omega, dtype=float))
    ells = ell_set(Omega.size)
    normal = min((abs(float(np.dot(l, Omega))) / dp.alpha, l) for l in ells)
    mixed = (np.inf, None, None)
    for l in ells:
        m, k = min_margin(omega, float(np.dot(l, Omega)), dp.alpha, dp.tau, int(dp.K))
        if m < mixed[0]:
            mixed = (m, k, l)
    plain = check_dio(omega, dp)
    fam = {"normal": normal[0], "mixed": mixed[0], "k": plain.margin}
    worst = min(fam, key=fam.get)
    zero_k = tuple(0 for _ in omega)
    if worst == "normal":
        wk, wl = zero_k, normal[1]
    elif worst == "mixed":
        wk, wl = mixed[1], mixed[2]
    else:
        wk, wl = plain.worst_k, tuple(0 for _ in Omega)
    margin = fam[worst]
    return DioReport(margin >= 1.0, wk, margin, int(dp.K), worst_l=tuple(wl), families=fam)


def build_Pi(grid, omega_table, dp: DivisorParams, channel=None):
    """Per-sample membership flags and margins for a frequency table (S, n).

    ``grid`` may be None; otherwise its sample count must match the table and,
    when ``channel`` is given, the flags are stored on it under that name.
    """
    omega_table = np.atleast_2d(np.asarray(omega_table, dtype=float))
    if grid is not None and len(grid) != omega_table.shape[0]:
        raise ValueError("frequency table and grid sample counts differ")
    reports = [check_dio(w, dp) for w in omega_table]
    flags = np.array([r.passed for r in reports], dtype=bool)
    margins = np.array([r.margin for r in reports])
    if grid is not None and channel is not None:
        grid.set_flag(channel, flags)
    return flags, margins
