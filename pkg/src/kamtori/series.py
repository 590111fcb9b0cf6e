"""Truncated Fourier-Taylor series over a sampled parameter domain.

A series stores terms ``c(xi) * exp(i <k, theta>) * I**l`` as three aligned
arrays: integer Fourier modes ``k`` (N, n), Taylor exponents ``l`` (N, n) and
complex coefficients (N, S), one column per parameter sample.  Terms are kept
sorted by a packed integer key, so two series built the same way are
bit-identical.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
import io

import numpy as np

__all__ = [
    "Caps",
    "NormParams",
    "FTSeries",
    "StructureError",
    "add",
    "scale",
    "multiply",
    "ring_ops",
    "poisson_bracket",
    "d_theta",
    "d_action",
    "linear_part",
    "truncate_fourier",
    "average",
    "majorant_norm",
    "evaluate",
    "dumps",
    "loads",
]

# Pairwise products are materialized in chunks of at most this many complex
# numbers to bound memory.
_CHUNK = 4_000_000


class StructureError(ValueError):
    """Operands do not share dimension, caps or sample set."""


@dataclass(frozen=True)
class Caps:
    """Fourier and Taylor caps plus the weights used to measure dropped mass.

    Terms with ``|k|_1 > K_max`` or ``|l|_1 > d_max`` produced by a product
    are discarded and their majorant mass (weighted by ``exp(weight_s |k|)``
    and ``weight_r ** |l|``) is added to the result's ``residual``.
    """

    K_max: int
    d_max: int = 3
    weight_s: float = 0.0
    weight_r: float = 1.0

    def __post_init__(self):
        if self.K_max < 0 or self.d_max < 0:
            raise ValueError("caps must be non-negative")


@dataclass(frozen=True)
class NormParams:
    s: float
    r: float
    alpha: float = 1.0

    def __post_init__(self):
        if not (self.s > 0 and self.r > 0 and 0 < self.alpha <= 1):
            raise ValueError(f"invalid norm parameters {self}")


def _pack(modes, powers, caps):
    """Pack (k, l) rows into int64 keys; lexicographic in (k, l)."""
    bk = 2 * caps.K_max + 1
    bl = caps.d_max + 1
    key = np.zeros(modes.shape[0], dtype=np.int64)
    for i in range(modes.shape[1]):
        key = key * bk + (modes[:, i] + caps.K_max)
    for i in range(powers.shape[1]):
        key = key * bl + powers[:, i]
    return key


@dataclass
class FTSeries:
    """Fourier-Taylor series with per-sample coefficients.

    Use :meth:`from_terms` or :meth:`zero` rather than the raw constructor;
    the constructor assumes its arrays are already canonical (sorted, unique,
    within caps).
    """

    n: int
    modes: np.ndarray
    powers: np.ndarray
    coeffs: np.ndarray
    caps: Caps
    reality: bool = True
    residual: float = 0.0
    sample_key: object = field(default=None, compare=False)

    @property
    def n_samples(self) -> int:
        return self.coeffs.shape[1]

    @property
    def n_terms(self) -> int:
        return self.coeffs.shape[0]

    # -- construction -----------------------------------------------------

    @classmethod
    def zero(cls, n, n_samples, caps, reality=True, sample_key=None):
        return cls(
            n,
            np.zeros((0, n), dtype=np.int64),
            np.zeros((0, n), dtype=np.int64),
            np.zeros((0, n_samples), dtype=complex),
            caps,
            reality,
            0.0,
            sample_key,
        )

    @classmethod
    def from_terms(cls, n, n_samples, terms, caps, reality=True, sample_key=None,
                   check_reality=True):
        """Build from an iterable of ``(k, l, coeff)``; coeff is scalar or (S,)."""
        terms = list(terms)
        if not terms:
            return cls.zero(n, n_samples, caps, reality, sample_key)
        modes = np.array([np.asarray(t[0], dtype=np.int64).reshape(n) for t in terms])
        powers = np.array([np.asarray(t[1], dtype=np.int64).reshape(n) for t in terms])
        coeffs = np.array(
            [np.broadcast_to(np.asarray(t[2], dtype=complex), (n_samples,)) for t in terms]
        )
        if np.any(powers < 0):
            raise ValueError("Taylor exponents must be non-negative")
        out = cls._canonical(n, modes, powers, coeffs, caps, reality, 0.0, sample_key)
        if reality and check_reality and not out.is_real(tol=1e-14):
            raise ValueError("terms violate the reality condition")
        return out

    @classmethod
    def _canonical(cls, n, modes, powers, coeffs, caps, reality, residual, sample_key):
        """Drop over-cap terms (mass goes to residual), merge duplicates, sort."""
        over = (np.abs(modes).sum(axis=1) > caps.K_max) | (powers.sum(axis=1) > caps.d_max)
        if np.any(over):
            residual = residual + float(
                _weighted_abs(modes[over], powers[over], coeffs[over], caps.weight_s,
                              caps.weight_r).sum(axis=0).max()
            )
            keep = ~over
            modes, powers, coeffs = modes[keep], powers[keep], coeffs[keep]
        keys = _pack(modes, powers, caps)
        uniq, first, inv = np.unique(keys, return_index=True, return_inverse=True)
        if uniq.size != keys.size:
            merged = np.zeros((uniq.size, coeffs.shape[1]), dtype=complex)
            np.add.at(merged, inv, coeffs)
            coeffs = merged
        else:
            coeffs = coeffs[first]
        modes, powers = modes[first], powers[first]
        nz = np.any(coeffs != 0, axis=1)
        return cls(n, modes[nz], powers[nz], coeffs[nz], caps, reality, residual, sample_key)

    def _like(self, modes, powers, coeffs, reality=None, residual=None):
        return FTSeries._canonical(
            self.n,
            modes,
            powers,
            coeffs,
            self.caps,
            self.reality if reality is None else reality,
            self.residual if residual is None else residual,
            self.sample_key,
        )

    def copy(self):
        return replace(self, modes=self.modes.copy(), powers=self.powers.copy(),
                       coeffs=self.coeffs.copy())

    def with_caps(self, caps):
        return FTSeries._canonical(self.n, self.modes, self.powers, self.coeffs, caps,
                                   self.reality, self.residual, self.sample_key)

    # -- inspection -------------------------------------------------------

    def is_zero(self):
        return self.n_terms == 0

    def coefficient(self, k, l):
        """Coefficient column (S,) of the term (k, l); zeros if absent."""
        k = np.asarray(k).reshape(self.n)
        l = np.asarray(l).reshape(self.n)
        hit = np.all(self.modes == k, axis=1) & np.all(self.powers == l, axis=1)
        idx = np.flatnonzero(hit)
        if idx.size == 0:
            return np.zeros(self.n_samples, dtype=complex)
        return self.coeffs[idx[0]].copy()

    def is_real(self, tol=0.0):
        """Check c(-k, l) == conj(c(k, l)) at every sample."""
        if self.n_terms == 0:
            return True
        keys = _pack(self.modes, self.powers, self.caps)
        mirror = _pack(-self.modes, self.powers, self.caps)
        order = np.searchsorted(keys, mirror)
        order = np.clip(order, 0, keys.size - 1)
        present = keys[order] == mirror
        partner = np.where(present[:, None], self.coeffs[order], 0.0)
        err = np.abs(self.coeffs - np.conj(partner))
        scale = max(float(np.abs(self.coeffs).max()), 1e-300)
        return bool(err.max() <= tol * scale)

    def max_degree(self):
        return int(self.powers.sum(axis=1).max()) if self.n_terms else 0

    def max_mode(self):
        return int(np.abs(self.modes).sum(axis=1).max()) if self.n_terms else 0

    def select(self, mask):
        """Sub-series of the terms where ``mask`` is true (no residual change)."""
        mask = np.asarray(mask, dtype=bool)
        return FTSeries(self.n, self.modes[mask], self.powers[mask], self.coeffs[mask],
                        self.caps, self.reality, self.residual, self.sample_key)

    def restrict_samples(self, index):
        """Series restricted to the listed sample columns."""
        index = np.atleast_1d(np.asarray(index))
        c = self.coeffs[:, index]
        nz = np.any(c != 0, axis=1)
        return FTSeries(self.n, self.modes[nz], self.powers[nz], c[nz], self.caps,
                        self.reality, self.residual, None)

    def mask_samples(self, keep):
        """Zero the coefficient columns where ``keep`` is false."""
        keep = np.asarray(keep, dtype=bool)
        return self._like(self.modes, self.powers, self.coeffs * keep[None, :])

    def prune(self, rel_tol, s, r):
        """Drop terms whose weighted size is below ``rel_tol`` times the norm.

        The dropped mass, measured with the caps weights, joins ``residual``.
        """
        if self.n_terms == 0 or rel_tol <= 0:
            return self
        w = _weighted_abs(self.modes, self.powers, self.coeffs, s, r)
        total = w.sum(axis=0).max()
        small = w.max(axis=1) < rel_tol * total
        if not np.any(small):
            return self
        dropped = _weighted_abs(self.modes[small], self.powers[small], self.coeffs[small],
                                self.caps.weight_s, self.caps.weight_r)
        out = self.select(~small)
        out.residual = self.residual + float(dropped.sum(axis=0).max())
        return out

    # -- operators --------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, scale(other, -1.0))

    def __neg__(self):
        return scale(self, -1.0)

    def __mul__(self, other):
        if isinstance(other, FTSeries):
            return multiply(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __repr__(self):
        return (f"FTSeries(n={self.n}, terms={self.n_terms}, samples={self.n_samples}, "
                f"K_max={self.caps.K_max}, d_max={self.caps.d_max}, "
                f"residual={self.residual:.3g})")


def _weighted_abs(modes, powers, coeffs, s, r):
    """|c| * exp(s |k|_1) * r ** |l|_1, shape (N, S)."""
    w = np.exp(s * np.abs(modes).sum(axis=1)) * float(r) ** powers.sum(axis=1)
    return np.abs(coeffs) * w[:, None]


def _check_compatible(a, b):
    if a.n != b.n:
        raise StructureError(f"dimension mismatch: {a.n} vs {b.n}")
    if a.n_samples != b.n_samples:
        raise StructureError(f"sample count mismatch: {a.n_samples} vs {b.n_samples}")
    if a.sample_key is not None and b.sample_key is not None and a.sample_key != b.sample_key:
        raise StructureError("series live on different sample sets")
    if (a.caps.K_max, a.caps.d_max) != (b.caps.K_max, b.caps.d_max):
        raise StructureError(f"caps mismatch: {a.caps} vs {b.caps}")


def add(a: FTSeries, b: FTSeries) -> FTSeries:
    _check_compatible(a, b)
    return FTSeries._canonical(
        a.n,
        np.concatenate([a.modes, b.modes]),
        np.concatenate([a.powers, b.powers]),
        np.concatenate([a.coeffs, b.coeffs]),
        a.caps,
        a.reality and b.reality,
        a.residual + b.residual,
        a.sample_key if a.sample_key is not None else b.sample_key,
    )


def scale(a: FTSeries, c) -> FTSeries:
    """Multiply by a scalar or by a per-sample vector of shape (S,)."""
    c = np.asarray(c)
    real = a.reality and np.all(np.imag(c) == 0)
    if c.ndim == 0:
        coeffs = a.coeffs * c
    else:
        coeffs = a.coeffs * c.reshape(1, -1)
    out = a._like(a.modes, a.powers, coeffs, reality=real)
    out.residual = a.residual * float(np.max(np.abs(c))) if c.size else 0.0
    return out


def multiply(a: FTSeries, b: FTSeries) -> FTSeries:
    """Cauchy product: modes add, exponents add, over-cap mass to residual."""
    _check_compatible(a, b)
    caps = a.caps
    key = a.sample_key if a.sample_key is not None else b.sample_key
    real = a.reality and b.reality
    if a.n_terms == 0 or b.n_terms == 0:
        out = FTSeries.zero(a.n, a.n_samples, caps, real, key)
        out.residual = a.residual + b.residual
        return out
    S = a.n_samples
    nb = b.n_terms
    rows = max(1, _CHUNK // max(1, nb * S))
    acc_keys = []
    acc_modes = []
    acc_pows = []
    acc_coeffs = []
    dropped = np.zeros(S)
    ws, wr = caps.weight_s, caps.weight_r
    for start in range(0, a.n_terms, rows):
        sl = slice(start, start + rows)
        m = (a.modes[sl, None, :] + b.modes[None, :, :]).reshape(-1, a.n)
        p = (a.powers[sl, None, :] + b.powers[None, :, :]).reshape(-1, a.n)
        c = (a.coeffs[sl, None, :] * b.coeffs[None, :, :]).reshape(-1, S)
        over = (np.abs(m).sum(axis=1) > caps.K_max) | (p.sum(axis=1) > caps.d_max)
        if np.any(over):
            dropped += _weighted_abs(m[over], p[over], c[over], ws, wr).sum(axis=0)
            keep = ~over
            m, p, c = m[keep], p[keep], c[keep]
        if m.shape[0] == 0:
            continue
        k = _pack(m, p, caps)
        uniq, first, inv = np.unique(k, return_index=True, return_inverse=True)
        merged = np.zeros((uniq.size, S), dtype=complex)
        np.add.at(merged, inv, c)
        acc_keys.append(uniq)
        acc_modes.append(m[first])
        acc_pows.append(p[first])
        acc_coeffs.append(merged)
    residual = a.residual + b.residual + float(dropped.max())
    if not acc_keys:
        out = FTSeries.zero(a.n, S, caps, real, key)
        out.residual = residual
        return out
    return FTSeries._canonical(
        a.n,
        np.concatenate(acc_modes),
        np.concatenate(acc_pows),
        np.concatenate(acc_coeffs),
        caps,
        real,
        residual,
        key,
    )


def ring_ops(a: FTSeries, b, op: str) -> FTSeries:
    """Dispatch ``op`` in {"add", "scale", "multiply"}; for "scale" ``b`` is a scalar."""
    if op == "add":
        return add(a, b)
    if op == "scale":
        return scale(a, b)
    if op == "multiply":
        return multiply(a, b)
    raise ValueError(f"unknown ring operation {op!r}")


def d_theta(a: FTSeries, i: int) -> FTSeries:
    """Partial derivative in theta_i: multiplies mode k by i*k_i."""
    c = a.coeffs * (1j * a.modes[:, i])[:, None]
    return a._like(a.modes, a.powers, c)


def d_action(a: FTSeries, i: int) -> FTSeries:
    """Partial derivative in I_i: lowers the exponent l_i."""
    keep = a.powers[:, i] > 0
    p = a.powers[keep].copy()
    c = a.coeffs[keep] * p[:, i][:, None]
    p[:, i] -= 1
    return a._like(a.modes[keep], p, c)


def poisson_bracket(f: FTSeries, g: FTSeries) -> FTSeries:
    """{f, g} = sum_i df/dtheta_i dg/dI_i - df/dI_i dg/dtheta_i.

    With this sign ``d/dt (g o X_f^t) = {g, f} o X_f^t`` for the flow
    ``theta' = df/dI, I' = -df/dtheta``.
    """
    _check_compatible(f, g)
    f0 = replace(f, residual=0.0)
    g0 = replace(g, residual=0.0)
    out = FTSeries.zero(f.n, f.n_samples, f.caps, f.reality and g.reality,
                        f.sample_key if f.sample_key is not None else g.sample_key)
    for i in range(f.n):
        out = add(out, multiply(d_theta(f0, i), d_action(g0, i)))
        out = add(out, scale(multiply(d_action(f0, i), d_theta(g0, i)), -1.0))
    out.residual += f.residual + g.residual
    return out


def linear_part(p: FTSeries) -> FTSeries:
    """Terms with |l|_1 <= 1: P(theta, 0) + <P_I(theta, 0), I>."""
    return p.select(p.powers.sum(axis=1) <= 1)


def truncate_fourier(p: FTSeries, K: int):
    """Split into (terms with |k|_1 <= K, the rest); the two add back to ``p``."""
    if K < 0:
        raise ValueError("K must be non-negative")
    low = np.abs(p.modes).sum(axis=1) <= K
    head = p.select(low)
    tail = p.select(~low)
    tail.residual = 0.0
    return head, tail


def average(p: FTSeries) -> FTSeries:
    """Angle average: the k = 0 terms."""
    return p.select(np.all(p.modes == 0, axis=1))


def majorant_norm(p: FTSeries, np_: NormParams | None = None, *, s=None, r=None,
                  samples=None, per_sample=False):
    """Majorant norm sum_k exp(s|k|) sum_l |P_kl| r^|l|.

    Returns the sup over samples, or the (S,) vector when ``per_sample``.
    ``samples`` restricts the sup to a boolean mask or index list.
    """
    if np_ is not None:
        s, r = np_.s, np_.r
    if s is None or r is None:
        raise TypeError("norm needs s and r")
    if p.n_terms == 0:
        vals = np.zeros(p.n_samples)
    else:
        vals = _weighted_abs(p.modes, p.powers, p.coeffs, s, r).sum(axis=0)
    if samples is not None:
        vals = vals[np.asarray(samples)]
    if per_sample:
        return vals
    return float(vals.max()) if vals.size else 0.0


def evaluate(p: FTSeries, theta, I, sample=0):
    """Sum all terms at (theta, I) for one sample.

    ``theta`` and ``I`` may be single points (n,) or batches (M, n); a batch
    returns an (M,) array.  Real inputs on a reality-flagged series give real
    output up to round-off; use ``.real`` if an exactly real dtype is needed.
    """
    theta = np.asarray(theta, dtype=float if np.isrealobj(theta) else complex)
    I = np.asarray(I)
    single = theta.ndim == 1
    theta = np.atleast_2d(theta)
    I = np.atleast_2d(I).astype(complex)
    if p.n_terms == 0:
        out = np.zeros(theta.shape[0], dtype=complex)
        return out[0] if single else out
    phase = np.exp(1j * (theta @ p.modes.T))  # (M, N)
    mono = np.ones((I.shape[0], p.n_terms), dtype=complex)
    for i in range(p.n):
        mono = mono * I[:, i : i + 1] ** p.powers[:, i][None, :]
    out = (phase * mono) @ p.coeffs[:, sample]
    return out[0] if single else out


# -- text format -------------------------------------------------------------


def dumps(p: FTSeries) -> str:
    """Line-based text form; floats use repr so the round trip is exact."""
    buf = io.StringIO()
    c = p.caps
    buf.write("# FTSeries v1\n")
    buf.write(f"n {p.n}\n")
    buf.write(f"caps {c.K_max} {c.d_max} {c.weight_s!r} {c.weight_r!r}\n")
    buf.write(f"samples {p.n_samples}\n")
    buf.write(f"reality {int(p.reality)}\n")
    buf.write(f"residual {p.residual!r}\n")
    buf.write(f"terms {p.n_terms}\n")
    for t in range(p.n_terms):
        k = " ".join(str(int(v)) for v in p.modes[t])
        l = " ".join(str(int(v)) for v in p.powers[t])
        for j in range(p.n_samples):
            z = p.coeffs[t, j]
            if z == 0:
                continue
            buf.write(f"{k} ; {l} ; {j} ; {float(z.real)!r} ; {float(z.imag)!r}\n")
    return buf.getvalue()


def loads(text: str, sample_key=None) -> FTSeries:
    lines = [ln for ln in text.splitlines() if ln.strip() and not ln.startswith("#")]
    header = {}
    it = iter(enumerate(lines))
    for _, ln in it:
        name, _, rest = ln.partition(" ")
        header[name] = rest.split()
        if name == "terms":
            break
    n = int(header["n"][0])
    K, d, ws, wr = header["caps"]
    caps = Caps(int(K), int(d), float(ws), float(wr))
    S = int(header["samples"][0])
    reality = bool(int(header["reality"][0]))
    residual = float(header["residual"][0])
    rows = {}
    for lineno, ln in it:
        parts = [x.strip() for x in ln.split(";")]
        if len(parts) != 5:
            raise ValueError(f"malformed series record at line {lineno + 1}: {ln!r}")
        k = tuple(int(v) for v in parts[0].split())
        l = tuple(int(v) for v in parts[1].split())
        j = int(parts[2])
        col = rows.setdefault((k, l), np.zeros(S, dtype=complex))
        col[j] = complex(float(parts[3]), float(parts[4]))
    if not rows:
        out = FTSeries.zero(n, S, caps, reality, sample_key)
        out.residual = residual
        return out
    keys = list(rows)
    modes = np.array([k for k, _ in keys], dtype=np.int64).reshape(-1, n)
    powers = np.array([l for _, l in keys], dtype=np.int64).reshape(-1, n)
    coeffs = np.array([rows[k] for k in keys])
    return FTSeries._canonical(n, modes, powers, coeffs, caps, reality, residual, sample_key)
