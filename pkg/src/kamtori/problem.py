"""Problem and run-configuration files.

Both are ``key = value`` files read with :mod:`configparser`.  A problem
file looks like::

    [problem]
    n = 2
    tau = 1.5
    alpha = 0.05
    s = 2.0
    r = 1.0

    [parameters]
    lower = 1.0 1.3
    upper = 2.0 1.7
    grid = random 25          ; or "regular 5 5", optional "seed = 0"

    [frequency]
    omega = xi1, xi2

    [perturbation]
    eps = 2e-9                ; any extra key is a constant usable below
    symmetrize = yes
    terms =
        1 0 | 0 0 | 0.5*eps
        1 1 | 1 0 | 0.5*eps

Each term is ``k | l | coefficient`` with a sympy expression in the
parameters ``xi1 .. xid`` and the declared constants.  An optional
``[elliptic]`` section holds ``nbar``, ``beta`` and ``M`` (``n * nbar`` numbers in
row-major order) for the frequency tools.  Errors carry the offending line number.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
import configparser
import re

import numpy as np
import sympy

from .grid import ParamGrid
from .kam import HamiltonianFamily, RunConfig

__all__ = ["ProblemError", "ProblemSpec", "VerifyConfig", "parse_problem", "parse_config"]


class ProblemError(ValueError):
    """Malformed problem or configuration file."""

    def __init__(self, message, line=None, source="<problem>"):
        where = f"{source}:{line}: " if line is not None else f"{source}: "
        super().__init__(where + message)
        self.line = line


def _read(text, source):
    cp = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    cp.optionxform = str
    try:
        cp.read_string(text, source=source)
    except configparser.Error as exc:
        raise ProblemError(str(exc).splitlines()[0], getattr(exc, "lineno", None),
                           source) from exc
    return cp


def _line_index(text):
    """Map (section, key) to the line of the key and list continuation lines."""
    index, cont = {}, {}
    section, key = None, None
    for no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split(";")[0].split("#")[0].rstrip()
        if not line.strip():
            continue
        m = re.match(r"^\[(.+)\]\s*$", line)
        if m:
            section, key = m.group(1).strip(), None
            continue
        if raw[:1] in (" ", "\t") and key is not None:
            cont.setdefault((section, key), []).append((no, line.strip()))
            continue
        k = re.split(r"[=:]", line, maxsplit=1)[0].strip()
        key = k
        index[(section, k)] = no
    return index, cont


def _floats(value, count, what, line, source):
    try:
        vals = [float(v) for v in value.replace(",", " ").split()]
    except ValueError as exc:
        raise ProblemError(f"{what} must be numbers, got {value!r}", line, source) from exc
    if count is not None and len(vals) != count:
        raise ProblemError(f"{what} needs {count} values, got {len(vals)}", line, source)
    return vals


@dataclass
class ProblemSpec:
    n: int
    tau: float
    alpha: float
    s: float
    r: float
    lower: np.ndarray
    upper: np.ndarray
    grid_kind: str
    grid_args: list
    seed: int
    omega: list
    terms: list  # (k, l, expression string, line)
    constants: dict
    symmetrize: bool
    m: int = 0
    elliptic: dict | None = None
    text: str = ""
    source: str = "<problem>"

    @property
    def dim(self):
        return self.lower.size

    def symbols(self):
        syms = sympy.symbols(" ".join(f"xi{i + 1}" for i in range(self.dim)) + " _pad")
        return list(syms[: self.dim])

    def _compile(self, expr, line):
        syms = self.symbols()
        local = {str(s): s for s in syms}
        if self.dim == 1:
            local["xi"] = syms[0]
        local.update({k: sympy.Float(v) for k, v in self.constants.items()})
        try:
            e = sympy.sympify(expr, locals=local)
        except (sympy.SympifyError, SyntaxError, TypeError) as exc:
            raise ProblemError(f"cannot parse expression {expr!r}", line, self.source) from exc
        free = e.free_symbols - set(syms)
        if free:
            raise ProblemError(f"unknown names {sorted(map(str, free))} in {expr!r}", line,
                               self.source)
        f = sympy.lambdify(syms, e, "numpy")
        return lambda x: np.broadcast_to(np.asarray(f(*np.asarray(x, float).T), complex),
                                         (np.atleast_2d(x).shape[0],))

    def family(self) -> HamiltonianFamily:
        comps = [self._compile(e, ln) for e, ln in self.omega]
        S = lambda x: np.atleast_2d(x).shape[0]  # noqa: E731
        omega_fn = lambda x: np.stack([np.real(c(x)) for c in comps], axis=1).reshape(  # noqa
            S(x), self.n)
        terms = [(k, l, self._compile(e, ln)) for k, l, e, ln in self.terms]
        return HamiltonianFamily(self.n, omega_fn, terms, self.symmetrize)

    def grid(self) -> ParamGrid:
        if self.grid_kind == "random":
            return ParamGrid.random(self.lower, self.upper, int(self.grid_args[0]), self.seed)
        return ParamGrid.regular(self.lower, self.upper, [int(v) for v in self.grid_args])

    def omega_exprs(self):
        return [e for e, _ in self.omega]


def parse_problem(text, source="<problem>") -> ProblemSpec:
    """Parse problem-file text (see the module docstring for the format)."""
    cp = _read(text, source)
    index, cont = _line_index(text)

    def line(sec, key):
        return index.get((sec, key))

    def need(sec, key):
        if not cp.has_section(sec):
            raise ProblemError(f"missing section [{sec}]", None, source)
        if not cp.has_option(sec, key):
            raise ProblemError(f"missing key {key!r} in [{sec}]", None, source)
        return cp.get(sec, key)

    def num(sec, key, kind=float, default=None):
        if default is not None and not cp.has_option(sec, key):
            return default
        raw = need(sec, key)
        try:
            return kind(raw)
        except ValueError as exc:
            raise ProblemError(f"{key} must be a {kind.__name__}, got {raw!r}",
                               line(sec, key), source) from exc

    n = num("problem", "n", int)
    tau = num("problem", "tau")
    alpha = num("problem", "alpha")
    s = num("problem", "s")
    r = num("problem", "r")
    m = num("problem", "m", int, 0)
    if m != 0:
        raise ProblemError("only m = 0 is supported", line("problem", "m"), source)
    for key, val in (("n", n), ("s", s), ("r", r), ("tau", tau)):
        if val <= 0:
            raise ProblemError(f"{key} must be positive", line("problem", key), source)
    if not 0 < alpha <= 1:
        raise ProblemError("alpha must lie in (0, 1]", line("problem", "alpha"), source)

    lower = np.array(_floats(need("parameters", "lower"), None, "lower",
                             line("parameters", "lower"), source))
    upper = np.array(_floats(need("parameters", "upper"), lower.size, "upper",
                             line("parameters", "upper"), source))
    if np.any(lower >= upper):
        raise ProblemError("lower must be below upper", line("parameters", "upper"), source)
    gparts = need("parameters", "grid").split()
    gline = line("parameters", "grid")
    if not gparts or gparts[0] not in ("random", "regular"):
        raise ProblemError("grid must be 'random COUNT' or 'regular N1 .. Nd'", gline, source)
    if gparts[0] == "random" and len(gparts) != 2:
        raise ProblemError("grid 'random' takes one count", gline, source)
    if gparts[0] == "regular" and len(gparts) != 1 + lower.size:
        raise ProblemError(f"grid 'regular' takes {lower.size} counts", gline, source)
    try:
        [int(v) for v in gparts[1:]]
    except ValueError as exc:
        raise ProblemError("grid counts must be integers", gline, source) from exc
    seed = num("parameters", "seed", int, 0)

    om_raw = need("frequency", "omega")
    om_line = line("frequency", "omega")
    omega = [(e.strip(), om_line) for e in om_raw.replace("\n", " ").split(",") if e.strip()]
    if len(omega) != n:
        raise ProblemError(f"omega needs {n} components, got {len(omega)}", om_line, source)

    constants, terms = {}, []
    symmetrize = False
    if cp.has_section("perturbation"):
        for key, val in cp.items("perturbation"):
            if key in ("terms", "symmetrize"):
                continue
            try:
                constants[key] = float(val)
            except ValueError as exc:
                raise ProblemError(f"constant {key!r} must be a number", line("perturbation",
                                                                             key), source) from exc
        if cp.has_option("perturbation", "symmetrize"):
            try:
                symmetrize = cp.getboolean("perturbation", "symmetrize")
            except ValueError as exc:
                raise ProblemError("symmetrize must be yes or no",
                                   line("perturbation", "symmetrize"), source) from exc
        entries = list(cont.get(("perturbation", "terms"), []))
        if cp.has_option("perturbation", "terms"):
            first = cp.get("perturbation", "terms").splitlines()[0].strip()
            if first:
                entries.insert(0, (line("perturbation", "terms"), first))
        for no, entry in entries:
            parts = [p.strip() for p in entry.split("|")]
            if len(parts) != 3:
                raise ProblemError("a term reads 'k1 .. kn | l1 .. ln | coefficient'", no,
                                   source)
            try:
                k = tuple(int(v) for v in parts[0].split())
                l = tuple(int(v) for v in parts[1].split())
            except ValueError as exc:
                raise ProblemError("mode and power entries must be integers", no,
                                   source) from exc
            if len(k) != n or len(l) != n:
                raise ProblemError(f"mode and power need {n} entries each", no, source)
            if any(v < 0 for v in l):
                raise ProblemError("Taylor powers must be non-negative", no, source)
            terms.append((k, l, parts[2], no))

    elliptic = None
    if cp.has_section("elliptic"):
        nbar = num("elliptic", "nbar", int)
        beta = np.array(_floats(need("elliptic", "beta"), nbar, "beta", line("elliptic", "beta"),
                                source))
        Mv = np.array(_floats(need("elliptic", "M"), n * nbar, "M", line("elliptic", "M"),
                              source)).reshape(n, nbar)
        elliptic = {"nbar": nbar, "beta": beta, "M": Mv}

    spec = ProblemSpec(n, tau, alpha, s, r, lower, upper, gparts[0], gparts[1:], seed, omega,
                       terms, constants, symmetrize, m, elliptic, text, source)
    # compile everything once so expression errors surface at parse time
    for e, ln in omega:
        spec._compile(e, ln)
    for _, _, e, ln in terms:
        spec._compile(e, ln)
    return spec


@dataclass
class VerifyConfig:
    """Grid sizes of the verification checks."""

    theta_grid: int = 32
    action_points: int = 5
    symplectic_points: int = 20
    map_grid: int = 8
    seed: int = 1


def _coerce(raw, kind, key, line, source):
    if raw.strip().lower() in ("", "none"):
        return None
    try:
        if kind is bool:
            return raw.strip().lower() in ("1", "yes", "true", "on")
        return kind(raw)
    except ValueError as exc:
        raise ProblemError(f"{key} must be {kind.__name__}, got {raw!r}", line, source) from exc


def parse_config(text, problem: ProblemSpec, source="<config>"):
    """Read ``[run]`` and ``[verify]`` sections into ``(RunConfig, VerifyConfig)``.

    Geometry (``s, r, alpha, tau, m``) comes from the problem.
    """
    cp = _read(text, source)
    index, _ = _line_index(text)
    types = {"gamma": float, "c_growth": float, "j_max": int, "stop_tol": float,
             "j_stop": int, "K_check_mult": int, "K_max": int, "d_max": int,
             "prune_tol": float, "crosscheck": bool}
    kw = {}
    if cp.has_section("run"):
        for key, raw in cp.items("run"):
            if key not in types:
                raise ProblemError(f"unknown run option {key!r}", index.get(("run", key)),
                                   source)
            val = _coerce(raw, types[key], key, index.get(("run", key)), source)
            if val is not None:
                kw[key] = val
    try:
        cfg = RunConfig(s=problem.s, r=problem.r, alpha=problem.alpha, tau=problem.tau,
                        m=problem.m, **kw)
    except ValueError as exc:
        raise ProblemError(str(exc), None, source) from exc
    vkw = {}
    vtypes = {f.name: int for f in fields(VerifyConfig)}
    if cp.has_section("verify"):
        for key, raw in cp.items("verify"):
            if key not in vtypes:
                raise ProblemError(f"unknown verify option {key!r}",
                                   index.get(("verify", key)), source)
            vkw[key] = _coerce(raw, int, key, index.get(("verify", key)), source)
    vcfg = VerifyConfig(**{k: v for k, v in vkw.items() if v is not None})
    for f in fields(vcfg):
        if getattr(vcfg, f.name) <= 0 and f.name != "seed":
            raise ProblemError(f"{f.name} must be positive", index.get(("verify", f.name)),
                               source)
    return cfg, vcfg
