"""Command line front end: ``kamtori run``, ``kamtori verify`` and ``kamtori freq``.

Exit status is 0 on success, 2 when a hypothesis or guard of the numerical
method fails (smallness, nesting, degree, Diophantine preconditions, malformed
input, missing artifacts) and 1 on internal errors.  The CSV columns are
documented in the shipped ``data/csv_schema.txt``.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import io
import logging
import os
import sys
import traceback
from dataclasses import asdict, fields
from types import SimpleNamespace

import numpy as np

from .freqgeom import (
    FreqMap, HypothesisError, FreqGeomError, brouwer_degree, solve_dilation,
    resonance_measure_2d, dio_window_1d, elliptic_dilation, engine_frequency_map,
)
from .kam import KamError, RunConfig, StepParams, run, load_run
from .problem import ProblemError, parse_problem, parse_config
from .series import Caps
from .verify import (
    theta_grid, action_points, conjugacy_residual, torus_residual, symplectic_check,
)

log = logging.getLogger(__name__)

__all__ = ["main", "main_exit", "cmd_run", "cmd_verify", "cmd_freq", "select_samples", "GuardError"]

CHECKS = ("conjugacy", "torus", "symplectic")


class GuardError(Exception):
    """A user-facing precondition failure that maps to exit status 2."""


def _read_text(path):
    if not os.path.exists(path):
        raise GuardError(f"file not found: {path}")
    with open(path) as fh:
        return fh.read()


def _load_inputs(problem_path, config_path):
    spec = parse_problem(_read_text(problem_path), source=problem_path)
    cfg_text = _read_text(config_path) if config_path else ""
    cfg, vcfg = parse_config(cfg_text, spec, source=config_path or "<defaults>")
    return spec, cfg, vcfg, cfg_text


def _input_caps(cfg):
    # the driver re-caps the series; here nothing may be cut
    return Caps(cfg.K_max or 10 ** 6, cfg.d_max, cfg.s, cfg.r)


def _fmt(x):
    return repr(float(x))


# -- run ------------------------------------------------------------------------------

def cmd_run(problem_path, config_path, out_dir, resume_from=None, stream=sys.stdout):
    """Run the iteration for a problem file and write the run directory."""
    spec, cfg, _, cfg_text = _load_inputs(problem_path, config_path)
    grid = spec.grid()
    H0 = spec.family().at(grid.samples, _input_caps(cfg))
    if resume_from is None and os.path.isdir(out_dir) and os.listdir(out_dir):
        raise GuardError(f"output directory {out_dir} is not empty; use --resume-from or "
                         "choose a fresh directory")
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "problem.ini"), "w") as fh:
        fh.write(spec.text)
    with open(os.path.join(out_dir, "config.ini"), "w") as fh:
        fh.write(cfg_text)
    res = run(H0, grid, cfg, out_dir=out_dir, resume_from=resume_from)
    print(f"steps = {len(res.schedule) - 1}", file=stream)
    print(f"eps_input = {res.eps0_input!r}", file=stream)
    print(f"eps_final = {res.eps_final!r}", file=stream)
    print(f"pi_star_fraction = {float(np.mean(res.pi_star))!r}", file=stream)
    for k, v in res.checks.items():
        print(f"check.{k} = {v}", file=stream)
    for note in res.notes:
        print(f"note = {note}", file=stream)
    return res


# -- verify ---------------------------------------------------------------------------

def select_samples(spec_text, count, clean):
    """Resolve a ``--samples`` filter to sample indices.

    Accepted forms: ``all``, ``clean`` (final Diophantine set), a comma list
    ``0,3,7`` and half-open ranges ``2:5`` (mixable: ``0,2:5``).
    """
    spec_text = (spec_text or "clean").strip()
    if spec_text == "all":
        return list(range(count))
    if spec_text == "clean":
        return [int(i) for i in np.flatnonzero(clean)]
    out = []
    for part in spec_text.split(","):
        part = part.strip()
        try:
            if ":" in part:
                a, b = part.split(":", 1)
                out.extend(range(int(a) if a else 0, int(b) if b else count))
            else:
                out.append(int(part))
        except ValueError as exc:
            raise GuardError(f"bad --samples entry {part!r}") from exc
    bad = [i for i in out if not 0 <= i < count]
    if bad:
        raise GuardError(f"sample indices {bad} outside 0..{count - 1}")
    return sorted(set(out))


def _run_files(out_dir):
    need = ["problem.ini", "config.ini"]
    missing = [f for f in need if not os.path.exists(os.path.join(out_dir, f))]
    if missing:
        raise GuardError(f"run directory {out_dir} lacks {missing}; expected {need} next to "
                         "manifest.ini, history.csv, omega_star.csv, samples.csv")


def _budgets(name, rep, eps_final):
    if name == "conjugacy":
        return 1e-8 * (1 + rep.details["sup_abs_H"])
    if name == "torus":
        return 10.0 * eps_final
    return 1e-8


def cmd_verify(out_dir, checks=CHECKS, samples="clean", stream=sys.stdout):
    """Evaluate the residual checks on a stored run and write ``verify/``.

    Returns the list of reports.
    """
    if not os.path.isdir(out_dir):
        raise GuardError(f"run directory {out_dir} does not exist")
    _run_files(out_dir)
    try:
        loaded = load_run(out_dir)
    except FileNotFoundError as exc:
        raise GuardError(str(exc)) from exc
    spec, cfg, vcfg, _ = _load_inputs(os.path.join(out_dir, "problem.ini"),
                                      os.path.join(out_dir, "config.ini"))
    unknown = [c for c in checks if c not in CHECKS]
    if unknown:
        raise GuardError(f"unknown checks {unknown}; choose from {list(CHECKS)}")
    S = loaded["samples"].shape[0]
    H0 = spec.family().at(loaded["samples"], _input_caps(cfg))
    H_star = loaded["H_final"]
    atlas = loaded["atlas"]
    clean = loaded["pi_star"]
    eps_final = float(loaded["manifest"][f"schedule_{loaded['steps']}"]["eps"])
    idx = select_samples(samples, S, clean)
    n = spec.n
    th = theta_grid(n, vcfg.theta_grid)
    acts = action_points(n, spec.r / 4, vcfg.action_points, vcfg.seed)
    TH = np.repeat(th, acts.shape[0], axis=0)
    IA = np.tile(acts, (th.shape[0], 1))
    rng = np.random.default_rng(vcfg.seed)
    sym_pts = np.hstack([rng.uniform(0, 2 * np.pi, (vcfg.symplectic_points, n)),
                         action_points(n, spec.r / 4, vcfg.symplectic_points, vcfg.seed + 1)])
    reports = []
    for i in idx:
        c = bool(clean[i])
        if "conjugacy" in checks:
            reports.append(conjugacy_residual(H0, H_star, atlas, i, TH, IA, clean=c))
        if "torus" in checks:
            reports.append(torus_residual(H0, H_star.omega[i], atlas, i, N=vcfg.theta_grid,
                                          clean=c, drift=loaded["drift"][i]))
        if "symplectic" in checks:
            reports.append(symplectic_check(atlas, i, sym_pts, clean=c))
    _write_verify(out_dir, reports, cfg, vcfg, eps_final, samples)
    for rep in reports:
        budget = _budgets(rep.name, rep, eps_final)
        print(f"{rep.name} sample={rep.sample} clean={rep.clean} sup={rep.sup_residual:.3e} "
              f"budget={budget:.3e} within={rep.sup_residual <= budget}", file=stream)
    return reports


def _write_verify(out_dir, reports, cfg, vcfg, eps_final, samples):
    base = os.path.join(out_dir, "verify")
    os.makedirs(base, exist_ok=True)
    head = ["[resolved_config]"] + [f"run.{k} = {v}" for k, v in asdict(cfg).items()]
    head += [f"verify.{k} = {v}" for k, v in asdict(vcfg).items()]
    head += [f"samples = {samples}", f"eps_final = {eps_final!r}", ""]
    with open(os.path.join(base, "report.txt"), "w") as fh:
        fh.write("\n".join(head) + "\n")
        for rep in reports:
            fh.write(rep.to_text() + "\n")
    with open(os.path.join(base, "summary.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["check", "sample", "clean", "excluded", "sup_residual", "grid_size",
                    "budget", "within_budget"])
        for rep in reports:
            b = _budgets(rep.name, rep, eps_final)
            w.writerow([rep.name, rep.sample, int(bool(rep.clean)), int(rep.excluded),
                        _fmt(rep.sup_residual), rep.grid_size, _fmt(b),
                        int(rep.sup_residual <= b)])
    for name in CHECKS:
        mine = [r for r in reports if r.name == name]
        if not mine:
            continue
        with open(os.path.join(base, f"{name}.csv"), "w", newline="") as fh:
            fh.write(mine[0].to_csv())
            for rep in mine[1:]:
                fh.write(rep.to_csv().split("\n", 1)[1])


# -- freq -----------------------------------------------------------------------------

def _floats(values, what):
    try:
        return np.array([float(v) for v in " ".join(values).replace(",", " ").split()])
    except ValueError as exc:
        raise GuardError(f"{what} must be numbers") from exc


def _map_and_box(args):
    """Frequency map and box from ``--omega``/``--box`` or a problem file."""
    spec = None
    if args.problem:
        spec = parse_problem(_read_text(args.problem), source=args.problem)
    if args.omega:
        exprs = [e.strip() for e in args.omega.split(",") if e.strip()]
        dim = len(_floats(args.box, "--box")) // 2 if args.box else (spec.dim if spec else None)
        fmap = FreqMap.from_expressions(exprs, dim)
    elif spec is not None:
        fmap = FreqMap.from_expressions(spec.omega_exprs(), spec.dim)
    else:
        raise GuardError("give --omega or --problem")
    if args.box:
        b = _floats(args.box, "--box")
        if b.size != 2 * fmap.dim:
            raise GuardError(f"--box needs {2 * fmap.dim} numbers (lower then upper corner)")
        box = (b[: fmap.dim], b[fmap.dim :])
    elif spec is not None:
        box = (spec.lower, spec.upper)
    else:
        raise GuardError("give --box or --problem")
    return fmap, box, spec


def _engine_view(run_dir):
    """Just enough of a finished run for :func:`engine_frequency_map`."""
    loaded = load_run(run_dir)
    cp = loaded["manifest"]
    types = {f.name: f.type for f in fields(RunConfig)}
    kw = {}
    for k, raw in cp["config"].items():
        key = next(name for name in types if name.lower() == k)
        if raw == "None":
            kw[key] = None
        elif key in ("m", "j_max", "j_stop", "K_check_mult", "K_max", "d_max"):
            kw[key] = int(raw)
        elif key == "crosscheck":
            kw[key] = raw == "True"
        else:
            kw[key] = float(raw)
    cfg = RunConfig(**kw)
    schedule = []
    for j in range(loaded["steps"] + 1):
        sec = cp[f"schedule_{j}"]
        vals = {}
        for f in fields(StepParams):
            raw = sec[f.name.lower()]
            vals[f.name] = int(raw) if f.name in ("j", "K", "n") else float(raw)
        schedule.append(StepParams(**vals))
    spec = parse_problem(_read_text(os.path.join(run_dir, "problem.ini")),
                         source=os.path.join(run_dir, "problem.ini"))
    view = SimpleNamespace(config=cfg, schedule=schedule, omega0=loaded["omega0"],
                           grid=SimpleNamespace(dim=spec.dim))
    return spec, view


def _emit(text, path, stream):
    if path:
        with open(path, "w", newline="") as fh:
            fh.write(text)
    else:
        stream.write(text)


def _kv(d, stream):
    for k, v in d.items():
        print(f"{k} = {v}", file=stream)


def freq_degree(args, stream):
    fmap, box, _ = _map_and_box(args)
    target = _floats(args.target, "--target")
    res = brouwer_degree(fmap, box, target, max_level=args.max_level)
    _kv({"degree": res.degree, "boundary_margin": repr(res.boundary_margin),
         "level": res.level, "preimages": len(res.signs)}, stream)
    buf = io.StringIO()
    w = csv.writer(buf)
    w.writerow([f"xi{i + 1}" for i in range(fmap.dim)] + ["sign"])
    for p, s in zip(res.preimages, res.signs):
        w.writerow([_fmt(v) for v in p] + [int(s)])
    if args.csv:
        _emit(buf.getvalue(), args.csv, stream)
    return res


def freq_dilate(args, stream):
    if args.run:
        spec, view = _engine_view(args.run)
        fmap = engine_frequency_map(spec.family(), view)
        box = (spec.lower, spec.upper)
        if args.box:
            b = _floats(args.box, "--box")
            box = (b[: spec.dim], b[spec.dim :])
    else:
        fmap, box, _ = _map_and_box(args)
    targets = _floats(args.omega0, "--omega0").reshape(-1, fmap.n)
    buf = io.StringIO()
    w = csv.writer(buf)
    w.writerow([f"target{i + 1}" for i in range(fmap.n)] + [f"xi{i + 1}" for i in
                                                             range(fmap.dim)]
               + ["lambda", "residual", "degree", "boundary_margin", "perturbation_bound"])
    sols = []
    for t in targets:
        sol = solve_dilation(fmap, box, t, tol=args.tol)
        sols.append(sol)
        w.writerow([_fmt(v) for v in t] + [_fmt(v) for v in sol.xi]
                   + [_fmt(sol.lam), _fmt(sol.residual), sol.degree, _fmt(sol.boundary_margin),
                      _fmt(sol.perturbation_bound)])
    _emit(buf.getvalue(), args.csv, stream)
    return sols


def freq_measure(args, stream):
    omega0 = _floats(args.omega0, "--omega0")
    rep = resonance_measure_2d(omega0, args.alpha, args.tau, args.lam0, args.K,
                               fit_levels=args.fit_levels)
    _kv({"measure": repr(rep.measure), "K": rep.K, "bad_intervals": len(rep.intervals),
         "exponent": repr(rep.exponent)}, stream)
    for lam, m in rep.scan:
        print(f"scan lam0={lam!r} measure={m!r}", file=stream)
    if args.csv:
        _emit(rep.to_csv(), args.csv, stream)
    return rep


def freq_window(args, stream):
    omega0 = _floats(args.omega0, "--omega0")
    rep = dio_window_1d(omega0, args.nu0, args.mu0, None, args.alpha, args.tau, args.sigma,
                        args.K)
    _kv({"measure": repr(rep.measure), "K": rep.K, "bad_intervals": len(rep.intervals),
         "admissible_intervals": len(rep.admissible)}, stream)
    if args.csv:
        _emit(rep.to_csv(), args.csv, stream)
    return rep


def freq_elliptic(args, stream):
    spec = None
    if args.problem:
        spec = parse_problem(_read_text(args.problem), source=args.problem)
    ell = spec.elliptic if spec is not None else None
    if args.beta:
        beta = _floats(args.beta, "--beta")
    elif ell is not None:
        beta = ell["beta"]
    else:
        raise GuardError("give --beta or a problem file with an [elliptic] section")
    omega0 = _floats(args.omega0, "--omega0")
    if args.M:
        M = _floats(args.M, "--M").reshape(omega0.size, beta.size)
    elif ell is not None:
        M = ell["M"]
    else:
        M = np.zeros((omega0.size, beta.size))
    if args.box:
        b = _floats(args.box, "--box")
        box = (b[: omega0.size], b[omega0.size :])
    elif spec is not None:
        box = (spec.lower, spec.upper)
    else:
        raise GuardError("give --box or --problem")
    res = elliptic_dilation(omega0, beta, M, None, None, box, args.alpha, args.tau, args.sigma,
                            args.K)
    buf = io.StringIO()
    w = csv.writer(buf)
    w.writerow(["lambda"] + [f"varpi{i + 1}" for i in range(omega0.size)]
               + ["residual", "membership_margin", "member"])
    for lam, v, r, rep in zip(res.lam, res.varpi, res.residual, res.reports):
        w.writerow([_fmt(lam)] + [_fmt(x) for x in v] + [_fmt(r), _fmt(rep.margin),
                                                          int(rep.passed)])
    _emit(buf.getvalue(), args.csv, stream)
    return res


FREQ = {"degree": freq_degree, "dilate": freq_dilate, "measure": freq_measure,
        "window": freq_window, "elliptic": freq_elliptic}


def cmd_freq(sub, args, stream=sys.stdout):
    return FREQ[sub](args, stream)


# -- entry point -------------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="kamtori", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run the normalization for a problem file")
    r.add_argument("--problem", required=True)
    r.add_argument("--config")
    r.add_argument("--out", required=True, help="run directory")
    r.add_argument("--resume-from", type=int, default=None, metavar="J")

    v = sub.add_parser("verify", help="residual checks on a stored run")
    v.add_argument("--out", required=True, help="run directory")
    v.add_argument("--checks", default=",".join(CHECKS))
    v.add_argument("--samples", default="clean", help="all | clean | 0,3,5 | 2:7")

    f = sub.add_parser("freq", help="frequency-map tools")
    fs = f.add_subparsers(dest="freq_command", required=True)

    def common_map(q):
        q.add_argument("--problem")
        q.add_argument("--omega", help="comma-separated expressions in xi1..xid")
        q.add_argument("--box", nargs="+", help="lower corner then upper corner")
        q.add_argument("--csv", help="write CSV here instead of stdout")

    d = fs.add_parser("degree")
    common_map(d)
    d.add_argument("--target", nargs="+", required=True)
    d.add_argument("--max-level", type=int, default=7)

    dl = fs.add_parser("dilate")
    common_map(dl)
    dl.add_argument("--run", help="use the limit frequency map of this run directory")
    dl.add_argument("--omega0", nargs="+", required=True,
                    help="one target, or several concatenated")
    dl.add_argument("--tol", type=float, default=1e-10)

    m = fs.add_parser("measure")
    m.add_argument("--omega0", nargs="+", required=True)
    m.add_argument("--alpha", type=float, required=True)
    m.add_argument("--tau", type=float, required=True)
    m.add_argument("--lam0", type=float, required=True)
    m.add_argument("--K", type=int, required=True)
    m.add_argument("--fit-levels", type=int, default=3)
    m.add_argument("--csv")

    w = fs.add_parser("window")
    w.add_argument("--omega0", nargs="+", required=True)
    w.add_argument("--nu0", type=float, required=True)
    w.add_argument("--mu0", type=float, required=True)
    w.add_argument("--alpha", type=float, required=True)
    w.add_argument("--tau", type=float, required=True)
    w.add_argument("--sigma", type=float, required=True)
    w.add_argument("--K", type=int, required=True)
    w.add_argument("--csv")

    e = fs.add_parser("elliptic")
    e.add_argument("--problem")
    e.add_argument("--omega0", nargs="+", required=True)
    e.add_argument("--beta", nargs="+")
    e.add_argument("--M", nargs="+", help="n * nbar numbers, row-major")
    e.add_argument("--box", nargs="+")
    e.add_argument("--alpha", type=float, required=True)
    e.add_argument("--tau", type=float, required=True)
    e.add_argument("--sigma", type=float, required=True)
    e.add_argument("--K", type=int, required=True)
    e.add_argument("--csv")
    return p


def main(argv=None, stream=None) -> int:
    stream = stream or sys.stdout
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "run":
            cmd_run(args.problem, args.config, args.out, args.resume_from, stream)
        elif args.command == "verify":
            checks = [c.strip() for c in args.checks.split(",") if c.strip()]
            cmd_verify(args.out, checks, args.samples, stream)
        else:
            cmd_freq(args.freq_command, args, stream)
    except (KamError, HypothesisError, ProblemError, GuardError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FreqGeomError as exc:
        # a solver that fails where its preconditions held is an internal failure
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (configparser.Error, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception:  # noqa: BLE001
        traceback.print_exc()
        return 1
    return 0


def main_exit():
    """Console-script entry point."""
    sys.exit(main())
