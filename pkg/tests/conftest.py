"""Shared fixtures: example runs are computed once per session."""

import time

import numpy as np
import pytest

from kamtori import data_path
from kamtori.kam import run
from kamtori.problem import parse_problem, parse_config
from kamtori.series import Caps


def load_example(problem, config):
    with open(data_path(problem)) as fh:
        spec = parse_problem(fh.read(), source=problem)
    with open(data_path(config)) as fh:
        cfg, vcfg = parse_config(fh.read(), spec, source=config)
    grid = spec.grid()
    H0 = spec.family().at(grid.samples, Caps(10 ** 6, cfg.d_max, cfg.s, cfg.r))
    return spec, cfg, vcfg, grid, H0


def timed_run(problem, config, out_dir=None):
    spec, cfg, vcfg, grid, H0 = load_example(problem, config)
    t0 = time.perf_counter()
    res = run(H0, grid, cfg, out_dir=out_dir)
    return {"spec": spec, "cfg": cfg, "vcfg": vcfg, "grid": grid, "H0": H0, "res": res,
            "seconds": time.perf_counter() - t0}


@pytest.fixture(scope="session")
def two_torus_run():
    return timed_run("two_torus.ini", "two_torus_run.ini")


@pytest.fixture(scope="session")
def pendulum_run():
    return timed_run("pendulum.ini", "pendulum_run.ini")


@pytest.fixture(scope="session")
def coupled_pendulum_run():
    return timed_run("pendulum_coupled.ini", "pendulum_run.ini")


@pytest.fixture(scope="session")
def odd_power_run():
    return timed_run("odd_power.ini", "two_torus_run.ini")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def odd_power_cli(tmp_path_factory):
    """Run directory of the odd-power example written through the command line."""
    import io
    from kamtori.cli import main
    out = str(tmp_path_factory.mktemp("cli") / "odd")
    rc = main(["run", "--problem", data_path("odd_power.ini"), "--config",
               data_path("two_torus_run.ini"), "--out", out], stream=io.StringIO())
    assert rc == 0
    return out
