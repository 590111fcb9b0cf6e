"""Problem and configuration files."""

import numpy as np
import pytest

from kamtori import data_path
from kamtori.problem import ProblemError, parse_problem, parse_config

BASE = """\
[problem]
n = 2
tau = 1.5
alpha = 0.05
s = 2.0
r = 1.0

[parameters]
lower = 1.0 1.3
upper = 2.0 1.7
grid = regular 3 2

[frequency]
omega = xi1, xi2 + 0*xi1

[perturbation]
eps = 1e-6
symmetrize = yes
terms =
    1 0 | 0 0 | 0.5*eps
    1 1 | 1 0 | eps*xi1
"""


def test_parses_example_files():
    for name in ("pendulum.ini", "pendulum_coupled.ini", "two_torus.ini", "odd_power.ini"):
        spec = parse_problem(open(data_path(name)).read(), name)
        assert spec.n == len(spec.omega)
        spec.family()
        spec.grid()


def test_parse_values():
    spec = parse_problem(BASE)
    assert (spec.n, spec.tau, spec.alpha, spec.s, spec.r) == (2, 1.5, 0.05, 2.0, 1.0)
    assert spec.grid().samples.shape == (6, 2)
    assert [t[:2] for t in spec.terms] == [((1, 0), (0, 0)), ((1, 1), (1, 0))]
    # term lines point at the continuation lines of the text
    assert [t[3] for t in spec.terms] == [20, 21]
    fam = spec.family()
    assert fam.n == 2 and spec.constants == {"eps": 1e-6}


@pytest.mark.parametrize("old,new,line,msg", [
    ("1 1 | 1 0 | eps*xi1", "1 1 | 1 0 | eps*foo", 21, "unknown names"),
    ("1 1 | 1 0 | eps*xi1", "1 1 | 1 | eps", 21, "need 2 entries"),
    ("1 1 | 1 0 | eps*xi1", "1 1 | 1 -1 | eps", 21, "non-negative"),
    ("1 1 | 1 0 | eps*xi1", "1 1 1 0 eps", 21, "a term reads"),
    ("alpha = 0.05", "alpha = 2", 4, "alpha must lie"),
    ("upper = 2.0 1.7", "upper = 2.0", 10, "upper needs 2"),
    ("grid = regular 3 2", "grid = regular 3", 11, "takes 2 counts"),
    ("omega = xi1, xi2 + 0*xi1", "omega = xi1", 14, "omega needs 2"),
    ("n = 2", "n = two", 2, "n must be a int"),
])
def test_errors_carry_line_numbers(old, new, line, msg):
    with pytest.raises(ProblemError, match=msg) as info:
        parse_problem(BASE.replace(old, new), "p.ini")
    assert info.value.line == line
    assert str(info.value).startswith(f"p.ini:{line}: ")


def test_missing_section():
    with pytest.raises(ProblemError, match=r"missing section \[frequency\]"):
        parse_problem(BASE.split("[frequency]")[0])


def test_nonzero_m_is_rejected():
    with pytest.raises(ProblemError, match="m = 0"):
        parse_problem(BASE.replace("r = 1.0", "r = 1.0\nm = 1"))


def test_elliptic_section_row_major():
    text = BASE + "\n[elliptic]\nnbar = 2\nbeta = 1.0 0.5\nM = 1 2 3 4\n"
    spec = parse_problem(text)
    assert np.array_equal(spec.elliptic["M"], [[1, 2], [3, 4]])
    with pytest.raises(ProblemError, match="M needs 4"):
        parse_problem(text.replace("M = 1 2 3 4", "M = 1 2 3"))


def test_config_parsing():
    spec = parse_problem(BASE)
    cfg, vcfg = parse_config("[run]\nc_growth = 2.5\nK_max = none\n[verify]\ntheta_grid = 16\n",
                             spec)
    assert cfg.c_growth == 2.5 and cfg.K_max is None and cfg.s == 2.0
    assert vcfg.theta_grid == 16 and vcfg.action_points == 5
    with pytest.raises(ProblemError, match="unknown run option 'cgrowth'") as info:
        parse_config("[run]\nc_growth = 1\ncgrowth = 1\n", spec, "c.ini")
    assert info.value.line == 3
    with pytest.raises(ProblemError, match="theta_grid must be positive"):
        parse_config("[verify]\ntheta_grid = 0\n", spec)
