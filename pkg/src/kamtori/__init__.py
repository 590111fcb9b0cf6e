"""Parameter-family KAM normalization on the torus.

Modules
-------
series
    Sparse Fourier-Taylor series with per-sample coefficients.
divisors
    Smooth cutoff, extended inverse small divisors and Diophantine scans.
kam
    Schedule, homological equation, Lie transforms and the iteration driver.
verify
    Independent numerical checks of the normalizing map.
freqgeom
    Degree, dilation and resonance-measure tools for frequency maps.
problem, cli
    Problem files and the command line.
"""

from importlib import resources

from .grid import ParamGrid
from .series import Caps, FTSeries, NormParams
from .divisors import DivisorParams, check_dio, extended_inverse
from .kam import Hamiltonian, HamiltonianFamily, RunConfig, KamError, run, load_run

__version__ = "0.1.0"

__all__ = [
    "ParamGrid", "Caps", "FTSeries", "NormParams", "DivisorParams", "check_dio",
    "extended_inverse", "Hamiltonian", "HamiltonianFamily", "RunConfig", "KamError", "run",
    "load_run", "data_path",
]


def data_path(name):
    """Path of a shipped example or schema file in ``kamtori/data``."""
    return str(resources.files(__package__).joinpath("data", name))
