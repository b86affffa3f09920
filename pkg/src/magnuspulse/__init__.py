"""Magnus-expansion time propagation with exact control gradients.

The package provides four propagation schemes for piecewise time evolution
under H(t) = H0 + sum_k u_k(t) H_k, their exact pulse-coefficient
gradients, an Ising spin-chain testbed, and a benchmark CLI that compares
the schemes at equal accuracy.
"""

from .coefficients import SchemeKind, TimeGrid
from .controls import ControlAnsatz

__all__ = ["ControlAnsatz", "SchemeKind", "TimeGrid"]
__version__ = "0.1.0"
