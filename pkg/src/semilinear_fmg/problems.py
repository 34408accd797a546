"""Built-in semilinear model problems on the unit square and the L-shape.

All take the diffusion matrix to be the identity and homogeneous Dirichlet
data.  Terms with a fractional power use the odd extension
``sign(u) |u|^{3/2}``, which is monotone for negative arguments too.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable, Optional

import numpy as np

from .assemble import IDENTITY, DiffusionCoefficient

__all__ = [
    "NonlinearTerm",
    "ProblemSpec",
    "ZERO_TERM",
    "LINEAR_TERM",
    "CUBIC_TERM",
    "EXP_TERM",
    "POWER_3_2_TERM",
    "example1_2d",
    "example2_2d",
    "example3_2d",
    "example4_2d",
    "poisson_2d",
    "get_problem",
    "PROBLEMS",
]

PI = np.pi


@dataclass(frozen=True)
class NonlinearTerm:
    """Pointwise nonlinearity ``f(x, y, u)``, monotone nondecreasing in ``u``.

    ``lipschitz(lo, hi)`` gives the Lipschitz constant of ``u -> f(x, y, u)``
    on ``lo <= u <= hi``.
    """

    name: str
    eval: Callable
    derivative: Optional[Callable]
    lipschitz: Callable[[float, float], float]

    def __call__(self, x, y, u):
        return self.eval(x, y, u)

    def lipschitz_hint(self, lo: float, hi: float) -> float:
        return float(self.lipschitz(lo, hi))


def _zero(x, y, u):
    return np.zeros_like(np.asarray(u, dtype=float))


def _odd_power(u):
    # sign(u) |u|^{3/2} without a general power
    return u * np.sqrt(np.abs(u))


ZERO_TERM = NonlinearTerm("zero", _zero, _zero, lambda lo, hi: 0.0)
LINEAR_TERM = NonlinearTerm("u", lambda x, y, u: np.asarray(u, dtype=float),
                            lambda x, y, u: np.ones_like(np.asarray(u, dtype=float)),
                            lambda lo, hi: 1.0)
CUBIC_TERM = NonlinearTerm("u^3", lambda x, y, u: u * u * u, lambda x, y, u: 3.0 * u * u,
                           lambda lo, hi: 3.0 * max(lo * lo, hi * hi))
EXP_TERM = NonlinearTerm("-exp(-u)", lambda x, y, u: -np.exp(-u), lambda x, y, u: np.exp(-u),
                         lambda lo, hi: float(np.exp(-lo)))
POWER_3_2_TERM = NonlinearTerm("sign(u)|u|^(3/2)", lambda x, y, u: _odd_power(u),
                               lambda x, y, u: 1.5 * np.sqrt(np.abs(u)),
                               lambda lo, hi: 1.5 * np.sqrt(max(abs(lo), abs(hi))))


@dataclass(frozen=True)
class ProblemSpec:
    name: str
    domain: str  # "unit_square" or "l_shaped"
    nonlinear: NonlinearTerm
    source: Callable
    diffusion: DiffusionCoefficient = IDENTITY
    exact: Optional[Callable] = None
    exact_grad: Optional[Callable] = None
    # -div(A grad u) of the exact solution, used to rebuild manufactured sources
    exact_flux_div: Optional[Callable] = None

    @property
    def has_exact(self) -> bool:
        return self.exact is not None

    def with_nonlinear(self, term: NonlinearTerm, name: str | None = None) -> "ProblemSpec":
        """Same data with another nonlinear term; a manufactured source is rebuilt to match."""
        if self.exact is None or self.exact_flux_div is None:
            return replace(self, nonlinear=term, name=name or self.name)
        lap, exact = self.exact_flux_div, self.exact

        def source(x, y):
            return lap(x, y) + term.eval(x, y, exact(x, y))

        return replace(self, nonlinear=term, source=source, name=name or self.name)


def _constant(value):
    def g(x, y):
        return np.full(np.broadcast(x, y).shape, value, dtype=float)

    return g


def _sine_problem(name: str, freq: float, term: NonlinearTerm) -> ProblemSpec:
    w = freq * PI

    def exact(x, y):
        return np.sin(w * x) * np.sin(w * y)

    def grad(x, y):
        return w * np.cos(w * x) * np.sin(w * y), w * np.sin(w * x) * np.cos(w * y)

    def minus_laplacian(x, y):
        return 2.0 * w * w * exact(x, y)

    def source(x, y):
        return minus_laplacian(x, y) + term.eval(x, y, exact(x, y))

    return ProblemSpec(name, "unit_square", term, source, IDENTITY, exact, grad, minus_laplacian)


def example1_2d() -> ProblemSpec:
    """``-Lap u + u^3 = g`` on (0,1)^2 with exact ``u = sin(pi x) sin(pi y)``."""
    return _sine_problem("example1", 1.0, CUBIC_TERM)


def example2_2d() -> ProblemSpec:
    """``-Lap u - exp(-u) = 1`` on (0,1)^2; no closed-form solution."""
    return ProblemSpec("example2", "unit_square", EXP_TERM, _constant(1.0))


def example3_2d() -> ProblemSpec:
    """``-Lap u + sign(u)|u|^{3/2} = g`` with exact ``u = sin(2 pi x) sin(2 pi y)``.

    The nonlinearity has a continuous first derivative but an unbounded
    second derivative at ``u = 0``.
    """
    return _sine_problem("example3", 2.0, POWER_3_2_TERM)


def example4_2d() -> ProblemSpec:
    """``-Lap u + sign(u)|u|^{3/2} = 1`` on the L-shaped domain."""
    return ProblemSpec("example4", "l_shaped", POWER_3_2_TERM, _constant(1.0))


def poisson_2d() -> ProblemSpec:
    """Linear reference problem ``-Lap u = g`` with exact ``sin(pi x) sin(pi y)``."""
    return _sine_problem("poisson", 1.0, ZERO_TERM)


PROBLEMS = {
    "example1": example1_2d,
    "example2": example2_2d,
    "example3": example3_2d,
    "example4": example4_2d,
    "poisson": poisson_2d,
}


def get_problem(name: str) -> ProblemSpec:
    try:
        return PROBLEMS[name]()
    except KeyError:
        raise KeyError(f"unknown problem {name!r}; choose from {sorted(PROBLEMS)}") from None
