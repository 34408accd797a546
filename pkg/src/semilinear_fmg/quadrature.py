"""Quadrature rules on the reference triangle in barycentric form.

Weights are normalised to sum to one, so a physical integral is
``area * sum(w_q * f(x_q))``.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import permutations

import numpy as np

__all__ = ["QuadratureRule", "triangle_rule", "collapsed_gauss_rule"]


@dataclass(frozen=True, eq=False)
class QuadratureRule:
    name: str
    points: np.ndarray  # (nq, 3) barycentric coordinates
    weights: np.ndarray  # (nq,)
    degree: int

    @property
    def n_points(self) -> int:
        return self.weights.size

    def physical_points(self, coords: np.ndarray) -> np.ndarray:
        """Map to cells with vertex coordinates ``coords`` (nc, 3, 2) -> (nc, nq, 2)."""
        return np.einsum("qi,cid->cqd", self.points, coords)


def _orbit(bary, weight):
    pts = sorted(set(permutations(bary)))
    return [list(p) for p in pts], [weight] * len(pts)


def _build(name, degree, orbits):
    pts, wts = [], []
    for bary, w in orbits:
        p, ww = _orbit(bary, w)
        pts += p
        wts += ww
    return QuadratureRule(name, np.array(pts), np.array(wts), degree)


def _rule_1():
    return _build("centroid", 1, [((1 / 3, 1 / 3, 1 / 3), 1.0)])


def _rule_2():
    return _build("strang-fix-3", 2, [((2 / 3, 1 / 6, 1 / 6), 1 / 3)])


def _rule_4():
    # Dunavant, 6 points
    a1, w1 = 0.445948490915964886318329, 0.223381589678011465944827
    a2, w2 = 0.091576213509770743459571, 0.109951743655321867638506
    return _build(
        "dunavant-6",
        4,
        [((a1, a1, 1 - 2 * a1), w1), ((a2, a2, 1 - 2 * a2), w2)],
    )


def _rule_6():
    # Dunavant, 12 points
    a1, w1 = 0.249286745170910421291639, 0.116786275726379366030690
    a2, w2 = 0.063089014491502228340332, 0.050844906370206816920937
    b = (0.053145049844816947353250, 0.310352451033784405416608, 0.636502499121398647230143)
    w3 = 0.082851075618373575193553
    return _build(
        "dunavant-12",
        6,
        [((a1, a1, 1 - 2 * a1), w1), ((a2, a2, 1 - 2 * a2), w2), (b, w3)],
    )


_RULES = {1: _rule_1, 2: _rule_2, 4: _rule_4, 6: _rule_6}
_CACHE: dict[int, QuadratureRule] = {}


def triangle_rule(degree: int) -> QuadratureRule:
    """Cheapest tabulated rule exact for polynomials of total degree ``degree``."""
    for d in sorted(_RULES):
        if d >= degree:
            if d not in _CACHE:
                _CACHE[d] = _RULES[d]()
            return _CACHE[d]
    raise ValueError(f"no tabulated triangle rule of degree {degree}; use collapsed_gauss_rule")


def collapsed_gauss_rule(n: int) -> QuadratureRule:
    """Conical Gauss-Legendre product rule with ``n**2`` points, exact to degree ``2n - 2``."""
    t, w = np.polynomial.legendre.leggauss(n)
    t = 0.5 * (t + 1.0)
    w = 0.5 * w
    u, v = np.meshgrid(t, t, indexing="ij")
    wu, wv = np.meshgrid(w, w, indexing="ij")
    x = u.ravel()
    y = (v * (1.0 - u)).ravel()
    weights = (wu * wv * (1.0 - u)).ravel() * 2.0
    points = np.column_stack([1.0 - x - y, x, y])
    return QuadratureRule(f"collapsed-gauss-{n}", points, weights, 2 * n - 2)
