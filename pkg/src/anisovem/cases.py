"""Manufactured boundary-layer problems on the unit square.

All three exact solutions are separable, ``u = c P(x) Q(y)``, so gradients
and ``f = -lap u = -c (P'' Q + P Q'')`` follow from 1D derivatives.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np


@dataclass(frozen=True)
class Factor1D:
    """A scalar function with its first two derivatives."""

    f: Callable
    d1: Callable
    d2: Callable

    def __mul__(self, other: "Factor1D") -> "Factor1D":
        a, b = self, other
        return Factor1D(
            lambda t: a.f(t) * b.f(t),
            lambda t: a.d1(t) * b.f(t) + a.f(t) * b.d1(t),
            lambda t: a.d2(t) * b.f(t) + 2 * a.d1(t) * b.d1(t) + a.f(t) * b.d2(t),
        )


def _bubble1d() -> Factor1D:
    # t (1 - t)
    return Factor1D(lambda t: t * (1 - t), lambda t: 1 - 2 * t, lambda t: -2 + 0 * t)


def _exp_layer(shift: float = 1.0, slope: float = 0.0) -> Factor1D:
    # e^{10 t} - slope t - shift
    return Factor1D(
        lambda t: np.exp(10 * t) - slope * t - shift,
        lambda t: 10 * np.exp(10 * t) - slope,
        lambda t: 100 * np.exp(10 * t),
    )


def _one_minus() -> Factor1D:
    return Factor1D(lambda t: 1 - t, lambda t: -1 + 0 * t, lambda t: 0 * t)


@dataclass(frozen=True)
class TestCase:
    """Exact solution ``u``, gradient and forcing ``f = -lap u`` on the unit square.

    ``boundary`` is the Dirichlet datum; it is ``None`` for the homogeneous
    boundary-layer problems.
    """

    __test__ = False  # keep pytest from collecting this class

    name: str
    u: Callable
    grad: Callable
    f: Callable
    boundary: Callable | None = None

    @property
    def homogeneous(self) -> bool:
        return self.boundary is None


def _separable(name: str, c: float, P: Factor1D, Q: Factor1D) -> TestCase:
    return TestCase(
        name=name,
        u=lambda x, y: c * P.f(x) * Q.f(y),
        grad=lambda x, y: (c * P.d1(x) * Q.f(y), c * P.f(x) * Q.d1(y)),
        f=lambda x, y: -c * (P.d2(x) * Q.f(y) + P.f(x) * Q.d2(y)),
    )


def case1() -> TestCase:
    """u = 1e-6 x(1-x)(1-y)(e^{10x}-1)(e^{10y}-1): corner peak, layers in x and y."""
    P = _bubble1d() * _exp_layer()
    Q = _one_minus() * _exp_layer()
    return _separable("case1", 1e-6, P, Q)


def case2() -> TestCase:
    """u = 1e-2 xy(1-x)(1-y)(e^{10x}-1): layer in x at x = 1."""
    return _separable("case2", 1e-2, _bubble1d() * _exp_layer(), _bubble1d())


def case3() -> TestCase:
    """u = 1e-2 xy(x-1)(y-1)(e^{10x} - 5000x + 4499): bubble plus layer at x = 1."""
    return _separable("case3", 1e-2, _bubble1d() * _exp_layer(shift=-4499.0, slope=5000.0), _bubble1d())


def case3_bubble(x, y):
    """The isotropic part of case 3: 50 x (1-y) y (0.9-x) (1-x)."""
    return 50 * x * (1 - y) * y * (0.9 - x) * (1 - x)


def patch_case(order: int = 1) -> TestCase:
    """Polynomial of degree ``order`` with its own (non-zero) boundary values."""
    if order == 1:
        u = lambda x, y: 1 + 2 * x - 3 * y
        grad = lambda x, y: (2 + 0 * x, -3 + 0 * y)
        f = lambda x, y: 0 * x
    elif order == 2:
        u = lambda x, y: 1 + 2 * x - y + 0.5 * x * x + x * y + y * y
        grad = lambda x, y: (2 + x + y, -1 + x + 2 * y)
        f = lambda x, y: -3.0 + 0 * x
    else:
        raise ValueError("patch case exists for orders 1 and 2")
    return TestCase(f"patch{order}", u, grad, f, boundary=u)


CASES = {"1": case1, "2": case2, "3": case3}


def get_case(name: str, order: int = 1) -> TestCase:
    name = str(name)
    if name == "patch":
        return patch_case(order)
    try:
        return CASES[name]()
    except KeyError:
        raise ValueError(f"unknown case {name!r}; choose from 1, 2, 3, patch") from None
