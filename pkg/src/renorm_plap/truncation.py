"""Scalar nonlinearities: truncations, cutoffs and renormalization families.

Every family carries analytic value / first / second derivative evaluators
(vectorized over numpy arrays), the list of nonnegative breakpoints where the
second derivative may jump (the family is symmetric, so ``-b`` is a
breakpoint too), and the radius beyond which the first derivative vanishes.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

Array = np.ndarray

W2INF = "W2,inf"  # S'' bounded and piecewise continuous
C2B = "C2_b"  # twice continuously differentiable, bounded derivatives


def t_k(r, k: float):
    _check_pos(k=k)
    return np.clip(r, -k, k)


def t_k_d1(r, k: float):
    return (np.abs(r) < k).astype(float)


def tilde_t_k(s, k: float):
    """Primitive of t_k from 0: s^2/2 inside [-k, k], k|s| - k^2/2 outside."""
    _check_pos(k=k)
    a = np.abs(s)
    return np.where(a <= k, 0.5 * a * a, k * a - 0.5 * k * k)


def theta(r, k: float, kp: float):
    _check_pos(k=k, kp=kp)
    return t_k(r, k + kp) - t_k(r, k)


def h_l(r, l: float):
    _check_pos(l=l)
    return np.clip(l + 1.0 - np.abs(r), 0.0, 1.0)


def t_s_sigma_d1(r, s: float, sigma: float):
    _check_pos(s=s, sigma=sigma)
    return np.clip((s + sigma - np.abs(r)) / sigma, 0.0, 1.0)


def t_s_sigma_d2(r, s: float, sigma: float):
    a = np.abs(r)
    return np.where((a > s) & (a < s + sigma), -np.sign(r) / sigma, 0.0)


def t_s_sigma(r, s: float, sigma: float):
    _check_pos(s=s, sigma=sigma)
    a = np.abs(r)
    ramp = np.minimum(a, s + sigma) - s
    val = np.where(a <= s, a, s + ramp - 0.5 * ramp * ramp / sigma)
    return np.sign(r) * val


def hk_delta_d2(r, k: float, delta: float):
    _check_pos(k=k, delta=delta)
    a = np.abs(r)
    return np.where(a < k, 1.0, np.where(a <= k + 1.0 / delta, -k * delta, 0.0))


def _check_pos(**kw):
    for name, val in kw.items():
        if not np.all(np.asarray(val) > 0):
            raise ValueError(f"{name} must be > 0, got {val}")


@dataclass(frozen=True)
class ScalarFamily:
    label: str
    value: Callable[[Array], Array]
    d1: Callable[[Array], Array]
    d2: Callable[[Array], Array]
    breakpoints: tuple[float, ...] = ()
    support_radius: float = math.inf
    regularity: str = W2INF

    def __call__(self, r):
        return self.value(r)

    def all_breakpoints(self) -> np.ndarray:
        b = np.asarray(self.breakpoints, dtype=float)
        return np.unique(np.concatenate([-b, b]))

    @property
    def compact_derivative(self) -> bool:
        return math.isfinite(self.support_radius)


def _wrap(f):
    return lambda r: np.asarray(f(np.asarray(r, dtype=float)), dtype=float)


def tk_family(k: float) -> ScalarFamily:
    _check_pos(k=k)
    return ScalarFamily(
        f"tk:{k:g}",
        _wrap(lambda r: t_k(r, k)),
        _wrap(lambda r: t_k_d1(r, k)),
        _wrap(np.zeros_like),
        (k,),
    )


def tilde_tk_family(k: float) -> ScalarFamily:
    _check_pos(k=k)
    return ScalarFamily(
        f"tilde_tk:{k:g}",
        _wrap(lambda r: tilde_t_k(r, k)),
        _wrap(lambda r: t_k(r, k)),
        _wrap(lambda r: t_k_d1(r, k)),
        (k,),
    )


def theta_family(k: float, kp: float) -> ScalarFamily:
    _check_pos(k=k, kp=kp)
    return ScalarFamily(
        f"theta:{k:g}:{kp:g}",
        _wrap(lambda r: theta(r, k, kp)),
        _wrap(lambda r: ((np.abs(r) > k) & (np.abs(r) < k + kp)).astype(float)),
        _wrap(np.zeros_like),
        (k, k + kp),
    )


def hl_family(l: float) -> ScalarFamily:
    _check_pos(l=l)

    def d1(r):
        a = np.abs(r)
        return np.where((a > l) & (a < l + 1), -np.sign(r), 0.0)

    return ScalarFamily(
        f"hl:{l:g}", _wrap(lambda r: h_l(r, l)), _wrap(d1), _wrap(np.zeros_like), (l, l + 1), l + 1
    )


def tssigma_family(s: float, sigma: float) -> ScalarFamily:
    _check_pos(s=s, sigma=sigma)
    return ScalarFamily(
        f"tssigma:{s:g}:{sigma:g}",
        _wrap(lambda r: t_s_sigma(r, s, sigma)),
        _wrap(lambda r: t_s_sigma_d1(r, s, sigma)),
        _wrap(lambda r: t_s_sigma_d2(r, s, sigma)),
        (s, s + sigma),
        s + sigma,
    )


def compact_s_family(k: float, l: float) -> ScalarFamily:
    """S(r) = int_0^r h_l(x) theta(x, k, 1) dx.

    S' is piecewise quadratic (product of two piecewise linear factors), so S
    is evaluated exactly by Simpson's rule on each piece.
    """
    _check_pos(k=k, l=l)
    bps = tuple(sorted({k, k + 1.0, l, l + 1.0}))

    def d1(r):
        return h_l(r, l) * theta(r, k, 1.0)

    def d2(r):
        a = np.abs(r)
        th = np.clip(a - k, 0.0, 1.0)
        dth = ((a > k) & (a < k + 1)).astype(float)
        hl = np.clip(l + 1.0 - a, 0.0, 1.0)
        dhl = np.where((a > l) & (a < l + 1), -1.0, 0.0)
        # d1 is odd, so d2 = d/d|r| (hl * th) is even
        return dhl * th + hl * dth

    knots = np.array((0.0,) + bps)

    def simpson(a, b):
        m = 0.5 * (a + b)
        fa, fm, fb = (np.abs(d1(x)) for x in (a, m, b))
        return (b - a) / 6.0 * (fa + 4 * fm + fb)

    cumulative = np.concatenate([[0.0], np.cumsum(simpson(knots[:-1], knots[1:]))])

    def value(r):
        a = np.abs(r)
        j = np.clip(np.searchsorted(knots, a, side="right") - 1, 0, len(knots) - 1)
        return cumulative[j] + simpson(knots[j], np.minimum(a, knots[-1]).clip(min=knots[j]))

    return ScalarFamily(f"compact_s:{k:g}:{l:g}", _wrap(value), _wrap(d1), _wrap(d2), bps, l + 1.0)


def tanh_family(scale: float) -> ScalarFamily:
    """H(r) = tanh(r / scale): a C^2_b family for product-rule checks."""
    _check_pos(scale=scale)

    def d1(r):
        return 1.0 / (scale * np.cosh(r / scale) ** 2)

    def d2(r):
        th = np.tanh(r / scale)
        return -2.0 * th * (1.0 - th * th) / scale**2

    return ScalarFamily(
        f"tanh:{scale:g}", _wrap(lambda r: np.tanh(r / scale)), _wrap(d1), _wrap(d2), (), math.inf, C2B
    )


def constant_family(c: float = 0.0) -> ScalarFamily:
    zero = _wrap(np.zeros_like)
    return ScalarFamily(f"const:{c:g}", _wrap(lambda r: np.full_like(r, c)), zero, zero, (), 0.0, C2B)


_REGISTRY = {
    "tk": (tk_family, 1),
    "tilde_tk": (tilde_tk_family, 1),
    "theta": (theta_family, 2),
    "hl": (hl_family, 1),
    "tssigma": (tssigma_family, 2),
    "compact_s": (compact_s_family, 2),
    "tanh": (tanh_family, 1),
    "const": (constant_family, 1),
}


def make_family(name: str) -> ScalarFamily:
    """Parse a registry name such as ``compact_s:1:3`` or ``tk:2``."""
    kind, *args = name.split(":")
    if kind not in _REGISTRY or len(args) != _REGISTRY[kind][1]:
        raise ValueError(f"unknown family {name!r}")
    try:
        vals = [float(a) for a in args]
    except ValueError:
        raise ValueError(f"bad numeric argument in family {name!r}") from None
    return _REGISTRY[kind][0](*vals)


def derivative_audit(fam: ScalarFamily, r: np.ndarray, step: float = 1e-6) -> tuple[float, float]:
    """Max central-difference mismatch of (d1 vs value) and (d2 vs d1).

    Points closer than ``2 * step`` to a breakpoint are skipped.
    """
    r = np.asarray(r, dtype=float)
    bps = fam.all_breakpoints()
    if bps.size:
        r = r[np.min(np.abs(r[:, None] - bps[None, :]), axis=1) > 2 * step]
    fd1 = (fam.value(r + step) - fam.value(r - step)) / (2 * step)
    fd2 = (fam.d1(r + step) - fam.d1(r - step)) / (2 * step)
    return float(np.max(np.abs(fd1 - fam.d1(r)), initial=0.0)), float(
        np.max(np.abs(fd2 - fam.d2(r)), initial=0.0)
    )
