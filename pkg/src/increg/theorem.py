"""Numerical study of quadratic-penalty minima in one dimension.

For a twice-differentiable loss L and penalty strength lam > 0, let
Y(w) = L(w) + (lam/2) w^2. At a stationary point w0 of Y we have
lam = -L'(w0)/w0, and along the curve of continued local minima
d lam / d w = -(L''(w0) + lam)/w0, so while the second-order condition
L'' + lam > 0 holds, raising lam pulls |w*| strictly toward zero. This
module minimizes Y, evaluates that derivative, and sweeps penalty
increments over an objective library to check the shrinkage numerically.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Callable

GRAD_TOL = 1e-10


class MinimizationError(RuntimeError):
    """No local minimum could be located inside the objective's domain."""


class StationarityError(ValueError):
    """A (lam, w) pair does not sit on the stationarity curve."""


@dataclass(frozen=True)
class Objective1D:
    """A scalar loss with analytic first and second derivatives."""

    name: str
    f: Callable[[float], float]
    df: Callable[[float], float]
    d2f: Callable[[float], float]
    domain: tuple[float, float] = (-1e9, 1e9)
    inits: tuple[float, ...] = (1.0,)


@dataclass(frozen=True)
class LocalMinResult:
    lam: float
    omega_star: float
    value: float
    converged: bool


def _clip(w: float, domain: tuple[float, float]) -> float:
    return min(max(w, domain[0]), domain[1])


def minimize(obj: Objective1D, lam: float, w_init: float) -> LocalMinResult:
    """Locate the local minimum of L(w) + (lam/2) w^2 nearest to w_init.

    Damped Newton first; if it stalls, walk downhill to bracket a sign
    change of the gradient and bisect. Converged means the gradient
    magnitude is below 1e-10 with a positive second derivative.
    """
    if lam <= 0:
        raise ValueError(f"penalty strength must be positive, got {lam}")
    Y = lambda w: obj.f(w) + 0.5 * lam * w * w
    Yp = lambda w: obj.df(w) + lam * w
    Ypp = lambda w: obj.d2f(w) + lam
    lo, hi = obj.domain

    w = _clip(float(w_init), obj.domain)
    for _ in range(100):
        g = Yp(w)
        if abs(g) < GRAD_TOL and Ypp(w) > 0:
            return LocalMinResult(lam, w, Y(w), True)
        h = Ypp(w)
        if h > 0:
            step = -g / h
        else:
            step = -math.copysign(0.1 * (1.0 + abs(w)), g)
        y0 = Y(w)
        for _ in range(60):
            cand = _clip(w + step, obj.domain)
            if Y(cand) <= y0 or cand == w:
                break
            step *= 0.5
        if cand == w:
            break
        w = cand
    else:
        if abs(Yp(w)) < GRAD_TOL and Ypp(w) > 0:
            return LocalMinResult(lam, w, Y(w), True)

    # bracket a gradient sign change by walking downhill from w_init
    w0 = _clip(float(w_init), obj.domain)
    g0 = Yp(w0)
    if abs(g0) < GRAD_TOL and Ypp(w0) > 0:
        return LocalMinResult(lam, w0, Y(w0), True)
    direction = -math.copysign(1.0, g0)
    t = 1e-3 * (1.0 + abs(w0))
    far = w0
    for _ in range(200):
        nxt = _clip(w0 + direction * t, obj.domain)
        if Yp(nxt) * g0 <= 0:
            far = nxt
            break
        if nxt == far:  # pinned at the domain edge, still no sign change
            raise MinimizationError(
                f"{obj.name}: no local minimum in domain from {w_init} at lam={lam}"
            )
        far = nxt
        t *= 2.0
    else:
        raise MinimizationError(
            f"{obj.name}: gradient never changes sign from {w_init} at lam={lam}"
        )
    a, b = (w0, far) if w0 < far else (far, w0)
    ga = Yp(a)
    for _ in range(200):
        mid = 0.5 * (a + b)
        gm = Yp(mid)
        if abs(gm) < GRAD_TOL:
            break
        if (gm < 0) == (ga < 0):
            a, ga = mid, gm
        else:
            b = mid
    w = 0.5 * (a + b)
    for _ in range(50):  # Newton polish inside the bracket
        g, h = Yp(w), Ypp(w)
        if abs(g) < GRAD_TOL or h <= 0:
            break
        w = _clip(w - g / h, obj.domain)
    ok = abs(Yp(w)) < GRAD_TOL and Ypp(w) > 0
    if not ok:
        raise MinimizationError(
            f"{obj.name}: stalled at w={w} (grad {Yp(w):.3e}) for lam={lam}"
        )
    return LocalMinResult(lam, w, Y(w), True)


def stationary_lambda(obj: Objective1D, w: float) -> float:
    """The penalty strength that makes w stationary: -L'(w)/w."""
    if w == 0:
        raise StationarityError("stationarity curve is singular at w = 0")
    return -obj.df(w) / w


def dlambda_domega(obj: Objective1D, lam0: float, w0: float) -> float:
    """Slope of the stationarity curve lam(w) at a stationary pair.

    Equals -(L''(w0) + lam0)/w0; negative for w0 > 0 and positive for
    w0 < 0 whenever the second-order condition L'' + lam > 0 holds, which
    is exactly why growing the penalty shrinks the minimum's magnitude.
    """
    if w0 == 0:
        raise StationarityError("derivative is singular at w = 0")
    resid = abs(obj.df(w0) + lam0 * w0)
    scale = 1.0 + abs(obj.df(w0)) + abs(lam0 * w0)
    if resid > 1e-6 * scale:
        raise StationarityError(
            f"(lam={lam0}, w={w0}) is not stationary: residual {resid:.3e}"
        )
    return -(obj.d2f(w0) + lam0) / w0


@dataclass
class ContinuationRow:
    objective: str
    lambda0: float
    omega0: float
    lambda1: float
    omega1: float
    shrank: bool
    jumped: bool


def objective_library() -> list[Objective1D]:
    """Convex, double-well, and rippled cases for the shrinkage sweep."""
    quad = Objective1D(
        name="quadratic",
        f=lambda w: (w - 1.0) ** 2,
        df=lambda w: 2.0 * (w - 1.0),
        d2f=lambda w: 2.0,
        inits=(1.0,),
    )
    quartic = Objective1D(
        name="quartic-double-well",
        f=lambda w: (w * w - 1.0) ** 2,
        df=lambda w: 4.0 * w * (w * w - 1.0),
        d2f=lambda w: 12.0 * w * w - 4.0,
        inits=(1.0, -1.0),
    )
    ripple = Objective1D(
        name="rippled-quadratic",
        f=lambda w: (w - 1.0) ** 2 + 0.1 * math.cos(10.0 * w),
        df=lambda w: 2.0 * (w - 1.0) - math.sin(10.0 * w),
        d2f=lambda w: 2.0 - 10.0 * math.cos(10.0 * w),
        inits=(1.0,),
    )
    return [quad, quartic, ripple]


def theorem1_suite(
    objectives: list[Objective1D] | None = None,
    lambdas: tuple[float, ...] = (0.25, 0.5, 1.0, 2.0),
    deltas: tuple[float, ...] | None = None,
) -> tuple[bool, list[ContinuationRow]]:
    """Shrinkage check over a grid of penalty increments.

    For each objective, branch seed, and base strength lam0, the local
    minimum is continued to lam0 + delta and |w| must strictly shrink.
    A continuation that leaves the basin (step far beyond the local slope
    prediction) is flagged as a jump and excluded from the verdict, since
    the statement under test is local.
    """
    objectives = objective_library() if objectives is None else objectives
    rows: list[ContinuationRow] = []
    passed = True
    for obj in objectives:
        for seed in obj.inits:
            for lam0 in lambdas:
                base = minimize(obj, lam0, seed)
                w0 = base.omega_star
                if w0 == 0:
                    continue  # theorem needs a nonzero minimum
                slope = 1.0 / dlambda_domega(obj, lam0, w0)
                for d in deltas if deltas is not None else (1e-3 * lam0,):
                    if d == 0:
                        cont = minimize(obj, lam0, w0)
                        rows.append(ContinuationRow(
                            obj.name, lam0, w0, lam0, cont.omega_star,
                            shrank=cont.omega_star == w0, jumped=False,
                        ))
                        continue
                    cont = minimize(obj, lam0 + d, w0)
                    w1 = cont.omega_star
                    jumped = abs(w1 - w0) > 10.0 * d * abs(slope)
                    shrank = abs(w1) < abs(w0)
                    rows.append(ContinuationRow(obj.name, lam0, w0, lam0 + d, w1,
                                                shrank=shrank, jumped=jumped))
                    if not jumped and not shrank:
                        passed = False
    return passed, rows


def write_continuation_csv(rows: list[ContinuationRow], path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["objective", "lambda0", "omega0", "lambda1", "omega1",
                    "shrank", "jumped"])
        for r in rows:
            w.writerow([r.objective, repr(r.lambda0), repr(r.omega0),
                        repr(r.lambda1), repr(r.omega1), int(r.shrank), int(r.jumped)])
