"""Limited-memory BFGS with a strong-Wolfe line search.

The inner solver of the MPC: minimizes a smooth unconstrained function of a
short decision vector using two-loop-recursion quasi-Newton directions.
Termination is "successful" only when the gradient tolerance is met; hitting
the iteration cap or a line-search breakdown is reported so the caller can
restart from a different initial point.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np

from .errors import SolverAbortError


@dataclass
class LbfgsResult:
    x: np.ndarray
    f: float
    grad_norm: float
    iterations: int
    evaluations: int
    status: str                 # converged | max_iterations | line_search_failed

    @property
    def converged(self) -> bool:
        return self.status == "converged"


def _cubic_min(a, fa, ga, b, fb, gb):
    """Minimizer of the cubic interpolant on [a, b]; None if ill-posed."""
    with np.errstate(all="ignore"):
        d1 = ga + gb - 3 * (fa - fb) / (a - b)
        disc = d1 * d1 - ga * gb
        if disc < 0:
            return None
        d2 = np.sqrt(disc) * np.sign(b - a)
        denom = gb - ga + 2 * d2
        if denom == 0:
            return None
        x = b - (b - a) * (gb + d2 - d1) / denom
    if not np.isfinite(x):
        return None
    return x


def _line_search(fun, x, d, f0, g0, c1=1e-4, c2=0.9, max_evals=25):
    """Strong Wolfe search along d.  Returns (alpha, f, g, evals) or None.

    On piecewise-smooth objectives the curvature condition can be
    unsatisfiable (the slope jumps across a kink); the search then falls
    back to the best sufficient-decrease point it has evaluated.
    """
    dphi0 = float(g0 @ d)
    if dphi0 >= 0:
        return None
    evals = 0
    best = None       # best Armijo-satisfying point: (f, alpha, g)
    best_any = None   # best plain-decrease point, last-resort fallback

    def phi(alpha):
        nonlocal evals, best, best_any
        evals += 1
        f, g = fun(x + alpha * d)
        if np.isfinite(f) and f < f0:
            if best_any is None or f < best_any[0]:
                best_any = (f, alpha, g)
            if f <= f0 + c1 * alpha * dphi0 and (best is None or f < best[0]):
                best = (f, alpha, g)
        return f, g, float(g @ d)

    def fallback():
        pick = best if best is not None else best_any
        if pick is None:
            return None
        f, alpha, g = pick
        return alpha, f, g

    def zoom(lo, f_lo, g_lo, dphi_lo, hi, f_hi, g_hi, dphi_hi):
        nonlocal evals
        for _ in range(30):
            if evals >= max_evals:
                return fallback()
            alpha = _cubic_min(lo, f_lo, dphi_lo, hi, f_hi, dphi_hi)
            width = abs(hi - lo)
            span_lo, span_hi = min(lo, hi), max(lo, hi)
            if alpha is None or not (span_lo < alpha < span_hi):
                alpha = 0.5 * (lo + hi)
            # keep strictly interior but allow approaching the low end fast:
            # sharp kink minima sit arbitrarily close to lo
            alpha = min(max(alpha, span_lo + 0.01 * width), span_hi - 0.01 * width)
            f, g, dphi = phi(alpha)
            if f > f0 + c1 * alpha * dphi0 or f >= f_lo:
                hi, f_hi, g_hi, dphi_hi = alpha, f, g, dphi
            else:
                if abs(dphi) <= -c2 * dphi0:
                    return alpha, f, g
                if dphi * (hi - lo) >= 0:
                    hi, f_hi, g_hi, dphi_hi = lo, f_lo, g_lo, dphi_lo
                lo, f_lo, g_lo, dphi_lo = alpha, f, g, dphi
            if width < 1e-16 * max(1.0, abs(hi)):
                return fallback()
        return fallback()

    alpha_prev, f_prev, g_prev, dphi_prev = 0.0, f0, g0, dphi0
    alpha = 1.0
    for _ in range(12):
        if evals >= max_evals:
            return _pack(fallback(), evals)
        f, g, dphi = phi(alpha)
        if not np.isfinite(f):
            alpha = 0.5 * (alpha_prev + alpha)
            continue
        if f > f0 + c1 * alpha * dphi0 or (f >= f_prev and alpha_prev > 0):
            return _pack(zoom(alpha_prev, f_prev, g_prev, dphi_prev, alpha, f, g, dphi), evals)
        if abs(dphi) <= -c2 * dphi0:
            return alpha, f, g, evals
        if dphi >= 0:
            return _pack(zoom(alpha, f, g, dphi, alpha_prev, f_prev, g_prev, dphi_prev), evals)
        alpha_prev, f_prev, g_prev, dphi_prev = alpha, f, g, dphi
        alpha *= 2.0
    return _pack(fallback(), evals)


def _pack(result, evals):
    return (*result, evals) if result is not None else None


def minimize(fun, x0, memory: int = 10, gtol: float = 1e-6,
             max_iterations: int = 200, max_ls_evals: int = 25,
             ftol: float = 2.22e-9) -> LbfgsResult:
    """Minimize fun(x) -> (value, gradient) starting from x0.

    Successful termination: the gradient tolerance is met, an accepted step
    decreases f by less than `ftol` relative (the objective is numerically
    converged; kinked piecewise-smooth objectives never satisfy gtol), or
    the expected decrease -g.d falls below float64 resolution of f.
    """
    x = np.asarray(x0, dtype=float).copy()
    f, g = fun(x)
    if not np.isfinite(f) or not np.isfinite(g).all():
        raise SolverAbortError("non-finite objective at the initial point")
    evals = 1
    s_hist: deque = deque(maxlen=memory)
    y_hist: deque = deque(maxlen=memory)
    rho_hist: deque = deque(maxlen=memory)

    for iteration in range(max_iterations):
        gnorm = float(np.abs(g).max())
        if gnorm <= gtol:
            return LbfgsResult(x, f, gnorm, iteration, evals, "converged")

        # two-loop recursion
        q = g.copy()
        alphas = []
        for s, y, rho in zip(reversed(s_hist), reversed(y_hist), reversed(rho_hist)):
            a = rho * (s @ q)
            alphas.append(a)
            q -= a * y
        if y_hist:
            s, y = s_hist[-1], y_hist[-1]
            q *= (s @ y) / (y @ y)
        for (s, y, rho), a in zip(zip(s_hist, y_hist, rho_hist), reversed(alphas)):
            b = rho * (y @ q)
            q += (a - b) * s
        d = -q
        if g @ d >= 0:  # safeguard: fall back to steepest descent
            s_hist.clear()
            y_hist.clear()
            rho_hist.clear()
            d = -g

        if -(g @ d) <= 1e-12 * max(1.0, abs(f)):
            return LbfgsResult(x, f, gnorm, iteration, evals, "converged")

        ls = _line_search(fun, x, d, f, g, max_evals=max_ls_evals)
        if ls is None and s_hist:
            # quasi-Newton ray found no decrease; retry along -g once
            s_hist.clear()
            y_hist.clear()
            rho_hist.clear()
            d = -g
            ls = _line_search(fun, x, d, f, g, max_evals=max_ls_evals)
        if ls is None:
            # no measurable decrease along the probed rays: numerically
            # stationary (kinked objectives never satisfy gtol)
            return LbfgsResult(x, f, gnorm, iteration, evals, "converged")
        alpha, f_new, g_new, ls_evals = ls
        evals += ls_evals

        s = alpha * d
        y = g_new - g
        sy = float(s @ y)
        if sy > 1e-12 * float(np.linalg.norm(s)) * float(np.linalg.norm(y)):
            s_hist.append(s)
            y_hist.append(y)
            rho_hist.append(1.0 / sy)
        x = x + s
        decrease = f - f_new
        f, g = f_new, g_new
        if decrease <= ftol * max(1.0, abs(f)):
            return LbfgsResult(x, f, float(np.abs(g).max()), iteration + 1, evals,
                               "converged")

    gnorm = float(np.abs(g).max())
    status = "converged" if gnorm <= gtol else "max_iterations"
    return LbfgsResult(x, f, gnorm, max_iterations, evals, status)
