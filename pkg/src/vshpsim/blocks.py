"""Small continuous-time building blocks shared by the controllers."""
from __future__ import annotations

import numpy as np


def filtered_derivative(u: float, z: float, k: float, T: float) -> tuple[float, float]:
    """k*w*s/(s+w) with pole w = 1/T, realised with a low-pass state z.

    Returns (output, dz/dt).  DC gain is zero, high-frequency gain k/T.
    """
    w = 1.0 / T
    e = u - z
    return k * w * e, w * e


def lowpass(u: float, z: float, T: float) -> float:
    """dz/dt of a unity-gain first-order lag."""
    return (u - z) / T


def trapezoid_step(deriv, x: np.ndarray, dt: float, tol: float = 1e-13, max_iter: int = 50) -> np.ndarray:
    """One implicit trapezoidal step of dx/dt = deriv(x) for a small block.

    Newton iteration with a forward-difference Jacobian; used by the
    stand-alone ``*_step`` helpers, not by the system integrator.
    """
    x = np.asarray(x, dtype=float)
    f0 = np.asarray(deriv(x), dtype=float)
    y = x + dt * f0
    n = x.size
    for _ in range(max_iter):
        fy = np.asarray(deriv(y), dtype=float)
        g = y - x - 0.5 * dt * (f0 + fy)
        J = np.eye(n)
        for k in range(n):
            h = 1e-7 * max(1.0, abs(y[k]))
            yk = y.copy()
            yk[k] += h
            J[:, k] -= 0.5 * dt * (np.asarray(deriv(yk), dtype=float) - fy) / h
        dy = np.linalg.solve(J, -g)
        y = y + dy
        if np.abs(dy).max() < tol:
            break
    return y
