"""Preconditioned linear conjugate gradient on the damped quadratic

    q(x) = 0.5 x^T A x + g^T x,    A = B + lambda I,

recording every iterate so the caller can backtrack over them.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

TERMINATIONS = ("fixed", "relative")


class CgDivergenceError(ArithmeticError):
    def __init__(self, msg, last_iterate):
        super().__init__(msg)
        self.last_iterate = last_iterate


class CurvatureBreakdownError(ArithmeticError):
    """``p^T A p <= 0`` for a search direction: A is not positive definite."""

    def __init__(self, msg, iteration, curvature, last_iterate):
        super().__init__(msg)
        self.iteration = iteration
        self.curvature = curvature
        self.last_iterate = last_iterate


@dataclass
class CgConfig:
    max_iters: int
    termination: str = "fixed"
    epsilon: float = 5e-4
    record_iterates: bool = True
    tol: float = 0.0

    def __post_init__(self):
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if self.termination not in TERMINATIONS:
            raise ValueError(f"termination must be one of {TERMINATIONS}")
        if self.termination == "relative" and not self.epsilon >= 0:
            raise ValueError("epsilon must be >= 0 in relative-progress mode")


@dataclass
class CgResult:
    iterates: list
    values: list
    residual_norm: float
    initial_value: float
    stop_reason: str = "max_iters"
    n_iters: int = 0
    all_values: list = field(default_factory=list)

    @property
    def last(self):
        return self.iterates[-1]


def quadratic_value(apply_B, g, delta, damping=0.0):
    """Return ``(damped, undamped)`` values of the quadratic model at delta.

    ``apply_B`` is the damped operator ``v -> (B + damping I) v``; the
    undamped value subtracts the ``0.5 * damping * |delta|^2`` term. The
    constant f(theta) is omitted from both.
    """
    delta = np.asarray(delta, dtype=np.float64)
    Ad = apply_B(delta)
    damped = 0.5 * float(delta @ Ad) + float(g @ delta)
    undamped = damped - 0.5 * damping * float(delta @ delta)
    return damped, undamped


def _window(j):
    return max(10, j // 10)


def cg_run(apply_B, g, x0=None, precon=None, cfg=None):
    """Minimize ``0.5 x^T A x + g^T x`` starting from ``x0``.

    ``precon`` is the diagonal of the preconditioner (a vector); it is
    applied as an exact diagonal solve. In ``relative`` mode CG stops at
    iteration j >= k = max(10, j // 10) once q(x_j) < 0 and
    ``(q(x_j) - q(x_{j-k})) / q(x_j) < epsilon``, where ``x_0`` is the
    starting point; it also stops if q(x_j) is exactly zero.
    """
    cfg = cfg or CgConfig(max_iters=len(g))
    g = np.asarray(g, dtype=np.float64)
    x = np.zeros_like(g) if x0 is None else np.array(x0, dtype=np.float64)
    if x.shape != g.shape:
        raise ValueError(f"x0 shape {x.shape} does not match gradient shape {g.shape}")
    if precon is not None:
        precon = np.asarray(precon, dtype=np.float64)
        if precon.shape != g.shape or np.any(precon <= 0):
            raise ValueError("preconditioner must be a positive vector matching the gradient")

    r = apply_B(x) + g if x0 is not None else g.copy()
    y = r / precon if precon is not None else r
    p = -y
    rz = float(r @ y)
    q0 = 0.5 * float(x @ (r + g))
    all_values = [q0]
    iterates, values = [], []
    stop = "max_iters"
    j = 0
    while j < cfg.max_iters:
        if float(np.linalg.norm(r)) <= cfg.tol or rz == 0.0:
            stop = "converged"
            break
        Ap = apply_B(p)
        pAp = float(p @ Ap)
        if not np.isfinite(pAp):
            raise CgDivergenceError(f"non-finite curvature at CG iteration {j + 1}", x.copy())
        if pAp <= 0.0:
            raise CurvatureBreakdownError(
                f"non-positive curvature {pAp:.3e} at CG iteration {j + 1}", j + 1, pAp, x.copy())
        alpha = rz / pAp
        x_new = x + alpha * p
        r_new = r + alpha * Ap
        if not (np.all(np.isfinite(x_new)) and np.all(np.isfinite(r_new))):
            raise CgDivergenceError(f"non-finite iterate at CG iteration {j + 1}", x.copy())
        x, r = x_new, r_new
        y = r / precon if precon is not None else r
        rz_new = float(r @ y)
        p = -y + (rz_new / rz) * p
        rz = rz_new
        j += 1

        qj = 0.5 * float(x @ (r + g))
        all_values.append(qj)
        if cfg.record_iterates:
            iterates.append(x.copy())
            values.append(qj)

        if cfg.termination == "relative":
            k = _window(j)
            if j >= k:
                if qj == 0.0:
                    stop = "zero-objective"
                    break
                if qj < 0.0 and (qj - all_values[j - k]) / qj < cfg.epsilon:
                    stop = "relative-progress"
                    break

    if not cfg.record_iterates or not iterates:
        # keep the list non-empty: a run that never moved reports its start
        iterates = [x.copy()]
        values = [all_values[-1]]
    return CgResult(
        iterates=iterates,
        values=values,
        residual_norm=float(np.linalg.norm(r)),
        initial_value=q0,
        stop_reason=stop,
        n_iters=j,
        all_values=all_values,
    )
