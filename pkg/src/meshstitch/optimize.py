"""Gradient descent with backtracking (Armijo) line search."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class DescentResult:
    x: np.ndarray
    value: float
    initial_value: float
    iterations: int
    converged: bool
    history: list = field(default_factory=list)


def backtracking_descent(fun_grad, x0: np.ndarray, max_iters: int = 300,
                         rel_tol: float = 1e-6, armijo: float = 1e-4,
                         contraction: float = 0.5, init_step: float = 1.0,
                         max_backtracks: int = 30, abs_tol: float = 0.0,
                         bb_steps: bool = True, initial=None,
                         divergence_callback=None) -> DescentResult:
    """Minimize fun_grad(x) -> (value, grad) from x0.

    Steps are accepted under the Armijo condition. The trial step length for
    each iteration comes from the Barzilai-Borwein rule when `bb_steps` is on
    (falling back to doubling the last accepted step), which keeps descent
    monotone while converging far faster on stiff objectives. Stops when the
    per-step decrease falls below rel_tol * |value| (or below `abs_tol`), the
    line search stalls, or `max_iters` is reached. `divergence_callback(count)`
    is invoked if an accepted step ever increases the objective (cannot happen
    under Armijo with exact arithmetic; kept as a guard for custom callers).
    """
    x = np.asarray(x0, dtype=np.float64).copy()
    value, grad = initial if initial is not None else fun_grad(x)
    initial_value = value
    history = [value]
    step = init_step
    converged = False
    increase_streak = 0
    iterations = 0

    for iterations in range(1, max_iters + 1):
        gnorm2 = float(np.sum(grad * grad))
        if gnorm2 == 0.0:
            converged = True
            iterations -= 1
            break
        accepted = False
        s = step
        for _ in range(max_backtracks):
            trial = x - s * grad
            trial_value, trial_grad = fun_grad(trial)
            if trial_value <= value - armijo * s * gnorm2:
                accepted = True
                break
            s *= contraction
        if not accepted:
            converged = True
            iterations -= 1
            break
        if trial_value > value:
            increase_streak += 1
            if divergence_callback is not None:
                divergence_callback(increase_streak)
        else:
            increase_streak = 0
        decrease = value - trial_value
        if bb_steps:
            dg = trial_grad - grad
            dgn = float(np.sum(dg * dg))
            # BB2 step <s, y>/<y, y> with s = -s*grad, y = dg; capped relative
            # to the accepted step because the ratio is garbage near kinks of
            # the non-smooth terms and a runaway step costs a backtrack storm.
            step = -s * float(np.sum(grad * dg)) / dgn if dgn > 0 else s * 2.0
            if not np.isfinite(step) or step <= 0 or step > 8.0 * s:
                step = s * 2.0
        else:
            step = s * 2.0
        x = trial
        value = trial_value
        grad = trial_grad
        history.append(value)
        if decrease <= max(rel_tol * abs(value), abs_tol, 1e-15):
            converged = True
            break

    return DescentResult(x=x, value=value, initial_value=initial_value,
                         iterations=iterations, converged=converged,
                         history=history)


def lbfgs_descent(fun_grad, x0: np.ndarray, max_iters: int = 300,
                  rel_tol: float = 1e-6, memory: int = 8, armijo: float = 1e-4,
                  max_backtracks: int = 25, initial=None) -> DescentResult:
    """Limited-memory quasi-Newton descent with Armijo backtracking.

    Directions come from the standard two-loop recursion over the last
    `memory` curvature pairs; every step is monotone (Armijo on the current
    value), so the result never exceeds the starting objective. Kept free of
    scipy so the per-iteration overhead stays in the microsecond range.
    """
    x = np.asarray(x0, dtype=np.float64).copy()
    value, grad = initial if initial is not None else fun_grad(x)
    initial_value = value
    history = [value]
    s_list: list[np.ndarray] = []
    y_list: list[np.ndarray] = []
    rho: list[float] = []
    converged = False
    iterations = 0
    flat_streak = 0

    for iterations in range(1, max_iters + 1):
        q = grad.copy()
        alphas = []
        for s, y, r in zip(reversed(s_list), reversed(y_list), reversed(rho)):
            a = r * float(s @ q)
            alphas.append(a)
            q -= a * y
        if y_list:
            y_last = y_list[-1]
            gamma = float(s_list[-1] @ y_last) / max(float(y_last @ y_last), 1e-300)
            q *= gamma
        for (s, y, r), a in zip(zip(s_list, y_list, rho), reversed(alphas)):
            b = r * float(y @ q)
            q += (a - b) * s
        direction = -q
        descent = float(direction @ grad)
        if descent >= 0:  # not a descent direction; fall back to the gradient
            direction = -grad
            descent = -float(grad @ grad)
        if descent == 0.0:
            converged = True
            iterations -= 1
            break

        step = 1.0
        accepted = False
        for _ in range(max_backtracks):
            trial = x + step * direction
            trial_value, trial_grad = fun_grad(trial)
            if trial_value <= value + armijo * step * descent:
                accepted = True
                break
            step *= 0.5
        if not accepted and s_list:
            # stale curvature pairs can poison the direction; restart once
            s_list.clear()
            y_list.clear()
            rho.clear()
            direction = -grad
            descent = -float(grad @ grad)
            step = 1.0 / max(np.sqrt(-descent), 1.0)
            for _ in range(max_backtracks):
                trial = x + step * direction
                trial_value, trial_grad = fun_grad(trial)
                if trial_value <= value + armijo * step * descent:
                    accepted = True
                    break
                step *= 0.5
        if not accepted:
            converged = True
            iterations -= 1
            break

        s_vec = step * direction
        y_vec = trial_grad - grad
        sy = float(s_vec @ y_vec)
        if sy > 1e-12 * float(y_vec @ y_vec):
            s_list.append(s_vec)
            y_list.append(y_vec)
            rho.append(1.0 / sy)
            if len(s_list) > memory:
                s_list.pop(0)
                y_list.pop(0)
                rho.pop(0)

        decrease = value - trial_value
        x, value, grad = trial, trial_value, trial_grad
        history.append(value)
        if decrease <= max(rel_tol * abs(value), 1e-15):
            flat_streak += 1
            if flat_streak >= 2:  # one flat step can be a plateau, not the optimum
                converged = True
                break
        else:
            flat_streak = 0

    return DescentResult(x=x, value=value, initial_value=initial_value,
                         iterations=iterations, converged=converged,
                         history=history)
