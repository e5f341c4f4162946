"""Sliding-window smoothing of stitching trajectories.

Each window solves for a per-frame, per-control-point increment that is added
to the stitching paths and subtracted from the spatial meshes. The window
objective balances a data term (overlap-weighted closeness to the raw paths),
a midpoint smoothness term, the mesh distortion of the corrected spatial
meshes, and an online collaboration term tying the window to its predecessor.

Norm convention: every ||.||_2 in the objective is the entry-count-normalized
Euclidean norm sqrt(mean(x^2)), so the weights transfer across grid sizes and
window lengths.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._window_kernel import HAVE_NUMBA, window_objective_kernel
from .objectives import distortion_batch
from .optimize import lbfgs_descent


@dataclass(frozen=True)
class SmoothingConfig:
    """Window length, term weights, and solver limits."""

    window: int = 7
    weight_data: float = 1.0
    weight_smooth: float = 50.0
    weight_space: float = 10.0
    weight_online: float = 0.1
    alpha: float = 10.0
    betas: tuple = (0.9, 0.3, 0.1)
    max_iters: int = 300
    tolerance: float = 1e-6
    solver_eps: float = 1e-3  # pseudo-Huber smoothing of the norms (solver only)

    def __post_init__(self):
        if self.window < 3 or self.window % 2 == 0:
            raise ValueError("window must be an odd number >= 3")
        for name in ("weight_data", "weight_smooth", "weight_space",
                     "weight_online", "alpha"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        betas = tuple(float(b) for b in self.betas)
        if len(betas) != (self.window - 1) // 2:
            raise ValueError("need (window-1)/2 beta values")
        if any(not 0 <= b <= 1 for b in betas):
            raise ValueError("betas must lie in [0, 1]")
        if any(b2 > b1 for b1, b2 in zip(betas, betas[1:])):
            raise ValueError("betas must be non-increasing")
        object.__setattr__(self, "betas", betas)

    def with_window(self, window: int) -> "SmoothingConfig":
        """Config for another window length, extending betas geometrically."""
        half = (window - 1) // 2
        base = list(self.betas[:half])
        while len(base) < half:
            base.append(base[-1] * 0.5 if base else 0.9)
        return SmoothingConfig(
            window=window, weight_data=self.weight_data,
            weight_smooth=self.weight_smooth, weight_space=self.weight_space,
            weight_online=self.weight_online, alpha=self.alpha,
            betas=tuple(base), max_iters=self.max_iters,
            tolerance=self.tolerance, solver_eps=self.solver_eps)


@dataclass(frozen=True)
class SmoothingIncrement:
    """Per-window correction applied to paths and meshes."""

    delta: np.ndarray  # (N, U+1, V+1, 2)

    def __post_init__(self):
        arr = np.asarray(self.delta, dtype=np.float64)
        if arr.ndim != 4 or arr.shape[-1] != 2:
            raise ValueError("delta must be (N, U+1, V+1, 2)")
        if not np.all(np.isfinite(arr)):
            raise ValueError("delta must be finite")
        object.__setattr__(self, "delta", arr)


def _rms(arr: np.ndarray) -> float:
    return float(np.sqrt(np.mean(arr * arr)))


def _rms_grad(arr: np.ndarray):
    """Value and d value / d arr of the entry-normalized Euclidean norm."""
    value = _rms(arr)
    if value < 1e-15:
        return value, np.zeros_like(arr)
    return value, arr / (value * arr.size)


def _soft_rms_grad(arr: np.ndarray, eps: float):
    """Pseudo-Huber variant sqrt(mean(x^2) + eps^2) - eps with its gradient.

    Smooths the norm's kink at zero so descent does not stall on the kink
    manifolds of the window objective; the value differs from the exact norm
    by at most eps and is exactly zero at zero.
    """
    root = np.sqrt(np.mean(arr * arr) + eps * eps)
    return float(root - eps), arr / (root * arr.size)


def data_term(s_hat: np.ndarray, s_raw: np.ndarray, op: np.ndarray,
              alpha: float) -> float:
    """Overlap-weighted closeness of smooth paths to the raw paths.

    Per-entry mean of the absolute weighted differences. Separability is what
    lets the overlap weighting actually pin overlap vertices: a single norm
    over the whole tensor would dilute the anchor through the shared root.
    """
    value, _ = data_term_grad(s_hat, s_raw, op, alpha)
    return value


def data_term_grad(s_hat: np.ndarray, s_raw: np.ndarray, op: np.ndarray,
                   alpha: float, eps: float = 0.0):
    if s_hat.shape != s_raw.shape:
        raise ValueError("trajectory windows must share a shape")
    if op.shape != s_hat.shape[:3]:
        raise ValueError("overlap mask must be (N, U+1, V+1)")
    weight = (alpha * op.astype(np.float64) + 1.0)[..., None]
    resid = (s_hat - s_raw) * weight
    n = resid.size
    if eps > 0:
        root = np.sqrt(resid * resid + eps * eps)
        value = float(np.mean(root - eps))
        grad = weight * weight * (s_hat - s_raw) / (root * n)
    else:
        value = float(np.mean(np.abs(resid)))
        grad = weight * np.sign(resid) / n
    return value, grad


def smoothness_term(s_hat: np.ndarray, betas) -> float:
    """Midpoint smoothness of a window: position vs. symmetric neighbors."""
    value, _ = smoothness_term_grad(s_hat, betas)
    return value


def smoothness_term_grad(s_hat: np.ndarray, betas, eps: float = 0.0):
    """Midpoint smoothness with norms sqrt(sum(x^2)) / entry_count.

    Dividing the Euclidean norm by the entry count (rather than its square
    root) keeps the smoothing pull per control point comparable to the data
    term's per-entry anchor at the configured weights; normalizing inside the
    root would let the smoothness term overpower any overlap anchoring.
    """
    n = s_hat.shape[0]
    if n % 2 == 0:
        raise ValueError("window length must be odd")
    half = (n - 1) // 2
    betas = np.asarray(betas, dtype=np.float64)
    if betas.size < half:
        raise ValueError(f"need {half} betas for window {n}")
    mid = half
    fwd = s_hat[mid + 1:]
    bwd = s_hat[mid - 1::-1]
    resid = fwd + bwd - 2.0 * s_hat[mid]              # (half, ...)
    per_size = resid[0].size
    ssq = (resid * resid).reshape(resid.shape[0], -1).sum(axis=1)
    root = np.sqrt(ssq + eps * eps)
    value = float(betas[:half] @ (root - eps)) / per_size
    grad = np.zeros_like(s_hat)
    scale = np.where(root > 1e-15, betas[:half] / np.maximum(root, 1e-300), 0.0)
    g = resid * (scale / per_size)[:, None, None, None]
    grad[mid + 1:] += g
    grad[:mid] += g[::-1]
    grad[mid] -= 2.0 * g.sum(axis=0)
    return value, grad


def space_term(meshes_hat: np.ndarray, width: float, height: float) -> float:
    """Mean distortion of the corrected spatial meshes over the window."""
    value, _ = space_term_grad(meshes_hat, width, height)
    return value


def space_term_grad(meshes_hat: np.ndarray, width: float, height: float):
    vals, grads = distortion_batch(meshes_hat, width, height)
    n = meshes_hat.shape[0]
    return float(vals.mean()), grads / n


def online_term(s_hat_prev: np.ndarray, s_hat_cur: np.ndarray) -> float:
    """Disagreement between consecutive windows on their shared frames."""
    value, _ = online_term_grad(s_hat_prev, s_hat_cur)
    return value


def online_term_grad(s_hat_prev: np.ndarray, s_hat_cur: np.ndarray):
    if s_hat_prev.shape != s_hat_cur.shape:
        raise ValueError("windows must share a shape")
    value, grad_head = _online_tail_grad(s_hat_prev[1:], s_hat_cur)
    return value, grad_head


def _online_tail_grad(prev_tail: np.ndarray, s_hat_cur: np.ndarray,
                      eps: float = 0.0):
    """Online term given the previous window's frames 2..N (vectorized)."""
    n_shared = prev_tail.shape[0]
    resid = prev_tail - s_hat_cur[:-1]                # (N-1, ...)
    per_size = resid[0].size
    msq = (resid * resid).reshape(resid.shape[0], -1).sum(axis=1) / per_size
    root = np.sqrt(msq + eps * eps)
    value = float(np.mean(root - eps))
    scale = np.where(root > 1e-15, 1.0 / np.maximum(root, 1e-300), 0.0)
    grad = np.zeros_like(s_hat_cur)
    grad[:-1] = -resid * (scale / (per_size * n_shared))[:, None, None, None]
    return value, grad


def make_window_objective(s_raw: np.ndarray, meshes: np.ndarray, op: np.ndarray,
                          prev_window: np.ndarray | None, cfg: SmoothingConfig,
                          width: float, height: float, use_kernel: bool = True):
    """Build the window objective as a closure over the fixed window data.

    Dispatches to the fused numba kernel when available (the numpy path below
    is the reference implementation and the fallback); the two are asserted
    equal in the test suite.
    """
    weight = (cfg.alpha * np.asarray(op, dtype=np.float64) + 1.0)[..., None]
    n_entries = s_raw.size
    shape = s_raw.shape
    eps = cfg.solver_eps
    use_space = cfg.weight_space > 0
    use_online = cfg.weight_online > 0 and prev_window is not None
    prev_tail = prev_window[1:] if use_online else None

    if use_kernel and HAVE_NUMBA:
        s_c = np.ascontiguousarray(s_raw, dtype=np.float64)
        m_c = np.ascontiguousarray(meshes, dtype=np.float64)
        w_c = np.ascontiguousarray(weight[..., 0], dtype=np.float64)
        tail_c = (np.ascontiguousarray(prev_tail, dtype=np.float64)
                  if use_online else np.zeros((max(shape[0] - 1, 1),) + shape[1:]))
        betas_c = np.asarray(cfg.betas, dtype=np.float64)
        thr_h = 2.0 * width / (shape[2] - 1)
        thr_v = 2.0 * height / (shape[1] - 1)

        def fun_grad_kernel(delta_flat):
            delta = np.ascontiguousarray(delta_flat.reshape(shape))
            value, grad = window_objective_kernel(
                delta, s_c, m_c, w_c, tail_c, use_online, betas_c,
                cfg.weight_data, cfg.weight_smooth, cfg.weight_space,
                cfg.weight_online, eps, thr_h, thr_v)
            return value, grad.ravel()

        return fun_grad_kernel

    def fun_grad(delta_flat):
        delta = delta_flat.reshape(shape)
        s_hat = s_raw + delta

        value_d, grad_d = data_term_grad(s_hat, s_raw, op, cfg.alpha, eps=eps)
        grad = cfg.weight_data * grad_d
        value = cfg.weight_data * value_d

        value_s, grad_s = smoothness_term_grad(s_hat, cfg.betas, eps=eps)
        value += cfg.weight_smooth * value_s
        grad += cfg.weight_smooth * grad_s

        if use_space:
            value_sp, grad_sp = space_term_grad(meshes - delta, width, height)
            value += cfg.weight_space * value_sp
            grad -= cfg.weight_space * grad_sp
        if use_online:
            value_o, grad_o = _online_tail_grad(prev_tail, s_hat, eps=eps)
            value += cfg.weight_online * value_o
            grad += cfg.weight_online * grad_o
        return value, grad.ravel()

    return fun_grad


def window_objective_grad(delta_flat: np.ndarray, s_raw: np.ndarray,
                          meshes: np.ndarray, op: np.ndarray,
                          prev_window: np.ndarray | None,
                          cfg: SmoothingConfig, width: float, height: float):
    """Full window objective and gradient as a function of the increment."""
    fun = make_window_objective(s_raw, meshes, op, prev_window, cfg, width, height)
    return fun(delta_flat)


@dataclass
class SmoothWindowResult:
    increment: SmoothingIncrement
    meshes_hat: np.ndarray      # (N, U+1, V+1, 2)
    s_hat: np.ndarray           # (N, U+1, V+1, 2)
    objective_init: float
    objective_final: float
    iterations: int
    converged: bool


def _line_fit_delta(s_raw: np.ndarray) -> np.ndarray:
    """Increment turning each per-point path into its least-squares line."""
    n = s_raw.shape[0]
    t = np.arange(n, dtype=np.float64)
    basis = np.stack([np.ones(n), t - t.mean()], axis=1)
    proj = basis @ np.linalg.inv(basis.T @ basis) @ basis.T
    flat = s_raw.reshape(n, -1)
    return (proj @ flat - flat).reshape(s_raw.shape)


def smooth_window(s_raw: np.ndarray, meshes: np.ndarray, op: np.ndarray,
                  prev_window: np.ndarray | None, cfg: SmoothingConfig,
                  width: float, height: float,
                  init_delta: np.ndarray | None = None) -> SmoothWindowResult:
    """Minimize the window objective over the smoothing increment.

    The solver is L-BFGS on the kink-smoothed objective, started from the
    best of: zero increment, a caller-provided warm start, and the increment
    that straightens each path onto its least-squares line (the data and
    smoothness terms alone are minimized near such a line). The returned
    objective never exceeds the zero-increment objective. Non-convergence
    within the iteration budget returns the best iterate with a flag rather
    than failing, so a stream is never interrupted.
    """
    s_raw = np.asarray(s_raw, dtype=np.float64)
    meshes = np.asarray(meshes, dtype=np.float64)
    n = s_raw.shape[0]
    if n != cfg.window:
        raise ValueError(f"window of {n} frames but config says {cfg.window}")
    if meshes.shape != s_raw.shape:
        raise ValueError("meshes window must match trajectory window")

    fun_grad = make_window_objective(s_raw, meshes, op, prev_window,
                                     cfg, width, height)

    zero = np.zeros(s_raw.size)
    value_zero = fun_grad(zero)[0]
    candidates = [(value_zero, zero)]
    if cfg.weight_smooth > 0:
        line = _line_fit_delta(s_raw).ravel()
        candidates.append((fun_grad(line)[0], line))
    if init_delta is not None and init_delta.shape == s_raw.shape:
        warm = init_delta.ravel().copy()
        candidates.append((fun_grad(warm)[0], warm))
    x0 = min(candidates, key=lambda c: c[0])[1]

    result = lbfgs_descent(fun_grad, x0, max_iters=cfg.max_iters,
                           rel_tol=cfg.tolerance)
    delta = result.x.reshape(s_raw.shape)
    value = result.value
    if value > value_zero:  # never worse than no smoothing
        delta = np.zeros_like(s_raw)
        value = value_zero
    return SmoothWindowResult(
        increment=SmoothingIncrement(delta),
        meshes_hat=meshes - delta,
        s_hat=s_raw + delta,
        objective_init=value_zero,
        objective_final=value,
        iterations=result.iterations,
        converged=result.converged,
    )
