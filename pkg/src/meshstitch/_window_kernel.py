"""Fused numba kernel for the window smoothing objective.

Mirrors the numpy implementation in `smoothing.make_window_objective`; the
test suite asserts the two agree to machine precision. numpy remains the
fallback when numba is unavailable.
"""

from __future__ import annotations

import numpy as np

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is an optional speedup
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        def deco(f):
            return f
        if args and callable(args[0]):
            return args[0]
        return deco


@njit(cache=True, fastmath=False)
def window_objective_kernel(delta, s_raw, meshes, wgt, prev_tail, use_online,
                            betas, w_data, w_smooth, w_space, w_online,
                            eps, thr_h, thr_v):
    """Value and gradient of the full window objective at one increment.

    delta, s_raw, meshes: (N, R, C, 2); wgt: (N, R, C) data weights
    (alpha * OP + 1); prev_tail: (N-1, R, C, 2) previous window frames 2..N
    (ignored unless use_online); betas: ((N-1)/2,). All norms are
    entry-count-normalized and pseudo-Huber smoothed by eps.
    """
    n, rows, cols, _ = delta.shape
    total = n * rows * cols * 2
    grad = np.zeros((n, rows, cols, 2))
    value = 0.0

    # data term: per-entry mean |delta * wgt|, pseudo-Huber smoothed
    if w_data > 0.0:
        acc = 0.0
        cd = w_data / total
        for t in range(n):
            for u in range(rows):
                for v in range(cols):
                    w = wgt[t, u, v]
                    w2 = w * w
                    for d in range(2):
                        r = delta[t, u, v, d] * w
                        root = np.sqrt(r * r + eps * eps)
                        acc += root - eps
                        if root > 1e-15:
                            grad[t, u, v, d] += cd * w2 * delta[t, u, v, d] / root
        value += w_data * acc / total

    # smoothness term: midpoint residuals at symmetric offsets,
    # norm convention sqrt(sum) / entry_count
    half = (n - 1) // 2
    mid = half
    per = rows * cols * 2
    if w_smooth > 0.0:
        for j in range(1, half + 1):
            acc = 0.0
            for u in range(rows):
                for v in range(cols):
                    for d in range(2):
                        r = (s_raw[mid + j, u, v, d] + delta[mid + j, u, v, d]
                             + s_raw[mid - j, u, v, d] + delta[mid - j, u, v, d]
                             - 2.0 * (s_raw[mid, u, v, d] + delta[mid, u, v, d]))
                        acc += r * r
            root = np.sqrt(acc + eps * eps)
            b = betas[j - 1]
            value += w_smooth * b * (root - eps) / per
            if root > 1e-15:
                # second pass recomputes the residual instead of buffering it
                c = w_smooth * b / (root * per)
                for u in range(rows):
                    for v in range(cols):
                        for d in range(2):
                            r = (s_raw[mid + j, u, v, d] + delta[mid + j, u, v, d]
                                 + s_raw[mid - j, u, v, d] + delta[mid - j, u, v, d]
                                 - 2.0 * (s_raw[mid, u, v, d] + delta[mid, u, v, d]))
                            g = c * r
                            grad[mid + j, u, v, d] += g
                            grad[mid - j, u, v, d] += g
                            grad[mid, u, v, d] -= 2.0 * g

    # spatial consistency: distortion of (meshes - delta), averaged over frames
    if w_space > 0.0:
        n_h = rows * (cols - 1)
        n_v = (rows - 1) * cols
        q_pairs = rows * (cols - 2) + (rows - 2) * cols
        cw = w_space / n
        for t in range(n):
            # intra: hinge on horizontal/vertical edge projections
            for u in range(rows):
                for v in range(cols - 1):
                    e = (meshes[t, u, v + 1, 0] - delta[t, u, v + 1, 0]
                         - meshes[t, u, v, 0] + delta[t, u, v, 0]) - thr_h
                    if e > 0.0:
                        value += cw * e / n_h
                        grad[t, u, v + 1, 0] -= cw / n_h
                        grad[t, u, v, 0] += cw / n_h
            for u in range(rows - 1):
                for v in range(cols):
                    e = (meshes[t, u + 1, v, 1] - delta[t, u + 1, v, 1]
                         - meshes[t, u, v, 1] + delta[t, u, v, 1]) - thr_v
                    if e > 0.0:
                        value += cw * e / n_v
                        grad[t, u + 1, v, 1] -= cw / n_v
                        grad[t, u, v, 1] += cw / n_v
            # inter: cosine between consecutive collinear edges
            if q_pairs > 0:
                cq = cw / q_pairs
                for u in range(rows):
                    for v in range(cols - 2):
                        ax = (meshes[t, u, v + 1, 0] - delta[t, u, v + 1, 0]
                              - meshes[t, u, v, 0] + delta[t, u, v, 0])
                        ay = (meshes[t, u, v + 1, 1] - delta[t, u, v + 1, 1]
                              - meshes[t, u, v, 1] + delta[t, u, v, 1])
                        bx = (meshes[t, u, v + 2, 0] - delta[t, u, v + 2, 0]
                              - meshes[t, u, v + 1, 0] + delta[t, u, v + 1, 0])
                        by = (meshes[t, u, v + 2, 1] - delta[t, u, v + 2, 1]
                              - meshes[t, u, v + 1, 1] + delta[t, u, v + 1, 1])
                        l1s = ax * ax + ay * ay
                        l2s = bx * bx + by * by
                        denom = np.sqrt(l1s * l2s)
                        if denom > 1e-12:
                            dot = ax * bx + ay * by
                            cos = dot / denom
                            value += cq * (1.0 - cos)
                            # d(1-cos)/d e1 = cos*e1/l1^2 - e2/denom (w.r.t. mesh)
                            g1x = cos * ax / l1s - bx / denom
                            g1y = cos * ay / l1s - by / denom
                            g2x = cos * bx / l2s - ax / denom
                            g2y = cos * by / l2s - ay / denom
                            # mesh_hat = meshes - delta, so d/d delta = -d/d mesh
                            grad[t, u, v, 0] += cq * g1x
                            grad[t, u, v, 1] += cq * g1y
                            grad[t, u, v + 1, 0] -= cq * (g1x - g2x)
                            grad[t, u, v + 1, 1] -= cq * (g1y - g2y)
                            grad[t, u, v + 2, 0] -= cq * g2x
                            grad[t, u, v + 2, 1] -= cq * g2y
                for u in range(rows - 2):
                    for v in range(cols):
                        ax = (meshes[t, u + 1, v, 0] - delta[t, u + 1, v, 0]
                              - meshes[t, u, v, 0] + delta[t, u, v, 0])
                        ay = (meshes[t, u + 1, v, 1] - delta[t, u + 1, v, 1]
                              - meshes[t, u, v, 1] + delta[t, u, v, 1])
                        bx = (meshes[t, u + 2, v, 0] - delta[t, u + 2, v, 0]
                              - meshes[t, u + 1, v, 0] + delta[t, u + 1, v, 0])
                        by = (meshes[t, u + 2, v, 1] - delta[t, u + 2, v, 1]
                              - meshes[t, u + 1, v, 1] + delta[t, u + 1, v, 1])
                        l1s = ax * ax + ay * ay
                        l2s = bx * bx + by * by
                        denom = np.sqrt(l1s * l2s)
                        if denom > 1e-12:
                            dot = ax * bx + ay * by
                            cos = dot / denom
                            value += cq * (1.0 - cos)
                            g1x = cos * ax / l1s - bx / denom
                            g1y = cos * ay / l1s - by / denom
                            g2x = cos * bx / l2s - ax / denom
                            g2y = cos * by / l2s - ay / denom
                            grad[t, u, v, 0] += cq * g1x
                            grad[t, u, v, 1] += cq * g1y
                            grad[t, u + 1, v, 0] -= cq * (g1x - g2x)
                            grad[t, u + 1, v, 1] -= cq * (g1y - g2y)
                            grad[t, u + 2, v, 0] -= cq * g2x
                            grad[t, u + 2, v, 1] -= cq * g2y

    # online collaboration: previous window frames 2..N vs current 1..N-1
    if use_online and w_online > 0.0:
        shared = n - 1
        co = w_online / shared
        for t in range(shared):
            acc = 0.0
            for u in range(rows):
                for v in range(cols):
                    for d in range(2):
                        r = prev_tail[t, u, v, d] - (s_raw[t, u, v, d] + delta[t, u, v, d])
                        acc += r * r
            root = np.sqrt(acc / per + eps * eps)
            value += co * (root - eps)
            if root > 1e-15:
                c = co / (root * per)
                for u in range(rows):
                    for v in range(cols):
                        for d in range(2):
                            r = prev_tail[t, u, v, d] - (s_raw[t, u, v, d] + delta[t, u, v, d])
                            grad[t, u, v, d] -= c * r

    return value, grad
