"""Alignment, distortion, and motion-consistency objectives.

Every loss comes with a hand-derived analytic gradient with respect to the
mesh or motion coordinates; the gradients are exact almost everywhere (hinge
activations, the L1 sign, and validity masks are treated as locally constant).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import lu_factor, lu_solve

from .errors import DegenerateConfigurationError
from .grid_warp import (
    ControlGrid,
    Frame,
    Homography,
    bilinear_sample_grad,
    inside_extent,
    pairwise_sq_dists,
    rigid_mesh,
    tps_kernel,
    tps_system,
)


@dataclass(frozen=True)
class WarpObjectiveConfig:
    """Weights of the warp-estimation objectives."""

    lambda_tmp: float = 5.0    # distortion weight, temporal objective
    lambda_spt: float = 10.0   # distortion weight, spatial objective
    mu_spt: float = 20.0       # tolerated per-point motion difference, px
    omega_spt: float = 0.1     # motion-consistency weight
    omega_h: float = 0.01      # homography-term weight inside the alignment loss

    def __post_init__(self):
        for name in ("lambda_tmp", "lambda_spt", "mu_spt", "omega_spt", "omega_h"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")


def _mesh_array(mesh) -> np.ndarray:
    if isinstance(mesh, ControlGrid):
        return mesh.points
    return np.asarray(mesh, dtype=np.float64)


# ---------------------------------------------------------------------------
# Distortion: intra-grid (edge length) and inter-grid (edge angle) terms
# ---------------------------------------------------------------------------


def intra_grid_batch(meshes: np.ndarray, width: float, height: float):
    """Edge-length penalty for a batch of meshes (N, U+1, V+1, 2).

    Horizontal edge projections above 2W/V and vertical projections above
    2H/U are penalized linearly; each orientation is averaged over its edge
    count. Returns per-mesh values (N,) and gradients (N, U+1, V+1, 2).
    """
    rows, cols = meshes.shape[1], meshes.shape[2]
    cells_v = cols - 1
    cells_u = rows - 1
    x = meshes[..., 0]
    y = meshes[..., 1]

    thr_h = 2.0 * width / cells_v
    thr_v = 2.0 * height / cells_u
    n_h = rows * cells_v
    n_v = cells_u * cols

    over_h = x[:, :, 1:] - x[:, :, :-1] - thr_h
    act_h = (over_h > 0).astype(np.float64)
    over_v = y[:, 1:, :] - y[:, :-1, :] - thr_v
    act_v = (over_v > 0).astype(np.float64)

    vals = (act_h * over_h).sum(axis=(1, 2)) / n_h + (act_v * over_v).sum(axis=(1, 2)) / n_v

    grads = np.zeros_like(meshes)
    grads[:, :, 1:, 0] += act_h / n_h
    grads[:, :, :-1, 0] -= act_h / n_h
    grads[:, 1:, :, 1] += act_v / n_v
    grads[:, :-1, :, 1] -= act_v / n_v
    return vals, grads


def _inter_direction(meshes: np.ndarray, axis: int):
    """1 - cos terms for consecutive edge pairs along one grid axis."""
    if axis == 2:
        e1 = meshes[:, :, 1:-1] - meshes[:, :, :-2]
        e2 = meshes[:, :, 2:] - meshes[:, :, 1:-1]
    else:
        e1 = meshes[:, 1:-1, :] - meshes[:, :-2, :]
        e2 = meshes[:, 2:, :] - meshes[:, 1:-1, :]
    l1 = np.sqrt(e1[..., 0] ** 2 + e1[..., 1] ** 2)
    l2 = np.sqrt(e2[..., 0] ** 2 + e2[..., 1] ** 2)
    dot = e1[..., 0] * e2[..., 0] + e1[..., 1] * e2[..., 1]
    denom = l1 * l2
    ok = denom > 1e-12
    safe = np.where(ok, denom, 1.0)
    cos = np.where(ok, dot / safe, 1.0)
    terms = 1.0 - cos

    # d(1-cos)/de1 = cos*e1/l1^2 - e2/(l1 l2), symmetric for e2
    l1s = np.where(ok, l1 * l1, 1.0)
    l2s = np.where(ok, l2 * l2, 1.0)
    okf = ok[..., None].astype(np.float64)
    de1 = okf * (cos[..., None] * e1 / l1s[..., None] - e2 / safe[..., None])
    de2 = okf * (cos[..., None] * e2 / l2s[..., None] - e1 / safe[..., None])

    grads = np.zeros_like(meshes)
    if axis == 2:
        grads[:, :, :-2] -= de1
        grads[:, :, 1:-1] += de1 - de2
        grads[:, :, 2:] += de2
    else:
        grads[:, :-2, :] -= de1
        grads[:, 1:-1, :] += de1 - de2
        grads[:, 2:, :] += de2
    return terms.sum(axis=(1, 2)), grads, terms.shape[1] * terms.shape[2]


def inter_grid_batch(meshes: np.ndarray):
    """Collinearity penalty for a batch of meshes; see `inter_grid_loss`."""
    sum_h, grad_h, n_h = _inter_direction(meshes, axis=2)
    sum_v, grad_v, n_v = _inter_direction(meshes, axis=1)
    q = n_h + n_v
    if q == 0:
        return np.zeros(meshes.shape[0]), np.zeros_like(meshes)
    return (sum_h + sum_v) / q, (grad_h + grad_v) / q


def intra_grid_loss(mesh, width: float, height: float) -> float:
    """Mean hinge excess of grid edge projections over twice the rigid spacing."""
    vals, _ = intra_grid_batch(_mesh_array(mesh)[None], width, height)
    return float(vals[0])


def inter_grid_loss(mesh) -> float:
    """Mean (1 - cos angle) over consecutive collinear edge pairs."""
    vals, _ = inter_grid_batch(_mesh_array(mesh)[None])
    return float(vals[0])


def distortion_loss(mesh, width: float, height: float) -> float:
    """Intra-grid plus inter-grid distortion of a warped mesh."""
    return intra_grid_loss(mesh, width, height) + inter_grid_loss(mesh)


def distortion_loss_grad(mesh, width: float, height: float):
    arr = _mesh_array(mesh)[None]
    v1, g1 = intra_grid_batch(arr, width, height)
    v2, g2 = inter_grid_batch(arr)
    return float(v1[0] + v2[0]), (g1 + g2)[0]


def distortion_batch(meshes: np.ndarray, width: float, height: float):
    """Values and gradients of the distortion loss for stacked meshes."""
    v1, g1 = intra_grid_batch(meshes, width, height)
    v2, g2 = inter_grid_batch(meshes)
    return v1 + v2, g1 + g2


# ---------------------------------------------------------------------------
# Motion consistency
# ---------------------------------------------------------------------------


def _motion_array(motion) -> np.ndarray:
    disp = getattr(motion, "displacements", motion)
    return np.asarray(disp, dtype=np.float64).reshape(-1, 2)


def motion_consistency_loss(motion_cur, motion_prev, mu: float) -> float:
    """Mean hinge on per-point motion change beyond the tolerance `mu`."""
    value, _ = motion_consistency_loss_grad(motion_cur, motion_prev, mu)
    return value


def motion_consistency_loss_grad(motion_cur, motion_prev, mu: float):
    cur = _motion_array(motion_cur)
    prev = _motion_array(motion_prev)
    if cur.shape != prev.shape:
        raise ValueError("motion fields must share a shape")
    diff = cur - prev
    norms = np.linalg.norm(diff, axis=1)
    active = norms > mu
    k = cur.shape[0]
    value = float(np.where(active, norms - mu, 0.0).mean())
    grad = np.zeros_like(cur)
    safe = np.where(norms > 1e-12, norms, 1.0)
    grad[active] = diff[active] / safe[active, None] / k
    return value, grad


# ---------------------------------------------------------------------------
# Photometric alignment
# ---------------------------------------------------------------------------


def _masked_l1(dom_image, dom_mask, sampled, valid):
    """Mean absolute difference over valid samples, all channels."""
    use = valid & dom_mask
    count = use.sum()
    if count == 0:
        return 0.0, use, 0
    diff = np.abs(dom_image[use] - sampled[use])
    channels = dom_image.shape[-1]
    return float(diff.sum() / (count * channels)), use, count


def _homography_term(dom: Frame, other: Frame, h_other_to_dom: Homography) -> float:
    """L1 between the domain frame and the other frame warped into it."""
    back = h_other_to_dom.inverse()
    ys, xs = np.mgrid[0:dom.height, 0:dom.width]
    pix = np.stack([xs.ravel(), ys.ravel()], axis=1).astype(np.float64)
    src = back.apply(pix)
    sx = src[:, 0].reshape(dom.height, dom.width)
    sy = src[:, 1].reshape(dom.height, dom.width)
    valid = inside_extent(sx, sy, other.width, other.height)
    sampled, _, _ = bilinear_sample_grad(other.image, sx, sy)
    value, _, _ = _masked_l1(dom.image, dom.mask, sampled, valid)
    return value


class BackwardTpsField:
    """Differentiable backward TPS field: fit mesh -> anchors, eval at queries.

    Solves the raw interpolation system (kernel centers at the mesh points,
    which move), caching the LU factors so the vector-Jacobian product against
    the mesh can be formed by one adjoint solve.
    """

    def __init__(self, mesh_pts: np.ndarray, anchor_pts: np.ndarray,
                 query: np.ndarray):
        self.mesh = np.asarray(mesh_pts, dtype=np.float64)
        self.query = np.asarray(query, dtype=np.float64)
        k = self.mesh.shape[0]
        self.k = k
        sys = tps_system(self.mesh)
        try:
            self._lu = lu_factor(sys)
        except ValueError as exc:
            raise DegenerateConfigurationError(str(exc)) from exc
        if np.min(np.abs(np.diag(self._lu[0]))) < 1e-12:
            raise DegenerateConfigurationError("degenerate mesh in backward TPS fit")
        rhs = np.zeros((k + 3, 2))
        rhs[:k] = np.asarray(anchor_pts, dtype=np.float64)
        self.coef = lu_solve(self._lu, rhs)
        self._e2 = pairwise_sq_dists(self.query, self.mesh)
        n = self.query.shape[0]
        self._phi = np.concatenate(
            [tps_kernel(self._e2), np.ones((n, 1)), self.query], axis=1)
        self.field = self._phi @ self.coef

    def vjp(self, field_bar: np.ndarray) -> np.ndarray:
        """Gradient of sum(field * field_bar) with respect to the mesh points."""
        k = self.k
        g_coef = self._phi.T @ field_bar                      # (K+3, 2)
        lam = lu_solve(self._lu, g_coef, trans=1)             # L^T lam = g_coef
        l_bar = -(np.outer(lam[:, 0], self.coef[:, 0])
                  + np.outer(lam[:, 1], self.coef[:, 1]))

        # Kernel block of the system matrix.
        d2 = pairwise_sq_dists(self.mesh, self.mesh)
        dkern = np.log(np.maximum(d2, 1e-300)) + 1.0          # dU/dd2 * 2
        np.fill_diagonal(dkern, 0.0)
        gk = l_bar[:k, :k]
        coeff = (gk + gk.T) * dkern
        diff = self.mesh[:, None, :] - self.mesh[None, :, :]
        grad = np.einsum("ij,ijd->id", coeff, diff)

        # Linear block: the mesh coordinates appear in P and P^T.
        grad[:, 0] += l_bar[:k, k + 1] + l_bar[k + 1, :k]
        grad[:, 1] += l_bar[:k, k + 2] + l_bar[k + 2, :k]

        # Direct dependence of the evaluation kernels on the centers.
        s = field_bar @ self.coef[:k].T                       # (N, K)
        dk2 = np.log(np.maximum(self._e2, 1e-300)) + 1.0
        coeff2 = s * dk2
        qdiff = self.mesh[None, :, :] - self.query[:, None, :]
        grad += np.einsum("nk,nkd->kd", coeff2, qdiff)
        return grad


def _tps_term(ref: Frame, tgt: Frame, mesh_pts: np.ndarray, rig_pts: np.ndarray,
              need_grad: bool):
    """Masked L1 between the reference and the mesh-warped target (+ gradient)."""
    ys, xs = np.mgrid[0:ref.height, 0:ref.width]
    query = np.stack([xs.ravel(), ys.ravel()], axis=1).astype(np.float64)
    field = BackwardTpsField(mesh_pts, rig_pts, query)
    sx = field.field[:, 0]
    sy = field.field[:, 1]
    valid = inside_extent(sx, sy, tgt.width, tgt.height).reshape(ref.height, ref.width)
    sampled, gx, gy = bilinear_sample_grad(tgt.image, sx, sy)
    sampled = sampled.reshape(ref.image.shape)
    value, use, count = _masked_l1(ref.image, ref.mask, sampled, valid)
    if not need_grad:
        return value, None
    if count == 0:
        return value, np.zeros_like(mesh_pts)
    channels = ref.channels
    sign = np.sign(ref.image - sampled) * use[:, :, None]
    sign = sign.reshape(-1, channels)
    scale = 1.0 / (count * channels)
    gx = gx.reshape(-1, channels)
    gy = gy.reshape(-1, channels)
    field_bar = np.stack([
        -(sign * gx).sum(axis=1) * scale,
        -(sign * gy).sum(axis=1) * scale,
    ], axis=1)
    return value, field.vjp(field_bar)


def alignment_loss(ref: Frame, tgt: Frame, homography: Homography,
                   mesh: ControlGrid, cfg: WarpObjectiveConfig) -> float:
    """Photometric alignment: two homography L1 terms plus the mesh TPS term.

    Each term is the mean absolute difference over its valid warped region;
    the homography terms are weighted by `omega_h`.
    """
    value, _ = _alignment(ref, tgt, homography, mesh, cfg, need_grad=False)
    return value


def alignment_loss_grad(ref: Frame, tgt: Frame, homography: Homography,
                        mesh: ControlGrid, cfg: WarpObjectiveConfig):
    """Alignment loss and its gradient with respect to the mesh points."""
    return _alignment(ref, tgt, homography, mesh, cfg, need_grad=True)


def _alignment(ref, tgt, homography, mesh, cfg, need_grad):
    if ref.image.shape != tgt.image.shape:
        raise ValueError("frames must share a shape")
    if not isinstance(mesh, ControlGrid):
        raise ValueError("mesh must be a ControlGrid")
    mesh_arr = mesh.points
    rig_pts = rigid_mesh(mesh.shape, tgt.width, tgt.height).flat

    term_fwd = _homography_term(ref, tgt, homography)
    term_bwd = _homography_term(tgt, ref, homography.inverse())
    term_tps, grad = _tps_term(ref, tgt, mesh_arr.reshape(-1, 2), rig_pts, need_grad)
    value = cfg.omega_h * (term_fwd + term_bwd) + term_tps
    if not need_grad:
        return value, None
    return value, grad.reshape(mesh_arr.shape)


# ---------------------------------------------------------------------------
# Full estimator objectives (alignment + weighted regularizers)
# ---------------------------------------------------------------------------


def temporal_warp_objective_grad(prev: Frame, cur: Frame, homography: Homography,
                                 motion: np.ndarray, cfg: WarpObjectiveConfig):
    """Temporal objective (alignment + lambda_tmp * distortion) and d/d motion.

    `motion` holds per-control-point displacements (U+1, V+1, 2) added to the
    rigid mesh of the current frame; the warp aligns `cur` onto `prev`.
    """
    shape_uv = _grid_shape_from_motion(motion)
    rig = rigid_mesh(shape_uv, cur.width, cur.height)
    mesh = ControlGrid(shape_uv, rig.points + motion)
    align, g_align = alignment_loss_grad(prev, cur, homography, mesh, cfg)
    dist, g_dist = distortion_loss_grad(mesh, cur.width, cur.height)
    return align + cfg.lambda_tmp * dist, g_align + cfg.lambda_tmp * g_dist


def spatial_warp_objective_grad(ref: Frame, tgt: Frame, homography: Homography,
                                motion: np.ndarray, prev_motion,
                                cfg: WarpObjectiveConfig):
    """Spatial objective: alignment + lambda_spt * distortion + consistency."""
    shape_uv = _grid_shape_from_motion(motion)
    rig = rigid_mesh(shape_uv, tgt.width, tgt.height)
    mesh = ControlGrid(shape_uv, rig.points + motion)
    align, g_align = alignment_loss_grad(ref, tgt, homography, mesh, cfg)
    dist, g_dist = distortion_loss_grad(mesh, tgt.width, tgt.height)
    value = align + cfg.lambda_spt * dist
    grad = g_align + cfg.lambda_spt * g_dist
    if prev_motion is not None:
        cons, g_cons = motion_consistency_loss_grad(motion, prev_motion, cfg.mu_spt)
        value += cfg.omega_spt * cons
        grad += cfg.omega_spt * g_cons.reshape(motion.shape)
    return value, grad


def _grid_shape_from_motion(motion: np.ndarray):
    from .grid_warp import GridShape

    if motion.ndim != 3 or motion.shape[2] != 2:
        raise ValueError("motion must be (U+1, V+1, 2)")
    return GridShape(motion.shape[0] - 1, motion.shape[1] - 1)
