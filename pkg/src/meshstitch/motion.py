"""Motion providers: direct photometric estimation and ground-truth oracles.

The direct provider minimizes the unsupervised warp objectives with no
learned components: a coarse stage finds a global homography by multi-scale
Gauss-Newton on photometric error (preceded by an exhaustive translation
search for the long-range spatial case), and a fine stage refines per-point
mesh motions by gradient descent with backtracking line search.

For speed the fine stage parameterizes the warp through the forward TPS whose
kernel centers sit on the rigid grid: the fitted coefficients are then linear
in the mesh, so the dense basis is precomputed once and each iteration costs
two small matrix products. The photometric term samples the reference frame
at forward-mapped target pixels, the mirror image of the reference-domain
term used for reporting; both vanish together at alignment.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import lu_factor, lu_solve
from scipy.ndimage import gaussian_filter
from scipy.signal import fftconvolve

from .errors import EstimationFailedError, InsufficientOverlapError
from .grid_warp import (
    ControlGrid,
    Frame,
    GridShape,
    Homography,
    bilinear_sample,
    grayscale,
    inside_extent,
    pairwise_sq_dists,
    rigid_mesh,
    tps_kernel,
    tps_system,
)
from .motion_types import MotionField
from .objectives import WarpObjectiveConfig, distortion_loss_grad, motion_consistency_loss_grad
from .optimize import backtracking_descent

DEFAULT_GRID = GridShape(6, 8)


class MotionProvider:
    """Produces spatial and temporal motion fields for a frame stream."""

    provides_spatial = True
    provides_temporal = True

    @property
    def grid_shape(self) -> GridShape:
        raise NotImplementedError

    def spatial_motion(self, t: int, ref: Frame, tgt: Frame,
                       prev_motion: MotionField | None) -> MotionField:
        raise NotImplementedError

    def temporal_motion(self, t: int, prev_frame: Frame, cur_frame: Frame) -> MotionField:
        raise NotImplementedError


class OracleMotionProvider(MotionProvider):
    """Replays exact per-frame motions, bypassing any optimization."""

    def __init__(self, spatial_motions, temporal_motions):
        self._spatial = list(spatial_motions)
        self._temporal = list(temporal_motions)
        if not self._spatial:
            raise ValueError("oracle needs at least one spatial motion")
        self._shape = self._spatial[0].shape

    @property
    def grid_shape(self) -> GridShape:
        return self._shape

    def spatial_motion(self, t, ref, tgt, prev_motion):
        if not 0 <= t < len(self._spatial):
            raise IndexError(f"no ground-truth spatial motion for frame {t}")
        return self._spatial[t]

    def temporal_motion(self, t, prev_frame, cur_frame):
        if not 0 <= t < len(self._temporal):
            raise IndexError(f"no ground-truth temporal motion for frame {t}")
        field = self._temporal[t]
        if field is None:
            return MotionField.zero(self._shape)
        return field


def oracle_provider(spatial_motions, temporal_motions) -> OracleMotionProvider:
    """Wrap per-frame ground-truth motions as a provider."""
    return OracleMotionProvider(spatial_motions, temporal_motions)


class RecordingProvider(MotionProvider):
    """Wraps a provider and records its outputs for cheap replay.

    Useful when the same estimated motions feed several smoothing
    configurations: estimate once, then `replay()` as an oracle.
    """

    def __init__(self, inner: MotionProvider):
        self.inner = inner
        self.spatial: list[MotionField] = []
        self.temporal: list[MotionField] = []

    @property
    def grid_shape(self) -> GridShape:
        return self.inner.grid_shape

    def spatial_motion(self, t, ref, tgt, prev_motion):
        field = self.inner.spatial_motion(t, ref, tgt, prev_motion)
        self.spatial.append(field)
        return field

    def temporal_motion(self, t, prev_frame, cur_frame):
        field = self.inner.temporal_motion(t, prev_frame, cur_frame)
        while len(self.temporal) < t:
            self.temporal.append(MotionField.zero(self.grid_shape))
        self.temporal.append(field)
        return field

    def replay(self) -> OracleMotionProvider:
        temporal = list(self.temporal)
        while len(temporal) < len(self.spatial):
            temporal.insert(0, MotionField.zero(self.grid_shape))
        return OracleMotionProvider(self.spatial, temporal)


# ---------------------------------------------------------------------------
# Direct estimation
# ---------------------------------------------------------------------------


@dataclass
class EstimatorConfig:
    """Knobs of the direct photometric estimator."""

    pyramid_levels: int = 3
    working_scale: int = 2      # image downsample factor for the fine stage
    pixel_stride: int = 2       # sample stride at the working scale
    gauss_sigma: float = 1.0    # pre-smoothing before gradients
    coarse_iters: int = 10      # Gauss-Newton iterations per pyramid level
    fine_iters: int = 200
    fine_rel_tol: float = 1e-5
    fine_abs_tol: float = 2e-6  # stop once per-step decrease is photometric noise
    min_overlap: float = 0.10   # fraction of samples that must land in-frame
    warm_skip_objective: float = 0.15  # previous motion this good skips the coarse stage
    divergence_limit: int = 5


def _box_downsample(img: np.ndarray, factor: int) -> np.ndarray:
    if factor == 1:
        return img
    h, w = img.shape
    h2, w2 = h // factor * factor, w // factor * factor
    v = img[:h2, :w2].reshape(h2 // factor, factor, w2 // factor, factor)
    return v.mean(axis=(1, 3))


def _pyramid(img: np.ndarray, levels: int, min_dim: int = 16):
    out = [img]
    while len(out) < levels and min(out[-1].shape) // 2 >= min_dim:
        out.append(_box_downsample(out[-1], 2))
    return out


def _fit_4pt(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Exact homography through 4 correspondences via an 8x8 solve."""
    a = np.zeros((8, 8))
    b = np.zeros(8)
    for i in range(4):
        x, y = src[i]
        xp, yp = dst[i]
        a[2 * i] = [x, y, 1, 0, 0, 0, -xp * x, -xp * y]
        a[2 * i + 1] = [0, 0, 0, x, y, 1, -yp * x, -yp * y]
        b[2 * i] = xp
        b[2 * i + 1] = yp
    h = np.linalg.solve(a, b)
    return np.array([[h[0], h[1], h[2]], [h[3], h[4], h[5]], [h[6], h[7], 1.0]])


def _apply_h(mat: np.ndarray, pts: np.ndarray) -> np.ndarray:
    w = pts @ mat[2, :2] + mat[2, 2]
    x = (pts @ mat[0, :2] + mat[0, 2]) / w
    y = (pts @ mat[1, :2] + mat[1, 2]) / w
    return np.stack([x, y], axis=1)


def _translation_search(ref: np.ndarray, tgt: np.ndarray,
                        min_overlap: float) -> tuple[float, float]:
    """Best integer shift of tgt content into ref by normalized correlation."""
    a = ref - ref.mean()
    b = tgt - tgt.mean()
    ones_a = np.ones_like(a)
    ones_b = np.ones_like(b)
    num = fftconvolve(a, b[::-1, ::-1], mode="full")
    counts = fftconvolve(ones_a, ones_b[::-1, ::-1], mode="full")
    ea = fftconvolve(a * a, ones_b[::-1, ::-1], mode="full")
    eb = fftconvolve(ones_a, (b * b)[::-1, ::-1], mode="full")
    denom = np.sqrt(np.maximum(ea * eb, 1e-12))
    ncc = num / denom
    min_count = max(min_overlap * tgt.size, 64.0)
    ncc[counts < min_count] = -np.inf
    idx = np.unravel_index(np.argmax(ncc), ncc.shape)
    dy = idx[0] - (tgt.shape[0] - 1)
    dx = idx[1] - (tgt.shape[1] - 1)
    return float(dx), float(dy)


def _corners(width: float, height: float) -> np.ndarray:
    return np.array([[0.0, 0.0], [width, 0.0], [0.0, height], [width, height]])


def _sample_grid(h: int, w: int, max_samples: int = 6000) -> np.ndarray:
    stride = 1
    while (h // stride) * (w // stride) > max_samples:
        stride += 1
    ys, xs = np.mgrid[0:h:stride, 0:w:stride]
    return np.stack([xs.ravel(), ys.ravel()], axis=1).astype(np.float64)


def _gn_homography(ref_levels, tgt_levels, theta_full: np.ndarray,
                   est: EstimatorConfig, finest_level: int = 1) -> np.ndarray:
    """Refine forward-map corner offsets over the pyramid, coarse to fine.

    Residuals compare the target image against the reference sampled at the
    forward-mapped pixel, Gauss-Newton steps use a finite-difference Jacobian
    over the 8 corner-offset parameters. The loop stops at `finest_level`
    since the TPS fine stage owns the sub-pixel residual.
    """
    n_levels = len(ref_levels)
    finest_level = min(finest_level, n_levels - 1)
    theta = theta_full / (2 ** (n_levels - 1))
    fd_step = 0.25

    for level in range(n_levels - 1, finest_level - 1, -1):
        ref_l = ref_levels[level]
        tgt_l = tgt_levels[level]
        h, w = tgt_l.shape
        corners = _corners(w, h)
        pts = _sample_grid(h, w)
        tgt_vals = tgt_l[pts[:, 1].astype(int), pts[:, 0].astype(int)]

        def objective(th):
            mat = _fit_4pt(corners, corners + th.reshape(4, 2))
            f = _apply_h(mat, pts)
            valid = inside_extent(f[:, 0], f[:, 1], w, h)
            count = valid.sum()
            if count < 16:
                return np.inf, None, None, 0
            ref_vals = bilinear_sample(ref_l, f[:, 0], f[:, 1])
            resid = np.where(valid, tgt_vals - ref_vals, 0.0)
            return float(np.sum(resid**2) / count), resid, f, count

        value, resid, f, count = objective(theta)
        if not np.isfinite(value):
            theta *= 2.0
            continue
        gy_img, gx_img = np.gradient(ref_l)
        for _ in range(est.coarse_iters):
            gx = bilinear_sample(gx_img, f[:, 0], f[:, 1])
            gy = bilinear_sample(gy_img, f[:, 0], f[:, 1])
            jac = np.zeros((pts.shape[0], 8))
            for j in range(8):
                tp = theta.copy(); tp[j] += fd_step
                tm = theta.copy(); tm[j] -= fd_step
                fp = _apply_h(_fit_4pt(corners, corners + tp.reshape(4, 2)), pts)
                fm = _apply_h(_fit_4pt(corners, corners + tm.reshape(4, 2)), pts)
                df = (fp - fm) / (2 * fd_step)
                jac[:, j] = -(gx * df[:, 0] + gy * df[:, 1])
            live = np.abs(resid) > 0
            jac[~live] = 0.0
            jtj = jac.T @ jac / count + 1e-8 * np.eye(8)
            jtr = jac.T @ resid / count
            try:
                delta = np.linalg.solve(jtj, -jtr)
            except np.linalg.LinAlgError:
                break
            accepted = False
            for _ in range(6):
                trial = theta + delta
                tv, tr, tf, tc = objective(trial)
                if tv < value:
                    decrease = value - tv
                    theta, value, resid, f, count = trial, tv, tr, tf, tc
                    accepted = True
                    break
                delta *= 0.5
            if not accepted or value < 1e-14 or decrease < 1e-3 * value:
                break
        if level > finest_level:
            theta *= 2.0
    return theta * (2 ** finest_level)


class _FineBasis:
    """Precomputed TPS basis for the fine stage at one working resolution."""

    def __init__(self, grid: GridShape, work_h: int, work_w: int, stride: int):
        self.work_h = work_h
        self.work_w = work_w
        rig = rigid_mesh(grid, work_w, work_h)
        self.rig_flat = rig.flat
        k = self.rig_flat.shape[0]
        self.k = k
        self.lu = lu_factor(tps_system(self.rig_flat))
        ys, xs = np.mgrid[0:work_h:stride, 0:work_w:stride]
        self.pix = np.stack([xs.ravel(), ys.ravel()], axis=1).astype(np.float64)
        n = self.pix.shape[0]
        kern = tps_kernel(pairwise_sq_dists(self.pix, self.rig_flat))
        self.phi = np.concatenate([kern, np.ones((n, 1)), self.pix], axis=1)
        self.iy = self.pix[:, 1].astype(int)
        self.ix = self.pix[:, 0].astype(int)


@dataclass
class EstimationReport:
    objective_init: float
    objective_final: float
    iterations: int
    converged: bool
    coarse_translation: tuple[float, float]
    overlap_fraction: float


class DirectMotionProvider(MotionProvider):
    """Estimates motions by direct minimization of the warp objectives."""

    def __init__(self, grid: GridShape = DEFAULT_GRID,
                 frame_size: tuple[int, int] | None = None,
                 cfg: WarpObjectiveConfig | None = None,
                 est: EstimatorConfig | None = None):
        self._grid = grid
        self.cfg = cfg or WarpObjectiveConfig()
        self.est = est or EstimatorConfig()
        self._bases: dict[tuple[int, int], _FineBasis] = {}
        self.last_report: EstimationReport | None = None
        if frame_size is not None:
            self._basis_for(frame_size[0], frame_size[1])

    @property
    def grid_shape(self) -> GridShape:
        return self._grid

    def _basis_for(self, full_h: int, full_w: int) -> _FineBasis:
        key = (full_h, full_w)
        if key not in self._bases:
            ws = self.est.working_scale
            self._bases[key] = _FineBasis(self._grid, full_h // ws, full_w // ws,
                                          self.est.pixel_stride)
        return self._bases[key]

    # -- shared machinery ---------------------------------------------------

    def _prepare(self, frame: Frame):
        gray = grayscale(frame.image)
        smooth = gaussian_filter(gray, self.est.gauss_sigma)
        return smooth

    def _estimate(self, dom: Frame, src: Frame, lam: float,
                  prev_motion: MotionField | None,
                  search_translation: bool) -> MotionField:
        """Estimate the motion warping `src` content onto the `dom` frame."""
        if dom.image.shape != src.image.shape:
            raise ValueError("frames must share a size")
        full_h, full_w = src.height, src.width
        ref_s = self._prepare(dom)
        tgt_s = self._prepare(src)
        rig_full = rigid_mesh(self._grid, full_w, full_h)

        ws = self.est.working_scale
        basis = self._basis_for(full_h, full_w)
        ref_w = _box_downsample(ref_s, ws)
        tgt_w = _box_downsample(tgt_s, ws)
        gy_img, gx_img = np.gradient(ref_w)
        # one gather per iteration: value and both gradient images stacked
        ref_pack = np.stack([ref_w, gx_img, gy_img], axis=-1)
        tgt_vals = tgt_w[basis.iy, basis.ix]
        k = basis.k
        scale_pix = np.array([basis.work_w / full_w, basis.work_h / full_h])
        prev_flat = prev_motion.flat if prev_motion is not None else None

        def fun_grad(m_flat):
            m_w = m_flat.reshape(k, 2)
            rhs = np.zeros((k + 3, 2))
            rhs[:k] = basis.rig_flat + m_w
            coef = lu_solve(basis.lu, rhs)
            f = basis.phi @ coef
            valid = inside_extent(f[:, 0], f[:, 1], basis.work_w, basis.work_h)
            count = int(valid.sum())
            if count < 16:
                return 1e6, np.zeros(2 * k)
            vals = bilinear_sample(ref_pack, f[:, 0], f[:, 1])
            resid = np.where(valid, tgt_vals - vals[:, 0], 0.0)
            photo = float(np.abs(resid).sum() / count)
            sgn = np.sign(resid)
            fbar = np.stack([-sgn * vals[:, 1], -sgn * vals[:, 2]], axis=1) / count
            g_coef = basis.phi.T @ fbar
            g_mesh = lu_solve(basis.lu, g_coef, trans=1)[:k]

            m_full = m_w / scale_pix
            mesh_full = rig_full.points + m_full.reshape(rig_full.points.shape)
            dist, g_dist = distortion_loss_grad(mesh_full, full_w, full_h)
            value = photo + lam * dist
            grad = g_mesh + lam * g_dist.reshape(k, 2) / scale_pix
            if prev_flat is not None:
                cons, g_cons = motion_consistency_loss_grad(
                    m_full, prev_flat, self.cfg.mu_spt)
                value += self.cfg.omega_spt * cons
                grad += self.cfg.omega_spt * g_cons / scale_pix
            return value, grad.ravel()

        # Coarse stage. A good previous-frame motion lets the steady-state
        # video path skip the global search and homography refinement.
        shift = (0.0, 0.0)
        candidates = [np.zeros((k, 2))]
        warm_ok = False
        if prev_flat is not None:
            prev_value = fun_grad((prev_flat * scale_pix).ravel())[0]
            candidates.append(prev_flat * scale_pix)
            warm_ok = prev_value < self.est.warm_skip_objective
        if not warm_ok:
            levels = _pyramid(ref_s, self.est.pyramid_levels)
            tgt_levels = _pyramid(tgt_s, self.est.pyramid_levels)
            if search_translation:
                factor = 2 ** (len(levels) - 1)
                shift = _translation_search(levels[-1], tgt_levels[-1],
                                            self.est.min_overlap)
                shift = (shift[0] * factor, shift[1] * factor)
            theta0 = np.tile(np.array(shift), 4)
            theta = _gn_homography(levels, tgt_levels, theta0, self.est)
            corners = _corners(full_w, full_h)
            h_mat = _fit_4pt(corners, corners + theta.reshape(4, 2))
            motion_h = _apply_h(h_mat, rig_full.flat) - rig_full.flat
            candidates.append(motion_h * scale_pix)

        values = [fun_grad(c.ravel())[0] for c in candidates]
        best = int(np.argmin(values))
        init = candidates[best]

        overlap_frac = float("nan")
        if search_translation:
            f0 = basis.phi @ lu_solve(
                basis.lu, np.concatenate([basis.rig_flat + init, np.zeros((3, 2))]))
            overlap_frac = float(np.mean(inside_extent(
                f0[:, 0], f0[:, 1], basis.work_w, basis.work_h)))
            if overlap_frac < self.est.min_overlap:
                raise InsufficientOverlapError(
                    f"only {overlap_frac:.1%} of the view overlaps after the coarse stage")

        def on_divergence(streak):
            if streak >= self.est.divergence_limit:
                raise EstimationFailedError(
                    "objective increased on consecutive accepted steps",
                    diagnostics={"streak": streak})

        result = backtracking_descent(
            fun_grad, init.ravel(), max_iters=self.est.fine_iters,
            rel_tol=self.est.fine_rel_tol, abs_tol=self.est.fine_abs_tol,
            init_step=1.0, divergence_callback=on_divergence)

        m_w = result.x.reshape(k, 2)
        motion_full = (m_w / scale_pix).reshape(rig_full.points.shape)
        self.last_report = EstimationReport(
            objective_init=result.initial_value,
            objective_final=result.value,
            iterations=result.iterations,
            converged=result.converged,
            coarse_translation=shift,
            overlap_fraction=overlap_frac,
        )
        return MotionField(self._grid, motion_full)

    # -- provider interface ---------------------------------------------------

    def temporal_motion(self, t, prev_frame, cur_frame):
        return self._estimate(prev_frame, cur_frame, self.cfg.lambda_tmp,
                              prev_motion=None, search_translation=False)

    def spatial_motion(self, t, ref, tgt, prev_motion):
        return self._estimate(ref, tgt, self.cfg.lambda_spt,
                              prev_motion=prev_motion, search_translation=True)


def estimate_temporal(prev: Frame, cur: Frame, cfg: WarpObjectiveConfig,
                      grid: GridShape = DEFAULT_GRID,
                      est: EstimatorConfig | None = None) -> MotionField:
    """Motion of the current frame onto the previous one (temporal warp)."""
    provider = DirectMotionProvider(grid, cfg=cfg, est=est)
    return provider.temporal_motion(0, prev, cur)


def estimate_spatial(ref: Frame, tgt: Frame, prev_motion: MotionField | None,
                     cfg: WarpObjectiveConfig, grid: GridShape = DEFAULT_GRID,
                     est: EstimatorConfig | None = None) -> MotionField:
    """Motion of the target frame onto the reference frame (spatial warp)."""
    provider = DirectMotionProvider(grid, cfg=cfg, est=est)
    return provider.spatial_motion(0, ref, tgt, prev_motion)
