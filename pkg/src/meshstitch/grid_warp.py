"""Mesh geometry, thin-plate-spline and homography fitting, and image warping.

Coordinate convention: x grows right, y grows down, pixel centers sit at
integer coordinates, origin at the top-left pixel center. A W x H frame
occupies the closed extent [0, W] x [0, H]; samples are clamped to the pixel
center range [0, W-1] x [0, H-1].
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import lu_factor, lu_solve

from .errors import DegenerateConfigurationError

PIVOT_FLOOR = 1e-12
# Sampling coordinates within this distance of an integer are snapped so that
# identity and integer-translation warps reproduce pixels bit-exactly.
SNAP_EPS = 1e-9


@dataclass(frozen=True)
class GridShape:
    """Mesh cell counts: rows_u vertical cells, cols_v horizontal cells."""

    rows_u: int
    cols_v: int

    def __post_init__(self):
        if self.rows_u < 1 or self.cols_v < 1:
            raise ValueError(f"grid must have at least 1x1 cells, got {self}")

    @property
    def n_points(self) -> int:
        return (self.rows_u + 1) * (self.cols_v + 1)

    @property
    def point_dims(self) -> tuple[int, int]:
        return (self.rows_u + 1, self.cols_v + 1)


@dataclass(frozen=True)
class ControlGrid:
    """(U+1) x (V+1) control-point positions in pixels, indexed [u, v] -> (x, y)."""

    shape: GridShape
    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        expected = self.shape.point_dims + (2,)
        if pts.shape != expected:
            raise ValueError(f"points shape {pts.shape} != {expected}")
        if not np.all(np.isfinite(pts)):
            raise ValueError("control points must be finite")
        object.__setattr__(self, "points", pts)

    @property
    def flat(self) -> np.ndarray:
        """Points flattened to (K, 2), row-major over (u, v)."""
        return self.points.reshape(-1, 2)

    def translated(self, dx: float, dy: float) -> "ControlGrid":
        return ControlGrid(self.shape, self.points + np.array([dx, dy]))


@dataclass(frozen=True)
class Frame:
    """Image in [0, 1] with a per-pixel validity mask."""

    image: np.ndarray  # (H, W, C) float64
    mask: np.ndarray   # (H, W) bool

    def __post_init__(self):
        img = np.asarray(self.image, dtype=np.float64)
        if img.ndim == 2:
            img = img[:, :, None]
        if img.ndim != 3:
            raise ValueError("image must be (H, W) or (H, W, C)")
        msk = np.asarray(self.mask, dtype=bool)
        if msk.shape != img.shape[:2]:
            raise ValueError("mask shape must match image")
        object.__setattr__(self, "image", img)
        object.__setattr__(self, "mask", msk)

    @classmethod
    def from_image(cls, image: np.ndarray) -> "Frame":
        image = np.asarray(image, dtype=np.float64)
        hw = image.shape[:2]
        return cls(image=image, mask=np.ones(hw, dtype=bool))

    @property
    def height(self) -> int:
        return self.image.shape[0]

    @property
    def width(self) -> int:
        return self.image.shape[1]

    @property
    def channels(self) -> int:
        return self.image.shape[2]


def grayscale(image: np.ndarray) -> np.ndarray:
    """Luma (Rec. 601) of an (H, W, C) image; (H, W) passes through."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        return image
    if image.shape[2] == 1:
        return image[:, :, 0]
    return image[:, :, 0] * 0.299 + image[:, :, 1] * 0.587 + image[:, :, 2] * 0.114


def rigid_mesh(shape: GridShape, width: float, height: float) -> ControlGrid:
    """Uniform control grid spanning [0, width] x [0, height]."""
    if width <= 0 or height <= 0:
        raise ValueError(f"frame dimensions must be positive, got {width}x{height}")
    xs = np.linspace(0.0, float(width), shape.cols_v + 1)
    ys = np.linspace(0.0, float(height), shape.rows_u + 1)
    pts = np.empty(shape.point_dims + (2,), dtype=np.float64)
    pts[:, :, 0] = xs[None, :]
    pts[:, :, 1] = ys[:, None]
    return ControlGrid(shape, pts)


# ---------------------------------------------------------------------------
# Thin-plate splines
# ---------------------------------------------------------------------------


def tps_kernel(d2: np.ndarray) -> np.ndarray:
    """Radial kernel r^2 log r expressed via squared distance, with U(0) = 0."""
    d2 = np.maximum(d2, 1e-300)
    return 0.5 * d2 * np.log(d2)


def pairwise_sq_dists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Squared distances between rows of a (N, 2) and b (K, 2)."""
    aa = np.einsum("ij,ij->i", a, a)[:, None]
    bb = np.einsum("ij,ij->i", b, b)[None, :]
    d2 = aa + bb - 2.0 * (a @ b.T)
    return np.maximum(d2, 0.0)


def tps_system(points: np.ndarray) -> np.ndarray:
    """Assemble the (K+3) x (K+3) TPS interpolation matrix for (K, 2) points."""
    k = points.shape[0]
    kern = tps_kernel(pairwise_sq_dists(points, points))
    np.fill_diagonal(kern, 0.0)
    p = np.concatenate([np.ones((k, 1)), points], axis=1)
    sys = np.zeros((k + 3, k + 3))
    sys[:k, :k] = kern
    sys[:k, k:] = p
    sys[k:, :k] = p.T
    return sys


def solve_pivoted(matrix: np.ndarray, rhs: np.ndarray):
    """LU solve with a pivot floor; raises on degenerate systems."""
    try:
        lu, piv = lu_factor(matrix)
    except ValueError as exc:  # non-finite entries
        raise DegenerateConfigurationError(str(exc)) from exc
    if np.min(np.abs(np.diag(lu))) < PIVOT_FLOOR:
        raise DegenerateConfigurationError(
            "near-singular linear system (pivot below 1e-12)"
        )
    return lu_solve((lu, piv), rhs)


@dataclass(frozen=True)
class TpsWarp:
    """Fitted TPS map p -> affine @ [p; 1] + sum_k weights_k * U(|p - source_k|)."""

    source_points: np.ndarray  # (K, 2)
    affine: np.ndarray         # (2, 3), columns [A | t]
    weights: np.ndarray        # (K, 2)

    def __call__(self, points: np.ndarray) -> np.ndarray:
        return tps_eval(self, points)


def _normalize(points: np.ndarray):
    center = points.mean(axis=0)
    scale = np.sqrt(np.mean(np.sum((points - center) ** 2, axis=1)))
    return center, scale


def tps_fit(source: ControlGrid, target: ControlGrid) -> TpsWarp:
    """Exact-interpolation TPS taking source control points onto target points.

    The system is solved in centered/scaled coordinates for conditioning and
    the coefficients are mapped back to raw pixel coordinates, which is exact
    because the kernel side conditions absorb the scale-dependent term.
    """
    if source.shape != target.shape:
        raise ValueError("source and target grids must share a shape")
    src = source.flat
    tgt = target.flat
    k = src.shape[0]

    mu, c = _normalize(src)
    if c < 1e-12:
        raise DegenerateConfigurationError("source control points are coincident")
    nu, g = _normalize(tgt)
    if g < 1e-12:
        g = 1.0
    src_n = (src - mu) / c
    tgt_n = (tgt - nu) / g

    sys = tps_system(src_n)
    rhs = np.zeros((k + 3, 2))
    rhs[:k] = tgt_n
    sol = solve_pivoted(sys, rhs)
    w_n = sol[:k]          # (K, 2)
    a_n = sol[k:]          # (3, 2): rows [1, x, y] coefficients

    # Map back: f(p) = nu + g * f_n((p - mu) / c). The kernel obeys
    # U(r/c) = (U(r) - log(c) r^2) / c^2 and the side conditions turn the
    # sum of w * r^2 into the constant sum_k w_k |s_k|^2.
    weights = (g / c**2) * w_n
    lin = (g / c) * a_n[1:].T                      # (2, 2)
    kappa = w_n.T @ np.einsum("ij,ij->i", src, src)  # (2,)
    trans = nu + g * a_n[0] - lin @ mu - (g * np.log(c) / c**2) * kappa
    affine = np.concatenate([lin, trans[:, None]], axis=1)
    return TpsWarp(source_points=src.copy(), affine=affine, weights=weights)


def tps_eval(warp: TpsWarp, points: np.ndarray) -> np.ndarray:
    """Evaluate a fitted TPS at (N, 2) query points."""
    pts = np.asarray(points, dtype=np.float64)
    squeeze = pts.ndim == 1
    pts = np.atleast_2d(pts)
    kern = tps_kernel(pairwise_sq_dists(pts, warp.source_points))
    out = pts @ warp.affine[:, :2].T + warp.affine[:, 2] + kern @ warp.weights
    return out[0] if squeeze else out


def warp_mesh(from_grid: ControlGrid, to_grid: ControlGrid,
              query: ControlGrid) -> ControlGrid:
    """Map a query grid through the TPS fitted from `from_grid` to `to_grid`."""
    warp = tps_fit(from_grid, to_grid)
    mapped = tps_eval(warp, query.flat)
    return ControlGrid(query.shape, mapped.reshape(query.points.shape))


# ---------------------------------------------------------------------------
# Homographies
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Homography:
    """3x3 projective transform normalized so matrix[2, 2] == 1."""

    matrix: np.ndarray

    def __post_init__(self):
        mat = np.asarray(self.matrix, dtype=np.float64)
        if mat.shape != (3, 3):
            raise ValueError("homography matrix must be 3x3")
        if abs(mat[2, 2]) < 1e-12:
            raise DegenerateConfigurationError("homography has zero scale entry")
        mat = mat / mat[2, 2]
        if abs(np.linalg.det(mat)) < 1e-12:
            raise DegenerateConfigurationError("homography is not invertible")
        object.__setattr__(self, "matrix", mat)

    @classmethod
    def identity(cls) -> "Homography":
        return cls(np.eye(3))

    @classmethod
    def translation(cls, dx: float, dy: float) -> "Homography":
        mat = np.eye(3)
        mat[0, 2] = dx
        mat[1, 2] = dy
        return cls(mat)

    def inverse(self) -> "Homography":
        return Homography(np.linalg.inv(self.matrix))

    def apply(self, points: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        homo = np.concatenate([pts, np.ones((pts.shape[0], 1))], axis=1)
        mapped = homo @ self.matrix.T
        w = mapped[:, 2]
        if np.any(np.abs(w) < 1e-12):
            raise DegenerateConfigurationError("point maps to infinity")
        out = mapped[:, :2] / w[:, None]
        return out[0] if np.asarray(points).ndim == 1 else out


def homography_fit(source: np.ndarray, target: np.ndarray) -> Homography:
    """Least-squares DLT homography from >= 4 correspondences."""
    src = np.asarray(source, dtype=np.float64)
    tgt = np.asarray(target, dtype=np.float64)
    if src.shape != tgt.shape or src.ndim != 2 or src.shape[1] != 2:
        raise ValueError("source/target must both be (N, 2)")
    n = src.shape[0]
    if n < 4:
        raise ValueError("homography needs at least 4 correspondences")

    def norm_transform(pts):
        center = pts.mean(axis=0)
        d = np.sqrt(np.sum((pts - center) ** 2, axis=1)).mean()
        s = np.sqrt(2.0) / d if d > 1e-12 else 1.0
        t = np.array([[s, 0, -s * center[0]],
                      [0, s, -s * center[1]],
                      [0, 0, 1.0]])
        return t

    t_src = norm_transform(src)
    t_tgt = norm_transform(tgt)
    sh = np.concatenate([src, np.ones((n, 1))], axis=1) @ t_src.T
    th = np.concatenate([tgt, np.ones((n, 1))], axis=1) @ t_tgt.T

    a = np.zeros((2 * n, 9))
    a[0::2, 0:3] = sh
    a[0::2, 6:9] = -th[:, 0:1] * sh
    a[1::2, 3:6] = sh
    a[1::2, 6:9] = -th[:, 1:2] * sh
    _, s, vt = np.linalg.svd(a)
    if s[-2] < 1e-12 * max(s[0], 1.0):
        raise DegenerateConfigurationError("homography correspondences are degenerate")
    h_norm = vt[-1].reshape(3, 3)
    h = np.linalg.inv(t_tgt) @ h_norm @ t_src
    return Homography(h)


# ---------------------------------------------------------------------------
# Sampling and frame warping
# ---------------------------------------------------------------------------


def _snap(coords: np.ndarray) -> np.ndarray:
    rounded = np.round(coords)
    return np.where(np.abs(coords - rounded) < SNAP_EPS, rounded, coords)


def bilinear_sample(image: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Clamped bilinear sampling of (H, W) or (H, W, C) at float coordinates."""
    h, w = image.shape[:2]
    x = _snap(np.asarray(x, dtype=np.float64))
    y = _snap(np.asarray(y, dtype=np.float64))
    xc = np.clip(x, 0.0, w - 1.0)
    yc = np.clip(y, 0.0, h - 1.0)
    x0 = np.minimum(np.floor(xc), w - 2).astype(np.int64) if w > 1 else np.zeros_like(xc, dtype=np.int64)
    y0 = np.minimum(np.floor(yc), h - 2).astype(np.int64) if h > 1 else np.zeros_like(yc, dtype=np.int64)
    fx = xc - x0
    fy = yc - y0
    if image.ndim == 3:
        fx = fx[..., None]
        fy = fy[..., None]
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    v00 = image[y0, x0]
    v01 = image[y0, x1]
    v10 = image[y1, x0]
    v11 = image[y1, x1]
    top = v00 * (1.0 - fx) + v01 * fx
    bot = v10 * (1.0 - fx) + v11 * fx
    return top * (1.0 - fy) + bot * fy


def bilinear_sample_grad(image: np.ndarray, x: np.ndarray, y: np.ndarray):
    """Sample plus the interpolant's derivative w.r.t. the sample coordinates.

    The derivative is the exact piecewise derivative of the bilinear
    interpolant, zeroed where the coordinate is clamped, so it is consistent
    with finite differences of `bilinear_sample` almost everywhere.
    """
    h, w = image.shape[:2]
    x = _snap(np.asarray(x, dtype=np.float64))
    y = _snap(np.asarray(y, dtype=np.float64))
    xc = np.clip(x, 0.0, w - 1.0)
    yc = np.clip(y, 0.0, h - 1.0)
    x0 = np.minimum(np.floor(xc), w - 2).astype(np.int64) if w > 1 else np.zeros_like(xc, dtype=np.int64)
    y0 = np.minimum(np.floor(yc), h - 2).astype(np.int64) if h > 1 else np.zeros_like(yc, dtype=np.int64)
    fx = xc - x0
    fy = yc - y0
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    live_x = (x > 0.0) & (x < w - 1.0)
    live_y = (y > 0.0) & (y < h - 1.0)
    if image.ndim == 3:
        fx = fx[..., None]
        fy = fy[..., None]
        live_x = live_x[..., None]
        live_y = live_y[..., None]
    v00 = image[y0, x0]
    v01 = image[y0, x1]
    v10 = image[y1, x0]
    v11 = image[y1, x1]
    val = (v00 * (1 - fx) * (1 - fy) + v01 * fx * (1 - fy)
           + v10 * (1 - fx) * fy + v11 * fx * fy)
    gx = (v01 - v00) * (1 - fy) + (v11 - v10) * fy
    gy = (v10 - v00) * (1 - fx) + (v11 - v01) * fx
    gx = np.where(live_x, gx, 0.0)
    gy = np.where(live_y, gy, 0.0)
    return val, gx, gy


def inside_extent(x: np.ndarray, y: np.ndarray, width: float, height: float) -> np.ndarray:
    """Validity flags for points inside the closed extent [0, W] x [0, H]."""
    return (x >= 0.0) & (x <= width) & (y >= 0.0) & (y <= height)


def _lattice_field(eval_points, canvas_h: int, canvas_w: int, step: int) -> np.ndarray:
    """Evaluate a 2D map on a coarse lattice and bilinearly upsample it.

    `eval_points` maps an (N, 2) array of canvas pixel coordinates to (N, 2)
    source coordinates. Exact for affine maps; for bent TPS maps the
    interpolation error is bounded by the field curvature times step^2.
    """
    nx = (canvas_w - 1) // step + 2
    ny = (canvas_h - 1) // step + 2
    lx = np.arange(nx) * float(step)
    ly = np.arange(ny) * float(step)
    nodes = np.stack(np.meshgrid(lx, ly, indexing="xy"), axis=-1).reshape(-1, 2)
    node_field = eval_points(nodes).reshape(ny, nx, 2)

    xs = np.arange(canvas_w)
    ys = np.arange(canvas_h)
    ix = xs // step
    iy = ys // step
    fx = (xs - ix * step) / float(step)
    fy = (ys - iy * step) / float(step)
    f00 = node_field[np.ix_(iy, ix)]
    f01 = node_field[np.ix_(iy, ix + 1)]
    f10 = node_field[np.ix_(iy + 1, ix)]
    f11 = node_field[np.ix_(iy + 1, ix + 1)]
    wx = fx[None, :, None]
    wy = fy[:, None, None]
    top = f00 * (1 - wx) + f01 * wx
    bot = f10 * (1 - wx) + f11 * wx
    return top * (1 - wy) + bot * wy  # (H, W, 2)


def warp_frame(mesh_src: ControlGrid, mesh_dst: ControlGrid, frame: Frame,
               canvas_size: tuple[int, int], offset: tuple[float, float] = (0.0, 0.0),
               lattice_step: int = 1) -> Frame:
    """Warp a frame so its source mesh lands on the destination mesh.

    Backward mapping: a TPS is fitted from `mesh_dst` to `mesh_src` and
    evaluated at every canvas pixel (canvas pixel minus `offset` gives the
    destination-space coordinate). `lattice_step` > 1 evaluates the field on a
    coarse lattice and upsamples, trading exactness for speed.
    """
    canvas_h, canvas_w = canvas_size
    ox, oy = offset
    back = tps_fit(mesh_dst, mesh_src)

    def eval_points(pix):
        return tps_eval(back, pix - np.array([ox, oy]))

    if lattice_step > 1:
        field = _lattice_field(eval_points, canvas_h, canvas_w, lattice_step)
    else:
        xs = np.arange(canvas_w, dtype=np.float64)
        ys = np.arange(canvas_h, dtype=np.float64)
        pix = np.stack(np.meshgrid(xs, ys, indexing="xy"), axis=-1).reshape(-1, 2)
        field = eval_points(pix).reshape(canvas_h, canvas_w, 2)

    sx = _snap(field[:, :, 0])
    sy = _snap(field[:, :, 1])
    valid = inside_extent(sx, sy, frame.width, frame.height)
    nx = np.clip(np.round(sx), 0, frame.width - 1).astype(np.int64)
    ny = np.clip(np.round(sy), 0, frame.height - 1).astype(np.int64)
    valid &= frame.mask[ny, nx]

    image = bilinear_sample(frame.image, sx, sy)
    image[~valid] = 0.0
    return Frame(image=image, mask=valid)


def warp_frame_homography(h: Homography, frame: Frame,
                          out_size: tuple[int, int],
                          offset: tuple[float, float] = (0.0, 0.0)) -> Frame:
    """Warp a frame by a forward homography (frame coords -> output coords)."""
    out_h, out_w = out_size
    ox, oy = offset
    back = h.inverse()
    xs = np.arange(out_w, dtype=np.float64) - ox
    ys = np.arange(out_h, dtype=np.float64) - oy
    pix = np.stack(np.meshgrid(xs, ys, indexing="xy"), axis=-1).reshape(-1, 2)
    src = back.apply(pix).reshape(out_h, out_w, 2)
    sx = _snap(src[:, :, 0])
    sy = _snap(src[:, :, 1])
    valid = inside_extent(sx, sy, frame.width, frame.height)
    nx = np.clip(np.round(sx), 0, frame.width - 1).astype(np.int64)
    ny = np.clip(np.round(sy), 0, frame.height - 1).astype(np.int64)
    valid &= frame.mask[ny, nx]
    image = bilinear_sample(frame.image, sx, sy)
    image[~valid] = 0.0
    return Frame(image=image, mask=valid)
