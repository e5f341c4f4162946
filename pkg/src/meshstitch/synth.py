"""Synthetic video-pair generator with closed-form ground truth.

Two crop streams are sampled from one latent image along configurable paths.
Crops are similarity transforms (translation plus optional small rotation and
scale), so the true spatial and temporal meshes are affine images of the
rigid grid and every TPS fit of them is exact; the true stitching trajectory
is rebuilt through the trajectory module so the ground truth is consistent
with the pipeline's own algebra by construction.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import InvalidSceneError
from .grid_warp import ControlGrid, Frame, GridShape, bilinear_sample, rigid_mesh
from .motion import OracleMotionProvider, oracle_provider
from .motion_types import MotionField
from .trajectory import Trajectory, stitch_motion, stitch_trajectory


@dataclass
class SceneSpec:
    """Parameters of one synthetic scene."""

    latent_size: tuple[int, int] = (560, 900)     # (H, W) of the latent image
    frame_size: tuple[int, int] = (360, 480)      # (H, W) of emitted frames
    n_frames: int = 24
    grid: GridShape = field(default_factory=lambda: GridShape(6, 8))
    texture: str = "noise"                        # "noise" | "checker"
    channels: int = 1
    overlap: float = 0.5                          # horizontal overlap ratio
    drift_px: float = 6.0                         # smooth base-path wander
    # The stitched video is anchored to the reference view, so shake on the
    # reference path is what makes stitching trajectories shaky; target-path
    # shake is absorbed by the spatial warp (exactly so for translations).
    ref_shake_amplitude: float = 0.0              # reference-path shake, px
    tgt_shake_amplitude: float = 0.0              # target-path shake, px
    shake_frequency: float = 0.3                  # cycles per frame
    rotation_deg: float = 0.0                     # slow rotation sweep of target crops
    scale_jitter: float = 0.0                     # max |scale-1| of target crops
    # Reference-crop roll jitter: a rolling reference camera is what makes the
    # stitching paths differ per control point (target-side jitter cancels
    # out of the path algebra exactly). Pivoting the roll inside the overlap
    # region keeps overlap vertices nearly still while the far edge swings.
    ref_rotation_shake_deg: float = 0.0
    ref_roll_pivot_overlap: bool = False
    quantize_offsets: bool = False                # integer translations only

    def __post_init__(self):
        if not 0.2 < self.overlap < 0.9:
            raise InvalidSceneError("overlap ratio must be in (0.2, 0.9)")
        if self.n_frames < 2:
            raise InvalidSceneError("need at least 2 frames")
        if self.texture not in ("noise", "checker"):
            raise InvalidSceneError(f"unknown texture {self.texture!r}")
        if abs(self.rotation_deg) > 3.0 or abs(self.ref_rotation_shake_deg) > 3.0:
            raise InvalidSceneError("rotation beyond 3 degrees breaks crop bounds")
        if abs(self.scale_jitter) > 0.03:
            raise InvalidSceneError("scale jitter beyond 3% breaks crop bounds")


@dataclass
class GroundTruth:
    """Closed-form per-frame meshes and the implied stitching trajectory."""

    spatial_motions: list            # MotionField per frame
    temporal_motions: list           # MotionField per frame (index 0 is zero)
    spatial_meshes: list             # ControlGrid per frame
    trajectory: Trajectory           # stitching paths chained from the above


def _latent_image(spec: SceneSpec, rng: np.random.Generator) -> np.ndarray:
    lh, lw = spec.latent_size
    if spec.texture == "noise":
        img = gaussian_filter(rng.standard_normal((lh, lw, spec.channels)),
                              sigma=(2.0, 2.0, 0.0), mode="wrap")
    else:
        ys, xs = np.mgrid[0:lh, 0:lw]
        checker = ((ys // 24 + xs // 24) % 2).astype(np.float64)
        img = np.repeat(checker[:, :, None], spec.channels, axis=2)
        for _ in range(30):
            cy, cx = rng.uniform(0, lh), rng.uniform(0, lw)
            r = rng.uniform(8, 30)
            blob = np.exp(-((ys - cy) ** 2 + (xs - cx) ** 2) / (2 * r * r))
            img += rng.uniform(-0.6, 0.6) * blob[:, :, None]
        img = gaussian_filter(img, sigma=(1.0, 1.0, 0.0))
    img -= img.min()
    img /= max(img.max(), 1e-12)
    return 0.05 + 0.9 * img


def _smooth_path(n: int, amplitude: float, rng: np.random.Generator) -> np.ndarray:
    """Cubic-spline-like smooth 2D wander built from a few random keyframes."""
    if amplitude == 0 or n < 2:
        return np.zeros((n, 2))
    n_keys = max(3, n // 8)
    keys_t = np.linspace(0, n - 1, n_keys)
    keys = rng.uniform(-amplitude, amplitude, (n_keys, 2))
    t = np.arange(n)
    out = np.stack([np.interp(t, keys_t, keys[:, d]) for d in range(2)], axis=1)
    return gaussian_filter(out, sigma=(2.0, 0.0), mode="nearest")


def _shake(n: int, amplitude: float, freq: float,
           rng: np.random.Generator) -> np.ndarray:
    if amplitude == 0:
        return np.zeros((n, 2))
    t = np.arange(n)
    phase = rng.uniform(0, 2 * np.pi, 2)
    wave = np.stack([np.sin(2 * np.pi * freq * t + phase[0]),
                     np.sin(2 * np.pi * freq * t + phase[1])], axis=1)
    jitter = rng.uniform(-0.4, 0.4, (n, 2))
    return amplitude * (wave + jitter)


def _similarity(angle_rad: float, scale: float) -> np.ndarray:
    c, s = np.cos(angle_rad) * scale, np.sin(angle_rad) * scale
    return np.array([[c, -s], [s, c]])


def generate_scene(spec: SceneSpec, seed: int):
    """Render both crop streams and their exact ground truth.

    Returns (ref_frames, tgt_frames, GroundTruth). Raises InvalidSceneError
    when any crop leaves the latent image.
    """
    rng = np.random.default_rng(seed)
    latent = _latent_image(spec, rng)
    lh, lw = spec.latent_size
    fh, fw = spec.frame_size
    n = spec.n_frames

    base = np.array([(lw - fw * (2.0 - spec.overlap)) / 2.0, (lh - fh) / 2.0])
    ref_off = (base[None, :] + _smooth_path(n, spec.drift_px, rng)
               + _shake(n, spec.ref_shake_amplitude, spec.shake_frequency, rng))
    tgt_off = (base[None, :] + np.array([(1.0 - spec.overlap) * fw, 0.0])
               + _smooth_path(n, spec.drift_px, rng)
               + _shake(n, spec.tgt_shake_amplitude, spec.shake_frequency, rng))
    if spec.quantize_offsets:
        ref_off = np.round(ref_off)
        tgt_off = np.round(tgt_off)

    angles = (np.deg2rad(spec.rotation_deg)
              * np.sin(2 * np.pi * 0.05 * np.arange(n) + rng.uniform(0, 2 * np.pi))
              if spec.rotation_deg else np.zeros(n))
    scales = (1.0 + spec.scale_jitter
              * np.sin(2 * np.pi * 0.04 * np.arange(n) + rng.uniform(0, 2 * np.pi))
              if spec.scale_jitter else np.ones(n))
    ref_angles = (np.deg2rad(spec.ref_rotation_shake_deg) * rng.uniform(-1, 1, n)
                  if spec.ref_rotation_shake_deg else np.zeros(n))

    center = np.array([(fw - 1) / 2.0, (fh - 1) / 2.0])
    ref_pivot = center
    if spec.ref_roll_pivot_overlap:
        ref_pivot = np.array([fw * (1.0 - spec.overlap / 2.0), fh / 2.0])
    ys, xs = np.mgrid[0:fh, 0:fw]
    pix = np.stack([xs, ys], axis=-1).astype(np.float64)  # (fh, fw, 2)

    rig = rigid_mesh(spec.grid, fw, fh)
    rig_pts = rig.flat

    ref_frames, tgt_frames = [], []
    spatial_motions, temporal_motions, spatial_meshes = [], [], []
    mats = []

    def crop(transform, offset, pivot):
        rel = pix - pivot
        cx = rel[..., 0] * transform[0, 0] + rel[..., 1] * transform[0, 1] \
            + pivot[0] + offset[0]
        cy = rel[..., 0] * transform[1, 0] + rel[..., 1] * transform[1, 1] \
            + pivot[1] + offset[1]
        if (cx.min() < 0 or cy.min() < 0 or cx.max() > lw - 1 or cy.max() > lh - 1):
            raise InvalidSceneError("crop escapes the latent image")
        return Frame.from_image(bilinear_sample(latent, cx, cy))

    for t in range(n):
        a_ref = _similarity(ref_angles[t], 1.0)
        ref_frames.append(crop(a_ref, ref_off[t], ref_pivot))

        a = _similarity(angles[t], scales[t])
        mats.append((a, a_ref))
        tgt_frames.append(crop(a, tgt_off[t], center))

        # true spatial mesh: target content position in reference coordinates
        rel_pts = rig_pts - center
        latent_rel = rel_pts @ a.T + center + tgt_off[t] - ref_off[t] - ref_pivot
        warped = latent_rel @ np.linalg.inv(a_ref).T + ref_pivot
        mesh_s = ControlGrid(spec.grid, warped.reshape(rig.points.shape))
        spatial_meshes.append(mesh_s)
        spatial_motions.append(MotionField(spec.grid,
                                           mesh_s.points - rig.points))

        # true temporal mesh: frame t content position in frame t-1 coords
        if t == 0:
            temporal_motions.append(MotionField.zero(spec.grid))
        else:
            a_prev = mats[t - 1][0]
            inv_prev = np.linalg.inv(a_prev)
            carried = rel_pts @ a.T + tgt_off[t] - tgt_off[t - 1]
            back = carried @ inv_prev.T + center
            temporal_motions.append(MotionField(spec.grid,
                                                back.reshape(rig.points.shape)
                                                - rig.points))

    # chain the true stitching trajectory through the shared algebra
    stitch = [MotionField.zero(spec.grid)]
    for t in range(1, n):
        stitch.append(stitch_motion(rig, spatial_meshes[t - 1],
                                    spatial_meshes[t],
                                    temporal_motions[t].mesh(rig)))
    truth = GroundTruth(
        spatial_motions=spatial_motions,
        temporal_motions=temporal_motions,
        spatial_meshes=spatial_meshes,
        trajectory=stitch_trajectory(stitch),
    )
    return ref_frames, tgt_frames, truth


def truth_provider(truth: GroundTruth) -> OracleMotionProvider:
    """Wrap generated ground truth as an oracle motion provider."""
    return oracle_provider(truth.spatial_motions, truth.temporal_motions)
