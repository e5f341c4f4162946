"""Alignment, distortion, and stability scores for stitched videos."""

from __future__ import annotations

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import UndefinedMetricError
from .grid_warp import Frame
from .objectives import distortion_loss
from .smoothing import smoothness_term

PSNR_CAP_DB = 99.0
MIN_OVERLAP_FRACTION = 0.01

SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
SSIM_RANGE = 1.0


def psnr_masked(a: np.ndarray, b: np.ndarray, mask: np.ndarray) -> float:
    """PSNR over masked pixels for signals in [0, 1]; capped at 99 dB."""
    if mask.sum() == 0:
        raise UndefinedMetricError("empty mask for PSNR")
    diff = (a - b)[mask]
    mse = float(np.mean(diff * diff))
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(float(-10.0 * np.log10(mse)), PSNR_CAP_DB)


def ssim_masked(a: np.ndarray, b: np.ndarray, mask: np.ndarray) -> float:
    """Mean SSIM over masked pixels, Gaussian window sigma 1.5.

    Both images are zeroed outside the mask first, so identical signals score
    exactly 1 regardless of the surroundings.
    """
    if mask.sum() == 0:
        raise UndefinedMetricError("empty mask for SSIM")
    if a.ndim == 3:
        vals = [ssim_masked(a[:, :, c], b[:, :, c], mask) for c in range(a.shape[2])]
        return float(np.mean(vals))
    x = np.where(mask, a, 0.0)
    y = np.where(mask, b, 0.0)
    c1 = (SSIM_K1 * SSIM_RANGE) ** 2
    c2 = (SSIM_K2 * SSIM_RANGE) ** 2
    blur = lambda v: gaussian_filter(v, SSIM_SIGMA, truncate=3.5)
    mu_x = blur(x)
    mu_y = blur(y)
    xx = blur(x * x) - mu_x * mu_x
    yy = blur(y * y) - mu_y * mu_y
    xy = blur(x * y) - mu_x * mu_y
    num = (2 * mu_x * mu_y + c1) * (2 * xy + c2)
    den = (mu_x**2 + mu_y**2 + c1) * (xx + yy + c2)
    ssim_map = num / den
    return float(ssim_map[mask].mean())


def alignment_score(ref_frames, warped_tgt_frames):
    """Mean PSNR and SSIM over the mutual-valid region of each frame pair.

    Frames whose overlap covers less than 1% of the canvas are skipped; if no
    frame qualifies the metric is undefined.
    """
    if len(ref_frames) != len(warped_tgt_frames):
        raise ValueError("frame lists must have equal length")
    psnrs, ssims = [], []
    for ref, warped in zip(ref_frames, warped_tgt_frames):
        both = ref.mask & warped.mask
        if both.sum() < MIN_OVERLAP_FRACTION * both.size:
            continue
        psnrs.append(psnr_masked(ref.image, warped.image, both))
        ssims.append(ssim_masked(ref.image, warped.image, both))
    if not psnrs:
        raise UndefinedMetricError("no frame has a usable overlap")
    return float(np.mean(psnrs)), float(np.mean(ssims))


def distortion_score(per_video_meshes, sizes) -> float:
    """Mean over videos of the worst per-frame mesh distortion.

    `per_video_meshes` is a list (per video) of mesh sequences; `sizes` the
    matching (width, height) of each video's frames.
    """
    if not per_video_meshes:
        raise ValueError("need at least one video")
    maxima = []
    for meshes, (width, height) in zip(per_video_meshes, sizes):
        if not len(meshes):
            raise ValueError("each video needs at least one mesh")
        maxima.append(max(distortion_loss(m, width, height) for m in meshes))
    return float(np.mean(maxima))


def stability_score(per_video_positions, betas) -> float:
    """Mean over videos of the average windowed smoothness of emitted paths.

    Each video contributes the mean of the smoothness term over every
    consecutive window (length 2 * len(betas) + 1) of its emitted position
    sequence; lower is stabler. Videos shorter than one window are skipped.
    """
    window = 2 * len(tuple(betas)) + 1
    scores = []
    for positions in per_video_positions:
        positions = np.asarray(positions, dtype=np.float64)
        n = positions.shape[0]
        if n < window:
            continue
        vals = [smoothness_term(positions[i:i + window], betas)
                for i in range(n - window + 1)]
        scores.append(float(np.mean(vals)))
    if not scores:
        raise UndefinedMetricError(
            f"every video is shorter than one window ({window} frames)")
    return float(np.mean(scores))
