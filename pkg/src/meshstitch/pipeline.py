"""End-to-end online and offline stitching.

The online path keeps a sliding window of stitching-path samples: each pushed
frame pair is estimated, extends the trajectory, and (once the window is
full) triggers one window smoothing solve; the window's last frame is
rendered with its corrected spatial mesh and blended with the reference.
Output starts when the window first fills, at which point the frames seen so
far are also emitted unsmoothed (flagged as warm-up) so the output stream has
one frame per input frame.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .errors import MeshStitchError
from .grid_warp import ControlGrid, Frame, GridShape, rigid_mesh, warp_frame
from .motion import MotionProvider
from .motion_types import MotionField
from .objectives import WarpObjectiveConfig
from .smoothing import SmoothingConfig, smooth_window
from .trajectory import overlap_mask, stitch_motion

DEFAULT_CANVAS_PAD = 16


@dataclass(frozen=True)
class CanvasSpec:
    """Fixed output canvas; the reference frame sits at `offset`."""

    height: int
    width: int
    offset: tuple[int, int]  # (ox, oy), canvas = reference coords + offset


@dataclass
class PipelineConfig:
    grid: GridShape = field(default_factory=lambda: GridShape(6, 8))
    objectives: WarpObjectiveConfig = field(default_factory=WarpObjectiveConfig)
    smoothing: SmoothingConfig = field(default_factory=SmoothingConfig)
    canvas_pad: int = DEFAULT_CANVAS_PAD
    render_lattice_step: int = 4


@dataclass
class StitchedFrame:
    """One output frame plus the bookkeeping the metrics need."""

    index: int                      # 1-based input time
    composite: Frame                # blended canvas
    mesh: ControlGrid               # spatial mesh used for rendering
    raw_position: np.ndarray        # stitching-path sample S(t), (U+1, V+1, 2)
    smooth_position: np.ndarray     # smoothed sample; equals raw during warm-up
    warmup: bool
    degraded: bool
    timings_ms: dict
    objectives: dict
    window_paths: np.ndarray | None = None  # accepted window paths (online mode)


def compute_canvas(meshes, ref_size: tuple[int, int],
                   pad: int = DEFAULT_CANVAS_PAD) -> CanvasSpec:
    """Bounding box of the reference frame and all warped mesh extents."""
    if not meshes:
        raise ValueError("need at least one spatial mesh")
    ref_h, ref_w = ref_size
    min_x, min_y = 0.0, 0.0
    max_x, max_y = float(ref_w), float(ref_h)
    for mesh in meshes:
        pts = mesh.flat
        min_x = min(min_x, pts[:, 0].min())
        min_y = min(min_y, pts[:, 1].min())
        max_x = max(max_x, pts[:, 0].max())
        max_y = max(max_y, pts[:, 1].max())
    lo_x = int(np.floor(min_x)) - pad
    lo_y = int(np.floor(min_y)) - pad
    hi_x = int(np.ceil(max_x)) + pad
    hi_y = int(np.ceil(max_y)) + pad
    return CanvasSpec(height=hi_y - lo_y, width=hi_x - lo_x,
                      offset=(-lo_x, -lo_y))


def place_on_canvas(frame: Frame, canvas: CanvasSpec) -> Frame:
    """Paste a frame at the canvas offset without resampling."""
    ox, oy = canvas.offset
    image = np.zeros((canvas.height, canvas.width, frame.channels))
    mask = np.zeros((canvas.height, canvas.width), dtype=bool)
    image[oy:oy + frame.height, ox:ox + frame.width] = frame.image
    mask[oy:oy + frame.height, ox:ox + frame.width] = frame.mask
    return Frame(image=image, mask=mask)


def blend_average(ref_on_canvas: Frame, warped_tgt: Frame) -> Frame:
    """Pixel mean where both frames are valid, pass-through where one is."""
    if ref_on_canvas.image.shape != warped_tgt.image.shape:
        raise ValueError("frames must share the canvas size")
    m_ref = ref_on_canvas.mask
    m_tgt = warped_tgt.mask
    both = m_ref & m_tgt
    image = np.where(m_ref[..., None], ref_on_canvas.image, 0.0)
    image = np.where(m_tgt[..., None], warped_tgt.image, image)
    image[both] = 0.5 * (ref_on_canvas.image[both] + warped_tgt.image[both])
    return Frame(image=image, mask=m_ref | m_tgt)


@dataclass
class StreamState:
    """Mutable state of one online stitching stream."""

    frames: list = field(default_factory=list)        # (ref, tgt) ring buffer
    spatial_meshes: list = field(default_factory=list)  # ControlGrid per frame
    spatial_motions: list = field(default_factory=list)
    stitch_motions: list = field(default_factory=list)  # s(t) arrays
    positions: list = field(default_factory=list)     # S(t) arrays
    overlap_flags: list = field(default_factory=list)
    prev_window_shat: np.ndarray | None = None
    prev_window_delta: np.ndarray | None = None
    canvas: CanvasSpec | None = None
    t: int = 0
    degraded_frames: int = 0


class VideoStitcher:
    """Online stitcher with a one-frame output latency after warm-up."""

    def __init__(self, provider: MotionProvider, cfg: PipelineConfig | None = None):
        self.provider = provider
        self.cfg = cfg or PipelineConfig()
        if provider.grid_shape != self.cfg.grid:
            raise ValueError("provider grid does not match pipeline grid")
        self.state = StreamState()
        self._rig: ControlGrid | None = None
        self._frame_hw: tuple[int, int] | None = None

    # -- internals ----------------------------------------------------------

    def _ensure_setup(self, ref: Frame, tgt: Frame):
        if self._rig is None:
            if ref.image.shape != tgt.image.shape:
                raise ValueError("reference and target streams must share a size")
            self._frame_hw = (ref.height, ref.width)
            self._rig = rigid_mesh(self.cfg.grid, ref.width, ref.height)
        elif (ref.height, ref.width) != self._frame_hw:
            raise ValueError("frame size changed mid-stream")

    def _estimate_pair(self, ref: Frame, tgt: Frame, timings: dict) -> bool:
        """Run spatial (and temporal) estimation; returns degraded flag."""
        st = self.state
        degraded = False
        prev_motion = st.spatial_motions[-1] if st.spatial_motions else None

        t0 = time.perf_counter()
        try:
            ms = self.provider.spatial_motion(st.t - 1, ref, tgt, prev_motion)
        except MeshStitchError:
            degraded = True
            ms = prev_motion if prev_motion is not None else MotionField.zero(self.cfg.grid)
        timings["estimate_spatial"] = (time.perf_counter() - t0) * 1e3

        t0 = time.perf_counter()
        if st.t >= 2:
            prev_tgt = st.frames[-1][1]
            try:
                mt = self.provider.temporal_motion(st.t - 1, prev_tgt, tgt)
            except MeshStitchError:
                degraded = True
                mt = MotionField.zero(self.cfg.grid)
        else:
            mt = MotionField.zero(self.cfg.grid)
        timings["estimate_temporal"] = (time.perf_counter() - t0) * 1e3

        self._last_ms = ms
        self._last_mt = mt
        return degraded

    def _extend_trajectory(self, timings: dict):
        st = self.state
        h, w = self._frame_hw
        t0 = time.perf_counter()
        mesh_s = self._last_ms.mesh(self._rig)
        if st.t == 1:
            s_t = np.zeros(self._rig.points.shape)
        else:
            mesh_t = self._last_mt.mesh(self._rig)
            s_t = stitch_motion(self._rig, st.spatial_meshes[-1], mesh_s,
                                mesh_t).displacements
        st.spatial_meshes.append(mesh_s)
        st.spatial_motions.append(self._last_ms)
        st.stitch_motions.append(s_t)
        prev_pos = st.positions[-1] if st.positions else np.zeros_like(s_t)
        st.positions.append(prev_pos + (s_t if st.t > 1 else 0.0))
        st.overlap_flags.append(overlap_mask(mesh_s, w, h).flags)
        timings["trajectory"] = (time.perf_counter() - t0) * 1e3

    def _render_frame(self, tgt: Frame, ref: Frame, mesh: ControlGrid,
                      timings: dict) -> Frame:
        t0 = time.perf_counter()
        warped = warp_frame(self._rig, mesh, tgt,
                            (self.state.canvas.height, self.state.canvas.width),
                            self.state.canvas.offset,
                            lattice_step=self.cfg.render_lattice_step)
        timings["warping"] = (time.perf_counter() - t0) * 1e3
        t0 = time.perf_counter()
        composite = blend_average(place_on_canvas(ref, self.state.canvas), warped)
        timings["blending"] = (time.perf_counter() - t0) * 1e3
        return composite

    def _emit(self, index: int, composite: Frame, mesh: ControlGrid,
              raw_pos, smooth_pos, warmup: bool, degraded: bool,
              timings: dict, objectives: dict) -> StitchedFrame:
        timings["total"] = sum(v for k, v in timings.items() if k != "total")
        return StitchedFrame(index=index, composite=composite, mesh=mesh,
                             raw_position=np.asarray(raw_pos),
                             smooth_position=np.asarray(smooth_pos),
                             warmup=warmup, degraded=degraded,
                             timings_ms=timings, objectives=objectives)

    def _emit_warmups(self) -> list[StitchedFrame]:
        """Render every buffered frame with its raw spatial mesh."""
        st = self.state
        out = []
        for i, (ref, tgt) in enumerate(st.frames[:-1], start=1):
            timings = {}
            mesh = st.spatial_meshes[i - 1]
            composite = self._render_frame(tgt, ref, mesh, timings)
            out.append(self._emit(i, composite, mesh, st.positions[i - 1],
                                  st.positions[i - 1], True, False, timings, {}))
        return out

    # -- public API -----------------------------------------------------------

    def push_frame_pair(self, ref: Frame, tgt: Frame) -> list[StitchedFrame]:
        """Feed one synchronized frame pair; returns newly available output.

        Empty until the sliding window first fills (at which point the
        buffered warm-up frames are emitted together with the first smoothed
        frame); afterwards each push yields exactly one smoothed frame.
        """
        cfg = self.cfg
        st = self.state
        self._ensure_setup(ref, tgt)
        st.t += 1
        timings: dict = {}
        objectives: dict = {}

        degraded = self._estimate_pair(ref, tgt, timings)
        if degraded:
            st.degraded_frames += 1
        self._extend_trajectory(timings)
        st.frames.append((ref, tgt))
        keep = max(cfg.smoothing.window, 12)
        if len(st.frames) > keep:
            st.frames.pop(0)

        n = cfg.smoothing.window
        if st.t < n:
            return []

        out: list[StitchedFrame] = []
        if st.canvas is None:
            st.canvas = compute_canvas(st.spatial_meshes[:n],
                                       self._frame_hw, cfg.canvas_pad)
            out.extend(self._emit_warmups())

        # smooth the trailing window and render its last frame
        t0 = time.perf_counter()
        h, w = self._frame_hw
        window = slice(st.t - n, st.t)
        s_win = np.stack(st.positions[window])
        mesh_win = np.stack([m.points for m in st.spatial_meshes[window]])
        op_win = np.stack(st.overlap_flags[window]).astype(np.float64)
        init = None
        if st.prev_window_delta is not None:
            init = np.concatenate([st.prev_window_delta[1:],
                                   st.prev_window_delta[-1:]])
        result = smooth_window(s_win, mesh_win, op_win, st.prev_window_shat,
                               cfg.smoothing, w, h, init_delta=init)
        st.prev_window_shat = result.s_hat
        st.prev_window_delta = result.increment.delta
        timings["smoothing"] = (time.perf_counter() - t0) * 1e3
        objectives["smooth_init"] = result.objective_init
        objectives["smooth_final"] = result.objective_final

        mesh_hat = ControlGrid(cfg.grid, result.meshes_hat[-1])
        composite = self._render_frame(tgt, ref, mesh_hat, timings)
        frame_out = self._emit(st.t, composite, mesh_hat, s_win[-1],
                               result.s_hat[-1], False, degraded,
                               timings, objectives)
        frame_out.window_paths = result.s_hat
        out.append(frame_out)
        return out

    def flush(self) -> list[StitchedFrame]:
        """Emit raw-rendered frames if the stream ended before one window."""
        st = self.state
        if st.t == 0 or st.t >= self.cfg.smoothing.window:
            return []
        st.canvas = compute_canvas(st.spatial_meshes, self._frame_hw,
                                   self.cfg.canvas_pad)
        out = self._emit_warmups()
        ref, tgt = st.frames[-1]
        timings: dict = {}
        mesh = st.spatial_meshes[-1]
        composite = self._render_frame(tgt, ref, mesh, timings)
        out.append(self._emit(st.t, composite, mesh, st.positions[-1],
                              st.positions[-1], True, False, timings, {}))
        return out


def stitch_online(ref_frames, tgt_frames, provider: MotionProvider,
                  cfg: PipelineConfig | None = None) -> list[StitchedFrame]:
    """Run the online stitcher over full streams and collect the output."""
    if len(ref_frames) != len(tgt_frames):
        raise ValueError("streams must have equal length")
    stitcher = VideoStitcher(provider, cfg)
    out: list[StitchedFrame] = []
    for ref, tgt in zip(ref_frames, tgt_frames):
        out.extend(stitcher.push_frame_pair(ref, tgt))
    out.extend(stitcher.flush())
    return out


def offline_betas(window: int) -> tuple:
    """Geometric midpoint-weight schedule for arbitrary window lengths."""
    return tuple(0.9 * 0.5**j for j in range((window - 1) // 2))


def stitch_offline(ref_frames, tgt_frames, provider: MotionProvider,
                   cfg: PipelineConfig | None = None) -> list[StitchedFrame]:
    """Stitch with one smoothing solve whose window covers the whole video.

    For an even number of frames the window covers frames 2..T (the window
    must be odd); the first frame keeps its raw mesh. Every frame is rendered
    with its corrected spatial mesh.
    """
    if len(ref_frames) != len(tgt_frames):
        raise ValueError("streams must have equal length")
    n_frames = len(ref_frames)
    if n_frames < 3:
        raise ValueError("offline stitching needs at least 3 frames")
    cfg = cfg or PipelineConfig()
    grid = cfg.grid
    if provider.grid_shape != grid:
        raise ValueError("provider grid does not match pipeline grid")

    first = ref_frames[0]
    h, w = first.height, first.width
    rig = rigid_mesh(grid, w, h)

    meshes: list[ControlGrid] = []
    positions: list[np.ndarray] = []
    flags = []
    per_frame: list[dict] = []
    prev_motion = None
    degraded_flags = []
    for t, (ref, tgt) in enumerate(zip(ref_frames, tgt_frames), start=1):
        timings: dict = {}
        degraded = False
        t0 = time.perf_counter()
        try:
            ms = provider.spatial_motion(t - 1, ref, tgt, prev_motion)
        except MeshStitchError:
            degraded = True
            ms = prev_motion if prev_motion is not None else MotionField.zero(grid)
        timings["estimate_spatial"] = (time.perf_counter() - t0) * 1e3
        t0 = time.perf_counter()
        if t >= 2:
            try:
                mt = provider.temporal_motion(t - 1, tgt_frames[t - 2], tgt)
            except MeshStitchError:
                degraded = True
                mt = MotionField.zero(grid)
        else:
            mt = MotionField.zero(grid)
        timings["estimate_temporal"] = (time.perf_counter() - t0) * 1e3

        t0 = time.perf_counter()
        mesh_s = ms.mesh(rig)
        if t == 1:
            s_t = np.zeros(rig.points.shape)
            positions.append(np.zeros(rig.points.shape))
        else:
            s_t = stitch_motion(rig, meshes[-1], mesh_s, mt.mesh(rig)).displacements
            positions.append(positions[-1] + s_t)
        meshes.append(mesh_s)
        flags.append(overlap_mask(mesh_s, w, h).flags)
        timings["trajectory"] = (time.perf_counter() - t0) * 1e3
        per_frame.append(timings)
        degraded_flags.append(degraded)
        prev_motion = ms

    window = n_frames if n_frames % 2 == 1 else n_frames - 1
    start = n_frames - window
    smooth_cfg = SmoothingConfig(
        window=window, weight_data=cfg.smoothing.weight_data,
        weight_smooth=cfg.smoothing.weight_smooth,
        weight_space=cfg.smoothing.weight_space,
        weight_online=cfg.smoothing.weight_online,
        alpha=cfg.smoothing.alpha, betas=offline_betas(window),
        max_iters=cfg.smoothing.max_iters, tolerance=cfg.smoothing.tolerance,
        solver_eps=cfg.smoothing.solver_eps)
    s_win = np.stack(positions[start:])
    mesh_win = np.stack([m.points for m in meshes[start:]])
    op_win = np.stack(flags[start:]).astype(np.float64)
    t0 = time.perf_counter()
    result = smooth_window(s_win, mesh_win, op_win, None, smooth_cfg, w, h)
    smoothing_ms = (time.perf_counter() - t0) * 1e3

    canvas = compute_canvas(meshes, (h, w), cfg.canvas_pad)
    out = []
    for t in range(1, n_frames + 1):
        timings = per_frame[t - 1]
        timings["smoothing"] = smoothing_ms / n_frames if t > start else 0.0
        if t > start:
            mesh_hat = ControlGrid(grid, result.meshes_hat[t - 1 - start])
            smooth_pos = result.s_hat[t - 1 - start]
            warmup = False
        else:
            mesh_hat = meshes[t - 1]
            smooth_pos = positions[t - 1]
            warmup = True
        t0 = time.perf_counter()
        warped = warp_frame(rig, mesh_hat, tgt_frames[t - 1],
                            (canvas.height, canvas.width), canvas.offset,
                            lattice_step=cfg.render_lattice_step)
        timings["warping"] = (time.perf_counter() - t0) * 1e3
        t0 = time.perf_counter()
        composite = blend_average(place_on_canvas(ref_frames[t - 1], canvas), warped)
        timings["blending"] = (time.perf_counter() - t0) * 1e3
        timings["total"] = sum(v for k, v in timings.items() if k != "total")
        out.append(StitchedFrame(
            index=t, composite=composite, mesh=mesh_hat,
            raw_position=positions[t - 1], smooth_position=smooth_pos,
            warmup=warmup, degraded=degraded_flags[t - 1],
            timings_ms=timings,
            objectives={"smooth_init": result.objective_init,
                        "smooth_final": result.objective_final}))
    return out
