"""
Matching Engine for Siamese tracking with CIR backbones.

Implements:
- Cross-correlation of exemplar and search embeddings plus a uniform bias
- The logistic loss value over a +/-1 label map
- Patch extraction around a target (cv2 remap on a shared sampling step,
  mean-value context fill)
- Sub-cell peak refinement, multi-scale tracking step and a small tracker wrapper
- Tab-separated tracking logs
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import cv2
import numpy as np
import pandas as pd

from analyzer_engine import output_geometry
from cir_errors import MatchError
from layer_graph import Graph, forward
from output_models import (
    Box, LabelMap, ResponseMap, TrackLogEntry, TrackState, TrackStepResult
)
from tensor_kernels import ConvParams, Tensor, conv2d

logger = logging.getLogger(__name__)

TRACK_LOG_COLUMNS = ["frame", "cx", "cy", "w", "h", "scale", "peak"]


@dataclass
class TrackerConfig:
    """Test-time constants of the Siamese tracker."""
    exemplar_size: int = 127
    search_size: int = 255
    scale_step: float = 1.0482
    num_scales: int = 3
    scale_lr: float = 0.3629  # linear interpolation factor for scale updates
    search_factor: float = 2.0  # search side = factor x longest target side
    cosine_window: bool = False
    window_influence: float = 0.176
    response_upsample: int = 1
    scale_penalty: float = 1.0  # multiplies peaks of non-unit scales
    bias: float = 0.0  # b of the matching head


def cross_correlate(z_feat: Tensor, x_feat: Tensor, b: float = 0.0,
                    stride: float = 1.0, offset: float = 0.0) -> ResponseMap:
    """
    Slide the exemplar embedding over the search embedding.

    Score at displacement (r, c) is the inner product of z_feat with the
    aligned x_feat window, plus b.
    """
    if z_feat.rank != 3 or x_feat.rank != 3:
        raise MatchError("cross_correlate expects rank-3 embeddings",
                         z=z_feat.shape, x=x_feat.shape)
    if z_feat.channels != x_feat.channels:
        raise MatchError("exemplar and search embeddings differ in channels",
                         z=z_feat.channels, x=x_feat.channels)
    if z_feat.height > x_feat.height or z_feat.width > x_feat.width:
        raise MatchError("exemplar embedding larger than search embedding",
                         z=z_feat.spatial, x=x_feat.spatial)
    params = ConvParams(
        out_channels=1, in_channels=z_feat.channels,
        kernel_h=z_feat.height, kernel_w=z_feat.width,
        stride=1, padding=0, groups=1, weights=z_feat.numpy(),
    )
    scores = conv2d(x_feat, params).numpy()[0].astype(np.float64) + b
    return ResponseMap(scores=scores, bias=b, offset=offset, stride=stride)


def logistic_loss(y: Union[LabelMap, np.ndarray], f: Union[ResponseMap, np.ndarray]) -> float:
    """Mean over cells of log(1 + exp(-y * f))."""
    labels = np.asarray(y.values if isinstance(y, LabelMap) else y, dtype=np.float64)
    scores = np.asarray(f.scores if isinstance(f, ResponseMap) else f, dtype=np.float64)
    if labels.shape != scores.shape:
        raise MatchError("label and response shapes differ",
                         labels=labels.shape, scores=scores.shape)
    return float(np.mean(np.logaddexp(0.0, -labels * scores)))


def make_label_map(shape: Tuple[int, int], radius: float = 2.0,
                   center: Optional[Tuple[float, float]] = None) -> LabelMap:
    """+1 within `radius` cells of `center` (default: map centre), -1 elsewhere."""
    h, w = shape
    if h < 1 or w < 1:
        raise MatchError("label map shape must be positive", shape=shape)
    if center is None:
        center = ((h - 1) / 2.0, (w - 1) / 2.0)
    rows, cols = np.mgrid[0:h, 0:w]
    dist = np.hypot(rows - center[0], cols - center[1])
    values = np.where(dist <= radius, 1.0, -1.0)
    return LabelMap(values=values, positive_radius=radius, center=center)


def scale_factors(step: float = 1.0482, num: int = 3) -> np.ndarray:
    """step ** {-(num//2), ..., num//2}."""
    exponents = np.arange(num) - num // 2
    return step ** exponents.astype(np.float64)


def cosine_window(shape: Tuple[int, int]) -> np.ndarray:
    window = np.outer(np.hanning(shape[0]), np.hanning(shape[1]))
    return window / window.sum()


def _parabola_offset(left: float, center: float, right: float) -> float:
    divisor = 2 * center - right - left
    return 0.0 if divisor <= 0 else 0.5 * (right - left) / divisor


def refine_peak(scores: np.ndarray) -> Tuple[float, float]:
    """
    (row, col) of the response maximum refined to sub-cell precision.

    A parabola through the peak and its two neighbours is fitted along each
    axis. Peaks on the map border keep their integer coordinate on that axis.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 2 or scores.size == 0:
        raise MatchError("response must be a non-empty 2-D map", shape=scores.shape)
    h, w = scores.shape
    row, col = divmod(int(np.argmax(scores)), w)
    peak = scores[row, col]
    r, c = float(row), float(col)
    if 0 < row < h - 1:
        r += _parabola_offset(scores[row - 1, col], peak, scores[row + 1, col])
    if 0 < col < w - 1:
        c += _parabola_offset(scores[row, col - 1], peak, scores[row, col + 1])
    return r, c


def extract_patch(frame: np.ndarray, center: Tuple[float, float], side: float,
                  out_size: int) -> Tuple[np.ndarray, bool]:
    """
    Square patch of `side` frame pixels centred at (x, y), sampled on an
    out_size grid.

    Output pixel j reads frame coordinate center + (j - (out_size - 1) / 2) * step
    with step = side / out_size, so crops of different sizes taken with the
    same step agree at their centres. Context outside the frame is filled with
    the per-channel frame mean. Returns (patch of shape (C, out_size, out_size),
    clipped flag). A unit step on integer coordinates copies pixels without
    resampling.
    """
    if frame.ndim != 3:
        raise MatchError("frame must be (channels, height, width)", shape=frame.shape)
    if side <= 0 or out_size < 1:
        raise MatchError("patch side and size must be positive", side=side, size=out_size)
    c, h, w = frame.shape
    step = side / out_size
    half = (out_size - 1) / 2.0
    x0 = center[0] - half * step
    y0 = center[1] - half * step
    x1 = x0 + (out_size - 1) * step
    y1 = y0 + (out_size - 1) * step
    clipped = bool(x0 < 0 or y0 < 0 or x1 > w - 1 or y1 > h - 1)
    means = frame.reshape(c, -1).mean(axis=1)

    if step == 1.0 and float(x0).is_integer() and float(y0).is_integer():
        ix, iy = int(x0), int(y0)
        patch = np.empty((c, out_size, out_size), dtype=np.float32)
        patch[:] = means[:, None, None]
        fx0, fy0 = max(0, ix), max(0, iy)
        fx1, fy1 = min(w, ix + out_size), min(h, iy + out_size)
        if fx1 > fx0 and fy1 > fy0:
            patch[:, fy0 - iy:fy1 - iy, fx0 - ix:fx1 - ix] = frame[:, fy0:fy1, fx0:fx1]
        return patch, clipped

    offsets = (np.arange(out_size) - half) * step
    map_x, map_y = np.meshgrid((center[0] + offsets).astype(np.float32),
                               (center[1] + offsets).astype(np.float32))
    planes = [cv2.remap(np.ascontiguousarray(frame[i], dtype=np.float32), map_x, map_y,
                        interpolation=cv2.INTER_LINEAR, borderMode=cv2.BORDER_CONSTANT,
                        borderValue=float(means[i]))
              for i in range(c)]
    return np.ascontiguousarray(np.stack(planes), dtype=np.float32), clipped


class SiameseModel:
    """Backbone with frozen weights plus the geometry needed to read responses."""

    def __init__(self, graph: Graph, config: Optional[TrackerConfig] = None):
        self.graph = graph
        self.config = config or TrackerConfig()
        geo = output_geometry(graph, self.config.exemplar_size)
        self.stride = geo.stride
        self.exemplar_feat_size = geo.out_size
        # search pixel aligned with response cell 0 (exemplar centre at zero displacement)
        self.response_offset = (self.config.exemplar_size - 1) / 2.0

    @property
    def in_channels(self) -> int:
        return self.graph.nodes[self.graph.source].params["channels"]

    def embed(self, patches: np.ndarray) -> np.ndarray:
        """Embed a (C, H, W) patch or an (N, C, H, W) batch."""
        out = forward(self.graph, Tensor(patches))
        return out.numpy()

    def respond(self, z_feat: Tensor, x_feat: Tensor) -> ResponseMap:
        return cross_correlate(z_feat, x_feat, self.config.bias,
                               stride=self.stride, offset=self.response_offset)


def _upsample(response: ResponseMap, factor: int) -> ResponseMap:
    if factor <= 1:
        return response
    h, w = response.shape
    scores = cv2.resize(response.scores.astype(np.float32), (w * factor, h * factor),
                        interpolation=cv2.INTER_CUBIC).astype(np.float64)
    # pixel-centre convention of cv2.resize
    offset = response.offset + response.stride * (0.5 / factor - 0.5)
    return ResponseMap(scores, response.bias, offset, response.stride / factor)


def _windowed(scores: np.ndarray, influence: float) -> np.ndarray:
    s = scores - scores.min()
    total = s.sum()
    if total > 0:
        s = s / total
    return (1.0 - influence) * s + influence * cosine_window(scores.shape)


def search_side(state: TrackState, config: TrackerConfig) -> float:
    return config.search_factor * max(state.target_size) * state.scale


def sampling_step(state: TrackState, config: TrackerConfig) -> float:
    """Frame pixels per patch pixel, shared by the exemplar and the unit-scale search crop."""
    return search_side(state, config) / config.search_size


def track_step(state: TrackState, frame: Tensor, model: SiameseModel,
               z_feat: Tensor, config: Optional[TrackerConfig] = None) -> TrackStepResult:
    """
    Locate the target in `frame` over the scale pyramid and return the new state.

    The exemplar embedding z_feat is computed once on the first frame.
    """
    config = config or model.config
    if frame.rank != 3 or frame.channels != model.in_channels:
        raise MatchError("frame does not match backbone input",
                         frame=frame.shape, channels=model.in_channels)
    image = frame.numpy()
    factors = scale_factors(config.scale_step, config.num_scales)
    steps = sampling_step(state, config) * factors
    patches = [extract_patch(image, state.center, s * config.search_size, config.search_size)[0]
               for s in steps]
    feats = model.embed(np.stack(patches))

    responses = []
    peaks = []
    for i, f in enumerate(factors):
        response = _upsample(model.respond(z_feat, Tensor(feats[i])), config.response_upsample)
        responses.append(response)
        penalty = 1.0 if np.isclose(f, 1.0) else config.scale_penalty
        peaks.append(response.peak_score * penalty)
    best = int(np.argmax(peaks))

    chosen = responses[best]
    scores = chosen.scores
    if config.cosine_window:
        scores = _windowed(scores, config.window_influence)
    row, col = divmod(int(np.argmax(scores)), scores.shape[1])
    sx, sy = chosen.to_search_pixel(row, col)
    centre = (config.search_size - 1) / 2.0
    px_per_search = steps[best]
    cx = state.center[0] + (sx - centre) * px_per_search
    cy = state.center[1] + (sy - centre) * px_per_search

    h, w = frame.spatial
    clamped_x = float(np.clip(cx, 0, w - 1))
    clamped_y = float(np.clip(cy, 0, h - 1))
    clamped = clamped_x != cx or clamped_y != cy
    if clamped:
        logger.warning("target centre (%.1f, %.1f) left the frame; clamped", cx, cy)

    new_scale = (1 - config.scale_lr) * state.scale + config.scale_lr * state.scale * factors[best]
    new_state = TrackState((clamped_x, clamped_y), state.target_size, new_scale)
    logger.debug("scale %d/%d peak %.4f -> centre (%.1f, %.1f) scale %.4f",
                 best, len(factors), chosen.peak_score, clamped_x, clamped_y, new_scale)
    return TrackStepResult(new_state, responses, best, float(peaks[best]), clamped)


class SiameseTracker:
    """Fully-convolutional Siamese tracker without online updates."""

    def __init__(self, model: SiameseModel, config: Optional[TrackerConfig] = None):
        self.model = model
        self.config = config or model.config
        self.state: Optional[TrackState] = None
        self.z_feat: Optional[Tensor] = None

    def init(self, frame: Tensor, box: Box) -> None:
        """Embed the exemplar around `box` on the first frame."""
        cfg = self.config
        self.state = TrackState((box.cx, box.cy), (box.w, box.h), 1.0)
        side = sampling_step(self.state, cfg) * cfg.exemplar_size
        patch, clipped = extract_patch(frame.numpy(), (box.cx, box.cy), side, cfg.exemplar_size)
        if clipped:
            logger.info("exemplar crop extends outside the first frame")
        self.z_feat = Tensor(self.model.embed(patch))

    def update(self, frame: Tensor) -> TrackStepResult:
        if self.state is None or self.z_feat is None:
            raise MatchError("tracker used before init")
        result = track_step(self.state, frame, self.model, self.z_feat, self.config)
        self.state = result.state
        return result

    def current_box(self) -> Box:
        w, h = self.state.target_size
        return Box(self.state.center[0], self.state.center[1],
                   w * self.state.scale, h * self.state.scale)

    def track_sequence(self, frames: Sequence[Tensor], init_box: Box) -> List[TrackLogEntry]:
        """Track through `frames`; frame 0 is the initialization frame."""
        if not frames:
            raise MatchError("sequence has no frames")
        self.init(frames[0], init_box)
        log = [TrackLogEntry(0, init_box.cx, init_box.cy, init_box.w, init_box.h, 1.0, 0.0)]
        for index, frame in enumerate(frames[1:], 1):
            result = self.update(frame)
            box = self.current_box()
            log.append(TrackLogEntry(index, box.cx, box.cy, box.w, box.h,
                                     result.state.scale, result.peak_score))
        logger.info("Tracked %d frames", len(log))
        return log


# ---------------------------------------------------------------------------
# Tracking log
# ---------------------------------------------------------------------------

def track_log_frame(entries: Sequence[TrackLogEntry]) -> pd.DataFrame:
    return pd.DataFrame([vars(e) for e in entries], columns=TRACK_LOG_COLUMNS)


def write_track_log(entries: Sequence[TrackLogEntry], path: Union[str, Path]) -> None:
    """One tab-separated line per frame, no header."""
    track_log_frame(entries).to_csv(path, sep="\t", header=False, index=False,
                                    float_format="%.4f")


def read_track_log(path: Union[str, Path]) -> List[TrackLogEntry]:
    df = pd.read_csv(path, sep="\t", header=None, names=TRACK_LOG_COLUMNS)
    return [TrackLogEntry(int(r.frame), float(r.cx), float(r.cy), float(r.w),
                          float(r.h), float(r.scale), float(r.peak))
            for r in df.itertuples(index=False)]
