"""
Synthetic sequence module for desk-scale tracking runs.

Generates and stores:
- Seeded textured targets composited on a blurred textured background
- Static, linear, and toward-boundary motion with integer displacements,
  optionally with the background panning along
- Ground-truth boxes, per-frame clipping flags, and a directory format
  (CIRT frames + groundtruth.txt)
Also evaluates tracking logs against ground truth (centre error, IoU,
success rate).
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import cv2
import numpy as np
import pandas as pd

from cir_errors import SequenceError
from output_models import Box, EvaluationMetrics, TrackLogEntry
from tensor_kernels import Tensor, load_tensor, save_tensor

logger = logging.getLogger(__name__)

MOTION_MODES = ("static", "linear", "toward-boundary")

# Eight compass directions for the toward-boundary drift.
COMPASS = ((1, 0), (1, 1), (0, 1), (-1, 1), (-1, 0), (-1, -1), (0, -1), (1, -1))

GROUND_TRUTH_FILE = "groundtruth.txt"
GROUND_TRUTH_COLUMNS = ["frame", "cx", "cy", "w", "h"]


@dataclass
class SequenceConfig:
    """Rendering and motion parameters of a synthetic sequence."""
    frame_size: Tuple[int, int] = (384, 384)  # (height, width)
    target_size: Tuple[int, int] = (48, 48)  # (width, height)
    num_frames: int = 10
    channels: int = 1
    motion: str = "static"
    velocity: Tuple[int, int] = (0, 0)  # px per frame, linear mode
    drift_step: int = 8  # px per frame, toward-boundary mode
    start_center: Optional[Tuple[int, int]] = None  # (x, y); frame centre if None
    background: str = "textured"  # or "zero"
    background_blur: int = 9  # Gaussian kernel side, odd
    background_level: float = 0.5  # background intensities lie in [0, level]
    background_motion: bool = False  # background pans with the target (textured only)


@dataclass
class SyntheticSequence:
    """Frames plus per-frame target boxes."""
    frames: List[Tensor]
    ground_truth: List[Box]
    clipped: List[bool] = field(default_factory=list)
    seed: Optional[int] = None
    direction: Tuple[int, int] = (0, 0)  # drift direction of toward-boundary mode
    config: Optional[SequenceConfig] = None

    def __len__(self) -> int:
        return len(self.frames)


def _validate(config: SequenceConfig) -> None:
    fh, fw = config.frame_size
    tw, th = config.target_size
    if min(fh, fw, tw, th) < 1 or config.channels < 1:
        raise SequenceError("sizes and channels must be positive",
                            frame=config.frame_size, target=config.target_size)
    if config.num_frames < 1:
        raise SequenceError("sequence needs at least one frame", frames=config.num_frames)
    if tw > fw or th > fh:
        raise SequenceError("target larger than frame",
                            frame=config.frame_size, target=config.target_size)
    if config.motion not in MOTION_MODES:
        raise SequenceError(f"unknown motion mode '{config.motion}'",
                            known=",".join(MOTION_MODES))
    if config.background not in ("textured", "zero"):
        raise SequenceError(f"unknown background '{config.background}'")
    if config.background_blur < 1 or config.background_blur % 2 == 0:
        raise SequenceError("background blur must be an odd positive size",
                            blur=config.background_blur)


def _trajectory(config: SequenceConfig, rng: np.random.Generator
                ) -> Tuple[List[Tuple[int, int]], Tuple[int, int]]:
    fh, fw = config.frame_size
    start = config.start_center or (fw // 2, fh // 2)
    if config.motion == "static":
        step = (0, 0)
    elif config.motion == "linear":
        step = tuple(int(v) for v in config.velocity)
    else:
        direction = COMPASS[int(rng.integers(len(COMPASS)))]
        step = (direction[0] * config.drift_step, direction[1] * config.drift_step)
    centers = [(start[0] + i * step[0], start[1] + i * step[1])
               for i in range(config.num_frames)]
    direction = (int(np.sign(step[0])), int(np.sign(step[1])))
    return centers, direction


def _render(background: np.ndarray, target: np.ndarray,
            center: Tuple[int, int]) -> Tuple[np.ndarray, bool]:
    """Paste `target` (C, th, tw) with its centre pixel at `center`."""
    frame = background.copy()
    _, fh, fw = frame.shape
    _, th, tw = target.shape
    x0 = center[0] - (tw - 1) // 2
    y0 = center[1] - (th - 1) // 2
    fx0, fy0 = max(0, x0), max(0, y0)
    fx1, fy1 = min(fw, x0 + tw), min(fh, y0 + th)
    clipped = (fx0, fy0, fx1, fy1) != (x0, y0, x0 + tw, y0 + th)
    if fx1 > fx0 and fy1 > fy0:
        frame[:, fy0:fy1, fx0:fx1] = target[:, fy0 - y0:fy1 - y0, fx0 - x0:fx1 - x0]
    return frame, clipped


def generate(seed: int, config: Optional[SequenceConfig] = None) -> SyntheticSequence:
    """
    Render a seeded sequence.

    The target texture is fixed across frames; only its position changes.
    """
    config = config or SequenceConfig()
    _validate(config)
    rng = np.random.default_rng(seed)
    fh, fw = config.frame_size
    tw, th = config.target_size
    c = config.channels

    centers, direction = None, None
    margin = 0
    if config.background_motion:
        centers, direction = _trajectory(config, rng)
        margin = max(max(abs(x - centers[0][0]), abs(y - centers[0][1])) for x, y in centers)

    if config.background == "zero":
        background = np.zeros((c, fh + 2 * margin, fw + 2 * margin), dtype=np.float32)
    else:
        noise = rng.uniform(0.0, 1.0, size=(c, fh + 2 * margin, fw + 2 * margin)).astype(np.float32)
        k = config.background_blur
        blurred = np.stack([cv2.GaussianBlur(plane, (k, k), 0) for plane in noise])
        lo, hi = blurred.min(), blurred.max()
        background = ((blurred - lo) / max(hi - lo, 1e-6) * config.background_level
                      ).astype(np.float32)
    target = rng.uniform(0.0, 1.0, size=(c, th, tw)).astype(np.float32)

    if centers is None:
        centers, direction = _trajectory(config, rng)
    frames, boxes, clipped = [], [], []
    for cx, cy in centers:
        view = background
        if config.background_motion:
            # frame i is frame 0 translated by the target displacement
            x0 = margin - (cx - centers[0][0])
            y0 = margin - (cy - centers[0][1])
            view = background[:, y0:y0 + fh, x0:x0 + fw]
        image, was_clipped = _render(view, target, (cx, cy))
        frames.append(Tensor(image))
        # box centre in continuous coordinates of the pasted pixels
        boxes.append(Box(cx - (tw - 1) // 2 + (tw - 1) / 2.0,
                         cy - (th - 1) // 2 + (th - 1) / 2.0, float(tw), float(th)))
        clipped.append(was_clipped)
    if any(clipped):
        logger.info("seed %d: %d of %d frames have a clipped target",
                    seed, sum(clipped), len(clipped))
    return SyntheticSequence(frames, boxes, clipped, seed, direction, config)


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

def iou(a: Box, b: Box) -> float:
    """Intersection over union of two boxes; 0 for disjoint or empty boxes."""
    iw = min(a.x1, b.x1) - max(a.x0, b.x0)
    ih = min(a.y1, b.y1) - max(a.y0, b.y0)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = a.area + b.area - inter
    return float(inter / union) if union > 0 else 0.0


def center_error(a: Box, b: Box) -> float:
    return float(np.hypot(a.cx - b.cx, a.cy - b.cy))


def _as_box(item: Union[Box, TrackLogEntry]) -> Box:
    if isinstance(item, Box):
        return item
    return Box(item.cx, item.cy, item.w, item.h)


def evaluate(track_log: Sequence[Union[Box, TrackLogEntry]],
             ground_truth: Sequence[Box],
             success_threshold: float = 0.5) -> EvaluationMetrics:
    """Mean centre error, mean IoU and success rate over paired frames."""
    if len(track_log) != len(ground_truth):
        raise SequenceError("track log and ground truth differ in length",
                            track=len(track_log), truth=len(ground_truth))
    if not ground_truth:
        raise SequenceError("nothing to evaluate")
    predicted = [_as_box(item) for item in track_log]
    errors = [center_error(p, g) for p, g in zip(predicted, ground_truth)]
    overlaps = [iou(p, g) for p, g in zip(predicted, ground_truth)]
    return EvaluationMetrics(
        frames=len(errors),
        mean_center_error=float(np.mean(errors)),
        mean_iou=float(np.mean(overlaps)),
        success_rate=float(np.mean([o >= success_threshold for o in overlaps])),
        success_threshold=success_threshold,
        center_errors=errors,
        ious=overlaps,
    )


# ---------------------------------------------------------------------------
# Directory format
# ---------------------------------------------------------------------------

def _frame_name(index: int) -> str:
    return f"frame_{index:05d}.cirt"


def write_ground_truth(boxes: Sequence[Box], path: Union[str, Path]) -> None:
    df = pd.DataFrame([{"frame": i, "cx": b.cx, "cy": b.cy, "w": b.w, "h": b.h}
                       for i, b in enumerate(boxes)], columns=GROUND_TRUTH_COLUMNS)
    df.to_csv(path, sep="\t", header=False, index=False)


def read_ground_truth(path: Union[str, Path]) -> List[Box]:
    df = pd.read_csv(path, sep="\t", header=None, names=GROUND_TRUTH_COLUMNS)
    df = df.sort_values("frame")
    return [Box(float(r.cx), float(r.cy), float(r.w), float(r.h))
            for r in df.itertuples(index=False)]


def save_sequence(sequence: SyntheticSequence, directory: Union[str, Path]) -> Path:
    """Write frames as CIRT files plus groundtruth.txt."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for i, frame in enumerate(sequence.frames):
        save_tensor(directory / _frame_name(i), frame)
    write_ground_truth(sequence.ground_truth, directory / GROUND_TRUTH_FILE)
    logger.info("Saved %d frames to %s", len(sequence), directory)
    return directory


def load_sequence(directory: Union[str, Path]) -> SyntheticSequence:
    directory = Path(directory)
    truth_path = directory / GROUND_TRUTH_FILE
    if not truth_path.exists():
        raise SequenceError("sequence directory has no ground-truth file",
                            path=str(directory))
    boxes = read_ground_truth(truth_path)
    frames = []
    for i in range(len(boxes)):
        path = directory / _frame_name(i)
        if not path.exists():
            raise SequenceError("missing frame file", path=str(path))
        frames.append(load_tensor(path))
    return SyntheticSequence(frames, boxes, [False] * len(frames))


if __name__ == "__main__":
    seq = generate(0, SequenceConfig(motion="toward-boundary", num_frames=5))
    print(f"direction {seq.direction}")
    for i, box in enumerate(seq.ground_truth):
        print(f"  frame {i}: centre ({box.cx:.1f}, {box.cy:.1f}) clipped={seq.clipped[i]}")
