"""
Output data models for the CIR toolkit.

Defines structured result types for architecture geometry, guideline
checks, MAC calibration, matching responses, tracking, and the
boundary-bias experiment.
"""

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from cir_errors import MatchError


@dataclass
class Geometry:
    """Static geometry of one node's output."""
    node: str
    stride: int  # input pixels per output cell
    rf_min: int
    rf_max: int
    rf_start: int  # first input pixel of cell 0's widest cone; negative inside padding
    out_h: int
    out_w: int
    padding_mask: np.ndarray = field(repr=False, default=None)  # (out_h, out_w) bool

    def __post_init__(self):
        if self.padding_mask is None:
            self.padding_mask = np.zeros((self.out_h, self.out_w), dtype=bool)

    @property
    def out_size(self) -> Tuple[int, int]:
        return self.out_h, self.out_w

    @property
    def padding_influenced(self) -> int:
        return int(self.padding_mask.sum())

    def cone(self, row: int, col: int) -> Tuple[Tuple[int, int], Tuple[int, int]]:
        """Inclusive (row range, col range) of input pixels cell (row, col) depends on."""
        r0 = self.rf_start + row * self.stride
        c0 = self.rf_start + col * self.stride
        return (r0, r0 + self.rf_max - 1), (c0, c0 + self.rf_max - 1)


@dataclass
class GuidelineCheck:
    """Verdict for one design guideline."""
    name: str
    passed: bool
    message: str


@dataclass
class GuidelineReport:
    """Design-guideline verdicts for one graph at one exemplar size."""
    architecture: str
    exemplar_size: int
    stride: int
    rf_min: int
    rf_max: int
    rf_ratio: float
    out_size: Tuple[int, int]
    padding_cells: int
    stride_ok: bool
    rf_ok: bool
    rf_within_exemplar: bool  # hard failure when the RF exceeds the exemplar
    ofs_ok: bool
    padding_ok: bool
    checks: List[GuidelineCheck] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def summary(self) -> str:
        lines = [
            f"Architecture: {self.architecture} @ exemplar {self.exemplar_size}",
            f"  stride: {self.stride}",
            f"  rf: {self.rf_min}-{self.rf_max} (ratio {self.rf_ratio:.3f})",
            f"  output: {self.out_size[0]}x{self.out_size[1]}",
            f"  padding-influenced cells: {self.padding_cells}",
        ]
        for check in self.checks:
            mark = "PASS" if check.passed else "FAIL"
            lines.append(f"  [{mark}] {check.name}: {check.message}")
        lines.append(f"Verdict: {'all guidelines met' if self.passed else 'guideline violation'}")
        return "\n".join(lines)


@dataclass
class MacCalibration:
    """Which input-size convention best reproduces the reference FLOP counts."""
    convention: str
    worst_error: float
    # convention -> architecture -> relative error
    errors: Dict[str, Dict[str, float]] = field(default_factory=dict)
    # convention -> architecture -> MACs
    macs: Dict[str, Dict[str, int]] = field(default_factory=dict)
    reference: Dict[str, float] = field(default_factory=dict)

    def summary(self) -> str:
        lines = [f"MAC convention: {self.convention} "
                 f"(worst relative error {self.worst_error:.2%})"]
        for conv, per_arch in self.errors.items():
            worst = max(abs(e) for e in per_arch.values())
            lines.append(f"  {conv}: worst {worst:.2%}")
            for arch, err in per_arch.items():
                lines.append(f"    {arch}: {self.macs[conv][arch] / 1e9:.3f} G "
                             f"vs {self.reference[arch] / 1e9:.2f} G ({err:+.2%})")
        return "\n".join(lines)


@dataclass
class ResponseMap:
    """Cross-correlation scores plus the mapping from cell to search pixel."""
    scores: np.ndarray
    bias: float = 0.0
    offset: float = 0.0  # search pixel of cell 0
    stride: float = 1.0  # search pixels per cell

    @property
    def shape(self) -> Tuple[int, int]:
        return tuple(self.scores.shape)

    def peak(self) -> Tuple[int, int]:
        """(row, col) of the maximum; the first one in row-major order on ties."""
        idx = int(np.argmax(self.scores))
        return divmod(idx, self.scores.shape[1])

    @property
    def peak_score(self) -> float:
        return float(self.scores.max())

    def to_search_pixel(self, row: float, col: float) -> Tuple[float, float]:
        """(x, y) search-image pixel aligned with response cell (row, col)."""
        return self.offset + self.stride * col, self.offset + self.stride * row


@dataclass
class LabelMap:
    """+1 inside a disc of `positive_radius` cells around `center`, -1 elsewhere."""
    values: np.ndarray
    positive_radius: float
    center: Tuple[float, float]  # (row, col)

    @property
    def shape(self) -> Tuple[int, int]:
        return tuple(self.values.shape)


@dataclass
class TrackState:
    """Tracked target in frame coordinates."""
    center: Tuple[float, float]  # (x, y)
    target_size: Tuple[float, float]  # (w, h)
    scale: float = 1.0

    def __post_init__(self):
        if self.scale <= 0:
            raise MatchError("scale must be positive", scale=self.scale)
        if min(self.target_size) <= 0:
            raise MatchError("target size must be positive", size=self.target_size)


@dataclass
class TrackStepResult:
    """Outcome of one tracking step."""
    state: TrackState
    responses: List[ResponseMap] = field(default_factory=list)
    scale_index: int = 1
    peak_score: float = 0.0
    clamped: bool = False  # center had to be clamped to frame bounds


@dataclass
class TrackLogEntry:
    """One line of the tracking log."""
    frame: int
    cx: float
    cy: float
    w: float
    h: float
    scale: float
    peak: float


@dataclass(frozen=True)
class Box:
    """Axis-aligned box given by center and size."""
    cx: float
    cy: float
    w: float
    h: float

    @property
    def x0(self) -> float:
        return self.cx - self.w / 2

    @property
    def y0(self) -> float:
        return self.cy - self.h / 2

    @property
    def x1(self) -> float:
        return self.cx + self.w / 2

    @property
    def y1(self) -> float:
        return self.cy + self.h / 2

    @property
    def area(self) -> float:
        return self.w * self.h


@dataclass
class EvaluationMetrics:
    """Desk-scale tracking accuracy."""
    frames: int
    mean_center_error: float  # px
    mean_iou: float
    success_rate: float  # fraction of frames with IoU >= threshold
    success_threshold: float = 0.5
    center_errors: List[float] = field(default_factory=list)
    ious: List[float] = field(default_factory=list)

    def summary(self) -> str:
        return "\n".join([
            f"Frames: {self.frames}",
            f"  mean center error: {self.mean_center_error:.2f} px",
            f"  mean IoU: {self.mean_iou:.3f}",
            f"  success rate (IoU >= {self.success_threshold}): {self.success_rate:.2%}",
        ])


@dataclass
class BiasTrialResult:
    """Localization errors of both backbones on one seeded trial."""
    trial: int
    seed: int
    direction: Tuple[int, int]  # unit drift direction (dx, dy)
    cir_border_error: float
    cir_center_error: float
    padded_border_error: float
    padded_center_error: float
    # error component pointing back toward the search centre; > 0 means pulled inward
    cir_centreward: float
    padded_centreward: float


@dataclass
class BiasExperimentSummary:
    """Paired comparison of border localization error."""
    cir_arch: str
    padded_arch: str
    trials: List[BiasTrialResult] = field(default_factory=list)
    cir_mean_border_error: float = 0.0
    padded_mean_border_error: float = 0.0
    cir_mean_center_error: float = 0.0
    padded_mean_center_error: float = 0.0
    padded_mean_centreward: float = 0.0
    cir_mean_centreward: float = 0.0
    t_statistic: float = float("nan")
    t_pvalue: float = float("nan")
    wilcoxon_statistic: Optional[float] = None
    wilcoxon_pvalue: Optional[float] = None
    alpha: float = 0.05

    @property
    def significant(self) -> bool:
        return bool(self.t_pvalue < self.alpha)

    def summary(self) -> str:
        lines = [
            f"Boundary-bias experiment: {self.padded_arch} vs {self.cir_arch} "
            f"({len(self.trials)} paired trials)",
            f"  border error  {self.padded_arch}: {self.padded_mean_border_error:.3f} px, "
            f"{self.cir_arch}: {self.cir_mean_border_error:.3f} px",
            f"  centre error  {self.padded_arch}: {self.padded_mean_center_error:.3f} px, "
            f"{self.cir_arch}: {self.cir_mean_center_error:.3f} px",
            f"  centre-ward pull  {self.padded_arch}: {self.padded_mean_centreward:+.3f} px, "
            f"{self.cir_arch}: {self.cir_mean_centreward:+.3f} px",
            f"  paired t-test (one-sided): t={self.t_statistic:.3f}, p={self.t_pvalue:.3g}",
        ]
        if self.wilcoxon_pvalue is not None:
            lines.append(f"  Wilcoxon signed-rank (one-sided): "
                         f"W={self.wilcoxon_statistic:.1f}, p={self.wilcoxon_pvalue:.3g}")
        verdict = "significant" if self.significant else "not significant"
        lines.append(f"Verdict: padded border error excess is {verdict} at alpha={self.alpha}")
        return "\n".join(lines)
