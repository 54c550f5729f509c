"""
Boundary-bias experiment.

A textured target drifts from the search centre toward the search border
while the search window stays fixed at the initial position. The background
pans with the target, so every search crop is an exact translation of the
first one. Each trial localizes the target with a cropping-inside backbone
and with a padded baseline (same seed, random weights, exact 127/255 crops),
refines each response peak to sub-cell precision and compares the
displacement from the first frame's peak with the true displacement. A
paired one-sided test decides whether the padded baseline errs more near
the border.
"""

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np
import pandas as pd
from scipy import stats

from analyzer_engine import output_geometry
from architectures import build_architecture
from cir_errors import SequenceError
from layer_graph import Graph, init_random
from matching_engine import SiameseModel, TrackerConfig, extract_patch, refine_peak
from output_models import BiasExperimentSummary, BiasTrialResult
from synth_data import SequenceConfig, generate
from tensor_kernels import Tensor

logger = logging.getLogger(__name__)

THREADS_ENV = "CIR_THREADS"


def default_workers() -> int:
    raw = os.environ.get(THREADS_ENV)
    if raw:
        try:
            return max(1, int(raw))
        except ValueError:
            logger.warning("ignoring non-integer %s=%r", THREADS_ENV, raw)
    return os.cpu_count() or 1


@dataclass
class BiasExperimentConfig:
    """Trial layout of the boundary-bias experiment."""
    cir_arch: str = "ciresnet22"
    padded_arch: str = "resnet22-padded"
    trials: int = 200
    base_seed: int = 0
    num_frames: int = 8
    drift_step: int = 8  # px per frame, a multiple of the backbone stride
    frame_size: Tuple[int, int] = (384, 384)
    target_size: Tuple[int, int] = (48, 48)
    channels: int = 3
    border_gap: int = 24  # border frames lie within this many px of the last full exemplar offset
    init_mode: str = "uniform"
    workers: Optional[int] = None  # CIR_THREADS or cpu count when None
    alpha: float = 0.05


@dataclass
class _Localization:
    border_error: float
    center_error: float
    centreward: float


class BiasExperiment:
    """Paired CIR-vs-padded localization trials."""

    def __init__(self, config: Optional[BiasExperimentConfig] = None,
                 cir_graph: Optional[Graph] = None,
                 padded_graph: Optional[Graph] = None):
        self.config = config or BiasExperimentConfig()
        self.tracker_config = TrackerConfig()
        self.cir_graph = cir_graph or build_architecture(self.config.cir_arch)
        self.padded_graph = padded_graph or build_architecture(self.config.padded_arch)
        self.stride = int(output_geometry(self.cir_graph, self.tracker_config.exemplar_size).stride)
        self._validate()

    @property
    def max_offset(self) -> int:
        """Largest displacement (px) that keeps the exemplar inside the search crop."""
        tc = self.tracker_config
        return (tc.search_size - tc.exemplar_size) // 2

    @property
    def border_offset(self) -> int:
        """Displacement (px) from which a frame counts as a border frame."""
        return self.max_offset - self.config.border_gap

    def _validate(self) -> None:
        cfg = self.config
        reach = (cfg.num_frames - 1) * cfg.drift_step
        if cfg.drift_step < 1 or cfg.drift_step % self.stride:
            raise SequenceError("drift step must be a positive multiple of the backbone stride",
                                step=cfg.drift_step, stride=self.stride)
        if cfg.border_gap < 0 or self.border_offset < 1:
            raise SequenceError("border gap leaves no centre band",
                                border_gap=cfg.border_gap, max_offset=self.max_offset)
        if reach < self.border_offset:
            raise SequenceError("drift never reaches the border band",
                                frames=cfg.num_frames, step=cfg.drift_step,
                                border_offset=self.border_offset)
        if reach > self.max_offset - self.stride:
            raise SequenceError("drift leaves no response cell beyond the peak",
                                frames=cfg.num_frames, step=cfg.drift_step,
                                max_offset=self.max_offset, stride=self.stride)

    def _sequence_config(self) -> SequenceConfig:
        cfg = self.config
        h, w = cfg.frame_size
        return SequenceConfig(
            frame_size=cfg.frame_size, target_size=cfg.target_size,
            num_frames=cfg.num_frames, channels=cfg.channels,
            motion="toward-boundary", drift_step=cfg.drift_step,
            start_center=(w // 2, h // 2), background_motion=True,
        )

    def _localize(self, graph: Graph, seed: int, exemplar: np.ndarray,
                  searches: np.ndarray, truth: np.ndarray,
                  direction: np.ndarray) -> _Localization:
        """
        Displacement error of every frame against the first frame's refined
        peak. Frame 0 is the reference and belongs to neither band.
        """
        cfg = self.config
        model = SiameseModel(init_random(graph, seed, mode=cfg.init_mode), self.tracker_config)
        z_feat = Tensor(model.embed(exemplar))
        x_feats = model.embed(searches)

        peaks = []
        for i in range(len(searches)):
            response = model.respond(z_feat, Tensor(x_feats[i]))
            row, col = refine_peak(response.scores)
            peaks.append(response.to_search_pixel(row, col))
        peaks_arr = np.array(peaks)
        predicted = peaks_arr - peaks_arr[0]
        misses = truth - predicted
        errors = np.hypot(misses[:, 0], misses[:, 1])
        offsets = np.abs(truth).max(axis=1)
        border = offsets >= self.border_offset
        centre = (offsets > 0) & ~border
        return _Localization(
            border_error=float(errors[border].mean()),
            center_error=float(errors[centre].mean()) if centre.any() else 0.0,
            centreward=float((misses[border] @ direction).mean()),
        )

    def run_trial(self, trial: int) -> BiasTrialResult:
        cfg = self.config
        seed = cfg.base_seed + trial
        seq = generate(seed, self._sequence_config())
        start = self._sequence_config().start_center
        tc = self.tracker_config

        exemplar, _ = extract_patch(seq.frames[0].numpy(), start, tc.exemplar_size,
                                    tc.exemplar_size)
        searches = np.stack([extract_patch(f.numpy(), start, tc.search_size, tc.search_size)[0]
                             for f in seq.frames])
        origin = seq.ground_truth[0]
        truth = np.array([[b.cx - origin.cx, b.cy - origin.cy] for b in seq.ground_truth])
        direction = np.array(seq.direction, dtype=np.float64)
        direction /= np.linalg.norm(direction)

        cir = self._localize(self.cir_graph, seed, exemplar, searches, truth, direction)
        padded = self._localize(self.padded_graph, seed, exemplar, searches, truth, direction)
        logger.debug("trial %d: border error cir %.4f padded %.4f",
                     trial, cir.border_error, padded.border_error)
        return BiasTrialResult(
            trial=trial, seed=seed, direction=seq.direction,
            cir_border_error=cir.border_error, cir_center_error=cir.center_error,
            padded_border_error=padded.border_error, padded_center_error=padded.center_error,
            cir_centreward=cir.centreward, padded_centreward=padded.centreward,
        )

    def run(self) -> BiasExperimentSummary:
        cfg = self.config
        workers = cfg.workers or default_workers()
        logger.info("Running %d bias trials (%s vs %s) on %d workers",
                    cfg.trials, self.padded_graph.name, self.cir_graph.name, workers)
        with ThreadPoolExecutor(max_workers=workers) as pool:
            # map keeps trial order regardless of completion order
            trials: List[BiasTrialResult] = list(pool.map(self.run_trial, range(cfg.trials)))
        return summarize(trials, self.cir_graph.name, self.padded_graph.name, cfg.alpha)


def summarize(trials: List[BiasTrialResult], cir_arch: str, padded_arch: str,
              alpha: float = 0.05) -> BiasExperimentSummary:
    """Means plus paired one-sided tests of padded > CIR border error."""
    padded = np.array([t.padded_border_error for t in trials])
    cir = np.array([t.cir_border_error for t in trials])
    summary = BiasExperimentSummary(
        cir_arch=cir_arch, padded_arch=padded_arch, trials=list(trials),
        cir_mean_border_error=float(cir.mean()),
        padded_mean_border_error=float(padded.mean()),
        cir_mean_center_error=float(np.mean([t.cir_center_error for t in trials])),
        padded_mean_center_error=float(np.mean([t.padded_center_error for t in trials])),
        cir_mean_centreward=float(np.mean([t.cir_centreward for t in trials])),
        padded_mean_centreward=float(np.mean([t.padded_centreward for t in trials])),
        alpha=alpha,
    )
    diff = padded - cir
    if len(trials) >= 2 and np.any(diff != 0):
        t_res = stats.ttest_rel(padded, cir, alternative="greater")
        summary.t_statistic = float(t_res.statistic)
        summary.t_pvalue = float(t_res.pvalue)
        try:
            w_res = stats.wilcoxon(padded, cir, alternative="greater")
            summary.wilcoxon_statistic = float(w_res.statistic)
            summary.wilcoxon_pvalue = float(w_res.pvalue)
        except ValueError as exc:
            logger.warning("Wilcoxon test skipped: %s", exc)
    else:
        logger.warning("paired tests skipped: fewer than 2 trials or identical errors")
    return summary


def trials_frame(summary: BiasExperimentSummary) -> pd.DataFrame:
    rows = []
    for t in summary.trials:
        row = vars(t).copy()
        row["dx"], row["dy"] = row.pop("direction")
        rows.append(row)
    return pd.DataFrame(rows)


def run_bias_experiment(config: Optional[BiasExperimentConfig] = None,
                        cir_graph: Optional[Graph] = None,
                        padded_graph: Optional[Graph] = None) -> BiasExperimentSummary:
    return BiasExperiment(config, cir_graph, padded_graph).run()


if __name__ == "__main__":
    logging.basicConfig(level=logging.INFO)
    print(run_bias_experiment(BiasExperimentConfig(trials=20)).summary())
