"""
Analyzer Engine for CIR backbones.

Implements:
- Per-node geometry: accumulated stride, receptive field range, output size,
  and the mask of output cells whose dependency cone reaches into padding
- Parameter and multiply-add accounting
- Design-guideline linting (stride, RF ratio, output size, padding)
- MAC input-size calibration against the reference FLOP counts
- Text, TSV and Excel reports
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from numpy.lib.stride_tricks import sliding_window_view

from architectures import CIR_FAMILY, build_architecture
from cir_errors import AnalysisError
from layer_graph import Graph, forward, init_random, is_buffer, parameter_shapes, weighted_layer_count
from output_models import Geometry, GuidelineCheck, GuidelineReport, MacCalibration
from tensor_kernels import Tensor, conv_output_size

logger = logging.getLogger(__name__)

InputSize = Union[int, Tuple[int, int]]

# Reference figures of the six CIR networks and the AlexNet baseline.
REFERENCE_RF: Dict[str, Tuple[int, int]] = {
    "ciresnet16": (77, 77),
    "ciresnet19": (85, 85),
    "ciresnet22": (93, 93),
    "ciresincep22": (13, 93),
    "ciresnext22": (93, 93),
    "ciresnet43": (105, 105),
    "alexnet-siam": (87, 87),
}
REFERENCE_OFS: Dict[str, int] = {
    "ciresnet16": 7, "ciresnet19": 6, "ciresnet22": 5,
    "ciresincep22": 5, "ciresnext22": 5, "ciresnet43": 6, "alexnet-siam": 6,
}
REFERENCE_PARAMS: Dict[str, float] = {
    "ciresnet16": 1.304e6, "ciresnet19": 1.374e6, "ciresnet22": 1.445e6,
    "ciresincep22": 1.695e6, "ciresnext22": 1.417e6, "ciresnet43": 1.010e6,
}
REFERENCE_FLOPS: Dict[str, float] = {
    "ciresnet16": 2.43e9, "ciresnet19": 2.55e9, "ciresnet22": 2.65e9,
    "ciresincep22": 2.71e9, "ciresnext22": 2.52e9, "ciresnet43": 6.07e9,
}

MAC_CONVENTIONS = ("exemplar", "search", "both")

TSV_COLUMNS = ["node", "stride", "rf_min", "rf_max", "out_h", "out_w", "pad_cells"]


@dataclass
class GuidelineConfig:
    """Thresholds of the four design guidelines."""
    exemplar_size: int = 127
    search_size: int = 255
    allowed_strides: Tuple[int, ...] = (4, 8)
    rf_ratio_min: float = 0.60
    rf_ratio_max: float = 0.80
    min_output_size: int = 4  # OFS <= 3 does not help localization


def _as_hw(size: InputSize) -> Tuple[int, int]:
    if isinstance(size, int):
        h = w = size
    else:
        h, w = size
    if h < 1 or w < 1:
        raise AnalysisError("input size must be positive", size=size)
    return int(h), int(w)


def _window_any(mask: np.ndarray, kernel: int, stride: int, padding: int,
                out_h: int, out_w: int) -> np.ndarray:
    """Cells whose (padded) window touches a True cell or the padding ring."""
    if padding:
        mask = np.pad(mask, padding, constant_values=True)
    windows = sliding_window_view(mask, (kernel, kernel))[::stride, ::stride]
    return windows[:out_h, :out_w].any(axis=(-2, -1))


def _merge(node_id: str, kind: str, a: Geometry, b: Geometry) -> Geometry:
    if a.stride != b.stride:
        raise AnalysisError(f"{kind} branches have different strides",
                            node=node_id, left=a.stride, right=b.stride)
    if a.out_size != b.out_size:
        raise AnalysisError(f"{kind} branches have different spatial sizes",
                            node=node_id, left=a.out_size, right=b.out_size)
    start = min(a.rf_start, b.rf_start)
    end = max(a.rf_start + a.rf_max, b.rf_start + b.rf_max)
    # An add output depends on both branches; a concat channel on only one.
    rf_min = max(a.rf_min, b.rf_min) if kind == "add" else min(a.rf_min, b.rf_min)
    return Geometry(node_id, a.stride, rf_min, end - start, start, a.out_h, a.out_w,
                    a.padding_mask | b.padding_mask)


def compute_geometry(graph: Graph, input_size: InputSize) -> Dict[str, Geometry]:
    """
    Propagate stride, receptive field, output size and padding influence.

    Returns one Geometry per node id, in graph order.
    """
    h, w = _as_hw(input_size)
    geo: Dict[str, Geometry] = {}
    for node in graph.nodes.values():
        p = node.params
        args = [geo[src] for src in node.inputs]
        if node.kind == "input":
            geo[node.id] = Geometry(node.id, 1, 1, 1, 0, h, w)
            continue
        if node.kind in ("add", "concat"):
            geo[node.id] = _merge(node.id, node.kind, args[0], args[1])
            continue

        g = args[0]
        if node.kind in ("conv", "maxpool"):
            if node.kind == "conv":
                if p["kernel_h"] != p["kernel_w"]:
                    raise AnalysisError("only square kernels are analysed", node=node.id)
                k, s, pad = p["kernel_h"], p["stride"], p["padding"]
            else:
                k, s, pad = p["kernel"], p["stride"], 0
            out_h = conv_output_size(g.out_h, k, s, pad)
            out_w = conv_output_size(g.out_w, k, s, pad)
            if out_h < 1 or out_w < 1:
                raise AnalysisError("output size is not positive", node=node.id,
                                    input=g.out_size, kernel=k, stride=s, padding=pad)
            grow = (k - 1) * g.stride
            geo[node.id] = Geometry(
                node.id, g.stride * s, g.rf_min + grow, g.rf_max + grow,
                g.rf_start - pad * g.stride, out_h, out_w,
                _window_any(g.padding_mask, k, s, pad, out_h, out_w),
            )
        elif node.kind == "crop":
            m = p["margin"]
            e = p.get("margin_end", m)
            if g.out_h <= m + e or g.out_w <= m + e:
                raise AnalysisError("crop margin too large", node=node.id,
                                    input=g.out_size, margin=m, margin_end=e)
            mask = g.padding_mask[m:g.out_h - e, m:g.out_w - e]
            geo[node.id] = Geometry(node.id, g.stride, g.rf_min, g.rf_max,
                                    g.rf_start + m * g.stride,
                                    g.out_h - m - e, g.out_w - m - e, mask)
        else:
            geo[node.id] = Geometry(node.id, g.stride, g.rf_min, g.rf_max, g.rf_start,
                                    g.out_h, g.out_w, g.padding_mask)
    return geo


def output_geometry(graph: Graph, input_size: InputSize) -> Geometry:
    return compute_geometry(graph, input_size)[graph.output]


def count_params(graph: Graph, include_buffers: bool = False) -> int:
    """Conv weights and biases plus norm scale/shift (and running stats if asked)."""
    return sum(int(np.prod(shape)) for name, shape in parameter_shapes(graph).items()
               if include_buffers or not is_buffer(name))


def count_macs(graph: Graph, input_size: InputSize) -> int:
    """Multiply-adds of one forward pass; only conv layers contribute."""
    geo = compute_geometry(graph, input_size)
    total = 0
    for node in graph.nodes.values():
        if node.kind != "conv":
            continue
        p = node.params
        g = geo[node.id]
        total += (g.out_h * g.out_w * p["out_channels"] * (p["in_channels"] // p["groups"])
                  * p["kernel_h"] * p["kernel_w"])
    return total


def macs_for_convention(graph: Graph, convention: str,
                        config: Optional[GuidelineConfig] = None) -> int:
    config = config or GuidelineConfig()
    if convention == "exemplar":
        return count_macs(graph, config.exemplar_size)
    if convention == "search":
        return count_macs(graph, config.search_size)
    if convention == "both":
        return count_macs(graph, config.exemplar_size) + count_macs(graph, config.search_size)
    raise AnalysisError(f"unknown MAC convention '{convention}'",
                        known=",".join(MAC_CONVENTIONS))


def padding_perturbation_mask(graph: Graph, input_size: InputSize, seed: int = 0,
                              pad_value: float = 1e30) -> np.ndarray:
    """
    Output cells that change when the padding constant goes from 0 to `pad_value`.

    Weights are drawn in the positive init mode and the input is positive, so
    every dependency on a padded coordinate moves the output; the large pad
    constant keeps the change visible in float32 after many attenuating layers.
    """
    h, w = _as_hw(input_size)
    source = graph.nodes[graph.source]
    positive = init_random(graph, seed, mode="positive")
    rng = np.random.default_rng(seed + 1)
    image = Tensor(rng.uniform(0.1, 1.0, size=(source.params["channels"], h, w)))
    base = forward(positive, image, pad_value=0.0).numpy()
    bumped = forward(positive, image, pad_value=pad_value).numpy()
    diff = np.abs(bumped.astype(np.float64) - base.astype(np.float64))
    return (diff > 1e-3 * (1.0 + np.abs(base))).any(axis=0)


def relative_error(value: float, reference: float) -> float:
    return (value - reference) / reference


class ArchitectureAnalyzer:
    """Guideline checks, calibration and reports over layer graphs."""

    def __init__(self, config: Optional[GuidelineConfig] = None):
        self.config = config or GuidelineConfig()

    def check_guidelines(self, graph: Graph,
                         exemplar_size: Optional[int] = None) -> GuidelineReport:
        """Evaluate the four design guidelines at the exemplar size."""
        cfg = self.config
        size = exemplar_size or cfg.exemplar_size
        g = output_geometry(graph, size)
        ratio = g.rf_max / size
        out = min(g.out_h, g.out_w)

        stride_ok = g.stride in cfg.allowed_strides
        rf_ok = cfg.rf_ratio_min <= ratio <= cfg.rf_ratio_max
        within = g.rf_max <= size
        ofs_ok = out >= cfg.min_output_size
        padding_ok = g.padding_influenced == 0

        allowed = "/".join(str(s) for s in cfg.allowed_strides)
        checks = [
            GuidelineCheck("stride", stride_ok,
                           f"network stride {g.stride} (expected {allowed})"),
            GuidelineCheck("receptive-field", rf_ok,
                           f"rf {g.rf_max} is {ratio:.1%} of exemplar "
                           f"(expected {cfg.rf_ratio_min:.0%}-{cfg.rf_ratio_max:.0%})"),
            GuidelineCheck("rf-within-exemplar", within,
                           f"rf {g.rf_max} vs exemplar {size}"),
            GuidelineCheck("output-size", ofs_ok,
                           f"output {g.out_h}x{g.out_w} (needs > {cfg.min_output_size - 1})"),
            GuidelineCheck("padding", padding_ok,
                           f"{g.padding_influenced} output cells depend on padding"),
        ]
        report = GuidelineReport(
            architecture=graph.name, exemplar_size=size, stride=g.stride,
            rf_min=g.rf_min, rf_max=g.rf_max, rf_ratio=ratio, out_size=g.out_size,
            padding_cells=g.padding_influenced, stride_ok=stride_ok, rf_ok=rf_ok,
            rf_within_exemplar=within, ofs_ok=ofs_ok, padding_ok=padding_ok,
            checks=checks,
        )
        logger.debug("guidelines for %s: %s", graph.name,
                     {c.name: c.passed for c in checks})
        return report

    def calibrate_mac_convention(self,
                                 names: Sequence[str] = CIR_FAMILY) -> MacCalibration:
        """
        Pick the input-size convention whose MAC counts best match the
        reference FLOPs (smallest worst-case relative error).
        """
        graphs = {name: build_architecture(name) for name in names}
        errors: Dict[str, Dict[str, float]] = {}
        macs: Dict[str, Dict[str, int]] = {}
        for convention in MAC_CONVENTIONS:
            macs[convention] = {n: macs_for_convention(g, convention, self.config)
                                for n, g in graphs.items()}
            errors[convention] = {n: relative_error(macs[convention][n], REFERENCE_FLOPS[n])
                                  for n in graphs}
        best = min(MAC_CONVENTIONS, key=lambda c: max(abs(e) for e in errors[c].values()))
        worst = max(abs(e) for e in errors[best].values())
        logger.info("MAC calibration picked '%s' (worst error %.2f%%)", best, 100 * worst)
        return MacCalibration(best, worst, errors, macs,
                              {n: REFERENCE_FLOPS[n] for n in graphs})

    def compare_architectures(self, names: Iterable[str],
                              input_size: Optional[int] = None,
                              mac_convention: str = "search") -> pd.DataFrame:
        """One summary row per network."""
        size = input_size or self.config.exemplar_size
        rows = []
        for name in names:
            graph = build_architecture(name)
            g = output_geometry(graph, size)
            rows.append({
                "architecture": name,
                "layers": weighted_layer_count(graph),
                "stride": g.stride,
                "rf_min": g.rf_min,
                "rf_max": g.rf_max,
                "ofs": g.out_h,
                "pad_cells": g.padding_influenced,
                "params": count_params(graph),
                "macs": macs_for_convention(graph, mac_convention, self.config),
            })
        return pd.DataFrame(rows)


def check_guidelines(graph: Graph, exemplar_size: int = 127,
                     config: Optional[GuidelineConfig] = None) -> GuidelineReport:
    return ArchitectureAnalyzer(config).check_guidelines(graph, exemplar_size)


def calibrate_mac_convention(names: Sequence[str] = CIR_FAMILY,
                             config: Optional[GuidelineConfig] = None) -> MacCalibration:
    return ArchitectureAnalyzer(config).calibrate_mac_convention(names)


def compare_architectures(names: Iterable[str], input_size: int = 127,
                          config: Optional[GuidelineConfig] = None) -> pd.DataFrame:
    return ArchitectureAnalyzer(config).compare_architectures(names, input_size)


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

def geometry_frame(geometry: Dict[str, Geometry]) -> pd.DataFrame:
    rows = [{
        "node": g.node, "stride": g.stride, "rf_min": g.rf_min, "rf_max": g.rf_max,
        "out_h": g.out_h, "out_w": g.out_w, "pad_cells": g.padding_influenced,
    } for g in geometry.values()]
    return pd.DataFrame(rows, columns=TSV_COLUMNS)


def render_tsv(geometry: Dict[str, Geometry]) -> str:
    return geometry_frame(geometry).to_csv(sep="\t", index=False)


def render_text(graph: Graph, geometry: Dict[str, Geometry], input_size: InputSize,
                header: Optional[str] = None) -> str:
    """key: value blocks per node, preceded by a network summary."""
    h, w = _as_hw(input_size)
    out = geometry[graph.output]
    lines = []
    if header:
        lines.append(f"# {header}")
    lines += [
        f"architecture: {graph.name}",
        f"input: {h}x{w}",
        f"weighted_layers: {weighted_layer_count(graph)}",
        f"params: {count_params(graph)}",
        f"macs: {count_macs(graph, (h, w))}",
        f"output: {out.out_h}x{out.out_w} stride {out.stride} "
        f"rf {out.rf_min}-{out.rf_max} pad_cells {out.padding_influenced}",
        "",
    ]
    for g in geometry.values():
        lines += [
            f"[{g.node}]",
            f"  stride: {g.stride}",
            f"  rf_min: {g.rf_min}",
            f"  rf_max: {g.rf_max}",
            f"  out_size: {g.out_h}x{g.out_w}",
            f"  pad_cells: {g.padding_influenced}",
        ]
    return "\n".join(lines) + "\n"


def write_excel(path: Union[str, Path], graphs: Sequence[Graph], input_size: InputSize) -> None:
    """Workbook with a summary sheet and one geometry sheet per graph."""
    path = Path(path)
    summary = []
    with pd.ExcelWriter(path, engine="openpyxl") as writer:
        for graph in graphs:
            geo = compute_geometry(graph, input_size)
            out = geo[graph.output]
            summary.append({
                "architecture": graph.name, "stride": out.stride,
                "rf_min": out.rf_min, "rf_max": out.rf_max,
                "out_h": out.out_h, "out_w": out.out_w,
                "pad_cells": out.padding_influenced,
                "params": count_params(graph),
                "macs": count_macs(graph, input_size),
            })
        pd.DataFrame(summary).to_excel(writer, sheet_name="summary", index=False)
        for graph in graphs:
            frame = geometry_frame(compute_geometry(graph, input_size))
            # sheet names are limited to 31 characters
            frame.to_excel(writer, sheet_name=graph.name[:31], index=False)
    logger.info("Wrote analyzer workbook to %s", path)


if __name__ == "__main__":
    analyzer = ArchitectureAnalyzer()
    print(analyzer.compare_architectures(CIR_FAMILY + ("alexnet-siam",)).to_string(index=False))
    print()
    print(analyzer.calibrate_mac_convention().summary())
