"""
Unit tests for the Analyzer Engine.

Run with: pytest test_analyzer.py -v
"""

import numpy as np
import pandas as pd
import pytest

from analyzer_engine import (
    REFERENCE_FLOPS, REFERENCE_OFS, REFERENCE_PARAMS, REFERENCE_RF, TSV_COLUMNS,
    ArchitectureAnalyzer, GuidelineConfig, compute_geometry, count_macs, count_params,
    macs_for_convention, output_geometry, padding_perturbation_mask, relative_error,
    render_text, render_tsv, write_excel,
)
from architectures import BUILTIN_ARCHITECTURES, CIR_FAMILY, UnitKind, add_unit, build_architecture
from cir_errors import AnalysisError
from layer_graph import GraphBuilder, forward, init_random
from tensor_kernels import Tensor


@pytest.fixture(scope="module")
def analyzer():
    return ArchitectureAnalyzer()


def dependency_chain():
    """Pool-free chain (stem, CIR, CIR-Inception, head) whose dependencies are strictly monotone."""
    b = GraphBuilder("chain", in_channels=1)
    x = b.conv_norm("stem", b.input_id, 4, 3, 2, 1)
    x = add_unit(b, x, UnitKind("cir", 4, 1, 4), "u1")
    x = add_unit(b, x, UnitKind("cir-inception", 4, 1, 4, shortcut_channels=1), "u2")
    x = b.conv("head", x, 2, 3, 1, 0)
    return b.build(x)


# ---------------------------------------------------------------------------
# Geometry
# ---------------------------------------------------------------------------

class TestGeometry:

    @pytest.mark.parametrize("name", list(REFERENCE_RF))
    def test_receptive_field(self, name):
        g = output_geometry(build_architecture(name), 127)
        assert (g.rf_min, g.rf_max) == REFERENCE_RF[name]

    @pytest.mark.parametrize("name", list(REFERENCE_OFS))
    def test_output_feature_size(self, name):
        g = output_geometry(build_architecture(name), 127)
        assert g.out_size == (REFERENCE_OFS[name], REFERENCE_OFS[name])

    @pytest.mark.parametrize("name,stride", [
        ("ciresnet22", 8), ("ciresnet43", 4), ("alexnet-siam", 8), ("resnet22-padded", 8),
    ])
    def test_stride(self, name, stride):
        assert output_geometry(build_architecture(name), 127).stride == stride

    def test_extra_downsample_doubles_stride(self):
        g = output_geometry(build_architecture("ciresnet22", extra_downsample=True), 127)
        assert g.stride == 16

    @pytest.mark.parametrize("kernel", [1, 2, 3, 4, 5, 6])
    def test_last_kernel_sets_output_size(self, kernel):
        """Kernel k in the last block leaves 8 - k cells on a 127 exemplar."""
        g = output_geometry(build_architecture("ciresnet22", last_kernel=kernel), 127)
        assert g.out_size == (8 - kernel, 8 - kernel)
        assert g.stride == 8
        assert not g.padding_mask.any()

    def test_even_last_kernel_forward_shape(self):
        graph = init_random(build_architecture("ciresnet22", last_kernel=4), seed=0)
        image = Tensor(np.random.default_rng(1).uniform(size=(3, 127, 127)))
        assert forward(graph, image).shape == (512, 4, 4)
        assert output_geometry(graph, 255).out_size == forward(
            graph, Tensor(np.random.default_rng(2).uniform(size=(3, 255, 255)))).spatial

    def test_ciresnet22_search_size(self):
        assert output_geometry(build_architecture("ciresnet22"), 255).out_size == (21, 21)

    @pytest.mark.parametrize("name", BUILTIN_ARCHITECTURES)
    def test_matches_forward_shape(self, name):
        graph = init_random(build_architecture(name), seed=0)
        image = Tensor(np.random.default_rng(0).uniform(size=(3, 127, 127)))
        out = forward(graph, image)
        assert output_geometry(graph, 127).out_size == out.spatial

    def test_every_node_reported_in_order(self, tiny_cir):
        geo = compute_geometry(tiny_cir, 63)
        assert list(geo) == list(tiny_cir.nodes)
        assert geo["conv1.crop"].out_size == (28, 28)

    def test_rectangular_input(self, tiny_cir):
        g = output_geometry(tiny_cir, (63, 127))
        assert g.out_size == (5, 13)

    def test_crop_too_large(self, tiny_cir):
        with pytest.raises(AnalysisError):
            compute_geometry(tiny_cir, 16)

    def test_add_with_mismatched_strides(self):
        b = GraphBuilder("bad-merge", in_channels=1)
        fast = b.conv("fast", b.input_id, 2, 3, 2, 1)
        slow = b.conv("slow", b.input_id, 2, 3, 1, 1)
        b.add("sum", fast, slow)
        with pytest.raises(AnalysisError):
            compute_geometry(b.build(), 16)

    def test_non_positive_input(self, tiny_cir):
        with pytest.raises(AnalysisError):
            compute_geometry(tiny_cir, 0)


class TestDependencyOracles:
    """Static geometry agrees with perturbation experiments on real forwards."""

    @pytest.mark.parametrize("pixel", [(16, 16), (0, 5), (32, 20)])
    def test_receptive_field_cone(self, pixel):
        graph = init_random(dependency_chain(), seed=4, mode="positive")
        rng = np.random.default_rng(5)
        image = rng.uniform(0.1, 1.0, size=(1, 33, 33))
        bumped = image.copy()
        bumped[0, pixel[0], pixel[1]] = 1e8
        base = forward(graph, Tensor(image)).numpy().astype(np.float64)
        moved = forward(graph, Tensor(bumped)).numpy().astype(np.float64)
        changed = (np.abs(moved - base) > 1e-5 * (1.0 + np.abs(base))).any(axis=0)

        g = output_geometry(graph, 33)
        expected = np.zeros(g.out_size, dtype=bool)
        for r in range(g.out_h):
            for c in range(g.out_w):
                (r0, r1), (c0, c1) = g.cone(r, c)
                expected[r, c] = r0 <= pixel[0] <= r1 and c0 <= pixel[1] <= c1
        assert g.rf_max == 15
        np.testing.assert_array_equal(changed, expected)

    def test_tiny_cir_has_no_padding_influence(self, tiny_cir):
        assert not padding_perturbation_mask(tiny_cir, 63).any()
        assert output_geometry(tiny_cir, 63).padding_influenced == 0

    def test_tiny_padded_mask_matches(self, tiny_padded):
        mask = padding_perturbation_mask(tiny_padded, 63)
        g = output_geometry(tiny_padded, 63)
        assert g.padding_influenced > 0
        np.testing.assert_array_equal(mask, g.padding_mask)

    @pytest.mark.parametrize("name", ["ciresnet16", "alexnet-siam", "resnet22-padded",
                                      "ciresnet22-down-original"])
    def test_builtin_mask_matches(self, name):
        graph = build_architecture(name)
        mask = padding_perturbation_mask(graph, 127)
        np.testing.assert_array_equal(mask, output_geometry(graph, 127).padding_mask)


# ---------------------------------------------------------------------------
# Parameters and MACs
# ---------------------------------------------------------------------------

class TestCounting:

    def test_pointwise_conv_with_bias(self):
        b = GraphBuilder("pw", in_channels=64)
        b.conv("pw", b.input_id, 256, 1, 1, 0, bias=True)
        assert count_params(b.build()) == 16640

    def test_pointwise_conv_macs(self):
        b = GraphBuilder("pw", in_channels=64)
        b.conv("pw", b.input_id, 64, 1, 1, 0)
        assert count_macs(b.build(), 5) == 102400

    def test_grouped_conv_divides_cost(self):
        b = GraphBuilder("grouped", in_channels=64)
        b.conv("g", b.input_id, 64, 3, 1, 1, groups=32)
        graph = b.build()
        assert count_params(graph) == 64 * 2 * 9
        assert count_macs(graph, 4) == 16 * 64 * 2 * 9

    def test_buffers_only_when_asked(self, tiny_cir):
        # norm layers carry scale, shift, mean, var
        without = count_params(tiny_cir)
        with_buffers = count_params(tiny_cir, include_buffers=True)
        norm_channels = sum(n.params["channels"] for n in tiny_cir.nodes.values()
                            if n.kind == "norm")
        assert with_buffers - without == 2 * norm_channels

    @pytest.mark.parametrize("name", [n for n in REFERENCE_PARAMS if n != "ciresnet43"])
    def test_params_within_one_percent(self, name):
        count = count_params(build_architecture(name))
        assert abs(relative_error(count, REFERENCE_PARAMS[name])) <= 0.01

    def test_ciresnet22_params_exact(self):
        assert count_params(build_architecture("ciresnet22")) == 1_444_928

    def test_ciresnet43_params_deviation(self):
        """Same scale+shift convention; the count lands 1.02% low."""
        count = count_params(build_architecture("ciresnet43"))
        assert count == 999_744
        assert -0.0105 < relative_error(count, REFERENCE_PARAMS["ciresnet43"]) < -0.01

    def test_ciresnet22_search_macs(self):
        assert count_macs(build_architecture("ciresnet22"), 255) == 2_628_681_728

    def test_conventions(self, tiny_cir):
        exemplar = macs_for_convention(tiny_cir, "exemplar")
        search = macs_for_convention(tiny_cir, "search")
        assert macs_for_convention(tiny_cir, "both") == exemplar + search
        assert search > exemplar

    def test_unknown_convention(self, tiny_cir):
        with pytest.raises(AnalysisError):
            macs_for_convention(tiny_cir, "video")


class TestCalibration:

    def test_search_convention_wins(self, analyzer):
        calibration = analyzer.calibrate_mac_convention()
        assert calibration.convention == "search"
        assert calibration.worst_error < 0.03
        assert set(calibration.errors) == {"exemplar", "search", "both"}
        assert set(calibration.reference) == set(REFERENCE_FLOPS)

    def test_summary_lists_every_network(self, analyzer):
        text = analyzer.calibrate_mac_convention(["ciresnet16", "ciresnet22"]).summary()
        assert "MAC convention: search" in text
        assert "ciresnet16" in text and "ciresnet22" in text


# ---------------------------------------------------------------------------
# Guidelines
# ---------------------------------------------------------------------------

class TestGuidelines:

    def test_ciresnet22_passes(self, analyzer):
        report = analyzer.check_guidelines(build_architecture("ciresnet22"))
        assert report.passed
        assert report.rf_ratio == pytest.approx(0.732, abs=1e-3)
        assert report.stride == 8 and report.out_size == (5, 5)

    def test_padded_baseline_fails_padding(self, analyzer):
        report = analyzer.check_guidelines(build_architecture("resnet22-padded"))
        assert not report.padding_ok
        assert report.padding_cells > 0
        assert not report.passed

    def test_extra_downsample_fails_stride(self, analyzer):
        report = analyzer.check_guidelines(build_architecture("ciresnet22", extra_downsample=True))
        assert report.stride == 16
        assert not report.stride_ok

    def test_ciresnet43_rf_ratio_too_large(self, analyzer):
        report = analyzer.check_guidelines(build_architecture("ciresnet43"))
        assert report.rf_ratio == pytest.approx(105 / 127)
        assert not report.rf_ok
        assert report.rf_within_exemplar

    def test_rf_exceeding_exemplar(self, analyzer):
        """Padding lets the baseline produce an output from an exemplar smaller than its RF."""
        report = analyzer.check_guidelines(build_architecture("resnet22-padded"), exemplar_size=63)
        assert report.rf_max == 89
        assert not report.rf_within_exemplar
        assert not report.passed

    def test_alexnet_baseline_passes(self, analyzer):
        assert analyzer.check_guidelines(build_architecture("alexnet-siam")).passed

    def test_custom_thresholds(self):
        loose = ArchitectureAnalyzer(GuidelineConfig(allowed_strides=(4, 8, 16)))
        report = loose.check_guidelines(build_architecture("ciresnet22", extra_downsample=True))
        assert report.stride_ok

    def test_summary_marks_failures(self, analyzer):
        text = analyzer.check_guidelines(build_architecture("resnet22-padded")).summary()
        assert "[FAIL] padding" in text
        assert "guideline violation" in text


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

class TestReports:

    def test_compare_architectures(self, analyzer):
        frame = analyzer.compare_architectures(CIR_FAMILY)
        assert list(frame["architecture"]) == list(CIR_FAMILY)
        assert frame.set_index("architecture").loc["ciresnet43", "stride"] == 4
        assert (frame["pad_cells"] == 0).all()

    def test_tsv_columns(self, tiny_cir):
        text = render_tsv(compute_geometry(tiny_cir, 63))
        header, *rows = text.strip().split("\n")
        assert header.split("\t") == TSV_COLUMNS
        assert len(rows) == len(tiny_cir.nodes)

    def test_text_report(self, tiny_cir):
        text = render_text(tiny_cir, compute_geometry(tiny_cir, 63), 63, header="tiny")
        assert text.startswith("# tiny\n")
        assert "architecture: tiny-cir" in text
        assert "output: 5x5 stride 8 rf 29-29 pad_cells 0" in text
        assert "[conv3.block1.pool]" in text

    def test_excel_workbook(self, tiny_cir, tiny_padded, tmp_path):
        path = tmp_path / "geometry.xlsx"
        write_excel(path, [tiny_cir, tiny_padded], 63)
        sheets = pd.read_excel(path, sheet_name=None)
        assert set(sheets) == {"summary", "tiny-cir", "tiny-padded"}
        summary = sheets["summary"].set_index("architecture")
        assert summary.loc["tiny-cir", "pad_cells"] == 0
        assert summary.loc["tiny-padded", "pad_cells"] > 0
        assert len(sheets["tiny-cir"]) == len(tiny_cir.nodes)
