"""Shared pytest fixtures: small stride-8 backbones that run in milliseconds."""

import pytest

from architectures import UnitKind, add_unit
from layer_graph import GraphBuilder


def tiny_cir_graph(in_channels: int = 1):
    """Stem + crop + pool, one CIR and one CIR-D unit: stride 8, RF 29."""
    b = GraphBuilder("tiny-cir", in_channels=in_channels)
    x = b.conv_norm("conv1", b.input_id, 4, 7, 2, 3)
    x = b.crop("conv1.crop", x, 2)
    x = b.maxpool("conv2.pool", x, 2, 2)
    x = add_unit(b, x, UnitKind("cir", 4, 2, 8), "conv2.block1")
    x = add_unit(b, x, UnitKind("cir-d", 8, 4, 16), "conv3.block1")
    return b.build(x)


def tiny_padded_graph(in_channels: int = 1):
    """Same layout with padded residual units and no crops."""
    b = GraphBuilder("tiny-padded", in_channels=in_channels)
    x = b.conv_norm("conv1", b.input_id, 4, 7, 2, 3)
    x = b.maxpool("conv2.pool", x, 2, 2)
    x = add_unit(b, x, UnitKind("residual", 4, 2, 8), "conv2.block1")
    x = add_unit(b, x, UnitKind("residual-down", 8, 4, 16), "conv3.block1")
    return b.build(x)


@pytest.fixture
def tiny_cir():
    return tiny_cir_graph()


@pytest.fixture
def tiny_padded():
    return tiny_padded_graph()
