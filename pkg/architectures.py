"""
Residual unit and backbone builders.

Units: the original residual and downsampling units, and the
cropping-inside variants (CIR, CIR-D, CIR-Inception, CIR-NeXt).
Networks: CIResNet-16/19/22/43, CIResInception-22, CIResNeXt-22, the
padding-free AlexNet baseline, and padded ablation counterparts.
"""

from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

from cir_errors import GraphError
from layer_graph import Graph, GraphBuilder

UNIT_VARIANTS = ("residual", "residual-down", "residual-down-crop",
                 "cir", "cir-d", "cir-inception", "cir-next")

# Variants whose downsampling is done by a trailing 2x2 max-pool.
POOLED_VARIANTS = ("cir-d",)

# Non-strided cropping units; only these can run an even (unpadded) bottleneck kernel.
EVEN_KERNEL_VARIANTS = ("cir", "cir-d", "cir-inception", "cir-next")

CIR_FAMILY = ("ciresnet16", "ciresnet19", "ciresnet22",
              "ciresincep22", "ciresnext22", "ciresnet43")

BUILTIN_ARCHITECTURES = CIR_FAMILY + (
    "alexnet-siam", "resnet22-padded",
    "ciresnet22-down-original", "ciresnet22-down-crop",
)

ARCHITECTURE_DESCRIPTIONS: Dict[str, str] = {
    "ciresnet16": "3 stages, stride 8, CIR x1 + CIR-D/CIR x4",
    "ciresnet19": "3 stages, stride 8, CIR x2 + CIR-D/CIR x4",
    "ciresnet22": "3 stages, stride 8, CIR x3 + CIR-D/CIR x4",
    "ciresincep22": "CIResNet-22 layout with CIR-Inception units",
    "ciresnext22": "CIResNet-22 layout with CIR-NeXt units (C=32)",
    "ciresnet43": "2 stages, stride 4, 14 CIR units with CIR-D in block 4",
    "alexnet-siam": "5-layer padding-free AlexNet, stride 8",
    "resnet22-padded": "CIResNet-22 layout with original padded residual units",
    "ciresnet22-down-original": "CIResNet-22 with the original downsampling unit in conv3",
    "ciresnet22-down-crop": "CIResNet-22 with crop-after-add downsampling (stride kept in conv)",
}

# (conv2 blocks, conv3 blocks)
STAGE_BLOCKS: Dict[str, Tuple[int, int]] = {
    "ciresnet16": (1, 4),
    "ciresnet19": (2, 4),
    "ciresnet22": (3, 4),
    "ciresincep22": (3, 4),
    "ciresnext22": (3, 4),
    "ciresnet43": (14, 0),
    "resnet22-padded": (3, 4),
}

NEXT_CARDINALITY = 32


@dataclass(frozen=True)
class UnitKind:
    """Wiring of one residual unit."""
    variant: str
    in_channels: int
    mid_channels: int
    out_channels: int
    cardinality: int = 1  # grouped bottleneck, cir-next only
    shortcut_channels: int = 0  # 1x1 shortcut width, cir-inception only
    downsample: bool = False  # trailing max-pool for cir-inception / cir-next
    bottleneck_kernel: int = 3  # odd: padding and crop margin (k-1)/2; even: unpadded trunk

    def __post_init__(self):
        if self.variant not in UNIT_VARIANTS:
            raise GraphError(f"unknown unit variant '{self.variant}'")
        if min(self.in_channels, self.mid_channels, self.out_channels) < 1:
            raise GraphError("unit channel counts must be positive", variant=self.variant)
        if self.bottleneck_kernel < 1:
            raise GraphError("bottleneck kernel must be positive", kernel=self.bottleneck_kernel)
        if self.bottleneck_kernel % 2 == 0 and self.variant not in EVEN_KERNEL_VARIANTS:
            raise GraphError("even bottleneck kernels need a non-strided cropping unit",
                             variant=self.variant, kernel=self.bottleneck_kernel)
        if self.variant == "cir-next":
            if self.cardinality < 1 or self.mid_channels % self.cardinality:
                raise GraphError("cardinality must divide mid channels",
                                 mid=self.mid_channels, cardinality=self.cardinality)
        else:
            if self.cardinality != 1:
                raise GraphError("cardinality applies to cir-next only", variant=self.variant)
            if self.out_channels != 4 * self.mid_channels:
                raise GraphError("bottleneck output must be 4x mid channels",
                                 variant=self.variant, mid=self.mid_channels,
                                 out=self.out_channels)
        if self.variant == "cir-inception" and self.shortcut_channels < 1:
            raise GraphError("cir-inception needs a positive shortcut width")
        if self.downsample and self.variant not in ("cir-inception", "cir-next"):
            raise GraphError("downsample flag applies to cir-inception / cir-next",
                             variant=self.variant)

    @property
    def padding(self) -> int:
        if self.bottleneck_kernel % 2 == 0:
            return 0
        return (self.bottleneck_kernel - 1) // 2

    @property
    def shortcut_crop(self) -> Tuple[int, int]:
        """(top/left, bottom/right) margins aligning the shortcut with an unpadded even trunk."""
        k = self.bottleneck_kernel
        if k % 2:
            return 0, 0
        return (k - 1) // 2, k // 2

    @property
    def has_crop(self) -> bool:
        return self.variant not in ("residual", "residual-down")

    @property
    def pools(self) -> bool:
        return self.variant in POOLED_VARIANTS or self.downsample

    @property
    def merged_channels(self) -> int:
        if self.variant == "cir-inception":
            return self.out_channels + self.shortcut_channels
        return self.out_channels


def _align_shortcut(b: GraphBuilder, s: str, kind: UnitKind, prefix: str) -> str:
    top, bottom = kind.shortcut_crop
    if top or bottom:
        return b.crop(f"{prefix}.shortcut.crop", s, top, bottom)
    return s


def add_unit(b: GraphBuilder, src: str, kind: UnitKind, prefix: str) -> str:
    """Append one unit after node `src`; returns the unit's output node id."""
    if b.channels[src] != kind.in_channels:
        raise GraphError("unit input channels do not match producer", node=src,
                         expected=kind.in_channels, got=b.channels[src])
    strided = kind.variant in ("residual-down", "residual-down-crop")
    stride = 2 if strided else 1
    groups = kind.cardinality if kind.variant == "cir-next" else 1

    x = b.conv_norm(f"{prefix}.a", src, kind.mid_channels, 1, 1, 0)
    x = b.conv_norm(f"{prefix}.b", x, kind.mid_channels, kind.bottleneck_kernel,
                    stride, kind.padding, groups=groups)
    x = b.conv_norm(f"{prefix}.c", x, kind.out_channels, 1, 1, 0, activate=False)

    if kind.variant == "cir-inception":
        s = b.conv_norm(f"{prefix}.shortcut", src, kind.shortcut_channels, 1, 1, 0,
                        shortcut=True, activate=False)
        s = _align_shortcut(b, s, kind, prefix)
        x = b.concat(f"{prefix}.concat", x, s)
    else:
        s = src
        if strided or kind.in_channels != kind.out_channels:
            s = b.conv_norm(f"{prefix}.shortcut", src, kind.out_channels, 1, stride, 0,
                            shortcut=True, activate=False)
        s = _align_shortcut(b, s, kind, prefix)
        x = b.add(f"{prefix}.add", x, s)
    x = b.relu(f"{prefix}.relu", x)

    if kind.has_crop:
        margin = 1 if strided else kind.padding
        if margin:
            x = b.crop(f"{prefix}.crop", x, margin)
    if kind.pools:
        x = b.maxpool(f"{prefix}.pool", x, 2, 2)
    return x


def build_unit(kind: UnitKind, name: Optional[str] = None) -> Graph:
    """A standalone graph holding a single unit fed by an input node."""
    b = GraphBuilder(name or kind.variant, in_channels=kind.in_channels)
    out = add_unit(b, b.input_id, kind, "unit")
    return b.build(out)


# ---------------------------------------------------------------------------
# Networks
# ---------------------------------------------------------------------------

def _stage_unit(family: str, role: str, in_channels: int, mid: int,
                kernel: int, down_unit: str) -> UnitKind:
    """
    role is 'plain' or 'down'; family is resnet / inception / next / padded.
    """
    out = 4 * mid
    if family == "inception":
        return UnitKind("cir-inception", in_channels, mid, out,
                        shortcut_channels=mid, downsample=(role == "down"),
                        bottleneck_kernel=kernel)
    if family == "next":
        width = 2 * mid
        return UnitKind("cir-next", in_channels, width, out,
                        cardinality=NEXT_CARDINALITY, downsample=(role == "down"),
                        bottleneck_kernel=kernel)
    if family == "padded":
        return UnitKind("residual-down" if role == "down" else "residual",
                        in_channels, mid, out, bottleneck_kernel=kernel)
    variant = down_unit if role == "down" else "cir"
    return UnitKind(variant, in_channels, mid, out, bottleneck_kernel=kernel)


def _family(name: str) -> str:
    if name == "ciresincep22":
        return "inception"
    if name == "ciresnext22":
        return "next"
    if name == "resnet22-padded":
        return "padded"
    return "resnet"


def _stage_plan(name: str, extra_downsample: bool) -> List[Tuple[str, int, int, str]]:
    """(stage, block index, mid width, role) for every unit."""
    conv2, conv3 = STAGE_BLOCKS[name]
    plan: List[Tuple[str, int, int, str]] = []
    for i in range(conv2):
        role = "down" if (name == "ciresnet43" and i == 3) else "plain"
        plan.append(("conv2", i + 1, 64, role))
    for i in range(conv3):
        plan.append(("conv3", i + 1, 128, "down" if i == 0 else "plain"))
    if extra_downsample:
        stage, index, mid, _ = plan[-1]
        plan[-1] = (stage, index, mid, "down")
    return plan


def _build_resnet_like(name: str, base: str, stem_padding: int,
                       last_kernel: Optional[int], extra_downsample: bool,
                       down_unit: str) -> Graph:
    family = _family(base)
    padded = family == "padded"
    b = GraphBuilder(name)
    x = b.conv_norm("conv1", b.input_id, 64, 7, 2, stem_padding)
    if not padded:
        x = b.crop("conv1.crop", x, 2)
    if base != "ciresnet43":
        x = b.maxpool("conv2.pool", x, 2, 2)

    plan = _stage_plan(base, extra_downsample)
    for position, (stage, index, mid, role) in enumerate(plan):
        kernel = 3
        if last_kernel is not None and position == len(plan) - 1:
            kernel = last_kernel
        kind = _stage_unit(family, role, b.channels[x], mid, kernel, down_unit)
        x = add_unit(b, x, kind, f"{stage}.block{index}")
    return b.build(x)


def _build_alexnet(name: str) -> Graph:
    """Padding-free AlexNet: RF 87, stride 8, 6x6 output on a 127 exemplar."""
    b = GraphBuilder(name)
    x = b.conv_norm("conv1", b.input_id, 96, 11, 2, 0)
    x = b.maxpool("pool1", x, 3, 2)
    x = b.conv_norm("conv2", x, 256, 5, 1, 0, groups=2)
    x = b.maxpool("pool2", x, 3, 2)
    x = b.conv_norm("conv3", x, 384, 3, 1, 0)
    x = b.conv_norm("conv4", x, 384, 3, 1, 0, groups=2)
    x = b.conv("conv5.conv", x, 256, 3, 1, 0, groups=2, bias=True)
    return b.build(x)


def build_architecture(name: str,
                       stem_padding: int = 3,
                       last_kernel: Optional[int] = None,
                       extra_downsample: bool = False,
                       down_unit: str = "cir-d") -> Graph:
    """
    Build a named backbone.

    stem_padding, last_kernel, extra_downsample and down_unit produce the
    ablation variants of the residual networks; alexnet-siam ignores them.
    """
    if name not in BUILTIN_ARCHITECTURES:
        raise GraphError(f"unknown architecture '{name}'",
                         known=",".join(BUILTIN_ARCHITECTURES))
    if down_unit not in ("cir-d", "residual-down", "residual-down-crop"):
        raise GraphError(f"unknown downsampling unit '{down_unit}'")
    if name == "alexnet-siam":
        return _build_alexnet(name)

    base = name
    if name == "ciresnet22-down-original":
        base, down_unit = "ciresnet22", "residual-down"
    elif name == "ciresnet22-down-crop":
        base, down_unit = "ciresnet22", "residual-down-crop"
    return _build_resnet_like(name, base, stem_padding, last_kernel,
                              extra_downsample, down_unit)


def is_cir_family(name: str) -> bool:
    return name in CIR_FAMILY
