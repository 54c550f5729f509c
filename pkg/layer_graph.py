"""
Layer graph for the Siamese backbones.

Provides:
- LayerNode / Graph data model (acyclic by construction: inputs must precede)
- GraphBuilder used by the unit and architecture builders
- Forward execution through tensor_kernels
- Seeded initialization, CIRW weight files, and the line-oriented
  architecture text format
"""

import logging
import struct
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np

import tensor_kernels as tk
from cir_errors import GraphError, TensorShapeError, WeightsError
from tensor_kernels import ConvParams, Tensor

logger = logging.getLogger(__name__)

WEIGHTS_MAGIC = b"CIRW"
WEIGHTS_VERSION = 1

NODE_KINDS = ("input", "conv", "maxpool", "crop", "norm", "relu", "add", "concat")

REQUIRED_PARAMS: Dict[str, Tuple[str, ...]] = {
    "input": ("channels",),
    "conv": ("in_channels", "out_channels", "kernel_h", "kernel_w",
             "stride", "padding", "groups"),
    "maxpool": ("kernel", "stride"),
    "crop": ("margin",),
    "norm": ("channels",),
    "relu": (),
    "add": (),
    "concat": (),
}

OPTIONAL_PARAMS: Dict[str, Dict[str, Any]] = {
    "conv": {"bias": False, "shortcut": False},
    "norm": {"eps": 1e-5},
}

BOOL_PARAMS = ("bias", "shortcut")
FLOAT_PARAMS = ("eps",)


def _arity(kind: str) -> int:
    return {"input": 0, "add": 2, "concat": 2}.get(kind, 1)


@dataclass(frozen=True)
class LayerNode:
    """A single typed layer; `inputs` lists producer node ids."""
    id: str
    kind: str
    params: Dict[str, Any] = field(default_factory=dict)
    inputs: Tuple[str, ...] = ()

    def __post_init__(self):
        if self.kind not in NODE_KINDS:
            raise GraphError(f"unknown node kind '{self.kind}'", node=self.id)
        inputs = tuple(self.inputs)
        if len(inputs) != _arity(self.kind):
            raise GraphError(f"{self.kind} node needs {_arity(self.kind)} inputs",
                             node=self.id, got=len(inputs))
        params = dict(OPTIONAL_PARAMS.get(self.kind, {}))
        params.update(self.params)
        missing = [k for k in REQUIRED_PARAMS[self.kind] if k not in params]
        if missing:
            raise GraphError(f"{self.kind} node lacks explicit parameters",
                             node=self.id, missing=",".join(missing))
        object.__setattr__(self, "params", params)
        object.__setattr__(self, "inputs", inputs)


@dataclass
class Graph:
    """Directed acyclic layer graph with named parameter arrays."""
    name: str
    nodes: Dict[str, LayerNode]
    output: str
    weights: Dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        seen = set()
        sources = []
        for node_id, node in self.nodes.items():
            if node_id != node.id:
                raise GraphError("node key does not match node id", node=node_id)
            for src in node.inputs:
                if src not in seen:
                    raise GraphError(f"input '{src}' is undefined or not topologically earlier",
                                     node=node_id)
            if node.kind == "input":
                sources.append(node_id)
            seen.add(node_id)
        if len(sources) != 1:
            raise GraphError("graph must have exactly one input node", sources=len(sources))
        if self.output not in self.nodes:
            raise GraphError("output node is not in the graph", node=self.output)

    @property
    def source(self) -> str:
        return next(n.id for n in self.nodes.values() if n.kind == "input")

    def node(self, node_id: str) -> LayerNode:
        try:
            return self.nodes[node_id]
        except KeyError:
            raise GraphError("no such node", node=node_id) from None

    def with_weights(self, weights: Dict[str, np.ndarray]) -> "Graph":
        return replace(self, weights=dict(weights))


class GraphBuilder:
    """Incrementally assembles a Graph, tracking channel counts per node."""

    def __init__(self, name: str, in_channels: int = 3, input_id: str = "image"):
        self.name = name
        self.nodes: Dict[str, LayerNode] = {}
        self.channels: Dict[str, int] = {}
        self.input_id = input_id
        self._add(LayerNode(input_id, "input", {"channels": in_channels}), in_channels)

    def _add(self, node: LayerNode, channels: int) -> str:
        if node.id in self.nodes:
            raise GraphError("duplicate node id", node=node.id)
        self.nodes[node.id] = node
        self.channels[node.id] = channels
        return node.id

    def conv(self, node_id: str, src: str, out_channels: int, kernel: int,
             stride: int, padding: int, groups: int = 1,
             shortcut: bool = False, bias: bool = False) -> str:
        params = {
            "in_channels": self.channels[src], "out_channels": out_channels,
            "kernel_h": kernel, "kernel_w": kernel, "stride": stride,
            "padding": padding, "groups": groups, "bias": bias, "shortcut": shortcut,
        }
        return self._add(LayerNode(node_id, "conv", params, (src,)), out_channels)

    def norm(self, node_id: str, src: str) -> str:
        c = self.channels[src]
        return self._add(LayerNode(node_id, "norm", {"channels": c}, (src,)), c)

    def relu(self, node_id: str, src: str) -> str:
        return self._add(LayerNode(node_id, "relu", {}, (src,)), self.channels[src])

    def maxpool(self, node_id: str, src: str, kernel: int, stride: int) -> str:
        return self._add(LayerNode(node_id, "maxpool", {"kernel": kernel, "stride": stride}, (src,)),
                         self.channels[src])

    def crop(self, node_id: str, src: str, margin: int, margin_end: Optional[int] = None) -> str:
        params = {"margin": margin}
        if margin_end is not None and margin_end != margin:
            params["margin_end"] = margin_end
        return self._add(LayerNode(node_id, "crop", params, (src,)), self.channels[src])

    def add(self, node_id: str, a: str, b: str) -> str:
        if self.channels[a] != self.channels[b]:
            raise GraphError("add branches have different channel counts", node=node_id,
                             left=self.channels[a], right=self.channels[b])
        return self._add(LayerNode(node_id, "add", {}, (a, b)), self.channels[a])

    def concat(self, node_id: str, a: str, b: str) -> str:
        return self._add(LayerNode(node_id, "concat", {}, (a, b)),
                         self.channels[a] + self.channels[b])

    def conv_norm(self, prefix: str, src: str, out_channels: int, kernel: int,
                  stride: int, padding: int, groups: int = 1,
                  shortcut: bool = False, activate: bool = True) -> str:
        """conv -> norm (-> relu), the post-activation convention."""
        x = self.conv(f"{prefix}.conv", src, out_channels, kernel, stride, padding,
                      groups=groups, shortcut=shortcut)
        x = self.norm(f"{prefix}.norm", x)
        if activate:
            x = self.relu(f"{prefix}.relu", x)
        return x

    def build(self, output: Optional[str] = None) -> Graph:
        last = next(reversed(self.nodes))
        return Graph(self.name, dict(self.nodes), output or last)


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------

BUFFER_SUFFIXES = (".mean", ".var")


def parameter_shapes(graph: Graph) -> Dict[str, Tuple[int, ...]]:
    """Expected parameter arrays, in node order."""
    shapes: Dict[str, Tuple[int, ...]] = {}
    for node in graph.nodes.values():
        p = node.params
        if node.kind == "conv":
            shapes[f"{node.id}.weight"] = (p["out_channels"], p["in_channels"] // p["groups"],
                                           p["kernel_h"], p["kernel_w"])
            if p["bias"]:
                shapes[f"{node.id}.bias"] = (p["out_channels"],)
        elif node.kind == "norm":
            for suffix in ("scale", "shift", "mean", "var"):
                shapes[f"{node.id}.{suffix}"] = (p["channels"],)
    return shapes


def is_buffer(name: str) -> bool:
    """Running statistics are buffers rather than learned parameters."""
    return name.endswith(BUFFER_SUFFIXES)


def weighted_layer_count(graph: Graph) -> int:
    """Number of conv layers outside shortcut connections."""
    return sum(1 for n in graph.nodes.values()
               if n.kind == "conv" and not n.params["shortcut"])


def init_random(graph: Graph, seed: int, mode: str = "uniform") -> Graph:
    """
    Seeded weights.

    uniform:  conv ~ U(-sqrt(6/fan_in), sqrt(6/fan_in))
    positive: conv ~ U(0, 2/fan_in), so every dependency is strictly increasing
    Norm layers start at identity (scale 1, shift 0, mean 0, var 1).
    """
    if mode not in ("uniform", "positive"):
        raise GraphError(f"unknown init mode '{mode}'")
    rng = np.random.default_rng(seed)
    weights: Dict[str, np.ndarray] = {}
    for name, shape in parameter_shapes(graph).items():
        node_id, suffix = name.rsplit(".", 1)
        if suffix in ("weight", "bias"):
            p = graph.nodes[node_id].params
            fan_in = (p["in_channels"] // p["groups"]) * p["kernel_h"] * p["kernel_w"]
            if mode == "positive":
                high = 2.0 / fan_in if suffix == "weight" else 1.0 / fan_in
                arr = rng.uniform(0.0, high, size=shape)
            else:
                bound = np.sqrt(6.0 / fan_in) if suffix == "weight" else 1.0 / np.sqrt(fan_in)
                arr = rng.uniform(-bound, bound, size=shape)
        elif suffix in ("scale", "var"):
            arr = np.ones(shape)
        else:
            arr = np.zeros(shape)
        weights[name] = arr.astype(np.float32)
    return graph.with_weights(weights)


def _check_weights(graph: Graph) -> None:
    missing = [n for n in parameter_shapes(graph) if n not in graph.weights]
    if missing:
        raise WeightsError("weights not loaded for graph", missing=missing)


def save_weights(graph: Graph, path: Union[str, Path]) -> None:
    """Write all parameter arrays in CIRW format."""
    _check_weights(graph)
    names = list(parameter_shapes(graph))
    chunks = [WEIGHTS_MAGIC, struct.pack("<II", WEIGHTS_VERSION, len(names))]
    for name in names:
        arr = np.asarray(graph.weights[name], dtype="<f4")
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(encoded)) + encoded)
        chunks.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes(order="C"))
    Path(path).write_bytes(b"".join(chunks))
    logger.info("Saved %d parameter arrays to %s", len(names), path)


def read_weights_file(path: Union[str, Path]) -> Dict[str, np.ndarray]:
    raw = Path(path).read_bytes()
    if raw[:4] != WEIGHTS_MAGIC:
        raise WeightsError("not a CIRW weights file", path=str(path))
    if len(raw) < 12:
        raise WeightsError("truncated CIRW header", path=str(path), size=len(raw))
    version, count = struct.unpack_from("<II", raw, 4)
    if version != WEIGHTS_VERSION:
        raise WeightsError("unsupported CIRW version", got=version)
    offset = 12
    entries: Dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (name_len,) = struct.unpack_from("<I", raw, offset)
            offset += 4
            name = raw[offset:offset + name_len].decode("utf-8")
            offset += name_len
            (rank,) = struct.unpack_from("<I", raw, offset)
            offset += 4
            dims = struct.unpack_from(f"<{rank}I", raw, offset)
            offset += 4 * rank
            size = int(np.prod(dims)) if rank else 1
            entries[name] = np.frombuffer(raw, dtype="<f4", count=size,
                                          offset=offset).reshape(dims).astype(np.float32)
            offset += 4 * size
    except (struct.error, ValueError) as exc:
        raise WeightsError("truncated CIRW weights file", path=str(path)) from exc
    return entries


def load_weights(graph: Graph, path: Union[str, Path]) -> Graph:
    """Return a copy of `graph` carrying the weights stored at `path`."""
    entries = read_weights_file(path)
    expected = parameter_shapes(graph)
    missing = [n for n in expected if n not in entries]
    extra = [n for n in entries if n not in expected]
    if missing or extra:
        raise WeightsError("weights manifest does not match graph", missing=missing, extra=extra)
    for name, shape in expected.items():
        if tuple(entries[name].shape) != tuple(shape):
            raise WeightsError("parameter shape mismatch", name=name,
                               expected=shape, got=tuple(entries[name].shape))
    logger.info("Loaded %d parameter arrays from %s", len(entries), path)
    return graph.with_weights(entries)


# ---------------------------------------------------------------------------
# Forward
# ---------------------------------------------------------------------------

def conv_params(graph: Graph, node: LayerNode) -> ConvParams:
    p = node.params
    return ConvParams(
        out_channels=p["out_channels"], in_channels=p["in_channels"],
        kernel_h=p["kernel_h"], kernel_w=p["kernel_w"],
        stride=p["stride"], padding=p["padding"], groups=p["groups"],
        weights=graph.weights[f"{node.id}.weight"],
        bias=graph.weights.get(f"{node.id}.bias") if p["bias"] else None,
    )


def _last_use(graph: Graph) -> Dict[str, str]:
    last: Dict[str, str] = {}
    for node in graph.nodes.values():
        for src in node.inputs:
            last[src] = node.id
    return last


def forward(graph: Graph,
            input: Tensor,
            record_intermediates: bool = False,
            pad_value: float = 0.0) -> Union[Tensor, Tuple[Tensor, Dict[str, Tensor]]]:
    """
    Evaluate the graph in topological order.

    Returns the output tensor, or (output, {node_id: tensor}) when
    `record_intermediates` is set.
    """
    _check_weights(graph)
    last_use = _last_use(graph)
    values: Dict[str, Tensor] = {}
    started = time.perf_counter()
    for node in graph.nodes.values():
        args = [values[src] for src in node.inputs]
        try:
            values[node.id] = _apply(graph, node, args, input, pad_value)
        except TensorShapeError as exc:
            raise GraphError(f"forward failed: {exc.message}", node=node.id,
                             **exc.details) from exc
        if not record_intermediates:
            for src in node.inputs:
                if last_use.get(src) == node.id and src != graph.output:
                    values.pop(src, None)
    logger.debug("forward %s on %s took %.3fs", graph.name, input.shape,
                 time.perf_counter() - started)
    output = values[graph.output]
    if record_intermediates:
        return output, values
    return output


def _apply(graph: Graph, node: LayerNode, args: List[Tensor],
           image: Tensor, pad_value: float) -> Tensor:
    p = node.params
    kind = node.kind
    if kind == "input":
        if image.channels != p["channels"]:
            raise TensorShapeError("input channels do not match graph input",
                                   dimension="channels", expected=p["channels"],
                                   got=image.channels)
        return image
    if kind == "conv":
        return tk.conv2d(args[0], conv_params(graph, node), pad_value=pad_value)
    if kind == "maxpool":
        return tk.maxpool2d(args[0], p["kernel"], p["stride"])
    if kind == "crop":
        return tk.crop(args[0], p["margin"], p.get("margin_end"))
    if kind == "norm":
        w = graph.weights
        return tk.norm_inference(args[0], w[f"{node.id}.scale"], w[f"{node.id}.shift"],
                                 w[f"{node.id}.mean"], w[f"{node.id}.var"], p["eps"])
    if kind == "relu":
        return tk.relu(args[0])
    if kind == "add":
        return tk.add(args[0], args[1])
    return tk.concat_channels(args[0], args[1])


# ---------------------------------------------------------------------------
# Architecture text format
# ---------------------------------------------------------------------------

def _format_value(value: Any) -> str:
    if isinstance(value, bool):
        return "1" if value else "0"
    return repr(value) if isinstance(value, float) else str(value)


def dump_architecture(graph: Graph) -> str:
    """One node per line: `id kind key=value... inputs=a,b`."""
    lines = [f"# arch {graph.name}", f"# output {graph.output}"]
    for node in graph.nodes.values():
        parts = [node.id, node.kind]
        parts += [f"{k}={_format_value(v)}" for k, v in node.params.items()]
        if node.inputs:
            parts.append("inputs=" + ",".join(node.inputs))
        lines.append(" ".join(parts))
    return "\n".join(lines) + "\n"


def _parse_value(key: str, raw: str) -> Any:
    if key in BOOL_PARAMS:
        if raw not in ("0", "1", "true", "false"):
            raise GraphError(f"boolean parameter '{key}' must be 0 or 1", value=raw)
        return raw in ("1", "true")
    try:
        return float(raw) if key in FLOAT_PARAMS else int(raw)
    except ValueError:
        raise GraphError(f"parameter '{key}' is not numeric", value=raw) from None


def parse_architecture(text: str, name: Optional[str] = None) -> Graph:
    """Inverse of dump_architecture; errors name the offending line."""
    nodes: Dict[str, LayerNode] = {}
    arch_name, output = name, None
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.strip()
        if not stripped:
            continue
        if stripped.startswith("#"):
            words = stripped[1:].split()
            if len(words) == 2 and words[0] == "arch" and arch_name is None:
                arch_name = words[1]
            elif len(words) == 2 and words[0] == "output":
                output = words[1]
            continue
        fields = stripped.split()
        if len(fields) < 2:
            raise GraphError("line needs at least an id and a kind", line=lineno)
        node_id, kind = fields[0], fields[1]
        params: Dict[str, Any] = {}
        inputs: Tuple[str, ...] = ()
        for item in fields[2:]:
            if "=" not in item:
                raise GraphError(f"expected key=value, got '{item}'", node=node_id, line=lineno)
            key, raw = item.split("=", 1)
            if key == "inputs":
                inputs = tuple(s for s in raw.split(",") if s)
            else:
                params[key] = _parse_value(key, raw)
        if node_id in nodes:
            raise GraphError("duplicate node id", node=node_id, line=lineno)
        nodes[node_id] = LayerNode(node_id, kind, params, inputs)
    if not nodes:
        raise GraphError("architecture text contains no nodes")
    return Graph(arch_name or "custom", nodes, output or next(reversed(nodes)))


def load_architecture_file(path: Union[str, Path]) -> Graph:
    path = Path(path)
    return parse_architecture(path.read_text(), name=None)
