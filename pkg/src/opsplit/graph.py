"""Layer graph with local/global operator classification.

A model is a DAG of layers in topological order.  Every non-global layer
is cut into operators: contiguous slices of its output along one partition
axis (height for spatial tensors, rows for matrices).  The raw model input
is represented as a pseudo-layer with id ``INPUT_ID`` so dependency code can
treat it like any other producer.
"""
from __future__ import annotations

import base64
import hashlib
import json
import math
import os
from dataclasses import dataclass
from typing import Any, Mapping, Sequence

import numpy as np

INPUT_ID = -1
MODEL_FORMAT = "opsplit-model"
MODEL_VERSION = 1

ELEMENTWISE_FNS = ("relu", "sigmoid", "silu")
BLOCKWISE_OPS = ("conv2d", "maxpool2d")
ROWWISE_OPS = ("matmul", "add")
GLOBAL_OPS = ("softmax", "flatten", "matmul")
KNOWN_OPS = ELEMENTWISE_FNS + BLOCKWISE_OPS + ("matmul", "add", "softmax", "flatten")


class ModelError(ValueError):
    """Raised for malformed model descriptions or inconsistent shapes."""


@dataclass(frozen=True)
class TensorSpec:
    dims: tuple[int, ...]
    dtype: str = "float32"

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        object.__setattr__(self, "dims", dims)
        if not dims:
            raise ModelError("tensor needs at least one dimension")
        if any(d < 1 for d in dims):
            raise ModelError(f"non-positive dimension in {dims}")
        if self.dtype != "float32":
            raise ModelError(f"unsupported dtype {self.dtype!r}")

    @property
    def ndim(self) -> int:
        return len(self.dims)

    @property
    def size(self) -> int:
        return math.prod(self.dims)

    @property
    def nbytes(self) -> int:
        return self.size * 4


# Layer kinds.  eq=False because several carry numpy constants.

@dataclass(frozen=True, eq=False)
class Input:
    pass


@dataclass(frozen=True, eq=False)
class ElementWise:
    fn: str


@dataclass(frozen=True, eq=False)
class BlockWise:
    op: str
    kernel: tuple[int, int]
    stride: tuple[int, int]
    padding: tuple[int, int]
    dilation: tuple[int, int]
    in_channels: int
    out_channels: int
    weight: np.ndarray | None = None
    bias: np.ndarray | None = None


@dataclass(frozen=True, eq=False)
class RowWise:
    """matmul or add.  ``rhs`` is a constant; ``None`` means second parent."""

    op: str
    rhs: np.ndarray | None = None
    bias: np.ndarray | None = None


@dataclass(frozen=True, eq=False)
class Global:
    op: str
    rhs: np.ndarray | None = None
    bias: np.ndarray | None = None


LayerKind = Input | ElementWise | BlockWise | RowWise | Global


@dataclass(frozen=True, eq=False)
class Layer:
    id: int
    name: str
    kind: LayerKind
    parents: tuple[int, ...]
    input_spec: TensorSpec
    output_spec: TensorSpec
    axis: int
    group: int = 1

    @property
    def is_global(self) -> bool:
        return isinstance(self.kind, Global)

    @property
    def op(self) -> str:
        kind = self.kind
        if isinstance(kind, Input):
            return "input"
        if isinstance(kind, ElementWise):
            return kind.fn
        return kind.op

    @property
    def axis_len(self) -> int:
        return self.output_spec.dims[self.axis]

    @property
    def operator_count(self) -> int:
        if self.is_global:
            return 1
        return -(-self.axis_len // self.group)

    @property
    def full_mask(self) -> int:
        return (1 << self.operator_count) - 1

    def op_range(self, k: int) -> tuple[int, int]:
        """Output index range on ``axis`` covered by operator ``k``."""
        if not 0 <= k < self.operator_count:
            raise IndexError(f"operator {k} out of range for layer {self.id}")
        if self.is_global:
            return 0, self.axis_len
        return k * self.group, min((k + 1) * self.group, self.axis_len)

    def ops_range(self, start: int, stop: int) -> tuple[int, int]:
        """Axis range spanned by the contiguous operators ``[start, stop)``."""
        return self.op_range(start)[0], self.op_range(stop - 1)[1]

    def ops_covering(self, lo: int, hi: int) -> tuple[int, int]:
        """Contiguous operator span overlapping axis indices ``[lo, hi)``."""
        if self.is_global:
            return 0, 1
        return lo // self.group, -(-hi // self.group)

    def row_bytes(self) -> int:
        """Bytes of one index along the partition axis."""
        return self.output_spec.nbytes // self.axis_len

    def slice_bytes(self, lo: int, hi: int) -> int:
        return (hi - lo) * self.row_bytes()


def partition_axis(layer: Layer) -> tuple[int, list[tuple[int, int]]]:
    """Return the partition axis of ``layer`` and the range of each operator."""
    if layer.is_global:
        raise ModelError(f"layer {layer.id} ({layer.op}) is global and has no partition axis")
    return layer.axis, [layer.op_range(k) for k in range(layer.operator_count)]


def _default_axis(dims: Sequence[int]) -> int:
    if len(dims) == 3:
        return 1
    if len(dims) == 2:
        return 0 if dims[0] > 1 else 1
    return 0


class ModelGraph:
    """Immutable, validated layer DAG."""

    def __init__(self, layers: Sequence[Layer], raw_input_spec: TensorSpec, group: int = 1):
        self.layers: tuple[Layer, ...] = tuple(layers)
        self.raw_input_spec = raw_input_spec
        self.group = group
        self.input = Layer(
            id=INPUT_ID, name="input", kind=Input(), parents=(),
            input_spec=raw_input_spec, output_spec=raw_input_spec,
            axis=_default_axis(raw_input_spec.dims), group=group,
        )
        if not self.layers:
            raise ModelError("model has no layers")
        children: dict[int, list[int]] = {INPUT_ID: []}
        for i, layer in enumerate(self.layers):
            if layer.id != i:
                raise ModelError(f"layer ids must be 0..N-1 in order, got {layer.id} at {i}")
            children[i] = []
            for p in layer.parents:
                if p >= i or p < INPUT_ID:
                    raise ModelError(f"layer {i} references parent {p}: graph is not a topological DAG")
                children[p].append(i)
        self._children = {k: tuple(v) for k, v in children.items()}
        sinks = [l.id for l in self.layers if not self._children[l.id]]
        if sinks != [len(self.layers) - 1]:
            raise ModelError(f"model must have exactly one final layer (the last); sinks: {sinks}")
        if not self._children[INPUT_ID]:
            raise ModelError("no layer consumes the model input")
        self._checksum: str | None = None

    def __len__(self) -> int:
        return len(self.layers)

    @property
    def final_layer_id(self) -> int:
        return len(self.layers) - 1

    def node(self, i: int) -> Layer:
        return self.input if i == INPUT_ID else self.layers[i]

    def children(self, i: int) -> tuple[int, ...]:
        return self._children[i]

    @property
    def checksum(self) -> str:
        if self._checksum is None:
            text = dump_model(self, inline=True)
            self._checksum = hashlib.sha256(f"{text}\ngroup={self.group}".encode()).hexdigest()
        return self._checksum

    def __repr__(self) -> str:
        ops = ",".join(l.op for l in self.layers)
        return f"ModelGraph(input={self.raw_input_spec.dims}, layers=[{ops}], group={self.group})"


# --------------------------------------------------------------------------
# Construction from a description


def _pair(value: Any, default: int | None = None, name: str = "") -> tuple[int, int]:
    if value is None:
        if default is None:
            raise ModelError(f"missing parameter {name!r}")
        value = default
    if isinstance(value, int):
        return value, value
    if len(value) != 2:
        raise ModelError(f"{name} must be an int or a pair, got {value!r}")
    return int(value[0]), int(value[1])


def _window_out(size: int, k: int, s: int, p: int, d: int) -> int:
    return (size + 2 * p - d * (k - 1) - 1) // s + 1


def _array(weights: Mapping[str, np.ndarray], ref: Any, what: str) -> np.ndarray | None:
    if ref is None:
        return None
    if isinstance(ref, str):
        if ref not in weights:
            raise ModelError(f"unknown weight tensor {ref!r} for {what}")
        return np.asarray(weights[ref], dtype=np.float32)
    return np.asarray(ref, dtype=np.float32)


def build_model(
    description: Mapping[str, Any],
    weights: Mapping[str, np.ndarray] | None = None,
    group: int = 1,
) -> ModelGraph:
    """Build a validated ``ModelGraph`` from a parsed description.

    ``description`` has ``input`` (dims) and ``layers``; each layer names its
    ``op`` and optionally ``parents`` (layer names or ``"input"``; default is
    the previous layer).  Weight references are resolved against
    ``weights`` by name, or may be given inline as nested lists.
    """
    if group < 1:
        raise ModelError("group must be >= 1")
    weights = weights or {}
    try:
        raw = TensorSpec(tuple(description["input"]))
        entries = list(description["layers"])
    except (KeyError, TypeError) as exc:
        raise ModelError(f"model description lacks input/layers: {exc}") from None

    ids: dict[str, int] = {"input": INPUT_ID}
    specs: dict[int, TensorSpec] = {INPUT_ID: raw}
    layers: list[Layer] = []
    for i, entry in enumerate(entries):
        op = entry.get("op")
        name = str(entry.get("name", f"layer{i}"))
        if op not in KNOWN_OPS:
            raise ModelError(f"layer {name!r}: unknown op {op!r}")
        if name in ids:
            raise ModelError(f"duplicate layer name {name!r}")
        parent_refs = entry.get("parents")
        if parent_refs is None:
            parent_refs = [layers[-1].name if layers else "input"]
        parents = []
        for ref in parent_refs:
            if ref not in ids:
                raise ModelError(f"layer {name!r}: parent {ref!r} is undefined or later in order (cycle)")
            parents.append(ids[ref])
        in_spec = specs[parents[0]]
        kind, out_dims = _classify(entry, name, op, in_spec, [specs[p] for p in parents], weights)
        out_spec = TensorSpec(out_dims)
        axis = 0 if isinstance(kind, Global) else _default_axis(out_dims)
        layer = Layer(id=i, name=name, kind=kind, parents=tuple(parents), input_spec=in_spec,
                      output_spec=out_spec, axis=axis, group=group)
        layers.append(layer)
        ids[name] = i
        specs[i] = out_spec
    return ModelGraph(layers, raw, group=group)


def _classify(entry, name, op, in_spec: TensorSpec, parent_specs: list[TensorSpec], weights):
    dims = in_spec.dims
    nparents = len(parent_specs)

    def expect_parents(n):
        if nparents != n:
            raise ModelError(f"layer {name!r}: {op} takes {n} input(s), got {nparents}")

    if op in ELEMENTWISE_FNS:
        expect_parents(1)
        return ElementWise(op), dims

    if op in BLOCKWISE_OPS:
        expect_parents(1)
        if len(dims) != 3:
            raise ModelError(f"layer {name!r}: {op} expects [C,H,W] input, got {list(dims)}")
        c_in, h, w = dims
        weight = _array(weights, entry.get("weight"), name)
        bias = _array(weights, entry.get("bias"), name)
        if op == "conv2d":
            if weight is None:
                raise ModelError(f"layer {name!r}: conv2d requires weights")
            if weight.ndim != 4:
                raise ModelError(f"layer {name!r}: conv2d weight must be 4-D")
            c_out = int(entry.get("out_channels", weight.shape[0]))
            if "kernel" in entry:
                kernel = _pair(entry["kernel"], name="kernel")
            else:
                kernel = (weight.shape[2], weight.shape[3])
            if weight.shape != (c_out, c_in, kernel[0], kernel[1]):
                raise ModelError(
                    f"layer {name!r}: weight shape {weight.shape} != {(c_out, c_in) + kernel}")
            if bias is not None and bias.shape != (c_out,):
                raise ModelError(f"layer {name!r}: bias shape {bias.shape} != ({c_out},)")
            stride = _pair(entry.get("stride"), 1, "stride")
        else:
            c_out = c_in
            kernel = _pair(entry.get("kernel"), None, "kernel")
            stride = _pair(entry.get("stride"), None, "stride") if "stride" in entry else kernel
            weight = bias = None
        padding = _pair(entry.get("padding"), 0, "padding")
        dilation = _pair(entry.get("dilation"), 1, "dilation")
        if "in_channels" in entry and int(entry["in_channels"]) != c_in:
            raise ModelError(f"layer {name!r}: in_channels {entry['in_channels']} != input channels {c_in}")
        if min(kernel + stride + dilation) < 1 or min(padding) < 0:
            raise ModelError(f"layer {name!r}: kernel/stride/dilation must be >= 1 and padding >= 0")
        for k, p, d in zip(kernel, padding, dilation):
            limit = d * (k - 1) if op == "conv2d" else k // 2
            if p > limit:
                raise ModelError(f"layer {name!r}: padding {p} exceeds {limit}")
        h_out = _window_out(h, kernel[0], stride[0], padding[0], dilation[0])
        w_out = _window_out(w, kernel[1], stride[1], padding[1], dilation[1])
        if h_out < 1 or w_out < 1:
            raise ModelError(f"layer {name!r}: window larger than input {list(dims)}")
        kind = BlockWise(op, kernel, stride, padding, dilation, c_in, c_out, weight, bias)
        return kind, (c_out, h_out, w_out)

    if op == "add":
        if nparents == 2:
            if parent_specs[1].dims != dims:
                raise ModelError(f"layer {name!r}: add operands differ: {list(dims)} vs {list(parent_specs[1].dims)}")
            return RowWise("add"), dims
        expect_parents(1)
        rhs = _array(weights, entry.get("rhs"), name)
        if rhs is None or rhs.shape != dims:
            raise ModelError(f"layer {name!r}: add constant must have shape {list(dims)}")
        return RowWise("add", rhs=rhs), dims

    if op == "matmul":
        if len(dims) != 2:
            raise ModelError(f"layer {name!r}: matmul expects a 2-D input, got {list(dims)}")
        rows, k = dims
        bias = _array(weights, entry.get("bias"), name)
        if nparents == 2:
            rhs = None
            rhs_dims = parent_specs[1].dims
        else:
            expect_parents(1)
            rhs = _array(weights, entry.get("weight", entry.get("rhs")), name)
            if rhs is None:
                raise ModelError(f"layer {name!r}: matmul requires a weight matrix or a second input")
            rhs_dims = rhs.shape
        if len(rhs_dims) != 2 or rhs_dims[0] != k:
            raise ModelError(f"layer {name!r}: cannot multiply {list(dims)} by {list(rhs_dims)}")
        n = rhs_dims[1]
        if bias is not None and bias.shape != (n,):
            raise ModelError(f"layer {name!r}: bias shape {bias.shape} != ({n},)")
        # a single-row product needs its whole input: global operator
        if rows == 1:
            return Global("matmul", rhs=rhs, bias=bias), (1, n)
        return RowWise("matmul", rhs=rhs, bias=bias), (rows, n)

    if op == "softmax":
        expect_parents(1)
        return Global("softmax"), dims

    if op == "flatten":
        expect_parents(1)
        return Global("flatten"), (1, in_spec.size)

    raise ModelError(f"layer {name!r}: unknown op {op!r}")  # pragma: no cover


# --------------------------------------------------------------------------
# Text format

def _weights_of(graph: ModelGraph) -> tuple[list[dict], dict[str, np.ndarray]]:
    entries = []
    tensors: dict[str, np.ndarray] = {}
    names = {l.id: l.name for l in graph.layers}
    names[INPUT_ID] = "input"
    for layer in graph.layers:
        entry: dict[str, Any] = {"name": layer.name, "op": layer.op,
                                 "parents": [names[p] for p in layer.parents]}
        kind = layer.kind
        if isinstance(kind, BlockWise):
            entry.update(kernel=list(kind.kernel), stride=list(kind.stride),
                         padding=list(kind.padding), dilation=list(kind.dilation))
            if kind.op == "conv2d":
                entry["out_channels"] = kind.out_channels
        for attr, key in (("weight", "weight"), ("rhs", "weight" if layer.op == "matmul" else "rhs"),
                          ("bias", "bias")):
            value = getattr(kind, attr, None)
            if value is not None:
                tname = f"{layer.name}.{key}"
                tensors[tname] = value
                entry[key] = tname
        entries.append(entry)
    return entries, tensors


def _pack(tensors: Mapping[str, np.ndarray]) -> tuple[bytes, dict[str, dict]]:
    manifest = {}
    chunks = []
    offset = 0
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f4")
        manifest[name] = {"offset": offset, "dims": list(arr.shape)}
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    return b"".join(chunks), manifest


def _unpack(blob: bytes, manifest: Mapping[str, Mapping]) -> dict[str, np.ndarray]:
    out = {}
    for name, meta in manifest.items():
        dims = tuple(meta["dims"])
        count = math.prod(dims)
        start = int(meta["offset"])
        if start < 0 or start + 4 * count > len(blob):
            raise ModelError(f"weight {name!r} lies outside the weight blob")
        out[name] = np.frombuffer(blob, dtype="<f4", count=count, offset=start).astype(np.float32).reshape(dims)
    return out


def dump_model(graph: ModelGraph, inline: bool = True, blob_name: str | None = None) -> str:
    """Serialize to the versioned model text.  ``inline`` embeds the weights."""
    entries, tensors = _weights_of(graph)
    blob, manifest = _pack(tensors)
    weights: dict[str, Any] = {"tensors": manifest}
    if inline:
        weights["inline"] = base64.b64encode(blob).decode("ascii")
    else:
        weights["file"] = blob_name
    doc = {"format": MODEL_FORMAT, "version": MODEL_VERSION,
           "input": list(graph.raw_input_spec.dims), "layers": entries, "weights": weights}
    return json.dumps(doc, sort_keys=True, indent=1)


def parse_model(text: str, base_dir: str | os.PathLike | None = None, group: int = 1) -> ModelGraph:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ModelError(f"model text is not valid JSON: {exc}") from None
    if doc.get("format") != MODEL_FORMAT:
        raise ModelError(f"not an {MODEL_FORMAT} document")
    if doc.get("version") != MODEL_VERSION:
        raise ModelError(f"unsupported model version {doc.get('version')!r}")
    wdoc = doc.get("weights") or {}
    manifest = wdoc.get("tensors", {})
    if "inline" in wdoc:
        blob = base64.b64decode(wdoc["inline"])
    elif wdoc.get("file"):
        path = os.path.join(base_dir or ".", wdoc["file"])
        with open(path, "rb") as fh:
            blob = fh.read()
    else:
        blob = b""
    return build_model(doc, _unpack(blob, manifest), group=group)


def load_model(path: str | os.PathLike, group: int = 1) -> ModelGraph:
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    return parse_model(text, base_dir=os.path.dirname(os.path.abspath(path)), group=group)


def save_model(graph: ModelGraph, path: str | os.PathLike) -> None:
    """Write the model text plus a ``.bin`` little-endian float32 sidecar."""
    path = os.fspath(path)
    stem = os.path.splitext(path)[0]
    blob_path = stem + ".bin"
    _, tensors = _weights_of(graph)
    blob, _ = _pack(tensors)
    with open(blob_path, "wb") as fh:
        fh.write(blob)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dump_model(graph, inline=False, blob_name=os.path.basename(blob_path)))
        fh.write("\n")
