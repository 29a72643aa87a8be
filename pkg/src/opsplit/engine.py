"""Reference kernels for every supported layer, on full tensors or fragments.

Convolution and matrix products accumulate in a fixed order (input channel,
then kernel row, then kernel column; or inner index ascending) with plain
float32 elementwise arithmetic, so a fragment computed on either device is
bit-identical to the matching slice of the full result.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .graph import INPUT_ID, BlockWise, ElementWise, Global, Layer, ModelGraph, RowWise, TensorSpec
from .lop import input_region, window_rows

F32 = np.float32


class EngineError(ValueError):
    pass


class CombineError(EngineError):
    pass


@dataclass(frozen=True, eq=False)
class Fragment:
    """Rows ``[start, stop)`` of a layer output along its partition axis."""

    layer_id: int
    axis: int
    start: int
    stop: int
    axis_len: int
    data: np.ndarray

    def __post_init__(self):
        if not 0 <= self.start < self.stop <= self.axis_len:
            raise EngineError(f"bad fragment range [{self.start},{self.stop}) of {self.axis_len}")
        if self.data.shape[self.axis] != self.stop - self.start:
            raise EngineError(
                f"fragment data has {self.data.shape[self.axis]} rows on axis {self.axis}, "
                f"range says {self.stop - self.start}")

    @property
    def is_true_top_edge(self) -> bool:
        return self.start == 0

    @property
    def is_true_bottom_edge(self) -> bool:
        return self.stop == self.axis_len

    @classmethod
    def whole(cls, layer: Layer, data: np.ndarray) -> "Fragment":
        return cls(layer.id, layer.axis, 0, layer.axis_len, layer.axis_len, data)

    def rows(self, lo: int, hi: int) -> np.ndarray:
        index = [slice(None)] * self.data.ndim
        index[self.axis] = slice(lo - self.start, hi - self.start)
        return self.data[tuple(index)]


def _check_finite(x: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(x)):
        raise EngineError(f"non-finite values in {what}")


def _take(x: np.ndarray, axis: int, lo: int, hi: int) -> np.ndarray:
    index = [slice(None)] * x.ndim
    index[axis] = slice(lo, hi)
    return x[tuple(index)]


def matmul_fixed(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``a @ b`` summed over the inner index in ascending order."""
    out = np.zeros((a.shape[0], b.shape[1]), dtype=F32)
    for k in range(a.shape[1]):
        out += a[:, k:k + 1] * b[k:k + 1, :]
    return out


def _activation(fn: str, x: np.ndarray) -> np.ndarray:
    if fn == "relu":
        return np.maximum(x, F32(0))
    with np.errstate(over="ignore"):
        sig = F32(1) / (F32(1) + np.exp(-x))
    if fn == "sigmoid":
        return sig
    if fn == "silu":
        return x * sig
    raise EngineError(f"unknown activation {fn!r}")


def _blockwise(kind: BlockWise, x: np.ndarray, x_lo: int, h_in: int, out_lo: int, out_hi: int) -> np.ndarray:
    """Output rows ``[out_lo, out_hi)`` from input rows ``x`` = ``[x_lo, x_lo + len)``.

    Rows outside ``[0, h_in)`` are padding; rows inside that are missing from
    ``x`` are an error, so interior fragments never get padded.
    """
    kh, kw = kind.kernel
    sh, sw = kind.stride
    ph, pw = kind.padding
    dh, dw = kind.dilation
    c, _, w = x.shape
    n = out_hi - out_lo
    lo = out_lo * sh - ph
    hi = (out_hi - 1) * sh - ph + dh * (kh - 1) + 1
    need_lo, need_hi = window_rows(kind, out_lo, out_hi, h_in)
    have_hi = x_lo + x.shape[1]
    if need_lo < x_lo or need_hi > have_hi:
        raise EngineError(f"input rows [{x_lo},{have_hi}) do not cover required [{need_lo},{need_hi})")
    fill = -np.inf if kind.op == "maxpool2d" else 0.0
    win = np.full((c, hi - lo, w + 2 * pw), fill, dtype=F32)
    win[:, need_lo - lo:need_hi - lo, pw:pw + w] = x[:, need_lo - x_lo:need_hi - x_lo, :]
    w_out = (w + 2 * pw - dw * (kw - 1) - 1) // sw + 1
    r_span = (n - 1) * sh + 1
    c_span = (w_out - 1) * sw + 1
    if kind.op == "maxpool2d":
        out = np.full((c, n, w_out), -np.inf, dtype=F32)
        for i in range(kh):
            for j in range(kw):
                tap = win[:, i * dh:i * dh + r_span:sh, j * dw:j * dw + c_span:sw]
                out = np.maximum(out, tap)
        return out
    weight = kind.weight
    out = np.zeros((kind.out_channels, n, w_out), dtype=F32)
    for ci in range(c):
        for i in range(kh):
            for j in range(kw):
                tap = win[ci, i * dh:i * dh + r_span:sh, j * dw:j * dw + c_span:sw]
                out += weight[:, ci, i, j][:, None, None] * tap[None, :, :]
    if kind.bias is not None:
        out += kind.bias[:, None, None]
    return out


def _softmax(x: np.ndarray) -> np.ndarray:
    z = np.exp(x - np.max(x, axis=-1, keepdims=True))
    return z / np.sum(z, axis=-1, keepdims=True)


def _compute(layer: Layer, inputs: Sequence[np.ndarray], in_lo: Sequence[int],
             out_lo: int, out_hi: int) -> np.ndarray:
    """Core dispatch.  ``inputs[j]`` holds rows ``[in_lo[j], ...)`` of parent ``j``."""
    kind = layer.kind
    x = inputs[0]
    if isinstance(kind, Global):
        if kind.op == "softmax":
            return _softmax(x)
        if kind.op == "flatten":
            return x.reshape(1, -1)
        rhs = kind.rhs if kind.rhs is not None else inputs[1]
        out = matmul_fixed(x, rhs)
        if kind.bias is not None:
            out += kind.bias[None, :]
        return out
    axis = layer.axis
    if isinstance(kind, ElementWise):
        return _activation(kind.fn, _take(x, axis, out_lo - in_lo[0], out_hi - in_lo[0]))
    if isinstance(kind, BlockWise):
        return _blockwise(kind, x, in_lo[0], layer.input_spec.dims[1], out_lo, out_hi)
    if isinstance(kind, RowWise):
        a = _take(x, axis, out_lo - in_lo[0], out_hi - in_lo[0])
        if kind.op == "add":
            if kind.rhs is not None:
                b = _take(kind.rhs, axis, out_lo, out_hi)
            else:
                b = _take(inputs[1], axis, out_lo - in_lo[1], out_hi - in_lo[1])
            return a + b
        rhs = kind.rhs if kind.rhs is not None else inputs[1]
        out = matmul_fixed(a, rhs)
        if kind.bias is not None:
            out += kind.bias[None, :]
        return out
    raise EngineError(f"unsupported layer kind {kind!r}")


def run_layer_full(layer: Layer, inputs: np.ndarray | Sequence[np.ndarray], strict: bool = False) -> np.ndarray:
    """Run ``layer`` on complete input tensor(s)."""
    if isinstance(inputs, np.ndarray):
        inputs = [inputs]
    if len(inputs) != len(layer.parents):
        raise EngineError(f"layer {layer.id} takes {len(layer.parents)} inputs, got {len(inputs)}")
    arrays = []
    for j, x in enumerate(inputs):
        x = np.asarray(x)
        expected = layer.input_spec.dims if j == 0 else None
        if expected is not None and x.shape != expected:
            raise EngineError(f"layer {layer.id}: input shape {x.shape} != {expected}")
        if x.dtype != F32:
            raise EngineError(f"layer {layer.id}: input dtype {x.dtype} is not float32")
        if strict:
            _check_finite(x, f"input of layer {layer.id}")
        arrays.append(x)
    out_hi = layer.axis_len
    out = _compute(layer, arrays, [0] * len(arrays), 0, out_hi)
    if strict:
        _check_finite(out, f"output of layer {layer.id}")
    return out


def run_layer_fragment(
    layer: Layer,
    graph: ModelGraph,
    inputs: Fragment | Mapping[int, Fragment],
    start: int,
    stop: int,
    strict: bool = False,
) -> Fragment:
    """Compute output rows ``[start, stop)`` of ``layer`` from partial inputs.

    ``inputs`` maps parent id to a fragment of that parent's output; a single
    fragment is accepted for one-parent layers.  Each fragment must contain
    the rows reported by ``input_region``.
    """
    if isinstance(inputs, Fragment):
        inputs = {layer.parents[0]: inputs}
    arrays, offsets = [], []
    for index, p in enumerate(layer.parents):
        frag = inputs.get(p)
        if frag is None:
            raise EngineError(f"layer {layer.id}: missing input from parent {p}")
        parent = graph.node(p)
        a, b = input_region(layer, parent, index, start, stop)
        if frag.start > a or frag.stop < b:
            raise EngineError(
                f"layer {layer.id}: parent {p} rows [{frag.start},{frag.stop}) do not cover [{a},{b})")
        if strict:
            _check_finite(frag.data, f"input of layer {layer.id}")
        arrays.append(frag.data)
        offsets.append(frag.start)
    if layer.is_global:
        start, stop = 0, layer.axis_len
    out = _compute(layer, arrays, offsets, start, stop)
    if strict:
        _check_finite(out, f"output of layer {layer.id}")
    return Fragment(layer.id, layer.axis, start, stop, layer.axis_len, out)


def combine(fragments: Sequence[Fragment], start: int | None = None, stop: int | None = None,
            check: bool = True) -> Fragment:
    """Assemble rows ``[start, stop)`` from possibly overlapping fragments.

    Overlapping rows come from redundant computation and must agree
    bit-for-bit when ``check`` is set.
    """
    if not fragments:
        raise CombineError("no fragments to combine")
    first = fragments[0]
    axis, axis_len, layer_id = first.axis, first.axis_len, first.layer_id
    start = 0 if start is None else start
    stop = axis_len if stop is None else stop
    for f in fragments:
        if (f.layer_id, f.axis, f.axis_len) != (layer_id, axis, axis_len):
            raise CombineError("fragments belong to different layers")
    frags = sorted(fragments, key=lambda f: (f.start, -f.stop))
    shape = list(first.data.shape)
    shape[axis] = stop - start
    out = np.empty(shape, dtype=F32)
    pos = start
    for f in frags:
        if pos >= stop or f.start >= stop:
            break
        if f.stop <= pos:
            continue
        if f.start > pos:
            raise CombineError(f"gap in rows [{pos},{f.start}) of layer {layer_id}")
        hi = min(f.stop, stop)
        _take(out, axis, pos - start, hi - start)[...] = f.rows(pos, hi)
        pos = hi
    if pos < stop:
        raise CombineError(f"gap in rows [{pos},{stop}) of layer {layer_id}")
    if check:
        for f in frags:
            lo, hi = max(f.start, start), min(f.stop, stop)
            if lo < hi:
                _agree(out, f, start, lo, hi)
    return Fragment(layer_id, axis, start, stop, axis_len, out)


def _agree(out: np.ndarray, f: Fragment, base: int, lo: int, hi: int) -> None:
    ours = _take(out, f.axis, lo - base, hi - base)
    theirs = f.rows(lo, hi)
    if ours.tobytes() != np.ascontiguousarray(theirs).tobytes():
        raise CombineError(f"duplicate rows [{lo},{hi}) of layer {f.layer_id} disagree")


def run_model(graph: ModelGraph, x: np.ndarray, strict: bool = False) -> np.ndarray:
    """Single-device reference inference."""
    x = np.asarray(x, dtype=F32)
    if x.shape != graph.raw_input_spec.dims:
        raise EngineError(f"input shape {x.shape} != {graph.raw_input_spec.dims}")
    outputs = {INPUT_ID: x}
    for layer in graph.layers:
        outputs[layer.id] = run_layer_full(layer, [outputs[p] for p in layer.parents], strict=strict)
    return outputs[graph.final_layer_id]


# --------------------------------------------------------------------------
# Tensor blobs: raw little-endian float32 plus a small JSON manifest

def save_tensor(path: str | os.PathLike, x: np.ndarray, name: str = "tensor") -> None:
    path = os.fspath(path)
    arr = np.ascontiguousarray(x, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(arr.tobytes())
    with open(path + ".json", "w", encoding="utf-8") as fh:
        json.dump({"name": name, "dims": list(arr.shape), "dtype": "float32le"}, fh)
        fh.write("\n")


def load_tensor(path: str | os.PathLike) -> tuple[str, np.ndarray]:
    path = os.fspath(path)
    with open(path + ".json", encoding="utf-8") as fh:
        meta = json.load(fh)
    spec = TensorSpec(tuple(meta["dims"]))
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) != spec.nbytes:
        raise EngineError(f"{path}: {len(blob)} bytes, manifest says {spec.nbytes}")
    return meta.get("name", "tensor"), np.frombuffer(blob, dtype="<f4").astype(F32).reshape(spec.dims)
