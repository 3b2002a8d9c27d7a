"""Self-contained ONNX model loading and inference.

No ONNX runtime is assumed: this module reads the protobuf wire format
directly and executes a conservative op subset (enough for VGG16/MobileNet
style convolutional backbones) with numpy in float32.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

# protobuf wire types
_VARINT = 0
_I64 = 1
_LEN = 2
_I32 = 5

# TensorProto.DataType values we accept
_DT_FLOAT = 1
_DT_INT64 = 7


class OnnxError(ValueError):
    pass


def _read_varint(buf: bytes, pos: int):
    result = 0
    shift = 0
    while True:
        if pos >= len(buf):
            raise OnnxError("truncated varint")
        b = buf[pos]
        pos += 1
        result |= (b & 0x7F) << shift
        if not b & 0x80:
            return result, pos
        shift += 7
        if shift > 70:
            raise OnnxError("varint too long")


def _iter_fields(buf: bytes):
    """Yield (field_number, wire_type, value) records; value is int for
    varint/fixed fields and bytes for length-delimited fields."""
    pos = 0
    while pos < len(buf):
        key, pos = _read_varint(buf, pos)
        field_no, wire = key >> 3, key & 0x7
        if wire == _VARINT:
            value, pos = _read_varint(buf, pos)
        elif wire == _I64:
            value = struct.unpack_from("<Q", buf, pos)[0]
            pos += 8
        elif wire == _I32:
            value = struct.unpack_from("<I", buf, pos)[0]
            pos += 4
        elif wire == _LEN:
            length, pos = _read_varint(buf, pos)
            value = buf[pos:pos + length]
            if len(value) != length:
                raise OnnxError("truncated length-delimited field")
            pos += length
        else:
            raise OnnxError(f"unsupported wire type {wire}")
        yield field_no, wire, value


def _signed(value: int) -> int:
    return value - (1 << 64) if value >= (1 << 63) else value


def _parse_tensor(buf: bytes) -> tuple[str, np.ndarray]:
    dims = []
    dtype = _DT_FLOAT
    name = ""
    raw = None
    float_data = []
    int64_data = []
    for no, wire, val in _iter_fields(buf):
        if no == 1:  # dims
            if wire == _VARINT:
                dims.append(_signed(val))
            else:
                pos = 0
                while pos < len(val):
                    v, pos = _read_varint(val, pos)
                    dims.append(_signed(v))
        elif no == 2:
            dtype = val
        elif no == 4:  # float_data (packed or not)
            if wire == _I32:
                float_data.append(struct.unpack("<f", struct.pack("<I", val))[0])
            else:
                float_data.extend(np.frombuffer(val, dtype="<f4").tolist())
        elif no == 7:  # int64_data
            if wire == _VARINT:
                int64_data.append(_signed(val))
            else:
                pos = 0
                while pos < len(val):
                    v, pos = _read_varint(val, pos)
                    int64_data.append(_signed(v))
        elif no == 8:
            name = val.decode("utf-8")
        elif no == 9:
            raw = val
    if dtype == _DT_FLOAT:
        if raw is not None:
            arr = np.frombuffer(raw, dtype="<f4").astype(np.float32)
        else:
            arr = np.asarray(float_data, dtype=np.float32)
    elif dtype == _DT_INT64:
        if raw is not None:
            arr = np.frombuffer(raw, dtype="<i8").astype(np.int64)
        else:
            arr = np.asarray(int64_data, dtype=np.int64)
    else:
        raise OnnxError(f"unsupported tensor data type {dtype} for {name!r}")
    return name, arr.reshape(dims) if dims else arr


def _parse_attribute(buf: bytes):
    name = ""
    value = None
    ints = []
    floats = []
    for no, wire, val in _iter_fields(buf):
        if no == 1:
            name = val.decode("utf-8")
        elif no == 2:  # f
            value = struct.unpack("<f", struct.pack("<I", val))[0]
        elif no == 3:  # i
            value = _signed(val)
        elif no == 4:  # s
            value = val.decode("utf-8", errors="replace")
        elif no == 5:  # t
            value = _parse_tensor(val)[1]
        elif no == 7:  # floats
            if wire == _I32:
                floats.append(struct.unpack("<f", struct.pack("<I", val))[0])
            else:
                floats.extend(np.frombuffer(val, dtype="<f4").tolist())
        elif no == 8:  # ints
            if wire == _VARINT:
                ints.append(_signed(val))
            else:
                pos = 0
                while pos < len(val):
                    v, pos = _read_varint(val, pos)
                    ints.append(_signed(v))
    if ints:
        value = ints
    elif floats:
        value = floats
    return name, value


@dataclass
class _Node:
    op_type: str
    inputs: list[str]
    outputs: list[str]
    name: str = ""
    attrs: dict = field(default_factory=dict)


def _parse_node(buf: bytes) -> _Node:
    node = _Node("", [], [])
    for no, wire, val in _iter_fields(buf):
        if no == 1:
            node.inputs.append(val.decode("utf-8"))
        elif no == 2:
            node.outputs.append(val.decode("utf-8"))
        elif no == 3:
            node.name = val.decode("utf-8")
        elif no == 4:
            node.op_type = val.decode("utf-8")
        elif no == 5:
            k, v = _parse_attribute(val)
            node.attrs[k] = v
    return node


def _parse_value_info(buf: bytes) -> tuple[str, list[int] | None]:
    name = ""
    shape = None
    for no, wire, val in _iter_fields(buf):
        if no == 1:
            name = val.decode("utf-8")
        elif no == 2:  # TypeProto
            for tno, _, tval in _iter_fields(val):
                if tno == 1:  # tensor_type
                    for sno, _, sval in _iter_fields(tval):
                        if sno == 2:  # shape
                            dims = []
                            for dno, _, dval in _iter_fields(sval):
                                if dno == 1:  # Dimension
                                    dim_value = 0
                                    for eno, _, eval_ in _iter_fields(dval):
                                        if eno == 1:
                                            dim_value = _signed(eval_)
                                    dims.append(dim_value)
                            shape = dims
    return name, shape


@dataclass
class OnnxGraph:
    nodes: list[_Node]
    initializers: dict[str, np.ndarray]
    inputs: list[tuple[str, list[int] | None]]
    outputs: list[str]
    name: str = ""


def parse_model(data: bytes) -> OnnxGraph:
    """Parse serialized ONNX ModelProto bytes into an executable graph."""
    graph_buf = None
    for no, wire, val in _iter_fields(data):
        if no == 7:
            graph_buf = val
    if graph_buf is None:
        raise OnnxError("model has no graph")
    nodes = []
    initializers = {}
    inputs = []
    outputs = []
    gname = ""
    for no, wire, val in _iter_fields(graph_buf):
        if no == 1:
            nodes.append(_parse_node(val))
        elif no == 2:
            gname = val.decode("utf-8")
        elif no == 5:
            name, arr = _parse_tensor(val)
            initializers[name] = arr
        elif no == 11:
            inputs.append(_parse_value_info(val))
        elif no == 12:
            name, _ = _parse_value_info(val)
            outputs.append(name)
    return OnnxGraph(nodes, initializers, inputs, outputs, gname)


# --- executor -----------------------------------------------------------------


def _pair(attr, default):
    if attr is None:
        return default
    if isinstance(attr, (list, tuple)):
        return tuple(int(v) for v in attr)
    return (int(attr), int(attr))


def _pad_nchw(x, pads, value=0.0):
    # pads: [top, left, bottom, right] per ONNX (x1_begin, x2_begin, x1_end, x2_end)
    t, l, b, r = pads
    if t == l == b == r == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (t, b), (l, r)), constant_values=value)


def _window_view(x, kh, kw, sh, sw):
    n, c, h, w = x.shape
    ho = (h - kh) // sh + 1
    wo = (w - kw) // sw + 1
    s = x.strides
    shape = (n, c, ho, wo, kh, kw)
    strides = (s[0], s[1], s[2] * sh, s[3] * sw, s[2], s[3])
    return np.lib.stride_tricks.as_strided(x, shape, strides), ho, wo


def _conv(x, w, b, attrs):
    strides = _pair(attrs.get("strides"), (1, 1))
    dilations = _pair(attrs.get("dilations"), (1, 1))
    if dilations != (1, 1):
        raise OnnxError("Conv dilations != 1 not supported")
    group = int(attrs.get("group", 1))
    pads = attrs.get("pads", [0, 0, 0, 0])
    pads = [int(p) for p in (pads if isinstance(pads, list) else [pads] * 4)]
    if attrs.get("auto_pad") not in (None, "", "NOTSET"):
        raise OnnxError("Conv auto_pad not supported; use explicit pads")
    x = _pad_nchw(x, pads)
    m, cg, kh, kw = w.shape
    n, c, _, _ = x.shape
    sh, sw = strides
    if group == 1:
        view, ho, wo = _window_view(x, kh, kw, sh, sw)
        cols = view.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
        out = cols @ w.reshape(m, -1).T.astype(np.float32)
        out = out.reshape(n, ho, wo, m).transpose(0, 3, 1, 2)
    elif group == c and m == c and cg == 1:
        # depthwise fast path
        view, ho, wo = _window_view(x, kh, kw, sh, sw)
        out = np.einsum("nchwij,cij->nchw", view, w[:, 0], optimize=True)
    else:
        view, ho, wo = _window_view(x, kh, kw, sh, sw)
        cpg = c // group
        mpg = m // group
        outs = []
        for g in range(group):
            vg = view[:, g * cpg:(g + 1) * cpg]
            cols = vg.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, cpg * kh * kw)
            wg = w[g * mpg:(g + 1) * mpg].reshape(mpg, -1)
            outs.append((cols @ wg.T.astype(np.float32)).reshape(n, ho, wo, mpg))
        out = np.concatenate(outs, axis=3).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out, dtype=np.float32)
    if b is not None:
        out += b.reshape(1, -1, 1, 1).astype(np.float32)
    return out


def _maxpool(x, attrs):
    kh, kw = _pair(attrs.get("kernel_shape"), (1, 1))
    sh, sw = _pair(attrs.get("strides"), (kh, kw))
    pads = attrs.get("pads", [0, 0, 0, 0])
    pads = [int(p) for p in (pads if isinstance(pads, list) else [pads] * 4)]
    x = _pad_nchw(x, pads, value=-np.inf)
    view, _, _ = _window_view(x, kh, kw, sh, sw)
    return np.ascontiguousarray(view.max(axis=(4, 5)), dtype=np.float32)


def _avgpool(x, attrs):
    kh, kw = _pair(attrs.get("kernel_shape"), (1, 1))
    sh, sw = _pair(attrs.get("strides"), (kh, kw))
    pads = attrs.get("pads", [0, 0, 0, 0])
    pads = [int(p) for p in (pads if isinstance(pads, list) else [pads] * 4)]
    x = _pad_nchw(x, pads, value=0.0)
    view, _, _ = _window_view(x, kh, kw, sh, sw)
    return np.ascontiguousarray(view.mean(axis=(4, 5), dtype=np.float32))


class OnnxModel:
    """Loaded ONNX graph with a numpy forward pass."""

    def __init__(self, path):
        with open(path, "rb") as fh:
            data = fh.read()
        try:
            self.graph = parse_model(data)
        except Exception as exc:
            raise OnnxError(f"cannot parse ONNX model {path}: {exc}") from exc
        init_names = set(self.graph.initializers)
        feeds = [(n, s) for n, s in self.graph.inputs if n not in init_names]
        if len(feeds) != 1:
            raise OnnxError(f"expected exactly one graph input, found {len(feeds)}")
        self.input_name, self.input_shape = feeds[0]
        if not self.graph.outputs:
            raise OnnxError("graph declares no outputs")

    def output_names(self) -> list[str]:
        names = [n for node in self.graph.nodes for n in node.outputs]
        return names

    def run(self, x: np.ndarray, output_name: str | None = None) -> np.ndarray:
        """Execute the graph on a single input tensor."""
        target = output_name or self.graph.outputs[0]
        values = dict(self.graph.initializers)
        values[self.input_name] = np.asarray(x, dtype=np.float32)
        if target not in {n for node in self.graph.nodes for n in node.outputs} and target not in values:
            raise OnnxError(f"graph lacks the named output {target!r}")
        for node in self.graph.nodes:
            missing = [i for i in node.inputs if i and i not in values]
            if missing:
                raise OnnxError(f"node {node.name or node.op_type}: inputs not ready: {missing}")
            ins = [values[i] if i else None for i in node.inputs]
            out = self._apply(node, ins)
            for name, val in zip(node.outputs, out if isinstance(out, tuple) else (out,)):
                values[name] = val
            if target in values:
                break
        if target not in values:
            raise OnnxError(f"graph lacks the named output {target!r}")
        return values[target]

    def _apply(self, node: _Node, ins):
        op = node.op_type
        a = node.attrs
        if op == "Conv":
            return _conv(ins[0], ins[1], ins[2] if len(ins) > 2 else None, a)
        if op == "Relu":
            return np.maximum(ins[0], np.float32(0.0))
        if op == "Clip":
            lo = a.get("min")
            hi = a.get("max")
            if len(ins) > 1 and ins[1] is not None:
                lo = float(ins[1])
            if len(ins) > 2 and ins[2] is not None:
                hi = float(ins[2])
            lo = -np.inf if lo is None else lo
            hi = np.inf if hi is None else hi
            return np.clip(ins[0], np.float32(lo), np.float32(hi))
        if op == "MaxPool":
            return _maxpool(ins[0], a)
        if op == "AveragePool":
            return _avgpool(ins[0], a)
        if op == "GlobalAveragePool":
            return ins[0].mean(axis=(2, 3), keepdims=True, dtype=np.float32)
        if op == "BatchNormalization":
            x, gamma, beta, mean, var = ins[:5]
            eps = np.float32(a.get("epsilon", 1e-5))
            shape = (1, -1, 1, 1)
            scale = (gamma / np.sqrt(var + eps)).astype(np.float32)
            return (x - mean.reshape(shape)) * scale.reshape(shape) + beta.reshape(shape)
        if op == "Add":
            return ins[0] + ins[1]
        if op == "Flatten":
            axis = int(a.get("axis", 1))
            shape = ins[0].shape
            lead = int(np.prod(shape[:axis])) if axis > 0 else 1
            return ins[0].reshape(lead, -1)
        if op == "Reshape":
            return ins[0].reshape([int(v) for v in ins[1]])
        if op == "Squeeze":
            axes = a.get("axes")
            if len(ins) > 1 and ins[1] is not None:
                axes = [int(v) for v in ins[1]]
            return np.squeeze(ins[0], axis=tuple(axes) if axes else None)
        if op == "Unsqueeze":
            axes = a.get("axes")
            if len(ins) > 1 and ins[1] is not None:
                axes = [int(v) for v in ins[1]]
            out = ins[0]
            for ax in sorted(axes):
                out = np.expand_dims(out, ax)
            return out
        if op == "Gemm":
            alpha = np.float32(a.get("alpha", 1.0))
            beta = np.float32(a.get("beta", 1.0))
            x = ins[0].T if a.get("transA") else ins[0]
            w = ins[1].T if a.get("transB") else ins[1]
            out = alpha * (x @ w)
            if len(ins) > 2 and ins[2] is not None:
                out = out + beta * ins[2]
            return out.astype(np.float32)
        if op == "Identity":
            return ins[0]
        if op == "Constant":
            if "value" in a:
                return a["value"]
            raise OnnxError("Constant node without tensor value")
        raise OnnxError(f"unsupported op {op!r}")
