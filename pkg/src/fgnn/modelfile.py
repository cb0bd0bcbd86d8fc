"""Binary model files.

Layout (all integers little-endian)::

    "FGNN"  u16 version  u16 layer_count
    u8 input_ndim  u32 * input_ndim         per-sample input shape
    per layer:
        u8 kind (0 dense, 1 fgn-dense, 2 conv1d, 3 fgn-conv1d)
        u8 activation (0 identity, 1 tanh, 2 relu)
        u32 dims: dense (in, out); conv (in_ch, out_ch, k, stride, dilation)
        u8 variance (0 none, 1 spherical, 2 diagonal, 3 full)
        f32 blocks: W, b, then for FGN kinds C, raw sigma, p_norm

Values are stored as float32 and widened to float64 on load, so
save -> load -> save reproduces the same bytes.  A coupled FGN layer is
written with its effective bias and loads as an ordinary (uncoupled) layer.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .layers import ACTIVATIONS, Conv1dLayer, DenseLayer, FgnConv1dLayer, FgnDenseLayer, Network

MAGIC = b"FGNN"
VERSION = 1
KINDS = {"dense": 0, "fgn-dense": 1, "conv1d": 2, "fgn-conv1d": 3}
VARIANCES = {None: 0, "spherical": 1, "diagonal": 2, "full": 3}


class ModelFormatError(ValueError):
    pass


def _f32(a) -> bytes:
    return np.ascontiguousarray(a, dtype="<f4").tobytes()


def to_bytes(net: Network) -> bytes:
    out = [MAGIC, struct.pack("<HH", VERSION, len(net.layers))]
    out.append(struct.pack("<B", len(net.input_shape)))
    out.append(struct.pack(f"<{len(net.input_shape)}I", *net.input_shape))
    for layer in net.layers:
        conv = isinstance(layer, Conv1dLayer)
        out.append(struct.pack("<BB", KINDS[layer.kind], ACTIVATIONS.index(layer.activation)))
        if conv:
            out.append(struct.pack("<5I", layer.in_channels, layer.out_channels, layer.kernel_size,
                                   layer.stride, layer.dilation))
        else:
            out.append(struct.pack("<2I", layer.in_dim, layer.out_dim))
        var = layer.variance if layer.is_fgn else None
        out.append(struct.pack("<B", VARIANCES[var]))
        bias = layer.effective_bias() if isinstance(layer, FgnDenseLayer) else layer.b
        out += [_f32(layer.W), _f32(bias)]
        if layer.is_fgn:
            out += [_f32(layer.C), _f32(layer.sigma), _f32([layer.p_norm])]
    return b"".join(out)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n, what):
        if self.pos + n > len(self.buf):
            raise ModelFormatError(f"truncated file: {what} needs {n} bytes at offset {self.pos}")
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def ints(self, fmt, what):
        return struct.unpack("<" + fmt, self.take(struct.calcsize("<" + fmt), what))

    def floats(self, shape, what):
        n = int(np.prod(shape))
        return np.frombuffer(self.take(4 * n, what), dtype="<f4").astype(np.float64).reshape(shape)


def from_bytes(buf: bytes) -> Network:
    r = _Reader(buf)
    if r.take(4, "magic") != MAGIC:
        raise ModelFormatError("not a model file (bad magic)")
    version, count = r.ints("HH", "header")
    if version != VERSION:
        raise ModelFormatError(f"unsupported model file version {version} (expected {VERSION})")
    (ndim,) = r.ints("B", "input rank")
    input_shape = r.ints(f"{ndim}I", "input shape")
    kinds = {v: k for k, v in KINDS.items()}
    variances = {v: k for k, v in VARIANCES.items()}
    layers = []
    for i in range(count):
        kind_tag, act_tag = r.ints("BB", f"layer {i} tags")
        if kind_tag not in kinds or act_tag >= len(ACTIVATIONS):
            raise ModelFormatError(f"layer {i}: unknown kind {kind_tag} or activation {act_tag}")
        kind, act = kinds[kind_tag], ACTIVATIONS[act_tag]
        conv = kind in ("conv1d", "fgn-conv1d")
        dims = r.ints("5I" if conv else "2I", f"layer {i} dims")
        (var_tag,) = r.ints("B", f"layer {i} variance")
        if var_tag not in variances:
            raise ModelFormatError(f"layer {i}: unknown variance kind {var_tag}")
        var = variances[var_tag]
        fgn = kind.startswith("fgn")
        if fgn == (var is None):
            raise ModelFormatError(f"layer {i}: variance tag {var_tag} does not fit kind {kind}")
        if conv:
            cin, cout, k, s, d = dims
            W = r.floats((cout, cin, k), f"layer {i} W")
            b = r.floats((cout,), f"layer {i} b")
            width, out = cin * k, cout
        else:
            din, dout = dims
            W = r.floats((dout, din), f"layer {i} W")
            b = r.floats((dout,), f"layer {i} b")
            width, out = din, dout
        if not fgn:
            layers.append(Conv1dLayer(cin, cout, k, s, d, act, weights=W, bias=b) if conv
                          else DenseLayer(din, dout, act, weights=W, bias=b))
            continue
        C = r.floats((out, width), f"layer {i} C")
        sshape = {"spherical": (out,), "diagonal": (out, width), "full": (out, width, width)}[var]
        sigma = r.floats(sshape, f"layer {i} sigma")
        (p,) = r.floats((1,), f"layer {i} p_norm")
        if conv:
            layers.append(FgnConv1dLayer(cin, cout, k, s, d, act, weights=W, bias=b, centers=C,
                                         sigma=sigma, variance=var, p_norm=p))
        else:
            layers.append(FgnDenseLayer(din, dout, act, weights=W, bias=b, centers=C, sigma=sigma,
                                        variance=var, p_norm=p))
    if r.pos != len(buf):
        raise ModelFormatError(f"{len(buf) - r.pos} trailing bytes after the last layer")
    return Network(layers, input_shape)


def save(net: Network, path) -> None:
    Path(path).write_bytes(to_bytes(net))


def load(path) -> Network:
    return from_bytes(Path(path).read_bytes())
