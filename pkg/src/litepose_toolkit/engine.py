"""
Forward inference over an ArchConfig and a WeightStore.

Tensors are float32 numpy arrays in NCHW order. Convolutions are evaluated
tap by tap (one strided slice of the padded input per kernel position) with
float64 accumulation, and every call reports its exact multiply-accumulate
count to an OpCounter.
"""

import json
import logging
import math
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from .archspec import ArchConfig, ConvSpec, iter_convs, output_heads
from .errors import ArchFormatError, ShapeError
from .supernet import WeightStore

logger = logging.getLogger(__name__)

TENSOR_DTYPE = np.dtype('<f4')


@dataclass(slots=True)
class OpCounter:
    macs_by_layer: dict[str, int] = field(default_factory=dict)

    def add(self, layer_id: str, macs: int) -> None:
        self.macs_by_layer[layer_id] = self.macs_by_layer.get(layer_id, 0) + int(macs)

    @property
    def total(self) -> int:
        return sum(self.macs_by_layer.values())


@dataclass(slots=True)
class ForwardResult:
    outputs: list[np.ndarray]
    """ One tensor per output scale, in the config's output order. """
    counter: OpCounter
    trace: list[tuple[str, tuple[int, ...]]]
    """ (layer id, output shape) in execution order. """


def _check4(x: np.ndarray, layer_id: str) -> np.ndarray:
    if x.ndim != 4 or min(x.shape) < 1:
        raise ShapeError(layer_id, f'{x.shape}: expected a non-empty NCHW tensor')
    return x


def conv2d(
    x: np.ndarray,
    w: np.ndarray,
    bias: np.ndarray | None = None,
    *,
    stride: int = 1,
    padding: int | None = None,
    groups: int = 1,
    counter: OpCounter | None = None,
    layer_id: str = 'conv2d',
) -> np.ndarray:
    """
    Cross-correlation of `x` [N, C, H, W] with `w` [Cout, C/groups, k, k].

    `padding` defaults to k // 2. The counter receives
    k*k*C*Cout*Hout*Wout/groups MACs per image.
    """
    _check4(x, layer_id)
    n, c, h, wd = x.shape
    cout, cin_g, k, k2 = w.shape
    if k != k2:
        raise ShapeError(layer_id, f'{w.shape}: kernel must be square')
    if groups < 1 or c % groups or cout % groups or c // groups != cin_g:
        raise ShapeError(layer_id, f'input {x.shape} weight {w.shape}: inconsistent with {groups} group(s)')
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(layer_id, f'{bias.shape}: bias must have shape ({cout},)')

    p = k // 2 if padding is None else padding
    hout = (h + 2 * p - k) // stride + 1
    wout = (wd + 2 * p - k) // stride + 1
    if hout < 1 or wout < 1:
        raise ShapeError(layer_id, f'{h}x{wd} input too small for kernel {k} with padding {p}')

    xp = np.pad(x.astype(np.float64), ((0, 0), (0, 0), (p, p), (p, p)))
    wf = w.astype(np.float64)
    out = np.zeros((n, cout, hout, wout), dtype=np.float64)
    depthwise = groups == c == cout

    for i in range(k):
        for j in range(k):
            patch = xp[:, :, i:i + stride * (hout - 1) + 1:stride, j:j + stride * (wout - 1) + 1:stride]
            tap = wf[:, :, i, j]
            if groups == 1:
                out += np.tensordot(tap, patch, axes=([1], [1])).transpose(1, 0, 2, 3)
            elif depthwise:
                out += patch * tap[:, 0][None, :, None, None]
            else:
                grouped = patch.reshape(n, groups, cin_g, hout, wout)
                taps = tap.reshape(groups, cout // groups, cin_g)
                out += np.einsum('ngchw,goc->ngohw', grouped, taps).reshape(n, cout, hout, wout)

    if bias is not None:
        out += bias.astype(np.float64)[None, :, None, None]

    if counter is not None:
        counter.add(layer_id, n * k * k * c * cout // groups * hout * wout)
    return out.astype(np.float32)


def conv_transpose2d(
    x: np.ndarray,
    w: np.ndarray,
    bias: np.ndarray | None = None,
    *,
    stride: int = 2,
    padding: int = 1,
    counter: OpCounter | None = None,
    layer_id: str = 'conv_transpose2d',
) -> np.ndarray:
    """
    Transposed convolution (the gradient of conv2d w.r.t. its input) with
    `w` [Cin, Cout, k, k]. With k=4, stride=2, padding=1 the output is
    exactly twice the input size. MACs are counted at the output resolution.
    """
    _check4(x, layer_id)
    n, c, h, wd = x.shape
    cin, cout, k, k2 = w.shape
    if k != k2 or cin != c:
        raise ShapeError(layer_id, f'input {x.shape} weight {w.shape}: expected weight [{c}, Cout, k, k]')
    if not 0 <= padding <= k - 1:
        raise ShapeError(layer_id, f'{padding}: padding must lie in [0, {k - 1}]')

    dilated = np.zeros((n, c, (h - 1) * stride + 1, (wd - 1) * stride + 1), dtype=np.float32)
    dilated[:, :, ::stride, ::stride] = x
    flipped = np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
    return conv2d(
        dilated, flipped, bias, stride=1, padding=k - 1 - padding, counter=counter, layer_id=layer_id
    )


def relu6(x: np.ndarray) -> np.ndarray:
    return np.clip(x, 0.0, 6.0)


def add_residual(x: np.ndarray, shortcut: np.ndarray, layer_id: str = 'residual') -> np.ndarray:
    if x.shape != shortcut.shape:
        raise ShapeError(layer_id, f'{x.shape} + {shortcut.shape}: residual shapes differ')
    return x + shortcut


def concat_channels(*tensors: np.ndarray, layer_id: str = 'concat') -> np.ndarray:
    shapes = {(t.shape[0],) + t.shape[2:] for t in tensors}
    if len(shapes) != 1:
        raise ShapeError(layer_id, f'{[t.shape for t in tensors]}: cannot concatenate along channels')
    return np.concatenate(tensors, axis=1)


def apply_conv(conv: ConvSpec, x: np.ndarray, store: WeightStore, counter: OpCounter | None = None) -> np.ndarray:
    """ One convolution with its folded norm and (optional) ReLU6. """
    try:
        w = store.weights[conv.conv_id]
        scale = store.scales[conv.conv_id]
        shift = store.shifts[conv.conv_id]
    except KeyError:
        raise ShapeError(conv.layer_id, f'{conv.conv_id}: no weights in store') from None

    if w.shape != conv.weight_shape():
        raise ShapeError(conv.layer_id, f'{conv.conv_id}: weight {w.shape}, expected {conv.weight_shape()}')
    if x.shape[1] != conv.in_channels:
        raise ShapeError(conv.layer_id, f'{conv.conv_id}: {x.shape[1]} input channels, expected {conv.in_channels}')

    if conv.transposed:
        y = conv_transpose2d(x, w, stride=conv.stride, padding=conv.padding, counter=counter, layer_id=conv.layer_id)
    else:
        y = conv2d(
            x, w, stride=conv.stride, padding=conv.padding, groups=conv.groups,
            counter=counter, layer_id=conv.layer_id,
        )
    y = y * scale[None, :, None, None] + shift[None, :, None, None]
    return relu6(y) if conv.activation else y


def forward(cfg: ArchConfig, store: WeightStore, x: np.ndarray) -> ForwardResult:
    """ Run `cfg` on `x` [N, 3, R, R] with R = cfg.input_resolution. """
    _check4(x, 'input')
    r = cfg.input_resolution
    if x.shape[1:] != (3, r, r):
        raise ShapeError('input', f'{x.shape}: expected [N, 3, {r}, {r}]')

    convs: OrderedDict[str, list[ConvSpec]] = OrderedDict()
    for conv in iter_convs(cfg):
        convs.setdefault(conv.layer_id, []).append(conv)

    counter = OpCounter()
    trace = []
    h = x.astype(np.float32)
    stage_out = []
    for si, stage in enumerate(cfg.stages):
        for bi, block in enumerate(stage):
            layer_id = f'stage{si}.{bi}'
            y = h
            for conv in convs[layer_id]:
                y = apply_conv(conv, y, store, counter)
            if block.has_residual:
                y = add_residual(y, h, layer_id)
            h = y
            trace.append((layer_id, h.shape))
        stage_out.append(h)

    levels = [h]
    for j, block in enumerate(cfg.deconv_head):
        layer_id = f'deconv{j}'
        h = apply_conv(convs[layer_id][0], h, store, counter)
        trace.append((layer_id, h.shape))
        if block.fuse_from is not None:
            concat_id = f'{layer_id}.concat'
            h = concat_channels(h, stage_out[block.fuse_from], layer_id=concat_id)
            counter.add(concat_id, 0)
            trace.append((concat_id, h.shape))
        levels.append(h)

    outputs = []
    for head in output_heads(cfg):
        y = apply_conv(convs[head.layer_id][0], levels[head.level], store, counter)
        trace.append((head.layer_id, y.shape))
        outputs.append(y)

    logger.debug('%s: forward at %d, %d MACs', cfg.name, r, counter.total)
    return ForwardResult(outputs, counter, trace)


# Tensor files: one JSON header line, then the raw little-endian float32 data.

def save_tensor(path, x: np.ndarray) -> None:
    header = {'dims': list(x.shape), 'dtype': 'f32', 'order': 'NCHW'}
    with open(path, 'wb') as f:
        f.write(json.dumps(header).encode('utf-8') + b'\n')
        f.write(np.ascontiguousarray(x, dtype=TENSOR_DTYPE).tobytes())


def load_tensor(path) -> np.ndarray:
    with open(path, 'rb') as f:
        line = f.readline()
        data = f.read()
    try:
        header = json.loads(line)
        dims = [int(d) for d in header['dims']]
    except (ValueError, KeyError, TypeError):
        raise ArchFormatError(f'{path}: malformed tensor header') from None
    if header.get('dtype') != 'f32' or header.get('order', 'NCHW') != 'NCHW':
        raise ArchFormatError(f'{path}: unsupported tensor layout {header}')
    if len(data) != math.prod(dims) * TENSOR_DTYPE.itemsize:
        raise ArchFormatError(f'{path}: {len(data)} bytes of data for dims {dims}')
    return np.frombuffer(data, dtype=TENSOR_DTYPE).astype(np.float32).reshape(dims)
