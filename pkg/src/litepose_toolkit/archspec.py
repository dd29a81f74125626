# Typed description of single-branch LitePose-style networks.
#
# A network is a list of backbone stages (stages[0] is the stem) followed by
# a transposed-conv head whose entries may concatenate the output of an
# earlier stage, and a set of derived 1x1 output heads.

import dataclasses
import enum
import json
import logging
import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Any, Iterator

from .errors import ArchFormatError, ArchValidationError

logger = logging.getLogger(__name__)

IMAGE_CHANNELS = 3
VALID_KERNELS = frozenset({1, 3, 5, 7, 9})
VALID_STRIDES = frozenset({1, 2})
DECONV_KERNEL = 4
DECONV_STRIDE = 2
DECONV_PADDING = 1


class BlockKind(enum.StrEnum):
    STEM_CONV = 'stem-conv'
    INVERTED_RESIDUAL = 'inverted-residual'
    PLAIN_CONV = 'plain-conv'
    TRANSPOSED_CONV = 'transposed-conv'
    CONCAT = 'concat'
    HEAD_CONV = 'head-conv'


STAGE_KINDS = frozenset({BlockKind.STEM_CONV, BlockKind.INVERTED_RESIDUAL, BlockKind.PLAIN_CONV})


@dataclass(frozen=True, slots=True)
class BlockSpec:
    kind: BlockKind
    kernel_size: int
    """ Spatial kernel. For inverted-residual blocks this is the depthwise kernel. """
    stride: int
    in_channels: int
    out_channels: int
    expand_ratio: Fraction = Fraction(1)
    """ Hidden width / in_channels. Only meaningful for inverted-residual blocks. """
    groups: int = 1
    fuse_from: int | None = None
    """ Stage index whose output is concatenated after this transposed conv. """

    @property
    def hidden_channels(self) -> int:
        hidden = Fraction(self.expand_ratio) * self.in_channels
        if hidden.denominator != 1:
            raise ValueError(f'{hidden}: expanded width is not an integer')
        return int(hidden)

    @property
    def has_residual(self) -> bool:
        return (
            self.kind == BlockKind.INVERTED_RESIDUAL
            and self.stride == 1
            and self.in_channels == self.out_channels
        )

    @property
    def weight_bearing(self) -> bool:
        return self.kind != BlockKind.CONCAT

    def replace(self, **changes) -> 'BlockSpec':
        return dataclasses.replace(self, **changes)


@dataclass(frozen=True, slots=True)
class ArchConfig:
    name: str
    input_resolution: int
    num_joints: int
    stages: tuple[tuple[BlockSpec, ...], ...]
    deconv_head: tuple[BlockSpec, ...] = ()
    outputs: tuple[int, ...] = (4, 2)
    """ Output scales as downsampling factors relative to the input. """

    def replace(self, **changes) -> 'ArchConfig':
        return dataclasses.replace(self, **changes)

    def blocks(self) -> Iterator[tuple[str, BlockSpec]]:
        """ Stage and deconv blocks with their layer ids (heads excluded). """
        for si, stage in enumerate(self.stages):
            for bi, block in enumerate(stage):
                yield f'stage{si}.{bi}', block
        for j, block in enumerate(self.deconv_head):
            yield f'deconv{j}', block

    @property
    def num_layers(self) -> int:
        """ Count of weight-bearing layers, output heads included. """
        return sum(1 for _ in self.blocks()) + len(self.outputs)


@dataclass(frozen=True, slots=True)
class Violation:
    layer_id: str
    """ Layer id, or 'config' for network-level problems. """
    index: int
    """ Flat layer index in trace order; -1 for network-level problems. """
    rule: str
    detail: str

    def __str__(self):
        return f'{self.layer_id} (#{self.index}) [{self.rule}]: {self.detail}'


@dataclass(frozen=True, slots=True)
class TraceEntry:
    layer_id: str
    kind: BlockKind
    height: int
    width: int
    channels: int


@dataclass(frozen=True, slots=True)
class OutputHead:
    layer_id: str
    scale: int
    level: int
    """ 0 is the backbone output, j + 1 the output of deconv j (after its concat). """
    block: BlockSpec
    carries_tags: bool


@dataclass(frozen=True, slots=True)
class ConvSpec:
    """ One convolution of the network as executed by the engine. """
    conv_id: str
    layer_id: str
    kernel_size: int
    stride: int
    in_channels: int
    out_channels: int
    groups: int = 1
    transposed: bool = False
    activation: bool = True
    """ ReLU6 after the (folded) norm. Projections and heads are linear. """
    in_segments: tuple[int, ...] = ()
    """ Channel composition of the input when it is a concatenation. """

    @property
    def padding(self) -> int:
        return DECONV_PADDING if self.transposed else self.kernel_size // 2

    def weight_shape(self) -> tuple[int, int, int, int]:
        k = self.kernel_size
        if self.transposed:
            return (self.in_channels, self.out_channels, k, k)
        return (self.out_channels, self.in_channels // self.groups, k, k)


@dataclass(slots=True)
class _Layer:
    index: int
    layer_id: str
    block: BlockSpec
    size_in: int
    size_out: int
    in_segments: tuple[int, ...]


def _effective_stride(block: BlockSpec) -> int:
    # an invalid stride is reported once and otherwise treated as 1
    return block.stride if block.stride in VALID_STRIDES else 1


def downsample_factor(cfg: ArchConfig) -> int:
    return math.prod(_effective_stride(block) for stage in cfg.stages for block in stage)


def head_channels(cfg: ArchConfig, scale: int) -> int:
    """ Heatmaps, plus one tag per joint on the coarsest output. """
    if scale == max(cfg.outputs):
        return 2 * cfg.num_joints
    return cfg.num_joints


def block_violations(
    block: BlockSpec, *, layer_id: str = 'block', index: int = -1, allowed: frozenset | None = None
) -> list[Violation]:
    """ Rules that concern a single block regardless of its neighbours. """
    out = []

    def flag(rule, detail):
        out.append(Violation(layer_id, index, rule, detail))

    if allowed is not None and block.kind not in allowed:
        flag('kind', f'{block.kind}: not allowed here')
        return out

    if block.in_channels < 1 or block.out_channels < 1:
        flag('channels', f'{block.in_channels}->{block.out_channels}: must be positive')
        return out

    if block.kind == BlockKind.TRANSPOSED_CONV:
        if block.kernel_size != DECONV_KERNEL:
            flag('kernel', f'{block.kernel_size}: transposed conv kernel must be {DECONV_KERNEL}')
        if block.stride != DECONV_STRIDE:
            flag('stride', f'{block.stride}: transposed conv stride must be {DECONV_STRIDE}')
    else:
        if block.kernel_size not in VALID_KERNELS:
            flag('kernel', f'{block.kernel_size}: expected one of {sorted(VALID_KERNELS)}')
        if block.stride not in VALID_STRIDES:
            flag('stride', f'{block.stride}: expected one of {sorted(VALID_STRIDES)}')

    if block.groups < 1 or block.in_channels % block.groups or block.out_channels % block.groups:
        flag('groups', f'{block.groups}: must divide {block.in_channels} and {block.out_channels}')

    if block.kind == BlockKind.INVERTED_RESIDUAL:
        if block.groups != 1:
            flag('groups', f'{block.groups}: inverted-residual blocks are not grouped')
        if block.expand_ratio <= 0:
            flag('expand', f'{block.expand_ratio}: must be positive')
        elif (Fraction(block.expand_ratio) * block.in_channels).denominator != 1:
            flag('expand', f'{block.expand_ratio} x {block.in_channels}: not an integer width')

    return out


class _Walker:
    """ Single pass over a config collecting layers and rule violations. """

    def __init__(self, cfg: ArchConfig, resolution: int):
        self.cfg = cfg
        self.violations: list[Violation] = []
        self.layers: list[_Layer] = []
        self.heads: list[OutputHead] = []
        self._walk(resolution)

    def _flag(self, layer_id: str, index: int, rule: str, detail: str) -> None:
        self.violations.append(Violation(layer_id, index, rule, detail))

    def _check_block(self, layer_id: str, index: int, block: BlockSpec, allowed: frozenset) -> None:
        self.violations.extend(block_violations(block, layer_id=layer_id, index=index, allowed=allowed))

    def _walk(self, resolution: int) -> None:
        cfg = self.cfg
        if cfg.num_joints < 1:
            self._flag('config', -1, 'joints', f'{cfg.num_joints}: must be positive')
        if not cfg.stages:
            self._flag('config', -1, 'stages', 'no backbone stages')
            return

        factor = downsample_factor(cfg)
        if resolution < 1 or resolution % factor:
            self._flag('config', -1, 'resolution', f'{resolution}: not divisible by downsampling factor {factor}')

        size = resolution
        segments = (IMAGE_CHANNELS,)
        stage_out = []
        index = 0
        for si, stage in enumerate(cfg.stages):
            if not stage:
                self._flag(f'stage{si}', -1, 'stages', 'empty stage')
            for bi, block in enumerate(stage):
                layer_id = f'stage{si}.{bi}'
                self._check_block(layer_id, index, block, STAGE_KINDS)
                if block.in_channels != sum(segments):
                    self._flag(layer_id, index, 'wiring', f'{block.in_channels}: producer emits {sum(segments)} channels')
                size_out = -(-size // _effective_stride(block))
                self.layers.append(_Layer(index, layer_id, block, size, size_out, segments))
                size, segments = size_out, (block.out_channels,)
                index += 1
            stage_out.append((size, sum(segments)))

        levels = [(size, segments)]
        for j, block in enumerate(cfg.deconv_head):
            layer_id = f'deconv{j}'
            self._check_block(layer_id, index, block, frozenset({BlockKind.TRANSPOSED_CONV}))
            if block.in_channels != sum(segments):
                self._flag(layer_id, index, 'wiring', f'{block.in_channels}: producer emits {sum(segments)} channels')
            size_out = size * DECONV_STRIDE
            self.layers.append(_Layer(index, layer_id, block, size, size_out, segments))
            size, segments = size_out, (block.out_channels,)
            index += 1

            if block.fuse_from is not None:
                concat_id = f'{layer_id}.concat'
                src = block.fuse_from
                if not 0 <= src < len(stage_out):
                    self._flag(concat_id, index, 'fusion', f'{src}: no such stage')
                else:
                    src_size, src_channels = stage_out[src]
                    if src_size != size:
                        self._flag(concat_id, index, 'fusion', f'{size}x{size} deconv output cannot concat stage{src} at {src_size}x{src_size}')
                    concat = BlockSpec(
                        BlockKind.CONCAT, 1, 1, block.out_channels, block.out_channels + src_channels
                    )
                    self.layers.append(_Layer(index, concat_id, concat, size, size, (block.out_channels, src_channels)))
                    segments = (block.out_channels, src_channels)
            levels.append((size, segments))

        if not cfg.outputs:
            self._flag('config', -1, 'outputs', 'no output scales')
        if len(set(cfg.outputs)) != len(cfg.outputs):
            self._flag('config', -1, 'outputs', f'{list(cfg.outputs)}: duplicate scales')

        for t, scale in enumerate(cfg.outputs):
            layer_id = f'head{t}'
            level = next((lv for lv, (s, _) in enumerate(levels) if s * scale == resolution), None)
            if level is None:
                self._flag(layer_id, index, 'outputs', f'{scale}: no feature level at 1/{scale} resolution')
                continue
            lsize, lsegments = levels[level]
            block = BlockSpec(BlockKind.HEAD_CONV, 1, 1, sum(lsegments), head_channels(cfg, scale))
            self.layers.append(_Layer(index, layer_id, block, lsize, lsize, lsegments))
            self.heads.append(OutputHead(layer_id, scale, level, block, block.out_channels > cfg.num_joints))
            index += 1


def validate(cfg: ArchConfig) -> list[Violation]:
    """ Return every broken rule of `cfg`. An empty list means the config is valid. """
    return _Walker(cfg, cfg.input_resolution).violations


def ensure_valid(cfg: ArchConfig) -> ArchConfig:
    if violations := validate(cfg):
        raise ArchValidationError(cfg.name, violations)
    return cfg


def _walk_valid(cfg: ArchConfig, resolution: int | None) -> _Walker:
    ensure_valid(cfg)
    walker = _Walker(cfg, cfg.input_resolution if resolution is None else resolution)
    if walker.violations:
        raise ArchValidationError(cfg.name, walker.violations)
    return walker


def shape_trace(cfg: ArchConfig, resolution: int | None = None) -> list[TraceEntry]:
    """ Output shape of every layer (concat and heads included) at `resolution`. """
    return [
        TraceEntry(layer.layer_id, layer.block.kind, layer.size_out, layer.size_out, layer.block.out_channels)
        for layer in _walk_valid(cfg, resolution).layers
    ]


def layer_table(cfg: ArchConfig, resolution: int | None = None) -> list[tuple[str, BlockSpec, int]]:
    """ (layer id, block, output size) in trace order, heads included. """
    return [
        (layer.layer_id, layer.block, layer.size_out)
        for layer in _walk_valid(cfg, resolution).layers
    ]


def output_heads(cfg: ArchConfig) -> tuple[OutputHead, ...]:
    return tuple(_walk_valid(cfg, None).heads)


def _convs_of(layer: _Layer) -> Iterator[ConvSpec]:
    b, lid = layer.block, layer.layer_id
    match b.kind:
        case BlockKind.INVERTED_RESIDUAL:
            hidden = b.hidden_channels
            yield ConvSpec(f'{lid}.expand', lid, 1, 1, b.in_channels, hidden, in_segments=layer.in_segments)
            yield ConvSpec(f'{lid}.dw', lid, b.kernel_size, b.stride, hidden, hidden, groups=hidden)
            yield ConvSpec(f'{lid}.project', lid, 1, 1, hidden, b.out_channels, activation=False)
        case BlockKind.TRANSPOSED_CONV:
            yield ConvSpec(
                lid, lid, b.kernel_size, b.stride, b.in_channels, b.out_channels,
                transposed=True, in_segments=layer.in_segments,
            )
        case BlockKind.HEAD_CONV:
            yield ConvSpec(
                lid, lid, 1, 1, b.in_channels, b.out_channels, activation=False, in_segments=layer.in_segments
            )
        case BlockKind.CONCAT:
            return
        case _:
            yield ConvSpec(
                lid, lid, b.kernel_size, b.stride, b.in_channels, b.out_channels,
                groups=b.groups, in_segments=layer.in_segments,
            )


def iter_convs(cfg: ArchConfig) -> Iterator[ConvSpec]:
    """ Every convolution in execution order, with the input channel segments it reads. """
    for layer in _walk_valid(cfg, None).layers:
        yield from _convs_of(layer)


def with_kernel(cfg: ArchConfig, kernel_size: int) -> ArchConfig:
    """ Replace every depthwise kernel of every inverted-residual block. """
    stages = tuple(
        tuple(
            b.replace(kernel_size=kernel_size) if b.kind == BlockKind.INVERTED_RESIDUAL else b
            for b in stage
        )
        for stage in cfg.stages
    )
    return cfg.replace(name=f'{cfg.name}-k{kernel_size}', stages=stages)


def without_fusion(cfg: ArchConfig) -> ArchConfig:
    """ Plain deconv head: drop every skip concatenation and rewire the following layers. """
    channels = cfg.stages[-1][-1].out_channels
    head = []
    for block in cfg.deconv_head:
        head.append(block.replace(in_channels=channels, fuse_from=None))
        channels = block.out_channels
    return cfg.replace(name=f'{cfg.name}-nofusion', deconv_head=tuple(head))


def is_fused(cfg: ArchConfig) -> bool:
    return any(b.fuse_from is not None for b in cfg.deconv_head)


# JSON schema

ARCH_FIELDS = ('name', 'input_resolution', 'num_joints', 'stages', 'deconv_head', 'outputs')
BLOCK_FIELDS = ('kind', 'k', 's', 'cin', 'cout', 'expand', 'groups')
OPTIONAL_BLOCK_FIELDS = ('fuse_from',)


def _check_fields(where: str, data: Any, required: tuple, optional: tuple = ()) -> None:
    if not isinstance(data, dict):
        raise ArchFormatError(f'{where}: expected a JSON object, got {type(data).__name__}')
    if unknown := set(data) - set(required) - set(optional):
        raise ArchFormatError(f'{where}: unknown field(s) {sorted(unknown)}')
    if missing := [f for f in required if f not in data]:
        raise ArchFormatError(f'{where}: missing field(s) {missing}')


def _int_field(where: str, data: dict, key: str) -> int:
    value = data[key]
    if isinstance(value, bool) or not isinstance(value, int):
        raise ArchFormatError(f'{where}.{key}: {value!r}: expected an integer')
    return value


def parse_ratio(value: Any) -> Fraction:
    """ Accept an integer, a decimal string, a "p/q" string or a float with a short decimal form. """
    if isinstance(value, bool):
        raise ArchFormatError(f'{value!r}: not a ratio')
    try:
        if isinstance(value, float):
            return Fraction(str(value))
        return Fraction(value)
    except (TypeError, ValueError, ZeroDivisionError):
        raise ArchFormatError(f'{value!r}: not a ratio') from None


def format_ratio(value: Fraction) -> int | str:
    value = Fraction(value)
    if value.denominator == 1:
        return int(value)
    return f'{value.numerator}/{value.denominator}'


def block_from_dict(data: dict, where: str = 'block') -> BlockSpec:
    _check_fields(where, data, BLOCK_FIELDS, OPTIONAL_BLOCK_FIELDS)
    try:
        kind = BlockKind(data['kind'])
    except ValueError:
        raise ArchFormatError(f'{where}.kind: {data["kind"]!r}: unknown block kind') from None

    fuse_from = data.get('fuse_from')
    if fuse_from is not None:
        fuse_from = _int_field(where, data, 'fuse_from')

    return BlockSpec(
        kind=kind,
        kernel_size=_int_field(where, data, 'k'),
        stride=_int_field(where, data, 's'),
        in_channels=_int_field(where, data, 'cin'),
        out_channels=_int_field(where, data, 'cout'),
        expand_ratio=parse_ratio(data['expand']),
        groups=_int_field(where, data, 'groups'),
        fuse_from=fuse_from,
    )


def block_to_dict(block: BlockSpec) -> dict:
    data = {
        'kind': str(block.kind),
        'k': block.kernel_size,
        's': block.stride,
        'cin': block.in_channels,
        'cout': block.out_channels,
        'expand': format_ratio(block.expand_ratio),
        'groups': block.groups,
    }
    if block.fuse_from is not None:
        data['fuse_from'] = block.fuse_from
    return data


def arch_from_dict(data: dict) -> ArchConfig:
    _check_fields('arch', data, ARCH_FIELDS)
    if not isinstance(data['stages'], list) or not all(isinstance(s, list) for s in data['stages']):
        raise ArchFormatError('arch.stages: expected a list of block lists')
    if not isinstance(data['deconv_head'], list):
        raise ArchFormatError('arch.deconv_head: expected a list of blocks')
    if not isinstance(data['outputs'], list) or not all(isinstance(o, int) for o in data['outputs']):
        raise ArchFormatError('arch.outputs: expected a list of integer scales')

    return ArchConfig(
        name=str(data['name']),
        input_resolution=_int_field('arch', data, 'input_resolution'),
        num_joints=_int_field('arch', data, 'num_joints'),
        stages=tuple(
            tuple(block_from_dict(b, f'stages[{si}][{bi}]') for bi, b in enumerate(stage))
            for si, stage in enumerate(data['stages'])
        ),
        deconv_head=tuple(block_from_dict(b, f'deconv_head[{j}]') for j, b in enumerate(data['deconv_head'])),
        outputs=tuple(data['outputs']),
    )


def arch_to_dict(cfg: ArchConfig) -> dict:
    return {
        'name': cfg.name,
        'input_resolution': cfg.input_resolution,
        'num_joints': cfg.num_joints,
        'stages': [[block_to_dict(b) for b in stage] for stage in cfg.stages],
        'deconv_head': [block_to_dict(b) for b in cfg.deconv_head],
        'outputs': list(cfg.outputs),
    }


def load_arch(path) -> ArchConfig:
    with open(path, 'r', encoding='utf-8') as f:
        try:
            data = json.load(f)
        except json.JSONDecodeError as exc:
            raise ArchFormatError(f'{path}: {exc}') from None

    logger.debug('%s: loaded architecture %r', path, data.get('name') if isinstance(data, dict) else None)
    return arch_from_dict(data)


def dump_arch(cfg: ArchConfig) -> str:
    return json.dumps(arch_to_dict(cfg), indent=2)
