# Weight-sharing search space over a maximal ("super") network.
#
# Every searchable layer carries one width gene. Non-residual blocks own
# their output width. Residual inverted-residual blocks keep the incoming
# width and own their expanded (hidden) width instead, so identity shortcuts
# survive every choice.
# Sub-network weights are leading-channel prefixes of the supernet's.

import enum
import itertools
import json
import logging
import math
import os
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterator, Sequence

import numpy as np

from .archspec import (
    IMAGE_CHANNELS,
    ArchConfig,
    BlockKind,
    ConvSpec,
    arch_from_dict,
    arch_to_dict,
    downsample_factor,
    ensure_valid,
    format_ratio,
    iter_convs,
    parse_ratio,
)
from .errors import ArchFormatError, ArchValidationError, ChoiceError, ShapeError
from .seeding import rng_for

logger = logging.getLogger(__name__)

WEIGHT_DTYPE = np.dtype('<f4')


class GeneRole(enum.StrEnum):
    OUT = 'out'
    HIDDEN = 'hidden'


@dataclass(frozen=True, slots=True)
class Gene:
    layer_id: str
    role: GeneRole
    base: int
    """ Supernet width this gene scales (c_k). """


def round_channels(value) -> int:
    """ Nearest even integer, at least 2. Halves round up. """
    return max(2, 2 * math.floor(Fraction(value) / 2 + Fraction(1, 2)))


def scaled_channels(ratio: Fraction, base: int) -> int:
    # never wider than the supernet layer, even for odd bases
    return min(base, round_channels(Fraction(ratio) * base))


def search_genes(cfg: ArchConfig) -> tuple[Gene, ...]:
    genes = []
    for layer_id, block in cfg.blocks():
        if block.kind == BlockKind.PLAIN_CONV and block.groups != 1:
            raise ChoiceError(f'{layer_id}: grouped convolutions are not searchable')
        if block.kind == BlockKind.INVERTED_RESIDUAL and block.has_residual:
            genes.append(Gene(layer_id, GeneRole.HIDDEN, block.hidden_channels))
        else:
            genes.append(Gene(layer_id, GeneRole.OUT, block.out_channels))
    return tuple(genes)


@dataclass(frozen=True, slots=True)
class SearchSpace:
    name: str
    supernet: ArchConfig
    resolutions: tuple[int, ...]
    width_ratios: tuple[Fraction, ...]
    genes: tuple[Gene, ...] = ()
    """ Derived from `supernet` when left empty. """

    def __post_init__(self):
        ensure_valid(self.supernet)
        if not self.genes:
            object.__setattr__(self, 'genes', search_genes(self.supernet))
        object.__setattr__(self, 'width_ratios', tuple(Fraction(r) for r in self.width_ratios))
        object.__setattr__(self, 'resolutions', tuple(int(r) for r in self.resolutions))

        if not self.resolutions:
            raise ChoiceError(f'{self.name}: no resolutions')
        if not self.width_ratios:
            raise ChoiceError(f'{self.name}: no width ratios')
        factor = downsample_factor(self.supernet)
        if bad := [r for r in self.resolutions if r < 1 or r % factor]:
            raise ChoiceError(f'{self.name}: {bad}: resolutions must be divisible by {factor}')
        if bad := [r for r in self.width_ratios if not 0 < r <= 1]:
            raise ChoiceError(f'{self.name}: {[str(r) for r in bad]}: ratios must lie in (0, 1]')

    @classmethod
    def from_arch(cls, cfg: ArchConfig, resolutions: Sequence[int] | None = None,
                  width_ratios: Sequence = (1,), *, name: str | None = None) -> 'SearchSpace':
        return cls(
            name=name or cfg.name,
            supernet=cfg,
            resolutions=tuple(resolutions or (cfg.input_resolution,)),
            width_ratios=tuple(parse_ratio(r) for r in width_ratios),
        )

    @property
    def base_channels(self) -> tuple[int, ...]:
        return tuple(g.base for g in self.genes)

    @property
    def num_genes(self) -> int:
        """ Width genes plus the resolution gene. """
        return len(self.genes) + 1

    @property
    def size(self) -> int:
        return len(self.resolutions) * len(self.width_ratios) ** len(self.genes)

    def to_dict(self) -> dict:
        return {
            'name': self.name,
            'supernet': arch_to_dict(self.supernet),
            'resolutions': list(self.resolutions),
            'width_ratios': [format_ratio(r) for r in self.width_ratios],
        }


@dataclass(frozen=True, slots=True)
class SubnetChoice:
    resolution: int
    ratios: tuple[Fraction, ...]
    channels: tuple[int, ...]
    """ Absolute width per gene, in gene order. """

    @classmethod
    def from_ratios(cls, space: SearchSpace, resolution: int, ratios: Sequence) -> 'SubnetChoice':
        ratios = tuple(parse_ratio(r) for r in ratios)
        if len(ratios) != len(space.genes):
            raise ChoiceError(f'{len(ratios)}: expected {len(space.genes)} width ratios')
        channels = tuple(scaled_channels(r, g.base) for r, g in zip(ratios, space.genes))
        choice = cls(int(resolution), ratios, channels)
        validate_choice(space, choice)
        return choice

    def encoding(self) -> tuple[int, ...]:
        """ Total order used to break fitness ties. """
        return (self.resolution, *self.channels)

    def to_dict(self) -> dict:
        return {
            'resolution': self.resolution,
            'ratios': [format_ratio(r) for r in self.ratios],
            'channels': list(self.channels),
        }

    @classmethod
    def from_dict(cls, space: SearchSpace, data: dict) -> 'SubnetChoice':
        if not isinstance(data, dict) or set(data) - {'resolution', 'ratios', 'channels'}:
            raise ArchFormatError(f'{data!r}: expected {{resolution, ratios, channels}}')
        try:
            choice = cls.from_ratios(space, data['resolution'], data['ratios'])
        except KeyError as exc:
            raise ArchFormatError(f'choice: missing field {exc}') from None
        if 'channels' in data and tuple(data['channels']) != choice.channels:
            raise ChoiceError(f'{data["channels"]}: channels disagree with ratios ({list(choice.channels)})')
        return choice


def validate_choice(space: SearchSpace, choice: SubnetChoice) -> None:
    if choice.resolution not in space.resolutions:
        raise ChoiceError(f'{choice.resolution}: resolution not in {list(space.resolutions)}')
    if len(choice.channels) != len(space.genes) or len(choice.ratios) != len(space.genes):
        raise ChoiceError(f'{len(choice.channels)}: expected {len(space.genes)} genes')
    for gene, ratio, channels in zip(space.genes, choice.ratios, choice.channels):
        if ratio not in space.width_ratios:
            raise ChoiceError(f'{gene.layer_id}: ratio {ratio} not in the space')
        if channels != scaled_channels(ratio, gene.base):
            raise ChoiceError(f'{gene.layer_id}: {channels} channels do not match ratio {ratio} of {gene.base}')


def sample_uniform(space: SearchSpace, seed: int | np.random.Generator) -> SubnetChoice:
    """ Independent uniform ratio per gene and a uniform resolution. """
    rng = seed if isinstance(seed, np.random.Generator) else rng_for(seed, 'sample')
    resolution = space.resolutions[rng.integers(len(space.resolutions))]
    picks = rng.integers(len(space.width_ratios), size=len(space.genes))
    return SubnetChoice.from_ratios(space, resolution, [space.width_ratios[i] for i in picks])


def uniform_choice(space: SearchSpace, ratio, resolution: int | None = None) -> SubnetChoice:
    resolution = space.supernet.input_resolution if resolution is None else resolution
    return SubnetChoice.from_ratios(space, resolution, [ratio] * len(space.genes))


def smallest_choice(space: SearchSpace) -> SubnetChoice:
    return uniform_choice(space, min(space.width_ratios), min(space.resolutions))


def largest_choice(space: SearchSpace) -> SubnetChoice:
    return uniform_choice(space, max(space.width_ratios), max(space.resolutions))


def enumerate_choices(space: SearchSpace) -> Iterator[SubnetChoice]:
    for resolution in space.resolutions:
        for ratios in itertools.product(space.width_ratios, repeat=len(space.genes)):
            yield SubnetChoice.from_ratios(space, resolution, ratios)


def subnet_arch(cfg: ArchConfig, choice: SubnetChoice, *, genes: Sequence[Gene] | None = None,
                name: str | None = None) -> ArchConfig:
    """
    Rewire `cfg` to the widths of `choice`. `genes` fixes the role of every
    gene when `cfg` is itself a sub-network; by default roles come from `cfg`.
    """
    genes = search_genes(cfg) if genes is None else tuple(genes)
    if len(choice.channels) != len(genes):
        raise ChoiceError(f'{len(choice.channels)}: expected {len(genes)} genes for {cfg.name}')
    widths = {g.layer_id: (g.role, c) for g, c in zip(genes, choice.channels)}

    channels = IMAGE_CHANNELS
    stage_out = []
    stages = []
    try:
        for si, stage in enumerate(cfg.stages):
            blocks = []
            for bi, block in enumerate(stage):
                role, width = widths[f'stage{si}.{bi}']
                if role == GeneRole.HIDDEN:
                    new = block.replace(
                        in_channels=channels, out_channels=channels, expand_ratio=Fraction(width, channels)
                    )
                else:
                    new = block.replace(in_channels=channels, out_channels=width)
                blocks.append(new)
                channels = new.out_channels
            stages.append(tuple(blocks))
            stage_out.append(channels)

        head = []
        for j, block in enumerate(cfg.deconv_head):
            _, width = widths[f'deconv{j}']
            head.append(block.replace(in_channels=channels, out_channels=width))
            channels = width
            if block.fuse_from is not None:
                channels += stage_out[block.fuse_from]
    except KeyError as exc:
        raise ChoiceError(f'{exc}: layer has no width gene') from None
    except IndexError:
        raise ChoiceError(f'{cfg.name}: fusion source outside the backbone') from None

    sub = cfg.replace(
        name=name or f'{cfg.name}-subnet',
        input_resolution=choice.resolution,
        stages=tuple(stages),
        deconv_head=tuple(head),
    )
    try:
        return ensure_valid(sub)
    except ArchValidationError as exc:
        raise ChoiceError(f'{sub.name}: choice produces an invalid network: {exc}') from None


@dataclass(frozen=True, slots=True, eq=False)
class WeightStore:
    arch: ArchConfig
    weights: dict[str, np.ndarray]
    """ conv id -> weight ([cout, cin/g, k, k], or [cin, cout, k, k] when transposed). """
    scales: dict[str, np.ndarray]
    """ conv id -> per-output-channel scale of the folded norm. """
    shifts: dict[str, np.ndarray]
    genes: tuple[Gene, ...] = field(default=())
    """ Width-gene roles of the root supernet. """

    def __post_init__(self):
        if not self.genes:
            object.__setattr__(self, 'genes', search_genes(self.arch))
        for table in (self.weights, self.scales, self.shifts):
            for array in table.values():
                array.setflags(write=False)

    def convs(self) -> Iterator[ConvSpec]:
        return iter_convs(self.arch)

    def validate(self) -> list[str]:
        problems = []
        for conv in self.convs():
            expected = {
                'weight': conv.weight_shape(),
                'scale': (conv.out_channels,),
                'shift': (conv.out_channels,),
            }
            for kind, table in (('weight', self.weights), ('scale', self.scales), ('shift', self.shifts)):
                if conv.conv_id not in table:
                    problems.append(f'{conv.conv_id}: missing {kind}')
                elif table[conv.conv_id].shape != expected[kind]:
                    problems.append(f'{conv.conv_id}: {kind} shape {table[conv.conv_id].shape}, expected {expected[kind]}')
        return problems

    def ensure_valid(self) -> 'WeightStore':
        if problems := self.validate():
            raise ShapeError(problems[0].split(':', 1)[0], '; '.join(problems))
        return self

    def num_parameters(self) -> int:
        return sum(a.size for table in (self.weights, self.scales, self.shifts) for a in table.values())


def random_store(cfg: ArchConfig, seed: int) -> WeightStore:
    """ Seeded random weights with fan-in scaling; a stand-in for trained supernet weights. """
    rng = rng_for(seed, 'weights')
    weights, scales, shifts = {}, {}, {}
    for conv in iter_convs(cfg):
        shape = conv.weight_shape()
        fan_in = (conv.in_channels if conv.transposed else shape[1]) * conv.kernel_size ** 2
        weights[conv.conv_id] = (rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)).astype(np.float32)
        scales[conv.conv_id] = rng.uniform(0.5, 1.5, conv.out_channels).astype(np.float32)
        shifts[conv.conv_id] = (0.1 * rng.standard_normal(conv.out_channels)).astype(np.float32)
    return WeightStore(cfg, weights, scales, shifts)


def _prefix_index(super_segments: Sequence[int], sub_segments: Sequence[int], conv_id: str) -> np.ndarray:
    """ Leading channels of every concatenated input segment. """
    if len(super_segments) != len(sub_segments):
        raise ChoiceError(f'{conv_id}: input segments {list(sub_segments)} do not match {list(super_segments)}')
    parts, offset = [], 0
    for full, kept in zip(super_segments, sub_segments):
        if kept > full:
            raise ChoiceError(f'{conv_id}: {kept} input channels exceed the {full} available')
        parts.append(np.arange(offset, offset + kept))
        offset += full
    return np.concatenate(parts)


def extract(store: WeightStore, choice: SubnetChoice) -> WeightStore:
    """ Weights of the sub-network `choice` by leading-prefix slicing. """
    sub = subnet_arch(store.arch, choice, genes=store.genes)
    weights, scales, shifts = {}, {}, {}
    for full, part in zip(iter_convs(store.arch), iter_convs(sub)):
        cid = full.conv_id
        if part.out_channels > full.out_channels or part.in_channels > full.in_channels:
            raise ChoiceError(
                f'{cid}: {part.in_channels}->{part.out_channels} exceeds {full.in_channels}->{full.out_channels}'
            )
        w = store.weights[cid]
        if full.groups > 1:
            # depthwise: one filter per channel
            w = w[:part.out_channels]
        else:
            index = _prefix_index(full.in_segments or (full.in_channels,), part.in_segments or (part.in_channels,), cid)
            w = w[index, :part.out_channels] if full.transposed else w[:part.out_channels, index]
        weights[cid] = np.ascontiguousarray(w)
        scales[cid] = store.scales[cid][:part.out_channels].copy()
        shifts[cid] = store.shifts[cid][:part.out_channels].copy()

    logger.debug('%s: extracted sub-network at %d', store.arch.name, choice.resolution)
    return WeightStore(sub, weights, scales, shifts, store.genes).ensure_valid()


# Weight files: JSON manifest plus one little-endian float32 blob.

def save_store(store: WeightStore, manifest_path) -> tuple[str, str]:
    blob_path = os.path.splitext(str(manifest_path))[0] + '.bin'
    tensors, chunks, offset = [], [], 0
    for conv in store.convs():
        for suffix, table in (('weight', store.weights), ('scale', store.scales), ('shift', store.shifts)):
            data = np.ascontiguousarray(table[conv.conv_id], dtype=WEIGHT_DTYPE).tobytes()
            tensors.append({
                'name': f'{conv.conv_id}.{suffix}',
                'shape': list(table[conv.conv_id].shape),
                'dtype': 'f32',
                'offset': offset,
                'nbytes': len(data),
            })
            chunks.append(data)
            offset += len(data)

    manifest = {
        'arch': arch_to_dict(store.arch),
        'genes': [[g.layer_id, str(g.role), g.base] for g in store.genes],
        'blob': os.path.basename(blob_path),
        'tensors': tensors,
    }
    with open(blob_path, 'wb') as f:
        f.write(b''.join(chunks))
    with open(manifest_path, 'w', encoding='utf-8') as f:
        json.dump(manifest, f, indent=2)
    return str(manifest_path), blob_path


def load_store(manifest_path) -> WeightStore:
    with open(manifest_path, 'r', encoding='utf-8') as f:
        manifest = json.load(f)
    try:
        arch = arch_from_dict(manifest['arch'])
        genes = tuple(Gene(lid, GeneRole(role), int(base)) for lid, role, base in manifest['genes'])
        blob_path = os.path.join(os.path.dirname(str(manifest_path)), manifest['blob'])
        entries = manifest['tensors']
    except (KeyError, TypeError, ValueError) as exc:
        raise ArchFormatError(f'{manifest_path}: malformed weight manifest: {exc}') from None

    with open(blob_path, 'rb') as f:
        blob = f.read()

    tables = {'weight': {}, 'scale': {}, 'shift': {}}
    for entry in entries:
        if entry.get('dtype') != 'f32':
            raise ArchFormatError(f'{entry.get("name")}: unsupported dtype {entry.get("dtype")!r}')
        conv_id, suffix = entry['name'].rsplit('.', 1)
        array = np.frombuffer(blob, dtype=WEIGHT_DTYPE, count=math.prod(entry['shape']), offset=entry['offset'])
        tables[suffix][conv_id] = array.astype(np.float32).reshape(entry['shape'])

    return WeightStore(arch, tables['weight'], tables['scale'], tables['shift'], genes).ensure_valid()
