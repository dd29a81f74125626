# Scaled-HigherHRNet style multi-branch networks, expanded into individual
# convolutions for cost accounting.
#
# Layout: two stride-2 stem convs, stage 1 of bottleneck blocks on a single
# branch, stages 2..4 of basic blocks (two 3x3 convs) on n branches, HRNet
# transition convs between stages, an exchange unit after every module and
# the HigherHRNet head (1x1 prediction at 1/4, deconv to 1/2, 1x1 prediction).

from dataclasses import dataclass
from typing import TYPE_CHECKING, Iterator, Sequence

from .archspec import BlockKind, BlockSpec, Violation

if TYPE_CHECKING:
    from .shrink import ShrinkConfig

NUM_STAGES = 4


@dataclass(frozen=True, slots=True)
class MultiBranchConfig:
    name: str
    base_channel: int
    """ Width C of the highest-resolution branch; branch i (from 0) has C * 2**i. """
    block_counts: 'ShrinkConfig'
    num_joints: int = 14
    input_resolution: int = 512
    modules_per_stage: tuple[int, ...] = (1, 1, 4, 1)
    bottleneck_planes: int = 64
    bottleneck_expansion: int = 4
    stem_channels: int | None = None
    """ Defaults to base_channel. """
    deconv_channels: int | None = None
    """ Defaults to base_channel. """
    kernel_size: int = 3

    def branch_channels(self, branch: int) -> int:
        return self.base_channel * 2 ** branch

    def branch_size(self, resolution: int, branch: int) -> int:
        return resolution // 2 ** (branch + 2)

    @property
    def downsample_factor(self) -> int:
        return 2 ** (NUM_STAGES + 1)


def validate_multibranch(cfg: MultiBranchConfig, resolution: int | None = None) -> list[Violation]:
    out = []
    resolution = cfg.input_resolution if resolution is None else resolution
    stages = cfg.block_counts.stages

    def flag(rule, detail):
        out.append(Violation('config', -1, rule, detail))

    if cfg.base_channel < 1:
        flag('channels', f'{cfg.base_channel}: base channel must be positive')
    if len(stages) != NUM_STAGES or any(len(a) != n + 1 for n, a in enumerate(stages)):
        flag('branches', f'{stages}: stage n must have exactly n branches')
    if len(cfg.modules_per_stage) != NUM_STAGES or any(m < 1 for m in cfg.modules_per_stage):
        flag('modules', f'{cfg.modules_per_stage}: one positive module count per stage')
    if resolution < 1 or resolution % cfg.downsample_factor:
        flag('resolution', f'{resolution}: not divisible by {cfg.downsample_factor}')
    if cfg.num_joints < 1:
        flag('joints', f'{cfg.num_joints}: must be positive')
    return out


def _conv(kind, k, s, cin, cout) -> BlockSpec:
    return BlockSpec(kind, k, s, cin, cout)


def multibranch_layers(cfg: MultiBranchConfig, resolution: int | None = None) -> Iterator[tuple[str, BlockSpec, int]]:
    """ Yield (layer id, conv block, output size) for every convolution of the network. """
    plain = BlockKind.PLAIN_CONV
    k = cfg.kernel_size
    r = cfg.input_resolution if resolution is None else resolution
    stem = cfg.stem_channels or cfg.base_channel
    counts = cfg.block_counts.stages

    yield 'stem.0', BlockSpec(BlockKind.STEM_CONV, 3, 2, 3, stem), r // 2
    yield 'stem.1', BlockSpec(BlockKind.STEM_CONV, 3, 2, stem, stem), r // 4

    # stage 1: bottleneck blocks on the 1/4 branch
    size = r // 4
    planes = cfg.bottleneck_planes
    wide = planes * cfg.bottleneck_expansion
    cin = stem
    for b in range(counts[0][0]):
        lid = f'stage1.block{b}'
        yield f'{lid}.conv1', _conv(plain, 1, 1, cin, planes), size
        yield f'{lid}.conv2', _conv(plain, k, 1, planes, planes), size
        yield f'{lid}.conv3', _conv(plain, 1, 1, planes, wide), size
        if cin != wide:
            yield f'{lid}.downsample', _conv(plain, 1, 1, cin, wide), size
        cin = wide

    channels = [cin]
    sizes = [size]
    for n in range(1, NUM_STAGES):
        stage = n + 1
        target = [cfg.branch_channels(i) for i in range(stage)]
        target_sizes = [cfg.branch_size(r, i) for i in range(stage)]
        for i in range(stage):
            if i < len(channels):
                if channels[i] != target[i]:
                    yield f'stage{stage}.transition{i}', _conv(plain, 3, 1, channels[i], target[i]), sizes[i]
            else:
                # new branch grows out of the lowest-resolution existing one
                yield f'stage{stage}.transition{i}', _conv(plain, 3, 2, channels[-1], target[i]), target_sizes[i]
        channels, sizes = target, target_sizes

        for m in range(cfg.modules_per_stage[n]):
            mid = f'stage{stage}.module{m}'
            for i in range(stage):
                for b in range(counts[n][i]):
                    yield f'{mid}.branch{i}.block{b}.conv1', _conv(plain, k, 1, channels[i], channels[i]), sizes[i]
                    yield f'{mid}.branch{i}.block{b}.conv2', _conv(plain, k, 1, channels[i], channels[i]), sizes[i]
            yield from _exchange(mid, channels, sizes)

    # HigherHRNet head on the 1/4 branch
    c = channels[0]
    deconv = cfg.deconv_channels or c
    joints = cfg.num_joints
    yield 'head.final0', BlockSpec(BlockKind.HEAD_CONV, 1, 1, c, 2 * joints), sizes[0]
    yield 'head.deconv0', BlockSpec(BlockKind.TRANSPOSED_CONV, 4, 2, c + 2 * joints, deconv), sizes[0] * 2
    yield 'head.final1', BlockSpec(BlockKind.HEAD_CONV, 1, 1, deconv, joints), sizes[0] * 2


def _exchange(mid: str, channels: Sequence[int], sizes: Sequence[int]) -> Iterator[tuple[str, BlockSpec, int]]:
    """ Exchange unit: every branch receives every other branch. """
    plain = BlockKind.PLAIN_CONV
    for i in range(len(channels)):
        for j in range(len(channels)):
            if j > i:
                # 1x1 at the source resolution, upsampled afterwards
                yield f'{mid}.fuse{i}.from{j}', _conv(plain, 1, 1, channels[j], channels[i]), sizes[j]
            elif j < i:
                size = sizes[j]
                for t in range(i - j):
                    last = t == i - j - 1
                    size //= 2
                    cout = channels[i] if last else channels[j]
                    yield f'{mid}.fuse{i}.from{j}.down{t}', _conv(plain, 3, 2, channels[j], cout), size
