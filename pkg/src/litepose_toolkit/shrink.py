# Gradual shrinking of a four-stage multi-branch network.
#
# A ShrinkConfig holds, for stage n (1-based), the number of refinement
# blocks on each of its n branches. Configurations are partially ordered
# entrywise; a shrinking sequence walks down that order one edit at a time.
#
# Recorded trend: accuracy improves as the high-resolution branches are
# shrunk, even though fewer MACs are spent. Only the cost side is computed
# here; accuracy needs training.

import logging
from dataclasses import dataclass
from typing import Iterable, Sequence

from .costmodel import CostReport, model_cost
from .errors import ShrinkError
from .multibranch import NUM_STAGES, MultiBranchConfig

logger = logging.getLogger(__name__)


@dataclass(frozen=True, slots=True)
class ShrinkConfig:
    stages: tuple[tuple[int, ...], ...]

    def __post_init__(self):
        if len(self.stages) != NUM_STAGES:
            raise ShrinkError(f'{len(self.stages)}: expected {NUM_STAGES} stages')
        for n, counts in enumerate(self.stages):
            if len(counts) != n + 1:
                raise ShrinkError(f'{list(counts)}: stage {n + 1} must have exactly {n + 1} branch counts')
            if any(c < 0 for c in counts):
                raise ShrinkError(f'{list(counts)}: block counts must be non-negative')

    @classmethod
    def from_lists(cls, stages: Sequence[Sequence[int]]) -> 'ShrinkConfig':
        return cls(tuple(tuple(int(c) for c in counts) for counts in stages))

    def __str__(self):
        return ';'.join(','.join(str(c) for c in counts) for counts in self.stages)

    def total_blocks(self) -> int:
        return sum(sum(counts) for counts in self.stages)


@dataclass(frozen=True, slots=True)
class ShrinkEdit:
    stage: int
    """ 1-based stage number. """
    branch: int
    """ 1-based branch number within the stage. """
    amount: int = 1


@dataclass(frozen=True, slots=True)
class ShrinkStep:
    name: str
    config: ShrinkConfig
    base_channel: int
    reference_gmacs: float | None = None
    """ Published MAC figure for this configuration, if any. """


def parse_shrink_config(text: str) -> ShrinkConfig:
    """ Parse "a;b,c;d,e,f;g,h,i,j" (stages separated by ';', branches by ','). """
    try:
        stages = [[int(c) for c in part.split(',')] for part in text.strip().split(';')]
    except ValueError:
        raise ShrinkError(f'{text!r}: expected integers separated by "," and ";"') from None
    return ShrinkConfig.from_lists(stages)


RECORDED_SEQUENCE = (
    ShrinkStep('Baseline', parse_shrink_config('4;4,4;4,4,4;4,4,4,4'), 16, 12.5),
    ShrinkStep('Shrink1', parse_shrink_config('4;3,4;2,3,4;1,2,3,4'), 16, 10.1),
    ShrinkStep('Shrink2', parse_shrink_config('4;1,4;1,1,4;1,1,1,4'), 18, 10.0),
    ShrinkStep('Shrink3', parse_shrink_config('4;0,4;0,0,4;0,0,0,4'), 18, 9.2),
)


def is_shrunk_from(a_prime: ShrinkConfig, a: ShrinkConfig) -> bool:
    """ True iff every block count of `a_prime` is at most the matching count of `a`. """
    return all(
        x <= y
        for counts_p, counts in zip(a_prime.stages, a.stages)
        for x, y in zip(counts_p, counts)
    )


def apply_edit(config: ShrinkConfig, edit: ShrinkEdit) -> ShrinkConfig:
    if edit.amount < 1:
        raise ShrinkError(f'{edit.amount}: an edit removes at least one block')
    if not 1 <= edit.stage <= NUM_STAGES or not 1 <= edit.branch <= edit.stage:
        raise ShrinkError(f'stage {edit.stage} branch {edit.branch}: no such branch')

    stages = [list(counts) for counts in config.stages]
    current = stages[edit.stage - 1][edit.branch - 1]
    if current < edit.amount:
        raise ShrinkError(
            f'stage {edit.stage} branch {edit.branch}: cannot remove {edit.amount} of {current} blocks'
        )
    stages[edit.stage - 1][edit.branch - 1] = current - edit.amount
    return ShrinkConfig.from_lists(stages)


def shrink_sequence(start: ShrinkConfig, steps: Iterable[ShrinkEdit]) -> list[ShrinkConfig]:
    """ Apply `steps` in order; the result starts with `start` and is non-increasing. """
    sequence = [start]
    for edit in steps:
        sequence.append(apply_edit(sequence[-1], edit))
    return sequence


def is_shrinking(sequence: Sequence[ShrinkConfig]) -> bool:
    return all(is_shrunk_from(b, a) for a, b in zip(sequence, sequence[1:]))


def multibranch_config(
    c: ShrinkConfig, base_channel: int, resolution: int = 512, *, num_joints: int = 14, name: str | None = None
) -> MultiBranchConfig:
    return MultiBranchConfig(
        name=name or f'Scaled-HigherHRNet-W{base_channel}[{c}]',
        base_channel=base_channel,
        block_counts=c,
        num_joints=num_joints,
        input_resolution=resolution,
    )


def shrink_cost(c: ShrinkConfig, base_channel: int, resolution: int = 512) -> CostReport:
    return model_cost(multibranch_config(c, base_channel, resolution))


def shrink_table(
    steps: Sequence[ShrinkStep] = RECORDED_SEQUENCE, resolution: int = 512
) -> list[tuple[str, int, float]]:
    """ (name, base channel, GMACs) per step, for CSV output. """
    rows = []
    for step in steps:
        report = shrink_cost(step.config, step.base_channel, resolution)
        logger.debug('%s [%s] ch=%d: %.3f GMACs', step.name, step.config, step.base_channel, report.total_macs / 1e9)
        rows.append((step.name, step.base_channel, report.gmacs))
    return rows
