"""
Analytic parameter and multiply-accumulate (MAC) counting.

Every convolution counts k*k*cin*cout/groups weights plus 2*cout for the
per-channel scale and shift of its folded normalisation. MACs are
k*k*cin*cout*h_out*w_out/groups. Transposed convs use the same formula at
their output resolution. Concatenation and activations are free.
"""

import csv
import io
import logging
from dataclasses import dataclass
from typing import Callable

from .archspec import (
    ArchConfig,
    BlockKind,
    BlockSpec,
    ConvSpec,
    block_violations,
    layer_table,
    with_kernel,
)
from .errors import ArchValidationError
from .multibranch import MultiBranchConfig, multibranch_layers, validate_multibranch

logger = logging.getLogger(__name__)

CSV_COLUMNS = ('layer_id', 'kind', 'k', 'cin', 'cout', 'h', 'w', 'params', 'macs')


@dataclass(frozen=True, slots=True)
class LayerCost:
    layer_id: str
    kind: BlockKind
    kernel_size: int
    in_channels: int
    out_channels: int
    height: int
    width: int
    params: int
    macs: int

    def row(self) -> tuple:
        return (
            self.layer_id, str(self.kind), self.kernel_size, self.in_channels,
            self.out_channels, self.height, self.width, self.params, self.macs,
        )


@dataclass(frozen=True, slots=True)
class CostReport:
    name: str
    resolution: int
    per_layer: tuple[LayerCost, ...]

    @property
    def total_params(self) -> int:
        return sum(layer.params for layer in self.per_layer)

    @property
    def total_macs(self) -> int:
        return sum(layer.macs for layer in self.per_layer)

    @property
    def flops(self) -> int:
        return 2 * self.total_macs

    @property
    def gmacs(self) -> float:
        """ Total GMACs to three significant digits. """
        return float(f'{self.total_macs / 1e9:.3g}')

    @property
    def mparams(self) -> float:
        return float(f'{self.total_params / 1e6:.3g}')

    def by_layer(self) -> dict[str, LayerCost]:
        return {layer.layer_id: layer for layer in self.per_layer}

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator='\n')
        writer.writerow(CSV_COLUMNS)
        writer.writerows(layer.row() for layer in self.per_layer)
        return buf.getvalue()

    def to_summary(self) -> dict:
        return {
            'name': self.name,
            'resolution': self.resolution,
            'params': self.total_params,
            'macs': self.total_macs,
            'gmacs': self.gmacs,
            'flops': self.flops,
            'layers': len(self.per_layer),
        }


def conv_cost(kernel_size: int, in_channels: int, out_channels: int, groups: int, h_out: int, w_out: int) -> tuple[int, int]:
    weights = kernel_size * kernel_size * in_channels * out_channels // groups
    return weights + 2 * out_channels, weights * h_out * w_out


def conv_spec_cost(conv: ConvSpec, h_out: int, w_out: int) -> tuple[int, int]:
    return conv_cost(conv.kernel_size, conv.in_channels, conv.out_channels, conv.groups, h_out, w_out)


def layer_cost(b: BlockSpec, h_out: int, w_out: int) -> tuple[int, int]:
    """ (params, macs) of one block whose output is h_out x w_out. """
    if h_out < 1 or w_out < 1:
        raise ValueError(f'{h_out}x{w_out}: output size must be positive')

    if b.kind == BlockKind.CONCAT:
        return 0, 0

    if violations := block_violations(b):
        raise ArchValidationError(str(b.kind), violations)

    match b.kind:
        case BlockKind.INVERTED_RESIDUAL:
            hidden = b.hidden_channels
            parts = (
                conv_cost(1, b.in_channels, hidden, 1, h_out * b.stride, w_out * b.stride),
                conv_cost(b.kernel_size, hidden, hidden, hidden, h_out, w_out),
                conv_cost(1, hidden, b.out_channels, 1, h_out, w_out),
            )
            return sum(p for p, _ in parts), sum(m for _, m in parts)
        case BlockKind.TRANSPOSED_CONV:
            return conv_cost(b.kernel_size, b.in_channels, b.out_channels, 1, h_out, w_out)
        case _:
            return conv_cost(b.kernel_size, b.in_channels, b.out_channels, b.groups, h_out, w_out)


def _report(name: str, resolution: int, table) -> CostReport:
    per_layer = []
    for layer_id, block, size in table:
        params, macs = layer_cost(block, size, size)
        per_layer.append(LayerCost(
            layer_id, block.kind, block.kernel_size, block.in_channels,
            block.out_channels, size, size, params, macs,
        ))
    return CostReport(name, resolution, tuple(per_layer))


def model_cost(cfg: ArchConfig | MultiBranchConfig, resolution: int | None = None) -> CostReport:
    """ Cost of every layer of `cfg` at `resolution` (default: the config's own). """
    resolution = cfg.input_resolution if resolution is None else resolution

    if isinstance(cfg, MultiBranchConfig):
        if violations := validate_multibranch(cfg, resolution):
            raise ArchValidationError(cfg.name, violations)
        report = _report(cfg.name, resolution, multibranch_layers(cfg, resolution))
    else:
        report = _report(cfg.name, resolution, layer_table(cfg, resolution))

    logger.debug('%s @%d: %d params, %d MACs', cfg.name, resolution, report.total_params, report.total_macs)
    return report


def kernel_sweep(cfg: ArchConfig, kernels: list[int], resolution: int | None = None) -> list[tuple[int, CostReport]]:
    """ Cost of `cfg` with every depthwise kernel replaced by each of `kernels`. """
    return [(k, model_cost(with_kernel(cfg, k), resolution)) for k in kernels]


def partition_cost(report: CostReport, predicate: Callable[[LayerCost], bool]) -> tuple[CostReport, CostReport]:
    """ Split a report into the layers selected by `predicate` and the rest. """
    selected = tuple(layer for layer in report.per_layer if predicate(layer))
    rest = tuple(layer for layer in report.per_layer if not predicate(layer))
    return (
        CostReport(report.name, report.resolution, selected),
        CostReport(report.name, report.resolution, rest),
    )
