"""
LitePose toolkit: architecture family and cost model, gradual shrinking of
multi-branch networks, weight-sharing supernet search, numpy inference and
bottom-up keypoint decoding with OKS evaluation.
"""

__version__ = '0.1.0'

from .archspec import ArchConfig, BlockKind, BlockSpec, validate
from .costmodel import CostReport, model_cost
from .errors import ErrorCode, ToolkitError
from .presets import preset, preset_names

__all__ = [
    'ArchConfig',
    'BlockKind',
    'BlockSpec',
    'CostReport',
    'ErrorCode',
    'ToolkitError',
    'model_cost',
    'preset',
    'preset_names',
    'validate',
]
