"""
Shared fixtures: toy networks small enough for the numpy engine and for
exhaustive enumeration of their search spaces.
"""
import json
from fractions import Fraction

import pytest

from litepose_toolkit.archspec import ArchConfig, BlockKind, BlockSpec
from litepose_toolkit.supernet import SearchSpace

IR = BlockKind.INVERTED_RESIDUAL


def make_toy_arch(num_joints=2, resolution=32):
    """
    Stem, a one-block stage, a two-block stage and a fused deconv.
    Five width genes; downsampling factor 4.
    """
    return ArchConfig(
        name='toy',
        input_resolution=resolution,
        num_joints=num_joints,
        stages=(
            (BlockSpec(BlockKind.STEM_CONV, 3, 2, 3, 8),),
            (BlockSpec(IR, 3, 1, 8, 8, Fraction(2)),),
            (
                BlockSpec(IR, 3, 2, 8, 16, Fraction(2)),
                BlockSpec(IR, 3, 1, 16, 16, Fraction(2)),
            ),
        ),
        deconv_head=(BlockSpec(BlockKind.TRANSPOSED_CONV, 4, 2, 16, 8, fuse_from=1),),
        outputs=(4, 2),
    )


def make_tiny_arch(num_joints=2, resolution=16):
    """ Stem plus two inverted-residual blocks and a single 1/4 head. """
    return ArchConfig(
        name='tiny',
        input_resolution=resolution,
        num_joints=num_joints,
        stages=(
            (BlockSpec(BlockKind.STEM_CONV, 3, 2, 3, 8),),
            (
                BlockSpec(IR, 3, 2, 8, 16, Fraction(2)),
                BlockSpec(IR, 3, 1, 16, 16, Fraction(2)),
            ),
        ),
        outputs=(4,),
    )


@pytest.fixture
def toy_arch():
    return make_toy_arch()


@pytest.fixture
def tiny_arch():
    return make_tiny_arch()


@pytest.fixture
def toy_space(toy_arch):
    """ 2 resolutions x 2 ratios ** 5 genes = 64 choices. """
    return SearchSpace.from_arch(toy_arch, (32, 16), (1, Fraction(1, 2)), name='toy-space')


@pytest.fixture
def write_json(tmp_path):
    """ Write `data` as JSON under tmp_path and return the path. """
    def write(name, data):
        path = tmp_path / name
        path.write_text(json.dumps(data))
        return str(path)

    return write
