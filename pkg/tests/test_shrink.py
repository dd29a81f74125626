"""Tests for gradual shrinking of multi-branch networks."""

import numpy as np
import pytest

from litepose_toolkit.costmodel import model_cost
from litepose_toolkit.errors import ShrinkError
from litepose_toolkit.multibranch import multibranch_layers, validate_multibranch
from litepose_toolkit.presets import HRNET_MODELS, preset
from litepose_toolkit.shrink import (
    RECORDED_SEQUENCE,
    ShrinkConfig,
    ShrinkEdit,
    apply_edit,
    is_shrinking,
    is_shrunk_from,
    multibranch_config,
    parse_shrink_config,
    shrink_cost,
    shrink_sequence,
    shrink_table,
)


def random_config(rng, high=5):
    return ShrinkConfig.from_lists([rng.integers(0, high, size=n + 1).tolist() for n in range(4)])


def random_below(rng, config):
    return ShrinkConfig.from_lists([[int(rng.integers(0, c + 1)) for c in counts] for counts in config.stages])


@pytest.mark.parametrize('step, expected', list(zip(RECORDED_SEQUENCE, (12.5, 10.1, 10.0, 9.2))))
def test_shrink_sequence_cost(step, expected):
    """Test each recorded shrinking step against its published MACs within 5%."""
    report = shrink_cost(step.config, step.base_channel)
    assert report.total_macs / 1e9 == pytest.approx(expected, rel=0.05)
    assert step.reference_gmacs == expected


def test_recorded_sequence_is_shrinking():
    """Test the recorded sequence walks down the partial order."""
    assert is_shrinking([step.config for step in RECORDED_SEQUENCE])


def test_shrink_table_rows():
    """Test the table helper yields one row per step."""
    rows = shrink_table()
    assert [name for name, _, _ in rows] == ['Baseline', 'Shrink1', 'Shrink2', 'Shrink3']
    assert [ch for _, ch, _ in rows] == [16, 16, 18, 18]
    assert shrink_table(()) == []


def test_parse_and_format():
    """Test the text form of a configuration."""
    c = parse_shrink_config('4;3,4;2,3,4;1,2,3,4')
    assert c.stages == ((4,), (3, 4), (2, 3, 4), (1, 2, 3, 4))
    assert str(c) == '4;3,4;2,3,4;1,2,3,4'
    assert c.total_blocks() == 30


@pytest.mark.parametrize('text', ['4;4,4;4,4,4', '4;4;4,4,4;4,4,4,4', '4;4,-1;4,4,4;4,4,4,4', '4;a,4;4,4,4;4,4,4,4'])
def test_invalid_configs(text):
    """Test malformed configurations are rejected."""
    with pytest.raises(ShrinkError):
        parse_shrink_config(text)


def test_partial_order_laws():
    """Test reflexivity, antisymmetry and transitivity on random configurations."""
    rng = np.random.default_rng(0)
    for _ in range(1000):
        a = random_config(rng)
        b = random_below(rng, a)
        c = random_below(rng, b)
        other = random_config(rng)

        assert is_shrunk_from(a, a)
        assert is_shrunk_from(b, a) and is_shrunk_from(c, b) and is_shrunk_from(c, a)
        if is_shrunk_from(a, other) and is_shrunk_from(other, a):
            assert a == other


def test_shrinking_never_adds_macs():
    """Test a shrunk configuration never costs more at the same width."""
    rng = np.random.default_rng(1)
    for _ in range(1000):
        a = random_config(rng)
        b = random_below(rng, a)
        assert shrink_cost(b, 16, 128).total_macs <= shrink_cost(a, 16, 128).total_macs


def test_apply_edit():
    """Test removing blocks from one branch."""
    base = RECORDED_SEQUENCE[0].config
    shrunk = apply_edit(base, ShrinkEdit(stage=4, branch=1, amount=3))
    assert shrunk.stages[3] == (1, 4, 4, 4)
    assert is_shrunk_from(shrunk, base)


@pytest.mark.parametrize('edit', [
    ShrinkEdit(stage=1, branch=2),
    ShrinkEdit(stage=5, branch=1),
    ShrinkEdit(stage=2, branch=1, amount=5),
    ShrinkEdit(stage=2, branch=1, amount=0),
])
def test_apply_edit_invalid(edit):
    """Test edits that name no branch or remove too much."""
    with pytest.raises(ShrinkError):
        apply_edit(RECORDED_SEQUENCE[0].config, edit)


def test_shrink_sequence():
    """Test a sequence of edits is non-increasing."""
    edits = [ShrinkEdit(2, 1), ShrinkEdit(3, 1, 2), ShrinkEdit(4, 2)]
    sequence = shrink_sequence(RECORDED_SEQUENCE[0].config, edits)
    assert len(sequence) == 4
    assert is_shrinking(sequence)
    assert not is_shrinking(sequence[::-1])


def test_zero_block_branch_keeps_exchange():
    """Test a branch with no blocks still takes part in the exchange units."""
    cfg = multibranch_config(RECORDED_SEQUENCE[3].config, 18)
    ids = [layer_id for layer_id, _, _ in multibranch_layers(cfg)]
    assert not any(i.startswith('stage4.module0.branch0.block') for i in ids)
    assert 'stage4.module0.fuse0.from3' in ids
    assert 'stage4.module0.fuse3.from0.down2' in ids


def test_multibranch_widths():
    """Test branch widths double and resolutions halve."""
    cfg = multibranch_config(RECORDED_SEQUENCE[0].config, 16)
    assert [cfg.branch_channels(i) for i in range(4)] == [16, 32, 64, 128]
    assert [cfg.branch_size(512, i) for i in range(4)] == [128, 64, 32, 16]


def test_multibranch_validation():
    """Test a resolution the network cannot downsample is reported."""
    cfg = multibranch_config(RECORDED_SEQUENCE[0].config, 16, resolution=500)
    assert [v.rule for v in validate_multibranch(cfg)] == ['resolution']


def test_hrnet_presets():
    """Test the shrink presets are the recorded steps."""
    for name, step in zip(HRNET_MODELS, RECORDED_SEQUENCE):
        cfg = preset(name)
        assert cfg.block_counts == step.config
        assert cfg.base_channel == step.base_channel
        assert model_cost(cfg).total_macs == shrink_cost(step.config, step.base_channel).total_macs
