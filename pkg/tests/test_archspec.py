"""Tests for architecture descriptions, validation and JSON files."""

import json
from fractions import Fraction

import pytest

from litepose_toolkit.archspec import (
    BlockKind,
    BlockSpec,
    arch_from_dict,
    arch_to_dict,
    block_violations,
    downsample_factor,
    dump_arch,
    ensure_valid,
    is_fused,
    iter_convs,
    load_arch,
    output_heads,
    parse_ratio,
    shape_trace,
    validate,
    with_kernel,
    without_fusion,
)
from litepose_toolkit.errors import ArchFormatError, ArchValidationError, ErrorCode, UnknownPresetError
from litepose_toolkit.presets import LITEPOSE_MODELS, preset, preset_names, resolve_model, supernet


def test_toy_arch_is_valid(toy_arch):
    """Test the toy network passes validation."""
    assert validate(toy_arch) == []
    assert downsample_factor(toy_arch) == 4


@pytest.mark.parametrize('name', LITEPOSE_MODELS + ('LitePose-Supernet',))
def test_litepose_presets_are_valid(name):
    """Test every shipped single-branch preset validates."""
    cfg = preset(name)
    assert validate(cfg) == []
    assert cfg.name == name
    assert cfg.num_joints == 14


def test_supernet_layout():
    """Test supernet stage layout and its fused deconv head."""
    cfg = supernet()
    assert [len(stage) for stage in cfg.stages] == [2, 6, 8, 10, 10]
    assert [b.fuse_from for b in cfg.deconv_head] == [2, 1, None]
    assert cfg.outputs == (4, 2)
    assert downsample_factor(cfg) == 16


def test_stride_three_gives_single_violation(toy_arch):
    """Test an invalid stride is reported once, without follow-on violations."""
    stage = (toy_arch.stages[1][0].replace(stride=3),)
    cfg = toy_arch.replace(stages=(toy_arch.stages[0], stage, toy_arch.stages[2]))
    violations = validate(cfg)
    assert len(violations) == 1
    assert violations[0].layer_id == 'stage1.0'
    assert violations[0].rule == 'stride'


def test_wiring_violation(toy_arch):
    """Test a channel mismatch between consecutive blocks is reported."""
    stage = (toy_arch.stages[2][0].replace(in_channels=12), toy_arch.stages[2][1])
    cfg = toy_arch.replace(stages=toy_arch.stages[:2] + (stage,))
    rules = [(v.layer_id, v.rule) for v in validate(cfg)]
    assert ('stage2.0', 'wiring') in rules


def test_fusion_resolution_mismatch(toy_arch):
    """Test fusing a stage at the wrong resolution is reported on the concat."""
    head = (toy_arch.deconv_head[0].replace(fuse_from=2),)
    violations = validate(toy_arch.replace(deconv_head=head))
    assert any(v.layer_id == 'deconv0.concat' and v.rule == 'fusion' for v in violations)


def test_resolution_not_divisible(toy_arch):
    """Test a resolution that is not a multiple of the downsampling factor."""
    violations = validate(toy_arch.replace(input_resolution=30))
    assert ('config', 'resolution') in [(v.layer_id, v.rule) for v in violations]


def test_missing_output_level(toy_arch):
    """Test an output scale with no matching feature level."""
    violations = validate(toy_arch.replace(outputs=(4, 8)))
    assert any(v.rule == 'outputs' for v in violations)


def test_ensure_valid_raises(toy_arch):
    """Test ensure_valid raises with every violation attached."""
    with pytest.raises(ArchValidationError) as exc:
        ensure_valid(toy_arch.replace(num_joints=0, outputs=(4, 4)))
    assert exc.value.code == ErrorCode.INVALID_INPUT
    assert {v.rule for v in exc.value.violations} == {'joints', 'outputs'}


@pytest.mark.parametrize('block, rule', [
    (BlockSpec(BlockKind.PLAIN_CONV, 4, 1, 8, 8), 'kernel'),
    (BlockSpec(BlockKind.PLAIN_CONV, 3, 1, 8, 6, groups=4), 'groups'),
    (BlockSpec(BlockKind.INVERTED_RESIDUAL, 3, 1, 6, 6, Fraction(1, 4)), 'expand'),
    (BlockSpec(BlockKind.TRANSPOSED_CONV, 3, 2, 8, 8), 'kernel'),
    (BlockSpec(BlockKind.PLAIN_CONV, 3, 1, 0, 8), 'channels'),
])
def test_block_violations(block, rule):
    """Test single-block rules."""
    assert [v.rule for v in block_violations(block)] == [rule]


def test_shape_trace(toy_arch):
    """Test layer output sizes and channels, concat and heads included."""
    trace = {e.layer_id: (e.height, e.channels) for e in shape_trace(toy_arch)}
    assert trace['stage0.0'] == (16, 8)
    assert trace['stage2.1'] == (8, 16)
    assert trace['deconv0'] == (16, 8)
    assert trace['deconv0.concat'] == (16, 16)
    assert trace['head0'] == (8, 4)
    assert trace['head1'] == (16, 2)


def test_output_heads_carry_tags_on_coarsest(toy_arch):
    """Test tags live on the 1/4 output only."""
    heads = output_heads(toy_arch)
    assert [(h.scale, h.level, h.carries_tags) for h in heads] == [(4, 0, True), (2, 1, False)]


def test_iter_convs_inverted_residual(toy_arch):
    """Test an inverted-residual block expands into three convolutions."""
    convs = {c.conv_id: c for c in iter_convs(toy_arch)}
    dw = convs['stage2.1.dw']
    assert dw.groups == dw.in_channels == 32
    assert not convs['stage2.1.project'].activation
    assert convs['head1'].in_segments == (8, 8)
    assert convs['deconv0'].weight_shape() == (16, 8, 4, 4)


def test_with_kernel(toy_arch):
    """Test kernel replacement touches inverted-residual blocks only."""
    cfg = with_kernel(toy_arch, 5)
    assert cfg.stages[0][0].kernel_size == 3
    assert all(b.kernel_size == 5 for stage in cfg.stages[1:] for b in stage)
    assert cfg.name == 'toy-k5'


def test_without_fusion(toy_arch):
    """Test dropping fusion rewires the heads."""
    cfg = without_fusion(toy_arch)
    assert is_fused(toy_arch) and not is_fused(cfg)
    assert validate(cfg) == []
    trace = {e.layer_id: e.channels for e in shape_trace(cfg)}
    assert 'deconv0.concat' not in trace


def test_json_round_trip(toy_arch, tmp_path):
    """Test an architecture survives dump and load."""
    path = tmp_path / 'toy.json'
    path.write_text(dump_arch(toy_arch))
    assert load_arch(path) == toy_arch


def test_unknown_field_rejected(toy_arch):
    """Test unknown fields in architecture JSON are rejected."""
    data = arch_to_dict(toy_arch)
    data['stages'][0][0]['dilation'] = 2
    with pytest.raises(ArchFormatError, match='dilation'):
        arch_from_dict(data)


def test_missing_field_rejected(toy_arch):
    """Test missing fields in architecture JSON are rejected."""
    data = arch_to_dict(toy_arch)
    del data['outputs']
    with pytest.raises(ArchFormatError, match='outputs'):
        arch_from_dict(data)


def test_load_arch_malformed(tmp_path):
    """Test a file that is not JSON."""
    path = tmp_path / 'broken.json'
    path.write_text('{"name": ')
    with pytest.raises(ArchFormatError):
        load_arch(path)


@pytest.mark.parametrize('value, expected', [
    (1, Fraction(1)),
    ('3/4', Fraction(3, 4)),
    (0.25, Fraction(1, 4)),
    ('0.5', Fraction(1, 2)),
])
def test_parse_ratio(value, expected):
    """Test accepted ratio spellings."""
    assert parse_ratio(value) == expected


def test_preset_names_resolve():
    """Test every listed preset name loads."""
    for name in preset_names():
        assert resolve_model(name).name.startswith(name.split('-Shrink')[0])


def test_unknown_preset():
    """Test an unknown name is neither a preset nor a file."""
    with pytest.raises(UnknownPresetError):
        resolve_model('LitePose-XXL')


def test_resolve_model_from_file(toy_arch, tmp_path):
    """Test a path resolves to the architecture it holds."""
    path = tmp_path / 'toy.json'
    path.write_text(json.dumps(arch_to_dict(toy_arch)))
    assert resolve_model(str(path)) == toy_arch
