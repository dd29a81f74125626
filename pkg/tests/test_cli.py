"""Tests for the litepose command line."""

import csv
import io
import json
import os

import pytest

from litepose_toolkit.archspec import arch_to_dict
from litepose_toolkit.cli import build_parser, main
from litepose_toolkit.errors import ErrorCode
from litepose_toolkit.nas import EvolutionParams
from litepose_toolkit.presets import preset_names
from litepose_toolkit.shrink import RECORDED_SEQUENCE


def read_json(*parts):
    with open(os.path.join(*parts), 'r', encoding='utf-8') as f:
        return json.load(f)


def test_cost_preset(tmp_path, capsys):
    """Test the cost subcommand on a shipped model."""
    out = str(tmp_path / 'run')
    assert main(['cost', 'LitePose-S', '448', '--out', out]) == ErrorCode.SUCCESS
    summary = read_json(out, 'cost.json')
    assert summary['macs'] / 1e9 == pytest.approx(5.0, rel=0.02)
    assert 'LitePose-S @448' in capsys.readouterr().out

    manifest = read_json(out, 'manifest.json')
    assert manifest['subcommand'] == 'cost'
    assert manifest['outputs'] == ['cost.csv', 'cost.json']
    assert manifest['seed'] == 0


def test_cost_variants(tmp_path):
    """Test kernel and fusion variants change the cost."""
    base = str(tmp_path / 'base')
    small = str(tmp_path / 'small')
    assert main(['cost', '0.5-LitePose', '--out', base]) == 0
    assert main(['cost', '0.5-LitePose', '--kernel', '3', '--no-fusion', '--out', small]) == 0
    assert read_json(small, 'cost.json')['macs'] < read_json(base, 'cost.json')['macs']


def test_cost_invalid_arch(toy_arch, tmp_path, write_json, capsys):
    """Test an invalid architecture file lists its violations and exits 2."""
    data = arch_to_dict(toy_arch)
    data['stages'][1][0]['s'] = 3
    path = write_json('bad.json', data)
    code = main(['cost', path, '--out', str(tmp_path / 'run')])
    err = capsys.readouterr().err
    assert code == ErrorCode.INVALID_INPUT
    assert 'error: toy: invalid architecture' in err
    assert 'stage1.0 (#1) [stride]: 3: expected one of [1, 2]' in err


def test_unknown_model(tmp_path, capsys):
    """Test an unknown model name exits 2."""
    assert main(['cost', 'LitePose-XXL', '--out', str(tmp_path / 'run')]) == ErrorCode.INVALID_INPUT
    assert 'LitePose-XXL' in capsys.readouterr().err


def test_shrink_default(tmp_path, capsys):
    """Test the recorded shrinking sequence table."""
    assert main(['shrink', '--out', str(tmp_path / 'run')]) == 0
    rows = list(csv.reader(io.StringIO(capsys.readouterr().out)))
    assert rows[0] == ['name', 'config', 'channels', 'gmacs', 'reference_gmacs']
    assert [row[0] for row in rows[1:]] == [step.name for step in RECORDED_SEQUENCE]


def test_shrink_custom_sequences(tmp_path, write_json):
    """Test an empty sequence and a growing one."""
    empty = write_json('empty.json', [])
    out = str(tmp_path / 'empty')
    assert main(['shrink', '--sequence', empty, '--out', out]) == 0
    with open(os.path.join(out, 'shrink.csv'), encoding='utf-8') as f:
        assert f.read() == 'name,config,channels,gmacs,reference_gmacs\n'

    growing = write_json('growing.json', [
        {'name': 'a', 'config': '2;2,2;2,2,2;2,2,2,2', 'channels': 16},
        {'name': 'b', 'config': '2;2,3;2,2,2;2,2,2,2', 'channels': 16},
    ])
    assert main(['shrink', '--sequence', growing, '--out', str(tmp_path / 'growing')]) == ErrorCode.INVALID_INPUT


def test_synth_decode_eval(tmp_path, capsys):
    """Test a planted scene survives decode and scores AP 1."""
    scene_dir = str(tmp_path / 'scene')
    pred_dir = str(tmp_path / 'pred')
    eval_dir = str(tmp_path / 'eval')
    assert main(['synth', '--persons', '3', '--joints', '5', '--seed', '1', '--out', scene_dir]) == 0
    assert main(['decode', os.path.join(scene_dir, 'output.tensor'), '--out', pred_dir]) == 0
    assert len(read_json(pred_dir, 'predictions.json')) == 3

    capsys.readouterr()
    assert main([
        'eval', '--gt', os.path.join(scene_dir, 'gt.json'),
        '--pred', os.path.join(pred_dir, 'predictions.json'),
        '--joints', '5', '--out', eval_dir,
    ]) == 0
    assert capsys.readouterr().out.splitlines()[0] == 'AP 1.0000'
    assert read_json(eval_dir, 'eval.json')['ap'] == 1.0
    with open(os.path.join(eval_dir, 'pr.csv'), encoding='utf-8') as f:
        assert len(f.read().splitlines()) == 1 + 10 * 101


def test_synth_is_reproducible(tmp_path):
    """Test the same seed writes byte-identical outputs."""
    dirs = [str(tmp_path / name) for name in ('a', 'b')]
    for out in dirs:
        assert main(['synth', '--seed', '3', '--out', out]) == 0
    for name in ('gt.json', 'output.tensor'):
        with open(os.path.join(dirs[0], name), 'rb') as a, open(os.path.join(dirs[1], name), 'rb') as b:
            assert a.read() == b.read()


def test_eval_table_mismatch(tmp_path, write_json):
    """Test a named OKS table must match the joint count."""
    scene_dir = str(tmp_path / 'scene')
    assert main(['synth', '--joints', '5', '--out', scene_dir]) == 0
    gt = os.path.join(scene_dir, 'gt.json')
    pred = write_json('none.json', [])
    code = main(['eval', '--gt', gt, '--pred', pred, '--joints', '5', '--oks-table', 'coco', '--out', str(tmp_path / 'e')])
    assert code == ErrorCode.INVALID_INPUT


@pytest.fixture
def toy_space_file(toy_arch, write_json):
    return write_json('space.json', {
        'name': 'toy-file',
        'supernet': arch_to_dict(toy_arch),
        'resolutions': [32, 16],
        'width_ratios': [1, '1/2'],
    })


@pytest.mark.parametrize('evaluator', ['neg-macs', 'heatmap-proxy'])
def test_search(toy_space_file, tmp_path, evaluator):
    """Test a short search writes its history and best choice."""
    out = str(tmp_path / 'search')
    argv = [
        'search', '--space', toy_space_file, '--generations', '3', '--population', '8',
        '--tournament', '3', '--offspring', '4', '--evaluator', evaluator, '--out', out,
    ]
    assert main(argv) == 0
    with open(os.path.join(out, 'search.jsonl'), encoding='utf-8') as f:
        history = [json.loads(line) for line in f]
    assert [record['generation'] for record in history] == [0, 1, 2, 3]
    best = read_json(out, 'best.json')
    assert best['space'] == 'toy-file'
    assert best['fitness'] == history[-1]['fitness']


def test_search_infeasible(toy_space_file, tmp_path, capsys):
    """Test a budget below every choice is a runtime failure."""
    code = main(['search', '--space', toy_space_file, '--max-gmacs', '1e-9', '--out', str(tmp_path / 's')])
    assert code == ErrorCode.RUNTIME_ERROR
    assert 'constraint is infeasible' in capsys.readouterr().err


def test_search_defaults():
    """Test omitted search flags take the evolution defaults."""
    args = build_parser().parse_args(['search', '--space', 'litepose-xs'])
    defaults = EvolutionParams()
    for name in ('generations', 'population', 'tournament', 'offspring', 'p_mut', 'retry_cap', 'workers'):
        assert getattr(args, name) == getattr(defaults, name)


def test_search_with_default_flags(toy_space_file, tmp_path):
    """Test a search that sets only the population size runs to completion."""
    out = str(tmp_path / 'search')
    argv = ['search', '--space', toy_space_file, '--population', '8', '--generations', '2', '--out', out]
    assert main(argv) == ErrorCode.SUCCESS
    assert read_json(out, 'best.json')['space'] == 'toy-file'


def test_infer_counts_match(toy_arch, tmp_path, write_json):
    """Test inference counts exactly the analytic MACs."""
    path = write_json('toy.json', arch_to_dict(toy_arch))
    for resolution in ('32', '16'):
        out = str(tmp_path / f'infer{resolution}')
        assert main(['infer', path, '--resolution', resolution, '--out', out]) == 0
        result = read_json(out, 'infer.json')
        assert result['counted_macs'] == result['analytic_macs']
        assert result['resolution'] == int(resolution)
        assert os.path.exists(os.path.join(out, 'output1.tensor'))


def test_report(tmp_path, capsys):
    """Test the report covers every preset."""
    out = str(tmp_path / 'report')
    assert main(['report', '--out', out]) == 0
    rows = list(csv.reader(io.StringIO(capsys.readouterr().out)))
    assert len(rows) == len(preset_names()) + 1
    assert rows[1][0] == 'LitePose-Supernet'
    assert len(read_json(out, 'report.json')) == len(preset_names())
