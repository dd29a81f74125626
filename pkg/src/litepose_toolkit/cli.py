"""
Command-line entry point.

Every subcommand writes its outputs into one run directory together with a
manifest.json that lists them. Outputs depend only on the inputs and
--seed; the creation timestamp lives in the manifest alone.
"""

import argparse
import csv
import datetime
import io
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field

import numpy as np

from . import __version__
from .archspec import ArchConfig, with_kernel, without_fusion
from .costmodel import model_cost
from .decode import DecodeParams, decode, keypoint_set_to_coco
from .engine import forward, load_tensor, save_tensor
from .errors import ArchValidationError, ErrorCode, ShrinkError, ToolkitError
from .evaluation import OKS_TABLES, evaluate_dataset, load_dataset, oks_table, uniform_k
from .nas import EvolutionParams, HeatmapProxyEvaluator, NegMacsEvaluator, evolve
from .presets import load_space, preset, preset_names, resolve_model
from .seeding import rng_for
from .shrink import RECORDED_SEQUENCE, ShrinkStep, is_shrinking, parse_shrink_config, shrink_table
from .supernet import load_store, random_store
from .synth import SynthParams, make_scene

logger = logging.getLogger(__name__)


@dataclass(slots=True)
class RunManifest:
    subcommand: str
    out_dir: str
    seed: int
    config_paths: list[str] = field(default_factory=list)
    version: str = __version__
    created: str = ''
    outputs: list[str] = field(default_factory=list)

    @property
    def path(self) -> str:
        return os.path.join(self.out_dir, 'manifest.json')

    def write(self) -> None:
        os.makedirs(self.out_dir, exist_ok=True)
        with open(self.path, 'w', encoding='utf-8') as f:
            json.dump(asdict(self), f, indent=2)
            f.write('\n')

    def output_path(self, name: str) -> str:
        """ Register output `name` and return where to write it. """
        if name not in self.outputs:
            self.outputs.append(name)
            self.write()
            logger.info('%s: registered output %s', self.subcommand, name)
        return os.path.join(self.out_dir, name)

    def write_text(self, name: str, text: str) -> str:
        path = self.output_path(name)
        with open(path, 'w', encoding='utf-8', newline='') as f:
            f.write(text)
        return path

    def write_json(self, name: str, data) -> str:
        return self.write_text(name, json.dumps(data, indent=2) + '\n')


def _csv(header, rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator='\n')
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue()


def cmd_cost(args, manifest: RunManifest) -> int:
    cfg = resolve_model(args.model)
    if args.kernel is not None or args.no_fusion:
        if not isinstance(cfg, ArchConfig):
            raise ToolkitError(f'{cfg.name}: kernel and fusion variants apply to single-branch models only',
                               code=ErrorCode.INVALID_INPUT)
        if args.kernel is not None:
            cfg = with_kernel(cfg, args.kernel)
        if args.no_fusion:
            cfg = without_fusion(cfg)

    report = model_cost(cfg, args.resolution)
    manifest.write_text('cost.csv', report.to_csv())
    manifest.write_json('cost.json', report.to_summary())
    print(f'{report.name} @{report.resolution}: {report.mparams:.3f}M params, {report.gmacs} GMACs')
    return ErrorCode.SUCCESS


def _read_sequence(path) -> list[ShrinkStep]:
    with open(path, 'r', encoding='utf-8') as f:
        data = json.load(f)
    try:
        return [
            ShrinkStep(str(s['name']), parse_shrink_config(s['config']), int(s['channels']))
            for s in data
        ]
    except (KeyError, TypeError, ValueError):
        raise ShrinkError(f'{path}: expected a list of {{name, config, channels}}') from None


def cmd_shrink(args, manifest: RunManifest) -> int:
    steps = RECORDED_SEQUENCE if args.sequence is None else _read_sequence(args.sequence)
    if not is_shrinking([s.config for s in steps]):
        raise ShrinkError('sequence is not non-increasing: every step must be shrunk from the previous one')

    rows = shrink_table(steps, args.resolution)
    out = [
        (name, str(step.config), channels, gmacs, '' if step.reference_gmacs is None else step.reference_gmacs)
        for (name, channels, gmacs), step in zip(rows, steps)
    ]
    text = _csv(('name', 'config', 'channels', 'gmacs', 'reference_gmacs'), out)
    manifest.write_text('shrink.csv', text)
    sys.stdout.write(text)
    return ErrorCode.SUCCESS


def cmd_search(args, manifest: RunManifest) -> int:
    space = load_space(args.space)
    params = EvolutionParams(
        population=args.population,
        tournament=args.tournament,
        p_mut=args.p_mut,
        retry_cap=args.retry_cap,
        generations=args.generations,
        offspring=args.offspring,
        workers=args.workers,
    )
    if args.evaluator == 'neg-macs':
        evaluator = NegMacsEvaluator(space)
    else:
        store = load_store(args.weights) if args.weights else random_store(space.supernet, args.seed)
        evaluator = HeatmapProxyEvaluator(store, seed=args.seed)

    constraint = None if args.max_gmacs is None else args.max_gmacs * 1e9
    state = evolve(space, constraint, evaluator, params, args.seed)

    lines = ''.join(json.dumps(record.to_dict()) + '\n' for record in state.history)
    manifest.write_text('search.jsonl', lines)
    best = {
        'space': space.name,
        'choice': state.best.choice.to_dict(),
        'fitness': state.best.fitness,
        'gmacs': round(state.best.macs / 1e9, 6),
        'evaluations': state.evaluations,
    }
    manifest.write_json('best.json', best)
    print(f'best fitness {state.best.fitness:.6g} at {state.best.macs / 1e9:.3f} GMACs')
    return ErrorCode.SUCCESS


def cmd_infer(args, manifest: RunManifest) -> int:
    cfg = resolve_model(args.model)
    if not isinstance(cfg, ArchConfig):
        raise ToolkitError(f'{cfg.name}: inference runs single-branch models only', code=ErrorCode.INVALID_INPUT)

    store = load_store(args.weights) if args.weights else random_store(cfg, args.seed)
    cfg = store.arch
    if args.input:
        x = load_tensor(args.input)
    else:
        r = args.resolution or cfg.input_resolution
        x = rng_for(args.seed, 'input').standard_normal((1, 3, r, r)).astype(np.float32)
    if x.ndim == 4 and x.shape[-1] != cfg.input_resolution:
        cfg = cfg.replace(input_resolution=x.shape[-1])

    result = forward(cfg, store, x)
    manifest.write_text('trace.csv', _csv(('layer_id', 'shape'), [
        (layer_id, 'x'.join(str(d) for d in shape)) for layer_id, shape in result.trace
    ]))
    for i, y in enumerate(result.outputs):
        save_tensor(manifest.output_path(f'output{i}.tensor'), y)

    analytic = model_cost(cfg).total_macs * x.shape[0]
    manifest.write_json('infer.json', {
        'model': cfg.name,
        'resolution': cfg.input_resolution,
        'batch': int(x.shape[0]),
        'counted_macs': result.counter.total,
        'analytic_macs': analytic,
        'outputs': [list(y.shape) for y in result.outputs],
    })
    print(f'{cfg.name}: {result.counter.total} MACs counted, {analytic} analytic')
    return ErrorCode.SUCCESS


def cmd_decode(args, manifest: RunManifest) -> int:
    outputs = [load_tensor(path) for path in args.outputs]
    params = DecodeParams(
        window=args.window,
        threshold=args.threshold,
        max_per_joint=args.max_per_joint,
        tag_threshold=args.tag_threshold,
        refine=args.refine,
    )
    kps = decode(outputs, params, args.joints)
    manifest.write_json('predictions.json', keypoint_set_to_coco(kps, args.image_id, args.scale))
    print(f'{len(kps)} person(s)')
    return ErrorCode.SUCCESS


def _falloff(table: str, num_joints: int) -> tuple[float, ...]:
    if table == 'uniform':
        return uniform_k(num_joints)
    if table == 'auto':
        table = {17: 'coco', 14: 'crowdpose'}.get(num_joints, 'uniform')
        return _falloff(table, num_joints)
    k = oks_table(table)
    if len(k) != num_joints:
        raise ToolkitError(f'{table}: table has {len(k)} joints, expected {num_joints}', code=ErrorCode.INVALID_INPUT)
    return k


def cmd_eval(args, manifest: RunManifest) -> int:
    images = load_dataset(args.gt, args.pred, args.joints)
    result = evaluate_dataset(images, _falloff(args.oks_table, args.joints))
    manifest.write_json('eval.json', result.summary())
    manifest.write_text('pr.csv', _csv(
        ('threshold', 'recall', 'precision'),
        [(f'{t:.2f}', f'{r:.2f}', f'{p:.6f}') for t, r, p in result.pr_table],
    ))
    print(f'AP {result.ap:.4f}')
    print(f'AP50 {result.ap50:.4f}')
    print(f'AP75 {result.ap75:.4f}')
    return ErrorCode.SUCCESS


def cmd_synth(args, manifest: RunManifest) -> int:
    params = SynthParams(
        persons=args.persons,
        joints=args.joints,
        heatmap_size=args.heatmap_size,
        sigma=args.sigma,
        tag_spacing=args.tag_spacing,
        margin=args.margin,
        window=args.window,
    )
    scene = make_scene(args.seed, params)
    manifest.write_json('gt.json', scene.to_coco(args.image_id))
    save_tensor(manifest.output_path('output.tensor'), scene.outputs()[0])
    print(f'{params.persons} person(s), {params.joints} joints, {params.heatmap_size}px')
    return ErrorCode.SUCCESS


def cmd_report(args, manifest: RunManifest) -> int:
    rows = []
    summaries = []
    for name in preset_names():
        report = model_cost(preset(name), args.resolution)
        rows.append((report.name, report.resolution, report.total_params, report.total_macs, report.gmacs))
        summaries.append(report.to_summary())
    text = _csv(('name', 'resolution', 'params', 'macs', 'gmacs'), rows)
    manifest.write_text('report.csv', text)
    manifest.write_json('report.json', summaries)
    sys.stdout.write(text)
    return ErrorCode.SUCCESS


def _common() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--out', help='run directory (default: run-<timestamp> in the working directory)')
    common.add_argument('--seed', type=int, default=0)
    common.add_argument('-v', '--verbose', action='count', default=0)
    return common


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = argparse.ArgumentParser(prog='litepose', description=__doc__.strip().splitlines()[0])
    parser.add_argument('--version', action='version', version=f'%(prog)s {__version__}')
    sub = parser.add_subparsers(dest='command', required=True)

    p = sub.add_parser('cost', parents=[common], help='per-layer parameters and MACs of a model')
    p.add_argument('model', help='preset name or architecture JSON file')
    p.add_argument('resolution', type=int, nargs='?')
    p.add_argument('--kernel', type=int, help='replace every depthwise kernel')
    p.add_argument('--no-fusion', action='store_true', help='drop the deconv head fusion')
    p.set_defaults(func=cmd_cost)

    p = sub.add_parser('shrink', parents=[common], help='cost of a gradual shrinking sequence')
    p.add_argument('--sequence', help='JSON list of {name, config, channels}; default is the recorded sequence')
    p.add_argument('--resolution', type=int, default=512)
    p.set_defaults(func=cmd_shrink)

    evolution = EvolutionParams()
    p = sub.add_parser('search', parents=[common], help='evolutionary sub-network search')
    p.add_argument('--space', required=True, help='search space JSON file or shipped space name')
    p.add_argument('--max-gmacs', type=float)
    p.add_argument('--generations', type=int, default=evolution.generations)
    p.add_argument('--population', type=int, default=evolution.population)
    p.add_argument('--tournament', type=int, default=evolution.tournament)
    p.add_argument('--offspring', type=int, default=evolution.offspring)
    p.add_argument('--p-mut', type=float, default=evolution.p_mut)
    p.add_argument('--retry-cap', type=int, default=evolution.retry_cap)
    p.add_argument('--workers', type=int, default=evolution.workers)
    p.add_argument('--evaluator', choices=('neg-macs', 'heatmap-proxy'), default='neg-macs')
    p.add_argument('--weights', help='weight manifest for the heatmap proxy (default: random weights)')
    p.set_defaults(func=cmd_search)

    p = sub.add_parser('infer', parents=[common], help='forward pass with MAC counting')
    p.add_argument('model')
    p.add_argument('--weights', help='weight manifest (default: random weights from --seed)')
    p.add_argument('--input', help='input tensor file (default: random image from --seed)')
    p.add_argument('--resolution', type=int)
    p.set_defaults(func=cmd_infer)

    defaults = DecodeParams()
    p = sub.add_parser('decode', parents=[common], help='group heatmap peaks into persons')
    p.add_argument('outputs', nargs='+', help='network output tensor files')
    p.add_argument('--joints', type=int)
    p.add_argument('--window', type=int, default=defaults.window)
    p.add_argument('--threshold', type=float, default=defaults.threshold)
    p.add_argument('--max-per-joint', type=int, default=defaults.max_per_joint)
    p.add_argument('--tag-threshold', type=float, default=defaults.tag_threshold)
    p.add_argument('--refine', action='store_true')
    p.add_argument('--image-id', type=int, default=0)
    p.add_argument('--scale', type=float, default=1.0, help='heatmap-to-image pixel factor')
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser('eval', parents=[common], help='OKS average precision')
    p.add_argument('--gt', required=True)
    p.add_argument('--pred', required=True)
    p.add_argument('--joints', type=int, required=True)
    p.add_argument('--oks-table', choices=('auto', 'uniform', *OKS_TABLES), default='auto')
    p.set_defaults(func=cmd_eval)

    synth = SynthParams()
    p = sub.add_parser('synth', parents=[common], help='synthetic scene with planted persons')
    p.add_argument('--persons', type=int, default=synth.persons)
    p.add_argument('--joints', type=int, default=synth.joints)
    p.add_argument('--heatmap-size', type=int, default=synth.heatmap_size)
    p.add_argument('--sigma', type=float, default=synth.sigma)
    p.add_argument('--tag-spacing', type=float, default=synth.tag_spacing)
    p.add_argument('--margin', type=int, default=synth.margin)
    p.add_argument('--window', type=int, default=synth.window)
    p.add_argument('--image-id', type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser('report', parents=[common], help='cost table of every preset')
    p.add_argument('--resolution', type=int)
    p.set_defaults(func=cmd_report)

    return parser


def _config_paths(args) -> list[str]:
    paths = []
    for name in ('model', 'space', 'sequence', 'weights', 'input', 'gt', 'pred'):
        value = getattr(args, name, None)
        if value and os.path.exists(value):
            paths.append(value)
    paths.extend(getattr(args, 'outputs', None) or [])
    return paths


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    level = (logging.WARNING, logging.INFO, logging.DEBUG)[min(args.verbose, 2)]
    logging.basicConfig(level=level, stream=sys.stderr, format='%(levelname)s %(name)s: %(message)s')

    now = datetime.datetime.now()
    out_dir = args.out or f'run-{now:%Y%m%d-%H%M%S}'
    manifest = RunManifest(args.command, out_dir, args.seed, _config_paths(args), created=now.isoformat())

    try:
        manifest.write()
        return int(args.func(args, manifest))
    except ArchValidationError as exc:
        print(f'error: {exc.name}: invalid architecture', file=sys.stderr)
        for violation in exc.violations:
            print(f'  {violation}', file=sys.stderr)
        return int(exc.code)
    except ToolkitError as exc:
        print(f'error: {exc}', file=sys.stderr)
        return int(exc.code)
    except (OSError, ValueError) as exc:
        print(f'error: {exc}', file=sys.stderr)
        return int(ErrorCode.INVALID_INPUT)
    except Exception:
        logger.exception('%s failed', args.command)
        return int(ErrorCode.RUNTIME_ERROR)


if __name__ == '__main__':
    sys.exit(main())
