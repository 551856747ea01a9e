"""Command-line entry point: ``gen-data``, ``train``, ``eval`` and ``inspect``.

Exit codes: 0 success, 2 usage or configuration, 3 IO, 4 numerical failure.
"""

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import model as net
from .align import align
from .config import RunConfig, parse_overrides, worker_count
from .errors import AlignFormerError, ConfigError
from .evaluation import (
    emit_detections,
    evaluate,
    evaluate_detections,
    oracle_detections,
    write_report,
)
from .ndtensor import Tensor, no_grad
from .scenegen import (
    Vocabulary,
    class_key,
    generate_dataset,
    read_dataset,
    read_vocab,
    split_rare,
    write_dataset,
    write_vocab,
)
from .targets import build_targets
from .trainer import stream, train

logger = logging.getLogger(__name__)

LOG_FORMAT = '%(asctime)s %(levelname)s %(name)s: %(message)s'
SPLITS = ('train', 'val', 'test')
_INSPECT_NOISE_TAG = 0x494E53
MATRIX_KEYS = ('gp', 'vp', 'scores', 'noise', 'soft', 'alignment')


def _common(parser):
    parser.add_argument('--config', help='JSON file with one object per config section')
    parser.add_argument(
        '--set',
        action='append',
        default=[],
        metavar='KEY=VALUE',
        help='override one config field, e.g. train.lr=0.0005 (repeatable)',
    )
    parser.add_argument('--seed', type=int, help='global seed (default 7)')
    parser.add_argument(
        '--log-level',
        default='INFO',
        choices=['DEBUG', 'INFO', 'WARNING', 'ERROR'],
        help='diagnostic verbosity on stderr',
    )


def build_parser():
    """Argument parser with one subparser per command."""
    parser = argparse.ArgumentParser(
        prog='alignformer',
        description='Weakly-supervised HOI detection on synthetic scenes.',
    )
    parser.add_argument(
        '--version', action='version', version=f'%(prog)s {__version__}'
    )
    sub = parser.add_subparsers(dest='command', required=True)

    p = sub.add_parser('gen-data', help='generate train/val/test scene files')
    _common(p)
    p.add_argument('--out', required=True, help='output directory')
    p.add_argument('--scenes', type=int, default=500, help='training scenes')
    p.add_argument(
        '--val-scenes', type=int, help='validation scenes (default scenes/5)'
    )
    p.add_argument('--test-scenes', type=int, help='test scenes (default scenes/5)')

    p = sub.add_parser('train', help='train a model in weak or strong mode')
    _common(p)
    p.add_argument('--data', required=True, help='directory written by gen-data')
    p.add_argument('--out', required=True, help='run directory')
    p.add_argument('--mode', choices=['weak', 'strong'], help='supervision mode')
    p.add_argument('--epochs', type=int, help='number of epochs')
    p.add_argument('--lr', type=float, help='learning rate')
    p.add_argument(
        '--val-split', choices=SPLITS, help='split evaluated during training'
    )

    p = sub.add_parser('eval', help='evaluate a checkpoint or the ground-truth oracle')
    _common(p)
    p.add_argument('--data', required=True, help='directory written by gen-data')
    p.add_argument('--split', choices=SPLITS, default='test')
    p.add_argument('--checkpoint', help='checkpoint directory')
    p.add_argument('--out', required=True, help='report directory')
    p.add_argument('--top-k', type=int, help='detections kept per scene')
    p.add_argument(
        '--oracle', action='store_true', help='score ground truth as detections'
    )

    p = sub.add_parser(
        'inspect', help='dump attention, alignment and targets for one scene'
    )
    _common(p)
    p.add_argument('--data', required=True, help='directory written by gen-data')
    p.add_argument('--split', choices=SPLITS, default='test')
    p.add_argument('--checkpoint', required=True, help='checkpoint directory')
    p.add_argument('--scene', type=int, default=0, help='scene index within the split')
    p.add_argument('--out', required=True, help='JSON bundle path')
    p.add_argument(
        '--with-noise', action='store_true', help='add seeded alignment noise'
    )
    return parser


def resolve_config(args):
    """Defaults, then ``--config``, then ``--set``, then dedicated flags."""
    cfg = RunConfig(command=args.command)
    if args.config:
        cfg.load_file(args.config)
    cfg.apply_overrides(parse_overrides(args.set))
    if args.seed is not None:
        cfg.seed = args.seed
    if getattr(args, 'mode', None):
        cfg.mode = args.mode
    if getattr(args, 'epochs', None) is not None:
        cfg.train.epochs = args.epochs
    if getattr(args, 'lr', None) is not None:
        cfg.train.lr = args.lr
    if getattr(args, 'top_k', None) is not None:
        cfg.eval.top_k = args.top_k
    for name in ('data', 'out', 'checkpoint'):
        value = getattr(args, name, None)
        if value:
            cfg.paths[name] = str(value)
    return cfg.validate()


def _split_path(data, split):
    return Path(data) / f'{split}.jsonl'


def run_gen_data(args, cfg):
    """Write ``train.jsonl``, ``val.jsonl``, ``test.jsonl`` and ``vocab.json``."""
    if args.scenes <= 0:
        raise ConfigError('empty dataset: --scenes must be positive')
    counts = {
        'train': args.scenes,
        'val': args.val_scenes if args.val_scenes is not None else args.scenes // 5,
        'test': args.test_scenes if args.test_scenes is not None else args.scenes // 5,
    }
    if counts['val'] < 0 or counts['test'] < 0:
        raise ConfigError('split sizes must be >= 0')
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    workers = worker_count()
    logger.info('generating %d scenes with %d workers', sum(counts.values()), workers)

    splits = {}
    start = 0
    for split in SPLITS:
        splits[split] = generate_dataset(
            cfg.seed,
            counts[split],
            cfg.generator,
            cfg.vocab,
            start_id=start,
            workers=workers,
        )
        start += counts[split]
        write_dataset(splits[split], _split_path(out, split))
    rare, nonrare = split_rare(splits['train'], cfg.vocab)
    vocab = Vocabulary(cfg.vocab, cfg.seed, cfg.generator, rare, nonrare)
    write_vocab(vocab, out / 'vocab.json')

    for split in SPLITS:
        interactions = sum(len(s.interactions) for s in splits[split])
        print(f'{split}: {counts[split]} scenes, {interactions} interactions')
    print('rare: ' + ' '.join(class_key(*c) for c in sorted(rare)))
    print('nonrare: ' + ' '.join(class_key(*c) for c in sorted(nonrare)))
    return 0


def run_train(args, cfg):
    """Train and write ``metrics.csv`` plus ``final/`` and ``best/`` checkpoints."""
    vocab = read_vocab(Path(args.data) / 'vocab.json')
    dataset = read_dataset(_split_path(args.data, 'train'))
    val_set = None
    if args.val_split:
        val_set = read_dataset(_split_path(args.data, args.val_split))
    result = train(dataset, vocab, cfg, args.out, val_set=val_set)
    if result.rows:
        print(f'final total {result.rows[-1]["total"]!r}')
    print(f'metrics: {result.metrics_path}')
    print(f'final checkpoint: {result.final_checkpoint}')
    print(f'best checkpoint: {result.best_checkpoint} (epoch {result.best_epoch})')
    return 0


def run_eval(args, cfg):
    """Write ``report.json`` and ``summary.csv`` and print the mAP lines."""
    vocab = read_vocab(Path(args.data) / 'vocab.json')
    dataset = read_dataset(_split_path(args.data, args.split))
    workers = worker_count()
    if args.oracle:
        report = evaluate_detections(
            oracle_detections(dataset),
            dataset,
            vocab.rare,
            vocab.nonrare,
            cfg.eval,
            workers,
        )
    elif args.checkpoint:
        report = evaluate(args.checkpoint, dataset, vocab, cfg.eval, workers)
    else:
        raise ConfigError('eval needs --checkpoint or --oracle')
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_report(report, out / 'report.json', out / 'summary.csv', cfg.to_dict())
    print(f'map_full {report.map_full!r}')
    print(f'map_rare {report.map_rare!r}')
    print(f'map_nonrare {report.map_nonrare!r}')
    return 0


def _matrix(value):
    if value is None:
        return []
    if isinstance(value, Tensor):
        value = value.data
    return np.asarray(value, dtype=np.float64).tolist()


def inspect_scene(scene, params, model_cfg, vocab, cfg, rng=None):
    """Everything the model and alignment layer see for one scene."""
    with no_grad():
        pred, attention = net.forward(scene.grid, params, model_cfg)
        targets = build_targets(
            scene.detections,
            scene.labels,
            vocab,
            cap=cfg.train.target_cap,
            merge_verbs=cfg.train.merge_verbs,
        )
        matrices = {key: [] for key in MATRIX_KEYS}
        if targets.size:
            result = align(pred, targets, cfg.align, rng)
            matrices = {
                'gp': _matrix(result.gp),
                'vp': _matrix(result.vp),
                'scores': _matrix(result.scores),
                'noise': _matrix(result.noise),
                'soft': _matrix(result.alignment.soft),
                'alignment': result.alignment.hard.astype(int).tolist(),
            }
    detections = emit_detections(scene.scene_id, pred.arrays(), cfg.eval)
    h, w = scene.grid.shape[:2]
    return {
        'scene_id': scene.scene_id,
        'grid': {'h': h, 'w': w},
        'labels': [class_key(*label) for label in scene.labels],
        'predictions': {k: _matrix(v) for k, v in pred.arrays().items()},
        'cross_attention': _matrix(attention),
        'targets': targets.to_dict(),
        **matrices,
        'detections': [
            {
                'human': d.human.as_list(),
                'object': d.object.as_list(),
                'verb': d.verb,
                'noun': d.noun,
                'score': d.score,
                'index': d.index,
            }
            for d in detections
        ],
    }


def run_inspect(args, cfg):
    """Dump one scene's attention maps, alignment matrices, targets and detections."""
    vocab = read_vocab(Path(args.data) / 'vocab.json')
    dataset = read_dataset(_split_path(args.data, args.split))
    if not 0 <= args.scene < len(dataset):
        raise ConfigError(
            f'scene index {args.scene} out of range for {args.split} '
            f'({len(dataset)} scenes)'
        )
    params, model_cfg, _ = net.load_model(args.checkpoint)
    scene = dataset[args.scene]
    rng = None
    if args.with_noise:
        rng = stream(cfg.seed, _INSPECT_NOISE_TAG, scene.scene_id)
    bundle = inspect_scene(scene, params, model_cfg, vocab, cfg, rng)
    bundle['config'] = cfg.to_dict()
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    text = json.dumps(bundle, indent=2, sort_keys=True)
    out.write_text(text + '\n', encoding='utf-8')
    print(f'inspect: {out}')
    return 0


COMMANDS = {
    'gen-data': run_gen_data,
    'train': run_train,
    'eval': run_eval,
    'inspect': run_inspect,
}


def main(argv=None):
    """Run one command and return its exit code."""
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level, format=LOG_FORMAT, stream=sys.stderr)
    logging.getLogger('alignformer').setLevel(args.log_level)
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](args, cfg)
    except AlignFormerError as e:
        logger.error('%s', e)
        print(f'error: {e}', file=sys.stderr)
        return e.exit_code
    except OSError as e:
        logger.error('%s', e)
        print(f'error: {e}', file=sys.stderr)
        return 3


if __name__ == '__main__':
    sys.exit(main())
