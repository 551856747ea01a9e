"""Training loop for weak (aligned) and strong (matched) supervision.

One optimizer step averages the gradients of ``batch_size`` scenes. Batches
come from a seeded per-epoch permutation and are processed in ascending scene
id, and every random stream is keyed by ``(seed, epoch, scene_id)``, so the
metrics log and checkpoints are a pure function of the inputs.
"""

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import ndtensor as nd
from . import model as net
from .config import RunConfig
from .errors import ConfigError, EvaluationError, NumericalError
from .evaluation import evaluate_model
from .loss import strong_loss, weak_loss
from .optim import build_optimizer, optimizer_step
from .targets import build_targets, build_targets_strong

logger = logging.getLogger(__name__)

METRICS_FIELDS = (
    'epoch',
    'step',
    'l_box',
    'l_human',
    'l_object',
    'l_verb',
    'l_noun',
    'l_sparse',
    'total',
    'aligned_mean',
    'map_full',
    'map_rare',
    'map_nonrare',
)

_PERMUTATION_TAG = 0x504552
_DROPOUT_TAG = 0x44524F
_NOISE_TAG = 0x4E4F49


@dataclass
class TrainResult:
    """What a finished run left behind."""

    params: net.ParameterStore
    rows: list[dict] = field(default_factory=list)
    metrics_path: Path = None
    final_checkpoint: Path = None
    best_checkpoint: Path = None
    best_epoch: int = 0


def stream(seed, tag, *key):
    """Independent Philox generator for one ``(seed, tag, key...)``."""
    sequence = np.random.SeedSequence([seed, tag, *key])
    return np.random.Generator(np.random.Philox(sequence))


def learning_rate(train_cfg, epoch):
    """Step schedule: ``lr`` until ``lr_decay_epoch``, then scaled by the factor."""
    if train_cfg.lr_decay_epoch and epoch > train_cfg.lr_decay_epoch:
        return train_cfg.lr * train_cfg.lr_decay_factor
    return train_cfg.lr


def batches(scenes, batch_size, seed, epoch):
    order = stream(seed, _PERMUTATION_TAG, epoch).permutation(len(scenes))
    for start in range(0, len(order), batch_size):
        chunk = [scenes[int(i)] for i in order[start : start + batch_size]]
        yield sorted(chunk, key=lambda s: s.scene_id)


def scene_loss(scene, params, run_cfg, vocab, epoch, seed):
    """Forward one scene and return its :class:`LossTerms`."""
    model_cfg, train_cfg = run_cfg.model, run_cfg.train
    drop_rng = stream(seed, _DROPOUT_TAG, epoch, scene.scene_id)
    pred, _ = net.forward(scene.grid, params, model_cfg, rng=drop_rng)
    if run_cfg.mode == 'strong':
        return strong_loss(pred, build_targets_strong(scene, vocab), run_cfg.align)
    targets = build_targets(
        scene.detections,
        scene.labels,
        vocab,
        cap=train_cfg.target_cap,
        merge_verbs=train_cfg.merge_verbs,
    )
    noise_rng = stream(seed, _NOISE_TAG, epoch, scene.scene_id)
    return weak_loss(pred, targets, run_cfg.align, train_cfg.lambda_sparse, noise_rng)


def _average(breakdowns):
    out = {}
    for key in METRICS_FIELDS[2:9]:
        out[key] = float(np.mean([getattr(b, key) for b in breakdowns]))
    out['aligned_mean'] = float(np.mean([b.aligned for b in breakdowns]))
    return out


def _format(value):
    if value is None or value == '':
        return ''
    if isinstance(value, float):
        return repr(value)
    return str(value)


class MetricsLog:
    """Append-only CSV metrics log with a config comment line."""

    def __init__(self, path, config):
        self.path = Path(path)
        with open(self.path, 'w', encoding='utf-8', newline='') as f:
            f.write('# ' + json.dumps(config, sort_keys=True) + '\n')
            csv.writer(f, lineterminator='\n').writerow(METRICS_FIELDS)

    def append(self, row):
        with open(self.path, 'a', encoding='utf-8', newline='') as f:
            csv.writer(f, lineterminator='\n').writerow(
                [_format(row.get(name)) for name in METRICS_FIELDS]
            )


def read_metrics(path):
    """Rows of a metrics log as dicts of strings, comment lines skipped."""
    with open(path, encoding='utf-8', newline='') as f:
        lines = [line for line in f if not line.startswith('#')]
    return list(csv.DictReader(lines))


def _evaluate(params, run_cfg, val_set, vocab):
    try:
        report = evaluate_model(params, run_cfg.model, val_set, vocab, run_cfg.eval)
    except EvaluationError as e:
        logger.warning('validation skipped: %s', e)
        return None
    return report


def train(dataset, vocab, run_cfg, out_dir, val_set=None):
    """Train a model on ``dataset`` and write checkpoints plus a metrics log.

    Args:
        dataset: Training scenes.
        vocab: :class:`Vocabulary` of the dataset.
        run_cfg: Resolved :class:`RunConfig`; ``mode`` picks weak or strong.
        out_dir: Directory receiving ``metrics.csv``, ``final/`` and ``best/``.
        val_set: Optional scenes evaluated every ``eval_every`` epochs.

    Returns:
        TrainResult: Logged rows and checkpoint paths.

    Raises:
        ConfigError: If the dataset is empty or a config is invalid.
        NumericalError: If a loss or gradient is non-finite.
    """
    if not isinstance(run_cfg, RunConfig):
        raise ConfigError('train expects a RunConfig')
    run_cfg.validate()
    if not dataset:
        raise ConfigError('empty dataset')
    train_cfg, seed = run_cfg.train, run_cfg.seed
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    d_in = dataset[0].grid.shape[2]
    params = net.init_params(run_cfg.model, vocab, d_in, seed)
    if train_cfg.freeze_queries:
        params.freeze('query.embed')
    optimizer = build_optimizer(train_cfg)
    config = run_cfg.to_dict()
    meta = {'config': config, 'mode': run_cfg.mode, 'seed': seed}
    metrics = MetricsLog(out_dir / 'metrics.csv', config)

    def save(path, epoch):
        extra = {**meta, 'epoch': epoch}
        return net.save_model(path, params, run_cfg.model, vocab, d_in, extra)

    result = TrainResult(params=params, metrics_path=metrics.path)
    best_path = out_dir / 'best'
    best_value = None
    step = 0
    validating = val_set is not None and train_cfg.eval_every > 0
    logger.info(
        'training %s mode on %d scenes for %d epochs (%d parameter tensors)',
        run_cfg.mode,
        len(dataset),
        train_cfg.epochs,
        len(params),
    )

    for epoch in range(1, train_cfg.epochs + 1):
        optimizer.set_lr(learning_rate(train_cfg, epoch))
        breakdowns = []
        for batch in batches(dataset, train_cfg.batch_size, seed, epoch):
            params.zero_grad()
            for scene in batch:
                try:
                    terms = scene_loss(scene, params, run_cfg, vocab, epoch, seed)
                    scaled = nd.scalar_mul(terms.total, 1.0 / len(batch))
                    if scaled.requires_grad:
                        scaled.backward()
                except NumericalError as e:
                    raise NumericalError(
                        f'non-finite values at epoch {epoch}, '
                        f'scene {scene.scene_id}: {e}',
                        epoch=epoch,
                        scene_id=scene.scene_id,
                    ) from e
                breakdown = terms.breakdown()
                if not math.isfinite(breakdown.total):
                    raise NumericalError(
                        f'non-finite loss at epoch {epoch}, scene {scene.scene_id}',
                        epoch=epoch,
                        scene_id=scene.scene_id,
                    )
                breakdowns.append(breakdown)
            optimizer_step(params, optimizer)
            step += 1

        row = {'epoch': epoch, 'step': step, **_average(breakdowns)}
        report = None
        due = validating and (
            epoch % train_cfg.eval_every == 0 or epoch == train_cfg.epochs
        )
        if due:
            report = _evaluate(params, run_cfg, val_set, vocab)
        if report is not None:
            row.update(
                map_full=report.map_full,
                map_rare=report.map_rare,
                map_nonrare=report.map_nonrare,
            )
        metrics.append(row)
        result.rows.append(row)
        logger.info(
            'epoch %d step %d total %.6f aligned %.3f%s',
            epoch,
            step,
            row['total'],
            row['aligned_mean'],
            f' map_full {report.map_full:.4f}' if report is not None else '',
        )

        if validating:
            value = None if report is None else report.map_full
            improved = value is not None and (best_value is None or value > best_value)
        else:
            value = row['total']
            improved = best_value is None or value < best_value
        if improved:
            best_value = value
            result.best_epoch = epoch
            save(best_path, epoch)

    result.final_checkpoint = save(out_dir / 'final', train_cfg.epochs)
    if result.best_epoch == 0:
        save(best_path, train_cfg.epochs)
        result.best_epoch = train_cfg.epochs
    result.best_checkpoint = best_path
    return result
