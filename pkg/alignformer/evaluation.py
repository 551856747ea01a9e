"""HOI detection mean average precision.

A detection is a true positive when its human and object boxes both reach
the IoU threshold against one unconsumed ground-truth pair of the same
interaction class. Average precision is the exact area under the
interpolated precision/recall curve.
"""

import csv
import json
import logging
from collections import defaultdict
from concurrent import futures
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import model as net
from .config import EvalConfig
from .errors import CheckpointError, EvaluationError
from .ndtensor import no_grad
from .scenegen import Box, class_key

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ScoredDetection:
    """One ranked HOI hypothesis."""

    scene_id: int
    human: Box
    object: Box
    verb: int
    noun: int
    score: float
    index: int = 0

    def rank_key(self):
        return (-self.score, self.scene_id, self.index)


@dataclass(frozen=True)
class GroundTruth:
    scene_id: int
    human: Box
    object: Box
    verb: int
    noun: int


@dataclass
class EvalReport:
    """Per-class average precision and split means."""

    per_class_ap: dict[str, float]
    per_class_recall: dict[str, float]
    counts: dict[str, dict[str, int]]
    map_full: float
    map_rare: float
    map_nonrare: float
    mean_max_recall: float
    rare: list[str] = field(default_factory=list)
    nonrare: list[str] = field(default_factory=list)

    def to_dict(self):
        return {
            'per_class_ap': dict(sorted(self.per_class_ap.items())),
            'per_class_recall': dict(sorted(self.per_class_recall.items())),
            'counts': dict(sorted(self.counts.items())),
            'map_full': self.map_full,
            'map_rare': self.map_rare,
            'map_nonrare': self.map_nonrare,
            'mean_max_recall': self.mean_max_recall,
            'rare': sorted(self.rare),
            'nonrare': sorted(self.nonrare),
        }


def iou(a, b):
    """Intersection over union of two boxes, on clipped corners."""
    ax1, ay1, ax2, ay2 = a.corners()
    bx1, by1, bx2, by2 = b.corners()
    iw = min(ax2, bx2) - max(ax1, bx1)
    ih = min(ay2, by2) - max(ay1, by1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = a.area() + b.area() - inter
    if union <= 0:
        return 0.0
    return min(inter / union, 1.0)


def pair_overlap(det, gt):
    """Smaller of the human and object IoUs."""
    return min(iou(det.human, gt.human), iou(det.object, gt.object))


def match_pair(det, gt, thresh=0.5):
    """True when both boxes reach ``thresh`` and the class matches."""
    if (det.verb, det.noun) != (gt.verb, gt.noun):
        return False
    return iou(det.human, gt.human) >= thresh and iou(det.object, gt.object) >= thresh


def _check_sorted(dets):
    for prev, cur in zip(dets, dets[1:]):
        if cur.rank_key() < prev.rank_key():
            raise EvaluationError(
                'detections must be sorted by score descending, then scene id and index'
            )


def true_positive_flags(dets, gts, thresh=0.5):
    """Greedy rank-order matching; each ground truth is consumed at most once."""
    _check_sorted(dets)
    by_scene = defaultdict(list)
    for g, gt in enumerate(gts):
        by_scene[gt.scene_id].append(g)
    consumed = [False] * len(gts)
    flags = []
    for det in dets:
        best, best_overlap = None, -1.0
        for g in by_scene.get(det.scene_id, ()):
            if consumed[g] or not match_pair(det, gts[g], thresh):
                continue
            overlap = pair_overlap(det, gts[g])
            if overlap > best_overlap:
                best, best_overlap = g, overlap
        if best is None:
            flags.append(False)
        else:
            consumed[best] = True
            flags.append(True)
    return flags


def all_points_ap(recall, precision):
    """Area under the monotone precision envelope."""
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    for i in range(len(mpre) - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    steps = np.where(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def _curve(dets, gts, thresh):
    flags = np.asarray(true_positive_flags(dets, gts, thresh), dtype=np.float64)
    tp = np.cumsum(flags)
    fp = np.cumsum(1.0 - flags)
    recall = tp / len(gts)
    precision = tp / np.maximum(tp + fp, np.finfo(np.float64).eps)
    return recall, precision


def average_precision(dets, gts, thresh=0.5):
    """Average precision of ranked detections of one class.

    Args:
        dets: Detections sorted by :meth:`ScoredDetection.rank_key`.
        gts: Ground truths of the same class.
        thresh: IoU threshold for both boxes.

    Raises:
        EvaluationError: If ``dets`` is not sorted.
    """
    if not gts:
        _check_sorted(dets)
        return 0.0
    if not dets:
        return 0.0
    recall, precision = _curve(dets, gts, thresh)
    return all_points_ap(recall, precision)


def max_recall(dets, gts, thresh=0.5):
    if not gts or not dets:
        return 0.0
    recall, _ = _curve(dets, gts, thresh)
    return float(recall[-1])


def ground_truths(dataset):
    out = []
    for scene in dataset:
        for inter in scene.interactions:
            out.append(
                GroundTruth(
                    scene.scene_id,
                    scene.instances[inter.human].box,
                    scene.instances[inter.object].box,
                    inter.verb,
                    inter.noun,
                )
            )
    return out


def oracle_detections(dataset):
    """Ground truth replayed as score-1 detections."""
    return [
        ScoredDetection(gt.scene_id, gt.human, gt.object, gt.verb, gt.noun, 1.0, index)
        for index, gt in enumerate(ground_truths(dataset))
    ]


def emit_detections(scene_id, arrays, cfg):
    """Turn one scene's prediction arrays into its top-k scored detections.

    Every ``(query, verb, noun)`` with ``v'[verb] * n'[noun] >= score_floor``
    is emitted; the emission index follows ``(query, verb, noun)`` order.
    """
    verb = arrays['verb'].astype(np.float64)
    noun = arrays['noun'].astype(np.float64)
    scores = verb[:, :, None] * noun[:, None, :]
    p, v, n = scores.shape
    flat = scores.reshape(-1)
    kept = np.nonzero(flat >= cfg.score_floor)[0]
    order = sorted(kept.tolist(), key=lambda k: (-flat[k], k))[: cfg.top_k]
    out = []
    for k in order:
        i, rest = divmod(k, v * n)
        verb_id, noun_id = divmod(rest, n)
        out.append(
            ScoredDetection(
                scene_id,
                Box.clipped(*arrays['human'][i].astype(np.float64)),
                Box.clipped(*arrays['object'][i].astype(np.float64)),
                verb_id,
                noun_id,
                float(flat[k]),
                k,
            )
        )
    return out


def _mean(values):
    return float(np.mean(values)) if values else 0.0


def evaluate_detections(detections, dataset, rare, nonrare, cfg=None, workers=1):
    """Compute an :class:`EvalReport` from externally supplied detections."""
    cfg = cfg or EvalConfig()
    gts_by_class = defaultdict(list)
    for gt in ground_truths(dataset):
        gts_by_class[(gt.verb, gt.noun)].append(gt)
    if not gts_by_class:
        raise EvaluationError('no ground-truth classes')
    dets_by_class = defaultdict(list)
    for det in detections:
        if (det.verb, det.noun) in gts_by_class:
            dets_by_class[(det.verb, det.noun)].append(det)
    classes = sorted(gts_by_class)

    def score(cls):
        dets = sorted(dets_by_class.get(cls, []), key=ScoredDetection.rank_key)
        gts = gts_by_class[cls]
        return (
            average_precision(dets, gts, cfg.iou_threshold),
            max_recall(dets, gts, cfg.iou_threshold),
            len(dets),
        )

    if workers > 1:
        with futures.ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(score, classes))
    else:
        results = [score(cls) for cls in classes]

    per_class_ap, per_class_recall, counts = {}, {}, {}
    rare_aps, nonrare_aps = [], []
    for cls, (ap, recall, n_dets) in zip(classes, results, strict=True):
        key = class_key(*cls)
        per_class_ap[key] = ap
        per_class_recall[key] = recall
        counts[key] = {'ground_truth': len(gts_by_class[cls]), 'detections': n_dets}
        if cls in rare:
            rare_aps.append(ap)
        elif cls in nonrare:
            nonrare_aps.append(ap)
    return EvalReport(
        per_class_ap=per_class_ap,
        per_class_recall=per_class_recall,
        counts=counts,
        map_full=_mean([per_class_ap[class_key(*c)] for c in classes]),
        map_rare=_mean(rare_aps),
        map_nonrare=_mean(nonrare_aps),
        mean_max_recall=_mean([per_class_recall[class_key(*c)] for c in classes]),
        rare=[class_key(*c) for c in classes if c in rare],
        nonrare=[class_key(*c) for c in classes if c in nonrare],
    )


def predict(scene, params, model_cfg):
    """Inference on one scene with noise and dropout disabled."""
    with no_grad():
        pred, attention = net.forward(scene.grid, params, model_cfg)
    return pred.arrays(), attention


def model_detections(params, model_cfg, dataset, cfg, workers=1):
    def run(scene):
        arrays, _ = predict(scene, params, model_cfg)
        return emit_detections(scene.scene_id, arrays, cfg)

    if workers > 1:
        with futures.ThreadPoolExecutor(max_workers=workers) as pool:
            per_scene = list(pool.map(run, dataset))
    else:
        per_scene = [run(scene) for scene in dataset]
    return [det for dets in per_scene for det in dets]


def evaluate_model(params, model_cfg, dataset, vocab, cfg=None, workers=1):
    """Evaluate in-memory parameters on ``dataset``."""
    cfg = cfg or EvalConfig()
    if not dataset:
        raise EvaluationError('no ground-truth classes')
    detections = model_detections(params, model_cfg, dataset, cfg, workers)
    return evaluate_detections(
        detections, dataset, vocab.rare, vocab.nonrare, cfg, workers
    )


def evaluate(checkpoint, dataset, vocab, cfg=None, workers=1):
    """Evaluate a checkpoint directory on ``dataset``.

    Raises:
        CheckpointError: If the checkpoint's vocabulary differs from ``vocab``.
        EvaluationError: If the dataset has no ground truth.
    """
    params, model_cfg, meta = net.load_model(checkpoint)
    if (meta['num_verbs'], meta['num_nouns']) != (vocab.num_verbs, vocab.num_nouns):
        raise CheckpointError(
            f'checkpoint vocabulary V={meta["num_verbs"]}, N={meta["num_nouns"]} '
            f'does not match dataset V={vocab.num_verbs}, N={vocab.num_nouns}'
        )
    return evaluate_model(params, model_cfg, dataset, vocab, cfg, workers)


SUMMARY_FIELDS = (
    'map_full',
    'map_rare',
    'map_nonrare',
    'mean_max_recall',
    'classes',
)


def write_report(report, json_path, csv_path, config=None):
    """Write the full JSON report and a one-line CSV summary."""
    payload = report.to_dict()
    payload['config'] = config or {}
    text = json.dumps(payload, indent=2, sort_keys=True)
    Path(json_path).write_text(text + '\n', encoding='utf-8')
    with open(csv_path, 'w', encoding='utf-8', newline='') as f:
        f.write('# ' + json.dumps(config or {}, sort_keys=True) + '\n')
        writer = csv.writer(f, lineterminator='\n')
        writer.writerow(SUMMARY_FIELDS)
        writer.writerow(
            [
                repr(report.map_full),
                repr(report.map_rare),
                repr(report.map_nonrare),
                repr(report.mean_max_recall),
                len(report.per_class_ap),
            ]
        )


def read_summary(csv_path):
    """Read the summary row written by :func:`write_report`."""
    with open(csv_path, encoding='utf-8', newline='') as f:
        rows = [line for line in f if not line.startswith('#')]
    header, values = list(csv.reader(rows))
    return dict(zip(header, values, strict=True))
