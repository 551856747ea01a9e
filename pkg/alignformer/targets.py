"""Candidate target sets built from detections and image-level labels."""

import logging
from dataclasses import dataclass, field

import numpy as np

from .scenegen import HUMAN, noun_name, verb_name

logger = logging.getLogger(__name__)

DEFAULT_CAP = 64


@dataclass
class TargetSet:
    """``T`` candidate HOI targets with their provenance.

    Attributes:
        human: ``T x 4`` human boxes.
        object: ``T x 4`` object boxes.
        verb: ``T x V`` multi-hot verb rows.
        noun: ``T x N`` one-hot noun rows.
        provenance: Per row ``(human index, object index, label indices)``;
            indices refer to detections (weak) or instances (strong).
        warnings: Labels that could not be localized.
    """

    human: np.ndarray
    object: np.ndarray
    verb: np.ndarray
    noun: np.ndarray
    provenance: list[tuple[int, int, tuple[int, ...]]] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)

    @property
    def size(self):
        return self.human.shape[0]

    def __len__(self):
        return self.size

    def to_dict(self):
        return {
            'human': self.human.tolist(),
            'object': self.object.tolist(),
            'verb': self.verb.tolist(),
            'noun': self.noun.tolist(),
            'provenance': [
                {'human': h, 'object': o, 'labels': list(labels)}
                for h, o, labels in self.provenance
            ],
            'warnings': list(self.warnings),
        }


def _assemble(rows, vocab, warnings):
    t = len(rows)
    human = np.zeros((t, 4), dtype=np.float32)
    obj = np.zeros((t, 4), dtype=np.float32)
    verb = np.zeros((t, vocab.num_verbs), dtype=np.float32)
    noun = np.zeros((t, vocab.num_nouns), dtype=np.float32)
    provenance = []
    for r, row in enumerate(rows):
        human[r] = row['human_box'].as_list()
        obj[r] = row['object_box'].as_list()
        verb[r, sorted(row['verbs'])] = 1
        noun[r, row['noun']] = 1
        provenance.append((row['human'], row['object'], tuple(row['labels'])))
    return TargetSet(human, obj, verb, noun, provenance, warnings)


def build_targets(detections, labels, vocab, cap=DEFAULT_CAP, merge_verbs=True):
    """Pair every human detection with every detection of each labeled noun.

    Labels sharing a ``(human, object, noun)`` triple are merged into one
    multi-hot verb row unless ``merge_verbs`` is off. Rows are ranked by the
    product of the two detection scores, ties broken by human index, object
    index and first label index, and truncated to ``cap``.

    Args:
        detections: Detector candidates of one scene.
        labels: Ordered ``(verb, noun)`` image labels.
        vocab: Anything with ``num_verbs`` and ``num_nouns``.
        cap: Maximum number of rows.
        merge_verbs: Merge verbs of the same human-object-noun triple.

    Returns:
        TargetSet: Rows in rank order; unlocalizable labels in ``warnings``.
    """
    humans = [i for i, d in enumerate(detections) if d.category == HUMAN]
    rows = {}
    warnings = []
    for li, (verb, noun) in enumerate(labels):
        objects = [j for j, d in enumerate(detections) if d.category == noun]
        if not objects or not humans:
            missing = noun_name(noun) if not objects else noun_name(HUMAN)
            warnings.append(
                f'label {verb_name(verb)}:{noun_name(noun)} skipped: '
                f'no {missing} detection'
            )
            continue
        for h in humans:
            for o in objects:
                if o == h:
                    continue
                key = (h, o, noun) if merge_verbs else (h, o, noun, li)
                row = rows.get(key)
                if row is None:
                    row = rows[key] = {
                        'human': h,
                        'object': o,
                        'noun': noun,
                        'verbs': set(),
                        'labels': [],
                        'human_box': detections[h].box,
                        'object_box': detections[o].box,
                        'score': detections[h].score * detections[o].score,
                    }
                row['verbs'].add(verb)
                row['labels'].append(li)
    ranked = sorted(
        rows.values(),
        key=lambda r: (-r['score'], r['human'], r['object'], r['labels'][0]),
    )
    if len(ranked) > cap:
        logger.debug('truncating %d candidate targets to %d', len(ranked), cap)
    for message in warnings:
        logger.debug(message)
    return _assemble(ranked[:cap], vocab, warnings)


def build_targets_strong(scene, vocab):
    """One target per planted human-object pair, with ground-truth boxes."""
    label_index = {label: i for i, label in enumerate(scene.labels)}
    rows = {}
    for inter in scene.interactions:
        key = (inter.human, inter.object)
        row = rows.get(key)
        if row is None:
            row = rows[key] = {
                'human': inter.human,
                'object': inter.object,
                'noun': inter.noun,
                'verbs': set(),
                'labels': [],
                'human_box': scene.instances[inter.human].box,
                'object_box': scene.instances[inter.object].box,
            }
        row['verbs'].add(inter.verb)
        index = label_index[(inter.verb, inter.noun)]
        if index not in row['labels']:
            row['labels'].append(index)
    return _assemble(list(rows.values()), vocab, [])
