"""Deterministic synthetic HOI scenes.

Each scene plants humans, objects and interactions, derives the image-level
label set, simulates a noisy detector and writes a feature grid that stands
in for a backbone feature map. Randomness comes from numpy's counter-based
Philox generator keyed by ``SeedSequence([seed, tag, scene_id])``, which is
bit-stable across platforms.
"""

import json
import logging
from collections import Counter
from concurrent import futures
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .config import GeneratorConfig, VocabConfig, section_from_dict
from .errors import DatasetError

logger = logging.getLogger(__name__)

HUMAN = 0
GEOMETRY_CHANNELS = 4
_EMBED_TAG = 0x454D42
_SCENE_TAG = 0x53434E
_MIN_SIDE = 1e-3


@dataclass(frozen=True)
class Box:
    """Normalized ``(cx, cy, w, h)`` box."""

    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        if not (0.0 <= self.cx <= 1.0 and 0.0 <= self.cy <= 1.0):
            raise ValueError(f'box center out of range: {self}')
        if not (0.0 < self.w <= 1.0 and 0.0 < self.h <= 1.0):
            raise ValueError(f'box size out of range: {self}')

    @classmethod
    def clipped(cls, cx, cy, w, h):
        """Build a box after clipping every field into its valid range."""
        return cls(
            float(min(max(cx, 0.0), 1.0)),
            float(min(max(cy, 0.0), 1.0)),
            float(min(max(w, _MIN_SIDE), 1.0)),
            float(min(max(h, _MIN_SIDE), 1.0)),
        )

    @classmethod
    def from_corners(cls, x1, y1, x2, y2):
        return cls((x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1)

    def corners(self):
        """Corner form ``(x1, y1, x2, y2)`` clipped to the unit square."""
        return (
            max(self.cx - self.w / 2, 0.0),
            max(self.cy - self.h / 2, 0.0),
            min(self.cx + self.w / 2, 1.0),
            min(self.cy + self.h / 2, 1.0),
        )

    def area(self):
        x1, y1, x2, y2 = self.corners()
        return max(x2 - x1, 0.0) * max(y2 - y1, 0.0)

    def as_list(self):
        return [self.cx, self.cy, self.w, self.h]


@dataclass(frozen=True)
class Instance:
    category: int
    box: Box


@dataclass(frozen=True)
class Interaction:
    human: int
    object: int
    verb: int
    noun: int


@dataclass(frozen=True)
class Detection:
    category: int
    box: Box
    score: float


@dataclass(eq=False)
class Scene:
    """Planted ground truth, weak labels, detector output and features."""

    scene_id: int
    instances: list[Instance]
    interactions: list[Interaction]
    labels: list[tuple[int, int]]
    detections: list[Detection]
    grid: np.ndarray = field(repr=False)

    def __eq__(self, other):
        if not isinstance(other, Scene):
            return NotImplemented
        return (
            self.scene_id == other.scene_id
            and self.instances == other.instances
            and self.interactions == other.interactions
            and self.labels == other.labels
            and self.detections == other.detections
            and self.grid.dtype == other.grid.dtype
            and np.array_equal(self.grid, other.grid)
        )

    def label_set(self):
        return set(self.labels)


@dataclass
class Vocabulary:
    """Class vocabulary and the rare split written next to a dataset."""

    config: VocabConfig
    seed: int
    generator: GeneratorConfig
    rare: set[tuple[int, int]] = field(default_factory=set)
    nonrare: set[tuple[int, int]] = field(default_factory=set)

    @property
    def num_verbs(self):
        return self.config.num_verbs

    @property
    def num_nouns(self):
        return self.config.num_nouns

    def to_dict(self):
        return {
            'num_verbs': self.config.num_verbs,
            'num_nouns': self.config.num_nouns,
            'rare_threshold': self.config.rare_threshold,
            'verbs': [verb_name(v) for v in range(self.config.num_verbs)],
            'nouns': [noun_name(n) for n in range(self.config.num_nouns)],
            'seed': self.seed,
            'generator': asdict(self.generator),
            'rare': [list(c) for c in sorted(self.rare)],
            'nonrare': [list(c) for c in sorted(self.nonrare)],
        }

    @classmethod
    def from_dict(cls, data):
        try:
            config = VocabConfig(
                num_verbs=int(data['num_verbs']),
                num_nouns=int(data['num_nouns']),
                rare_threshold=int(data['rare_threshold']),
            )
            return cls(
                config=config,
                seed=int(data['seed']),
                generator=section_from_dict(GeneratorConfig, data.get('generator', {})),
                rare={tuple(c) for c in data.get('rare', [])},
                nonrare={tuple(c) for c in data.get('nonrare', [])},
            )
        except (KeyError, TypeError, ValueError) as e:
            raise DatasetError(f'malformed vocabulary: {e}') from e


def verb_name(verb):
    return f'verb{verb}'


def noun_name(noun):
    return 'person' if noun == HUMAN else f'noun{noun}'


def class_key(verb, noun):
    """Report key of an interaction class."""
    return f'{verb}:{noun}'


def _generator(seed, *key):
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, *key])))


def scene_rng(seed, scene_id):
    """Generator for one scene, keyed by the global seed and scene id."""
    return _generator(seed, _SCENE_TAG, scene_id)


def _unit_rows(rng, count, dim):
    rows = rng.standard_normal((count, dim))
    rows /= np.linalg.norm(rows, axis=1, keepdims=True)
    return rows.astype(np.float32)


def embeddings(seed, vocab, d_in):
    """Fixed per-category and per-verb unit vectors for the feature grid."""
    rng = _generator(seed, _EMBED_TAG)
    dim = d_in - GEOMETRY_CHANNELS
    return _unit_rows(rng, vocab.num_nouns, dim), _unit_rows(rng, vocab.num_verbs, dim)


def _random_box(rng, config):
    w, h = rng.uniform(config.min_box, config.max_box, size=2)
    cx = rng.uniform(w / 2, 1 - w / 2)
    cy = rng.uniform(h / 2, 1 - h / 2)
    return Box.clipped(cx, cy, w, h)


def _truncated_normal(rng, size, limit=2.0):
    z = rng.standard_normal(size)
    outside = np.abs(z) > limit
    while outside.any():
        z[outside] = rng.standard_normal(int(outside.sum()))
        outside = np.abs(z) > limit
    return z


def _jitter(rng, box, sigma):
    z = _truncated_normal(rng, 4) * sigma
    return Box.clipped(box.cx + z[0], box.cy + z[1], box.w + z[2], box.h + z[3])


def _cell(grid, cx, cy):
    h, w = grid.shape[:2]
    row = min(int(cy * h), h - 1)
    col = min(int(cx * w), w - 1)
    return row, col


def _render_grid(rng, config, instances, interactions, category_emb, verb_emb):
    grid = np.zeros((config.grid_h, config.grid_w, config.d_in), dtype=np.float32)
    content = config.d_in - GEOMETRY_CHANNELS
    for inst in instances:
        b = inst.box
        row, col = _cell(grid, b.cx, b.cy)
        grid[row, col, :content] += category_emb[inst.category]
        grid[row, col, content:] += np.asarray(b.as_list(), dtype=np.float32)
    for inter in interactions:
        hb = instances[inter.human].box
        ob = instances[inter.object].box
        row, col = _cell(grid, (hb.cx + ob.cx) / 2, (hb.cy + ob.cy) / 2)
        grid[row, col, :content] += verb_emb[inter.verb]
    if config.grid_noise > 0:
        grid += rng.normal(0.0, config.grid_noise, size=grid.shape).astype(np.float32)
    return grid


def generate_scene(seed, config, vocab, scene_id=0, tables=None):
    """Generate one scene deterministically from ``(seed, scene_id)``.

    Args:
        seed: Global dataset seed.
        config: A validated :class:`GeneratorConfig`.
        vocab: A :class:`VocabConfig`.
        scene_id: Scene identifier; also keys the random stream.
        tables: Optional precomputed ``embeddings(seed, vocab, d_in)``.

    Returns:
        Scene: The generated scene.
    """
    config.validate()
    vocab.validate()
    category_emb, verb_emb = tables or embeddings(seed, vocab, config.d_in)
    rng = scene_rng(seed, scene_id)

    n_humans = int(rng.integers(config.min_humans, config.max_humans + 1))
    n_objects = int(rng.integers(config.min_objects, config.max_objects + 1))
    instances = [Instance(HUMAN, _random_box(rng, config)) for _ in range(n_humans)]
    for _ in range(n_objects):
        category = int(rng.integers(1, vocab.num_nouns))
        instances.append(Instance(category, _random_box(rng, config)))

    candidates = [
        (h, o, v)
        for h in range(n_humans)
        for o in range(n_humans, n_humans + n_objects)
        for v in range(vocab.num_verbs)
    ]
    wanted = int(rng.integers(config.min_interactions, config.max_interactions + 1))
    size = min(wanted, len(candidates))
    picked = sorted(rng.choice(len(candidates), size=size, replace=False))
    interactions = [
        Interaction(h, o, v, instances[o].category)
        for h, o, v in (candidates[int(i)] for i in picked)
    ]
    labels = sorted({(i.verb, i.noun) for i in interactions})

    detections = []
    for inst in instances:
        score = float(rng.uniform(0.5, 1.0))
        box = _jitter(rng, inst.box, config.jitter_sigma)
        detections.append(Detection(inst.category, box, score))
    for _ in instances:
        if rng.random() < config.fp_rate:
            category = int(rng.integers(0, vocab.num_nouns))
            score = float(rng.uniform(0.05, 0.5))
            detections.append(Detection(category, _random_box(rng, config), score))

    grid = _render_grid(rng, config, instances, interactions, category_emb, verb_emb)
    return Scene(scene_id, instances, interactions, labels, detections, grid)


def generate_dataset(seed, count, config, vocab, start_id=0, workers=1):
    """Generate ``count`` scenes with consecutive ids, in id order."""
    config.validate()
    vocab.validate()
    tables = embeddings(seed, vocab, config.d_in)
    ids = range(start_id, start_id + count)
    if workers <= 1:
        return [generate_scene(seed, config, vocab, i, tables) for i in ids]
    def one(scene_id):
        return generate_scene(seed, config, vocab, scene_id, tables)

    with futures.ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(one, ids))


def split_rare(dataset, vocab):
    """Partition the classes seen in ``dataset`` into rare and non-rare.

    A class is rare when its planted-interaction count is at most
    ``vocab.rare_threshold``; classes never seen belong to neither set.
    """
    if not dataset:
        raise DatasetError('cannot split an empty dataset')
    counts = Counter(
        (i.verb, i.noun) for scene in dataset for i in scene.interactions
    )
    rare = {c for c, n in counts.items() if n <= vocab.rare_threshold}
    nonrare = set(counts) - rare
    return rare, nonrare


def scene_to_record(scene):
    h, w, d = scene.grid.shape
    return {
        'scene_id': scene.scene_id,
        'instances': [
            {'category': i.category, 'box': i.box.as_list()} for i in scene.instances
        ],
        'interactions': [
            {'human': i.human, 'object': i.object, 'verb': i.verb, 'noun': i.noun}
            for i in scene.interactions
        ],
        'labels': [list(label) for label in scene.labels],
        'detections': [
            {'category': d.category, 'box': d.box.as_list(), 'score': d.score}
            for d in scene.detections
        ],
        'grid': {'h': h, 'w': w, 'd': d, 'data': scene.grid.reshape(-1).tolist()},
    }


def scene_from_record(record):
    grid = record['grid']
    data = np.asarray(grid['data'], dtype=np.float32)
    return Scene(
        scene_id=int(record['scene_id']),
        instances=[
            Instance(int(i['category']), Box(*i['box'])) for i in record['instances']
        ],
        interactions=[
            Interaction(
                int(i['human']), int(i['object']), int(i['verb']), int(i['noun'])
            )
            for i in record['interactions']
        ],
        labels=[(int(v), int(n)) for v, n in record['labels']],
        detections=[
            Detection(int(d['category']), Box(*d['box']), float(d['score']))
            for d in record['detections']
        ],
        grid=data.reshape(int(grid['h']), int(grid['w']), int(grid['d'])),
    )


def write_dataset(scenes, path):
    """Write one JSON object per scene per line."""
    with open(path, 'w', encoding='utf-8') as f:
        for scene in scenes:
            f.write(json.dumps(scene_to_record(scene), separators=(',', ':')))
            f.write('\n')


def read_dataset(path):
    """Read a dataset written by :func:`write_dataset`.

    Raises:
        DatasetError: On the first malformed line, naming its 1-based number.
    """
    scenes = []
    with open(path, encoding='utf-8') as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                scenes.append(scene_from_record(json.loads(line)))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
                raise DatasetError(
                    f'{path}: line {lineno}: malformed scene record ({e})'
                ) from e
    return scenes


def write_vocab(vocab, path):
    text = json.dumps(vocab.to_dict(), indent=2, sort_keys=True)
    Path(path).write_text(text + '\n', encoding='utf-8')


def read_vocab(path):
    try:
        data = json.loads(Path(path).read_text(encoding='utf-8'))
    except json.JSONDecodeError as e:
        raise DatasetError(f'{path}: {e}') from e
    return Vocabulary.from_dict(data)
