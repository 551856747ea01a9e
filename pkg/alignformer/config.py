"""Configuration sections and the layered run configuration.

Values resolve as built-in defaults, then a JSON config file, then
``key=value`` overrides, then dedicated command-line flags.
"""

import dataclasses
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .errors import ConfigError

THREADS_ENV = 'ALIGNFORMER_THREADS'

_TRUE = {'1', 'true', 'yes', 'on'}
_FALSE = {'0', 'false', 'no', 'off'}


@dataclass
class GeneratorConfig:
    """Counts and noise levels of the synthetic scene generator."""

    min_humans: int = 1
    max_humans: int = 4
    min_objects: int = 1
    max_objects: int = 5
    min_interactions: int = 0
    max_interactions: int = 3
    jitter_sigma: float = 0.01
    fp_rate: float = 0.1
    grid_h: int = 8
    grid_w: int = 8
    d_in: int = 16
    grid_noise: float = 0.0
    min_box: float = 0.08
    max_box: float = 0.35

    def validate(self):
        """Raise ConfigError when a field is out of range."""
        if not 1 <= self.min_humans <= self.max_humans <= 4:
            raise ConfigError('humans must satisfy 1 <= min <= max <= 4')
        if not 1 <= self.min_objects <= self.max_objects <= 5:
            raise ConfigError('objects must satisfy 1 <= min <= max <= 5')
        if not 0 <= self.min_interactions <= self.max_interactions <= 3:
            raise ConfigError('interactions must satisfy 0 <= min <= max <= 3')
        if self.jitter_sigma < 0:
            raise ConfigError(f'jitter_sigma must be >= 0, got {self.jitter_sigma}')
        if not 0 <= self.fp_rate < 1:
            raise ConfigError(f'fp_rate must be in [0, 1), got {self.fp_rate}')
        if self.grid_h < 1 or self.grid_w < 1:
            raise ConfigError('grid dims must be positive')
        if self.d_in < 6:
            raise ConfigError(f'd_in must be >= 6, got {self.d_in}')
        if self.grid_noise < 0:
            raise ConfigError('grid_noise must be >= 0')
        if not 0 < self.min_box <= self.max_box <= 1:
            raise ConfigError('box sizes must satisfy 0 < min_box <= max_box <= 1')


@dataclass
class VocabConfig:
    """Verb and noun counts; noun 0 is the human category."""

    num_verbs: int = 4
    num_nouns: int = 6
    rare_threshold: int = 10

    def validate(self):
        """Raise ConfigError when a field is out of range."""
        if self.num_verbs < 1:
            raise ConfigError(f'num_verbs must be >= 1, got {self.num_verbs}')
        if self.num_nouns < 2:
            raise ConfigError(f'num_nouns must be >= 2, got {self.num_nouns}')
        if self.rare_threshold < 0:
            raise ConfigError('rare_threshold must be >= 0')


@dataclass
class ModelConfig:
    """Width and depth of the encoder-decoder.

    ``mlp_hidden`` of 0 means ``4 * d_model``.
    """

    d_model: int = 32
    num_queries: int = 8
    enc_layers: int = 2
    dec_layers: int = 2
    heads: int = 2
    mlp_hidden: int = 0
    dropout: float = 0.1

    @property
    def hidden(self):
        """Resolved MLP hidden width."""
        return self.mlp_hidden or 4 * self.d_model

    def validate(self):
        """Raise ConfigError when a field is out of range."""
        if self.d_model < 4 or self.d_model % 4:
            raise ConfigError(
                f'd_model must be a positive multiple of 4, got {self.d_model}'
            )
        if self.heads < 1 or self.d_model % self.heads:
            raise ConfigError(f'heads={self.heads} must divide d_model={self.d_model}')
        if self.num_queries < 1:
            raise ConfigError('num_queries must be >= 1')
        if self.enc_layers < 1 or self.dec_layers < 1:
            raise ConfigError('layer counts must be >= 1')
        if self.mlp_hidden < 0:
            raise ConfigError('mlp_hidden must be >= 0')
        if not 0 <= self.dropout < 1:
            raise ConfigError(f'dropout must be in [0, 1), got {self.dropout}')


@dataclass
class AlignConfig:
    """Prior weights, threshold and noise of the alignment layer."""

    alpha_g: float = 0.5
    alpha_v: float = 0.5
    tau: float = 1.0
    delta: float = 0.5
    temperature: float = 1.0
    noise: bool = True
    noise_kind: str = 'logistic'

    def validate(self):
        """Raise ConfigError when a field is out of range."""
        if self.alpha_g < 0 or self.alpha_v < 0:
            raise ConfigError('alpha_g and alpha_v must be nonnegative')
        if abs(self.alpha_g + self.alpha_v - 1.0) > 1e-9:
            raise ConfigError(
                f'alpha_g + alpha_v must equal 1, got {self.alpha_g} + {self.alpha_v}'
            )
        if self.tau <= 0:
            raise ConfigError(f'tau must be positive, got {self.tau}')
        if not 0 < self.delta < 1:
            raise ConfigError(f'delta must be in (0, 1), got {self.delta}')
        if self.temperature <= 0:
            raise ConfigError(f'temperature must be positive, got {self.temperature}')
        if self.noise_kind not in ('logistic', 'gumbel'):
            raise ConfigError(f'unknown noise_kind {self.noise_kind!r}')


def benchmark_align():
    """Alignment settings for weak training on the standard benchmark.

    Priors are nonnegative, so at ``delta=0.5`` and ``temperature=1`` every
    pair aligns with probability at least one half and every query regresses
    to the middle of all candidate targets. Weighting geometry up, narrowing
    ``tau`` and moving the threshold to ``S = temperature * logit(delta)``
    (about 0.44 here) keeps a near prediction aligned with its target most
    of the time and a far one rarely.
    """
    return AlignConfig(
        alpha_g=0.85, alpha_v=0.15, tau=0.25, delta=0.9, temperature=0.2
    )


@dataclass
class TrainConfig:
    """Optimization schedule and loss weights."""

    epochs: int = 300
    lr: float = 1e-3
    weight_decay: float = 1e-4
    optimizer: str = 'adamw'
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 16
    lr_decay_epoch: int = 200
    lr_decay_factor: float = 0.1
    lambda_sparse: float = 1.0
    eval_every: int = 25
    target_cap: int = 64
    merge_verbs: bool = True
    freeze_queries: bool = False

    def validate(self):
        """Raise ConfigError when a field is out of range."""
        if self.epochs < 0:
            raise ConfigError('epochs must be >= 0')
        if self.lr < 0:
            raise ConfigError(f'lr must be >= 0, got {self.lr}')
        if self.weight_decay < 0:
            raise ConfigError('weight_decay must be >= 0')
        if self.optimizer not in ('adamw', 'sgd'):
            raise ConfigError(f'unknown optimizer {self.optimizer!r}')
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1 and self.adam_eps > 0):
            raise ConfigError('adam betas must be in (0, 1) and eps positive')
        if self.batch_size < 1:
            raise ConfigError('batch_size must be >= 1')
        if self.lr_decay_factor <= 0:
            raise ConfigError('lr_decay_factor must be positive')
        if self.lambda_sparse < 0:
            raise ConfigError('lambda_sparse must be >= 0')
        if self.eval_every < 0:
            raise ConfigError('eval_every must be >= 0')
        if self.target_cap < 1:
            raise ConfigError('target_cap must be >= 1')


@dataclass
class EvalConfig:
    """Detection emission and matching settings."""

    top_k: int = 100
    score_floor: float = 1e-4
    iou_threshold: float = 0.5

    def validate(self):
        """Raise ConfigError when a field is out of range."""
        if self.top_k < 1:
            raise ConfigError('top_k must be >= 1')
        if self.score_floor < 0:
            raise ConfigError('score_floor must be >= 0')
        if not 0 < self.iou_threshold <= 1:
            raise ConfigError('iou_threshold must be in (0, 1]')


SECTIONS = {
    'generator': GeneratorConfig,
    'vocab': VocabConfig,
    'model': ModelConfig,
    'align': AlignConfig,
    'train': TrainConfig,
    'eval': EvalConfig,
}


def _coerce(value, kind, key):
    if kind in ('bool', bool):
        if isinstance(value, bool):
            return value
        text = str(value).strip().lower()
        if text in _TRUE:
            return True
        if text in _FALSE:
            return False
        raise ConfigError(f'{key}: expected a boolean, got {value!r}')
    try:
        if kind in ('int', int):
            if isinstance(value, float) and not value.is_integer():
                raise ValueError(value)
            return int(value)
        if kind in ('float', float):
            return float(value)
    except (TypeError, ValueError) as e:
        raise ConfigError(f'{key}: cannot convert {value!r} to {kind}') from e
    return str(value)


@dataclass
class RunConfig:
    """Everything one CLI invocation resolves to."""

    command: str = 'train'
    mode: str = 'weak'
    seed: int = 7
    paths: dict[str, str] = field(default_factory=dict)
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    vocab: VocabConfig = field(default_factory=VocabConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    align: AlignConfig = field(default_factory=AlignConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    overrides: dict[str, str] = field(default_factory=dict)

    def _resolve_key(self, key):
        if '.' in key:
            section, name = key.split('.', 1)
            if section not in SECTIONS:
                raise ConfigError(f'unknown config section {section!r} in {key!r}')
            if name not in {f.name for f in dataclasses.fields(SECTIONS[section])}:
                raise ConfigError(f'unknown config key {key!r}')
            return section, name
        owners = [
            section
            for section, cls in SECTIONS.items()
            if key in {f.name for f in dataclasses.fields(cls)}
        ]
        if not owners:
            raise ConfigError(f'unknown config key {key!r}')
        if len(owners) > 1:
            raise ConfigError(
                f'ambiguous config key {key!r}; qualify it as one of '
                + ', '.join(f'{s}.{key}' for s in owners)
            )
        return owners[0], key

    def set_value(self, key, value):
        """Assign one override, coercing it to the field's declared type."""
        section, name = self._resolve_key(key)
        target = getattr(self, section)
        kind = {f.name: f.type for f in dataclasses.fields(target)}[name]
        setattr(target, name, _coerce(value, kind, key))

    def apply_overrides(self, overrides):
        """Apply and record a mapping of overrides."""
        for key, value in overrides.items():
            self.set_value(key, value)
            self.overrides[key] = str(value)

    def load_file(self, path):
        """Merge a JSON config file holding one object per section."""
        try:
            with open(path, encoding='utf-8') as f:
                data = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f'config file {path}: {e}') from e
        if not isinstance(data, dict):
            raise ConfigError(f'config file {path}: top level must be an object')
        for section, values in data.items():
            if section == 'mode':
                self.mode = values
                continue
            if section == 'seed':
                self.seed = _coerce(values, int, f'config file {path}: seed')
                continue
            if section not in SECTIONS or not isinstance(values, dict):
                raise ConfigError(f'config file {path}: unknown section {section!r}')
            for name, value in values.items():
                self.set_value(f'{section}.{name}', value)

    def validate(self):
        """Raise ConfigError when a field is out of range."""
        if self.mode not in ('weak', 'strong'):
            raise ConfigError(f'mode must be weak or strong, got {self.mode!r}')
        if isinstance(self.seed, bool) or not isinstance(self.seed, int):
            raise ConfigError(f'seed must be an integer, got {self.seed!r}')
        if self.seed < 0:
            raise ConfigError(f'seed must be >= 0, got {self.seed}')
        for section in SECTIONS:
            getattr(self, section).validate()
        return self

    def to_dict(self):
        """Resolved configuration as plain JSON-ready data."""
        out: dict[str, Any] = {
            'command': self.command,
            'mode': self.mode,
            'seed': self.seed,
            'paths': dict(sorted(self.paths.items())),
        }
        for section in SECTIONS:
            out[section] = dataclasses.asdict(getattr(self, section))
        out['overrides'] = dict(sorted(self.overrides.items()))
        return out


def parse_overrides(items):
    """Turn ``['a=1', 'train.lr=0']`` into an ordered mapping."""
    out = {}
    for item in items or ():
        key, sep, value = item.partition('=')
        if not sep or not key.strip():
            raise ConfigError(f'override {item!r} is not of the form key=value')
        out[key.strip()] = value.strip()
    return out


def worker_count():
    """Worker cap from ``ALIGNFORMER_THREADS``, defaulting to one."""
    raw = os.environ.get(THREADS_ENV, '1')
    try:
        count = int(raw)
    except ValueError as e:
        raise ConfigError(f'{THREADS_ENV} must be an integer, got {raw!r}') from e
    if count < 1:
        raise ConfigError(f'{THREADS_ENV} must be >= 1, got {count}')
    return count


def section_from_dict(cls, data):
    """Rebuild a config section stored in an artifact's metadata."""
    names = {f.name for f in dataclasses.fields(cls)}
    return cls(**{k: v for k, v in data.items() if k in names})


def read_json(path):
    """Load a JSON artifact."""
    return json.loads(Path(path).read_text(encoding='utf-8'))
