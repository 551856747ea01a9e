"""alignformer: weakly-supervised human-object interaction detection.

A set-prediction encoder-decoder trained from image-level interaction labels
through a differentiable hard alignment layer, with a synthetic scene
benchmark and an mAP evaluation harness.
"""

__version__ = '0.1.0'

from .align import align, combine_scores, discretize, geometric_prior, visual_prior
from .config import (
    AlignConfig,
    EvalConfig,
    GeneratorConfig,
    ModelConfig,
    RunConfig,
    TrainConfig,
    VocabConfig,
)
from .errors import (
    AlignFormerError,
    CheckpointError,
    ConfigError,
    DatasetError,
    EvaluationError,
    NumericalError,
    ShapeError,
)
from .evaluation import EvalReport, average_precision, evaluate, evaluate_detections
from .loss import box_loss, class_loss, sparsity_loss, strong_loss, weak_loss
from .model import ParameterStore, PredictionSet, forward, init_params
from .ndtensor import Tensor, apply_primitive, backward, grad_check, no_grad
from .scenegen import Scene, Vocabulary, generate_dataset, generate_scene, split_rare
from .targets import TargetSet, build_targets, build_targets_strong
from .trainer import TrainResult, train

__all__ = [
    'AlignConfig',
    'AlignFormerError',
    'CheckpointError',
    'ConfigError',
    'DatasetError',
    'EvalConfig',
    'EvalReport',
    'EvaluationError',
    'GeneratorConfig',
    'ModelConfig',
    'NumericalError',
    'ParameterStore',
    'PredictionSet',
    'RunConfig',
    'Scene',
    'ShapeError',
    'TargetSet',
    'Tensor',
    'TrainConfig',
    'TrainResult',
    'VocabConfig',
    'Vocabulary',
    '__version__',
    'align',
    'apply_primitive',
    'average_precision',
    'backward',
    'box_loss',
    'build_targets',
    'build_targets_strong',
    'class_loss',
    'combine_scores',
    'discretize',
    'evaluate',
    'evaluate_detections',
    'forward',
    'generate_dataset',
    'generate_scene',
    'geometric_prior',
    'grad_check',
    'init_params',
    'no_grad',
    'sparsity_loss',
    'split_rare',
    'strong_loss',
    'train',
    'visual_prior',
    'weak_loss',
]
