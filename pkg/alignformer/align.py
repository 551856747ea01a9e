"""Target alignment: geometric and visual priors, noise and hard threshold.

The score between prediction ``i`` and candidate target ``j`` is a convex
combination of a box-distance similarity and a class-probability agreement.
Adding logistic noise and thresholding its sigmoid at ``delta`` yields the
binary alignment matrix; gradients cross the threshold straight-through the
soft sigmoid.
"""

import logging
from dataclasses import dataclass

import numpy as np

from . import ndtensor as nd
from .errors import ShapeError
from .ndtensor import Tensor

logger = logging.getLogger(__name__)


@dataclass
class AlignmentMatrix:
    """Binary ``P x T`` alignment with its differentiable companions.

    Attributes:
        hard: 0/1 array used as the forward value.
        soft: ``sigmoid((S + G) / temperature)``, carries gradients.
        mask: Straight-through tensor whose value equals ``hard`` and whose
            gradient flows into ``soft``.
    """

    hard: np.ndarray
    soft: Tensor
    mask: Tensor

    @property
    def count(self):
        return int(self.hard.sum())


@dataclass
class AlignResult:
    gp: Tensor
    vp: Tensor
    scores: Tensor
    noise: np.ndarray
    alignment: AlignmentMatrix


def pairwise_l1(pred_boxes, target_boxes):
    """Differentiable ``P x T`` matrix of L1 distances between boxes.

    Args:
        pred_boxes: ``P x 4`` tensor.
        target_boxes: ``T x 4`` array, treated as constant.
    """
    target_boxes = np.asarray(target_boxes)
    if pred_boxes.shape[1] != 4 or target_boxes.ndim != 2 or target_boxes.shape[1] != 4:
        raise ShapeError(
            f'pairwise_l1: incompatible shapes {pred_boxes.shape} and '
            f'{target_boxes.shape}'
        )
    dtype = pred_boxes.dtype
    p, t = pred_boxes.shape[0], target_boxes.shape[0]
    spread = Tensor(np.ones((1, t), dtype=dtype))
    total = None
    for k in range(4):
        select = np.zeros((4, 1), dtype=dtype)
        select[k, 0] = 1
        column = (pred_boxes @ Tensor(select)) @ spread
        fixed = Tensor(np.broadcast_to(target_boxes[:, k].astype(dtype), (p, t)).copy())
        diff = nd.absolute(column - fixed)
        total = diff if total is None else total + diff
    return total


def geometric_prior(pred, targets, tau=1.0):
    """``exp(-(|h' - h|_1 + |o' - o|_1) / tau)`` for every prediction/target pair."""
    if tau <= 0:
        raise ValueError(f'tau must be positive, got {tau}')
    distance = pairwise_l1(pred.human, targets.human)
    distance = distance + pairwise_l1(pred.object, targets.object)
    return nd.exp(nd.scalar_mul(distance, -1.0 / tau))


def visual_prior(pred, targets):
    """``v' v^T + n' n^T``: verb and noun agreement of every pair."""
    if pred.verb.shape[1] != targets.verb.shape[1]:
        raise ShapeError(
            f'visual_prior: verb width {pred.verb.shape[1]} != {targets.verb.shape[1]}'
        )
    if pred.noun.shape[1] != targets.noun.shape[1]:
        raise ShapeError(
            f'visual_prior: noun width {pred.noun.shape[1]} != {targets.noun.shape[1]}'
        )
    dtype = pred.verb.dtype
    verbs = pred.verb @ Tensor(targets.verb.T.astype(dtype))
    nouns = pred.noun @ Tensor(targets.noun.T.astype(dtype))
    return verbs + nouns


def combine_scores(gp, vp, cfg):
    """``alpha_g * GP + alpha_v * VP``."""
    cfg.validate()
    if gp.shape != vp.shape:
        raise ShapeError(
            f'combine_scores: incompatible shapes {gp.shape} and {vp.shape}'
        )
    return nd.scalar_mul(gp, cfg.alpha_g) + nd.scalar_mul(vp, cfg.alpha_v)


def sample_noise(shape, rng, temperature=1.0, kind='logistic'):
    """Draw alignment noise.

    ``logistic`` noise is the difference of two standard Gumbel draws, so
    with temperature 1 ``P(sigmoid(S + G) >= 0.5) == sigmoid(S)``. ``gumbel``
    adds a single Gumbel draw.
    """
    if temperature <= 0:
        raise ValueError(f'temperature must be positive, got {temperature}')
    if kind == 'logistic':
        return temperature * (rng.gumbel(size=shape) - rng.gumbel(size=shape))
    if kind == 'gumbel':
        return temperature * rng.gumbel(size=shape)
    raise ValueError(f'unknown noise kind {kind!r}')


def discretize(scores, noise, cfg):
    """Threshold ``sigmoid((S + G) / temperature)`` at ``delta`` (inclusive).

    Args:
        scores: ``P x T`` score tensor.
        noise: Array of the same shape, or ``None`` for no noise.
        cfg: :class:`AlignConfig`.
    """
    z = scores
    if noise is not None:
        noise = np.asarray(noise)
        if noise.shape != scores.shape:
            raise ShapeError(
                f'discretize: incompatible shapes {scores.shape} and {noise.shape}'
            )
        z = scores + Tensor(noise.astype(scores.dtype))
    soft = nd.sigmoid(nd.scalar_mul(z, 1.0 / cfg.temperature))
    hard = (soft.data >= cfg.delta).astype(scores.dtype)
    return AlignmentMatrix(hard=hard, soft=soft, mask=nd.straight_through(soft, hard))


def align(pred, targets, cfg, rng=None):
    """Score every prediction/target pair and discretize into an alignment.

    Noise is drawn only when ``cfg.noise`` is set and ``rng`` is given.
    """
    gp = geometric_prior(pred, targets, cfg.tau)
    vp = visual_prior(pred, targets)
    scores = combine_scores(gp, vp, cfg)
    noise = None
    if cfg.noise and rng is not None:
        noise = sample_noise(scores.shape, rng, cfg.temperature, cfg.noise_kind)
    alignment = discretize(scores, noise, cfg)
    return AlignResult(gp=gp, vp=vp, scores=scores, noise=noise, alignment=alignment)
