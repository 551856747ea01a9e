"""Alignment-masked box and class losses, the sparsity loss and strong mode.

Every pair ``(i, j)`` with ``A[i, j] == 1`` contributes its box L1 distance,
verb binary cross-entropy and noun cross-entropy; sums are normalized by
``max(1, sum(A))``.
"""

import logging
from dataclasses import asdict, dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import ndtensor as nd
from .align import AlignmentMatrix, align, geometric_prior, pairwise_l1, visual_prior
from .errors import ConfigError
from .ndtensor import Tensor

logger = logging.getLogger(__name__)

PROB_EPS = 1e-7


@dataclass
class LossBreakdown:
    """Scalar values of every loss term for one scene or an average."""

    l_box: float = 0.0
    l_human: float = 0.0
    l_object: float = 0.0
    l_class: float = 0.0
    l_verb: float = 0.0
    l_noun: float = 0.0
    l_sparse: float = 0.0
    total: float = 0.0
    aligned: int = 0

    def as_dict(self):
        return asdict(self)


@dataclass
class LossTerms:
    """Differentiable loss terms plus their scalar breakdown."""

    human: Tensor
    object: Tensor
    verb: Tensor
    noun: Tensor
    sparse: Tensor
    total: Tensor
    alignment: AlignmentMatrix = None

    def breakdown(self):
        human, obj = self.human.item(), self.object.item()
        verb, noun = self.verb.item(), self.noun.item()
        return LossBreakdown(
            l_box=human + obj,
            l_human=human,
            l_object=obj,
            l_class=verb + noun,
            l_verb=verb,
            l_noun=noun,
            l_sparse=self.sparse.item(),
            total=self.total.item(),
            aligned=0 if self.alignment is None else self.alignment.count,
        )


def _zero(dtype):
    return Tensor(np.zeros(1, dtype=dtype))


def _masked_mean(mask, costs, count):
    total = nd.reduce_sum(nd.mul_elementwise(mask, costs))
    return nd.scalar_mul(total, 1.0 / max(1, count))


def box_loss(alignment, pred, targets):
    """L1 distance of aligned human and object boxes.

    Returns:
        tuple: ``(l_human, l_object)`` as one-element tensors.
    """
    if targets.size == 0:
        return _zero(pred.human.dtype), _zero(pred.human.dtype)
    mask, count = alignment.mask, alignment.count
    l_human = _masked_mean(mask, pairwise_l1(pred.human, targets.human), count)
    l_object = _masked_mean(mask, pairwise_l1(pred.object, targets.object), count)
    return l_human, l_object


def class_loss(alignment, pred, targets):
    """Verb binary cross-entropy and noun cross-entropy of aligned pairs.

    The verb term averages the binary cross-entropy over the ``V`` verb
    slots; probabilities are clamped at ``1e-7``.

    Returns:
        tuple: ``(l_verb, l_noun)`` as one-element tensors.
    """
    dtype = pred.verb.dtype
    if targets.size == 0:
        return _zero(dtype), _zero(dtype)
    num_verbs = pred.verb.shape[1]
    verb_t = targets.verb.astype(dtype)
    ones = Tensor(np.ones(pred.verb.shape, dtype=dtype))
    log_p = nd.log(pred.verb, PROB_EPS)
    log_q = nd.log(ones - pred.verb, PROB_EPS)
    agreement = log_p @ Tensor(verb_t.T) + log_q @ Tensor((1 - verb_t).T)
    bce = nd.scalar_mul(agreement, -1.0 / num_verbs)
    noun_t = Tensor(targets.noun.T.astype(dtype))
    noun_ce = nd.neg(nd.log(pred.noun, PROB_EPS) @ noun_t)
    mask, count = alignment.mask, alignment.count
    return _masked_mean(mask, bce, count), _masked_mean(mask, noun_ce, count)


def sparsity_loss(alignment):
    """Mean of the alignment matrix, in ``[0, 1]``."""
    if alignment.hard.size == 0:
        return _zero(alignment.soft.dtype)
    return nd.reduce_mean(alignment.mask)


def _combine(l_human, l_object, l_verb, l_noun, l_sparse, lambda_sparse, alignment):
    total = l_human + l_object + l_verb + l_noun
    if lambda_sparse:
        total = total + nd.scalar_mul(l_sparse, lambda_sparse)
    return LossTerms(l_human, l_object, l_verb, l_noun, l_sparse, total, alignment)


def weak_loss(pred, targets, align_cfg, lambda_sparse=1.0, rng=None):
    """Loss of one scene against candidate targets through the align layer."""
    dtype = pred.human.dtype
    if targets.size == 0:
        zero = _zero(dtype)
        return LossTerms(zero, zero, zero, zero, zero, zero, None)
    alignment = align(pred, targets, align_cfg, rng).alignment
    l_human, l_object = box_loss(alignment, pred, targets)
    l_verb, l_noun = class_loss(alignment, pred, targets)
    l_sparse = sparsity_loss(alignment)
    return _combine(
        l_human, l_object, l_verb, l_noun, l_sparse, lambda_sparse, alignment
    )


def match_targets(pred, targets, align_cfg):
    """Minimum-cost one-to-one assignment of targets to predictions.

    The cost of a pair is ``1 - alpha_g * GP - alpha_v * VP``.

    Returns:
        tuple: ``(prediction indices, target indices)``.
    """
    if targets.size > pred.size:
        raise ConfigError(
            f'{targets.size} targets exceed {pred.size} predictions; raise num_queries'
        )
    with nd.no_grad():
        gp = geometric_prior(pred, targets, align_cfg.tau).data
        vp = visual_prior(pred, targets).data
    gp, vp = gp.astype(np.float64), vp.astype(np.float64)
    cost = 1.0 - align_cfg.alpha_g * gp - align_cfg.alpha_v * vp
    rows, cols = linear_sum_assignment(cost)
    return rows, cols


def strong_loss(pred, targets, align_cfg):
    """Loss against ground-truth targets assigned by bipartite matching."""
    dtype = pred.human.dtype
    if targets.size == 0:
        zero = _zero(dtype)
        return LossTerms(zero, zero, zero, zero, zero, zero, None)
    rows, cols = match_targets(pred, targets, align_cfg)
    hard = np.zeros((pred.size, targets.size), dtype=dtype)
    hard[rows, cols] = 1
    fixed = Tensor(hard)
    alignment = AlignmentMatrix(hard=hard, soft=fixed, mask=fixed)
    l_human, l_object = box_loss(alignment, pred, targets)
    l_verb, l_noun = class_loss(alignment, pred, targets)
    return _combine(l_human, l_object, l_verb, l_noun, _zero(dtype), 0.0, alignment)
