"""Optimizers over a parameter store."""

from dataclasses import dataclass, field

import numpy as np


@dataclass
class OptimizerState:
    """Moments and step count of an adaptive-moment optimizer."""

    lr: float
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    first_moment: dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: dict[str, np.ndarray] = field(default_factory=dict)


def _gradients(params):
    for name, tensor in params.trainable_items():
        if tensor.grad is None:
            raise ValueError(f'parameter {name!r} has no gradient for this step')
        yield name, tensor, tensor.grad


class AdamW:
    """Adaptive moments with decoupled weight decay.

    Each step first shrinks every parameter by ``1 - lr * weight_decay`` and
    then applies the bias-corrected moment update. Gradients are left intact.
    """

    def __init__(self, lr, weight_decay=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.state = OptimizerState(
            lr=lr, weight_decay=weight_decay, beta1=beta1, beta2=beta2, eps=eps
        )

    def set_lr(self, lr):
        self.state.lr = lr

    def step(self, params):
        """Update every trainable tensor of ``params`` in place."""
        s = self.state
        grads = list(_gradients(params))
        s.step += 1
        correction1 = 1.0 - s.beta1**s.step
        correction2 = 1.0 - s.beta2**s.step
        for name, tensor, grad in grads:
            m = s.first_moment.get(name)
            if m is None:
                m = s.first_moment[name] = np.zeros_like(tensor.data)
                s.second_moment[name] = np.zeros_like(tensor.data)
            v = s.second_moment[name]
            m *= s.beta1
            m += (1.0 - s.beta1) * grad
            v *= s.beta2
            v += (1.0 - s.beta2) * grad * grad
            update = (m / correction1) / (np.sqrt(v / correction2) + s.eps)
            tensor.data *= 1.0 - s.lr * s.weight_decay
            tensor.data -= s.lr * update


class SGD:
    """Plain gradient descent with L2 weight decay."""

    def __init__(self, lr, weight_decay=0.0):
        self.state = OptimizerState(lr=lr, weight_decay=weight_decay)

    def set_lr(self, lr):
        self.state.lr = lr

    def step(self, params):
        s = self.state
        grads = list(_gradients(params))
        s.step += 1
        for _, tensor, grad in grads:
            tensor.data -= s.lr * (grad + s.weight_decay * tensor.data)


def build_optimizer(train_cfg):
    """Instantiate the optimizer named by a :class:`TrainConfig`."""
    if train_cfg.optimizer == 'sgd':
        return SGD(train_cfg.lr, train_cfg.weight_decay)
    return AdamW(
        train_cfg.lr,
        weight_decay=train_cfg.weight_decay,
        beta1=train_cfg.beta1,
        beta2=train_cfg.beta2,
        eps=train_cfg.adam_eps,
    )


def optimizer_step(params, optimizer):
    """Apply one optimizer step to ``params``."""
    optimizer.step(params)
