"""Adam / AdamW on Parameter lists, plus the learning-rate schedules."""
from __future__ import annotations

import math

import numpy as np


class Adam:
    """Adam with optional decoupled weight decay (AdamW when ``decoupled``).

    Parameter groups are dicts ``{"params": [...], "lr": float}``.  A group
    whose lr is 0 is skipped entirely, so its parameters stay bit-identical.
    Bias correction uses a per-parameter step count, so a group that starts
    late is not under-corrected.
    """

    def __init__(self, groups, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0, decoupled=False):
        if not isinstance(groups[0], dict):
            groups = [{"params": list(groups), "lr": 1e-3}]
        self.groups = [dict(g, params=list(g["params"])) for g in groups]
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.decoupled = decoupled
        self.state = {}
        self.t = 0

    def zero_grad(self):
        for g in self.groups:
            for p in g["params"]:
                p.grad = None

    def set_lr(self, lr, group=0):
        self.groups[group]["lr"] = float(lr)

    def step(self):
        self.t += 1
        for g in self.groups:
            lr = g["lr"]
            if lr == 0.0:
                continue
            for p in g["params"]:
                if p.grad is None:
                    continue
                grad = p.grad
                if self.weight_decay and not self.decoupled:
                    grad = grad + self.weight_decay * p.data
                m, v, t = self.state.get(id(p), (np.zeros_like(p.data), np.zeros_like(p.data), 0))
                t += 1
                m = self.b1 * m + (1.0 - self.b1) * grad
                v = self.b2 * v + (1.0 - self.b2) * grad * grad
                self.state[id(p)] = (m, v, t)
                update = (m / (1.0 - self.b1 ** t)) / (np.sqrt(v / (1.0 - self.b2 ** t)) + self.eps)
                if self.weight_decay and self.decoupled:
                    update = update + self.weight_decay * p.data
                p.data = (p.data - lr * update).astype(p.data.dtype)


def AdamW(groups, betas=(0.9, 0.999), eps=1e-8, weight_decay=1e-2):
    return Adam(groups, betas, eps, weight_decay, decoupled=True)


def cosine_lr(base_lr, epoch, total_epochs, min_lr=0.0):
    """Cosine decay from ``base_lr`` at epoch 0 to ``min_lr`` at ``total_epochs``."""
    if total_epochs <= 0:
        return base_lr
    frac = min(max(epoch / total_epochs, 0.0), 1.0)
    return min_lr + 0.5 * (base_lr - min_lr) * (1.0 + math.cos(math.pi * frac))


def clip_grad_norm(params, max_norm):
    """Scale gradients in place so their global L2 norm is at most ``max_norm``; returns the norm."""
    grads = [p.grad for p in params if p.grad is not None]
    total = float(np.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads)))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad = (p.grad * scale).astype(p.grad.dtype)
    return total
