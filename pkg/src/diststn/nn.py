"""Layers, losses and the momentum SGD optimizer used for training."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import LabelOutOfRange, MissingGradient, ShapeMismatch
from .tensor import Tensor, record


def dense(x: Tensor, weights: Tensor, bias: Tensor) -> Tensor:
    """Affine map ``W x + b``; ``x`` is a vector or a batch of row vectors."""
    m, n = weights.shape
    if x.shape[-1] != n or x.ndim not in (1, 2) or bias.shape != (m,):
        raise ShapeMismatch(f"dense: x {x.shape}, W {weights.shape}, b {bias.shape}")
    xd, wd = x.data, weights.data
    out = xd @ wd.T + bias.data

    def bw(g):
        g2 = g.reshape(-1, m)
        x2 = xd.reshape(-1, n)
        dx = (g @ wd) if x.requires_grad else None
        dw = (g2.T @ x2) if weights.requires_grad else None
        return dx, dw, g2.sum(axis=0)

    return record("dense", (x, weights, bias), out, bw)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits: Tensor, label) -> Tensor:
    """Mean of ``-log softmax(logits)[label]`` over the batch.

    ``logits`` is ``C`` (with an int label) or ``B x C`` (with ``B`` labels).
    """
    c = logits.shape[-1]
    if logits.ndim not in (1, 2) or c < 2:
        raise ShapeMismatch(f"softmax_cross_entropy: logits shape {logits.shape}")
    labels = np.atleast_1d(np.asarray(label, dtype=np.int64))
    z = logits.data.reshape(-1, c)
    if labels.shape != (z.shape[0],):
        raise ShapeMismatch(f"{labels.shape[0]} labels for {z.shape[0]} rows of logits")
    if np.any(labels < 0) or np.any(labels >= c):
        raise LabelOutOfRange(f"labels {labels.tolist()} outside [0, {c})")

    shifted = z - z.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(z.shape[0])
    nll = logsumexp - shifted[rows, labels]
    b = z.shape[0]

    def bw(g):
        d = softmax(z)
        d[rows, labels] -= 1.0
        return ((d * (g / b)).reshape(logits.shape),)

    return record("softmax_cross_entropy", (logits,), np.array(nll.mean()), bw)


def mae_loss(a: Tensor, b: Tensor) -> Tensor:
    """Mean absolute error; the subgradient at ``a == b`` is 0."""
    if a.shape != b.shape:
        raise ShapeMismatch(f"mae_loss: {a.shape} vs {b.shape}")
    diff = a.data - b.data
    n = diff.size
    sign = np.sign(diff)

    def bw(g):
        d = sign * (g / n)
        return d, -d

    return record("mae_loss", (a, b), np.array(np.abs(diff).mean()), bw)


# parameters and optimizer --------------------------------------------------


@dataclass
class ParamGroup:
    name: str
    params: dict[str, Tensor]
    weight_decay_exempt: bool = False
    momentum: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self) -> None:
        for key, p in self.params.items():
            self.momentum.setdefault(key, np.zeros_like(p.data))

    def tensors(self) -> Iterable[Tensor]:
        return self.params.values()

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


def sgd_momentum_step(
    groups: Sequence[ParamGroup],
    lr: float,
    momentum: float,
    weight_decay: float,
    decoupled: bool = False,
) -> None:
    """One in-place momentum SGD update, then clear gradients.

    Coupled decay (default)::

        g' = g + wd * p        v <- momentum * v + g'        p <- p - lr * v

    With ``decoupled=True`` the decay bypasses the momentum buffer:
    ``v <- momentum * v + g`` and ``p <- p - lr * (v + wd * p)``.
    Groups flagged ``weight_decay_exempt`` use ``wd = 0``.
    """
    for group in groups:
        for name, p in group.params.items():
            if p.grad is None:
                raise MissingGradient(f"{group.name}.{name} has no gradient")
    for group in groups:
        wd = 0.0 if group.weight_decay_exempt else weight_decay
        for name, p in group.params.items():
            g = p.grad
            v = group.momentum[name]
            if decoupled:
                v *= momentum
                v += g
                p.data -= lr * (v + wd * p.data)
            else:
                v *= momentum
                v += g + wd * p.data
                p.data -= lr * v
            p.grad = None
