"""Tensor values and the reverse-mode gradient tape.

Operations only record onto a tape while one is active::

    with Tape() as tape:
        loss = ops.reduce_mean(ops.mul(x, w))
    tape.backward(loss)

Outside a ``Tape`` block every op still computes its forward value but
nothing is recorded, which is how inference runs.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

import numpy as np

from .errors import NotOnTape, NotScalar

DEBUG = os.environ.get("DISTSTN_DEBUG", "") not in ("", "0")

_active_tapes: list["Tape"] = []


class Tensor:
    """A float64 array that may take part in gradient computation."""

    __slots__ = ("data", "requires_grad", "grad", "_node", "__weakref__")

    def __init__(self, data: Any, requires_grad: bool = False):
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._node: Node | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # Operator sugar; the functional forms in ``ops`` are canonical.
    def __add__(self, other: "Tensor") -> "Tensor":
        from . import ops

        return ops.add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        from . import ops

        return ops.sub(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        from . import ops

        return ops.mul(self, other)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        from . import ops

        return ops.matmul(self, other)


def as_tensor(x: Any) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass(eq=False)
class Node:
    """One recorded operation.

    ``backward`` maps the upstream gradient of ``output`` to a sequence of
    gradients aligned with ``inputs`` (``None`` where no gradient flows).
    ``ctx`` holds whatever forward values the backward closure saved; it is
    kept for inspection only.
    """

    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    tape: "Tape"
    ctx: dict = field(default_factory=dict)


class Tape:
    """Ordered record of operations, replayed in reverse by :meth:`backward`."""

    def __init__(self) -> None:
        self.nodes: list[Node] = []

    def __enter__(self) -> "Tape":
        _active_tapes.append(self)
        return self

    def __exit__(self, *exc: object) -> None:
        _active_tapes.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)

    def backward(self, loss: Tensor) -> None:
        backward(loss, self)


def active_tape() -> Tape | None:
    return _active_tapes[-1] if _active_tapes else None


def record(
    op: str,
    inputs: Sequence[Tensor],
    out: np.ndarray,
    backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]],
    **ctx: Any,
) -> Tensor:
    """Wrap a forward result and, if a tape is active, record how to differentiate it."""
    if DEBUG and not np.all(np.isfinite(out)):
        if all(np.all(np.isfinite(t.data)) for t in inputs):
            raise FloatingPointError(f"{op} produced non-finite values from finite inputs")
    needs_grad = any(t.requires_grad for t in inputs)
    result = Tensor(out, requires_grad=needs_grad)
    tape = active_tape()
    if needs_grad and tape is not None:
        node = Node(op, tuple(inputs), result, backward_fn, tape, ctx)
        tape.nodes.append(node)
        result._node = node
    return result


def backward(loss: Tensor, tape: Tape) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every leaf that requires grad.

    Calling this twice without clearing gradients adds the gradients twice.
    """
    if loss.size != 1:
        raise NotScalar(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._node is None or loss._node.tape is not tape:
        raise NotOnTape("loss was not produced by an operation recorded on this tape")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        upstream = grads.pop(id(node.output), None)
        if upstream is None:
            continue
        for inp, g in zip(node.inputs, node.backward(upstream)):
            if g is None or not inp.requires_grad:
                continue
            if inp._node is None:
                inp.grad = g.copy() if inp.grad is None else inp.grad + g
            else:
                key = id(inp)
                grads[key] = g if key not in grads else grads[key] + g
