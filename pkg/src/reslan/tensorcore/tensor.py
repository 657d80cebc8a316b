from __future__ import annotations

import threading
from contextlib import contextmanager

import numpy as np

from ..errors import ContractError

_state = threading.local()


def _tape_stack() -> list:
    if not hasattr(_state, "stack"):
        _state.stack = []
    return _state.stack


def current_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """Double-precision array with an optional gradient buffer.

    Layout for image tensors is (batch, feature, row, column).
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "_node", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name
        self._node = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"


def constant(data) -> Tensor:
    if isinstance(data, Tensor):
        return data
    return Tensor(data)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64, copy=True), requires_grad=True, name=name)


class _Node:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out, inputs, backward):
        self.out = out
        self.inputs = inputs
        self.backward = backward


class Tape:
    """Ordered record of executed operations.

    Operations record themselves on the innermost active tape when any input
    requires a gradient. :meth:`backward` walks the record once in reverse;
    a second call needs :meth:`reset` first.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.consumed = False

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        stack = _tape_stack()
        if not stack or stack[-1] is not self:
            raise ContractError("tape contexts exited out of order")
        stack.pop()
        return False

    def __len__(self):
        return len(self.nodes)

    def record(self, out: Tensor, inputs: tuple, backward) -> None:
        if self.consumed:
            raise ContractError("tape already consumed by backward(); call reset() first")
        node = _Node(out, inputs, backward)
        out._node = node
        self.nodes.append(node)

    def backward(self, loss: Tensor) -> None:
        if self.consumed:
            raise ContractError("backward() called twice on the same tape without reset()")
        if loss.size != 1:
            raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
        self.consumed = True
        grads = {id(loss): np.ones_like(loss.data)}
        if loss._node is None and loss.requires_grad:
            loss.grad = grads[id(loss)] if loss.grad is None else loss.grad + grads[id(loss)]
            return
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            node.out.grad = g
            for inp, gi in zip(node.inputs, node.backward(g)):
                if gi is None or not inp.requires_grad:
                    continue
                if inp._node is None:
                    inp.grad = gi.copy() if inp.grad is None else inp.grad + gi
                else:
                    prev = grads.get(id(inp))
                    grads[id(inp)] = gi if prev is None else prev + gi
        self._release()

    def _release(self) -> None:
        # closures hold forward buffers and out._node <-> node is a cycle
        for node in self.nodes:
            node.backward = None
            node.inputs = ()
            node.out._node = None

    def reset(self) -> None:
        self._release()
        self.nodes.clear()
        self.consumed = False


@contextmanager
def no_grad():
    """Suspend recording, e.g. for inference."""
    stack = _tape_stack()
    saved = list(stack)
    stack.clear()
    try:
        yield
    finally:
        stack.extend(saved)


def backward(loss: Tensor) -> None:
    """Backpropagate through the tape that produced ``loss``."""
    tape = current_tape()
    if tape is None:
        raise ContractError("backward() outside of an active tape")
    tape.backward(loss)


def make_result(data, inputs, backward) -> Tensor:
    """Wrap an op output and record it if anything upstream needs a gradient."""
    tape = current_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs)
    if needs:
        tape.record(out, tuple(inputs), backward)
    return out
