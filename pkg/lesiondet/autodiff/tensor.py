import contextlib
import threading

import numpy as np

from lesiondet.core.errors import ShapeError


"""
    tensor.py

    Reverse-mode automatic differentiation on 4-D (batch, channel, height,
    width) arrays. Each differentiable operation returns a Tensor that
    remembers its parents and a closure mapping the upstream gradient to
    one gradient per parent. `Tensor.backward` orders the recorded nodes
    with a `Graph` and accumulates gradients into every tensor that
    requires them.

    A graph and its tensors belong to a single thread; recording can be
    switched off per thread with `no_grad`.
"""

_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, 'enabled', True)


@contextlib.contextmanager
def no_grad():
    """ Disables graph recording on the current thread. """
    previous = is_grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = previous


class Tensor:
    def __init__(self, data, requires_grad: bool = False, name: str = None):
        """
        :param data: 4-D array-like; float dtype is preserved, anything
            else becomes float32
        :param requires_grad: accumulate a gradient for this tensor
        :param name: optional label used in error messages
        """
        data = np.asarray(data)
        if data.dtype not in (np.float32, np.float64):
            data = data.astype(np.float32)

        if data.ndim != 4 or min(data.shape) < 1:
            raise ShapeError(f"Tensors are 4-D with non-empty dimensions, got shape {data.shape}.")

        self.data: np.ndarray = data
        self.grad: np.ndarray = None
        self.requires_grad: bool = requires_grad
        self.name = name

        self.parents: tuple = ()
        self.backward_fn = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self.backward_fn is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> 'Tensor':
        return Tensor(self.data, requires_grad=False, name=self.name)

    def accumulate(self, grad: np.ndarray) -> None:
        """ Adds an incoming gradient, checking its shape. """
        if grad.shape != self.data.shape:
            raise ShapeError(f"Gradient shape {grad.shape} does not match tensor shape {self.data.shape}.")

        if self.grad is None:
            self.grad = np.array(grad, dtype=self.data.dtype, copy=True)
        else:
            self.grad += grad

    def backward(self, grad: np.ndarray = None) -> None:
        """ Back-propagates from this tensor. The seed gradient defaults
        to ones, which for a single-element loss is dL/dL = 1.

        :param grad: upstream gradient with the shape of this tensor
        """
        if grad is None:
            grad = np.ones_like(self.data)

        Graph(self).backward(grad)

    def __add__(self, other: 'Tensor') -> 'Tensor':
        return add(self, other)

    def __repr__(self):
        label = f" '{self.name}'" if self.name else ''
        return f"Tensor{label}(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"


class Graph:
    def __init__(self, output: Tensor):
        """ Collects the nodes reachable from `output` in topological
        order (parents before consumers).
        """
        self.output = output
        self.nodes: list = []

        visited = set()
        stack = [(output, False)]

        # Iterative post-order keeps deep u-nets clear of the recursion limit.
        while stack:
            node, expanded = stack.pop()

            if expanded:
                self.nodes.append(node)
                continue

            if id(node) in visited:
                continue
            visited.add(id(node))

            stack.append((node, True))
            for parent in node.parents:
                if id(parent) not in visited:
                    stack.append((parent, False))

    def backward(self, grad: np.ndarray) -> None:
        """ Visits every node after all of its consumers and accumulates
        gradients into the leaves that require them.
        """
        grads = {id(self.output): np.asarray(grad, dtype=self.output.dtype)}

        for node in reversed(self.nodes):
            upstream = grads.pop(id(node), None)
            if upstream is None:
                continue

            if node.requires_grad and node.is_leaf:
                node.accumulate(upstream)

            if node.backward_fn is None:
                continue

            for parent, parent_grad in zip(node.parents, node.backward_fn(upstream)):
                if parent_grad is None or not parent.requires_grad:
                    continue

                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + parent_grad
                else:
                    grads[id(parent)] = parent_grad


def make_result(data: np.ndarray, parents: tuple, backward_fn) -> Tensor:
    """ Wraps an operation result, recording the graph edge when any
    parent requires a gradient and recording is enabled.
    """
    out = Tensor(data)

    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = tuple(parents)
        out.backward_fn = backward_fn

    return out


def add(a: Tensor, b: Tensor) -> Tensor:
    """ Elementwise sum of two equally shaped tensors. """
    if a.shape != b.shape:
        raise ShapeError(f"Cannot add tensors of shapes {a.shape} and {b.shape}.")

    return make_result(a.data + b.data, (a, b), lambda g: (g, g))
