"""Reverse-mode autodiff core: tensors plus an explicit gradient tape.

Operations record themselves onto the innermost active ``Tape`` in the order
they execute; ``Tape.backward`` replays that list in exact reverse order.
A tape and the tensors recorded on it belong to a single thread; independent
tapes on separate threads never share mutable state.
"""

import os
import threading

import numpy as np

_FLOAT_TYPES = (np.float32, np.float64)

_state = threading.local()


def _tape_stack():
    stack = getattr(_state, "tapes", None)
    if stack is None:
        stack = []
        _state.tapes = stack
    return stack


def active_tape():
    """Innermost recording tape of the current thread, or None."""
    stack = _tape_stack()
    return stack[-1] if stack else None


def debug_nan_enabled():
    return os.environ.get("WXADAPT_DEBUG_NAN", "") not in ("", "0")


class Tensor:
    """Dense float array that can take part in gradient recording.

    ``data`` is always a float32 or float64 ndarray. ``grad`` is populated by
    ``Tape.backward`` and always matches ``data``'s shape.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _FLOAT_TYPES:
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def accumulate_grad(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def __repr__(self):
        return (
            f"Tensor(shape={tuple(self.shape)}, dtype={self.data.dtype.name}, "
            f"requires_grad={self.requires_grad})"
        )


class _Node:
    """One recorded operation: inputs, output, and its gradient rule."""

    __slots__ = ("name", "inputs", "output", "backward_fn")

    def __init__(self, name, inputs, output, backward_fn):
        self.name = name
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of operations for one backward pass.

    Use as a context manager around the forward computation, then call
    ``backward(loss)`` once. A second ``backward`` on the same tape raises.
    """

    def __init__(self):
        self._nodes = []
        self._consumed = False

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        stack = _tape_stack()
        assert stack and stack[-1] is self, "tape stack corrupted"
        stack.pop()
        return False

    def __len__(self):
        return len(self._nodes)

    def _record(self, node):
        self._nodes.append(node)

    def backward(self, loss):
        """Seed ``loss`` with gradient one and propagate in reverse order."""
        if self._consumed:
            raise RuntimeError(
                "tape already consumed by backward; re-record before calling again"
            )
        self._consumed = True
        if not isinstance(loss, Tensor):
            raise TypeError("backward expects a Tensor loss")
        if loss.size != 1:
            raise ValueError(f"backward requires a scalar loss, got shape {loss.shape}")
        loss.grad = np.ones_like(loss.data)
        for node in reversed(self._nodes):
            g_out = node.output.grad
            if g_out is None:
                continue
            grads = node.backward_fn(g_out)
            for inp, g in zip(node.inputs, grads):
                if g is None or not inp.requires_grad:
                    continue
                if debug_nan_enabled() and not np.all(np.isfinite(g)):
                    raise FloatingPointError(
                        f"non-finite gradient produced by op '{node.name}'"
                    )
                inp.accumulate_grad(g)


def record_op(name, out_data, inputs, backward_fn):
    """Wrap an op result in a Tensor and register it on the active tape.

    ``backward_fn(grad_out) -> tuple of per-input gradients (or None)``.
    Recording happens only when a tape is active and some input needs grad.
    """
    if debug_nan_enabled() and not np.all(np.isfinite(out_data)):
        raise FloatingPointError(f"non-finite values in output of op '{name}'")
    out = Tensor(out_data)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape._record(_Node(name, tuple(inputs), out, backward_fn))
    return out


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)
