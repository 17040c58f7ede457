"""Dense tensors, trainable parameters, and the reverse-mode gradient tape.

Every value the network touches is a `Tensor`: a thin shell around a row-major
numpy float array. Differentiable operators (see `hslinet.ops`) record a
backward rule on the currently active `Tape`; `Tape.backward` replays the
rules in exact reverse order of recording and deposits gradients into every
`Parameter` that took part in the forward pass.

Finiteness is a hard contract: any NaN or Inf entering a tensor raises
`NumericalError` at construction time instead of propagating silently.
float64 is used for gradient-check work, float32 for training.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

__all__ = ["NumericalError", "Tensor", "Parameter", "Tape", "backward", "zero_grads"]

_FLOAT_DTYPES = (np.float32, np.float64)


class NumericalError(ArithmeticError):
    """A non-finite value (NaN/Inf) appeared where the contract forbids it."""


def _check_finite(arr: np.ndarray, what: str) -> None:
    if not np.isfinite(arr).all():
        raise NumericalError(f"non-finite values in {what}")


class Tensor:
    """Dense N-dimensional array of real scalars.

    `data` is a numpy array of dtype float32 or float64, row-major. All
    entries are finite and all dimensions are positive (scalars with shape
    `()` are allowed). `grad` is a transient accumulation slot used only
    while a tape is being replayed; parameters keep their persistent
    gradient on the `Parameter` object instead.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, dtype=None, requires_grad: bool = False):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        if arr.size == 0:
            raise ValueError(f"tensor dimensions must be positive, got shape {arr.shape}")
        _check_finite(arr, "tensor data")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name})"


class Parameter:
    """A learnable tensor plus its gradient and Adam moment slots.

    `grad`, `m`, and `v` always share `value`'s shape and dtype. `grad`
    accumulates across backward passes until `zero_grad` (or an optimizer
    step) resets it to exact zeros.
    """

    __slots__ = ("name", "value", "grad", "m", "v", "_seen_backward")

    def __init__(self, value, name: str = "", dtype=None):
        v = value if isinstance(value, Tensor) else Tensor(value, dtype=dtype)
        v.requires_grad = True
        self.name = name
        self.value = v
        self.grad = Tensor(np.zeros_like(v.data))
        self.m = Tensor(np.zeros_like(v.data))
        self.v = Tensor(np.zeros_like(v.data))
        self._seen_backward = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def zero_grad(self) -> None:
        self.grad.data[...] = 0

    def __repr__(self) -> str:
        return f"Parameter({self.name or '<anon>'}, shape={self.shape})"


def zero_grads(params) -> None:
    """Reset every parameter's gradient to exact zeros."""
    for p in params:
        p.zero_grad()


class Tape:
    """Ordered record of the differentiable operations of one forward pass.

    Use as a context manager around the forward computation; `backward`
    replays the recorded rules in exact reverse order. A tape is consumed
    by its first `backward` call, and a second call raises.

        with Tape() as tape:
            logits = model_forward(sample, model, training=True)
            loss = softmax_cross_entropy(logits, labels)
        tape.backward(loss)

    Nested tapes are allowed; operators record onto the innermost one.
    When no tape is active, operators run forward-only (inference mode).
    """

    _stack: list["Tape"] = []

    def __init__(self):
        self._records: list[tuple[Tensor, Callable[[np.ndarray], None]]] = []
        self._params: list[Parameter] = []
        self._param_ids: set[int] = set()
        self._out_ids: set[int] = set()
        self._consumed = False

    def __enter__(self) -> "Tape":
        Tape._stack.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> bool:
        Tape._stack.pop()
        return False

    @staticmethod
    def active() -> "Tape | None":
        return Tape._stack[-1] if Tape._stack else None

    def record(self, out: Tensor, rule: Callable[[np.ndarray], None]) -> None:
        """Append one operation's backward rule; `out` is its output tensor."""
        self._records.append((out, rule))
        self._out_ids.add(id(out))

    def register(self, param: Parameter) -> None:
        if id(param) not in self._param_ids:
            self._param_ids.add(id(param))
            self._params.append(param)

    def __len__(self) -> int:
        return len(self._records)

    @property
    def parameters(self) -> list[Parameter]:
        """Parameters that participated in the recorded forward pass."""
        return list(self._params)

    def backward(self, loss: Tensor) -> None:
        """Propagate d(loss)/d(·) into every participating Parameter's grad.

        `loss` must be a scalar produced by an operation recorded on this
        tape. The tape is consumed afterwards; transient gradient slots on
        intermediate tensors are cleared.
        """
        if self._consumed:
            raise ValueError("tape already consumed by a previous backward call")
        if not self._records:
            raise ValueError("backward on an empty tape")
        if loss.data.size != 1:
            raise ValueError(f"loss must be scalar, got shape {loss.shape}")
        if id(loss) not in self._out_ids:
            raise ValueError("loss was not produced by an operation recorded on this tape")
        self._consumed = True
        loss.grad = np.ones_like(loss.data)
        try:
            for out, rule in reversed(self._records):
                g = out.grad
                if g is None:
                    continue
                rule(g)
            for p in self._params:
                g = p.value.grad
                if g is not None:
                    _check_finite(g, f"gradient of {p.name or 'parameter'}")
                    p.grad.data += g
                p._seen_backward = True
        finally:
            loss.grad = None
            for out, _ in self._records:
                out.grad = None
            for p in self._params:
                p.value.grad = None


def backward(tape: Tape, loss: Tensor) -> None:
    """Functional form of `Tape.backward`."""
    tape.backward(loss)
