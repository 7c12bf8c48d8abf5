"""Dynamically recorded reverse-mode tape.

A :class:`Tape` owns the computation graph of one batch.  Leaves are created
with :meth:`Tape.watch`; every differentiable op whose inputs live on a tape
appends a record holding the output tensor, its parents and a backward
closure.  :meth:`Tape.backward` walks the records in reverse order and then
drops them, so a tape is single-use per forward pass.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    """An ndarray plus an optional gradient buffer and a link to its tape."""

    __slots__ = ("data", "grad", "tape", "requires_grad")

    def __init__(self, data, tape: "Tape | None" = None, requires_grad: bool = False):
        self.data = np.asarray(data)
        self.grad: np.ndarray | None = None
        self.tape = tape
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, grad={'yes' if self.requires_grad else 'no'})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    def __init__(self):
        self._records: list[tuple[Tensor, tuple[Tensor, ...], BackwardFn]] = []
        self._used = False

    def watch(self, array) -> Tensor:
        """Register ``array`` as a differentiable leaf on this tape."""
        return Tensor(np.asarray(array), tape=self, requires_grad=True)

    def record(self, out: np.ndarray, parents: Sequence[Tensor], backward: BackwardFn) -> Tensor:
        t = Tensor(out, tape=self, requires_grad=True)
        self._records.append((t, tuple(parents), backward))
        return t

    def __len__(self) -> int:
        return len(self._records)

    def backward(self, loss: Tensor) -> None:
        if self._used:
            raise RuntimeError("tape already consumed by a previous backward pass")
        if loss.tape is not self:
            raise ValueError("loss was not recorded on this tape")
        if loss.data.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        self._used = True
        loss.grad = np.ones_like(loss.data)
        for out, parents, fn in reversed(self._records):
            if out.grad is None:
                continue
            grads = fn(out.grad)
            for p, g in zip(parents, grads):
                if g is None or not p.requires_grad:
                    continue
                if g.shape != p.data.shape:
                    raise AssertionError(f"backward produced {g.shape} for parent {p.data.shape}")
                p.grad = g if p.grad is None else p.grad + g
            # intermediate buffers are not needed once propagated
            if out is not loss:
                out.grad = None
        self._records.clear()


def tape_of(*xs) -> Tape | None:
    for x in xs:
        if isinstance(x, Tensor) and x.tape is not None and x.requires_grad:
            return x.tape
    return None
