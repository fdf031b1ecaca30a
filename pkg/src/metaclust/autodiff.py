"""Reverse-mode gradients over dense float64 matrices.

torch's autograd records the tape; this module fixes the primitive set the
models use, checks every primitive output for non-finite values, and adds
the one second-order quantity training needs (`meta_grad`).
"""
from __future__ import annotations

from collections import OrderedDict
from typing import Callable, Iterator, Mapping

import numpy as np
import torch

DTYPE = torch.float64


class NonFiniteError(FloatingPointError):
    """A primitive produced NaN or inf."""


def _checked(name: str, out: torch.Tensor) -> torch.Tensor:
    if not torch.isfinite(out).all():
        raise NonFiniteError(f"non-finite value produced by primitive '{name}'")
    return out


# ------------------------------------------------------------------ primitives


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return _checked("matmul", a @ b)


def spmm(sparse: torch.Tensor, dense: torch.Tensor) -> torch.Tensor:
    """Constant sparse matrix times dense matrix; differentiable in ``dense`` only."""
    return _checked("spmm", torch.sparse.mm(sparse, dense))


def add(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return _checked("add", a + b)


def mul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return _checked("mul", a * b)


def selu(x: torch.Tensor) -> torch.Tensor:
    return _checked("selu", torch.nn.functional.selu(x))


def relu(x: torch.Tensor) -> torch.Tensor:
    return _checked("relu", torch.relu(x))


def sigmoid(x: torch.Tensor) -> torch.Tensor:
    return _checked("sigmoid", torch.sigmoid(x))


def row_softmax(x: torch.Tensor) -> torch.Tensor:
    return _checked("row_softmax", torch.softmax(x, dim=-1))


def total(x: torch.Tensor) -> torch.Tensor:
    return _checked("sum", x.sum())


def gather_rows(x: torch.Tensor, rows) -> torch.Tensor:
    return x[torch.as_tensor(rows, dtype=torch.long)]


def frobenius(x: torch.Tensor) -> torch.Tensor:
    return _checked("frobenius", torch.linalg.vector_norm(x))


# ------------------------------------------------------------------ parameters


class ParamSet(Mapping[str, torch.Tensor]):
    """Ordered, named float64 tensors with a stable flattening order."""

    def __init__(self, tensors: Mapping[str, torch.Tensor] | None = None):
        self._t: OrderedDict[str, torch.Tensor] = OrderedDict()
        for k, v in (tensors or {}).items():
            self._t[k] = torch.as_tensor(v, dtype=DTYPE)

    def __getitem__(self, key: str) -> torch.Tensor:
        return self._t[key]

    def __iter__(self) -> Iterator[str]:
        return iter(self._t)

    def __len__(self) -> int:
        return len(self._t)

    def __repr__(self) -> str:
        shapes = ", ".join(f"{k}={tuple(v.shape)}" for k, v in self._t.items())
        return f"ParamSet({shapes})"

    @property
    def size(self) -> int:
        return sum(v.numel() for v in self._t.values())

    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {k: tuple(v.shape) for k, v in self._t.items()}

    def flatten(self) -> np.ndarray:
        if not self._t:
            return np.zeros(0)
        return torch.cat([v.detach().reshape(-1) for v in self._t.values()]).numpy().copy()

    def unflatten(self, vec) -> "ParamSet":
        """New ParamSet with this set's names and shapes, filled from ``vec``."""
        vec = torch.as_tensor(np.asarray(vec, dtype=np.float64))
        if vec.numel() != self.size:
            raise ValueError(f"expected {self.size} values, got {vec.numel()}")
        out, pos = OrderedDict(), 0
        for k, v in self._t.items():
            out[k] = vec[pos : pos + v.numel()].reshape(v.shape).clone()
            pos += v.numel()
        return ParamSet(out)

    def detached(self) -> "ParamSet":
        return ParamSet({k: v.detach().clone() for k, v in self._t.items()})

    def leaves(self) -> "ParamSet":
        """Detached copies that require grad, for building a fresh tape."""
        return ParamSet({k: v.detach().clone().requires_grad_(True) for k, v in self._t.items()})

    def map(self, fn: Callable[[torch.Tensor], torch.Tensor]) -> "ParamSet":
        return ParamSet({k: fn(v) for k, v in self._t.items()})

    def zip_map(self, other: "ParamSet", fn) -> "ParamSet":
        return ParamSet({k: fn(v, other[k]) for k, v in self._t.items()})

    def all_finite(self) -> bool:
        return all(bool(torch.isfinite(v).all()) for v in self._t.values())

    def to_json(self) -> dict:
        return {k: {"shape": list(v.shape), "values": v.detach().reshape(-1).tolist()} for k, v in self._t.items()}

    @classmethod
    def from_json(cls, obj: dict) -> "ParamSet":
        return cls({k: torch.tensor(d["values"], dtype=DTYPE).reshape(d["shape"]) for k, d in obj.items()})


# ------------------------------------------------------------------- gradients


def _grads(out: torch.Tensor, params: ParamSet, create_graph: bool = False) -> ParamSet:
    tensors = list(params.values())
    if not out.requires_grad:
        return params.map(lambda v: torch.zeros_like(v))
    gs = torch.autograd.grad(out, tensors, create_graph=create_graph, allow_unused=True)
    return ParamSet(
        {k: (torch.zeros_like(v) if g is None else g) for (k, v), g in zip(params.items(), gs)}
    )


def _name_backward_failure(scalar_fn, params: ParamSet) -> str:
    leaves = params.leaves()
    try:
        with torch.autograd.detect_anomaly(check_nan=True):
            out = scalar_fn(leaves)
            torch.autograd.grad(out, list(leaves.values()), allow_unused=True)
    except RuntimeError as exc:
        return str(exc).splitlines()[0]
    return "unknown primitive"


def grad(scalar_fn: Callable[[ParamSet], torch.Tensor], params: ParamSet) -> ParamSet:
    """Exact gradient of ``scalar_fn`` at ``params``."""
    leaves = params.leaves()
    out = scalar_fn(leaves)
    if out.numel() != 1:
        raise ValueError("scalar_fn must return a scalar")
    g = _grads(out, leaves).detached()
    if not g.all_finite():
        raise NonFiniteError(f"non-finite gradient: {_name_backward_failure(scalar_fn, params)}")
    return g


def value_and_grad(scalar_fn, params: ParamSet) -> tuple[float, ParamSet]:
    leaves = params.leaves()
    out = scalar_fn(leaves)
    g = _grads(out, leaves).detached()
    if not g.all_finite():
        raise NonFiniteError(f"non-finite gradient: {_name_backward_failure(scalar_fn, params)}")
    return float(out.detach()), g


def inner_step(inner_loss_fn, w: ParamSet, theta: ParamSet, eta: float) -> ParamSet:
    """One differentiable SGD step ``w - eta * grad_w inner(w, theta)``.

    ``w`` and ``theta`` must already be tape leaves; the result stays on the
    tape so later losses can be differentiated back into ``theta``.
    """
    inner = inner_loss_fn(w, theta)
    gw = _grads(inner, w, create_graph=True)
    return ParamSet({k: w[k] - eta * gw[k] for k in w})


def meta_grad(
    inner_loss_fn: Callable[[ParamSet, ParamSet], torch.Tensor],
    outer_loss_fn: Callable[[ParamSet], torch.Tensor],
    w: ParamSet,
    theta: ParamSet,
    eta: float,
) -> ParamSet:
    """Gradient over theta of ``outer(w - eta * grad_w inner(w, theta))``.

    Differentiates through the inner step (double backprop).
    """
    if eta < 0:
        raise ValueError("eta must be non-negative")
    w_l, th_l = w.leaves(), theta.leaves()
    w_new = inner_step(inner_loss_fn, w_l, th_l, eta)
    outer = outer_loss_fn(w_new)
    g = _grads(outer, th_l).detached()
    if not g.all_finite():
        raise NonFiniteError("non-finite meta-gradient")
    return g


# ---------------------------------------------------------------------- oracle


def central_differences(fn: Callable[[np.ndarray], float], x: np.ndarray, epsilon: float) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    for k in range(x.size):
        step = np.zeros_like(x)
        step[k] = epsilon
        out[k] = (fn(x + step) - fn(x - step)) / (2 * epsilon)
    return out


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-6) -> float:
    a, b = np.asarray(a), np.asarray(b)
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom))


def finite_diff_check(scalar_fn, params: ParamSet, epsilon: float = 1e-4, floor: float = 1e-6) -> float:
    """Worst per-coordinate relative error between `grad` and central differences."""
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    analytic = grad(scalar_fn, params).flatten()

    def f(vec):
        with torch.no_grad():
            return float(scalar_fn(params.unflatten(vec)))

    numeric = central_differences(f, params.flatten(), epsilon)
    return relative_error(analytic, numeric, floor)


def meta_finite_diff_check(
    inner_loss_fn, outer_loss_fn, w: ParamSet, theta: ParamSet, eta: float,
    epsilon: float = 1e-4, floor: float = 1e-6,
) -> float:
    """Compare `meta_grad` against central differences over theta.

    Each perturbed evaluation takes the inner step with a first-order
    gradient, so the oracle never uses a second-order tape.
    """
    analytic = meta_grad(inner_loss_fn, outer_loss_fn, w, theta, eta).flatten()

    def f(vec):
        th = theta.unflatten(vec)
        gw = grad(lambda ww: inner_loss_fn(ww, th), w)
        w_new = w.zip_map(gw, lambda a, b: a - eta * b)
        with torch.no_grad():
            return float(outer_loss_fn(w_new))

    numeric = central_differences(f, theta.flatten(), epsilon)
    return relative_error(analytic, numeric, floor)
