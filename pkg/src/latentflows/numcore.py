"""Numeric substrate: float64 tensors, a parameter tape, seeded RNG, gradient checks.

Tensors are plain ``torch.Tensor`` objects in double precision. The :class:`Tape`
records which tensors are parameters so that gradients can be requested by name,
and :func:`grad_check` compares tape gradients with central finite differences.
"""

from __future__ import annotations

import math
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

DTYPE = torch.float64
torch.set_default_dtype(DTYPE)

Tensor = torch.Tensor


class ContractError(ValueError):
    """A caller broke an operation's precondition."""


class NumericError(ArithmeticError):
    """A non-finite value or singular quantity showed up where it must not."""

    def __init__(self, message: str, node: str | None = None):
        super().__init__(message if node is None else f"{message} (node {node!r})")
        self.node = node


def as_tensor(x, dtype=DTYPE) -> Tensor:
    return torch.as_tensor(x, dtype=dtype)


def check_finite(x: Tensor, what: str = "tensor") -> Tensor:
    if not bool(torch.isfinite(x).all()):
        raise NumericError(f"non-finite value in {what}", node=what)
    return x


class Rng:
    """Seeded generator; identical seed and call sequence give identical samples."""

    def __init__(self, seed: int = 0):
        self.seed = int(seed)
        self.generator = torch.Generator().manual_seed(self.seed)

    def spawn(self, index: int) -> "Rng":
        return Rng(self.seed + int(index))

    def reseed(self) -> None:
        self.generator.manual_seed(self.seed)

    def randint(self, high: int, size: Sequence[int] = ()) -> Tensor:
        return torch.randint(high, tuple(size), generator=self.generator)

    def uniform(self, shape: Sequence[int] = ()) -> Tensor:
        return torch.rand(tuple(shape), generator=self.generator, dtype=DTYPE)

    def permutation(self, n: int) -> list[int]:
        return torch.randperm(n, generator=self.generator).tolist()

    def categorical(self, probs: Tensor, n: int = 1) -> Tensor:
        return torch.multinomial(probs, n, replacement=True, generator=self.generator)


def gaussian_sample(rng: Rng, shape: Sequence[int] = ()) -> Tensor:
    """I.i.d. standard normal draws of ``shape`` (``()`` gives a scalar)."""
    return torch.randn(tuple(shape), generator=rng.generator, dtype=DTYPE)


class Tape:
    """Explicit parameter registry over torch autograd.

    Parameters are registered by name; :meth:`backward` returns the adjoint of
    every registered parameter, zero for those the loss does not touch.
    """

    def __init__(self):
        self.params: dict[str, Tensor] = {}
        self._used = False

    def register(self, name: str, value) -> Tensor:
        if name in self.params:
            raise ContractError(f"parameter {name!r} registered twice")
        t = as_tensor(value).clone().detach().requires_grad_(True)
        self.params[name] = t
        return t

    def register_module(self, module: nn.Module, prefix: str = "") -> None:
        for name, p in module.named_parameters():
            self.params[prefix + name] = p

    def reset(self) -> None:
        for p in self.params.values():
            p.grad = None
        self._used = False

    def backward(self, loss: Tensor) -> dict[str, Tensor]:
        if self._used:
            raise ContractError("tape already consumed; call reset() first")
        if loss.dim() != 0:
            raise ContractError(f"loss must be a scalar, got shape {tuple(loss.shape)}")
        if not bool(torch.isfinite(loss)):
            raise NumericError("non-finite loss", node="loss")
        names = list(self.params)
        leaves = [self.params[n] for n in names]
        grads = torch.autograd.grad(loss, leaves, allow_unused=True)
        self._used = True
        out = {}
        for name, leaf, g in zip(names, leaves, grads):
            g = torch.zeros_like(leaf) if g is None else g.detach()
            if not bool(torch.isfinite(g).all()):
                raise NumericError("non-finite adjoint during backward", node=name)
            out[name] = g
        return out


def backward(tape: Tape, loss: Tensor) -> dict[str, Tensor]:
    return tape.backward(loss)


@dataclass
class CheckReport:
    max_abs_err: float
    max_rel_err: float
    location: tuple | int | None
    passed: bool
    tolerance: float = 0.0
    errors: list[float] = field(default_factory=list)

    def __bool__(self) -> bool:
        return self.passed


def relative_error(a, b, floor: float = 1e-8):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def grad_check(
    fn: Callable[[Tensor], Tensor],
    params,
    rel_tol: float = 1e-4,
    h: float = 1e-5,
    grad_fn: Callable[[Tensor], Tensor] | None = None,
    floor: float = 1e-8,
) -> CheckReport:
    """Compare the tape gradient of scalar ``fn`` at ``params`` with central differences.

    ``grad_fn`` overrides the analytic gradient (used to inject faults in tests).
    """
    x0 = as_tensor(params).detach().clone()
    if grad_fn is None:
        x = x0.clone().requires_grad_(True)
        val = fn(x)
        if not bool(torch.isfinite(val)):
            raise NumericError("function returned a non-finite value")
        (analytic,) = torch.autograd.grad(val, x, allow_unused=True)
        analytic = torch.zeros_like(x0) if analytic is None else analytic
    else:
        analytic = grad_fn(x0.clone())
    analytic = analytic.detach().reshape(-1).numpy()

    flat = x0.reshape(-1)
    numeric = np.empty(flat.numel())
    with torch.no_grad():
        for i in range(flat.numel()):
            xp = flat.clone()
            xm = flat.clone()
            xp[i] += h
            xm[i] -= h
            fp = float(fn(xp.reshape(x0.shape)))
            fm = float(fn(xm.reshape(x0.shape)))
            if not (math.isfinite(fp) and math.isfinite(fm)):
                raise NumericError(f"function non-finite at perturbed coordinate {i}")
            numeric[i] = (fp - fm) / (2 * h)

    rel = relative_error(analytic, numeric, floor)
    absd = np.abs(analytic - numeric)
    worst = int(np.argmax(rel)) if rel.size else None
    max_rel = float(rel.max()) if rel.size else 0.0
    return CheckReport(
        max_abs_err=float(absd.max()) if absd.size else 0.0,
        max_rel_err=max_rel,
        location=worst,
        passed=max_rel <= rel_tol,
        tolerance=rel_tol,
        errors=rel.tolist(),
    )


def flat_parameters(module: nn.Module) -> Tensor:
    return torch.cat([p.detach().reshape(-1) for p in module.parameters()])


def module_function(module: nn.Module, closure: Callable[[nn.Module], Tensor]):
    """Turn ``closure(module)`` into a function of the module's flattened parameters.

    Useful with :func:`grad_check`: the module is evaluated functionally, its own
    parameters are left untouched.
    """
    wrapper = _Closure(module, closure)
    named = [(n, p.shape, p.numel()) for n, p in module.named_parameters()]

    def fn(theta: Tensor) -> Tensor:
        chunks = torch.split(theta, [size for _, _, size in named])
        params = {"inner." + n: c.reshape(shape) for (n, shape, _), c in zip(named, chunks)}
        return torch.func.functional_call(wrapper, params, ())

    return fn


class _Closure(nn.Module):
    def __init__(self, inner: nn.Module, closure):
        super().__init__()
        self.inner = inner
        self.closure = closure

    def forward(self):
        return self.closure(self.inner)


@torch.no_grad()
def perturb_parameters(module: nn.Module, rng: Rng, scale: float = 0.3) -> nn.Module:
    """Add N(0, scale^2) noise to every parameter, breaking identity initialisation."""
    for p in module.parameters():
        p.add_(scale * gaussian_sample(rng, p.shape))
    return module
