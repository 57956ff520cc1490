"""Scalar invertible transforms: affine and non-linear squared (NLSq).

All routines are elementwise over torch tensors, so a "scalar" transform is
applied to whole batches at once. The NLSq map is

    f(x) = a + b*x + c / (1 + (d*x + g)**2)

with b, d > 0 and |c| < (8*sqrt(3)/9) * b / d, which keeps f' > 0 everywhere.

Direction convention. The closed form above is cheap, so it runs on the path
that is evaluated many times per training step (density evaluation,
z -> eps). The cubic solve backs the sampling path (eps -> z). Affine
transforms are closed-form both ways and are written in the sampling
direction, z = a + b*eps.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch

from .numcore import ContractError, NumericError, Tensor, as_tensor

ALPHA = 0.95
EXP_CLAMP = 7.0
# minimum slope is b - SLOPE_FACTOR*|c|*d
SLOPE_FACTOR = 9.0 / (8.0 * math.sqrt(3.0))
C_BOUND = 8.0 * math.sqrt(3.0) / 9.0


class InvariantViolation(ArithmeticError):
    """The cubic inverse found three real roots: the NLSq parameters are corrupt."""


@dataclass
class AffineParams:
    a: Tensor
    b: Tensor


@dataclass
class NLSqParams:
    a: Tensor
    b: Tensor
    c: Tensor
    d: Tensor
    g: Tensor
    alpha: float = ALPHA

    def min_slope(self) -> Tensor:
        return self.b - SLOPE_FACTOR * self.c.abs() * self.d


def affine_constrain(a_raw, b_raw) -> AffineParams:
    a_raw, b_raw = as_tensor(a_raw), as_tensor(b_raw)
    return AffineParams(a_raw, torch.exp(b_raw.clamp(-EXP_CLAMP, EXP_CLAMP)))


def affine_forward(eps, p: AffineParams) -> tuple[Tensor, Tensor]:
    """z = a + b*eps and log dz/deps."""
    eps = as_tensor(eps)
    z = p.a + p.b * eps
    return z, torch.log(p.b) + torch.zeros_like(z)


def affine_inverse(z, p: AffineParams) -> Tensor:
    return (as_tensor(z) - p.a) / p.b


def nlsq_constrain(
    a_raw, b_raw, c_raw, d_raw, g_raw, alpha: float = ALPHA, check: bool = True
) -> NLSqParams:
    raws = [as_tensor(r) for r in (a_raw, b_raw, c_raw, d_raw, g_raw)]
    for name, r in zip("abcdg", raws if check else ()):
        if not bool(torch.isfinite(r).all()):
            raise NumericError("non-finite raw NLSq parameter", node=f"{name}_raw")
    if not 0.0 < alpha < 1.0:
        raise ContractError(f"alpha must lie in (0, 1), got {alpha}")
    a, b_raw, c_raw, d_raw, g = raws
    b = torch.exp(b_raw.clamp(-EXP_CLAMP, EXP_CLAMP))
    d = torch.exp(d_raw.clamp(-EXP_CLAMP, EXP_CLAMP))
    c = (C_BOUND / d) * b * alpha * torch.tanh(c_raw)
    return NLSqParams(a, b, c, d, g, alpha)


def nlsq_forward(eps, p: NLSqParams) -> tuple[Tensor, Tensor]:
    """Closed-form NLSq map and log of its (always positive) slope."""
    eps = as_tensor(eps)
    u = p.d * eps + p.g
    q = 1.0 + u * u
    z = p.a + p.b * eps + p.c / q
    slope = p.b - 2.0 * p.c * p.d * u / (q * q)
    return z, torch.log(slope)


def _cbrt(x: Tensor) -> Tensor:
    return torch.sign(x) * x.abs().pow(1.0 / 3.0)


def solve_cubic_real(A: Tensor, B: Tensor, C: Tensor) -> tuple[Tensor, Tensor]:
    """Real root of the monic cubic u^3 + A u^2 + B u + C.

    Returns ``(root, disc)`` where ``disc = q^2/4 + p^3/27`` of the depressed
    cubic. For ``disc >= 0`` the single real root comes from Cardano's formula
    in a cancellation-free form; for ``disc < 0`` (three real roots) the
    trigonometric method returns the largest root.
    """
    shift = A / 3.0
    p = B - A * A / 3.0
    q = 2.0 * A**3 / 27.0 - A * B / 3.0 + C
    disc = q * q / 4.0 + p**3 / 27.0

    one = disc >= 0
    sq = torch.sqrt(disc.clamp(min=0.0))
    sgn = torch.where(q >= 0, torch.ones_like(q), -torch.ones_like(q))
    w = -(q / 2.0 + sgn * sq)
    s = _cbrt(w)
    safe_s = torch.where(s == 0, torch.ones_like(s), s)
    t_cardano = torch.where(s == 0, torch.zeros_like(s), s - p / (3.0 * safe_s))

    m = torch.sqrt((-p / 3.0).clamp(min=0.0))
    safe_m = torch.where(m == 0, torch.ones_like(m), m)
    arg = (-q / (2.0 * safe_m**3)).clamp(-1.0, 1.0)
    t_trig = 2.0 * m * torch.cos(torch.arccos(arg) / 3.0)

    return torch.where(one, t_cardano, t_trig) - shift, disc


def nlsq_inverse(z, p: NLSqParams, newton_steps: int = 1) -> Tensor:
    """Solve f(eps) = z for the NLSq map.

    Substituting u = d*eps + g turns the cubic in eps into the well-scaled
    b*u^3 - k*u^2 + b*u + (c*d - k) = 0 with k = d*(z - a) + b*g, which has
    the same unique real root (mapped back by eps = (u - g)/d). The closed-form
    root is computed without gradient; a final Newton step is differentiable,
    so gradients match implicit differentiation at the root.
    """
    z = as_tensor(z)
    with torch.no_grad():
        zd, a, b, c, d, g = (t.detach() for t in torch.broadcast_tensors(z, p.a, p.b, p.c, p.d, p.g))
        k = d * (zd - a) + b * g
        u, disc = solve_cubic_real(-k / b, torch.ones_like(b), (c * d - k) / b)
        scale = (k / b) ** 2 + 1.0
        if bool((disc < -1e-12 * scale**3).any()):
            raise InvariantViolation("NLSq cubic has three real roots; parameters violate the slope bound")
        eps = (u - g) / d
        for _ in range(max(newton_steps - 1, 0)):
            fz, ld = nlsq_forward(eps, NLSqParams(a, b, c, d, g))
            eps = eps - (fz - zd) / torch.exp(ld)
    fz, ld = nlsq_forward(eps, p)
    return eps - (fz - z) / torch.exp(ld)


def nlsq_cubic_coefficients(z, p: NLSqParams) -> tuple[Tensor, Tensor, Tensor, Tensor]:
    """Coefficients (cubic, quadratic, linear, constant) of the eps-cubic whose root inverts f."""
    r = as_tensor(z) - p.a
    return (
        -p.b * p.d**2,
        r * p.d**2 - 2.0 * p.d * p.g * p.b,
        2.0 * p.d * p.g * r - p.b * (p.g**2 + 1.0),
        r * (p.g**2 + 1.0) - p.c,
    )


# --- layer-facing transforms: raw conditioner outputs -> both directions ---


class ScalarTransform:
    """A scalar transform driven by ``n_params`` unconstrained raws per dimension.

    ``sample`` maps eps -> z, ``density`` maps z -> eps; both return
    log|dz/deps| per element. Raw tensors carry the parameter index last.
    """

    name = ""
    n_params = 0

    def sample(self, eps: Tensor, raw: Tensor) -> tuple[Tensor, Tensor]:
        raise NotImplementedError

    def density(self, z: Tensor, raw: Tensor) -> tuple[Tensor, Tensor]:
        raise NotImplementedError


class Affine(ScalarTransform):
    name = "affine"
    n_params = 2

    def params(self, raw: Tensor) -> AffineParams:
        return affine_constrain(raw[..., 0], raw[..., 1])

    def sample(self, eps, raw):
        p = self.params(raw)
        return p.a + p.b * eps, torch.log(p.b)

    def density(self, z, raw):
        p = self.params(raw)
        return (z - p.a) / p.b, torch.log(p.b)


class NLSq(ScalarTransform):
    name = "nlsq"
    n_params = 5

    def __init__(self, alpha: float = ALPHA):
        self.alpha = alpha

    def params(self, raw: Tensor) -> NLSqParams:
        return nlsq_constrain(*raw.unbind(-1), alpha=self.alpha, check=False)

    def density(self, z, raw):
        eps, log_slope = nlsq_forward(z, self.params(raw))
        return eps, -log_slope

    def sample(self, eps, raw):
        p = self.params(raw)
        z = nlsq_inverse(eps, p)
        _, log_slope = nlsq_forward(z, p)
        return z, -log_slope


def make_transform(kind: str) -> ScalarTransform:
    if kind == "affine":
        return Affine()
    if kind == "nlsq":
        return NLSq()
    raise ContractError(f"unknown scalar transform {kind!r}")


def direction_convention(direction: str, transform: str = "nlsq") -> dict[str, object]:
    """Which scalar routine backs a given direction of a flow layer.

    ``direction`` is ``"density"`` (z -> eps, the AF training path) or
    ``"sampling"`` (eps -> z, the generation path).
    """
    if direction not in ("density", "sampling"):
        raise ContractError(f"unknown flow direction {direction!r}")
    if transform == "affine":
        routine = "affine_inverse" if direction == "density" else "affine_forward"
        return {"routine": routine, "cubic": False, "closed_form": True}
    if transform == "nlsq":
        if direction == "density":
            return {"routine": "nlsq_forward", "cubic": False, "closed_form": True}
        return {"routine": "nlsq_inverse", "cubic": True, "closed_form": False}
    raise ContractError(f"unknown scalar transform {transform!r}")
