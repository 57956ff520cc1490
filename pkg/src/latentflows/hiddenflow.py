"""Invertible transforms over a single H-dimensional latent vector.

AF layers use a MADE-style masked conditioner so that the parameters of
dimension d only see dimensions earlier in the layer's ordering; density
evaluation is one parallel pass, sampling is H serial passes. SCF layers keep
a subset S of dimensions fixed and transform the rest conditioned on S, and
are built as AF layers whose masks only expose S, which makes both directions
a single pass. A context vector (time conditioner output) is fed to every
hidden unit without masking.

All layers return log|det dz/deps| regardless of direction.
"""

from __future__ import annotations

import math
from collections.abc import Sequence

import torch
import torch.nn.functional as F
from torch import nn

from .numcore import ContractError, Tensor
from .scalarflow import ScalarTransform, make_transform


class MaskedLinear(nn.Linear):
    def __init__(self, in_features: int, out_features: int, mask: Tensor):
        super().__init__(in_features, out_features)
        self.register_buffer("mask", mask.to(self.weight.dtype))

    def forward(self, x: Tensor) -> Tensor:
        return F.linear(x, self.weight * self.mask, self.bias)


class MaskedConditioner(nn.Module):
    """MADE network from (x, context) to ``n_params`` raws per dimension.

    ``in_degrees[e]`` and ``out_degrees[d]`` are positive integers; the raws of
    dimension d may depend on x[e] only when ``in_degrees[e] < out_degrees[d]``.
    Hidden units get degrees 0..K-1 (K = max out degree); degree-0 units see
    only the context, so every output can see the context.
    """

    def __init__(
        self,
        in_degrees: Sequence[int],
        out_degrees: Sequence[int],
        n_params: int,
        context_dim: int = 0,
        hidden: int | None = None,
        n_hidden_layers: int = 2,
    ):
        super().__init__()
        H = len(in_degrees)
        hidden = hidden or 4 * H
        self.H = H
        self.n_params = n_params
        self.context_dim = context_dim
        K = max(out_degrees)
        m_in = torch.as_tensor(list(in_degrees))
        m_out = torch.as_tensor(list(out_degrees)).repeat_interleave(n_params)
        m_hidden = torch.arange(hidden) % K

        layers = []
        prev_deg, prev_width = m_in, H
        for i in range(n_hidden_layers):
            if i == 0:
                mask = m_hidden[:, None] >= m_in[None, :]
            else:
                mask = m_hidden[:, None] >= prev_deg[None, :]
            layers.append(MaskedLinear(prev_width, hidden, mask))
            prev_deg, prev_width = m_hidden, hidden
        self.hidden_layers = nn.ModuleList(layers)
        self.context = nn.Linear(context_dim, hidden, bias=False) if context_dim else None
        self.out = MaskedLinear(prev_width, H * n_params, m_out[:, None] > prev_deg[None, :])
        # identity start: all raws zero
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    def forward(self, x: Tensor, context: Tensor | None = None) -> Tensor:
        h = self.hidden_layers[0](x)
        if self.context is not None:
            if context is None:
                raise ContractError("conditioner expects a context vector")
            h = h + self.context(context)
        h = F.relu(h)
        for layer in self.hidden_layers[1:]:
            h = F.relu(layer(h))
        return self.out(h).unflatten(-1, (self.H, self.n_params))


def _transform(transform: str | ScalarTransform) -> ScalarTransform:
    return make_transform(transform) if isinstance(transform, str) else transform


class AFLayer(nn.Module):
    """Autoregressive flow over hidden dimensions.

    ``order`` lists dimensions in the order they are generated; consecutive
    layers in a stack use reversed orders. ``degrees`` overrides the mask
    degrees (in, out), which is how coupling layers are expressed.
    """

    def __init__(
        self,
        H: int,
        context_dim: int = 0,
        transform: str | ScalarTransform = "affine",
        order: Sequence[int] | None = None,
        hidden: int | None = None,
        degrees: tuple[Sequence[int], Sequence[int]] | None = None,
    ):
        super().__init__()
        self.H = H
        self.transform = _transform(transform)
        self.order = list(order) if order is not None else list(range(H))
        if sorted(self.order) != list(range(H)):
            raise ContractError(f"order must be a permutation of 0..{H - 1}")
        if degrees is None:
            rank = [0] * H
            for position, dim in enumerate(self.order):
                rank[dim] = position + 1
            degrees = (rank, rank)
        self.in_degrees, self.out_degrees = list(degrees[0]), list(degrees[1])
        self.conditioner = MaskedConditioner(
            self.in_degrees, self.out_degrees, self.transform.n_params, context_dim, hidden
        )

    def raw_params(self, x: Tensor, context: Tensor | None = None) -> Tensor:
        return self.conditioner(x, context)

    def density(self, z: Tensor, context: Tensor | None = None) -> tuple[Tensor, Tensor]:
        """Parallel inversion z -> eps; parameters come from the observed z."""
        eps, logdet = self.transform.density(z, self.raw_params(z, context))
        return eps, logdet.sum(-1)

    def sample(self, eps: Tensor, context: Tensor | None = None) -> tuple[Tensor, Tensor]:
        """Serial map eps -> z, one dimension per conditioner pass."""
        z = torch.zeros_like(eps)
        logdet = torch.zeros(eps.shape[:-1], dtype=eps.dtype)
        dims = torch.arange(self.H)
        for d in self.order:
            z_new, ld = self.transform.sample(eps, self.raw_params(z, context))
            z = torch.where(dims == d, z_new, z)
            logdet = logdet + ld[..., d]
        return z, logdet


class SCFLayer(AFLayer):
    """Split coupling: dims in ``kept`` pass through, the rest are transformed
    conditioned on the kept values (and the context)."""

    def __init__(
        self,
        H: int,
        context_dim: int = 0,
        transform: str | ScalarTransform = "affine",
        kept: Sequence[int] | None = None,
        hidden: int | None = None,
    ):
        if H < 2:
            raise ContractError("coupling layers need H >= 2")
        kept = list(kept) if kept is not None else list(range(math.ceil(H / 2)))
        if not kept or len(kept) >= H or len(set(kept)) != len(kept):
            raise ContractError(f"invalid kept set {kept} for H={H}")
        deg = [1 if d in kept else 2 for d in range(H)]
        order = kept + [d for d in range(H) if d not in kept]
        super().__init__(H, context_dim, transform, order, hidden, degrees=(deg, deg))
        self.kept = kept
        self.register_buffer("kept_mask", torch.tensor([d in kept for d in range(H)]))

    def density(self, z, context=None):
        eps, ld = self.transform.density(z, self.raw_params(z, context))
        eps = torch.where(self.kept_mask, z, eps)
        return eps, (ld * ~self.kept_mask).sum(-1)

    def sample(self, eps, context=None):
        z, ld = self.transform.sample(eps, self.raw_params(eps, context))
        z = torch.where(self.kept_mask, eps, z)
        return z, (ld * ~self.kept_mask).sum(-1)


class FlowStack(nn.Module):
    """Layers applied in order when sampling, in reverse when evaluating density.

    Layer i uses the natural ordering for even i and the reversed ordering for
    odd i (for SCF: the first ceil(H/2) dims of that ordering are kept).
    """

    def __init__(
        self,
        H: int,
        n_layers: int,
        kind: str = "af",
        transform: str = "affine",
        context_dim: int = 0,
        hidden: int | None = None,
    ):
        super().__init__()
        if kind not in ("af", "scf"):
            raise ContractError(f"unknown hidden flow kind {kind!r}")
        self.H = H
        self.kind = kind
        layers = []
        for i in range(n_layers):
            order = list(range(H)) if i % 2 == 0 else list(range(H))[::-1]
            if kind == "af":
                layers.append(AFLayer(H, context_dim, transform, order, hidden))
            else:
                kept = order[: math.ceil(H / 2)]
                layers.append(SCFLayer(H, context_dim, transform, kept, hidden))
        self.layers = nn.ModuleList(layers)

    def sample(self, eps: Tensor, context: Tensor | None = None) -> tuple[Tensor, Tensor]:
        total = torch.zeros(eps.shape[:-1], dtype=eps.dtype)
        x = eps
        for layer in self.layers:
            x, ld = layer.sample(x, context)
            total = total + ld
        return x, total

    def density(self, z: Tensor, context: Tensor | None = None) -> tuple[Tensor, Tensor]:
        total = torch.zeros(z.shape[:-1], dtype=z.dtype)
        x = z
        for layer in reversed(self.layers):
            x, ld = layer.density(x, context)
            total = total + ld
        return x, total


def af_hidden_density(layer: AFLayer, z: Tensor, context: Tensor | None = None):
    return layer.density(z, context)


def af_hidden_sample(layer: AFLayer, eps: Tensor, context: Tensor | None = None) -> Tensor:
    return layer.sample(eps, context)[0]


def scf_hidden(layer: SCFLayer, x: Tensor, context: Tensor | None = None, direction: str = "forward"):
    """``forward`` maps eps -> z, ``inverse`` maps z -> eps."""
    if direction == "forward":
        return layer.sample(x, context)
    if direction == "inverse":
        return layer.density(x, context)
    raise ContractError(f"unknown direction {direction!r}")


def stack_apply(stack: FlowStack, x: Tensor, context: Tensor | None = None, direction: str = "forward"):
    """``forward`` samples (eps -> z), ``inverse`` evaluates (z -> eps)."""
    if direction == "forward":
        return stack.sample(x, context)
    if direction == "inverse":
        return stack.density(x, context)
    raise ContractError(f"unknown direction {direction!r}")
