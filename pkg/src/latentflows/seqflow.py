"""Sequence-level flow priors over z in R^{T x H}.

Each model couples a hidden-dimension :class:`FlowStack` with a recurrent time
conditioner whose output at step t is the context for every hidden-flow layer:

* ``af_af``   AF in time (context from z_<t), AF in hidden.
* ``af_scf``  AF in time, SCF in hidden.
* ``iaf_scf`` IAF in time (context from eps_<t), SCF in hidden.
* ``af_only`` AF in hidden with the recurrent inputs severed; the context only
  carries length features, so there are no time dynamics.

Because the context at step t only depends on earlier steps, the Jacobian of
the whole map is block lower-triangular and the log-determinant is the sum of
the per-step hidden-stack log-determinants.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn

from .hiddenflow import FlowStack
from .numcore import ContractError, Rng, Tensor, gaussian_sample

L_MAX = 288
MODEL_KINDS = ("af_af", "af_scf", "iaf_scf", "af_only")
LOG_2PI = math.log(2 * math.pi)


class LengthError(ValueError):
    pass


@dataclass
class LengthFeatures:
    """Per-step indices of the two one-hot length encodings (0-based)."""

    start: Tensor
    end: Tensor
    max_len: int

    def onehot(self) -> Tensor:
        eye = torch.eye(self.max_len)
        return torch.cat([eye[self.start], eye[self.end]], dim=-1)


def length_features(T: int, max_len: int = L_MAX) -> LengthFeatures:
    if not 1 <= T <= max_len:
        raise LengthError(f"length {T} outside [1, {max_len}]")
    t = torch.arange(T)
    return LengthFeatures(start=t, end=T - 1 - t, max_len=max_len)


def position_indices(lengths: Tensor, T: int, max_len: int = L_MAX) -> tuple[Tensor, Tensor]:
    """Start/end distance indices for a padded batch; padding positions get end index 0."""
    lengths = torch.as_tensor(lengths)
    if int(lengths.max()) > max_len or int(lengths.min()) < 1:
        raise LengthError(f"lengths must lie in [1, {max_len}]")
    t = torch.arange(T)[None, :].expand(lengths.shape[0], T)
    end = (lengths[:, None] - 1 - t).clamp(min=0)
    return t.clamp(max=max_len - 1), end


def length_mask(lengths: Tensor, T: int) -> Tensor:
    return torch.arange(T)[None, :] < torch.as_tensor(lengths)[:, None]


class LengthEmbedding(nn.Module):
    """Linear map of the concatenated start/end one-hots, stored as two lookup tables."""

    def __init__(self, max_len: int, dim: int):
        super().__init__()
        self.max_len = max_len
        self.start = nn.Embedding(max_len, dim)
        self.end = nn.Embedding(max_len, dim)
        nn.init.normal_(self.start.weight, std=0.1)
        nn.init.normal_(self.end.weight, std=0.1)

    def forward(self, start: Tensor, end: Tensor) -> Tensor:
        return self.start(start) + self.end(end)


class TimeConditioner(nn.Module):
    """LSTM over [x_{t-1}, length features_t] with a learned x_0.

    ``use_inputs=False`` severs the recurrent inputs (they are replaced by
    zeros), leaving a context that depends on length features only.
    """

    def __init__(
        self,
        H: int,
        hidden: int = 500,
        n_layers: int = 2,
        max_len: int = L_MAX,
        len_dim: int = 64,
        dropout: float = 0.0,
        use_inputs: bool = True,
    ):
        super().__init__()
        self.H = H
        self.use_inputs = use_inputs
        self.start = nn.Parameter(0.1 * torch.randn(H))
        self.lengths = LengthEmbedding(max_len, len_dim)
        self.lstm = nn.LSTM(
            H + len_dim, hidden, n_layers, batch_first=True, dropout=dropout if n_layers > 1 else 0.0
        )
        self.drop = nn.Dropout(dropout)
        self.out_dim = hidden

    def _inputs(self, prev: Tensor, start_idx: Tensor, end_idx: Tensor) -> Tensor:
        if not self.use_inputs:
            prev = torch.zeros_like(prev)
        return torch.cat([prev, self.lengths(start_idx, end_idx)], dim=-1)

    def forward(self, x: Tensor, lengths: Tensor) -> Tensor:
        """Contexts for all steps of a known sequence x (B, T, H), in one pass."""
        B, T, _ = x.shape
        start, end = position_indices(lengths, T, self.lengths.max_len)
        prev = torch.cat([self.start.expand(B, 1, self.H), x[:, :-1]], dim=1)
        h, _ = self.lstm(self._inputs(prev, start, end))
        return self.drop(h)

    def step(self, prev: Tensor | None, t: int, lengths: Tensor, state=None):
        """Context for step t given x_{t-1} (``None`` at t = 0)."""
        B = lengths.shape[0]
        if prev is None:
            prev = self.start.expand(B, self.H)
        start = torch.full((B,), t, dtype=torch.long).clamp(max=self.lengths.max_len - 1)
        end = (lengths - 1 - t).clamp(min=0)
        h, state = self.lstm(self._inputs(prev, start, end)[:, None, :], state)
        return self.drop(h[:, 0]), state


class SequencePrior(nn.Module):
    def __init__(
        self,
        kind: str = "af_af",
        H: int = 50,
        n_flow_layers: int | None = None,
        hidden: int = 500,
        n_rnn_layers: int = 2,
        transform: str = "nlsq",
        max_len: int = L_MAX,
        len_dim: int = 64,
        flow_hidden: int | None = None,
        dropout: float = 0.0,
    ):
        super().__init__()
        if kind not in MODEL_KINDS:
            raise ContractError(f"unknown prior kind {kind!r}; expected one of {MODEL_KINDS}")
        self.kind = kind
        self.H = H
        self.max_len = max_len
        if n_flow_layers is None:
            n_flow_layers = 3 if kind == "iaf_scf" else 5
        hidden_kind = "af" if kind in ("af_af", "af_only") else "scf"
        # dropout only regularises the AF-in-time conditioner
        drop = dropout if kind in ("af_af", "af_scf") else 0.0
        self.conditioner = TimeConditioner(
            H, hidden, n_rnn_layers, max_len, len_dim, drop, use_inputs=kind != "af_only"
        )
        self.stack = FlowStack(H, n_flow_layers, hidden_kind, transform, hidden, flow_hidden)

    @property
    def time_inverse(self) -> bool:
        return self.kind == "iaf_scf"

    def _check(self, T: int) -> None:
        if T > self.max_len:
            raise LengthError(f"sequence length {T} exceeds L_max={self.max_len}")

    def density(self, z: Tensor, lengths: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        """eps = f^{-1}(z); returns (eps, log p(z) per sequence, per-step log|dz/deps|)."""
        B, T, H = z.shape
        self._check(T)
        lengths = torch.as_tensor(lengths)
        if not self.time_inverse:
            ctx = self.conditioner(z, lengths)
            eps, logdet = self.stack.density(z, ctx)
        else:
            eps_steps, ld_steps, prev, state = [], [], None, None
            for t in range(T):
                ctx, state = self.conditioner.step(prev, t, lengths, state)
                e, ld = self.stack.density(z[:, t], ctx)
                eps_steps.append(e)
                ld_steps.append(ld)
                prev = e
            eps, logdet = torch.stack(eps_steps, 1), torch.stack(ld_steps, 1)
        mask = length_mask(lengths, T)
        base = -0.5 * (eps * eps).sum(-1) - 0.5 * H * LOG_2PI
        log_p = ((base - logdet) * mask).sum(-1)
        return eps, log_p, logdet * mask

    def sample_from_eps(self, eps: Tensor, lengths: Tensor) -> tuple[Tensor, Tensor]:
        """z = f(eps); returns (z, per-step log|dz/deps|)."""
        B, T, H = eps.shape
        self._check(T)
        lengths = torch.as_tensor(lengths)
        if self.time_inverse:
            ctx = self.conditioner(eps, lengths)
            z, logdet = self.stack.sample(eps, ctx)
        else:
            z_steps, ld_steps, prev, state = [], [], None, None
            for t in range(T):
                ctx, state = self.conditioner.step(prev, t, lengths, state)
                zt, ld = self.stack.sample(eps[:, t], ctx)
                z_steps.append(zt)
                ld_steps.append(ld)
                prev = zt
            z, logdet = torch.stack(z_steps, 1), torch.stack(ld_steps, 1)
        return z, logdet * length_mask(lengths, T)

    def sample(self, T: int, rng: Rng, n: int = 1) -> tuple[Tensor, Tensor]:
        """Draw eps ~ N(0, I) of shape (n, T, H) and return (z, eps)."""
        self._check(T)
        eps = gaussian_sample(rng, (n, T, self.H))
        z, _ = self.sample_from_eps(eps, torch.full((n,), T))
        return z, eps


def prior_density(model: SequencePrior, z: Tensor, lengths: Tensor | None = None):
    """Accepts a single (T, H) sequence or a batch (B, T, H)."""
    single = z.dim() == 2
    zb = z[None] if single else z
    if lengths is None:
        lengths = torch.full((zb.shape[0],), zb.shape[1])
    eps, log_p, _ = model.density(zb, lengths)
    return (eps[0], log_p[0]) if single else (eps, log_p)


def prior_sample(model: SequencePrior, T: int, rng: Rng) -> Tensor:
    return model.sample(T, rng, 1)[0][0]
