"""Autoregressive LSTM language model with the same length conditioning as the
latent flow model. Used as the comparison baseline and as the serial
generation reference in the speed benchmark."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .datasets import DataError, SequenceBatch
from .genmodel import ElboReport, LengthModel, NLLReport, register_model_type
from .numcore import ContractError, Rng, Tensor
from .seqflow import L_MAX, LengthEmbedding, position_indices


@dataclass
class BaselineConfig:
    vocab_size: int
    hidden: int = 500
    emb: int = 500
    n_rnn_layers: int = 2
    max_len: int = L_MAX
    len_dim: int = 64
    dropout: float = 0.3
    emission: str = "categorical"
    vocab: list[str] = field(default_factory=list)


@register_model_type
class LSTMBaseline(nn.Module):
    model_type = "lstm_baseline"
    config_class = BaselineConfig

    def __init__(self, config: BaselineConfig):
        super().__init__()
        c = self.config = config
        if c.emission == "categorical":
            self.embed = nn.Embedding(c.vocab_size, c.emb)
        elif c.emission == "bernoulli":
            self.embed = nn.Linear(c.vocab_size, c.emb)
        else:
            raise ContractError(f"unknown emission {c.emission!r}")
        self.start = nn.Parameter(0.1 * torch.randn(c.emb))
        self.lengths = LengthEmbedding(c.max_len, c.len_dim)
        self.lstm = nn.LSTM(
            c.emb + c.len_dim, c.hidden, c.n_rnn_layers, batch_first=True,
            dropout=c.dropout if c.n_rnn_layers > 1 else 0.0,
        )
        self.drop = nn.Dropout(c.dropout)
        self.head = nn.Linear(c.hidden, c.vocab_size)
        self.length_model = LengthModel()

    def _step_inputs(self, prev_emb: Tensor, start: Tensor, end: Tensor) -> Tensor:
        return torch.cat([prev_emb, self.lengths(start, end)], -1)

    def log_prob_steps(self, batch: SequenceBatch) -> Tensor:
        """log p(x_t | x_<t, T) per step, zero on padding."""
        if batch.max_len > self.config.max_len:
            raise DataError(f"sequence longer than max_len={self.config.max_len}")
        B, T = batch.size, batch.max_len
        emb = self.embed(batch.tokens)
        prev = torch.cat([self.start.expand(B, 1, -1), emb[:, :-1]], 1)
        start, end = position_indices(batch.lengths, T, self.config.max_len)
        h, _ = self.lstm(self._step_inputs(prev, start, end))
        logits = self.head(self.drop(h))
        if self.config.emission == "categorical":
            lp = -F.cross_entropy(logits.transpose(1, 2), batch.tokens, reduction="none")
        else:
            lp = -F.binary_cross_entropy_with_logits(logits, batch.tokens, reduction="none").sum(-1)
        return lp * batch.mask

    def log_prob(self, batch: SequenceBatch) -> Tensor:
        return self.log_prob_steps(batch).sum(-1)

    def token_counts(self, batch: SequenceBatch) -> Tensor:
        return batch.lengths.to(torch.float64)

    def training_loss(self, batch: SequenceBatch, kl_weight: float = 1.0, rng: Rng | None = None, n_samples: int = 1):
        lp = self.log_prob(batch)
        tokens = self.token_counts(batch)
        report = ElboReport(lp, torch.zeros_like(lp), tokens, kl_weight)
        return -lp.sum() / tokens.sum(), report

    def elbo(self, batch, n_samples: int = 1, kl_weight: float = 1.0, rng: Rng | None = None) -> ElboReport:
        """Exact log-likelihood presented as an ELBO with zero KL, for uniform logging."""
        return self.training_loss(batch, kl_weight)[1]

    @torch.no_grad()
    def importance_nll(self, batch: SequenceBatch, K: int = 1, rng: Rng | None = None) -> NLLReport:
        lp = self.log_prob(batch)
        return NLLReport(-lp, -self.length_model.log_prob(batch.lengths), self.token_counts(batch))

    @torch.no_grad()
    def generate(self, rng: Rng, T: int | None = None, n: int = 1) -> list:
        lengths = [T] * n if T is not None else self.length_model.sample(rng, n)
        return [self._generate_one(rng, L) for L in lengths]

    def _generate_one(self, rng: Rng, T: int):
        lengths = torch.tensor([T])
        prev = self.start[None, :]
        state = None
        out = []
        for t in range(T):
            start = torch.tensor([t])
            end = (lengths - 1 - t).clamp(min=0)
            h, state = self.lstm(self._step_inputs(prev, start, end)[:, None, :], state)
            logits = self.head(h[:, 0])[0]
            if self.config.emission == "categorical":
                x = rng.categorical(torch.softmax(logits, -1), 1)
                out.append(int(x[0]))
                prev = self.embed(x)
            else:
                x = (rng.uniform(logits.shape) < torch.sigmoid(logits)).to(torch.float64)
                out.append(x.to(torch.uint8).numpy())
                prev = self.embed(x[None, :])
        if self.config.emission == "bernoulli":
            return np.stack(out)
        return out
