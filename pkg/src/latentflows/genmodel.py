"""The latent-variable generative model for discrete sequences.

Generative process: T ~ p(T), eps ~ N(0, I), z = f(eps; T) through a flow
prior, then every x_t is drawn independently from p(x_t | z, T). The
emission network is a bidirectional LSTM over z that never sees x. The
posterior q(z | x) is a diagonal Gaussian per step from a bidirectional LSTM
encoder. The encoder input embedding and decoder output projection share one
weight matrix.
"""

from __future__ import annotations

import json
import math
from collections.abc import Sequence
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn
from torch.nn.utils.rnn import pack_padded_sequence, pad_packed_sequence

from .datasets import DataError, SequenceBatch
from .numcore import ContractError, Rng, Tensor, gaussian_sample
from .seqflow import L_MAX, LOG_2PI, LengthEmbedding, SequencePrior, length_mask, position_indices

LN2 = math.log(2.0)
LOG_SIGMA_CLAMP = 7.0


class StateError(RuntimeError):
    pass


class CheckpointError(RuntimeError):
    pass


# --- length model ---


class LengthModel:
    """Empirical distribution over sequence lengths, without smoothing."""

    def __init__(self, counts: dict[int, int] | None = None):
        self.counts = {int(k): int(v) for k, v in (counts or {}).items() if v > 0}

    @property
    def total(self) -> int:
        return sum(self.counts.values())

    def prob(self, T: int) -> float:
        return self.counts.get(int(T), 0) / self.total if self.total else 0.0

    def log_prob(self, lengths) -> Tensor:
        lengths = torch.as_tensor(lengths).reshape(-1)
        return torch.tensor([math.log(self.prob(int(T))) if self.prob(int(T)) > 0 else -math.inf for T in lengths])

    def sample(self, rng: Rng, n: int = 1) -> list[int]:
        if not self.total:
            raise StateError("length model is empty")
        support = sorted(self.counts)
        probs = torch.tensor([self.counts[T] for T in support], dtype=torch.float64)
        idx = rng.categorical(probs / probs.sum(), n)
        return [support[int(i)] for i in idx]

    def to_dict(self) -> dict[str, int]:
        return {str(k): v for k, v in sorted(self.counts.items())}

    @classmethod
    def from_dict(cls, d) -> "LengthModel":
        return cls({int(k): v for k, v in d.items()})


def fit_length_model(corpus) -> LengthModel:
    if not corpus:
        raise DataError("cannot fit a length model to an empty corpus")
    counts: dict[int, int] = {}
    for seq in corpus:
        counts[len(seq)] = counts.get(len(seq), 0) + 1
    return LengthModel(counts)


# --- reports ---


@dataclass
class PosteriorParams:
    mu: Tensor
    log_sigma: Tensor

    @property
    def sigma(self) -> Tensor:
        return self.log_sigma.exp()

    def sample(self, rng: Rng, n: int) -> tuple[Tensor, Tensor]:
        """Reparameterised draws (n, B, T, H) and their standard-normal noise."""
        noise = gaussian_sample(rng, (n, *self.mu.shape))
        return self.mu + self.sigma * noise, noise

    def log_prob(self, z: Tensor, mask: Tensor) -> Tensor:
        """log q(z | x) summed over valid steps; z has a leading sample axis."""
        r = (z - self.mu) / self.sigma
        per_step = (-0.5 * r * r - self.log_sigma - 0.5 * LOG_2PI).sum(-1)
        return (per_step * mask).sum(-1)


@dataclass
class ElboReport:
    """Per-sequence ELBO terms in nats.

    ``reconstruction`` is E_q log p(x|z), ``kl`` the Monte Carlo estimate of
    E_q[log q - log p]. Bit-per-token figures are positive costs:
    ``recon_bpc = -reconstruction / (T ln 2)``, ``kl_bpc = kl / (T ln 2)``.
    """

    reconstruction: Tensor
    kl: Tensor
    tokens: Tensor
    kl_weight: float = 1.0

    @property
    def elbo(self) -> Tensor:
        return self.reconstruction - self.kl

    @property
    def objective(self) -> Tensor:
        return self.reconstruction - self.kl_weight * self.kl

    def _bits(self, nats: Tensor) -> float:
        return float(nats.sum() / (self.tokens.sum() * LN2))

    @property
    def recon_bpc(self) -> float:
        return -self._bits(self.reconstruction)

    @property
    def kl_bpc(self) -> float:
        return self._bits(self.kl)

    @property
    def elbo_bpc(self) -> float:
        return -self._bits(self.elbo)

    def summary(self) -> dict[str, float]:
        return {
            "reconstruction": float(self.reconstruction.sum()),
            "kl": float(self.kl.sum()),
            "elbo": float(self.elbo.sum()),
            "tokens": int(self.tokens.sum()),
            "recon_bpc": self.recon_bpc,
            "kl_bpc": self.kl_bpc,
            "elbo_bpc": self.elbo_bpc,
        }


@dataclass
class NLLReport:
    """Importance-sampled negative log-likelihood per sequence (nats).

    ``nll`` excludes the length term -log p(T), which is reported separately;
    ``nll_with_length`` includes it.
    """

    nll: Tensor
    length_nll: Tensor
    tokens: Tensor
    log_weights: Tensor | None = None

    @property
    def nll_with_length(self) -> Tensor:
        return self.nll + self.length_nll

    @property
    def bpc(self) -> float:
        return float(self.nll.sum() / (self.tokens.sum() * LN2))

    @property
    def bpc_with_length(self) -> float:
        return float(self.nll_with_length.sum() / (self.tokens.sum() * LN2))

    @property
    def log_likelihood(self) -> Tensor:
        return -self.nll


def importance_nll(model, batch, K: int = 50, rng: Rng | None = None) -> NLLReport:
    """-log (1/K) sum_k p(x, z_k) / q(z_k | x) with z_k ~ q, via log-sum-exp.

    ``model`` provides ``sample_posterior(batch, n, rng) -> (z, log_q)``,
    ``log_joint(batch, z)``, ``length_log_prob(batch)`` and
    ``token_counts(batch)``.
    """
    if K < 1:
        raise ContractError("K must be at least 1")
    rng = rng or Rng(0)
    with torch.no_grad():
        z, log_q = model.sample_posterior(batch, K, rng)
        log_w = model.log_joint(batch, z) - log_q
        log_px = torch.logsumexp(log_w, dim=0) - math.log(K)
        return NLLReport(-log_px, -model.length_log_prob(batch), model.token_counts(batch), log_w)


# --- networks ---


def _packed_bilstm(lstm: nn.LSTM, x: Tensor, lengths: Tensor) -> Tensor:
    T = x.shape[1]
    packed = pack_padded_sequence(x, lengths.cpu(), batch_first=True, enforce_sorted=False)
    out, _ = lstm(packed)
    out, _ = pad_packed_sequence(out, batch_first=True, total_length=T)
    return out


class Encoder(nn.Module):
    def __init__(self, embed: nn.Module, emb_dim: int, H: int, hidden: int, n_layers: int, max_len: int, len_dim: int):
        super().__init__()
        self.embed = embed
        self.lengths = LengthEmbedding(max_len, len_dim)
        self.lstm = nn.LSTM(emb_dim + len_dim, hidden, n_layers, batch_first=True, bidirectional=True)
        self.head = nn.Linear(2 * hidden, 2 * H)
        # q starts at N(0, I), matching the identity-initialised prior
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def forward(self, emb: Tensor, lengths: Tensor) -> PosteriorParams:
        start, end = position_indices(lengths, emb.shape[1], self.lengths.max_len)
        h = _packed_bilstm(self.lstm, torch.cat([emb, self.lengths(start, end)], -1), lengths)
        mu, log_sigma = self.head(h).chunk(2, dim=-1)
        return PosteriorParams(mu, log_sigma.clamp(-LOG_SIGMA_CLAMP, LOG_SIGMA_CLAMP))


class Decoder(nn.Module):
    """Bidirectional LSTM over z; the output projection is tied to the encoder embedding."""

    def __init__(self, H: int, emb_dim: int, n_out: int, hidden: int, n_layers: int, max_len: int, len_dim: int):
        super().__init__()
        self.lengths = LengthEmbedding(max_len, len_dim)
        self.lstm = nn.LSTM(H + len_dim, hidden, n_layers, batch_first=True, bidirectional=True)
        self.proj = nn.Linear(2 * hidden, emb_dim)
        self.bias = nn.Parameter(torch.zeros(n_out))
        nn.init.zeros_(self.proj.weight)
        nn.init.zeros_(self.proj.bias)

    def forward(self, z: Tensor, lengths: Tensor, out_weight: Tensor) -> Tensor:
        start, end = position_indices(lengths, z.shape[1], self.lengths.max_len)
        h = _packed_bilstm(self.lstm, torch.cat([z, self.lengths(start, end)], -1), lengths)
        return F.linear(self.proj(h), out_weight, self.bias)


@dataclass
class ModelConfig:
    vocab_size: int
    prior: str = "af_af"
    latent: int = 50
    hidden: int = 500
    emb: int = 500
    n_rnn_layers: int = 2
    n_flow_layers: int | None = None
    transform: str = "nlsq"
    max_len: int = L_MAX
    len_dim: int = 64
    flow_hidden: int | None = None
    dropout: float = 0.3
    emission: str = "categorical"
    vocab: list[str] = field(default_factory=list)


class LatentFlowModel(nn.Module):
    model_type = "latent_flow"
    config_class = ModelConfig

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        c = config
        if c.emission not in ("categorical", "bernoulli"):
            raise ContractError(f"unknown emission {c.emission!r}")
        if c.emission == "categorical":
            self.embed = nn.Embedding(c.vocab_size, c.emb)
            nn.init.normal_(self.embed.weight, std=0.1)
        else:
            self.embed = nn.Linear(c.vocab_size, c.emb)
        self.encoder = Encoder(self.embed, c.emb, c.latent, c.hidden, c.n_rnn_layers, c.max_len, c.len_dim)
        self.prior = SequencePrior(
            c.prior, c.latent, c.n_flow_layers, c.hidden, c.n_rnn_layers, c.transform,
            c.max_len, c.len_dim, c.flow_hidden, c.dropout,
        )
        self.decoder = Decoder(c.latent, c.emb, c.vocab_size, c.hidden, c.n_rnn_layers, c.max_len, c.len_dim)
        self.length_model = LengthModel()

    @property
    def out_weight(self) -> Tensor:
        """Decoder output matrix (n_out, emb), the same storage as the input embedding."""
        w = self.embed.weight
        return w if self.config.emission == "categorical" else w.t()

    def _check_batch(self, batch: SequenceBatch) -> None:
        if self.config.emission == "categorical":
            if batch.is_binary:
                raise ContractError("categorical model given binary piano-roll data")
            bad = batch.tokens[batch.mask]
            if bad.numel() and (int(bad.max()) >= self.config.vocab_size or int(bad.min()) < 0):
                raise DataError("token id outside the vocabulary")
        elif not batch.is_binary or batch.tokens.shape[-1] != self.config.vocab_size:
            raise ContractError("bernoulli model expects (B, T, n_notes) inputs")
        if batch.max_len > self.config.max_len:
            raise DataError(f"sequence longer than max_len={self.config.max_len}")

    def infer(self, batch: SequenceBatch) -> PosteriorParams:
        self._check_batch(batch)
        emb = self.embed(batch.tokens)
        return self.encoder(emb, batch.lengths)

    def emission_logits(self, z: Tensor, lengths: Tensor) -> Tensor:
        return self.decoder(z, lengths, self.out_weight)

    def emission_log_prob_steps(self, batch: SequenceBatch, z: Tensor) -> Tensor:
        """log p(x_t | z, T) for every step, zero at padding; z is (..., B, T, H)."""
        lead = z.shape[:-3]
        B, T, H = z.shape[-3:]
        if (B, T) != (batch.size, batch.max_len):
            raise ContractError(f"z shape {tuple(z.shape)} does not match batch ({batch.size}, {batch.max_len})")
        n = int(np.prod(lead)) if lead else 1
        lengths = batch.lengths.repeat(n)
        logits = self.emission_logits(z.reshape(n * B, T, H), lengths)
        if self.config.emission == "categorical":
            tok = batch.tokens.repeat(n, 1)
            lp = -F.cross_entropy(logits.transpose(1, 2), tok, reduction="none")
        else:
            x = batch.tokens.repeat(n, 1, 1)
            lp = -F.binary_cross_entropy_with_logits(logits, x, reduction="none").sum(-1)
        lp = lp * batch.mask.repeat(n, 1)
        return lp.reshape(*lead, B, T)

    def emission_log_prob(self, batch: SequenceBatch, z: Tensor) -> Tensor:
        return self.emission_log_prob_steps(batch, z).sum(-1)

    def log_prior(self, z: Tensor, lengths: Tensor) -> Tensor:
        lead = z.shape[:-3]
        B, T, H = z.shape[-3:]
        n = int(np.prod(lead)) if lead else 1
        _, log_p, _ = self.prior.density(z.reshape(n * B, T, H), torch.as_tensor(lengths).repeat(n))
        return log_p.reshape(*lead, B)

    # protocol used by importance_nll

    def sample_posterior(self, batch: SequenceBatch, n: int, rng: Rng) -> tuple[Tensor, Tensor]:
        q = self.infer(batch)
        z, _ = q.sample(rng, n)
        return z, q.log_prob(z, batch.mask)

    def log_joint(self, batch: SequenceBatch, z: Tensor) -> Tensor:
        return self.emission_log_prob(batch, z) + self.log_prior(z, batch.lengths)

    def length_log_prob(self, batch: SequenceBatch) -> Tensor:
        return self.length_model.log_prob(batch.lengths)

    def token_counts(self, batch: SequenceBatch) -> Tensor:
        return batch.lengths.to(torch.float64)

    # objectives

    def elbo(self, batch: SequenceBatch, n_samples: int = 10, kl_weight: float = 1.0, rng: Rng | None = None) -> ElboReport:
        if n_samples < 1:
            raise ContractError("n_samples must be at least 1")
        rng = rng or Rng(0)
        q = self.infer(batch)
        z, _ = q.sample(rng, n_samples)
        recon = self.emission_log_prob(batch, z)
        kl = q.log_prob(z, batch.mask) - self.log_prior(z, batch.lengths)
        return ElboReport(recon.mean(0), kl.mean(0), self.token_counts(batch), kl_weight)

    def importance_nll(self, batch: SequenceBatch, K: int = 50, rng: Rng | None = None) -> NLLReport:
        return importance_nll(self, batch, K, rng)

    def training_loss(self, batch: SequenceBatch, kl_weight: float, rng: Rng, n_samples: int = 10):
        report = self.elbo(batch, n_samples, kl_weight, rng)
        loss = -report.objective.sum() / report.tokens.sum()
        return loss, report

    @torch.no_grad()
    def generate(self, rng: Rng, T: int | None = None, n: int = 1) -> list:
        """Sample n sequences (token id lists, or (T, 88) 0/1 arrays)."""
        lengths = [T] * n if T is not None else self.length_model.sample(rng, n)
        out = []
        for L in lengths:
            z, _ = self.prior.sample(L, rng, 1)
            logits = self.emission_logits(z, torch.tensor([L]))[0]
            if self.config.emission == "categorical":
                x = rng.categorical(torch.softmax(logits, -1), 1)[:, 0]
                out.append(x.tolist())
            else:
                x = (rng.uniform(logits.shape) < torch.sigmoid(logits)).to(torch.uint8)
                out.append(x.numpy())
        return out


def infer(model: LatentFlowModel, batch: SequenceBatch) -> PosteriorParams:
    return model.infer(batch)


def emission_log_prob(model: LatentFlowModel, batch: SequenceBatch, z: Tensor) -> Tensor:
    return model.emission_log_prob(batch, z)


def elbo(model, batch, n_samples: int = 10, kl_weight: float = 1.0, rng: Rng | None = None) -> ElboReport:
    return model.elbo(batch, n_samples, kl_weight, rng)


def generate(model, rng: Rng, T: int | None = None, n: int = 1):
    return model.generate(rng, T, n)


# --- a linear-Gaussian toy with an exact posterior ---


class LinearGaussianModel:
    """z ~ N(0, I_dz), x = W z + b + noise, noise ~ N(0, noise_cov).

    ``sample_posterior`` draws from the exact posterior, so every importance
    weight equals p(x) and the estimator is exact for any K.
    """

    def __init__(self, W, b, noise_cov):
        self.W = torch.as_tensor(W, dtype=torch.float64)
        self.b = torch.as_tensor(b, dtype=torch.float64)
        self.noise_cov = torch.as_tensor(noise_cov, dtype=torch.float64)
        dz = self.W.shape[1]
        prec = torch.eye(dz) + self.W.T @ torch.linalg.solve(self.noise_cov, self.W)
        self.post_cov = torch.linalg.inv(prec)
        self.post_cov = 0.5 * (self.post_cov + self.post_cov.T)
        self.post_chol = torch.linalg.cholesky(self.post_cov)

    def _mvn_logpdf(self, x, mean, cov):
        L = torch.linalg.cholesky(cov)
        r = torch.linalg.solve_triangular(L, (x - mean).unsqueeze(-1), upper=False).squeeze(-1)
        return -0.5 * (r * r).sum(-1) - torch.log(torch.diagonal(L)).sum() - 0.5 * x.shape[-1] * LOG_2PI

    def posterior_mean(self, x: Tensor) -> Tensor:
        return (self.post_cov @ self.W.T @ torch.linalg.solve(self.noise_cov, (x - self.b).T)).T

    def sample_posterior(self, x: Tensor, n: int, rng: Rng):
        mean = self.posterior_mean(x)
        noise = gaussian_sample(rng, (n, *mean.shape))
        z = mean + noise @ self.post_chol.T
        return z, self._mvn_logpdf(z, mean, self.post_cov)

    def log_joint(self, x: Tensor, z: Tensor) -> Tensor:
        prior = -0.5 * (z * z).sum(-1) - 0.5 * z.shape[-1] * LOG_2PI
        lik = self._mvn_logpdf(x, z @ self.W.T + self.b, self.noise_cov)
        return prior + lik

    def length_log_prob(self, x: Tensor) -> Tensor:
        return torch.zeros(x.shape[0])

    def token_counts(self, x: Tensor) -> Tensor:
        return torch.ones(x.shape[0])


# --- checkpoints: flat named-parameter archive + JSON manifest ---

MODEL_TYPES: dict[str, type] = {"latent_flow": LatentFlowModel}


def register_model_type(cls):
    MODEL_TYPES[cls.model_type] = cls
    return cls


def save_checkpoint(model: nn.Module, directory, extra: dict | None = None) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    state = {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    np.savez(directory / "params.npz", **state)
    manifest = {
        "model_type": model.model_type,
        "config": asdict(model.config),
        "params": {k: list(v.shape) for k, v in state.items()},
        "length_model": model.length_model.to_dict(),
        **(extra or {}),
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return directory


def load_checkpoint(directory):
    """Rebuild a model from ``save_checkpoint`` output; returns (model, manifest)."""
    directory = Path(directory)
    try:
        manifest = json.loads((directory / "manifest.json").read_text())
        arrays = np.load(directory / "params.npz")
    except (OSError, ValueError) as exc:
        raise CheckpointError(f"cannot read checkpoint at {directory}: {exc}") from exc
    cls = MODEL_TYPES.get(manifest.get("model_type"))
    if cls is None:
        raise CheckpointError(f"unknown model type {manifest.get('model_type')!r}")
    model = cls(cls.config_class(**manifest["config"]))
    state = {k: torch.from_numpy(arrays[k]) for k in arrays.files}
    missing = set(model.state_dict()) ^ set(state)
    if missing:
        raise CheckpointError(f"parameter names do not match the model: {sorted(missing)[:5]}")
    try:
        model.load_state_dict(state)
    except RuntimeError as exc:
        raise CheckpointError(str(exc)) from exc
    model.length_model = LengthModel.from_dict(manifest.get("length_model", {}))
    model.eval()
    return model, manifest
