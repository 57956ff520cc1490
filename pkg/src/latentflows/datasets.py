"""Corpora: character sentences, piano rolls, the 2D four-Gaussian toy, and
synthetic discrete processes with known entropy."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .numcore import Rng, Tensor, gaussian_sample
from .seqflow import L_MAX

log = logging.getLogger(__name__)

N_NOTES = 88
LOWEST_PITCH = 21
UNK = "<unk>"


class DataError(ValueError):
    pass


class Vocab:
    """Dense token <-> id bijection. ``unk_id`` is only present once an
    out-of-vocabulary token has been seen in a held-out split."""

    def __init__(self, tokens=()):
        self.itos: list[str] = []
        self.stoi: dict[str, int] = {}
        for tok in tokens:
            self.add(tok)

    def add(self, token: str) -> int:
        if token not in self.stoi:
            self.stoi[token] = len(self.itos)
            self.itos.append(token)
        return self.stoi[token]

    def __len__(self) -> int:
        return len(self.itos)

    @property
    def unk_id(self) -> int:
        return self.add(UNK)

    def encode(self, text, oov: list | None = None) -> list[int]:
        ids = []
        for ch in text:
            if ch in self.stoi:
                ids.append(self.stoi[ch])
            else:
                if oov is not None:
                    oov.append(ch)
                ids.append(self.unk_id)
        return ids

    def decode(self, ids) -> str:
        return "".join(self.itos[int(i)] for i in ids)

    def to_list(self) -> list[str]:
        return list(self.itos)


@dataclass
class SequenceBatch:
    """Padded batch. ``tokens`` is (B, T) ids for categorical data or
    (B, T, 88) 0/1 floats for piano rolls."""

    tokens: Tensor
    lengths: Tensor
    mask: Tensor = field(init=False)

    def __post_init__(self):
        self.lengths = torch.as_tensor(self.lengths, dtype=torch.long)
        T = self.tokens.shape[1]
        self.mask = torch.arange(T)[None, :] < self.lengths[:, None]

    @property
    def size(self) -> int:
        return self.tokens.shape[0]

    @property
    def max_len(self) -> int:
        return self.tokens.shape[1]

    @property
    def is_binary(self) -> bool:
        return self.tokens.dim() == 3

    @property
    def n_tokens(self) -> int:
        return int(self.lengths.sum())

    def index(self, idx) -> "SequenceBatch":
        lengths = self.lengths[idx]
        T = int(lengths.max())
        return SequenceBatch(self.tokens[idx][:, :T], lengths)


def collate(seqs) -> SequenceBatch:
    """Pad a list of id lists or (T, 88) arrays into one batch."""
    if not seqs:
        raise DataError("cannot collate an empty list of sequences")
    lengths = [len(s) for s in seqs]
    T = max(lengths)
    first = np.asarray(seqs[0])
    if first.ndim == 2:
        out = torch.zeros(len(seqs), T, first.shape[1])
        for i, s in enumerate(seqs):
            out[i, : len(s)] = torch.as_tensor(np.asarray(s), dtype=out.dtype)
    else:
        out = torch.zeros(len(seqs), T, dtype=torch.long)
        for i, s in enumerate(seqs):
            out[i, : len(s)] = torch.as_tensor(list(s), dtype=torch.long)
    return SequenceBatch(out, lengths)


def make_batches(seqs, batch_size: int, rng: Rng | None = None, bucket: bool = True) -> list[SequenceBatch]:
    """Length-bucketed batches; with ``rng`` the batch order (and within-bucket
    order) is shuffled."""
    idx = list(range(len(seqs)))
    if rng is not None:
        idx = [idx[i] for i in rng.permutation(len(idx))]
    if bucket:
        idx.sort(key=lambda i: len(seqs[i]))
    groups = [idx[i : i + batch_size] for i in range(0, len(idx), batch_size)]
    if rng is not None:
        groups = [groups[i] for i in rng.permutation(len(groups))]
    return [collate([seqs[i] for i in g]) for g in groups]


# --- character corpora ---


@dataclass
class CharCorpus:
    train: list[list[int]]
    valid: list[list[int]]
    test: list[list[int]]
    vocab: Vocab
    dropped: int = 0
    total: int = 0
    unknown_chars: int = 0

    @property
    def drop_fraction(self) -> float:
        return self.dropped / self.total if self.total else 0.0


def _read_lines(path: Path) -> list[str]:
    return [line.rstrip("\n") for line in path.read_text(encoding="utf-8").splitlines() if line.strip()]


def load_char_corpus(path, max_len: int = L_MAX) -> CharCorpus:
    """Load newline-delimited sentences.

    ``path`` is either a directory holding ``train.txt``, ``valid.txt`` and
    ``test.txt`` or a single file, split 90/5/5 in file order. Sentences of
    ``max_len`` characters or more are dropped. The vocabulary is built from
    the training split; unseen characters elsewhere map to ``<unk>``.
    """
    path = Path(path)
    if path.is_dir():
        splits = {name: _read_lines(path / f"{name}.txt") for name in ("train", "valid", "test")}
    elif path.is_file():
        lines = _read_lines(path)
        n = len(lines)
        a, b = int(round(0.9 * n)), int(round(0.95 * n))
        splits = {"train": lines[:a], "valid": lines[a:b], "test": lines[b:]}
    else:
        raise FileNotFoundError(f"no corpus at {path}")

    total = sum(len(v) for v in splits.values())
    kept = {k: [s for s in v if len(s) < max_len] for k, v in splits.items()}
    dropped = total - sum(len(v) for v in kept.values())
    if not kept["train"]:
        raise DataError("training split is empty")

    vocab = Vocab()
    for sentence in kept["train"]:
        for ch in sentence:
            vocab.add(ch)
    oov: list[str] = []
    encoded = {k: [vocab.encode(s, oov) for s in v] for k, v in kept.items()}
    if oov:
        log.warning("%d held-out characters mapped to %s", len(oov), UNK)
    if dropped:
        log.info("dropped %d of %d sentences (>= %d chars)", dropped, total, max_len)
    return CharCorpus(encoded["train"], encoded["valid"], encoded["test"], vocab, dropped, total, len(oov))


# --- piano rolls ---


def pitches_to_roll(steps, where: str = "") -> np.ndarray:
    roll = np.zeros((len(steps), N_NOTES), dtype=np.uint8)
    for t, step in enumerate(steps):
        for pitch in step:
            if not LOWEST_PITCH <= int(pitch) < LOWEST_PITCH + N_NOTES:
                raise DataError(f"pitch {pitch} outside [21, 108] at {where}step {t}")
            roll[t, int(pitch) - LOWEST_PITCH] = 1
    return roll


def roll_to_pitches(roll) -> list[list[int]]:
    roll = np.asarray(roll)
    return [[int(i) + LOWEST_PITCH for i in np.flatnonzero(step)] for step in roll]


def load_pianoroll(path) -> dict[str, list[np.ndarray]]:
    """Read ``{"train": [[[pitch, ...], ...], ...], ...}`` into (T, 88) 0/1 arrays per split."""
    data = json.loads(Path(path).read_text())
    if not isinstance(data, dict):
        raise DataError("piano-roll file must hold an object keyed by split")
    return {
        split: [pitches_to_roll(seq, f"{split}[{i}] ") for i, seq in enumerate(seqs)]
        for split, seqs in data.items()
    }


def save_pianoroll(path, splits: dict[str, list]) -> None:
    out = {split: [roll_to_pitches(r) for r in rolls] for split, rolls in splits.items()}
    Path(path).write_text(json.dumps(out))


# --- 2D toy ---


class ToyMixture:
    """Equal-weight mixture of four isotropic Gaussians at (+-2, +-2)."""

    def __init__(self, spread: float = 2.0, sigma: float = 0.5):
        self.means = torch.tensor([[s1 * spread, s2 * spread] for s1 in (-1, 1) for s2 in (-1, 1)])
        self.sigma = sigma

    def sample(self, n: int, rng: Rng) -> Tensor:
        comp = rng.randint(4, (n,))
        return self.means[comp] + self.sigma * gaussian_sample(rng, (n, 2))

    def log_prob(self, x: Tensor) -> Tensor:
        x = torch.as_tensor(x)
        sq = ((x[:, None, :] - self.means[None]) ** 2).sum(-1)
        comp = -0.5 * sq / self.sigma**2 - 2 * math.log(self.sigma) - math.log(2 * math.pi)
        return torch.logsumexp(comp, dim=1) - math.log(4)


def toy_mixture(n: int, rng: Rng) -> tuple[Tensor, ToyMixture]:
    if n < 1:
        raise DataError("n must be positive")
    mix = ToyMixture()
    return mix.sample(n, rng), mix


# --- synthetic discrete corpora ---


@dataclass
class SyntheticCorpus:
    sequences: list[list[int]]
    vocab_size: int
    entropy_rate_bits: float
    initial_entropy_bits: float

    def sequence_entropy_bits(self, T: int) -> float:
        """Exact entropy of a length-T sequence (the chain starts stationary)."""
        return self.initial_entropy_bits + (T - 1) * self.entropy_rate_bits

    def mean_entropy_per_token(self) -> float:
        total = sum(self.sequence_entropy_bits(len(s)) for s in self.sequences)
        return total / sum(len(s) for s in self.sequences)


def _entropy_bits(p: np.ndarray) -> float:
    p = p[p > 0]
    return float(-(p * np.log2(p)).sum())


def _stationary(P: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eig(P.T)
    v = np.real(vecs[:, np.argmin(np.abs(vals - 1.0))])
    return v / v.sum()


def synth_discrete(kind: str, params, n: int, rng: Rng, lengths=(10, 10)) -> SyntheticCorpus:
    """Sample ``n`` sequences from a unigram distribution or a Markov chain.

    ``params`` is a probability vector (unigram) or a row-stochastic matrix
    (markov). Markov chains start from their stationary distribution (or from
    ``params["initial"]`` when ``params`` is a dict). Lengths are uniform on
    the inclusive range ``lengths``.
    """
    initial = None
    if isinstance(params, dict):
        initial = params.get("initial")
        params = params["transition"] if kind == "markov" else params["probs"]
    P = np.asarray(params, dtype=np.float64)
    if kind == "unigram":
        if P.ndim != 1 or abs(P.sum() - 1.0) > 1e-9 or (P < 0).any():
            raise DataError("unigram probabilities must be non-negative and sum to 1")
        h = _entropy_bits(P)
        P_rows, init, rate = np.tile(P, (P.size, 1)), P, h
    elif kind == "markov":
        if P.ndim != 2 or P.shape[0] != P.shape[1]:
            raise DataError("transition matrix must be square")
        if (P < 0).any() or np.abs(P.sum(1) - 1.0).max() > 1e-9:
            raise DataError("transition matrix rows must sum to 1")
        pi = _stationary(P)
        init = pi if initial is None else np.asarray(initial, dtype=np.float64)
        rate = float(sum(pi[i] * _entropy_bits(P[i]) for i in range(P.shape[0])))
        P_rows = P
    else:
        raise DataError(f"unknown synthetic corpus kind {kind!r}")

    V = P_rows.shape[0]
    rows = torch.as_tensor(P_rows)
    init_t = torch.as_tensor(init)
    lo, hi = lengths
    seqs = []
    for _ in range(n):
        T = lo + int(rng.randint(hi - lo + 1)) if hi > lo else lo
        x = [int(rng.categorical(init_t)[0])]
        for _ in range(T - 1):
            x.append(int(rng.categorical(rows[x[-1]])[0]))
        seqs.append(x)
    return SyntheticCorpus(seqs, V, rate, _entropy_bits(np.asarray(init)))


def debruijn_chain(V: int = 8, branches: int = 2) -> np.ndarray:
    """Each state s moves to (branches*s + k) mod V, k < branches, uniformly.

    With V a power of ``branches`` the stationary law is uniform and the
    entropy rate is log2(branches) bits per token.
    """
    P = np.zeros((V, V))
    for s in range(V):
        for k in range(branches):
            P[s, (branches * s + k) % V] += 1.0 / branches
    return P


def cyclic_chain(V: int = 8, steps=(1, 2, 5), probs=(0.5, 0.3, 0.2)) -> np.ndarray:
    """x_t = (x_{t-1} + s) mod V with step s drawn from ``probs``.

    The current symbol is a running sum of every step so far, so no finite
    window of recent steps determines it. The chain is doubly stochastic:
    its stationary law is uniform and its entropy rate is H(probs).
    """
    if len(steps) != len(probs):
        raise DataError("steps and probs must have equal length")
    P = np.zeros((V, V))
    for s in range(V):
        for step, p in zip(steps, probs):
            P[s, (s + step) % V] += p
    return P


def split_corpus(seqs: list, fractions=(0.8, 0.1, 0.1)) -> tuple[list, list, list]:
    n = len(seqs)
    a = int(round(fractions[0] * n))
    b = a + int(round(fractions[1] * n))
    return seqs[:a], seqs[a:b], seqs[b:]
