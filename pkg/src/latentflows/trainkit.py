"""Training loop: Adam, KL annealing, gradient clipping, early stopping, logging."""

from __future__ import annotations

import copy
import json
import logging
import math
import time
from dataclasses import dataclass, replace
from pathlib import Path

import torch

from .baseline import BaselineConfig, LSTMBaseline
from .datasets import make_batches
from .genmodel import fit_length_model, save_checkpoint
from .numcore import ContractError, NumericError, Rng

log = logging.getLogger(__name__)

LN2 = math.log(2.0)


@dataclass
class AnnealSchedule:
    zero_epochs: int = 4
    ramp_epochs: int = 10

    def __post_init__(self):
        if self.zero_epochs < 0 or self.ramp_epochs < 0:
            raise ContractError("anneal schedule lengths must be non-negative")


LANGUAGE_SCHEDULE = AnnealSchedule(4, 10)
POLYPHONIC_SCHEDULE = AnnealSchedule(20, 15)


def kl_weight(epoch: int, s: AnnealSchedule = LANGUAGE_SCHEDULE) -> float:
    """0 for the first ``zero_epochs`` epochs, then a linear ramp to 1 (epochs count from 0)."""
    if epoch < 0:
        raise ContractError("epoch must be non-negative")
    if epoch < s.zero_epochs:
        return 0.0
    if s.ramp_epochs == 0:
        return 1.0
    return min(1.0, (epoch - s.zero_epochs) / s.ramp_epochs)


def clip_gradients(grads: dict[str, torch.Tensor], max_norm: float) -> dict[str, torch.Tensor]:
    """Rescale all gradients jointly so their global L2 norm is at most ``max_norm``."""
    if max_norm <= 0:
        raise ContractError("max_norm must be positive")
    for name, g in grads.items():
        if not bool(torch.isfinite(g).all()):
            raise NumericError("non-finite gradient", node=name)
    norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if norm <= max_norm:
        return dict(grads)
    scale = max_norm / norm
    return {name: g * scale for name, g in grads.items()}


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    clip_norm: float = 0.25
    batch_size: int = 16
    n_elbo_samples: int = 10
    dropout: float = 0.3
    epochs: int = 20
    seed: int = 0
    zero_epochs: int = 4
    ramp_epochs: int = 10
    patience: int = 5
    eval_samples: int = 10

    def __post_init__(self):
        if not 0.0 <= self.dropout < 1.0:
            raise ContractError("dropout must lie in [0, 1)")
        for name in ("learning_rate", "clip_norm", "batch_size", "n_elbo_samples", "epochs"):
            if getattr(self, name) < 0 or (name != "learning_rate" and getattr(self, name) == 0):
                raise ContractError(f"{name} must be positive")

    @property
    def schedule(self) -> AnnealSchedule:
        return AnnealSchedule(self.zero_epochs, self.ramp_epochs)


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, checkpoint: Path | None):
        super().__init__(f"{message}; last good checkpoint: {checkpoint}")
        self.checkpoint = checkpoint


@dataclass
class TrainLog:
    records: list[dict]
    best_epoch: int
    stopped_early: bool

    def split(self, name: str) -> list[dict]:
        return [r for r in self.records if r["split"] == name]

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r) + "\n" for r in self.records)


def evaluate_elbo(model, seqs, batch_size: int, rng: Rng, n_samples: int, weight: float = 1.0) -> dict:
    """Corpus-level ELBO in bits per token (no gradients, dropout off)."""
    was_training = model.training
    model.eval()
    recon = kl = tokens = 0.0
    with torch.no_grad():
        for batch in make_batches(seqs, batch_size):
            r = model.elbo(batch, n_samples, weight, rng)
            recon += float(r.reconstruction.sum())
            kl += float(r.kl.sum())
            tokens += float(r.tokens.sum())
    model.train(was_training)
    return {
        "recon_bpc": -recon / (tokens * LN2),
        "kl_bpc": kl / (tokens * LN2),
        "elbo_bpc": (kl - recon) / (tokens * LN2),
    }


def optimizer_step(model, optimizer, loss: torch.Tensor, clip_norm: float) -> float:
    """Backprop ``loss``, clip the global gradient norm, take one Adam step. Returns the pre-clip norm."""
    optimizer.zero_grad(set_to_none=False)
    loss.backward()
    params = [p for p in model.parameters() if p.grad is not None]
    grads = {str(i): p.grad for i, p in enumerate(params)}
    norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    clipped = clip_gradients(grads, clip_norm)
    for i, p in enumerate(params):
        p.grad.copy_(clipped[str(i)])
    optimizer.step()
    return norm


def train(
    model, corpus, cfg: TrainConfig, valid=None, out_dir=None, start_epoch: int = 0, log_file=None,
    checkpoint_extra: dict | None = None,
) -> TrainLog:
    """Fit ``model`` on a list of sequences.

    Each epoch shuffles length-bucketed batches and minimises the per-token
    negative annealed ELBO. After every epoch the train and validation ELBO
    are logged; with ``out_dir`` the model is checkpointed each epoch and the
    best validation epoch is kept under ``out_dir/best``. Training stops after
    ``cfg.patience`` epochs without validation improvement (only counted once
    the KL weight has reached 1). ``checkpoint_extra`` is merged into every
    checkpoint manifest.
    """
    if not corpus:
        raise ContractError("training corpus is empty")
    torch.manual_seed(cfg.seed)
    rng = Rng(cfg.seed)
    if not model.length_model.total:
        model.length_model = fit_length_model(corpus)
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate, betas=(0.9, 0.999), eps=1e-8)
    out_dir = Path(out_dir) if out_dir is not None else None
    records: list[dict] = []
    best, best_epoch, bad_epochs = math.inf, start_epoch, 0
    best_state = None
    last_good: Path | None = None
    stopped = False
    t0 = time.perf_counter()

    def emit(rec):
        records.append(rec)
        if log_file is not None:
            log_file.write(json.dumps(rec) + "\n")
            log_file.flush()

    for epoch in range(start_epoch, start_epoch + cfg.epochs):
        w = kl_weight(epoch, cfg.schedule)
        model.train()
        for batch in make_batches(corpus, cfg.batch_size, rng):
            loss, _ = model.training_loss(batch, w, rng, cfg.n_elbo_samples)
            if not bool(torch.isfinite(loss)):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}", last_good)
            optimizer_step(model, optimizer, loss, cfg.clip_norm)

        eval_rng = Rng(cfg.seed + 7919 * (epoch + 1))
        stats = evaluate_elbo(model, corpus, cfg.batch_size, eval_rng, cfg.eval_samples, w)
        emit({"epoch": epoch, "split": "train", **stats, "kl_weight": w, "wall_time_s": time.perf_counter() - t0})
        score = stats["elbo_bpc"]
        if valid:
            vstats = evaluate_elbo(model, valid, cfg.batch_size, eval_rng, cfg.eval_samples, w)
            emit({"epoch": epoch, "split": "valid", **vstats, "kl_weight": w, "wall_time_s": time.perf_counter() - t0})
            score = vstats["elbo_bpc"]
        if not math.isfinite(score):
            raise TrainingDiverged(f"non-finite validation ELBO at epoch {epoch}", last_good)
        log.info("epoch %d kl_weight %.3f elbo %.4f bits/token", epoch, w, score)

        if out_dir is not None:
            last_good = save_checkpoint(model, out_dir / "last", {**(checkpoint_extra or {}), "epoch": epoch})
        if w < 1.0:
            continue
        if score < best:
            best, best_epoch, bad_epochs = score, epoch, 0
            best_state = copy.deepcopy(model.state_dict())
            if out_dir is not None:
                save_checkpoint(model, out_dir / "best", {**(checkpoint_extra or {}), "epoch": epoch})
        else:
            bad_epochs += 1
            if bad_epochs >= cfg.patience:
                stopped = True
                break

    if best_state is not None:
        model.load_state_dict(best_state)
    model.eval()
    return TrainLog(records, best_epoch, stopped)


def lstm_baseline_train(corpus, cfg: TrainConfig, vocab_size: int, valid=None, out_dir=None, **model_kwargs):
    """Train the autoregressive LSTM baseline with the same loop (KL weight is irrelevant)."""
    torch.manual_seed(cfg.seed)
    config = BaselineConfig(vocab_size=vocab_size, dropout=cfg.dropout, **model_kwargs)
    model = LSTMBaseline(config)
    log_ = train(model, corpus, replace(cfg, zero_epochs=0, ramp_epochs=0), valid, out_dir)
    return model, log_
