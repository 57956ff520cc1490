"""``seqflow`` command line: train, eval, sample, bench, toyfit, check.

Exit codes: 0 success, 1 failed checks, 2 configuration error, 3 training
divergence, 4 checkpoint problem. ``SEQFLOW_LOG`` sets the log level
(default WARNING).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import torch

from . import checks
from .baseline import BaselineConfig, LSTMBaseline
from .datasets import (
    DataError,
    SyntheticCorpus,
    cyclic_chain,
    debruijn_chain,
    load_char_corpus,
    load_pianoroll,
    make_batches,
    roll_to_pitches,
    split_corpus,
    synth_discrete,
    toy_mixture,
)
from .genmodel import CheckpointError, LatentFlowModel, ModelConfig, fit_length_model, load_checkpoint
from .hiddenflow import FlowStack
from .numcore import ContractError, Rng
from .seqflow import LOG_2PI, MODEL_KINDS
from .trainkit import TrainConfig, TrainingDiverged, train

log = logging.getLogger("latentflows")

EXIT_OK, EXIT_CHECKS, EXIT_CONFIG, EXIT_DIVERGED, EXIT_CHECKPOINT = 0, 1, 2, 3, 4
MODELS = MODEL_KINDS + ("lstm_baseline",)
LN2 = math.log(2.0)


class ConfigError(ValueError):
    pass


# --- run configuration ---


@dataclass
class DatasetSpec:
    """``kind`` is synthetic, char or pianoroll; file corpora need ``path``."""

    kind: str = "synthetic"
    path: str | None = None
    process: str = "cyclic"
    vocab_size: int = 8
    params: list | None = None
    n: int = 1200
    min_len: int = 8
    max_len: int = 16
    seed: int = 123
    split: list[float] = field(default_factory=lambda: [0.8, 0.1, 0.1])


@dataclass
class ModelSize:
    latent: int = 4
    hidden: int = 64
    emb: int = 32
    n_rnn_layers: int = 2
    n_flow_layers: int | None = None
    transform: str = "nlsq"
    len_dim: int = 16
    flow_hidden: int | None = 32
    max_len: int = 288


@dataclass
class EvalSpec:
    is_samples: int = 50
    batch_size: int = 64


@dataclass
class ToySpec:
    n_train: int = 4000
    n_test: int = 4000
    layers: int = 5
    hidden: int | None = None  # conditioner width; None keeps the layer default 4H
    epochs: int = 100
    batch_size: int = 200
    learning_rate: float = 5e-3
    clip_norm: float = 5.0
    grid: int = 100
    extent: float = 4.0


def _desk_train() -> TrainConfig:
    return TrainConfig(
        learning_rate=3e-3, clip_norm=1.0, batch_size=32, n_elbo_samples=5, dropout=0.0,
        epochs=20, zero_epochs=3, ramp_epochs=6,
    )


@dataclass
class RunConfig:
    model: str = "af_af"
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    size: ModelSize = field(default_factory=ModelSize)
    train: TrainConfig = field(default_factory=_desk_train)
    eval: EvalSpec = field(default_factory=EvalSpec)
    toy: ToySpec = field(default_factory=ToySpec)
    out: str = "runs/default"

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        sections = {"dataset": DatasetSpec, "size": ModelSize, "train": TrainConfig, "eval": EvalSpec, "toy": ToySpec}
        kwargs = {}
        for key, value in d.items():
            if key in sections:
                kwargs[key] = _build(sections[key], value, key)
            elif key in ("model", "out"):
                kwargs[key] = value
            else:
                raise ConfigError(f"unknown config field {key!r}")
        cfg = cls(**kwargs)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        if self.model not in MODELS:
            raise ConfigError(f"model: expected one of {MODELS}, got {self.model!r}")
        ds = self.dataset
        if ds.kind not in ("synthetic", "char", "pianoroll"):
            raise ConfigError(f"dataset.kind: unknown kind {ds.kind!r}")
        if ds.kind != "synthetic":
            if not ds.path:
                raise ConfigError("dataset.path: required for file corpora")
            if not Path(ds.path).exists():
                raise ConfigError(f"dataset.path: {ds.path} does not exist")
        elif ds.process not in ("cyclic", "debruijn", "unigram", "markov"):
            raise ConfigError(f"dataset.process: unknown process {ds.process!r}")
        if self.eval.is_samples < 1:
            raise ConfigError("eval.is_samples: must be at least 1")


def _build(cls, value, where: str):
    if not isinstance(value, dict):
        raise ConfigError(f"{where}: expected an object")
    names = {f.name for f in fields(cls)}
    unknown = set(value) - names
    if unknown:
        raise ConfigError(f"{where}: unknown field(s) {sorted(unknown)}")
    try:
        return cls(**value)
    except (TypeError, ContractError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def load_config(path: str | None) -> RunConfig:
    if path is None:
        return RunConfig()
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"--config: {path} does not exist")
    try:
        data = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"--config: invalid JSON ({exc})") from exc
    return RunConfig.from_dict(data)


def dump_config(cfg: RunConfig, directory: Path) -> Path:
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / "config.json"
    path.write_text(json.dumps(cfg.to_dict(), indent=2))
    return path


# --- data ---


@dataclass
class Data:
    train: list
    valid: list
    test: list
    vocab_size: int
    emission: str
    vocab: list[str]
    synthetic: SyntheticCorpus | None = None

    def split(self, name: str) -> list:
        if name not in ("train", "valid", "test"):
            raise ConfigError(f"--split: unknown split {name!r}")
        return getattr(self, name)


def load_data(spec: DatasetSpec) -> Data:
    try:
        if spec.kind == "char":
            corpus = load_char_corpus(spec.path)
            return Data(corpus.train, corpus.valid, corpus.test, len(corpus.vocab), "categorical", corpus.vocab.to_list())
        if spec.kind == "pianoroll":
            splits = load_pianoroll(spec.path)
            if not splits.get("train"):
                raise DataError("piano-roll file has no train split")
            return Data(splits["train"], splits.get("valid", []), splits.get("test", []), 88, "bernoulli", [])
        V = spec.vocab_size
        if spec.process == "cyclic":
            kind, params = "markov", cyclic_chain(V)
        elif spec.process == "debruijn":
            kind, params = "markov", debruijn_chain(V)
        elif spec.process == "unigram":
            kind, params = "unigram", spec.params if spec.params is not None else [1.0 / V] * V
        else:
            if spec.params is None:
                raise ConfigError("dataset.params: markov process needs a transition matrix")
            kind, params = "markov", spec.params
        corpus = synth_discrete(kind, params, spec.n, Rng(spec.seed), lengths=(spec.min_len, spec.max_len))
        tr, va, te = split_corpus(corpus.sequences, tuple(spec.split))
        return Data(tr, va, te, corpus.vocab_size, "categorical", [], corpus)
    except (DataError, OSError) as exc:
        raise ConfigError(f"dataset: {exc}") from exc


def true_entropy_bits(data: Data, seqs: list) -> float | None:
    """Exact per-token entropy of synthetic sequences (None for file corpora)."""
    if data.synthetic is None or not seqs:
        return None
    total = sum(data.synthetic.sequence_entropy_bits(len(s)) for s in seqs)
    return total / sum(len(s) for s in seqs)


# --- models ---


def build_model(cfg: RunConfig, data: Data):
    s = cfg.size
    torch.manual_seed(cfg.train.seed)
    if cfg.model == "lstm_baseline":
        return LSTMBaseline(BaselineConfig(
            vocab_size=data.vocab_size, hidden=s.hidden, emb=s.emb, n_rnn_layers=s.n_rnn_layers,
            max_len=s.max_len, len_dim=s.len_dim, dropout=cfg.train.dropout, emission=data.emission, vocab=data.vocab,
        ))
    return LatentFlowModel(ModelConfig(
        vocab_size=data.vocab_size, prior=cfg.model, latent=s.latent, hidden=s.hidden, emb=s.emb,
        n_rnn_layers=s.n_rnn_layers, n_flow_layers=s.n_flow_layers, transform=s.transform, max_len=s.max_len,
        len_dim=s.len_dim, flow_hidden=s.flow_hidden, dropout=cfg.train.dropout, emission=data.emission,
        vocab=data.vocab,
    ))


def model_name(model) -> str:
    return "lstm_baseline" if isinstance(model, LSTMBaseline) else model.config.prior


def open_checkpoint(path) -> tuple[object, dict]:
    try:
        return load_checkpoint(path)
    except CheckpointError:
        raise
    except (KeyError, TypeError, ValueError, ContractError) as exc:
        raise CheckpointError(f"cannot rebuild model from {path}: {exc}") from exc


def check_compatible(model, data: Data) -> None:
    c = model.config
    if c.vocab_size != data.vocab_size or c.emission != data.emission:
        raise CheckpointError(
            f"checkpoint expects {c.emission} data with vocabulary {c.vocab_size}, "
            f"dataset provides {data.emission} with {data.vocab_size}"
        )
    if c.vocab and data.vocab and list(c.vocab) != list(data.vocab):
        raise CheckpointError("checkpoint vocabulary differs from the dataset vocabulary")


# --- commands ---


def cmd_train(cfg: RunConfig, out: Path, resume: str | None = None) -> int:
    data = load_data(cfg.dataset)
    out.mkdir(parents=True, exist_ok=True)
    dump_config(cfg, out)
    start_epoch = 0
    if resume:
        model, manifest = open_checkpoint(resume)
        if model_name(model) != cfg.model:
            raise CheckpointError(f"checkpoint holds {model_name(model)}, config asks for {cfg.model}")
        check_compatible(model, data)
        start_epoch = int(manifest.get("epoch", -1)) + 1
    else:
        model = build_model(cfg, data)
    model.length_model = fit_length_model(data.train)
    tcfg = cfg.train
    if cfg.model == "lstm_baseline":
        tcfg = replace(tcfg, zero_epochs=0, ramp_epochs=0)
    t0 = time.perf_counter()
    mode = "a" if resume else "w"
    with open(out / "train_log.jsonl", mode) as fh:
        result = train(
            model, data.train, tcfg, data.valid or None, out, start_epoch, fh,
            checkpoint_extra={"run_config": cfg.to_dict()},
        )
    summary = {
        "model": cfg.model,
        "epochs_run": len(result.split("train")),
        "first_epoch": start_epoch,
        "best_epoch": result.best_epoch,
        "stopped_early": result.stopped_early,
        "final": {split: (result.split(split) or [None])[-1] for split in ("train", "valid")},
        "checkpoints": {"last": str(out / "last"), "best": str(out / "best")},
        "wall_time_s": time.perf_counter() - t0,
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2))
    print(json.dumps(summary))
    return EXIT_OK


def evaluate(model, seqs: list, K: int, seed: int = 0, batch_size: int = 64) -> dict:
    """Importance-sampled NLL and ELBO terms over a list of sequences."""
    if not seqs:
        raise ConfigError("--split: the selected split is empty")
    model.eval()
    rng = Rng(seed)
    nll, length_nll, tokens, mc_var = [], [], 0, 0.0
    recon = kl = 0.0
    with torch.no_grad():
        for batch in make_batches(seqs, batch_size):
            r = model.importance_nll(batch, K, rng)
            nll.append(r.nll)
            length_nll.append(r.length_nll)
            tokens += batch.n_tokens
            mc_var += _mc_variance(model, batch, r, K, rng)
            e = model.elbo(batch, 10, 1.0, rng)
            recon += float(e.reconstruction.sum())
            kl += float(e.kl.sum())
    nll_t = torch.cat(nll)
    length_t = torch.cat(length_nll)
    denom = tokens * LN2
    total = float(nll_t.sum())
    elbo_bpc = (kl - recon) / denom
    return {
        "model": model_name(model),
        "is_samples": K,
        "sequences": len(seqs),
        "tokens": tokens,
        "nll_bpc": total / denom,
        "nll_bpc_se": math.sqrt(mc_var) / denom,
        "nll_bpc_with_length": (total + float(length_t.sum())) / denom,
        "length_bpc": float(length_t.sum()) / denom,
        "nll_nats_per_step": total / tokens,
        "recon_bpc": -recon / denom,
        "kl_bpc": kl / denom,
        "elbo_bpc": elbo_bpc,
        "kl_share": (kl / denom) / elbo_bpc if elbo_bpc else 0.0,
    }


def _mc_variance(model, batch, report, K: int, rng: Rng) -> float:
    """Summed Monte Carlo variance of the per-sequence log-likelihood estimates."""
    lw = report.log_weights
    if lw is None:
        return 0.0  # exact likelihood
    if K == 1:
        # a single weight carries no spread; estimate it from extra draws
        draws = torch.stack([-model.importance_nll(batch, 1, rng).nll for _ in range(10)])
        return float(draws.var(dim=0, unbiased=True).sum())
    w = torch.exp(lw - lw.max(dim=0).values)
    mean = w.mean(0)
    var_log = w.var(0, unbiased=True) / (K * mean * mean)
    return float(var_log.sum())


def _config_for_checkpoint(checkpoint: Path, manifest: dict, config: str | None) -> RunConfig:
    if config:
        return load_config(config)
    stored = checkpoint.parent / "config.json"
    if stored.exists():
        return load_config(str(stored))
    if "run_config" in manifest:
        return RunConfig.from_dict(manifest["run_config"])
    raise ConfigError("--config: no config given and none stored next to the checkpoint")


def cmd_eval(checkpoint: str, split: str, K: int | None, config: str | None, seed: int, out: str | None) -> int:
    model, manifest = open_checkpoint(checkpoint)
    cfg = _config_for_checkpoint(Path(checkpoint), manifest, config)
    data = load_data(cfg.dataset)
    check_compatible(model, data)
    K = K or cfg.eval.is_samples
    seqs = data.split(split)
    metrics = {"split": split, **evaluate(model, seqs, K, seed, cfg.eval.batch_size)}
    entropy = true_entropy_bits(data, seqs)
    if entropy is not None:
        metrics["true_entropy_bpc"] = entropy
    text = json.dumps(metrics)
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text + "\n")
    print(text)
    return EXIT_OK


def cmd_sample(checkpoint: str, n: int, seed: int, length: int | None, out: str | None) -> int:
    model, _ = open_checkpoint(checkpoint)
    if length is not None and not 1 <= length <= model.config.max_len:
        raise ConfigError(f"--length: must lie in [1, {model.config.max_len}]")
    seqs = model.generate(Rng(seed), T=length, n=n)
    if model.config.emission == "bernoulli":
        text = json.dumps({"samples": [roll_to_pitches(s) for s in seqs]})
    elif model.config.vocab:
        vocab = model.config.vocab
        text = "\n".join("".join(vocab[t] for t in s) for s in seqs)
    else:
        text = "\n".join(" ".join(str(t) for t in s) for s in seqs)
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text + "\n")
    else:
        print(text)
    return EXIT_OK


def time_generation(model, T: int, reps: int = 20, warmup: int = 3, seed: int = 0) -> list[float]:
    """Wall-clock seconds to generate one length-T sequence, batch size 1."""
    model.eval()
    rng = Rng(seed)
    for _ in range(warmup):
        model.generate(rng, T=T, n=1)
    times = []
    for _ in range(reps):
        t0 = time.perf_counter()
        model.generate(rng, T=T, n=1)
        times.append(time.perf_counter() - t0)
    return times


def bench_rows(models: dict, lengths: list[int], reps: int = 20, warmup: int = 3) -> list[dict]:
    rows = []
    for name, model in models.items():
        for T in lengths:
            ts = np.asarray(time_generation(model, T, reps, warmup))
            rows.append({
                "model": name,
                "T": T,
                "median_s": float(np.median(ts)),
                "p10_s": float(np.percentile(ts, 10)),
                "p90_s": float(np.percentile(ts, 90)),
            })
    return rows


def cmd_bench(cfg: RunConfig, baseline: str | None, flow: str | None, lengths: list[int], reps: int, warmup: int, out: str | None) -> int:
    if reps < 20 or warmup < 3:
        raise ConfigError("--reps must be >= 20 and --warmup >= 3")
    torch.set_num_threads(1)
    data_stub = Data([], [], [], cfg.dataset.vocab_size, "categorical", [])
    if baseline:
        base_model, _ = open_checkpoint(baseline)
    else:
        base_model = build_model(replace(cfg, model="lstm_baseline"), data_stub)
    if flow:
        flow_model, _ = open_checkpoint(flow)
    else:
        flow_model = build_model(replace(cfg, model="iaf_scf"), data_stub)
    longest = max(lengths)
    for m in (base_model, flow_model):
        if longest > m.config.max_len:
            raise ConfigError(f"--lengths: {longest} exceeds the model's max_len {m.config.max_len}")
    rows = bench_rows({"lstm_baseline": base_model, model_name(flow_model): flow_model}, lengths, reps, warmup)
    fh = open(out, "w", newline="") if out else sys.stdout
    try:
        writer = csv.DictWriter(fh, fieldnames=["model", "T", "median_s", "p10_s", "p90_s"])
        writer.writeheader()
        writer.writerows(rows)
    finally:
        if out:
            fh.close()
    return EXIT_OK


def toy_log_density(stack: FlowStack, x: torch.Tensor) -> torch.Tensor:
    eps, logdet = stack.density(x)
    return -0.5 * (eps * eps).sum(-1) - LOG_2PI - logdet


def fit_toy(spec: ToySpec, transform: str, seed: int) -> tuple[FlowStack, list[float]]:
    """Exact maximum likelihood for a 2D AF stack on the four-Gaussian toy."""
    torch.manual_seed(seed)
    x, _ = toy_mixture(spec.n_train, Rng(seed))
    stack = FlowStack(2, spec.layers, "af", transform, hidden=spec.hidden)
    opt = torch.optim.Adam(stack.parameters(), lr=spec.learning_rate)
    rng = Rng(seed + 1)
    history = []
    for epoch in range(spec.epochs):
        perm = rng.permutation(spec.n_train)
        total = 0.0
        for i in range(0, spec.n_train, spec.batch_size):
            loss = -toy_log_density(stack, x[perm[i : i + spec.batch_size]]).mean()
            if not bool(torch.isfinite(loss)):
                raise TrainingDiverged(f"non-finite toy loss at epoch {epoch}", None)
            opt.zero_grad()
            loss.backward()
            torch.nn.utils.clip_grad_norm_(stack.parameters(), spec.clip_norm)
            opt.step()
            total += float(loss.detach()) * len(perm[i : i + spec.batch_size])
        history.append(total / spec.n_train)
    return stack.eval(), history


def cmd_toyfit(cfg: RunConfig, out: Path, seed: int) -> dict:
    spec = cfg.toy
    out.mkdir(parents=True, exist_ok=True)
    dump_config(cfg, out)
    held_out, mix = toy_mixture(spec.n_test, Rng(seed + 1000))
    nlsq_stack, nlsq_hist = fit_toy(spec, "nlsq", seed)
    affine_stack, affine_hist = fit_toy(spec, "affine", seed)
    axis = torch.linspace(-spec.extent, spec.extent, spec.grid)
    gx, gy = torch.meshgrid(axis, axis, indexing="xy")
    grid = torch.stack([gx.reshape(-1), gy.reshape(-1)], -1)
    with torch.no_grad():
        nll = float(-toy_log_density(nlsq_stack, held_out).mean())
        nll_affine = float(-toy_log_density(affine_stack, held_out).mean())
        oracle = float(-mix.log_prob(held_out).mean())
        grid_lp = toy_log_density(nlsq_stack, grid)
        modes = toy_log_density(nlsq_stack, mix.means)
        origin = float(toy_log_density(nlsq_stack, torch.zeros(1, 2))[0])
    with open(out / "grid.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "y", "log_density"])
        for (px, py), v in zip(grid.tolist(), grid_lp.tolist()):
            w.writerow([f"{px:.6f}", f"{py:.6f}", f"{v:.8f}"])
    metrics = {
        "nll": nll,
        "nll_affine": nll_affine,
        "oracle_nll": oracle,
        "gap_to_oracle": nll - oracle,
        "affine_minus_nlsq": nll_affine - nll,
        "mode_log_density": modes.tolist(),
        "origin_log_density": origin,
        "modes_above_origin": bool((modes > origin).all()),
        "train_nll_history": {"nlsq": nlsq_hist, "affine": affine_hist},
    }
    (out / "metrics.json").write_text(json.dumps(metrics, indent=2))
    print(json.dumps({k: v for k, v in metrics.items() if k != "train_nll_history"}))
    return metrics


def cmd_check(quick: bool, seed: int) -> int:
    results = checks.run_all(quick=quick, seed=seed)
    for r in results:
        print(r.line())
    return EXIT_OK if all(r.passed for r in results) else EXIT_CHECKS


# --- argument parsing ---


def _lengths(text: str) -> list[int]:
    try:
        values = [int(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError("lengths must be comma-separated integers") from exc
    if not values or min(values) < 1:
        raise argparse.ArgumentTypeError("lengths must be positive")
    return values


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run configuration (JSON)")
    common.add_argument("--seed", type=int, default=None, help="override the configured seed")
    common.add_argument("--threads", type=int, default=None, help="torch intra-op threads")
    common.add_argument("--out", help="output directory or file")

    parser = argparse.ArgumentParser(prog="seqflow", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", parents=[common], help="train a model")
    p.add_argument("--resume", help="checkpoint directory to continue from")

    p = sub.add_parser("eval", parents=[common], help="importance-sampled NLL and ELBO terms")
    p.add_argument("checkpoint")
    p.add_argument("--split", default="test")
    p.add_argument("--is-samples", type=int, default=None, dest="is_samples")

    p = sub.add_parser("sample", parents=[common], help="generate sequences")
    p.add_argument("checkpoint")
    p.add_argument("--n", type=int, default=5)
    p.add_argument("--length", type=int, default=None)

    p = sub.add_parser("bench", parents=[common], help="generation-time benchmark (CSV)")
    p.add_argument("--baseline", help="LSTM baseline checkpoint (default: untrained model of configured size)")
    p.add_argument("--flow", help="IAF/SCF checkpoint (default: untrained model of configured size)")
    p.add_argument("--lengths", type=_lengths, default=[8, 64, 256])
    p.add_argument("--reps", type=int, default=20)
    p.add_argument("--warmup", type=int, default=3)

    sub.add_parser("toyfit", parents=[common], help="fit the 2D four-Gaussian toy by exact likelihood")

    p = sub.add_parser("check", parents=[common], help="run the oracle verification suites")
    p.add_argument("--quick", action="store_true", help="fewer random instantiations")
    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(
        level=os.environ.get("SEQFLOW_LOG", "WARNING").upper(), format="%(levelname)s %(name)s: %(message)s"
    )
    args = build_parser().parse_args(argv)
    if args.threads is not None:
        torch.set_num_threads(max(1, args.threads))
    try:
        if args.command in ("eval", "sample", "check"):
            seed = 0 if args.seed is None else args.seed
            if args.command == "eval":
                return cmd_eval(args.checkpoint, args.split, args.is_samples, args.config, seed, args.out)
            if args.command == "sample":
                return cmd_sample(args.checkpoint, args.n, seed, args.length, args.out)
            return cmd_check(args.quick, seed)
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg = replace(cfg, train=replace(cfg.train, seed=args.seed))
        if args.out:
            cfg = replace(cfg, out=args.out)
        if args.command == "train":
            return cmd_train(cfg, Path(cfg.out), args.resume)
        if args.command == "bench":
            return cmd_bench(cfg, args.baseline, args.flow, args.lengths, args.reps, args.warmup, args.out)
        cmd_toyfit(cfg, Path(cfg.out), cfg.train.seed)
        return EXIT_OK
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingDiverged as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT


if __name__ == "__main__":
    sys.exit(main())
