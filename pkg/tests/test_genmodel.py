import json
import math

import numpy as np
import pytest
import torch

from latentflows.baseline import BaselineConfig, LSTMBaseline
from latentflows.datasets import DataError, collate
from latentflows.genmodel import (
    CheckpointError,
    LatentFlowModel,
    LengthModel,
    LinearGaussianModel,
    StateError,
    elbo,
    emission_log_prob,
    fit_length_model,
    generate,
    importance_nll,
    infer,
    load_checkpoint,
    save_checkpoint,
)
from latentflows.numcore import ContractError, Rng, flat_parameters, gaussian_sample, grad_check, module_function
from latentflows.oracles import linear_gaussian_logml

from conftest import tiny_model

SEQS = [[0, 1, 2, 1], [2, 2, 0], [1, 0, 0, 2, 1]]


def batch():
    return collate(SEQS)


def test_infer_shapes(rng):
    q = infer(tiny_model(rng), batch())
    assert q.mu.shape == (3, 5, 2) and q.log_sigma.shape == (3, 5, 2)


def test_identical_sequences_get_identical_posteriors(rng):
    q = tiny_model(rng).infer(collate([[0, 1, 2], [0, 1, 2]]))
    assert torch.equal(q.mu[0], q.mu[1]) and torch.equal(q.log_sigma[0], q.log_sigma[1])


def test_out_of_vocabulary_rejected():
    with pytest.raises(DataError):
        tiny_model().infer(collate([[0, 7]]))


def test_log_sigma_is_clamped(rng):
    model = tiny_model(rng)
    with torch.no_grad():
        model.encoder.head.bias.fill_(100.0)
    q = model.infer(batch())
    assert float(q.log_sigma.max()) == 7.0


def test_uniform_categorical_emission():
    model = tiny_model(vocab_size=2)
    b = collate([[0, 1, 1, 0, 1]])
    lp = emission_log_prob(model, b, gaussian_sample(Rng(0), (1, 5, 2)))
    assert float(lp) == pytest.approx(5 * math.log(0.5), abs=1e-12)


def test_uniform_bernoulli_emission():
    model = tiny_model(vocab_size=88, emission="bernoulli")
    b = collate([np.zeros((3, 88), dtype=np.uint8)])
    lp = model.emission_log_prob_steps(b, gaussian_sample(Rng(0), (1, 3, 2)))
    assert torch.allclose(lp, torch.full((1, 3), 88 * math.log(0.5)), atol=1e-10, rtol=0)


def test_emission_factorises_over_steps(rng):
    model = tiny_model(rng)
    z = gaussian_sample(rng, (1, 4, 2))
    a = model.emission_log_prob_steps(collate([[0, 1, 2, 1]]), z)
    b = model.emission_log_prob_steps(collate([[0, 1, 0, 1]]), z)
    changed = (a - b).abs()[0]
    assert float(changed[2]) > 0
    assert float(changed[[0, 1, 3]].max()) == 0.0
    assert float(model.emission_log_prob(collate([[0, 1, 2, 1]]), z)) == float(a.sum())


def test_emission_shape_mismatch():
    with pytest.raises(ContractError):
        tiny_model().emission_log_prob(batch(), torch.zeros(3, 4, 2))


def test_weight_tying_shares_storage():
    model = tiny_model()
    assert model.out_weight.data_ptr() == model.encoder.embed.weight.data_ptr()
    with torch.no_grad():
        model.embed.weight[1, 0] = 42.0
    assert float(model.out_weight[1, 0]) == 42.0


def test_kl_vanishes_at_identity_init():
    model = tiny_model()
    r = elbo(model, batch(), n_samples=10, rng=Rng(0))
    bound = 0.05 * math.sqrt(5 * 2 / 10)
    assert float(r.kl.abs().max()) < bound


def test_zero_kl_weight_objective_is_reconstruction(rng):
    r = tiny_model(rng).elbo(batch(), 4, kl_weight=0.0, rng=Rng(1))
    assert torch.equal(r.objective, r.reconstruction)
    assert torch.equal(r.elbo, r.reconstruction - r.kl)


def test_elbo_report_bits(rng):
    r = tiny_model(rng).elbo(batch(), 3, rng=Rng(2))
    tokens = sum(len(s) for s in SEQS)
    assert r.elbo_bpc == pytest.approx(-float(r.elbo.sum()) / (tokens * math.log(2)), rel=1e-12)
    assert r.elbo_bpc == pytest.approx(r.recon_bpc + r.kl_bpc, rel=1e-12)
    assert set(r.summary()) >= {"recon_bpc", "kl_bpc", "elbo_bpc"}


def test_elbo_gradient_wrt_encoder():
    rng = Rng(3)
    model = tiny_model(rng)
    b = collate([[0, 2, 1], [1, 1]])

    def closure(m):
        return m.elbo(b, 2, rng=Rng(9)).elbo.sum()

    fn = module_function(model.encoder, lambda enc: closure(model))
    # central differences on an O(10) loss carry ~1e-10 noise, so relative
    # errors are measured against a 1e-6 floor
    report = grad_check(fn, flat_parameters(model.encoder), 1e-3, floor=1e-6)
    assert report.passed, report


def test_importance_k1_equals_single_sample_elbo(rng):
    model = tiny_model(rng)
    model.length_model = fit_length_model(SEQS)
    with torch.no_grad():
        e = model.elbo(batch(), 1, rng=Rng(5))
    nll = model.importance_nll(batch(), 1, Rng(5))
    assert torch.allclose(-nll.nll, e.elbo, atol=1e-10, rtol=0)


def test_length_term_reported_separately(rng):
    model = tiny_model(rng)
    model.length_model = fit_length_model(SEQS + [[0, 0, 0]])
    nll = model.importance_nll(batch(), 3, Rng(0))
    expected = -torch.tensor([math.log(1 / 4), math.log(2 / 4), math.log(1 / 4)])
    assert torch.allclose(nll.length_nll, expected, atol=1e-12)
    assert torch.allclose(nll.nll_with_length, nll.nll + expected)
    assert nll.bpc_with_length > nll.bpc


def test_importance_exact_for_true_posterior():
    W = np.array([[1.0, 0.5], [-0.3, 0.8], [0.2, 0.1]])
    b = np.array([0.1, -0.2, 0.3])
    noise = np.diag([0.5, 0.7, 0.4])
    x = np.array([[0.4, -1.0, 0.7], [2.0, 0.1, -0.5]])
    model = LinearGaussianModel(W, b, noise)
    for K in (1, 5, 50):
        nll = importance_nll(model, torch.as_tensor(x), K, Rng(K))
        for i in range(2):
            assert float(-nll.nll[i]) == pytest.approx(linear_gaussian_logml(W, b, noise, x[i]), abs=1e-9)


def test_more_samples_tighten_the_bound(rng):
    model = tiny_model(rng, scale=0.5)
    b = collate([[0, 1, 2, 1]])
    k1 = torch.stack([importance_nll(model, b, 1, Rng(i)).nll for i in range(100)])
    k50 = torch.stack([importance_nll(model, b, 50, Rng(1000 + i)).nll for i in range(100)])
    se = float(k1.std() / 10)
    assert float(k50.mean()) <= float(k1.mean()) + 3 * se


def test_elbo_below_importance_estimate():
    gaps = []
    for seed in range(20):
        model = tiny_model(Rng(seed), scale=0.5)
        with torch.no_grad():
            e = model.elbo(batch(), 20, rng=Rng(100 + seed)).elbo.sum()
        ll = -importance_nll(model, batch(), 20, Rng(200 + seed)).nll.sum()
        gaps.append(float(ll - e))
    gaps = np.array(gaps)
    assert gaps.mean() >= -3 * gaps.std(ddof=1) / math.sqrt(len(gaps))


def test_kl_non_negative_in_expectation():
    model = tiny_model(Rng(4), scale=0.5)
    with torch.no_grad():
        kls = torch.cat([model.elbo(batch(), 100, rng=Rng(i)).kl for i in range(10)])
    assert float(kls.mean()) >= -3 * float(kls.std()) / math.sqrt(kls.numel())


def test_padding_neutral_log_joint(rng):
    model = tiny_model(rng)
    z = gaussian_sample(rng, (2, 3, 5, 2))
    with torch.no_grad():
        joint = model.log_joint(batch(), z)
        q = model.infer(batch())
        for i, s in enumerate(SEQS):
            alone = collate([s])
            T = len(s)
            zi = z[:, i : i + 1, :T]
            assert torch.allclose(model.log_joint(alone, zi)[:, 0], joint[:, i], atol=1e-8, rtol=0)
            qi = model.infer(alone)
            assert torch.allclose(qi.mu[0], q.mu[i, :T], atol=1e-12, rtol=0)


def test_generate_is_reproducible_and_respects_length(rng):
    model = tiny_model(rng)
    model.length_model = fit_length_model(SEQS)
    assert generate(model, Rng(7), n=3) == generate(model, Rng(7), n=3)
    assert [len(s) for s in model.generate(Rng(1), T=1, n=4)] == [1, 1, 1, 1]
    assert all(0 <= t < 3 for s in model.generate(Rng(2), n=5) for t in s)


def test_generate_needs_a_length_model():
    with pytest.raises(StateError):
        tiny_model().generate(Rng(0))


def test_generated_length_histogram():
    lm = LengthModel({2: 5, 3: 3, 7: 2})
    draws = lm.sample(Rng(0), 10_000)
    observed = np.array([draws.count(T) for T in (2, 3, 7)])
    expected = 10_000 * np.array([0.5, 0.3, 0.2])
    chi2 = float(((observed - expected) ** 2 / expected).sum())
    assert chi2 < 13.8  # 99.9% quantile, 2 degrees of freedom
    assert set(draws) == {2, 3, 7}


def test_bernoulli_generation_shape(rng):
    model = tiny_model(rng, vocab_size=88, emission="bernoulli")
    (roll,) = model.generate(Rng(0), T=4)
    assert roll.shape == (4, 88) and set(np.unique(roll)) <= {0, 1}


def test_length_model_counts():
    lm = fit_length_model([[1, 1], [0, 0], [2, 2, 2]])
    assert lm.prob(2) == pytest.approx(2 / 3) and lm.prob(3) == pytest.approx(1 / 3)
    assert lm.prob(4) == 0.0 and float(lm.log_prob([4])) == -math.inf
    assert sum(lm.prob(T) for T in range(1, 10)) == pytest.approx(1.0)
    assert LengthModel.from_dict(lm.to_dict()).counts == lm.counts
    with pytest.raises(DataError):
        fit_length_model([])


def test_checkpoint_round_trip(tmp_path, rng):
    model = tiny_model(rng, vocab=["a", "b", "c"])
    model.length_model = fit_length_model(SEQS)
    save_checkpoint(model, tmp_path / "ck", {"epoch": 3})
    loaded, manifest = load_checkpoint(tmp_path / "ck")
    assert manifest["epoch"] == 3 and manifest["config"]["vocab"] == ["a", "b", "c"]
    for (k, v), (k2, v2) in zip(model.state_dict().items(), loaded.state_dict().items()):
        assert k == k2 and torch.equal(v, v2)
    assert loaded.length_model.counts == model.length_model.counts
    assert loaded.out_weight.data_ptr() == loaded.embed.weight.data_ptr()
    a = model.elbo(batch(), 2, rng=Rng(0)).elbo
    b = loaded.elbo(batch(), 2, rng=Rng(0)).elbo
    assert torch.equal(a, b)


def test_checkpoint_errors(tmp_path, rng):
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "missing")
    model = tiny_model(rng)
    save_checkpoint(model, tmp_path / "ck")
    manifest = json.loads((tmp_path / "ck" / "manifest.json").read_text())
    manifest["config"]["vocab_size"] = 5
    (tmp_path / "ck" / "manifest.json").write_text(json.dumps(manifest))
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "ck")
    manifest["model_type"] = "mystery"
    (tmp_path / "ck" / "manifest.json").write_text(json.dumps(manifest))
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "ck")


def test_baseline_model(tmp_path):
    torch.manual_seed(0)
    model = LSTMBaseline(BaselineConfig(vocab_size=3, hidden=4, emb=3, n_rnn_layers=1, max_len=8, len_dim=2, dropout=0.0))
    model.length_model = fit_length_model(SEQS)
    b = batch()
    loss, report = model.training_loss(b)
    assert float(loss) == pytest.approx(-float(model.log_prob(b).sum()) / 12, rel=1e-12)
    assert float(report.kl.abs().sum()) == 0.0
    assert torch.equal(model.importance_nll(b).nll, -model.log_prob(b).detach())
    # the serial sampler and the parallel scorer agree on the same sequence
    assert [len(s) for s in model.generate(Rng(0), T=6, n=2)] == [6, 6]
    save_checkpoint(model, tmp_path / "base")
    loaded, _ = load_checkpoint(tmp_path / "base")
    assert isinstance(loaded, LSTMBaseline)
    assert torch.equal(loaded.log_prob(b), model.eval().log_prob(b))
