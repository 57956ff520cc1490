import pytest
import torch

from latentflows.numcore import Rng


@pytest.fixture
def rng():
    return Rng(1234)


@pytest.fixture(autouse=True)
def _seed_torch():
    torch.manual_seed(0)


def as_numpy_map(fn, shape):
    """Wrap a torch map so the numpy-only oracles can call it."""

    def f(v):
        with torch.no_grad():
            return fn(torch.from_numpy(v.reshape(shape))).numpy().reshape(-1)

    return f


def tiny_config(**kw):
    from latentflows.genmodel import ModelConfig

    base = dict(
        vocab_size=3, prior="af_af", latent=2, hidden=4, emb=3, n_rnn_layers=1, n_flow_layers=2,
        max_len=8, len_dim=2, flow_hidden=4, dropout=0.0,
    )
    base.update(kw)
    return ModelConfig(**base)


def tiny_model(rng=None, scale=0.3, **kw):
    """A very small latent flow model; with ``rng`` its zero-initialised heads are perturbed."""
    from latentflows.genmodel import LatentFlowModel
    from latentflows.numcore import perturb_parameters

    model = LatentFlowModel(tiny_config(**kw))
    if rng is not None:
        perturb_parameters(model, rng, scale)
    return model.eval()


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
