"""Oracle-backed verification suites.

Each suite draws random instantiations, compares the flow code against the
independent verifiers in :mod:`latentflows.oracles`, and returns a
:class:`SuiteResult` holding the worst deviation it saw. ``seqflow check``
runs them all; the acceptance tests call them at full size.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch

from .datasets import collate
from .genmodel import LatentFlowModel, LinearGaussianModel, ModelConfig, importance_nll
from .hiddenflow import AFLayer, FlowStack, SCFLayer
from .numcore import Rng, flat_parameters, gaussian_sample, grad_check, module_function, perturb_parameters
from .oracles import block_structure_check, brute_jacobian_logdet, enumerate_discrete_invertible, linear_gaussian_logml
from .scalarflow import (
    SLOPE_FACTOR,
    AffineParams,
    InvariantViolation,
    NLSqParams,
    affine_forward,
    nlsq_constrain,
    nlsq_forward,
    nlsq_inverse,
)
from .seqflow import SequencePrior

SEQ_MODELS = ("af_af", "af_scf", "iaf_scf")
TRANSFORMS = ("affine", "nlsq")


@dataclass
class SuiteResult:
    name: str
    passed: bool
    worst: float
    tolerance: float
    seconds: float
    detail: str = ""

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name}: worst {self.worst:.3g} (tol {self.tolerance:g}) in {self.seconds:.1f}s {self.detail}".rstrip()


def _timed(name: str, tol: float, body: Callable[[], tuple[float, bool, str]]) -> SuiteResult:
    t0 = time.perf_counter()
    worst, ok, detail = body()
    return SuiteResult(name, ok and worst <= tol, worst, tol, time.perf_counter() - t0, detail)


def _np_map(fn, shape):
    def f(v):
        with torch.no_grad():
            return fn(torch.from_numpy(np.asarray(v).reshape(shape))).numpy().reshape(-1)

    return f


def random_prior(kind: str, H: int, rng: Rng, transform: str = "nlsq", scale: float = 0.2) -> SequencePrior:
    prior = SequencePrior(
        kind, H=H, n_flow_layers=2, hidden=8, n_rnn_layers=1, transform=transform, max_len=16, len_dim=4, flow_hidden=4 * H
    )
    return perturb_parameters(prior, rng, scale).eval()


def _hidden_layer(cls: str, transform: str, H: int, rng: Rng, context: int = 3):
    order = [int(i) for i in rng.permutation(H)]
    if cls == "af":
        layer = AFLayer(H, context, transform, order)
    else:
        layer = SCFLayer(H, context, transform, kept=order[: math.ceil(H / 2)])
    return perturb_parameters(layer, rng, 0.2).eval()


def invertibility(trials: int = 100, seed: int = 0, max_T: int = 8, max_H: int = 4) -> SuiteResult:
    """Round trip eps -> z -> eps for every hidden layer type and sequence model."""

    def body():
        rng = Rng(seed)
        worst = 0.0
        for i in range(trials):
            H = 2 + int(rng.randint(max_H - 1))
            ctx = gaussian_sample(rng, (5, 3))
            eps = gaussian_sample(rng, (5, H))
            with torch.no_grad():
                for cls in ("af", "scf"):
                    for tr in TRANSFORMS:
                        layer = _hidden_layer(cls, tr, H, rng)
                        z, _ = layer.sample(eps, ctx)
                        back, _ = layer.density(z, ctx)
                        worst = max(worst, float((back - eps).abs().max()))
                T = 1 + int(rng.randint(max_T))
                for kind in SEQ_MODELS:
                    prior = random_prior(kind, H, rng)
                    e = gaussian_sample(rng, (2, T, H))
                    lengths = torch.tensor([T, max(1, T - 1)])
                    z, _ = prior.sample_from_eps(e, lengths)
                    back, _, _ = prior.density(z, lengths)
                    valid = torch.arange(T)[None, :] < lengths[:, None]
                    worst = max(worst, float((back - e).abs()[valid].max()))
        return worst, True, f"{trials} trials"

    return _timed("invertibility", 1e-6, body)


def jacobian(instances: int = 20, seed: int = 0, max_T: int = 4, max_H: int = 3) -> SuiteResult:
    """Analytic sequence log-det against a brute-force Jacobian, plus block structure."""

    def body():
        rng = Rng(seed)
        worst, blocks_ok, worst_block = 0.0, True, 0.0
        for _ in range(instances):
            for kind in SEQ_MODELS:
                T = 2 + int(rng.randint(max_T - 1))
                H = 2 + int(rng.randint(max_H - 1))
                prior = random_prior(kind, H, rng)
                lengths = torch.tensor([T])
                eps = gaussian_sample(rng, (1, T, H))
                fn = _np_map(lambda e: prior.sample_from_eps(e, lengths)[0], (1, T, H))
                with torch.no_grad():
                    z, ld = prior.sample_from_eps(eps, lengths)
                    _, _, ld_density = prior.density(z, lengths)
                brute = brute_jacobian_logdet(fn, eps.numpy())
                worst = max(worst, abs(float(ld.sum()) - brute), abs(float(ld_density.sum()) - brute))
                report = block_structure_check(fn, eps.numpy(), T, H)
                blocks_ok &= report.passed
                worst_block = max(worst_block, report.max_abs_err)
        return worst, blocks_ok, f"max upper-block entry {worst_block:.2g}"

    return _timed("jacobian", 1e-5, body)


def nlsq(draws: int = 1000, seed: int = 0) -> SuiteResult:
    """Constraint, monotonicity, cubic inverse and the c = 0 reduction."""

    def body():
        rng = Rng(seed)
        ok = True
        raw = 3.0 * gaussian_sample(rng, (draws, 5))
        p = nlsq_constrain(*raw.unbind(-1))
        ok &= bool((p.b > SLOPE_FACTOR * p.c.abs() * p.d).all())
        # derivative positive on a grid around each bump
        for i in range(0, draws, max(1, draws // 100)):
            pi = NLSqParams(p.a[i], p.b[i], p.c[i], p.d[i], p.g[i])
            grid = (-pi.g + torch.linspace(-6, 6, 2001)) / pi.d
            _, ld = nlsq_forward(grid, pi)
            ok &= bool(torch.isfinite(ld).all())
        eps = 3.0 * gaussian_sample(rng, (draws,))
        z, _ = nlsq_forward(eps, p)
        try:
            err = float((nlsq_inverse(z, p) - eps).abs().max())
        except InvariantViolation:
            return math.inf, False, "cubic reported three real roots"
        raw0 = raw.clone()
        raw0[:, 2] = 0.0
        p0 = nlsq_constrain(*raw0.unbind(-1))
        z0, _ = nlsq_forward(eps, p0)
        za, _ = affine_forward(eps, AffineParams(p0.a, p0.b))
        bitwise = bool(torch.equal(z0, za))
        ok &= bitwise
        return err, ok, f"c=0 bitwise affine: {bitwise}"

    return _timed("nlsq", 1e-9, body)


def tiny_model(seed: int, prior: str = "af_af", scale: float = 0.3) -> LatentFlowModel:
    torch.manual_seed(seed)
    cfg = ModelConfig(
        vocab_size=3, prior=prior, latent=2, hidden=4, emb=3, n_rnn_layers=1, n_flow_layers=2,
        max_len=8, len_dim=2, flow_hidden=4, dropout=0.0,
    )
    return perturb_parameters(LatentFlowModel(cfg), Rng(seed), scale).eval()


def gradients(seed: int = 0) -> SuiteResult:
    """grad_check on every flow layer (rel 1e-4) and on the end-to-end ELBO (rel 1e-3)."""

    def body():
        rng = Rng(seed)
        worst_layer = 0.0
        ok = True
        modules = []
        for cls in ("af", "scf"):
            for tr in TRANSFORMS:
                modules.append(_hidden_layer(cls, tr, 3, rng, context=2))
        modules.append(perturb_parameters(FlowStack(3, 2, "af", "nlsq", context_dim=2, hidden=6), rng, 0.2))
        for m in modules:
            z = gaussian_sample(rng, (2, 3))
            ctx = gaussian_sample(rng, (2, 2))

            def closure(mod, z=z, ctx=ctx):
                eps, ld = mod.density(z, ctx)
                return (-0.5 * (eps * eps).sum(-1) + ld).sum()

            r = grad_check(module_function(m, closure), flat_parameters(m), 1e-4)
            worst_layer = max(worst_layer, r.max_rel_err)
            ok &= r.passed
        model = tiny_model(seed + 1)
        batch = collate([[0, 2, 1], [1, 1]])
        fn = module_function(model, lambda m: m.elbo(batch, 2, rng=Rng(9)).elbo.sum())
        # central differences on an O(10) objective carry ~1e-10 noise
        r = grad_check(fn, flat_parameters(model), 1e-3, floor=1e-6)
        ok &= r.passed
        return worst_layer, ok, f"end-to-end ELBO rel err {r.max_rel_err:.2g}"

    return _timed("gradients", 1e-4, body)


def discrete_invertibility(max_size: int = 5) -> SuiteResult:
    def body():
        ok = True
        for n in range(1, max_size + 1):
            count, maps = enumerate_discrete_invertible(n)
            ok &= count == math.factorial(n) and all(sorted(f) == list(range(n)) for f in maps)
        return 0.0, ok, f"|omega| = 1..{max_size}"

    return _timed("discrete-invertible", 0.0, body)


def estimators(n_models: int = 50, seed: int = 0) -> SuiteResult:
    """IS exactness against the linear-Gaussian marginal, and ELBO <= IS ordering."""

    def body():
        rng = np.random.default_rng(seed)
        worst = 0.0
        for i in range(10):
            dz, dx = 1 + i % 2, 1 + i % 4
            W = rng.normal(size=(dx, dz))
            b = rng.normal(size=dx)
            A = rng.normal(size=(dx, dx))
            noise = A @ A.T + 0.5 * np.eye(dx)
            x = rng.normal(size=(3, dx))
            model = LinearGaussianModel(W, b, noise)
            for K in (1, 50):
                nll = importance_nll(model, torch.as_tensor(x), K, Rng(i))
                exact = [linear_gaussian_logml(W, b, noise, xi) for xi in x]
                worst = max(worst, float(np.abs(-nll.nll.numpy() - exact).max()))
        gaps = []
        batch = collate([[0, 1, 2, 1], [2, 2, 0], [1, 0]])
        for m in range(n_models):
            model = tiny_model(seed + m, scale=0.3)
            with torch.no_grad():
                e = model.elbo(batch, 20, rng=Rng(10_000 + m)).elbo.sum()
            ll = -importance_nll(model, batch, 20, Rng(20_000 + m)).nll.sum()
            gaps.append(float(ll - e))
        gaps = np.asarray(gaps)
        se = gaps.std(ddof=1) / math.sqrt(len(gaps))
        ordered = gaps.mean() >= -3 * se
        return worst, ordered, f"mean IS - ELBO gap {gaps.mean():.3g} nats (se {se:.2g})"

    return _timed("estimators", 1e-9, body)


SUITES: dict[str, Callable[[], SuiteResult]] = {
    "invertibility": invertibility,
    "jacobian": jacobian,
    "nlsq": nlsq,
    "gradients": gradients,
    "discrete-invertible": discrete_invertibility,
    "estimators": estimators,
}

QUICK = {
    "invertibility": dict(trials=10),
    "jacobian": dict(instances=2),
    "nlsq": dict(draws=200),
    "gradients": {},
    "discrete-invertible": {},
    "estimators": dict(n_models=10),
}


def run_all(quick: bool = False, seed: int = 0) -> list[SuiteResult]:
    results = []
    for name, suite in SUITES.items():
        kwargs = dict(QUICK[name]) if quick else {}
        if "seed" in suite.__code__.co_varnames:
            kwargs["seed"] = seed
        results.append(suite(**kwargs))
    return results
