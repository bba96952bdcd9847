"""Verification suites: identities and closed forms checked numerically.

Each suite returns a list of records ``{check, tolerance, observed, pass}``.
Records contain no timings, so two runs with the same seed serialize to the
same bytes.
"""
from __future__ import annotations

import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from importlib import resources

import numpy as np

from . import fixtures as fx
from .autodiff import ParamStore
from .chain import sample_forward, sample_reverse
from .config import build_chain, parse_config
from .evaluation import (
    QuadratureGrid,
    check_detailed_balance,
    check_pushforward,
    check_stationarity,
    energy_distance,
)
from .densities import Gaussian
from .layers import CouplingLayer, MHLayer
from .training import elbo, nf_loss, snf_loss, train


def record(check, tolerance, observed, passed=None, relation="<"):
    observed = float(observed)
    if passed is None:
        passed = observed < tolerance if relation == "<" else observed > tolerance
    return {"check": check, "tolerance": float(tolerance), "observed": observed, "pass": bool(passed)}


def suite_detailed_balance(seed=0):
    grid = QuadratureGrid([(-5.0, 5.0)], 200)
    out = []
    for name, density in fx.mh_test_densities().items():
        layer = MHLayer(1, 0.5, density)
        out.append(record(f"detailed-balance/{name}", 1e-12, check_detailed_balance(layer, grid)))
    dens = fx.mh_test_densities()
    # self-tests: a corrupted acceptance must be caught; a huge step must not break the identity
    out.append(record("detailed-balance/corrupted-acceptance-detected", 1e-3,
                      check_detailed_balance(MHLayer(1, 0.5, dens["mixture"]), grid, 0.9), relation=">"))
    out.append(record("detailed-balance/stress-sigma-1e3", 1e-12,
                      check_detailed_balance(MHLayer(1, 1e3, dens["mixture"]), grid)))
    return out


def suite_stationarity(seed=0):
    grid = QuadratureGrid([(-10.0, 10.0)], 801)
    tol = 1e-4
    dens = fx.mh_test_densities()
    out = []

    def log_p(name):
        return lambda x: dens[name].log_density(x[:, None])

    for name in ("normal", "mixture"):
        res = check_stationarity(MHLayer(1, 0.5, dens[name]), log_p(name), grid, tolerance=tol)
        out.append(record(f"stationarity/mh-{name}", tol, res.error))
        out.append(record(f"stationarity/mh-{name}/guard", tol / 2, res.guard_change))
    ident = CouplingLayer(ParamStore(), "identity", 1, hidden=(4,))
    res = check_stationarity(ident, log_p("normal"), grid, tolerance=tol)
    out.append(record("stationarity/dirac-identity", tol, res.error))
    return out


def suite_pushforward(seed=0):
    layers, _ = fx.coupling_stack(2, 2, (16,), seed=seed)
    latent = Gaussian.standard(2)
    grid = QuadratureGrid([(-14.0, 14.0)] * 2, 1201)
    res = check_pushforward(layers, latent, grid, np.random.default_rng([seed, 3]),
                            n_samples=10 ** 6, bins=30, window=[(-5.0, 5.0)] * 2)
    return [
        record("pushforward/normalization", 1e-4, res.normalization_error),
        record("pushforward/chi2", res.chi2_threshold, res.chi2, res.chi2 < res.chi2_threshold),
    ]


def suite_nf_snf(seed=0, n=10 ** 4):
    chain = fx.deterministic_chain(seed=seed)
    data = chain.target.sample(n, np.random.default_rng([seed, 4]))
    nf = nf_loss(chain, data).per_sample
    snf = snf_loss(chain, data, np.random.default_rng(0)).per_sample - chain.target.log_density(data)
    out = [record("nf-snf/per-sample", 1e-10, np.max(np.abs(nf - snf)))]
    # self-test: flipping the sign of the log-determinant must be detected
    flipped = snf_loss(chain, data, None).per_sample - 2 * _logdet_sum(chain, data) - chain.target.log_density(data)
    out.append(record("nf-snf/flipped-logdet-detected", 0.1, np.max(np.abs(nf - flipped)), relation=">"))
    return out


def _logdet_sum(chain, data):
    x = data
    acc = np.zeros(data.shape[0])
    for layer in reversed(chain.layers):
        x, ld = layer.inverse_map(x)
        acc = acc - ld
    return acc


def suite_vae_snf(seed=0, n=10 ** 4, n_mc=10 ** 5):
    model = fx.linear_gaussian_vae()
    out = []
    for label, mismatch in (("exact", False), ("mismatched", True)):
        chain = model.chain(mismatch)
        vae = chain.layers[0]
        x = chain.target.sample(n, np.random.default_rng([seed, 5]))
        snf = snf_loss(chain, x, np.random.default_rng([seed, 6])).per_sample
        e = elbo(vae, x, np.random.default_rng([seed, 6]))
        out.append(record(f"vae-snf/{label}/per-sample", 1e-10,
                          np.max(np.abs(snf - (-e + chain.target.log_density(x))))))
        # Monte-Carlo ELBO against the analytic evidence minus the closed-form gap
        x = chain.target.sample(n_mc, np.random.default_rng([seed, 7]))
        d = elbo(vae, x, np.random.default_rng([seed, 8])) - chain.target.log_density(x) + model.gap(x, mismatch)
        se = float(np.std(d, ddof=1) / math.sqrt(n_mc))
        slack = 1e-12  # exact posterior: d is rounding noise only
        out.append(record(f"vae-snf/{label}/mc-elbo-vs-evidence", 3 * se + slack, abs(float(np.mean(d)))))
    return out


def suite_identity_kl(seed=0, n=10 ** 6):
    chain = fx.identity_chain()
    data = chain.target.sample(n, np.random.default_rng([seed, 9]))
    rep = snf_loss(chain, data, np.random.default_rng([seed, 10]))
    return [record("identity-kl/loss-vs-closed-form", 3 * rep.std_error, abs(rep.loss - fx.IDENTITY_KL))]


def gradient_error(chain, data, path_seed, h=1e-4, floor=1e-6):
    """Max relative error of the tape gradient against central differences, over all parameters."""
    from . import autodiff as ad

    def loss():
        return snf_loss(chain, data, np.random.default_rng(path_seed)).loss

    store = chain.store
    store.zero_grad()
    tape = ad.Tape()
    rep = snf_loss(chain, data, np.random.default_rng(path_seed), tape)
    tape.backward(rep.node)
    grad = store.grad.copy()
    worst = 0.0
    for i in range(store.data.size):
        old = store.data[i]
        store.data[i] = old + h
        up = loss()
        store.data[i] = old - h
        down = loss()
        store.data[i] = old
        fd = (up - down) / (2 * h)
        worst = max(worst, abs(grad[i] - fd) / max(abs(grad[i]), abs(fd), floor))
    return worst


def suite_gradient(seed=0):
    chain = fx.gradient_chain(seed)
    data = chain.target.sample(16, np.random.default_rng([seed, 11]))
    return [record("gradient/relative-error", 1e-4, gradient_error(chain, data, [seed, 12]))]


def suite_diffusion_variance(seed=0, n=10 ** 5):
    chain = fx.diffusion_chain()
    path = sample_forward(chain, n, np.random.default_rng([seed, 13]), initial=np.zeros((n, 2)))
    x = path.states[-1]
    var = x.var(axis=0, ddof=1)
    se = math.sqrt(2.0 / (n - 1))  # standard error of a sample variance with true value 1
    return [record(f"diffusion-variance/coord-{k}", 4 * se, abs(var[k] - 1.0)) for k in range(x.shape[1])]


def load_reference():
    with resources.files("snfkit").joinpath("data/reference.json").open() as fh:
        return json.load(fh)


def generative_run(seed=0, config_text=None):
    """Train the 8-mode mixture config and return (energy distance, mode fractions)."""
    if config_text is None:
        config_text = resources.files("snfkit").joinpath("data/gmm8.yaml").read_text()
    cfg = parse_config(config_text)
    cfg.seed = seed
    chain = build_chain(cfg)
    train(chain, cfg.train_config())
    n = 5000
    gen = sample_forward(chain, n, np.random.default_rng([seed, 14])).states[-1]
    held_out = chain.target.sample(n, np.random.default_rng([seed, 15]))
    ed = energy_distance(gen, held_out)
    counts = np.bincount(chain.target.assign(gen), minlength=len(chain.target.components))
    return ed, counts / n


def suite_generative(seed=0):
    reference = load_reference()
    ref, factor = reference["gmm8_energy_distance"], reference["threshold_factor"]
    ed, fractions = generative_run(seed)
    return [
        record("generative/energy-distance", factor * ref, ed),
        record("generative/min-mode-fraction", 0.02, float(np.min(fractions)), relation=">"),
    ]


SUITES = {
    "detailed-balance": suite_detailed_balance,
    "stationarity": suite_stationarity,
    "pushforward": suite_pushforward,
    "nf-snf": suite_nf_snf,
    "vae-snf": suite_vae_snf,
    "identity-kl": suite_identity_kl,
    "gradient": suite_gradient,
    "diffusion-variance": suite_diffusion_variance,
    "generative": suite_generative,
}
SUITE_NAMES = tuple(SUITES) + ("all",)


def run_suites(name="all", seed=0, threads=None):
    """Run one suite or all of them; results keep the suite order regardless of threads."""
    if name not in SUITE_NAMES:
        raise KeyError(f"unknown suite {name!r}; valid suites: {', '.join(SUITE_NAMES)}")
    names = list(SUITES) if name == "all" else [name]
    threads = max(1, min(threads or os.cpu_count() or 1, len(names)))
    if threads == 1:
        results = [SUITES[s](seed) for s in names]
    else:
        with ThreadPoolExecutor(threads) as pool:
            results = list(pool.map(lambda s: SUITES[s](seed), names))
    return [r for block in results for r in block]


def report_json(records):
    return json.dumps(records, indent=2) + "\n"
