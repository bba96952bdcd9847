"""Small chains with known answers, shared by the verification suites and tests."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import ParamStore
from .chain import Chain
from .densities import AnnealedLevel, Gaussian, GaussianMixture
from .layers import AffineLayer, CouplingLayer, DiffusionLayer, LangevinLayer, MHLayer, VaeLayer

# 1-D proposal densities used by the MH checks
MIXTURE_1D = dict(weights=[0.3, 0.7], means=[[-2.0], [1.5]], covs=[[[0.36]], [[1.0]]])


def mh_test_densities():
    """Named 1-D densities: standard normal, a bimodal mixture and their beta = 1/2 level."""
    normal = Gaussian.standard(1)
    mixture = GaussianMixture(**MIXTURE_1D)
    return {
        "normal": normal,
        "mixture": mixture,
        "annealed": AnnealedLevel(normal, mixture, 0.5),
    }


def coupling_stack(n_layers=2, dim=2, hidden=(16,), seed=0, init_scale=0.8, affine=False):
    """Randomly initialized coupling layers with alternating parity (non-trivial map)."""
    store = ParamStore()
    rng = np.random.default_rng(seed)
    layers = [CouplingLayer(store, f"layers.{k}", dim, k % 2, hidden, rng, zero_init=False,
                            init_scale=init_scale) for k in range(n_layers)]
    if affine:
        layers.append(AffineLayer(store, f"layers.{n_layers}", dim,
                                  rng.normal(scale=0.3, size=dim), rng.normal(scale=0.5, size=dim)))
    return layers, store


def deterministic_chain(n_layers=4, dim=2, seed=0):
    layers, store = coupling_stack(n_layers, dim, (16, 16), seed, affine=True)
    target = Gaussian(np.array([1.0, -0.5])[:dim], np.diag([2.0, 0.5])[:dim, :dim])
    return Chain(Gaussian.standard(dim), target, layers, store)


@dataclass
class LinearGaussianVae:
    """z ~ N(0, 1), x | z ~ N(w z + b, s2 I) in two dimensions.

    The evidence is N(b, w w^T + s2 I) and the posterior is Gaussian with
    variance v = 1 / (1 + |w|^2 / s2) and mean v w.(x - b) / s2.
    """

    w: np.ndarray
    b: np.ndarray
    s2: float

    @property
    def evidence(self):
        return Gaussian(self.b, np.outer(self.w, self.w) + self.s2 * np.eye(self.w.size))

    @property
    def posterior_var(self):
        return 1.0 / (1.0 + self.w @ self.w / self.s2)

    def posterior_mean(self, x):
        return self.posterior_var * (np.asarray(x) - self.b) @ self.w / self.s2

    def encoder_affine(self, mismatch=False):
        """(weight column, bias, log-variance) of the encoder's mean map."""
        coef = self.posterior_var * self.w / self.s2
        bias = -coef @ self.b
        log_var = math.log(self.posterior_var)
        if mismatch:
            coef, bias, log_var = 0.7 * coef, bias + 0.2, log_var + 0.4
        return coef, bias, log_var

    def gap(self, x, mismatch=False):
        """KL(q(.|x) || posterior(.|x)) in closed form, per row of x."""
        coef, bias, log_var = self.encoder_affine(mismatch)
        mq = np.asarray(x) @ coef + bias
        vq = math.exp(log_var)
        vp = self.posterior_var
        mp = self.posterior_mean(x)
        return 0.5 * (math.log(vp / vq) + (vq + (mq - mp) ** 2) / vp - 1.0)

    def chain(self, mismatch=False):
        """One-layer chain whose VAE layer realizes this model exactly."""
        store = ParamStore()
        vae = VaeLayer(store, "vae", 1, 2, hidden=(), rng=None)
        store.view("vae.decoder.W0")[:] = [[self.w[0], self.w[1], 0.0, 0.0]]
        store.view("vae.decoder.b0")[:] = [self.b[0], self.b[1], math.log(self.s2), math.log(self.s2)]
        coef, bias, log_var = self.encoder_affine(mismatch)
        store.view("vae.encoder.W0")[:] = np.stack([coef, np.zeros(2)], axis=1)
        store.view("vae.encoder.b0")[:] = [bias, log_var]
        return Chain(Gaussian.standard(1), self.evidence, [vae], store)


def linear_gaussian_vae():
    return LinearGaussianVae(np.array([1.5, -0.8]), np.array([0.5, 1.0]), 0.3)


def identity_chain():
    """N(0, 1) latent, N(0, 4) target, one zero-initialized (identity) coupling layer."""
    store = ParamStore()
    layer = CouplingLayer(store, "layers.0", 1, hidden=(8,), rng=np.random.default_rng(0))
    return Chain(Gaussian.standard(1), Gaussian(np.zeros(1), 4.0), [layer], store)


IDENTITY_KL = 0.5 * (4.0 - 1.0 - math.log(4.0))


def gradient_chain(seed=0):
    """1-D latent -> VAE -> coupling -> Langevin -> diffusion -> MH on a 2-D mixture.

    Networks are randomly initialized. MH sits last, so in the reverse
    direction it acts on the data first and its accept decisions do not
    depend on the parameters.
    """
    store = ParamStore()
    rng = np.random.default_rng(seed)
    target = GaussianMixture([0.5, 0.5], [[-1.5, 0.0], [1.5, 0.5]], [0.6 * np.eye(2), 0.4 * np.eye(2)])
    base = Gaussian.standard(2)
    kw = dict(rng=rng, zero_init=False, init_scale=0.5)
    layers = [
        VaeLayer(store, "layers.0", 1, 2, hidden=(8,), **kw),
        CouplingLayer(store, "layers.1", 2, 0, hidden=(8,), **kw),
        LangevinLayer(2, 0.05, AnnealedLevel(base, target, 0.5)),
        DiffusionLayer(store, "layers.3", 2, 0.05, 1.0, hidden=(8,), **kw),
        MHLayer(2, 0.4, target),
    ]
    return Chain(Gaussian.standard(1), target, layers, store)


def diffusion_chain(n_layers=20, eps=0.05, g=1.0, dim=2):
    """Zero drift and score networks: a discretized Brownian motion."""
    store = ParamStore()
    layers = [DiffusionLayer(store, f"layers.{k}", dim, eps, g, hidden=(4,), rng=None) for k in range(n_layers)]
    return Chain(Gaussian.standard(dim), Gaussian.standard(dim), layers, store)
