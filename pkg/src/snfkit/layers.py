"""Layer families: deterministic (coupling, elementwise affine), Metropolis-Hastings,
Langevin, VAE and diffusion.

Each class provides forward and reverse sampling and the per-step log-weight
in a form where the intractable marginals cancel:

* deterministic: log|det grad T(x_prev)|
* MH:            log p_t(x_prev) - log p_t(x_next)   (detailed balance)
* Langevin, diffusion, VAE:
                 log r(x_next -> x_prev) - log k(x_prev -> x_next)

Reverse sampling works on plain arrays or on tape Vars; Gaussian draws are
reparametrized, MH accept/reject decisions are taken on values only.
"""
from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from .autodiff import Mlp
from .chain import Layer
from .densities import InvalidParameter


def _positive(name, value, allow_zero=False):
    value = float(value)
    if not (value > 0 or (allow_zero and value == 0)) or not math.isfinite(value):
        raise InvalidParameter(f"{name} must be {'non-negative' if allow_zero else 'positive'}, got {value}")
    return value


def coupling_partition(dim, parity):
    """Index sets (A, B): A passes through and conditions the affine map of B."""
    if dim == 1:
        return np.arange(0), np.arange(1)
    idx = np.arange(dim)
    b = idx[idx % 2 == parity % 2]
    a = idx[idx % 2 != parity % 2]
    return a, b


class CouplingLayer(Layer):
    """Affine coupling y_A = x_A, y_B = x_B * exp(s(x_A)) + m(x_A)."""

    kind = "deterministic"
    has_density = False

    def __init__(self, store, prefix, dim, parity=0, hidden=(32, 32), rng=None, zero_init=True,
                 init_scale=1.0):
        super().__init__(dim, dim)
        self.parity = parity
        self.a_idx, self.b_idx = coupling_partition(dim, parity)
        widths = [self.a_idx.size, *hidden, self.b_idx.size]
        self.scale_net = Mlp(store, f"{prefix}.scale", widths, rng, zero_last=zero_init, init_scale=init_scale)
        self.shift_net = Mlp(store, f"{prefix}.shift", widths, rng, zero_last=zero_init, init_scale=init_scale)
        order = np.concatenate([self.a_idx, self.b_idx])
        self._unperm = np.argsort(order)

    def _cols(self, x, idx):
        return ad.take(x, (slice(None), idx))

    def _nets(self, xa, tape):
        return self.scale_net(xa, tape), self.shift_net(xa, tape)

    def _assemble(self, xa, xb):
        return ad.take(ad.concat([xa, xb], axis=1), (slice(None), self._unperm))

    def forward_map(self, x, tape=None):
        """Returns (y, log|det grad T(x)|) per row."""
        xa = self._cols(x, self.a_idx)
        s, m = self._nets(xa, tape)
        yb = self._cols(x, self.b_idx) * ad.exp(s) + m
        return self._assemble(xa, yb), ad.sum(s, axis=1)

    def inverse_map(self, y, tape=None):
        """Returns (x, log|det grad T^{-1}(y)|) per row."""
        ya = self._cols(y, self.a_idx)
        s, m = self._nets(ya, tape)
        xb = (self._cols(y, self.b_idx) - m) * ad.exp(-s)
        return self._assemble(ya, xb), -ad.sum(s, axis=1)

    def sample_forward(self, x, rng):
        return self.forward_map(x)[0]

    def sample_reverse(self, y, rng):
        return self.inverse_map(y)[0]

    def log_weight(self, x_prev, x_next):
        s = self.scale_net(self._cols(x_prev, self.a_idx))
        return ad.sum(s, axis=1)


class AffineLayer(Layer):
    """Elementwise y = x * exp(log_scale) + shift with trainable vectors."""

    kind = "deterministic"
    has_density = False

    def __init__(self, store, prefix, dim, log_scale=0.0, shift=0.0):
        super().__init__(dim, dim)
        self.store = store
        self.scale_name = f"{prefix}.log_scale"
        self.shift_name = f"{prefix}.shift"
        store.add(self.scale_name, (dim,), np.broadcast_to(np.asarray(log_scale, dtype=np.float64), (dim,)))
        store.add(self.shift_name, (dim,), np.broadcast_to(np.asarray(shift, dtype=np.float64), (dim,)))

    def _params(self, x, tape=None):
        tape = tape or (x.tape if isinstance(x, ad.Var) else None)
        if tape is None:
            return self.store.view(self.scale_name), self.store.view(self.shift_name)
        return tape.param(self.store, self.scale_name), tape.param(self.store, self.shift_name)

    def forward_map(self, x, tape=None):
        ls, b = self._params(x, tape)
        n = ad.value_of(x).shape[0]
        return x * ad.exp(ls) + b, ad.sum(ls) * np.ones(n)

    def inverse_map(self, y, tape=None):
        ls, b = self._params(y, tape)
        n = ad.value_of(y).shape[0]
        return (y - b) * ad.exp(-ls), -ad.sum(ls) * np.ones(n)

    def sample_forward(self, x, rng):
        return self.forward_map(x)[0]

    def sample_reverse(self, y, rng):
        return self.inverse_map(y)[0]

    def log_weight(self, x_prev, x_next):
        ls, _ = self._params(x_prev, ad._tape_of(x_prev, x_next))
        n = ad.value_of(x_prev).shape[0]
        return ad.sum(ls) * np.ones(n)


class MHLayer(Layer):
    """One random-walk Metropolis-Hastings step targeting the proposal density p_t.

    The forward kernel has an atom at x (rejection), so ``has_density`` is
    False; the reverse kernel is the same kernel.
    """

    kind = "mh"
    has_density = False

    def __init__(self, dim, sigma, proposal):
        super().__init__(dim, dim)
        self.sigma = _positive("sigma", sigma)
        self.proposal = proposal

    def log_acceptance(self, x, y):
        """log alpha(x, y) = min(0, log p_t(y) - log p_t(x))."""
        return np.minimum(0.0, self.proposal.log_density(y) - self.proposal.log_density(x))

    def step(self, x, rng):
        """One MH transition; accept/reject is decided on values (stop-gradient)."""
        xv = ad.value_of(x)
        xi = self.sigma * rng.standard_normal(xv.shape)
        u = rng.random(xv.shape[0])
        accept = u < np.exp(self.log_acceptance(xv, xv + xi))
        return x + xi * accept[:, None]

    def sample_forward(self, x, rng):
        return self.step(x, rng)

    def sample_reverse(self, y, rng):
        return self.step(y, rng)

    def log_weight(self, x_prev, x_next):
        return ad.log_density(self.proposal, x_prev) - ad.log_density(self.proposal, x_next)

    def continuous_log_density(self, x, y):
        """log of N(y; x, sigma^2 I) * alpha(x, y), the absolutely continuous part."""
        return ad.gaussian_iso_log_density(y, x, self.sigma ** 2) + self.log_acceptance(x, y)


class LangevinLayer(Layer):
    """x_t = x_{t-1} - a1 grad u_t(x_{t-1}) + a2 xi, with u_t = -log p_t; R_t = K_t."""

    kind = "langevin"

    def __init__(self, dim, a1, proposal, a2=None):
        super().__init__(dim, dim)
        self.a1 = _positive("a1", a1, allow_zero=True)
        self.a2 = _positive("a2", math.sqrt(2.0 * self.a1) if a2 is None else a2)
        self.proposal = proposal

    def mean(self, x):
        if self.a1 == 0.0:
            return x
        return x + self.a1 * ad.grad_log_density(self.proposal, x)

    def step(self, x, rng, noise=None):
        xv = ad.value_of(x)
        xi = rng.standard_normal(xv.shape) if noise is None else np.asarray(noise, dtype=np.float64)
        return self.mean(x) + self.a2 * xi

    def sample_forward(self, x, rng):
        return self.step(x, rng)

    def sample_reverse(self, y, rng):
        return self.step(y, rng)

    def forward_log_density(self, x, y):
        return ad.gaussian_iso_log_density(y, self.mean(x), self.a2 ** 2)

    reverse_log_density = forward_log_density

    def log_weight(self, x_prev, x_next):
        return self.forward_log_density(x_next, x_prev) - self.forward_log_density(x_prev, x_next)


class VaeLayer(Layer):
    """Stochastic decoder K(z, .) = N(mu_theta(z), diag) and encoder R(x, .) = N(mu_phi(x), diag).

    Both networks output means followed by log-variances.
    """

    kind = "vae"

    def __init__(self, store, prefix, latent_dim, data_dim, hidden=(32,), rng=None, zero_init=True,
                 init_scale=1.0):
        super().__init__(latent_dim, data_dim)
        self.decoder = Mlp(store, f"{prefix}.decoder", [latent_dim, *hidden, 2 * data_dim], rng,
                           zero_last=zero_init, init_scale=init_scale)
        self.encoder = Mlp(store, f"{prefix}.encoder", [data_dim, *hidden, 2 * latent_dim], rng,
                           zero_last=zero_init, init_scale=init_scale)

    @staticmethod
    def _split(out, k):
        return ad.take(out, (slice(None), slice(0, k))), ad.take(out, (slice(None), slice(k, 2 * k)))

    def decode(self, z):
        return self._split(self.decoder(z), self.out_dim)

    def encode(self, x):
        return self._split(self.encoder(x), self.in_dim)

    def forward_log_density(self, z, x):
        """log p_theta(x | z)."""
        mu, log_var = self.decode(z)
        return ad.gaussian_diag_log_density(x, mu, log_var)

    def reverse_log_density(self, x, z):
        """log q_phi(z | x)."""
        mu, log_var = self.encode(x)
        return ad.gaussian_diag_log_density(z, mu, log_var)

    def sample_forward(self, z, rng):
        mu, log_var = self.decode(z)
        return mu + ad.exp(0.5 * log_var) * rng.standard_normal(ad.value_of(mu).shape)

    def sample_reverse(self, x, rng):
        mu, log_var = self.encode(x)
        return mu + ad.exp(0.5 * log_var) * rng.standard_normal(ad.value_of(mu).shape)

    def log_weight(self, z, x):
        return self.reverse_log_density(x, z) - self.forward_log_density(z, x)


class DiffusionLayer(Layer):
    """Euler step of dX = f(X) dt + g dB and its learned backward step.

    forward:  N(x + eps f(x), eps g^2 I)
    backward: N(x + eps (f(x) - g^2 s(x)), eps g^2 I)
    """

    kind = "diffusion"

    def __init__(self, store, prefix, dim, eps, g=1.0, hidden=(32,), rng=None, zero_init=True,
                 init_scale=1.0):
        super().__init__(dim, dim)
        self.eps = _positive("eps", eps)
        self.g = _positive("g", g)
        self.drift_net = Mlp(store, f"{prefix}.drift", [dim, *hidden, dim], rng, zero_last=zero_init,
                             init_scale=init_scale)
        self.score_net = Mlp(store, f"{prefix}.score", [dim, *hidden, dim], rng, zero_last=zero_init,
                             init_scale=init_scale)

    @property
    def step_var(self):
        return self.eps * self.g ** 2

    def forward_mean(self, x):
        return x + self.eps * self.drift_net(x)

    def reverse_mean(self, y):
        return y + self.eps * (self.drift_net(y) - self.g ** 2 * self.score_net(y))

    def sample_forward(self, x, rng):
        m = self.forward_mean(x)
        return m + math.sqrt(self.step_var) * rng.standard_normal(ad.value_of(m).shape)

    def sample_reverse(self, y, rng):
        m = self.reverse_mean(y)
        return m + math.sqrt(self.step_var) * rng.standard_normal(ad.value_of(m).shape)

    def forward_log_density(self, x, y):
        return ad.gaussian_iso_log_density(y, self.forward_mean(x), self.step_var)

    def reverse_log_density(self, y, x):
        return ad.gaussian_iso_log_density(x, self.reverse_mean(y), self.step_var)

    def log_weight(self, x_prev, x_next):
        return self.reverse_log_density(x_next, x_prev) - self.forward_log_density(x_prev, x_next)
