"""Latent, target and annealed densities.

Every model evaluates on batches ``x`` of shape ``(n, dim)`` and returns the
log-density ``(n,)``, its gradient ``(n, dim)`` and its Hessian
``(n, dim, dim)``. The Hessian backs the vector-Jacobian product of the score
inside the autodiff tape (Langevin layers differentiate through the score).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

LOG_2PI = math.log(2.0 * math.pi)


class InvalidParameter(ValueError):
    """A density or layer parameter is outside its valid range."""


class ConfigError(ValueError):
    """Bad configuration; ``key`` names the offending entry."""

    def __init__(self, key, message):
        super().__init__(f"{key}: {message}")
        self.key = key


def gaussian_log_density(x, mean, var):
    """log N(x; mean, var*I) for a single point or the rows of a batch."""
    x = np.asarray(x, dtype=np.float64)
    mean = np.asarray(mean, dtype=np.float64)
    if x.shape[-1:] != mean.shape[-1:]:
        raise ValueError(f"dimension mismatch: x has {x.shape[-1:]}, mean has {mean.shape[-1:]}")
    if not var > 0:
        raise InvalidParameter(f"variance must be positive, got {var}")
    d = x.shape[-1]
    resid = x - mean
    return -0.5 * d * math.log(2.0 * math.pi * var) - np.sum(resid * resid, axis=-1) / (2.0 * var)


def _as_batch(x, dim):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.shape[-1] != dim:
        raise ValueError(f"expected points of dimension {dim}, got {x.shape[-1]}")
    return x


class DensityModel:
    """Base class: subclasses implement the three ``_log/_grad/_hess`` methods."""

    dim: int
    normalized: bool = False

    def log_density(self, x):
        return self._log(_as_batch(x, self.dim))

    def grad_log_density(self, x):
        return self._grad(_as_batch(x, self.dim))

    def hess_log_density(self, x):
        return self._hess(_as_batch(x, self.dim))

    def sample(self, n, rng):
        raise NotImplementedError(f"{type(self).__name__} has no sampler")


class Gaussian(DensityModel):
    """Full-covariance Gaussian."""

    normalized = True

    def __init__(self, mean, cov):
        self.mean = np.atleast_1d(np.asarray(mean, dtype=np.float64))
        self.dim = self.mean.size
        cov = np.asarray(cov, dtype=np.float64)
        if cov.ndim == 0:
            cov = cov * np.eye(self.dim)
        if cov.shape != (self.dim, self.dim):
            raise ValueError(f"covariance must be {self.dim}x{self.dim}")
        try:
            self._chol = np.linalg.cholesky(cov)
        except np.linalg.LinAlgError as exc:
            raise InvalidParameter("covariance must be positive definite") from exc
        self.cov = cov
        self.precision = np.linalg.inv(cov)
        self._log_norm = -0.5 * self.dim * LOG_2PI - np.sum(np.log(np.diag(self._chol)))

    @classmethod
    def standard(cls, dim):
        return cls(np.zeros(dim), np.eye(dim))

    def _log(self, x):
        r = x - self.mean
        return self._log_norm - 0.5 * np.einsum("ni,ij,nj->n", r, self.precision, r)

    def _grad(self, x):
        return -(x - self.mean) @ self.precision

    def _hess(self, x):
        return np.broadcast_to(-self.precision, (x.shape[0], self.dim, self.dim)).copy()

    def sample(self, n, rng):
        return self.mean + rng.standard_normal((n, self.dim)) @ self._chol.T


class GaussianMixture(DensityModel):
    """Finite mixture of full-covariance Gaussians."""

    normalized = True

    def __init__(self, weights, means, covs):
        self.components = [Gaussian(m, c) for m, c in zip(means, covs)]
        self.dim = self.components[0].dim
        w = np.asarray(weights, dtype=np.float64)
        if w.shape != (len(self.components),) or np.any(w <= 0):
            raise InvalidParameter("mixture weights must be positive, one per component")
        self.weights = w / w.sum()
        self._log_w = np.log(self.weights)

    @classmethod
    def circle(cls, n_modes=8, radius=4.0, std=0.5):
        angles = 2.0 * np.pi * np.arange(n_modes) / n_modes
        means = radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)
        return cls(np.ones(n_modes), means, [std ** 2 * np.eye(2)] * n_modes)

    @property
    def means(self):
        return np.stack([c.mean for c in self.components])

    def _component_logs(self, x):
        return np.stack([lw + c._log(x) for lw, c in zip(self._log_w, self.components)], axis=1)

    def _resp(self, x):
        logs = self._component_logs(x)
        total = logsumexp(logs, axis=1)
        return np.exp(logs - total[:, None]), total

    def _log(self, x):
        return logsumexp(self._component_logs(x), axis=1)

    def _grad(self, x):
        resp, _ = self._resp(x)
        grads = np.stack([c._grad(x) for c in self.components], axis=1)
        return np.einsum("nk,nki->ni", resp, grads)

    def _hess(self, x):
        resp, _ = self._resp(x)
        grads = np.stack([c._grad(x) for c in self.components], axis=1)
        mean_grad = np.einsum("nk,nki->ni", resp, grads)
        second = np.einsum("nk,nki,nkj->nij", resp, grads, grads)
        hess = sum(r[:, None, None] * (-c.precision) for r, c in zip(resp.T, self.components))
        return hess + second - np.einsum("ni,nj->nij", mean_grad, mean_grad)

    def assign(self, x):
        """Index of the most responsible component for each point."""
        return np.argmax(self._component_logs(_as_batch(x, self.dim)), axis=1)

    def sample(self, n, rng):
        labels = rng.choice(len(self.components), size=n, p=self.weights)
        noise = rng.standard_normal((n, self.dim))
        out = np.empty((n, self.dim))
        for k, c in enumerate(self.components):
            sel = labels == k
            out[sel] = c.mean + noise[sel] @ c._chol.T
        return out


def _sample_ring_radius(n, radius, scale, rng):
    """Exact draws from the density proportional to r * N(r; radius, scale^2) on r > 0.

    Rejection from the envelope (radius + |r - radius|) * N(r; radius, scale^2),
    a two-component mixture of a Gaussian and a two-sided Rayleigh.
    """
    w_gauss = radius
    w_rayleigh = scale * math.sqrt(2.0 / math.pi)
    p_gauss = w_gauss / (w_gauss + w_rayleigh)
    out = np.empty(0)
    while out.size < n:
        m = 2 * (n - out.size) + 16
        use_gauss = rng.random(m) < p_gauss
        gauss = radius + scale * rng.standard_normal(m)
        sign = np.where(rng.random(m) < 0.5, -1.0, 1.0)
        rayleigh = radius + sign * scale * np.sqrt(-2.0 * np.log1p(-rng.random(m)))
        r = np.where(use_gauss, gauss, rayleigh)
        accept_p = np.where(r > 0, r / (radius + np.abs(r - radius)), 0.0)
        out = np.concatenate([out, r[rng.random(m) < accept_p]])
    return out[:n]


class Ring(DensityModel):
    """Unnormalized ring energy 0.5*((|x| - radius)/scale)^2 in 2-D."""

    dim = 2
    normalized = False

    def __init__(self, radius=3.0, scale=0.25):
        if radius <= 0 or scale <= 0:
            raise InvalidParameter("ring radius and scale must be positive")
        self.radius = float(radius)
        self.scale = float(scale)

    def _radial(self, x):
        r = np.maximum(np.linalg.norm(x, axis=1), 1e-300)
        return r, x / r[:, None]

    def _log(self, x):
        r, _ = self._radial(x)
        return -0.5 * ((r - self.radius) / self.scale) ** 2

    def _grad(self, x):
        r, u = self._radial(x)
        return -((r - self.radius) / self.scale ** 2)[:, None] * u

    def _hess(self, x):
        r, u = self._radial(x)
        uu = np.einsum("ni,nj->nij", u, u)
        eye = np.eye(2)[None]
        c = (r - self.radius) / r
        return -(uu + c[:, None, None] * (eye - uu)) / self.scale ** 2

    def _sample_ring(self, n, rng):
        r = _sample_ring_radius(n, self.radius, self.scale, rng)
        theta = rng.uniform(0.0, 2.0 * np.pi, size=n)
        return np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1)

    def sample(self, n, rng):
        return self._sample_ring(n, rng)


class TwoMoons(Ring):
    """Ring energy plus a two-sided offset term along the first axis.

    U(x) = 0.5*((|x| - radius)/scale)^2
           - log(exp(-0.5*((x1 - offset)/offset_scale)^2) + exp(-0.5*((x1 + offset)/offset_scale)^2))
    """

    def __init__(self, radius=2.0, scale=0.4, offset=2.0, offset_scale=0.6):
        super().__init__(radius, scale)
        if offset_scale <= 0:
            raise InvalidParameter("offset_scale must be positive")
        self.offset = float(offset)
        self.offset_scale = float(offset_scale)

    def _offset_terms(self, x1):
        s = self.offset_scale
        a = -0.5 * ((x1 - self.offset) / s) ** 2
        b = -0.5 * ((x1 + self.offset) / s) ** 2
        lse = np.logaddexp(a, b)
        wa = np.exp(a - lse)
        # d/dx1 of lse and its second derivative
        da, db = -(x1 - self.offset) / s ** 2, -(x1 + self.offset) / s ** 2
        d1 = wa * da + (1 - wa) * db
        d2 = -1.0 / s ** 2 + wa * da ** 2 + (1 - wa) * db ** 2 - d1 ** 2
        return lse, d1, d2

    def _log(self, x):
        return super()._log(x) + self._offset_terms(x[:, 0])[0]

    def _grad(self, x):
        g = super()._grad(x)
        g[:, 0] += self._offset_terms(x[:, 0])[1]
        return g

    def _hess(self, x):
        h = super()._hess(x)
        h[:, 0, 0] += self._offset_terms(x[:, 0])[2]
        return h

    def sample(self, n, rng):
        # the offset factor is at most 1 in each term; accept with (e^a + e^b)/2
        out = np.empty((0, 2))
        while out.shape[0] < n:
            m = 3 * (n - out.shape[0]) + 16
            cand = self._sample_ring(m, rng)
            lse = self._offset_terms(cand[:, 0])[0]
            keep = rng.random(m) < 0.5 * np.exp(lse)
            out = np.concatenate([out, cand[keep]])
        return out[:n]


class AnnealedDensity:
    """Geometric interpolation log p_t = (1 - b_t) log p_Z + b_t log p_X."""

    def __init__(self, base, target, schedule):
        if base.dim != target.dim:
            raise ValueError(f"base dim {base.dim} != target dim {target.dim}")
        betas = np.asarray(schedule, dtype=np.float64)
        if betas.ndim != 1 or betas.size < 1:
            raise InvalidParameter("schedule must be a non-empty list")
        if betas[0] != 0.0 or betas[-1] != 1.0:
            raise InvalidParameter("schedule must start at 0 and end at 1")
        if np.any(np.diff(betas) < 0) or np.any(betas < 0) or np.any(betas > 1):
            raise InvalidParameter("schedule must be nondecreasing within [0, 1]")
        self.base = base
        self.target = target
        self.schedule = betas
        self.dim = base.dim

    @staticmethod
    def linear_schedule(n_steps):
        return np.arange(n_steps + 1) / n_steps if n_steps > 0 else np.array([0.0, 1.0])

    @property
    def n_steps(self):
        return self.schedule.size - 1

    def level(self, t):
        if not 0 <= t <= self.n_steps:
            raise IndexError(f"step {t} outside 0..{self.n_steps}")
        return AnnealedLevel(self.base, self.target, float(self.schedule[t]))


def annealed_log_density(ad, t, x):
    return ad.level(t).log_density(x)


class AnnealedLevel(DensityModel):
    """p_Z^(1-beta) * p_X^beta; endpoints return the component exactly."""

    def __init__(self, base, target, beta):
        self.base = base
        self.target = target
        self.beta = beta
        self.dim = base.dim
        self.normalized = (beta == 0.0 and base.normalized) or (beta == 1.0 and target.normalized)

    def _mix(self, fn):
        if self.beta == 0.0:
            return fn(self.base)
        if self.beta == 1.0:
            return fn(self.target)
        return (1.0 - self.beta) * fn(self.base) + self.beta * fn(self.target)

    def _log(self, x):
        return self._mix(lambda m: m._log(x))

    def _grad(self, x):
        return self._mix(lambda m: m._grad(x))

    def _hess(self, x):
        return self._mix(lambda m: m._hess(x))


TARGET_KINDS = ("gaussian", "gaussian-mixture", "two-moons", "ring")


@dataclass
class ToyTarget:
    """Named toy target with parameters; ``build()`` gives its DensityModel."""

    kind: str
    params: dict = field(default_factory=dict)

    def build(self):
        p = dict(self.params)
        try:
            if self.kind == "gaussian":
                mean = np.atleast_1d(np.asarray(p.pop("mean", [0.0]), dtype=np.float64))
                cov = p.pop("cov", None)
                var = p.pop("var", 1.0)
                model = Gaussian(mean, np.asarray(var if cov is None else cov, dtype=np.float64))
            elif self.kind == "gaussian-mixture":
                if "means" in p:
                    means = np.asarray(p.pop("means"), dtype=np.float64)
                    k = len(means)
                    weights = p.pop("weights", [1.0] * k)
                    if "covs" in p:
                        covs = [np.asarray(c, dtype=np.float64) for c in p.pop("covs")]
                    else:
                        stds = np.broadcast_to(np.asarray(p.pop("std", 1.0), dtype=np.float64), (k,))
                        covs = [s ** 2 * np.eye(means.shape[1]) for s in stds]
                    model = GaussianMixture(weights, means, covs)
                else:
                    model = GaussianMixture.circle(int(p.pop("n_modes", 8)), float(p.pop("radius", 4.0)),
                                                   float(p.pop("std", 0.5)))
            elif self.kind == "two-moons":
                model = TwoMoons(**{k: float(p.pop(k)) for k in list(p)
                                    if k in ("radius", "scale", "offset", "offset_scale")})
            elif self.kind == "ring":
                model = Ring(**{k: float(p.pop(k)) for k in list(p) if k in ("radius", "scale")})
            else:
                raise ConfigError("target.kind", f"unknown kind {self.kind!r}; expected one of {TARGET_KINDS}")
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError("target", str(exc)) from exc
        if p:
            raise ConfigError(f"target.{sorted(p)[0]}", f"unknown parameter for kind {self.kind!r}")
        return model


def sample_target(tt, n, seed):
    """n i.i.d. draws from a ToyTarget, deterministic in ``seed``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    return tt.build().sample(n, np.random.default_rng(seed))
