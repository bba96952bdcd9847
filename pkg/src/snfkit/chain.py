"""Markov chains of layers: forward generation, reverse paths and path weights.

A layer couples a forward kernel K_t (law of x_t given x_{t-1}) with a reverse
kernel R_t (law of x_{t-1} given x_t). Its ``log_weight(x_prev, x_next)`` is
the marginal-free closed form of

    log f_t(x_prev, x_next) + log p_{X_{t-1}}(x_prev) - log p_{X_t}(x_next),

where f_t is the Radon-Nikodym derivative of R_t(x_next, .) with respect to
the backward conditional of the forward chain. Summed over a reverse path
together with log p_X(x_T) - log p_Z(x_0) it is the integrand of the SNF loss.

Batches of paths are stored column-wise: ``states[t]`` has shape (n, d_t).
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ContractViolation

LAYER_KINDS = ("deterministic", "mh", "langevin", "vae", "diffusion")


class NonFiniteError(FloatingPointError):
    """A sampled state or a loss term became NaN or infinite."""

    def __init__(self, message, layer=None, term=None):
        super().__init__(message)
        self.layer = layer
        self.term = term


@dataclass
class Kernel:
    """Capability record for one direction of a layer."""

    in_dim: int
    out_dim: int
    has_density: bool
    sample: object
    log_density: object = None


class Layer:
    """One chain step. Subclasses set ``kind`` and implement the hooks below."""

    kind = None
    has_density = True  # forward kernel has a Lebesgue density
    differentiable = True

    def __init__(self, in_dim, out_dim):
        self.in_dim = int(in_dim)
        self.out_dim = int(out_dim)

    def sample_forward(self, x, rng):
        raise NotImplementedError

    def sample_reverse(self, y, rng):
        raise NotImplementedError

    def log_weight(self, x_prev, x_next):
        raise NotImplementedError

    def forward_log_density(self, x, y):
        raise NotImplementedError(f"{self.kind} forward kernel has no density")

    def reverse_log_density(self, y, x):
        raise NotImplementedError(f"{self.kind} reverse kernel has no density")

    @property
    def forward(self):
        return Kernel(self.in_dim, self.out_dim, self.has_density, self.sample_forward,
                      self.forward_log_density if self.has_density else None)

    @property
    def reverse(self):
        return Kernel(self.out_dim, self.in_dim, self.has_density, self.sample_reverse,
                      self.reverse_log_density if self.has_density else None)

    def describe(self):
        return f"{self.kind}({self.in_dim}->{self.out_dim})"


@dataclass
class Chain:
    """Latent density, target density and an ordered list of layers."""

    latent: object
    target: object
    layers: list
    store: ad.ParamStore = field(default_factory=ad.ParamStore)

    @property
    def dims(self):
        return [self.latent.dim] + [layer.out_dim for layer in self.layers]

    def __len__(self):
        return len(self.layers)


@dataclass
class PathSample:
    """A batch of realized trajectories x_0..x_T.

    ``layer_weights[t-1]`` holds the per-path log-weight of layer t and
    ``log_weight_sum`` the full path weight (both may be tape Vars).
    """

    states: list
    direction: str
    layer_weights: list = None
    log_weight_sum: object = None

    @property
    def n(self):
        return ad.value_of(self.states[0]).shape[0]

    def values(self):
        return [ad.value_of(s) for s in self.states]


def _check_finite(x, layer, term):
    v = ad.value_of(x)
    if not np.all(np.isfinite(v)):
        bad = int(np.sum(~np.isfinite(v)))
        raise NonFiniteError(f"layer {layer}: {bad} non-finite value(s) in {term}", layer, term)


def _check_input(chain, x, dim, what):
    v = ad.value_of(x)
    if v.ndim != 2 or v.shape[1] != dim:
        raise ContractViolation(f"{what} must have shape (n, {dim}), got {v.shape}")


def sample_forward(chain, n, rng, initial=None):
    """x_0 ~ P_Z (or ``initial``), then x_t ~ K_t(x_{t-1}, .). No tape."""
    x = chain.latent.sample(n, rng) if initial is None else np.array(initial, dtype=np.float64)
    _check_input(chain, x, chain.latent.dim, "initial states")
    states = [x]
    for t, layer in enumerate(chain.layers, start=1):
        x = layer.sample_forward(x, rng)
        _check_finite(x, t, "forward state")
        states.append(x)
    return PathSample(states, "forward")


def sample_reverse(chain, data, rng, tape=None):
    """x_T := data, then x_{t-1} ~ R_t(x_t, .).

    With a tape the reparametrized draws are recorded so gradients reach the
    reverse-kernel parameters; the path weight is attached either way.
    """
    _check_input(chain, data, chain.target.dim, "data")
    x = tape.constant(np.asarray(data, dtype=np.float64)) if tape is not None else np.asarray(data, dtype=np.float64)
    states = [x]
    for t in range(len(chain.layers), 0, -1):
        x = chain.layers[t - 1].sample_reverse(x, rng)
        _check_finite(x, t, "reverse state")
        states.append(x)
    path = PathSample(states[::-1], "reverse")
    path_log_weight(chain, path)
    return path


def path_log_weight(chain, path):
    """log p_X(x_T) - log p_Z(x_0) + sum_t log_weight_t(x_{t-1}, x_t), per path.

    Stores per-layer terms and the total on ``path`` and returns the total.
    """
    s = path.states
    if len(s) != len(chain.layers) + 1:
        raise ContractViolation(f"path has {len(s)} states, chain needs {len(chain.layers) + 1}")
    head = ad.log_density(chain.target, s[-1])
    _check_finite(head, len(chain.layers), "log p_X(x_T)")
    tail = ad.log_density(chain.latent, s[0])
    _check_finite(tail, 0, "log p_Z(x_0)")
    total = head - tail
    weights = []
    for t, layer in enumerate(chain.layers, start=1):
        w = layer.log_weight(s[t - 1], s[t])
        _check_finite(w, t, f"{layer.kind} log-weight")
        weights.append(w)
        total = total + w
    path.layer_weights = weights
    path.log_weight_sum = total
    return total


def validate_chain(chain):
    """Structural checks; returns a list of human-readable violations."""
    problems = []
    prev = chain.latent.dim
    for t, layer in enumerate(chain.layers, start=1):
        name = f"layers[{t - 1}] ({layer.describe()})"
        if layer.kind not in LAYER_KINDS:
            problems.append(f"{name}: unknown layer kind {layer.kind!r} (no weight formula)")
        if layer.in_dim != prev:
            problems.append(f"{name}: dimension mismatch at index {t - 1}: "
                            f"expects input dim {layer.in_dim}, previous output dim is {prev}")
        proposal = getattr(layer, "proposal", None)
        if proposal is not None and proposal.dim != layer.in_dim:
            problems.append(f"{name}: proposal density has dim {proposal.dim}")
        prev = layer.out_dim
    if prev != chain.target.dim:
        problems.append(f"chain output dim {prev} != target dim {chain.target.dim}")
    return problems


def write_paths_csv(path, out):
    """One row per path: all coordinates of x_0..x_T, then the log-weight sum."""
    states = path.values()
    cols = []
    for t, s in enumerate(states):
        cols += [f"x{t}_{k}" for k in range(s.shape[1])]
    has_w = path.log_weight_sum is not None
    if has_w:
        cols.append("log_weight_sum")
        w = ad.value_of(path.log_weight_sum)
    with open(out, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(cols)
        for i in range(path.n):
            row = [repr(float(v)) for s in states for v in s[i]]
            if has_w:
                row.append(repr(float(w[i])))
            writer.writerow(row)
