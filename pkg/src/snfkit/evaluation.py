"""Sample-quality metrics and quadrature checks of kernel identities.

Quadrature is trapezoidal on uniform grids. Interval masses restrict the
trapezoid rule to [a, b] (half weight on endpoint nodes), and the same weights
are used on both sides of every identity.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from . import autodiff as ad
from .kernels import cross_distance_sum, self_distance_sum


@dataclass
class MetricReport:
    name: str
    value: float
    sizes: tuple = ()
    band: tuple = None

    def __post_init__(self):
        if not math.isfinite(self.value):
            raise ValueError(f"{self.name}: non-finite metric value")
        if self.band is not None and not self.band[0] <= self.value <= self.band[1]:
            raise ValueError(f"{self.name}: band {self.band} does not contain {self.value}")


def energy_distance(a, b):
    """U-statistic estimate of 2E|A-B| - E|A-A'| - E|B-B'|, clipped at 0.

    Pair sums are exact, so the value is bit-identical under any
    permutation of either sample and symmetric in (a, b).
    """
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise ValueError("energy distance needs non-empty samples")
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"dimension mismatch: {a.shape[1]} vs {b.shape[1]}")
    n, m = a.shape[0], b.shape[0]
    cross = cross_distance_sum(a, b) / (n * m)
    within_a = self_distance_sum(a) / (n * (n - 1) / 2) if n > 1 else 0.0
    within_b = self_distance_sum(b) / (m * (m - 1) / 2) if m > 1 else 0.0
    # (within_a + within_b) is commutative, so swapping a and b gives the same bits
    return max(0.0, 2.0 * cross - (within_a + within_b))


@dataclass
class QuadratureGrid:
    """Uniform trapezoidal grid on a box in one or two dimensions."""

    bounds: list
    nodes: int

    def __post_init__(self):
        self.bounds = [tuple(map(float, b)) for b in self.bounds]
        if len(self.bounds) not in (1, 2):
            raise ValueError("quadrature grids are 1-D or 2-D")
        if self.nodes < 3:
            raise ValueError("need at least three nodes per axis")

    @property
    def dim(self):
        return len(self.bounds)

    def axis(self, k=0):
        lo, hi = self.bounds[k]
        return np.linspace(lo, hi, self.nodes)

    def axis_weights(self, k=0):
        x = self.axis(k)
        h = x[1] - x[0]
        w = np.full(self.nodes, h)
        w[0] = w[-1] = h / 2
        return w

    def points(self):
        if self.dim == 1:
            return self.axis(0)[:, None]
        xx, yy = np.meshgrid(self.axis(0), self.axis(1), indexing="ij")
        return np.stack([xx.ravel(), yy.ravel()], axis=1)

    def weights(self):
        if self.dim == 1:
            return self.axis_weights(0)
        return np.outer(self.axis_weights(0), self.axis_weights(1)).ravel()

    def integrate(self, values):
        return float(np.dot(self.weights(), np.asarray(values).ravel()))

    def refined(self):
        """Halve the spacing; every old node stays a node."""
        return QuadratureGrid(self.bounds, 2 * self.nodes - 1)


def check_detailed_balance(layer, grid, alpha_exponent=1.0):
    """max over grid^2 of |N(y;x,s^2) a(x,y) p(x) - N(x;y,s^2) a(y,x) p(y)| for a 1-D MH layer.

    ``alpha_exponent`` != 1 corrupts the acceptance (suite self-test).
    """
    x = grid.axis(0)
    lp = layer.proposal.log_density(x[:, None])
    sigma2 = layer.sigma ** 2
    diff = x[None, :] - x[:, None]  # [i, j] = y_j - x_i
    gauss = np.exp(-diff ** 2 / (2 * sigma2)) / math.sqrt(2 * math.pi * sigma2)
    log_ratio = lp[None, :] - lp[:, None]
    alpha_xy = np.minimum(1.0, np.exp(log_ratio)) ** alpha_exponent
    alpha_yx = np.minimum(1.0, np.exp(-log_ratio)) ** alpha_exponent
    p = np.exp(lp)
    lhs = gauss * alpha_xy * p[:, None]
    rhs = gauss.T * alpha_yx * p[None, :]
    return float(np.max(np.abs(lhs - rhs)))


def mh_rejection_mass(layer, x, local_nodes=4001, width=10.0):
    """1 - integral N(y; x, s^2) a(x, y) dy for each x (1-D), on a local grid of +-width*s."""
    u = np.linspace(-width, width, local_nodes)
    h = u[1] - u[0]
    w = np.full(local_nodes, h)
    w[0] = w[-1] = h / 2
    phi = np.exp(-0.5 * u ** 2) / math.sqrt(2 * math.pi)
    out = np.empty(x.size)
    lp_x = layer.proposal.log_density(x[:, None])
    for lo in range(0, x.size, 256):
        xs = x[lo:lo + 256]
        ys = xs[:, None] + layer.sigma * u[None, :]
        lp_y = layer.proposal.log_density(ys.reshape(-1, 1)).reshape(ys.shape)
        alpha = np.minimum(1.0, np.exp(lp_y - lp_x[lo:lo + 256, None]))
        out[lo:lo + 256] = 1.0 - (alpha * phi[None, :]) @ w
    return out


def default_intervals(lo=-4.0, hi=4.0, count=20):
    edges = np.linspace(lo, hi, count + 1)
    return list(zip(edges[:-1], edges[1:]))


def _interval_indicator(values, intervals, h):
    """Indicator of [a, b] per interval, 1/2 on endpoints (trapezoid restricted to [a, b])."""
    tol = 1e-9 * h
    rows = []
    for a, b in intervals:
        inside = ((values > a + tol) & (values < b - tol)).astype(np.float64)
        edge = (np.abs(values - a) <= tol) | (np.abs(values - b) <= tol)
        rows.append(inside + 0.5 * edge)
    return np.stack(rows)


def _kernel_interval_masses(layer, log_p, grid, intervals, local_nodes):
    """Per-interval (integral K(x, B) p(x) dx, integral_B p) on ``grid``."""
    x = grid.axis(0)
    w = grid.axis_weights(0)
    h = x[1] - x[0]
    p = np.exp(log_p(x))
    p = p / np.dot(w, p)
    ind = _interval_indicator(x, intervals, h)
    target = ind @ (w * p)
    if not layer.has_density and not hasattr(layer, "continuous_log_density"):
        mapped = ad.value_of(layer.sample_forward(x[:, None], None))[:, 0]
        return _interval_indicator(mapped, intervals, h) @ (w * p), target
    xx = np.repeat(x, x.size)[:, None]
    yy = np.tile(x, x.size)[:, None]
    if hasattr(layer, "continuous_log_density"):
        log_k = layer.continuous_log_density(xx, yy)
        atom = mh_rejection_mass(layer, x, local_nodes)
    else:
        log_k = ad.value_of(layer.forward_log_density(xx, yy))
        atom = np.zeros_like(x)
    k = np.exp(log_k).reshape(x.size, x.size)  # [i, j] = k(x_i, y_j)
    density_y = (w * p) @ k  # integral k(x, y_j) p(x) dx
    kernel_mass = ind @ (w * density_y) + ind @ (w * atom * p)
    return kernel_mass, target


@dataclass
class StationarityResult:
    error: float
    refined_error: float
    guard_change: float
    guard_ok: bool
    masses: np.ndarray = field(repr=False)


def check_stationarity(layer, log_p, grid, intervals=None, tolerance=1e-4, local_nodes=2001):
    """max_B |integral K(x, B) p(x) dx - p(B)| for a 1-D kernel, with a refinement guard.

    ``log_p`` maps a 1-D array of nodes to log-density values (any constant).
    The atom of an MH kernel enters through its rejection mass. The guard
    recomputes on a grid with half the spacing (and a doubled local grid)
    and requires every interval integral to move by less than tolerance/2.
    """
    intervals = intervals or default_intervals()
    k1, t1 = _kernel_interval_masses(layer, log_p, grid, intervals, local_nodes)
    k2, t2 = _kernel_interval_masses(layer, log_p, grid.refined(), intervals, 2 * local_nodes - 1)
    change = float(max(np.max(np.abs(k2 - k1)), np.max(np.abs(t2 - t1))))
    return StationarityResult(
        error=float(np.max(np.abs(k1 - t1))),
        refined_error=float(np.max(np.abs(k2 - t2))),
        guard_change=change,
        guard_ok=change < tolerance / 2,
        masses=k1,
    )


def pushforward_log_density(layers, latent, x):
    """log p_{T#P_Z}(x) = log p_Z(T^{-1}(x)) + log|det grad T^{-1}(x)| for deterministic layers."""
    z = np.asarray(x, dtype=np.float64)
    acc = np.zeros(z.shape[0])
    for layer in reversed(layers):
        z, ld = layer.inverse_map(z)
        acc = acc + ld
    return latent.log_density(z) + acc


@dataclass
class PushforwardResult:
    normalization: float
    chi2: float
    chi2_threshold: float
    dof: int
    max_abs_z: float

    @property
    def normalization_error(self):
        return abs(self.normalization - 1.0)


def check_pushforward(layers, latent, grid, rng, n_samples=10 ** 6, bins=30, window=None,
                      cell_nodes=6, min_expected=5.0):
    """Integrate the change-of-variables density and compare it with a sample histogram.

    Cell masses come from Gauss-Legendre quadrature of the analytic density;
    cells with fewer than ``min_expected`` expected counts are pooled with the
    mass outside the histogram window.
    """
    dens = np.exp(pushforward_log_density(layers, latent, grid.points()))
    normalization = grid.integrate(dens)

    z = latent.sample(n_samples, rng)
    x = z
    for layer in layers:
        x = layer.forward_map(x)[0]
    dim = latent.dim
    if window is None:
        window = [grid.bounds[k] for k in range(dim)]
    edges = [np.linspace(lo, hi, bins + 1) for lo, hi in window]

    gl_u, gl_w = np.polynomial.legendre.leggauss(cell_nodes)
    if dim == 1:
        e = edges[0]
        half = np.diff(e) / 2
        mid = (e[:-1] + e[1:]) / 2
        pts = (mid[:, None] + half[:, None] * gl_u[None, :]).reshape(-1, 1)
        vals = np.exp(pushforward_log_density(layers, latent, pts)).reshape(bins, cell_nodes)
        masses = (vals @ gl_w) * half
    else:
        ex, ey = edges
        hx, hy = np.diff(ex) / 2, np.diff(ey) / 2
        mx, my = (ex[:-1] + ex[1:]) / 2, (ey[:-1] + ey[1:]) / 2
        px = (mx[:, None] + hx[:, None] * gl_u[None, :])  # (bins, q)
        py = (my[:, None] + hy[:, None] * gl_u[None, :])
        X = np.broadcast_to(px[:, :, None, None], (bins, cell_nodes, bins, cell_nodes))
        Y = np.broadcast_to(py[None, None, :, :], (bins, cell_nodes, bins, cell_nodes))
        pts = np.stack([X.ravel(), Y.ravel()], axis=1)
        vals = np.exp(pushforward_log_density(layers, latent, pts)).reshape(bins, cell_nodes, bins, cell_nodes)
        masses = np.einsum("iajb,a,b->ij", vals, gl_w, gl_w) * np.outer(hx, hy)

    chi2, threshold, dof, max_z = chi2_histogram_test(x, masses, edges, min_expected)
    return PushforwardResult(
        normalization=normalization,
        chi2=chi2,
        chi2_threshold=threshold,
        dof=dof,
        max_abs_z=max_z,
    )


def chi2_histogram_test(samples, cell_masses, edges, min_expected=5.0):
    """Pearson chi^2 of a histogram against cell probabilities.

    Cells expecting fewer than ``min_expected`` counts are pooled with the
    mass outside the window. Returns (statistic, 0.999 quantile, dof,
    max |standardized residual| over kept cells).
    """
    n = samples.shape[0]
    observed, _ = np.histogramdd(samples, bins=edges)
    expected = n * np.asarray(cell_masses)
    keep = expected >= min_expected
    obs_k, exp_k = observed[keep], expected[keep]
    stat = float(np.sum((obs_k - exp_k) ** 2 / exp_k))
    rest_obs, rest_exp = n - obs_k.sum(), n - exp_k.sum()
    buckets = int(keep.sum())
    if rest_exp >= min_expected:
        stat += float((rest_obs - rest_exp) ** 2 / rest_exp)
        buckets += 1
    dof = buckets - 1
    max_z = float(np.max(np.abs(obs_k - exp_k) / np.sqrt(exp_k)))
    return stat, float(stats.chi2.ppf(0.999, dof)), dof, max_z


def summary_moments(x):
    x = np.asarray(x, dtype=np.float64)
    ddof = 1 if x.shape[0] > 1 else 0
    return {"n": int(x.shape[0]), "mean": x.mean(axis=0).tolist(), "var": x.var(axis=0, ddof=ddof).tolist()}
