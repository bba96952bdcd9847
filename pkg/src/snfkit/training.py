"""Losses (NF, SNF, ELBO) and the Adam training loop over reverse paths."""
from __future__ import annotations

import csv
import logging
import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ContractViolation
from .chain import NonFiniteError, sample_forward, sample_reverse, validate_chain
from .densities import Gaussian

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    steps: int = 1000
    batch_size: int = 256
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    eval_every: int = 250
    eval_samples: int = 1000
    checkpoint_every: int = 1000

    def __post_init__(self):
        for name in ("steps", "batch_size", "eval_every", "eval_samples", "checkpoint_every"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be a positive integer")
        if self.lr < 0:
            raise ValueError("lr must be non-negative")


@dataclass
class LossReport:
    """Batch loss with per-layer diagnostics.

    ``offset_known`` is False when p_X is unnormalized: the loss is then the
    path KL plus an unknown constant (gradients are unaffected).
    """

    loss: float
    layer_means: list
    batch_size: int
    per_sample: np.ndarray
    grad_norm: float = float("nan")
    step: int = 0
    offset_known: bool = True
    node: object = field(default=None, repr=False)

    @property
    def std_error(self):
        n = self.per_sample.size
        return float(np.std(self.per_sample, ddof=1) / math.sqrt(n)) if n > 1 else float("nan")


def snf_loss(chain, data, rng, tape=None):
    """Monte-Carlo path KL: mean of the path log-weight over reverse paths from ``data``."""
    path = sample_reverse(chain, data, rng, tape)
    total = path.log_weight_sum
    node = ad.mean(total) if tape is not None else None
    per_sample = ad.value_of(total)
    value = float(np.mean(per_sample))
    if not math.isfinite(value):
        means = [float(np.mean(ad.value_of(w))) for w in path.layer_weights]
        raise NonFiniteError(f"non-finite SNF loss; per-layer mean weights {means}")
    return LossReport(
        loss=value,
        layer_means=[float(np.mean(ad.value_of(w))) for w in path.layer_weights],
        batch_size=per_sample.size,
        per_sample=per_sample,
        offset_known=bool(getattr(chain.target, "normalized", False)),
        node=node,
    )


def nf_loss(chain, data, tape=None):
    """-log p_Z(T^{-1}(x)) - log|det grad T^{-1}(x)| per sample, via the inverse maps."""
    for t, layer in enumerate(chain.layers, start=1):
        if layer.kind != "deterministic":
            raise ContractViolation(f"nf_loss needs deterministic layers; layer {t} is {layer.kind}")
    x = tape.constant(np.asarray(data, dtype=np.float64)) if tape is not None else np.asarray(data, dtype=np.float64)
    inv_logdet = 0.0
    for layer in reversed(chain.layers):
        x, ld = layer.inverse_map(x)
        inv_logdet = inv_logdet + ld
    total = -ad.log_density(chain.latent, x) - inv_logdet
    per_sample = ad.value_of(total)
    return LossReport(
        loss=float(np.mean(per_sample)),
        layer_means=[],
        batch_size=per_sample.size,
        per_sample=np.broadcast_to(per_sample, (ad.value_of(x).shape[0],)).copy(),
        node=ad.mean(total) if tape is not None else None,
    )


def elbo(vae, x, rng, n_mc=1, latent=None):
    """Per-sample ELBO E_q[log p_theta(x|z) + log p_Z(z) - log q_phi(z|x)] by reparametrized draws."""
    if n_mc < 1:
        raise ValueError("n_mc must be >= 1")
    latent = latent or Gaussian.standard(vae.in_dim)
    acc = 0.0
    for _ in range(n_mc):
        z = vae.sample_reverse(x, rng)
        acc = acc + (vae.forward_log_density(z, x) + ad.log_density(latent, z)
                     - vae.reverse_log_density(x, z))
    return acc * (1.0 / n_mc)


def vae_loss(vae, data, rng, latent=None, n_mc=1):
    """Negative batch-mean ELBO."""
    return -ad.mean(elbo(vae, data, rng, n_mc, latent))


class TrainingDiverged(RuntimeError):
    def __init__(self, step, message):
        super().__init__(f"step {step}: {message}")
        self.step = step


def metrics_header(n_layers):
    return ["step", "loss", "grad_norm"] + [f"weight_{t}" for t in range(1, n_layers + 1)] + ["energy_distance"]


def _fmt(x):
    return "" if x is None else repr(float(x))


@dataclass
class TrainResult:
    rows: list
    last_good_step: int
    eval_target: np.ndarray


def train(chain, config, metrics_path=None, checkpoint_path=None, checkpoint_extra=None,
          on_checkpoint=None):
    """Minimize the SNF loss with Adam on batches drawn from ``chain.target``.

    RNG streams for data, paths and evaluation are spawned from
    ``config.seed`` so a rerun reproduces every number bit for bit. Metric rows
    follow :func:`metrics_header`; ``energy_distance`` is filled every
    ``eval_every`` steps and at the last step.
    """
    from .evaluation import energy_distance

    problems = validate_chain(chain)
    if problems:
        raise ContractViolation("; ".join(problems))
    data_seq, path_seq, eval_seq = np.random.SeedSequence(config.seed).spawn(3)
    data_rng = np.random.default_rng(data_seq)
    path_rng = np.random.default_rng(path_seq)
    eval_rng = np.random.default_rng(eval_seq)
    eval_target = chain.target.sample(config.eval_samples, eval_rng)

    opt = ad.Adam(chain.store, config.lr, config.beta1, config.beta2, config.eps)
    rows = []
    last_good = 0
    fh = writer = None
    if metrics_path is not None:
        fh = open(metrics_path, "w", newline="")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(metrics_header(len(chain.layers)))

    def checkpoint(step):
        nonlocal last_good
        last_good = step
        if checkpoint_path is not None:
            tmp = f"{checkpoint_path}.tmp"
            ad.save_checkpoint(tmp, chain.store, extra=dict(checkpoint_extra or {}, step=step))
            os.replace(tmp, checkpoint_path)
        if on_checkpoint is not None:
            on_checkpoint(step)

    try:
        checkpoint(0)
        for step in range(1, config.steps + 1):
            data = chain.target.sample(config.batch_size, data_rng)
            chain.store.zero_grad()
            tape = ad.Tape()
            try:
                report = snf_loss(chain, data, path_rng, tape)
                tape.backward(report.node)
                grad_norm = float(np.linalg.norm(chain.store.grad))
                if not math.isfinite(grad_norm):
                    raise NonFiniteError("non-finite gradient norm")
                opt.step()
            except (NonFiniteError, FloatingPointError) as exc:
                raise TrainingDiverged(step, str(exc)) from exc
            if not np.all(np.isfinite(chain.store.data)):
                raise TrainingDiverged(step, "parameters became non-finite")
            ed = None
            if step % config.eval_every == 0 or step == config.steps:
                gen = sample_forward(chain, config.eval_samples, eval_rng).states[-1]
                ed = energy_distance(gen, eval_target)
            row = [step, report.loss, grad_norm, *report.layer_means, ed]
            rows.append(row)
            if writer is not None:
                writer.writerow([str(step)] + [_fmt(v) for v in row[1:]])
            if ed is not None:
                log.info("step %d loss %.6g grad %.3g energy distance %.4g", step, report.loss, grad_norm, ed)
            if step % config.checkpoint_every == 0 or step == config.steps:
                checkpoint(step)
    finally:
        if fh is not None:
            fh.close()
    return TrainResult(rows, last_good, eval_target)
