import csv

import numpy as np
import pytest

from snfkit import autodiff as ad
from snfkit import fixtures as fx
from snfkit import training
from snfkit.autodiff import ContractViolation
from snfkit.chain import NonFiniteError
from snfkit.config import build_chain, parse_config
from snfkit.training import TrainConfig, TrainingDiverged, elbo, metrics_header, nf_loss, snf_loss, train

SMALL = """
seed: 3
target: {kind: gaussian, mean: [2.0], var: 0.5}
latent: {dim: 1}
chain:
  layers:
    - {kind: affine}
    - {kind: langevin, a1: 0.05}
    - {kind: coupling, hidden: [8]}
train: {steps: 60, batch_size: 64, lr: 0.02, eval_every: 20, eval_samples: 200, checkpoint_every: 30}
"""


def small_chain():
    cfg = parse_config(SMALL)
    return cfg, build_chain(cfg)


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(steps=0)
    with pytest.raises(ValueError):
        TrainConfig(lr=-1.0)


def test_identity_chain_loss_is_gaussian_kl():
    chain = fx.identity_chain()
    data = chain.target.sample(200_000, np.random.default_rng(0))
    rep = snf_loss(chain, data, np.random.default_rng(1))
    assert abs(rep.loss - fx.IDENTITY_KL) < 4 * rep.std_error
    assert rep.offset_known


def test_nf_loss_requires_deterministic_layers():
    with pytest.raises(ContractViolation):
        nf_loss(fx.gradient_chain(), np.zeros((2, 2)))


def test_vae_loss_equals_snf_minus_log_evidence():
    model = fx.linear_gaussian_vae()
    chain = model.chain(mismatch=True)
    x = chain.target.sample(500, np.random.default_rng(0))
    snf = snf_loss(chain, x, np.random.default_rng(4)).per_sample
    e = elbo(chain.layers[0], x, np.random.default_rng(4))
    np.testing.assert_allclose(snf, -e + chain.target.log_density(x), atol=1e-12)
    assert e.mean() < chain.target.log_density(x).mean()  # mismatched encoder: strict bound on average


def test_training_reduces_loss_and_writes_metrics(tmp_path):
    cfg, chain = small_chain()
    metrics = tmp_path / "m.csv"
    ck = tmp_path / "ck.json"
    result = train(chain, cfg.train_config(), metrics_path=metrics, checkpoint_path=ck)
    rows = list(csv.reader(metrics.open()))
    assert rows[0] == metrics_header(3)
    assert len(rows) == 61
    assert [r[-1] != "" for r in rows[1:]].count(True) == 3
    first = np.mean([float(r[1]) for r in rows[1:11]])
    last = np.mean([float(r[1]) for r in rows[-10:]])
    assert last < first
    assert result.last_good_step == 60
    assert ad.read_checkpoint(ck)["step"] == 60


def test_training_is_deterministic(tmp_path):
    outs = []
    for k in range(2):
        cfg, chain = small_chain()
        train(chain, cfg.train_config(), metrics_path=tmp_path / f"m{k}.csv")
        outs.append((tmp_path / f"m{k}.csv").read_bytes())
    assert outs[0] == outs[1]


def test_zero_learning_rate_keeps_parameters():
    cfg, chain = small_chain()
    before = chain.store.data.copy()
    tc = cfg.train_config()
    tc.lr = 0.0
    tc.steps = 5
    train(chain, tc)
    assert np.array_equal(chain.store.data, before)


def test_divergence_reports_step_and_keeps_checkpoint(tmp_path, monkeypatch):
    cfg, chain = small_chain()
    real = training.snf_loss
    calls = {"n": 0}

    def flaky(*args, **kwargs):
        calls["n"] += 1
        if calls["n"] == 35:
            raise NonFiniteError("injected", layer=2, term="langevin log-weight")
        return real(*args, **kwargs)

    monkeypatch.setattr(training, "snf_loss", flaky)
    ck = tmp_path / "ck.json"
    with pytest.raises(TrainingDiverged) as exc:
        train(chain, cfg.train_config(), checkpoint_path=ck)
    assert exc.value.step == 35
    assert ad.read_checkpoint(ck)["step"] == 30
