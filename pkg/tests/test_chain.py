import csv

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from snfkit import fixtures as fx
from snfkit.autodiff import ContractViolation, ParamStore
from snfkit.chain import (
    Chain,
    NonFiniteError,
    path_log_weight,
    sample_forward,
    sample_reverse,
    validate_chain,
    write_paths_csv,
)
from snfkit.densities import Gaussian
from snfkit.layers import CouplingLayer, MHLayer, VaeLayer
from snfkit.training import nf_loss


def test_validate_reports_dimension_mismatch():
    store = ParamStore()
    layers = [VaeLayer(store, "v", 1, 2), CouplingLayer(store, "c", 3)]
    problems = validate_chain(Chain(Gaussian.standard(1), Gaussian.standard(3), layers, store))
    assert any("dimension mismatch at index 1" in p for p in problems)
    assert validate_chain(fx.gradient_chain()) == []


def test_validate_reports_target_and_proposal_dims():
    chain = Chain(Gaussian.standard(2), Gaussian.standard(3), [MHLayer(2, 0.5, Gaussian.standard(1))])
    problems = validate_chain(chain)
    assert any("proposal" in p for p in problems)
    assert any("target dim" in p for p in problems)


def test_kernel_capabilities():
    chain = fx.gradient_chain()
    kinds = [(layer.kind, layer.forward.has_density) for layer in chain.layers]
    assert kinds == [("vae", True), ("deterministic", False), ("langevin", True), ("diffusion", True),
                     ("mh", False)]
    assert chain.layers[0].forward.out_dim == 2 and chain.layers[0].reverse.out_dim == 1
    assert chain.layers[4].forward.log_density is None


def test_forward_and_reverse_shapes():
    chain = fx.gradient_chain()
    fwd = sample_forward(chain, 11, np.random.default_rng(0))
    assert [s.shape for s in fwd.values()] == [(11, d) for d in chain.dims]
    rev = sample_reverse(chain, chain.target.sample(7, np.random.default_rng(1)), np.random.default_rng(2))
    assert [s.shape for s in rev.values()] == [(7, d) for d in chain.dims]
    assert len(rev.layer_weights) == 5 and rev.log_weight_sum.shape == (7,)


def test_path_weight_is_sum_of_terms():
    chain = fx.gradient_chain()
    path = sample_reverse(chain, chain.target.sample(5, np.random.default_rng(1)), np.random.default_rng(2))
    s = path.values()
    expected = chain.target.log_density(s[-1]) - chain.latent.log_density(s[0]) + sum(path.layer_weights)
    np.testing.assert_allclose(path.log_weight_sum, expected, atol=1e-12)
    # forward paths get the same weight formula
    fwd = sample_forward(chain, 5, np.random.default_rng(3))
    assert np.all(np.isfinite(path_log_weight(chain, fwd)))


def test_reverse_rejects_wrong_data_shape():
    with pytest.raises(ContractViolation):
        sample_reverse(fx.gradient_chain(), np.zeros((3, 1)), np.random.default_rng(0))


def test_nonfinite_state_names_layer():
    chain = fx.identity_chain()
    chain.store.view("layers.0.scale.b1")[:] = -1e3  # exp(-s) overflows in the inverse map
    with pytest.raises(NonFiniteError) as exc, np.errstate(over="ignore"):
        sample_reverse(chain, np.full((3, 1), 2.0), np.random.default_rng(0))
    assert exc.value.layer == 1 and "layer 1" in str(exc.value)


@given(seed=st.integers(0, 10_000))
def test_nf_equals_snf_for_deterministic_chains(seed):
    chain = fx.deterministic_chain(seed=seed)
    data = chain.target.sample(50, np.random.default_rng(seed))
    snf = sample_reverse(chain, data, None).log_weight_sum
    np.testing.assert_allclose(nf_loss(chain, data).per_sample, snf - chain.target.log_density(data),
                               atol=1e-10, rtol=0)


def test_write_paths_csv(tmp_path):
    chain = fx.gradient_chain()
    path = sample_reverse(chain, chain.target.sample(4, np.random.default_rng(1)), np.random.default_rng(2))
    out = tmp_path / "paths.csv"
    write_paths_csv(path, out)
    rows = list(csv.reader(out.open()))
    assert rows[0][:3] == ["x0_0", "x1_0", "x1_1"] and rows[0][-1] == "log_weight_sum"
    assert len(rows) == 5
    assert float(rows[1][-1]) == float(path.log_weight_sum[0])
