import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from snfkit import autodiff as ad
from snfkit.autodiff import Adam, ContractViolation, Mlp, ParamStore, Tape
from snfkit.densities import GaussianMixture, TwoMoons


def tape_grad(store, build):
    store.zero_grad()
    tape = Tape()
    out = build(tape)
    tape.backward(out)
    return store.grad.copy(), float(out.value)


def fd_grad(store, build, h=1e-6):
    g = np.zeros_like(store.data)
    for i in range(store.data.size):
        old = store.data[i]
        store.data[i] = old + h
        up = float(ad.value_of(build(None)))
        store.data[i] = old - h
        down = float(ad.value_of(build(None)))
        store.data[i] = old
        g[i] = (up - down) / (2 * h)
    return g


def params(tape, store, name):
    return store.view(name) if tape is None else tape.param(store, name)


def assert_grad_ok(store, build, rtol=1e-6, atol=1e-8):
    g, _ = tape_grad(store, build)
    np.testing.assert_allclose(g, fd_grad(store, build), rtol=rtol, atol=atol)


@pytest.fixture
def store(rng):
    s = ParamStore()
    s.add("a", (3, 4), rng.standard_normal((3, 4)))
    s.add("b", (4,), rng.standard_normal(4))
    s.add("c", (3, 4), rng.uniform(0.5, 2.0, (3, 4)))
    return s


def test_elementwise_ops(store):
    def build(tape):
        a, b, c = (params(tape, store, n) for n in "abc")
        y = (a * b - c / (1.5 + b * b)) ** 2 + ad.exp(-a) * ad.tanh(b) + ad.log(c) - (-a)
        return ad.sum(ad.square(y)) * 0.01 + ad.mean(1.0 / c) + ad.sum(2.0 - a)
    assert_grad_ok(store, build)


def test_reductions_indexing_and_concat(store):
    def build(tape):
        a, b, c = (params(tape, store, n) for n in "abc")
        s = ad.sum(a * c, axis=1)
        cat = ad.concat([ad.take(a, (slice(None), slice(0, 2))), c[:, 1:3]], axis=1)
        m = ad.mean(cat, axis=0)
        return ad.sum(s * s) + ad.sum(m * b[:4]) + ad.sum(a[1] * b)
    assert_grad_ok(store, build)


def test_matmul(rng):
    s = ParamStore()
    s.add("w", (3, 2), rng.standard_normal((3, 2)))
    x = rng.standard_normal((5, 3))

    def build(tape):
        w = params(tape, s, "w")
        xx = x if tape is None else tape.constant(x)
        return ad.sum(ad.tanh(xx @ w))
    assert_grad_ok(s, build)


@pytest.mark.parametrize("model", [GaussianMixture.circle(4, 2.0, 0.7), TwoMoons()])
def test_density_primitives_differentiate_through_points(model, rng):
    s = ParamStore()
    s.add("x", (6, 2), 1.5 * rng.standard_normal((6, 2)))

    def build(tape):
        x = params(tape, s, "x")
        score = ad.grad_log_density(model, x)
        return ad.sum(ad.log_density(model, x)) + ad.sum(score * score) * 0.1
    assert_grad_ok(s, build, rtol=1e-5, atol=1e-7)


def test_gaussian_log_density_primitives(rng):
    s = ParamStore()
    s.add("x", (4, 3), rng.standard_normal((4, 3)))
    s.add("m", (4, 3), rng.standard_normal((4, 3)))
    s.add("lv", (4, 3), 0.3 * rng.standard_normal((4, 3)))

    def build(tape):
        x, m, lv = (params(tape, s, n) for n in ("x", "m", "lv"))
        return ad.sum(ad.gaussian_diag_log_density(x, m, lv)) + ad.sum(ad.gaussian_iso_log_density(x, m, 0.7))
    assert_grad_ok(s, build)
    from scipy import stats
    x, m, lv = s.view("x"), s.view("m"), s.view("lv")
    ref = [stats.multivariate_normal(m[i], np.diag(np.exp(lv[i]))).logpdf(x[i]) for i in range(4)]
    np.testing.assert_allclose(ad.gaussian_diag_log_density(x, m, lv), ref, rtol=1e-12)


@given(rows=st.integers(1, 4), cols=st.integers(1, 4), seed=st.integers(0, 1000))
def test_broadcast_gradients_unbroadcast(rows, cols, seed):
    rng = np.random.default_rng(seed)
    s = ParamStore()
    s.add("m", (rows, cols), rng.standard_normal((rows, cols)))
    s.add("v", (cols,), rng.standard_normal(cols))
    s.add("k", (), rng.standard_normal(()))

    def build(tape):
        m, v, k = (params(tape, s, n) for n in "mvk")
        return ad.sum(ad.tanh(m * v + k) * (v - k))
    g, _ = tape_grad(s, build)
    assert g.shape == s.data.shape
    np.testing.assert_allclose(g, fd_grad(s, build), rtol=1e-6, atol=1e-8)


def test_backward_requires_scalar_root(store):
    tape = Tape()
    a = tape.param(store, "a")
    with pytest.raises(ContractViolation):
        tape.backward(a)
    with pytest.raises(ContractViolation):
        Tape().backward(ad.sum(a))


def test_param_leaf_is_shared_within_tape(store):
    tape = Tape()
    assert tape.param(store, "a") is tape.param(store, "a")
    g, _ = tape_grad(store, lambda t: ad.sum(t.param(store, "b")) + ad.sum(t.param(store, "b")))
    np.testing.assert_array_equal(store.grad_view("b"), 2.0)


def test_constants_receive_no_gradient(store):
    g, _ = tape_grad(store, lambda t: ad.sum(t.constant(np.ones(4)) * t.param(store, "b")))
    np.testing.assert_array_equal(store.grad_view("a"), 0.0)
    np.testing.assert_array_equal(store.grad_view("b"), 1.0)


def test_mlp_zero_init_and_gradients(rng):
    s = ParamStore()
    net = Mlp(s, "net", [2, 5, 3], rng)
    x = rng.standard_normal((7, 2))
    assert np.array_equal(net(x), np.zeros((7, 3)))
    s.data[:] = 0.5 * rng.standard_normal(s.data.size)
    assert_grad_ok(s, lambda tape: ad.sum(ad.square(net(x if tape is None else tape.constant(x)))))
    with pytest.raises(ContractViolation):
        net(np.zeros((2, 3)))


def test_store_layout_and_checkpoint_roundtrip(tmp_path, rng):
    s = ParamStore()
    Mlp(s, "net", [2, 4, 1], rng, zero_last=False)
    s.data[:] = rng.standard_normal(s.data.size) / 3.0
    path = tmp_path / "ck.json"
    ad.save_checkpoint(path, s, config={"k": 1}, extra={"step": 3})
    payload = ad.read_checkpoint(path)
    assert payload["config"] == {"k": 1} and payload["step"] == 3
    t = ParamStore()
    Mlp(t, "net", [2, 4, 1])
    t.load_dict(payload)
    assert np.array_equal(s.data, t.data)
    u = ParamStore()
    Mlp(u, "net", [2, 5, 1])
    with pytest.raises(ContractViolation):
        u.load_dict(payload)
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"format": "other"}))
    with pytest.raises(ContractViolation):
        ad.read_checkpoint(bad)


def test_duplicate_segment_rejected():
    s = ParamStore()
    s.add("w", (2,))
    with pytest.raises(ContractViolation):
        s.add("w", (2,))
    assert s.segment_of(1) == "w"


def test_adam_first_step_and_bias_correction():
    s = ParamStore()
    s.add("w", (3,), [1.0, 2.0, 3.0])
    opt = Adam(s, lr=0.1)
    g = np.array([2.0, -0.5, 1e-3])
    s.grad[:] = g
    opt.step()
    # with bias correction the first step is lr * g / (|g| + eps), close to lr * sign(g)
    np.testing.assert_allclose(s.data, [1.0, 2.0, 3.0] - 0.1 * g / (np.abs(g) + 1e-8), rtol=1e-14)
    np.testing.assert_allclose(s.data, [0.9, 2.1, 2.9], atol=1e-6)
    opt.lr = 0.0
    before = s.data.copy()
    opt.step()
    assert np.array_equal(s.data, before)


def test_adam_reports_nonfinite_segment():
    s = ParamStore()
    s.add("good", (2,))
    s.add("bad", (2,))
    s.grad[3] = np.nan
    with pytest.raises(FloatingPointError, match="bad"):
        Adam(s).step()
