import math

import numpy as np
import pytest
import torch

from ctrscan.diffcore import (
    AttentionParams,
    CrossAttention,
    ParamStore,
    adam_step,
    dropout,
    finite_difference_check,
    layer_normalize,
    linear,
    make_generator,
    read_checkpoint,
    write_checkpoint,
)
from ctrscan.errors import ArgumentError, DimensionError, FormatError, TrainingError

torch.set_default_dtype(torch.float64)


def identity_params(d, m):
    eye = torch.eye(d)
    return AttentionParams(m, eye, eye, eye, eye)


def naive_attention(q_in, k_in, v_in, p: AttentionParams):
    """Loop-by-loop multi-head attention, written without batched tensor ops."""
    q_in, k_in, v_in = (t.detach().numpy() for t in (q_in, k_in, v_in))
    d_h = p.d_model // p.m
    heads = []
    for i in range(p.m):
        wq, wk, wv = (w.detach().numpy() for w in p.head_weights(i))
        Q, K, V = q_in @ wq, k_in @ wk, v_in @ wv
        out = np.zeros((Q.shape[0], d_h))
        for r in range(Q.shape[0]):
            logits = [float(np.dot(Q[r], K[s])) / math.sqrt(d_h) for s in range(K.shape[0])]
            mx = max(logits)
            w = [math.exp(v - mx) for v in logits]
            tot = sum(w)
            for s in range(K.shape[0]):
                out[r] += w[s] / tot * V[s]
        heads.append(out)
    return np.concatenate(heads, axis=1) @ p.w_o.detach().numpy()


def test_linear_examples():
    x = torch.tensor([[1.0, 2.0]])
    assert torch.equal(linear(x, torch.eye(2), torch.zeros(2)), x)
    assert torch.equal(linear(x, torch.tensor([[1.0], [1.0]]), torch.zeros(1)), torch.tensor([[3.0]]))
    b = torch.tensor([0.5, -1.0, 2.0])
    out = linear(torch.randn(4, 2), torch.zeros(2, 3), b)
    assert torch.equal(out, b.expand(4, 3))
    with pytest.raises(DimensionError):
        linear(x, torch.eye(3))


def test_attention_single_key_passes_value_through():
    v = torch.randn(1, 8)
    out = CrossAttention(8, 2)(torch.randn(3, 8), torch.randn(1, 8), v)
    ca = CrossAttention(8, 2)
    p = identity_params(8, 2)
    from ctrscan.diffcore import multihead_cross_attention

    out = multihead_cross_attention(torch.randn(3, 8), torch.randn(1, 8), v, p)
    torch.testing.assert_close(out, v.expand(3, 8))
    assert ca.params().d_model == 8


def test_attention_identical_keys_average_values():
    from ctrscan.diffcore import multihead_cross_attention

    k = torch.ones(5, 8)
    v = torch.randn(5, 8)
    out, w = multihead_cross_attention(torch.randn(2, 8), k, v, identity_params(8, 4), return_weights=True)
    torch.testing.assert_close(w, torch.full_like(w, 0.2))
    torch.testing.assert_close(out, v.mean(0).expand(2, 8))


def test_attention_matches_naive_loops():
    torch.manual_seed(0)
    ca = CrossAttention(8, 2)
    q, k, v = torch.randn(3, 8), torch.randn(3, 8), torch.randn(3, 8)
    np.testing.assert_allclose(ca(q, k, v).detach().numpy(), naive_attention(q, k, v, ca.params()), atol=1e-12)


def test_attention_rows_are_stochastic_and_key_permutation_invariant():
    from ctrscan.diffcore import multihead_cross_attention

    torch.manual_seed(1)
    ca = CrossAttention(16, 4)
    q, k, v = torch.randn(4, 16), torch.randn(9, 16), torch.randn(9, 16)
    out, w = multihead_cross_attention(q, k, v, ca.params(), return_weights=True)
    torch.testing.assert_close(w.sum(-1), torch.ones(w.shape[:-1]), atol=1e-6, rtol=0)
    perm = torch.randperm(9)
    torch.testing.assert_close(ca(q, k[perm], v[perm]), out)


def test_attention_rejects_bad_dims():
    with pytest.raises(DimensionError):
        CrossAttention(10, 3)
    with pytest.raises(DimensionError):
        CrossAttention(8, 2)(torch.randn(2, 8), torch.randn(3, 8), torch.randn(2, 8))


def test_layer_normalize_examples():
    out = layer_normalize(torch.full((1, 4), 3.0), 1.0, 0.0)
    assert torch.all(out == 0)
    out = layer_normalize(torch.tensor([[-1.0, 1.0]]), 1.0, 0.0, eps=1e-5)
    expected = 1 / math.sqrt(1 + 1e-5)
    torch.testing.assert_close(out, torch.tensor([[-expected, expected]]))
    shift = torch.tensor([0.3, -0.2, 1.0])
    torch.testing.assert_close(layer_normalize(torch.randn(5, 3), 0.0, shift), shift.expand(5, 3))


def test_dropout_contract():
    x = torch.randn(10, 10)
    assert torch.equal(dropout(x, 0.5, training=False), x)
    assert torch.equal(dropout(x, 0.0, training=True), x)
    with pytest.raises(ArgumentError):
        dropout(x, 1.0, True)
    ones = torch.ones(100_000)
    out = dropout(ones, 0.5, True, make_generator(0))
    survivors = float((out != 0).double().mean())
    assert abs(survivors - 0.5) < 0.01
    assert abs(float(out.mean()) - 1.0) < 0.02


def scalar_store(value=0.0):
    return ParamStore({"w": torch.tensor([value], requires_grad=True)})


def test_adam_zero_gradient_keeps_parameters():
    store = scalar_store(1.5)
    adam_step(store, {"w": torch.zeros(1)}, lr=0.1)
    assert store.params["w"].item() == 1.5
    assert store.state["w"].step == 1


def test_adam_first_step_moves_by_lr():
    store = scalar_store(0.0)
    adam_step(store, {"w": torch.ones(1)}, lr=1e-3)
    # m_hat = 1, v_hat = 1 after bias correction
    assert store.params["w"].item() == pytest.approx(-1e-3 / (1 + 1e-8), rel=1e-12)


def test_adam_matches_recurrence_and_torch():
    grads = [0.3, -1.2, 0.7, 2.0]
    store = scalar_store(0.5)
    ref = torch.tensor([0.5], requires_grad=True)
    opt = torch.optim.Adam([ref], lr=0.01)
    m = v = 0.0
    w = 0.5
    for t, g in enumerate(grads, 1):
        adam_step(store, {"w": torch.tensor([g])}, lr=0.01)
        ref.grad = torch.tensor([g])
        opt.step()
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        w -= 0.01 * (m / (1 - 0.9**t)) / (math.sqrt(v / (1 - 0.999**t)) + 1e-8)
    assert store.params["w"].item() == pytest.approx(w, rel=1e-12)
    assert store.params["w"].item() == pytest.approx(ref.item(), rel=1e-10)


def test_adam_step_is_invariant_to_gradient_scale():
    a, b = scalar_store(), scalar_store()
    for g in (0.5, -0.2, 0.9):
        adam_step(a, {"w": torch.tensor([g])}, lr=0.01)
        adam_step(b, {"w": torch.tensor([100 * g])}, lr=0.01)
    assert a.params["w"].item() == pytest.approx(b.params["w"].item(), rel=1e-6)


def test_adam_is_deterministic():
    a, b = scalar_store(0.2), scalar_store(0.2)
    for s in (a, b):
        adam_step(s, {"w": torch.tensor([0.37])}, lr=0.05)
    assert a.params["w"].item() == b.params["w"].item()


def test_adam_rejects_nan_gradient_with_path():
    store = ParamStore({"enc/layer0/weight": torch.zeros(2, requires_grad=True)})
    with pytest.raises(TrainingError, match="enc/layer0/weight"):
        adam_step(store, {"enc/layer0/weight": torch.tensor([0.0, float("nan")])})


def test_finite_difference_quadratic_and_negative_control():
    theta = torch.randn(5, requires_grad=True)
    store = ParamStore({"theta": theta})
    loss = lambda: 0.5 * (theta**2).sum()
    report = finite_difference_check(loss, store, n_probes=10, h=1e-5, tol=1e-8)
    assert report.passed and report.max_rel_error < 1e-8
    bad = {"theta": theta.detach() * 1.5}
    report = finite_difference_check(loss, store, n_probes=10, h=1e-5, tol=1e-4, grads=bad)
    assert not report.passed


def test_layers_pass_gradient_check():
    torch.manual_seed(3)
    ca = CrossAttention(8, 2)
    ln_scale = torch.randn(8, requires_grad=True)
    ln_shift = torch.randn(8, requires_grad=True)
    w = torch.randn(8, 3, requires_grad=True)
    b = torch.randn(3, requires_grad=True)
    store = ParamStore.from_modules({"ca": ca})
    store.params.update({"ln/scale": ln_scale, "ln/shift": ln_shift, "lin/w": w, "lin/b": b})
    q, kv = torch.randn(2, 4, 8), torch.randn(2, 5, 8)

    def loss():
        return linear(layer_normalize(ca(q, kv, kv), ln_scale, ln_shift), w, b).sin().sum()

    report = finite_difference_check(loss, store, n_probes=40, h=1e-5, tol=1e-4, seed=1)
    assert report.passed, report.max_rel_error


def test_param_store_paths():
    store = ParamStore.from_modules({"vrbca/ca_img": CrossAttention(8, 2)})
    assert set(store.params) == {f"vrbca/ca_img/{n}" for n in ("w_q", "w_k", "w_v", "w_o")}


def test_checkpoint_round_trip(tmp_path):
    arrays = {"align/img/w": np.arange(6, dtype=np.float32).reshape(2, 3), "cls/b": np.array([0.25], np.float32)}
    write_checkpoint(tmp_path / "m.ckpt", {"k": 6, "tau": 0.07}, arrays)
    assert (tmp_path / "m.ckpt").read_bytes()[:4] == b"CKPT"
    meta, back = read_checkpoint(tmp_path / "m.ckpt")
    assert meta == {"k": "6", "tau": "0.07"}
    for key, arr in arrays.items():
        np.testing.assert_array_equal(back[key], arr)
    (tmp_path / "bad.ckpt").write_bytes(b"NOPE")
    with pytest.raises(FormatError):
        read_checkpoint(tmp_path / "bad.ckpt")
