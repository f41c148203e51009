import math
import time

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from efl.errors import ConfigError, NumericError, ShapeError, UndefinedAnchorError
from efl.estimators import HiddenLayerClassifier
from efl.nnet import (
    ConvLayer,
    EncoderConfig,
    LossHistory,
    ParamStore,
    Tensor,
    attention_map,
    ce_loss,
    combined_loss,
    conv2d,
    domain_con_loss,
    embed,
    encoder_forward,
    external_attention,
    head_logits,
    init_encoder,
    lambda_schedule,
    self_attention_reference,
    sgd_momentum_step,
    softmax,
    supcon_loss,
)
from efl.nnet import autodiff as ad

from oracles import ce_bruteforce, central_difference, domain_con_bruteforce, supcon_bruteforce


def tiny_config(norm="double_norm"):
    return EncoderConfig(input_shape=(5, 6), convs=[ConvLayer(2), ConvLayer(3, (3, 3), (2, 2))],
                         memory_slots=4, embed_dim=6, proj_hidden=5, proj_dim=4, attention_norm=norm)


def rel_error(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(a) + np.linalg.norm(b), 1e-12)


def unit_rows(rng, n, d):
    Z = rng.normal(size=(n, d))
    return Z / np.linalg.norm(Z, axis=1, keepdims=True)


# ---- gradients -----------------------------------------------------------

@pytest.mark.parametrize("norm", ["double_norm", "softmax_only"])
def test_full_model_gradients_match_finite_differences(norm):
    cfg = tiny_config(norm)
    store = init_encoder(cfg, seed=3)
    assert store.n_parameters() <= 2000
    rng = np.random.default_rng(0)
    xs, ys = rng.normal(size=(6, 5, 6)), np.array([0, 0, 1, 1, 2, 2])
    xt, pseudo = rng.normal(size=(3, 5, 6)), np.array([0, 1, 2])

    def loss():
        g, z = encoder_forward(xs, store, cfg)
        _, zt = encoder_forward(xt, store, cfg)
        l_ce = ce_loss(head_logits(g, store), ys)
        l_con = supcon_loss(z, ys, tau=0.5) + domain_con_loss(zt, pseudo, z, ys, tau=0.5)
        return combined_loss(l_ce, l_con, 0.4)

    store.zero_grad()
    loss().backward()
    grads = store.grads()
    for name, p in store.items():
        num = central_difference(lambda: loss().item(), p.data, eps=1e-4)
        assert rel_error(grads[name], num) <= 1e-4, name


@pytest.mark.parametrize("op", [
    lambda x: ad.softmax(x, axis=0),
    lambda x: ad.softmax(x, axis=1),
    lambda x: ad.l1_normalize(ad.exp(x), axis=1),
    lambda x: ad.l2_normalize(x, axis=1),
    lambda x: ad.logsumexp(x, axis=1),
    lambda x: ad.log_softmax(x, axis=0),
    lambda x: ad.relu(x),
    lambda x: ad.sqrt(ad.exp(x)),
    lambda x: ad.log(ad.exp(x) + 1.0),
    lambda x: ad.reciprocal(ad.exp(x) + 1.0),
    lambda x: ad.transpose(x) @ x,
    lambda x: ad.concat([x, x * 2.0], axis=0),
    lambda x: ad.getitem(x, (slice(1, 3), [0, 2])),
    lambda x: ad.reshape(x, (2, 6)).mean(axis=0),
], ids=lambda f: "")
def test_layer_gradients_in_isolation(op):
    rng = np.random.default_rng(5)
    x = Tensor(rng.normal(size=(4, 3)) + 0.05, requires_grad=True)
    w = rng.normal(size=op(Tensor(x.data)).shape)

    def f():
        return float((op(Tensor(x.data)).data * w).sum())

    x.grad = None
    (op(x) * w).sum().backward()
    assert rel_error(x.grad, central_difference(f, x.data)) <= 1e-4


@pytest.mark.parametrize("stride,pad", [((1, 1), (1, 1)), ((2, 1), (0, 1)), ((2, 2), (1, 0))])
def test_conv2d_gradients(stride, pad):
    rng = np.random.default_rng(2)
    x = Tensor(rng.normal(size=(2, 2, 5, 6)), requires_grad=True)
    w = Tensor(rng.normal(size=(3, 2, 3, 2)), requires_grad=True)
    b = Tensor(rng.normal(size=3), requires_grad=True)
    out_shape = conv2d(x, w, b, stride, pad).shape
    G = rng.normal(size=out_shape)

    def f():
        return float((conv2d(Tensor(x.data), Tensor(w.data), Tensor(b.data), stride, pad).data * G).sum())

    (conv2d(x, w, b, stride, pad) * G).sum().backward()
    for t in (x, w, b):
        assert rel_error(t.grad, central_difference(f, t.data)) <= 1e-4


def test_conv2d_matches_direct_loops():
    rng = np.random.default_rng(8)
    x, w, b = rng.normal(size=(1, 2, 4, 5)), rng.normal(size=(3, 2, 2, 3)), rng.normal(size=3)
    out = conv2d(x, w, b, (1, 2), (0, 1)).data
    xp = np.pad(x, ((0, 0), (0, 0), (0, 0), (1, 1)))
    for o in range(3):
        for i in range(out.shape[2]):
            for j in range(out.shape[3]):
                want = b[o] + sum(xp[0, c, i + u, 2 * j + v] * w[o, c, u, v]
                                  for c in range(2) for u in range(2) for v in range(3))
                assert out[0, o, i, j] == pytest.approx(want, abs=1e-12)


def test_unused_parameter_gets_exact_zero_gradient():
    cfg = tiny_config()
    store = init_encoder(cfg, seed=0)
    g, _ = encoder_forward(np.ones((2, 5, 6)), store, cfg)
    ce_loss(head_logits(g, store), [0, 1]).backward()
    grads = store.grads()
    for name in ("proj.w1", "proj.b1", "proj.w2", "proj.b2"):
        assert np.all(grads[name] == 0.0)


def test_gradient_scales_linearly_with_constant_weight():
    cfg = tiny_config()
    rng = np.random.default_rng(1)
    x, y = rng.normal(size=(3, 5, 6)), [0, 1, 2]
    grads = []
    for scale in (1.0, 0.3):
        store = init_encoder(cfg, seed=4)
        g, _ = encoder_forward(x, store, cfg)
        (ce_loss(head_logits(g, store), y) * scale).backward()
        grads.append(store.grads())
    for k in grads[0]:
        np.testing.assert_allclose(grads[1][k], 0.3 * grads[0][k], rtol=1e-12, atol=1e-15)


def test_backward_requires_scalar():
    with pytest.raises(ShapeError):
        Tensor(np.ones(3), requires_grad=True).backward()


# ---- attention -----------------------------------------------------------

def _attention_inputs(rng, N=7, d=5, dp=4, S=6):
    return rng.normal(size=(N, d)), rng.normal(size=(d, dp)), rng.normal(size=(S, dp)), rng.normal(size=(S, dp))


@given(st.integers(1, 20), st.integers(0, 10 ** 6))
def test_external_attention_shape_and_map_normalization(N, seed):
    rng = np.random.default_rng(seed)
    F, W_q, M_k, M_v = _attention_inputs(rng, N=N)
    assert external_attention(F, W_q, M_k, M_v).shape == (N, 4)
    raw = softmax(Tensor(F @ W_q @ M_k.T), axis=-2).data
    np.testing.assert_allclose(raw.sum(axis=0), 1.0, atol=1e-6)
    assert np.all((raw >= 0) & (raw <= 1))
    A = attention_map(F, W_q, M_k)
    np.testing.assert_allclose(A.sum(axis=1), 1.0, atol=1e-6)
    A = attention_map(F, W_q, M_k, norm="softmax_only")
    np.testing.assert_allclose(A.sum(axis=1), 1.0, atol=1e-6)


@given(st.integers(0, 10 ** 6), st.sampled_from(["double_norm", "softmax_only"]))
def test_external_attention_slot_permutation_invariant(seed, norm):
    rng = np.random.default_rng(seed)
    F, W_q, M_k, M_v = _attention_inputs(rng)
    perm = rng.permutation(M_k.shape[0])
    a = external_attention(F, W_q, M_k, M_v, norm).data
    b = external_attention(F, W_q, M_k[perm], M_v[perm], norm).data
    np.testing.assert_allclose(a, b, rtol=1e-10, atol=1e-12)


def test_external_attention_matches_explicit_formula():
    rng = np.random.default_rng(6)
    F, W_q, M_k, M_v = _attention_inputs(rng)
    A = F @ W_q @ M_k.T
    A = np.exp(A - A.max(axis=0))
    A /= A.sum(axis=0)
    A /= A.sum(axis=1, keepdims=True)
    np.testing.assert_allclose(external_attention(F, W_q, M_k, M_v).data, A @ M_v, atol=1e-12)


def test_external_attention_shape_errors():
    rng = np.random.default_rng(0)
    F, W_q, M_k, M_v = _attention_inputs(rng)
    with pytest.raises(ShapeError):
        external_attention(F[:, :3], W_q, M_k, M_v)
    with pytest.raises(ShapeError):
        external_attention(F, W_q, M_k, M_v[:2])
    with pytest.raises(ConfigError):
        external_attention(F, W_q, M_k, M_v, norm="none")


def test_external_attention_scales_linearly():
    rng = np.random.default_rng(0)
    W_q, M_k, M_v = rng.normal(size=(32, 64)), rng.normal(size=(64, 64)), rng.normal(size=(64, 64))

    def timed(N):
        F = rng.normal(size=(N, 32))
        runs = []
        for _ in range(3):
            t = time.perf_counter()
            for _ in range(5):
                external_attention(F, W_q, M_k, M_v)
            runs.append(time.perf_counter() - t)
        return float(np.median(runs))

    timed(2000)  # warm-up
    assert timed(8000) / timed(4000) <= 2.5


def test_self_attention_single_element_returns_value():
    rng = np.random.default_rng(0)
    F = rng.normal(size=(1, 3))
    W = [rng.normal(size=(3, 2)) for _ in range(3)]
    np.testing.assert_allclose(self_attention_reference(F, *W), F @ W[2])


def test_self_attention_hand_case():
    F = np.array([[1.0, 0.0], [0.0, 1.0]])
    eye = np.eye(2)
    e = math.e
    want = np.array([[e / (e + 1), 1 / (e + 1)], [1 / (e + 1), e / (e + 1)]])
    np.testing.assert_allclose(self_attention_reference(F, eye, eye, eye), want, atol=1e-12)


def test_self_attention_rows_sum_to_one():
    rng = np.random.default_rng(1)
    # identity value projection of a one-hot basis exposes the attention rows
    out = self_attention_reference(np.eye(5), rng.normal(size=(5, 3)), rng.normal(size=(5, 3)), np.eye(5))
    np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-12)
    assert np.all(out > 0)


# ---- encoder -------------------------------------------------------------

def test_encoder_shapes_and_unit_norm():
    cfg = EncoderConfig()
    store = init_encoder(cfg, seed=0)
    x = np.random.default_rng(0).normal(size=(3, 11, 90))
    g, z = encoder_forward(x, store, cfg)
    assert g.shape == (3, cfg.embed_dim) and z.shape == (3, cfg.proj_dim)
    np.testing.assert_allclose(np.linalg.norm(z.data, axis=1), 1.0, atol=1e-6)
    g2, z2 = encoder_forward(x, store, cfg)
    np.testing.assert_array_equal(z.data, z2.data)


def test_encoder_identical_inputs_identical_outputs():
    cfg = tiny_config()
    store = init_encoder(cfg, seed=1)
    x = np.random.default_rng(0).normal(size=(5, 6))
    _, z = encoder_forward(np.stack([x, x]), store, cfg)
    np.testing.assert_array_equal(z.data[0], z.data[1])


def test_encoder_output_depends_on_input():
    cfg = tiny_config()
    store = init_encoder(cfg, seed=1)
    rng = np.random.default_rng(0)
    g = embed(rng.normal(size=(2, 5, 6)), store, cfg).data
    assert not np.allclose(g[0], g[1])


def test_encoder_rejects_wrong_shape():
    cfg = tiny_config()
    with pytest.raises(ShapeError):
        embed(np.zeros((2, 4, 6)), init_encoder(cfg), cfg)


def test_encoder_config_validation():
    with pytest.raises(ConfigError):
        EncoderConfig(embed_dim=0)
    with pytest.raises(ConfigError):
        EncoderConfig(attention_norm="other")
    with pytest.raises(ConfigError):
        ConvLayer(0)
    with pytest.raises(ConfigError):
        ConvLayer(4, (3, 3), (0, 1))
    assert EncoderConfig().feature_map_shape() == (32, 3, 6)


def test_default_encoder_is_small():
    store = init_encoder(EncoderConfig())
    assert 30_000 <= store.n_parameters() <= 150_000


# ---- losses --------------------------------------------------------------

def test_loss_oracles_on_random_batches():
    rng = np.random.default_rng(11)
    for _ in range(50):
        n = int(rng.integers(2, 17))
        Z = unit_rows(rng, n, 5)
        y = rng.integers(0, 3, size=n)
        tau = float(rng.uniform(0.1, 1.0))
        if any(np.sum(y == c) > 1 for c in set(y)):
            assert supcon_loss(Z, y, tau).item() == pytest.approx(supcon_bruteforce(Z, y, tau), abs=1e-6)
        m = int(rng.integers(1, 17))
        Zt = unit_rows(rng, m, 5)
        pseudo = rng.integers(0, 3, size=m)
        if any(p in set(y) for p in pseudo):
            got = domain_con_loss(Zt, pseudo, Z, y, tau).item()
            assert got == pytest.approx(domain_con_bruteforce(Zt, pseudo, Z, y, tau), abs=1e-6)


def test_supcon_two_identical_is_zero():
    z = np.array([[1.0, 0.0], [1.0, 0.0]])
    assert supcon_loss(z, [3, 3], tau=1.0).item() == pytest.approx(0.0, abs=1e-15)


def test_supcon_three_sample_case():
    Z = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    y = [0, 0, 1]
    assert supcon_loss(Z, y, tau=1.0).item() == pytest.approx(supcon_bruteforce(Z, y, 1.0), abs=1e-12)


def test_supcon_high_temperature_limit():
    rng = np.random.default_rng(2)
    Z = unit_rows(rng, 6, 4)
    y = np.array([0, 0, 0, 1, 1, 2])
    # uniform softmax over the 5 others: each anchor with positives contributes log 5
    assert supcon_loss(Z, y, tau=1e6).item() == pytest.approx(math.log(5), abs=1e-5)


def test_supcon_undefined_batches():
    Z = np.eye(3)
    with pytest.raises(UndefinedAnchorError):
        supcon_loss(Z, [0, 1, 2])
    assert supcon_loss(Z, [0, 1, 2], strict=False).item() == 0.0
    with pytest.raises(UndefinedAnchorError):
        supcon_loss(Z[:1], [0])


def test_domain_con_hand_example():
    zt = np.array([[1.0, 0.0]])
    zs = np.array([[1.0, 0.0], [0.0, 1.0]])
    want = -math.log(math.e / (math.e + 1))
    assert domain_con_loss(zt, [2], zs, [2, 5], tau=1.0).item() == pytest.approx(want, abs=1e-12)
    assert want == pytest.approx(0.3133, abs=1e-4)


def test_domain_con_all_positive_identical():
    # every source sample is a positive at equal similarity: each log term is log(1/4)
    z = np.array([[0.6, 0.8]])
    zs = np.repeat(z, 4, axis=0)
    got = domain_con_loss(z, [1], zs, [1] * 4, tau=0.5).item()
    assert got == pytest.approx(math.log(4), abs=1e-12)
    assert got == pytest.approx(domain_con_bruteforce(z, [1], zs, [1] * 4, 0.5), abs=1e-12)


def test_domain_con_no_positive():
    with pytest.raises(UndefinedAnchorError):
        domain_con_loss(np.eye(2), [0, 0], np.eye(2), [1, 1])


def test_ce_uniform_logits_is_log_six():
    assert abs(ce_loss(np.zeros((4, 6)), [0, 1, 2, 5]).item() - math.log(6)) <= 1e-9


def test_ce_matches_oracle_and_margin_limit():
    rng = np.random.default_rng(3)
    L = rng.normal(size=(3, 6))
    y = [1, 4, 0]
    assert ce_loss(L, y).item() == pytest.approx(ce_bruteforce(L, y), abs=1e-12)
    losses = [ce_loss(np.eye(6)[y] * m, y).item() for m in (1, 5, 20, 40)]
    assert all(a > b for a, b in zip(losses, losses[1:])) and losses[-1] < 1e-15


def test_ce_label_validation():
    with pytest.raises(ConfigError):
        ce_loss(np.zeros((2, 6)), [0, 6])
    with pytest.raises(ConfigError):
        ce_loss(np.zeros((2, 6)), [0])


@pytest.mark.parametrize("lam,want", [(1.0, 2.0), (0.0, 4.0), (0.5, 3.0)])
def test_combined_loss(lam, want):
    assert combined_loss(Tensor(2.0), Tensor(4.0), lam).item() == want


def test_combined_loss_rejects_out_of_range():
    with pytest.raises(ConfigError):
        combined_loss(Tensor(1.0), Tensor(1.0), 1.5)


@given(st.lists(st.floats(-30, 30), min_size=2, max_size=8))
def test_softmax_rows_sum_to_one(row):
    p = softmax(Tensor(np.array([row])), axis=-1).data
    assert abs(p.sum() - 1.0) <= 1e-6
    assert np.all((p >= 0) & (p <= 1))


# ---- lambda schedule -----------------------------------------------------

def test_lambda_first_two_iterations():
    h = LossHistory()
    assert lambda_schedule(h, 1) == 0.5
    h.record(3.0, 1.0)
    h.record(1.0, 9.0)
    assert lambda_schedule(h, 2) == 0.5


def test_lambda_equal_and_unequal_ratios():
    h = LossHistory()
    h.record(2.0, 4.0)
    h.record(1.0, 2.0)
    assert lambda_schedule(h, 3) == 0.5
    h = LossHistory()
    h.record(1.0, 1.0)
    h.record(2.0, 1.0)
    want = math.exp(2) / (math.exp(2) + math.e)
    assert lambda_schedule(h, 3) == pytest.approx(want, abs=1e-12)
    assert want == pytest.approx(0.7311, abs=1e-4)


def test_lambda_degenerate_history_clamps_ratio():
    h = LossHistory()
    h.record(0.0, 1.0)
    h.record(5.0, 1.0)
    assert lambda_schedule(h, 3) == 0.5


@given(st.lists(st.tuples(st.floats(1e-6, 1e6), st.floats(1e-6, 1e6)), min_size=2, max_size=10))
def test_lambda_strictly_inside_unit_interval(pairs):
    h = LossHistory()
    for i, (a, b) in enumerate(pairs, start=1):
        h.record(a, b)
        lam = lambda_schedule(h, i + 1)
        assert 0.0 < lam < 1.0


def test_loss_history_rejects_non_finite():
    with pytest.raises(NumericError):
        LossHistory().record(float("nan"), 1.0)
    with pytest.raises(ConfigError):
        lambda_schedule(LossHistory(), 0)


# ---- optimizer -----------------------------------------------------------

def _store(value):
    s = ParamStore()
    s.add("w", np.array(value, dtype=float))
    return s


def test_sgd_zero_gradient_is_noop():
    s = _store([1.0, -2.0])
    sgd_momentum_step(s, {"w": np.zeros(2)})
    np.testing.assert_array_equal(s["w"].data, [1.0, -2.0])


def test_sgd_first_step_and_two_step_displacement():
    g = np.array([1.0, -3.0])
    s = _store([0.0, 0.0])
    sgd_momentum_step(s, {"w": g}, lr=0.1, momentum=0.9)
    np.testing.assert_allclose(s["w"].data, -0.1 * g, rtol=1e-15)
    sgd_momentum_step(s, {"w": g}, lr=0.1, momentum=0.9)
    np.testing.assert_allclose(s["w"].data, -0.29 * g, rtol=1e-14)


def test_training_step_with_zero_lr_is_bit_identical():
    cfg = tiny_config()
    store = init_encoder(cfg, seed=2)
    before = {k: p.data.copy() for k, p in store.items()}
    g, _ = encoder_forward(np.random.default_rng(0).normal(size=(2, 5, 6)), store, cfg)
    ce_loss(head_logits(g, store), [0, 1]).backward()
    sgd_momentum_step(store, lr=0.0)
    for k, p in store.items():
        assert np.array_equal(p.data, before[k])


def test_sgd_rejects_bad_gradients():
    s = _store([0.0])
    with pytest.raises(NumericError):
        sgd_momentum_step(s, {"w": np.array([np.inf])})
    with pytest.raises(ShapeError):
        sgd_momentum_step(s, {"w": np.zeros(2)})


def test_param_store_state_round_trip():
    store = init_encoder(tiny_config(), seed=9)
    store.velocity["attn.M_k"][:] = 1.5
    store.step = 7
    other = init_encoder(tiny_config(), seed=1)
    other.load_state(store.state())
    for k in store.state():
        np.testing.assert_array_equal(store.state()[k], other.state()[k])
    with pytest.raises(ShapeError):
        other.load_state({"nope": np.zeros(1)})
    with pytest.raises(ConfigError):
        store.add("head.b", np.zeros(6))


# ---- classifier ----------------------------------------------------------

def test_classifier_separates_toy_embeddings():
    rng = np.random.default_rng(0)
    X = np.vstack([rng.normal(-2, 0.5, size=(40, 4)), rng.normal(2, 0.5, size=(40, 4))])
    y = np.repeat([0, 1], 40)
    # 80 samples / batch 64 = 2 steps per epoch; 100 epochs = 200 steps
    clf = HiddenLayerClassifier(epochs=100, batch_size=64).fit(X, y)
    assert clf.score(X, y) == 1.0


def test_untrained_classifier_near_chance():
    rng = np.random.default_rng(1)
    X = rng.normal(size=(600, 8))
    y = np.repeat(np.arange(6), 100)
    clf = HiddenLayerClassifier(epochs=0).fit(X, y)
    assert clf.decision_function(X).shape == (600, 6)
    assert abs(clf.score(X, y) - 1 / 6) <= 0.1
