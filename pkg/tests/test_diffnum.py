import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cfseq.diffnum import (
    ContractError,
    ShapeError,
    Tape,
    Tensor,
    adam_state,
    adam_step,
    attention_block,
    backward,
    causal_mask,
    encode_history,
    grad,
    gru_cell,
    init_encoder,
    init_regressor,
    predict_outcome,
)
from cfseq.diffnum import tensor as tn
from cfseq.diffnum.nn import RegressorParams

from oracles import central_differences, max_relative_error


def check_gradients(fn, arrays, tol=1e-4):
    params = [Tensor(a, requires_grad=True) for a in arrays]
    _, analytic = grad(fn, params)

    def value():
        return fn(*[Tensor(p.data) for p in params]).item()

    numeric = central_differences(value, [p.data for p in params])
    err = max_relative_error(analytic, numeric)
    assert err < tol, err
    return err


# --- primitives -----------------------------------------------------------


def test_matmul_identity():
    a = np.random.default_rng(0).normal(size=(4, 3))
    assert np.array_equal(tn.matmul(np.eye(4), a).data, a)


def test_softmax_rows_sum_to_one():
    x = np.random.default_rng(1).normal(scale=10, size=(50, 7))
    p = tn.softmax(x).data
    assert np.max(np.abs(p.sum(axis=-1) - 1.0)) < 1e-12


def test_grad_of_sum_of_squares():
    x = Tensor([3.0], requires_grad=True)
    _, (g,) = grad(lambda v: tn.tsum(tn.square(v)), [x])
    assert np.array_equal(g, [6.0])


def test_constant_output_gives_zero_gradients():
    w = Tensor(np.ones((2, 2)), requires_grad=True)
    with Tape() as tape:
        out = tn.tsum(Tensor(np.ones(3)))
    (g,) = backward(tape, out, [w])
    assert np.array_equal(g, np.zeros((2, 2)))


def test_backward_rejects_non_scalar():
    w = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        out = w * 2.0
    with pytest.raises(ContractError):
        backward(tape, out, [w])


def test_shape_errors():
    with pytest.raises(ShapeError):
        tn.matmul(np.ones((2, 3)), np.ones((2, 3)))
    with pytest.raises(ShapeError):
        tn.add(np.ones(3), np.ones(4))
    with pytest.raises(ShapeError):
        tn.concat([np.ones((2, 3)), np.ones((3, 3))], axis=1)


def test_no_recording_outside_tape():
    w = Tensor(np.ones(3), requires_grad=True)
    out = tn.tsum(w * w)
    assert not out.requires_grad


def test_intermediates_freed_after_backward():
    w = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        out = tn.tsum(tn.tanh(w * w))
    assert len(tape) == 3
    backward(tape, out, [w])
    assert len(tape) == 0


UNARY = {
    "sigmoid": tn.sigmoid,
    "tanh": tn.tanh,
    "exp": tn.exp,
    "elu": tn.elu,
    "square": tn.square,
    "softmax": tn.softmax,
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_adjoints(name):
    rng = np.random.default_rng(2)
    x = rng.normal(size=(3, 4))
    w = rng.normal(size=(3, 4))
    check_gradients(lambda a: tn.tsum(UNARY[name](a) * w), [x])


def test_log_sqrt_relu_adjoints():
    rng = np.random.default_rng(3)
    x = rng.uniform(0.5, 2.0, size=(5,))
    check_gradients(lambda a: tn.tsum(tn.log(a) + tn.sqrt(a) * 3.0), [x])
    y = rng.normal(size=(6,))
    y[np.abs(y) < 0.1] += 0.5
    check_gradients(lambda a: tn.tsum(tn.relu(a) * np.arange(6.0)), [y])


def test_reduction_reshape_and_indexing_adjoints():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(3, 4, 2))
    w = rng.normal(size=(4, 3))
    check_gradients(lambda a: tn.tsum(tn.mean(a, axis=-1) * w.T), [x])
    check_gradients(lambda a: tn.tsum(tn.reshape(tn.transpose(a, (2, 0, 1))[1], (12,)) * tn.reshape(a, (2, 12))[0]), [x])
    rows = np.array([0, 2, 2, 1])
    check_gradients(lambda a: tn.tsum(tn.square(tn.take_rows(tn.reshape(a, (3, 8)), rows))), [x])
    check_gradients(lambda a: tn.tsum(tn.stack([a[0], a[1] * 2.0], axis=1) * tn.concat([a[2], a[2]], axis=0)[:4, None, :]), [x])


def test_layer_norm_and_division_adjoints():
    rng = np.random.default_rng(5)
    x, g, b = rng.normal(size=(2, 3, 5)), rng.normal(size=5), rng.normal(size=5)
    w = rng.normal(size=(2, 3, 5))
    check_gradients(lambda a, gg, bb: tn.tsum(tn.layer_norm(a, gg, bb) * w), [x, g, b])
    y = rng.uniform(1.0, 2.0, size=(2, 3, 5))
    check_gradients(lambda a, c: tn.tsum(tn.div(a, c)), [x, y])


def test_cdist_adjoint():
    rng = np.random.default_rng(6)
    a, b = rng.normal(size=(4, 3)), rng.normal(size=(5, 3))
    w = rng.uniform(size=(4, 5))
    check_gradients(lambda x, y: tn.tsum(tn.cdist(x, y) * w), [a, b])


def test_batched_matmul_broadcast_adjoint():
    rng = np.random.default_rng(7)
    a, b = rng.normal(size=(2, 3, 4, 5)), rng.normal(size=(5, 2))
    check_gradients(lambda x, y: tn.tsum(tn.tanh(tn.matmul(x, y))), [a, b])


# --- MLP oracle check -----------------------------------------------------


def _mlp_loss(x, target):
    def f(W1, b1, W2, b2, W3, b3):
        h = tn.tanh(tn.matmul(x, W1) + b1)
        h = tn.sigmoid(tn.matmul(h, W2) + b2)
        out = tn.matmul(h, W3) + b3
        return tn.mean(tn.square(out - target))
    return f


def test_random_mlp_gradient_matches_finite_differences():
    rng = np.random.default_rng(8)
    shapes = [(6, 12), (12,), (12, 8), (8,), (8, 1), (1,)]
    arrays = [rng.normal(scale=0.5, size=s) for s in shapes]
    assert 180 <= sum(a.size for a in arrays) <= 250
    x, target = rng.normal(size=(10, 6)), rng.normal(size=(10, 1))
    check_gradients(_mlp_loss(x, target), arrays)


def test_independent_tapes_are_deterministic():
    rng = np.random.default_rng(9)
    arrays = [rng.normal(size=s) for s in [(6, 12), (12,), (12, 8), (8,), (8, 1), (1,)]]
    x, target = rng.normal(size=(10, 6)), rng.normal(size=(10, 1))
    f = _mlp_loss(x, target)
    _, g1 = grad(f, [Tensor(a.copy(), requires_grad=True) for a in arrays])
    _, g2 = grad(f, [Tensor(a.copy(), requires_grad=True) for a in arrays])
    for a, b in zip(g1, g2):
        assert np.array_equal(a, b)


# --- recurrent cell -------------------------------------------------------


def test_gru_zero_parameters_halves_state():
    h = 4
    h_prev = np.random.default_rng(10).uniform(-1, 1, size=(3, h))
    out = gru_cell(Tensor(np.ones((3, 2))), Tensor(h_prev), Tensor(np.zeros((2, 3 * h))),
                   Tensor(np.zeros((h, 3 * h))), Tensor(np.zeros(3 * h)))
    np.testing.assert_allclose(out.data, h_prev / 2, rtol=0, atol=1e-15)


def test_gru_output_bounded():
    rng = np.random.default_rng(11)
    h = 8
    W, U, b = rng.normal(size=(3, 3 * h)), rng.normal(size=(h, 3 * h)), rng.normal(size=3 * h)
    x = rng.normal(scale=5, size=(10_000, 3))
    h_prev = rng.uniform(-0.999, 0.999, size=(10_000, h))
    out = gru_cell(Tensor(x), Tensor(h_prev), Tensor(W), Tensor(U), Tensor(b)).data
    assert np.all(np.abs(out) < 1)


def test_gru_gradient_check():
    rng = np.random.default_rng(12)
    h = 3
    x = rng.normal(size=(4, 2))
    arrays = [rng.normal(scale=0.5, size=s) for s in [(4, h), (2, 3 * h), (h, 3 * h), (3 * h,)]]
    check_gradients(lambda hp, W, U, b: tn.tsum(tn.square(gru_cell(Tensor(x), hp, W, U, b))), arrays)


def test_gru_shape_error():
    with pytest.raises(ShapeError):
        gru_cell(Tensor(np.ones((1, 2))), Tensor(np.ones((1, 3))), Tensor(np.ones((2, 6))),
                 Tensor(np.ones((3, 9))), Tensor(np.ones(9)))


# --- attention ------------------------------------------------------------


def _attention_weights(width=8, seed=13):
    enc = init_encoder("attention", 4, np.random.default_rng(seed), hidden_width=width, n_heads=2)
    return enc.weights


def test_attention_length_one_attends_to_self():
    w = _attention_weights()
    seq = Tensor(np.random.default_rng(14).normal(size=(3, 1, 8)))
    _, attn = attention_block(seq, w, causal_mask(1), n_heads=2)
    assert np.all(attn == 1.0)


def test_attention_is_causal_bit_exact():
    w = _attention_weights()
    rng = np.random.default_rng(15)
    seq = rng.normal(size=(2, 6, 8))
    out1, _ = attention_block(Tensor(seq), w, causal_mask(6), n_heads=2)
    seq2 = seq.copy()
    seq2[:, 4:, :] = rng.normal(size=(2, 2, 8)) * 100
    out2, _ = attention_block(Tensor(seq2), w, causal_mask(6), n_heads=2)
    assert np.array_equal(out1.data[:, :4], out2.data[:, :4])


def test_attention_rows_sum_to_one():
    w = _attention_weights()
    seq = Tensor(np.random.default_rng(16).normal(size=(5, 7, 8)))
    _, attn = attention_block(seq, w, causal_mask(7), n_heads=2)
    assert np.max(np.abs(attn.sum(-1) - 1)) < 1e-12
    assert np.all(np.triu(attn[0, 0], k=1) == 0)


def test_attention_mask_errors():
    w = _attention_weights()
    seq = Tensor(np.zeros((1, 3, 8)))
    with pytest.raises(ShapeError):
        attention_block(seq, w, causal_mask(4), n_heads=2)
    with pytest.raises(ContractError):
        attention_block(seq, w, np.ones((3, 3), dtype=bool), n_heads=2)


def test_attention_gradient_check():
    rng = np.random.default_rng(17)
    enc = init_encoder("attention", 3, rng, hidden_width=4, n_heads=2)
    seq = rng.normal(size=(2, 3, 4))
    names = sorted(enc.weights)
    arrays = [enc.weights[n].data.copy() for n in names]

    def f(s, *ws):
        out, _ = attention_block(s, dict(zip(names, ws)), causal_mask(3), n_heads=2)
        return tn.tsum(tn.square(out) * np.linspace(-1, 1, 4))

    check_gradients(f, [seq] + arrays)


# --- encoders and head ----------------------------------------------------


@pytest.mark.parametrize("variant", ["recurrent", "attention"])
def test_encoder_basic_contracts(variant):
    rng = np.random.default_rng(18)
    enc = init_encoder(variant, 6, rng, hidden_width=8, n_heads=2, dropout_rate=0.3)
    cov, trt = rng.normal(size=(3, 1, 2)), rng.normal(size=(3, 1, 4))
    assert encode_history(cov, trt, enc).shape == (3, 1, 8)
    cov, trt = rng.normal(size=(3, 5, 2)), rng.normal(size=(3, 5, 4))
    a = encode_history(cov, trt, enc, "eval").data
    b = encode_history(cov, trt, enc, "eval").data
    assert np.array_equal(a, b)
    enc.dropout_rate = 0.0
    c = encode_history(cov, trt, enc, "train", rng=np.random.default_rng(0)).data
    assert np.array_equal(a, c)
    with pytest.raises(ShapeError):
        encode_history(cov[:, :4], trt, enc)


@pytest.mark.parametrize("variant", ["recurrent", "attention"])
@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 10_000), cut=st.integers(1, 5))
def test_encoder_causality(variant, seed, cut):
    rng = np.random.default_rng(seed)
    enc = init_encoder(variant, 6, rng, hidden_width=8, n_layers=2, n_heads=2)
    cov, trt = rng.normal(size=(2, 6, 2)), rng.normal(size=(2, 6, 4))
    base = encode_history(cov, trt, enc).data
    cov2, trt2 = cov.copy(), trt.copy()
    cov2[:, cut:] += rng.normal(size=cov2[:, cut:].shape)
    trt2[:, cut:] = 1 - trt2[:, cut:]
    moved = encode_history(cov2, trt2, enc).data
    assert np.array_equal(base[:, :cut], moved[:, :cut])
    assert np.all(np.isfinite(moved))


def test_recurrent_encoder_gradient_check():
    rng = np.random.default_rng(19)
    enc = init_encoder("recurrent", 4, rng, hidden_width=3, n_layers=2, dropout_rate=0.0)
    head = init_regressor(3, 2, rng, hidden=(3,))
    cov, trt = rng.normal(size=(2, 4, 2)), rng.normal(size=(2, 4, 2))
    cur, y = rng.normal(size=(2, 4, 2)), rng.normal(size=(2, 4))
    names = sorted(enc.weights)
    n_enc = len(names)
    arrays = [enc.weights[n].data.copy() for n in names] + [t.data.copy() for t in head.tensors()]

    def f(*ws):
        for n, w in zip(names, ws[:n_enc]):
            enc.weights[n] = w
        h = RegressorParams(3, 2, [(ws[n_enc + 2 * i], ws[n_enc + 2 * i + 1]) for i in range(len(head.layers))])
        pred = predict_outcome(encode_history(cov, trt, enc), cur, h)
        return tn.mean(tn.square(pred - y))

    check_gradients(f, arrays)


def test_predict_outcome_zero_and_linear():
    rng = np.random.default_rng(20)
    zero = init_regressor(3, 4, rng)
    for W, b in zero.layers:
        W.data[:] = 0
    assert np.all(predict_outcome(rng.normal(size=(5, 3)), np.eye(4)[[0, 1, 2, 3, 0]], zero).data == 0)

    W = np.array([[1.0], [2.0], [-1.0], [0.5], [0.0], [3.0], [0.0]])
    lin = RegressorParams(3, 4, [(Tensor(W), Tensor([0.25]))])
    rep = np.array([[1.0, 1.0, 2.0]])
    pred_a = predict_outcome(rep, np.array([[1.0, 0, 0, 0]]), lin).data
    pred_b = predict_outcome(rep, np.array([[0, 0, 1.0, 0]]), lin).data
    assert pred_a[0] == pytest.approx(1 + 2 - 2 + 0.5 + 0.25)
    assert pred_b[0] == pytest.approx(1 + 2 - 2 + 3 + 0.25)
    assert pred_a[0] != pred_b[0]
    with pytest.raises(ShapeError):
        predict_outcome(rep, np.ones((1, 3)), lin)


# --- optimizer ------------------------------------------------------------


def test_adam_zero_gradient_keeps_parameters():
    p = Tensor(np.arange(4.0), requires_grad=True)
    state = adam_state([p], lr=0.1)
    adam_step([p], [np.zeros(4)], state)
    assert np.array_equal(p.data, np.arange(4.0))


def test_adam_first_step_is_signed_lr():
    g = np.array([0.3, -2.0, 1e-3])
    p = Tensor(np.zeros(3), requires_grad=True)
    state = adam_state([p], lr=0.01)
    adam_step([p], [g], state)
    # bias-corrected first step: m_hat = g, v_hat = g^2 -> lr * g / (|g| + eps)
    expected = -0.01 * g / (np.abs(g) + 1e-8)
    np.testing.assert_allclose(p.data, expected, rtol=1e-12)
    np.testing.assert_allclose(p.data, -0.01 * np.sign(g), rtol=1e-4)


def test_adam_is_deterministic_and_checks_shapes():
    def run():
        p = Tensor(np.ones(3), requires_grad=True)
        state = adam_state([p], lr=0.05)
        for k in range(5):
            adam_step([p], [np.sin(p.data * (k + 1))], state)
        return p.data.copy()

    assert np.array_equal(run(), run())
    p = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ShapeError):
        adam_step([p], [np.ones(2)], adam_state([p]))
