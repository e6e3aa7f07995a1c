import numpy as np
import pytest

from beamoe.tensor import (
    NEG_SENTINEL,
    ContractError,
    NumericError,
    ShapeError,
    Tape,
    Tensor,
    add,
    binarize_ste,
    check_gradient,
    cross_entropy,
    div,
    gather_rc,
    mask_fill,
    matmul,
    mean,
    mul,
    reshape,
    rms_norm,
    scatter_rows,
    sigmoid,
    silu,
    slice_cols,
    softmax,
    take_rows,
    transpose,
    tsum,
)


def backward(expr_fn, *tensors):
    with Tape() as tape:
        out = expr_fn(*tensors)
        tape.backward(out)
    return out


class TestTensorBasics:
    def test_rejects_non_finite(self):
        with pytest.raises(NumericError):
            Tensor([1.0, np.nan])
        with pytest.raises(NumericError):
            Tensor([np.inf])

    def test_data_is_float64_copy(self):
        src = np.array([1.0, 2.0])
        t = Tensor(src)
        src[0] = 99.0
        assert t.data[0] == 1.0
        assert t.data.dtype == np.float64

    def test_grad_len_matches_data(self):
        t = Tensor(np.ones((2, 3)), requires_grad=True)
        backward(lambda x: tsum(x), t)
        assert t.grad.shape == t.data.shape


class TestMatmul:
    def test_identity(self):
        eye = Tensor([[1.0, 0.0], [0.0, 1.0]])
        b = Tensor([[2.0, 3.0], [4.0, 5.0]])
        assert np.array_equal(matmul(eye, b).data, b.data)

    def test_hand_evaluated(self):
        # [[1,2]] @ [[3],[4]] = [[1*3 + 2*4]] = [[11]]
        out = matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]]))
        assert out.data.tolist() == [[11.0]]

    def test_zero_matrix(self):
        z = Tensor(np.zeros((2, 3)))
        b = Tensor(np.arange(12.0).reshape(3, 4))
        assert np.array_equal(matmul(z, b).data, np.zeros((2, 4)))

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_backward_formula(self):
        a = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
        b = Tensor(np.arange(12.0).reshape(3, 4), requires_grad=True)
        backward(lambda x, y: tsum(matmul(x, y)), a, b)
        g = np.ones((2, 4))
        assert np.allclose(a.grad, g @ b.data.T)
        assert np.allclose(b.grad, a.data.T @ g)

    def test_batched_against_loop(self):
        rng = np.random.default_rng(0)
        a = rng.normal(size=(3, 4, 5))
        b = rng.normal(size=(3, 5, 2))
        out = matmul(Tensor(a), Tensor(b))
        expected = np.stack([a[i] @ b[i] for i in range(3)])
        assert np.allclose(out.data, expected)


class TestSoftmax:
    def test_symmetry(self):
        assert np.allclose(softmax(Tensor([[0.0, 0.0]])).data, [[0.5, 0.5]])

    def test_masked_oracle(self):
        # direct exp/sum computation over the two live entries
        out = softmax(Tensor([[2.0, 1.0, NEG_SENTINEL]]), masked_value=NEG_SENTINEL)
        e = np.exp([2.0, 1.0])
        assert abs(out.data[0, 0] - e[0] / e.sum()) < 1e-4
        assert abs(out.data[0, 0] - 0.7311) < 1e-4
        assert abs(out.data[0, 1] - 0.2689) < 1e-4
        assert out.data[0, 2] == 0.0  # exactly

    def test_shift_invariance_constant_rows(self):
        for c in (-7.3, 0.0, 123.0):
            out = softmax(Tensor([[c, c, c, c]]))
            assert np.allclose(out.data, 0.25)

    def test_sums_to_one(self):
        rng = np.random.default_rng(1)
        out = softmax(Tensor(rng.normal(size=(5, 9))))
        assert np.all(out.data >= 0)
        assert np.allclose(out.data.sum(axis=-1), 1.0, atol=1e-12)

    def test_all_masked_row_rejected(self):
        with pytest.raises(ContractError):
            softmax(Tensor([[NEG_SENTINEL, NEG_SENTINEL]]), masked_value=NEG_SENTINEL)

    def test_masked_entries_get_zero_grad(self):
        x = Tensor([[2.0, 1.0, NEG_SENTINEL]], requires_grad=True)
        backward(lambda t: tsum(mul(softmax(t, masked_value=NEG_SENTINEL), [[1.0, 2.0, 3.0]])), x)
        assert x.grad[0, 2] == 0.0


class TestSigmoid:
    def test_zero(self):
        assert sigmoid(Tensor([0.0])).data[0] == 0.5

    def test_saturation(self):
        big = Tensor([500.0], requires_grad=True)
        out = backward(lambda t: tsum(sigmoid(t)), big)
        assert out.data == pytest.approx(1.0)
        assert big.grad[0] == pytest.approx(0.0)

    def test_closed_form(self):
        # sigma(ln 3) = 3 / (1 + 3) = 0.75
        assert abs(sigmoid(Tensor([np.log(3.0)])).data[0] - 0.75) < 1e-9

    def test_extreme_negative_no_overflow(self):
        out = sigmoid(Tensor([-1e4, 1e4]))
        assert out.data[0] == 0.0 and out.data[1] == 1.0


class TestCrossEntropy:
    def test_uniform(self):
        logits = Tensor(np.zeros((3, 4)))
        out = cross_entropy(logits, np.array([0, 1, 2]))
        assert out.data == pytest.approx(np.log(4.0))

    def test_confident(self):
        logits = np.full((2, 5), -50.0)
        logits[0, 3] = 50.0
        logits[1, 1] = 50.0
        out = cross_entropy(Tensor(logits), np.array([3, 1]))
        assert out.data == pytest.approx(0.0, abs=1e-12)

    def test_two_class_closed_form(self):
        # -ln sigmoid(1): softmax([1,0])[0] = e / (e + 1) = sigmoid(1)
        out = cross_entropy(Tensor([[1.0, 0.0]]), np.array([0]))
        assert out.data == pytest.approx(-np.log(1 / (1 + np.exp(-1.0))), abs=1e-9)
        assert out.data == pytest.approx(0.3133, abs=1e-4)

    def test_target_out_of_range(self):
        with pytest.raises(IndexError):
            cross_entropy(Tensor(np.zeros((1, 3))), np.array([3]))


class TestGatherScatter:
    def test_take_rows_roundtrip(self):
        x = Tensor(np.arange(12.0).reshape(4, 3), requires_grad=True)
        idx = np.array([2, 0, 2])
        out = backward(lambda t: tsum(take_rows(t, idx)), x)
        assert np.array_equal(out.data, np.asarray(x.data[idx].sum()))
        counts = np.bincount(idx, minlength=4)[:, None]
        assert np.array_equal(x.grad, np.broadcast_to(counts, (4, 3)).astype(float))

    def test_scatter_rows_backward_is_gather(self):
        v = Tensor(np.ones((2, 3)), requires_grad=True)
        out = scatter_rows(v, np.array([1, 3]), 5)
        assert out.data.shape == (5, 3)
        assert np.array_equal(out.data[1], np.ones(3))
        assert np.array_equal(out.data[0], np.zeros(3))

    def test_gather_rc(self):
        x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
        backward(lambda t: tsum(gather_rc(t, np.array([0, 1]), np.array([2, 0]))), x)
        expected = np.zeros((2, 3))
        expected[0, 2] = 1.0
        expected[1, 0] = 1.0
        assert np.array_equal(x.grad, expected)

    def test_take_rows_bad_index(self):
        with pytest.raises(IndexError):
            take_rows(Tensor(np.zeros((2, 2))), np.array([5]))


class TestSte:
    def test_forward_threshold_inclusive(self):
        out = binarize_ste(Tensor([[0.49, 0.5, 0.51]]), 0.5)
        assert out.data.tolist() == [[0.0, 1.0, 1.0]]

    def test_backward_identity(self):
        x = Tensor([[0.2, 0.8]], requires_grad=True)
        backward(lambda t: tsum(mul(binarize_ste(t, 0.5), [[3.0, 5.0]])), x)
        assert x.grad.tolist() == [[3.0, 5.0]]


class TestTapeSemantics:
    def test_double_backward_accumulates(self):
        w = Tensor([2.0], requires_grad=True)
        with Tape() as tape:
            out = mul(w, w)
            tape.backward(out)
            first = w.grad.copy()
            tape.backward(out)
        assert np.allclose(first, [4.0])
        assert np.allclose(w.grad, [8.0])

    def test_shared_input_accumulates(self):
        w = Tensor([3.0], requires_grad=True)
        backward(lambda t: tsum(add(mul(t, t), t)), w)
        assert np.allclose(w.grad, [7.0])  # d(w^2 + w)/dw = 2w + 1

    def test_deterministic_forward(self):
        rng = np.random.default_rng(5)
        x = rng.normal(size=(4, 4))
        a = softmax(Tensor(x)).data
        b = softmax(Tensor(x)).data
        assert np.array_equal(a, b)

    def test_no_tape_records_nothing(self):
        t = Tensor([1.0], requires_grad=True)
        out = mul(t, t)
        assert out.data[0] == 1.0
        with Tape() as tape:
            pass
        assert tape.nodes == []


class TestCheckGradient:
    def test_square(self):
        w = Tensor([3.0], requires_grad=True)
        err = check_gradient(lambda: mul(w, w), [w])
        assert err < 1e-8

    def test_constant(self):
        w = Tensor([3.0], requires_grad=True)
        err = check_gradient(lambda: Tensor._raw(np.asarray(5.0)), [w])
        assert err == 0.0

    def test_two_layer_dense_net(self):
        rng = np.random.default_rng(11)
        w1 = Tensor(rng.normal(0, 0.5, (4, 6)), requires_grad=True)
        w2 = Tensor(rng.normal(0, 0.5, (6, 3)), requires_grad=True)
        x = Tensor(rng.normal(size=(5, 4)))

        def f():
            return tsum(mul(h := matmul(silu(matmul(x, w1)), w2), h))

        err = check_gradient(f, [w1, w2], epsilon=1e-5)
        assert err < 1e-4


def random_op_gradient_cases():
    rng = np.random.default_rng(42)
    cases = []
    for trial in range(3):
        shape = tuple(int(s) for s in rng.integers(1, 8, size=2))
        cases.append((trial, shape))
    return cases


@pytest.mark.parametrize("trial,shape", random_op_gradient_cases())
@pytest.mark.parametrize(
    "name,build",
    [
        ("sigmoid", lambda t: tsum(mul(sigmoid(t), sigmoid(t)))),
        ("silu", lambda t: tsum(silu(t))),
        ("softmax", lambda t: tsum(mul(softmax(t), softmax(t)))),
        ("mean", lambda t: mean(mul(t, t))),
        ("rms", lambda t: tsum(rms_norm(t, Tensor(np.linspace(0.5, 1.5, t.shape[-1]))))),
        ("div", lambda t: tsum(div(t, add(mul(t, t), 1.0)))),
        ("slice", lambda t: tsum(mul(slice_cols(t, 0, 1), 2.0))),
        ("transpose", lambda t: tsum(mul(transpose(t, (1, 0)), transpose(t, (1, 0))))),
        ("reshape", lambda t: tsum(mul(reshape(t, (t.data.size,)), 3.0))),
        ("maskfill", lambda t: tsum(mul(mask_fill(t, t.data > 0, -1.0), t))),
    ],
)
def test_op_gradients_match_finite_differences(trial, shape, name, build):
    rng = np.random.default_rng(100 + trial)
    t = Tensor(rng.normal(0.0, 1.0, shape), requires_grad=True)
    err = check_gradient(lambda: build(t), [t], epsilon=1e-5)
    assert err < 1e-4, f"{name} {shape}: {err}"


def test_rms_norm_weight_gradient():
    rng = np.random.default_rng(3)
    x = Tensor(rng.normal(size=(4, 5)))
    w = Tensor(rng.normal(1.0, 0.1, 5), requires_grad=True)
    err = check_gradient(lambda: tsum(mul(rms_norm(x, w), rms_norm(x, w))), [w])
    assert err < 1e-4


def test_cross_entropy_gradient():
    rng = np.random.default_rng(9)
    logits = Tensor(rng.normal(size=(6, 5)), requires_grad=True)
    targets = rng.integers(0, 5, size=6)
    err = check_gradient(lambda: cross_entropy(logits, targets), [logits])
    assert err < 1e-4
