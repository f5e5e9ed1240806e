import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mhimil.errors import DegenerateMaskError, NumericError, RankError, ScheduleRangeError, ShapeError
from mhimil.numcore import (
    LrSchedule,
    OptimizerState,
    Tape,
    Tensor,
    adamw_step,
    backward,
    concat,
    lr_at,
    lstm_scan,
    masked_softmax,
    matmul,
    max_relative_error,
    numeric_gradient,
    sigmoid,
    stack,
    take,
    tanh,
)


def triple_loop(a, b):
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for q in range(k):
                s += a[i, q] * b[q, j]
            out[i, j] = s
    return out


class TestMatmul:
    def test_identity(self):
        a = np.array([[1.5, -2.0], [0.25, 3.0]])
        np.testing.assert_array_equal(matmul(Tensor(np.eye(2)), Tensor(a)).data, a)

    def test_small_product(self):
        a = np.array([[1.0, 2.0], [3.0, 4.0]])
        b = np.array([[5.0, 6.0], [7.0, 8.0]])
        expected = triple_loop(a, b)
        np.testing.assert_array_equal(expected, [[19, 22], [43, 50]])
        np.testing.assert_array_equal(matmul(Tensor(a), Tensor(b)).data, expected)

    def test_random_against_loops(self):
        rng = np.random.default_rng(7)
        a, b = rng.standard_normal((7, 5)), rng.standard_normal((5, 3))
        np.testing.assert_allclose(matmul(Tensor(a), Tensor(b)).data, triple_loop(a, b), atol=1e-12, rtol=0)

    def test_dimension_mismatch_reports_both_shapes(self):
        with pytest.raises(ShapeError) as info:
            matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))
        assert info.value.shapes == ((2, 3), (4, 2))

    def test_records_only_under_tape(self):
        a = Tensor(np.ones((2, 2)), requires_grad=True)
        assert matmul(a, a).tape_id is None
        with Tape() as tape:
            out = matmul(a, a)
        assert out.tape_id == 0 and len(tape) == 1


class TestMaskedSoftmax:
    def test_constant_logits(self):
        out = masked_softmax(Tensor([2.0, 2.0, 2.0, 2.0]))
        np.testing.assert_array_equal(out.data, [0.25] * 4)

    def test_single_survivor(self):
        out = masked_softmax(Tensor([5.0, 1.0, 9.0]), [True, False, True])
        np.testing.assert_array_equal(out.data, [0.0, 1.0, 0.0])

    def test_two_survivors(self):
        out = masked_softmax(Tensor([1.0, 2.0, 3.0]), [False, False, True])
        e1, e2 = math.exp(1.0), math.exp(2.0)
        np.testing.assert_allclose(out.data, [e1 / (e1 + e2), e2 / (e1 + e2), 0.0], atol=1e-15)
        np.testing.assert_allclose(out.data[:2], [0.2689414213699951, 0.7310585786300049], atol=1e-15)

    def test_all_masked(self):
        with pytest.raises(DegenerateMaskError):
            masked_softmax(Tensor([1.0, 2.0]), [True, True])

    def test_large_logits_stay_finite(self):
        out = masked_softmax(Tensor([1000.0, 999.0, -1000.0]))
        assert np.all(np.isfinite(out.data))
        assert abs(out.data.sum() - 1.0) < 1e-12

    @settings(max_examples=200, deadline=None)
    @given(
        st.lists(st.floats(-50, 50), min_size=1, max_size=12).flatmap(
            lambda xs: st.tuples(st.just(xs), st.lists(st.booleans(), min_size=len(xs), max_size=len(xs)))
        )
    )
    def test_probability_on_unmasked_support(self, case):
        logits, mask = case
        if all(mask):
            mask[0] = False
        out = masked_softmax(Tensor(logits), mask).data
        assert np.all(out >= 0)
        assert abs(out.sum() - 1.0) < 1e-12
        assert np.all(out[np.array(mask)] == 0.0)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(3)
        x = rng.uniform(-1, 1, 6)
        mask = np.array([False, True, False, False, True, False])
        weights = rng.uniform(-1, 1, 6)
        leaf = Tensor(x, requires_grad=True)
        with Tape():
            loss = (masked_softmax(leaf, mask) * weights).sum()
        backward(loss)
        num = numeric_gradient(lambda: float((masked_softmax(Tensor(x), mask).data * weights).sum()), [x])
        assert max_relative_error([leaf.grad], num) < 1e-6
        assert np.all(leaf.grad[mask] == 0.0)


class TestBackward:
    def test_square(self):
        x = Tensor(3.0, requires_grad=True)
        with Tape():
            loss = x * x
        backward(loss)
        assert float(x.grad) == 6.0

    def test_tanh_at_zero(self):
        x = Tensor(0.0, requires_grad=True)
        with Tape():
            loss = tanh(x)
        backward(loss)
        assert float(x.grad) == 1.0

    def test_non_scalar_loss(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with Tape():
            y = x * 2.0
        with pytest.raises(RankError):
            backward(y)

    def test_tape_is_consumed(self):
        x = Tensor(2.0, requires_grad=True)
        with Tape() as tape:
            loss = x * x
        backward(loss)
        assert tape.consumed and len(tape) == 0
        with pytest.raises(Exception):
            backward(loss)

    def test_parents_precede_children(self):
        x = Tensor(np.ones(2), requires_grad=True)
        with Tape() as tape:
            y = tanh(x * 2.0 + 1.0).sum()
        for node in tape.nodes:
            for p in node._parents:
                assert p.tape_id is None or p.tape_id < node.tape_id
        backward(y)

    def test_two_layer_network(self):
        rng = np.random.default_rng(11)
        x = rng.uniform(-1, 1, (5, 4))
        w1, b1 = rng.uniform(-1, 1, (4, 6)), rng.uniform(-1, 1, 6)
        w2 = rng.uniform(-1, 1, (6, 1))
        y = rng.uniform(-1, 1, (5, 1))

        def loss_of(ws):
            h = tanh(matmul(Tensor(x), ws[0]) + ws[1])
            d = matmul(h, ws[2]) - Tensor(y)
            return (d * d).mean()

        leaves = [Tensor(a, requires_grad=True) for a in (w1, b1, w2)]
        with Tape():
            loss = loss_of(leaves)
        backward(loss)
        num = numeric_gradient(lambda: loss_of([Tensor(a) for a in (w1, b1, w2)]).item(), [w1, b1, w2])
        assert max_relative_error([t.grad for t in leaves], num) < 1e-4

    def test_composition_of_ops(self):
        rng = np.random.default_rng(5)
        a = rng.uniform(-1, 1, (3, 4))
        b = rng.uniform(-1, 1, (3, 4))
        idx = np.array([2, 0, 0, 1])

        def f(ta, tb):
            s = sigmoid(ta) * tanh(tb) / (1.5 + ta * ta)
            c = concat([s, tb], axis=1)
            g = take(c, (slice(None), idx))
            st_ = stack([g, g * 2.0])
            return (st_.sum(axis=0) ** 2).mean() + matmul(ta, tb.T).sum()

        la, lb = Tensor(a, requires_grad=True), Tensor(b, requires_grad=True)
        with Tape():
            loss = f(la, lb)
        backward(loss)
        num = numeric_gradient(lambda: f(Tensor(a), Tensor(b)).item(), [a, b])
        assert max_relative_error([la.grad, lb.grad], num) < 1e-4


def _scalar_lstm(x, wi, wh, bias):
    """Loop-level LSTM for one stack/sequence: x (T, D), wi (D, 4H), wh (H, 4H)."""
    H = wh.shape[0]
    h = [0.0] * H
    c = [0.0] * H
    outs = []
    sig = lambda v: 1.0 / (1.0 + math.exp(-v))
    for t in range(x.shape[0]):
        z = []
        for k in range(4 * H):
            s = bias[k]
            for d in range(x.shape[1]):
                s += x[t, d] * wi[d, k]
            for j in range(H):
                s += h[j] * wh[j, k]
            z.append(s)
        new_h = []
        for j in range(H):
            i, f, g, o = sig(z[j]), sig(z[H + j]), math.tanh(z[2 * H + j]), sig(z[3 * H + j])
            c[j] = f * c[j] + i * g
            new_h.append(o * math.tanh(c[j]))
        h = new_h
        outs.append(list(h))
    return np.array(outs)


class TestLstmScan:
    def test_matches_scalar_loops(self):
        rng = np.random.default_rng(2)
        S, B, T, D, H = 2, 2, 4, 3, 2
        x = rng.uniform(-1, 1, (S, B, T, D))
        wi = rng.uniform(-1, 1, (S, D, 4 * H))
        wh = rng.uniform(-1, 1, (S, H, 4 * H))
        b = rng.uniform(-1, 1, (S, 4 * H))
        out = lstm_scan(Tensor(x), Tensor(wi), Tensor(wh), Tensor(b)).data
        for s in range(S):
            for bi in range(B):
                np.testing.assert_allclose(out[s, bi], _scalar_lstm(x[s, bi], wi[s], wh[s], b[s]), atol=1e-12)

    def test_gradients(self):
        rng = np.random.default_rng(4)
        S, B, T, D, H = 2, 2, 3, 2, 3
        arrays = [
            rng.uniform(-1, 1, (S, B, T, D)),
            rng.uniform(-1, 1, (S, D, 4 * H)),
            rng.uniform(-1, 1, (S, H, 4 * H)),
            rng.uniform(-1, 1, (S, 4 * H)),
        ]
        proj = rng.uniform(-1, 1, (S, B, T, H))
        leaves = [Tensor(a, requires_grad=True) for a in arrays]
        with Tape():
            loss = (lstm_scan(*leaves) * proj).sum()
        backward(loss)
        num = numeric_gradient(lambda: float((lstm_scan(*[Tensor(a) for a in arrays]).data * proj).sum()), arrays)
        assert max_relative_error([t.grad for t in leaves], num) < 1e-4


class TestAdamW:
    def test_zero_gradient_no_decay(self):
        params = {"w": np.array([1.0, -2.0])}
        state = OptimizerState(weight_decay=0.0)
        adamw_step(params, {"w": np.zeros(2)}, state, lr=0.1)
        np.testing.assert_array_equal(params["w"], [1.0, -2.0])
        assert state.step == 1

    def test_first_step_by_hand(self):
        params = {"w": np.array([1.0])}
        state = OptimizerState(weight_decay=0.0)
        adamw_step(params, {"w": np.array([1.0])}, state, lr=0.1)
        # m_hat = 1, v_hat = 1 after bias correction
        assert params["w"][0] == pytest.approx(1.0 - 0.1 / (1.0 + 1e-8), abs=1e-15)
        assert params["w"][0] == pytest.approx(0.9, abs=1e-8)

    def test_decoupled_weight_decay(self):
        params = {"w": np.array([2.0])}
        state = OptimizerState(weight_decay=0.5)
        adamw_step(params, {"w": np.array([0.0])}, state, lr=0.1)
        assert params["w"][0] == pytest.approx(2.0 * (1 - 0.05))

    def test_quadratic_convergence(self):
        params = {"w": np.array([0.0])}
        state = OptimizerState(weight_decay=0.0)
        for _ in range(2000):
            adamw_step(params, {"w": 2.0 * (params["w"] - 5.0)}, state, lr=0.05)
        assert abs(params["w"][0] - 5.0) < 1e-2

    def test_non_finite_gradient_named(self):
        with pytest.raises(NumericError, match="'bias'"):
            adamw_step({"bias": np.zeros(2)}, {"bias": np.array([0.0, np.nan])}, OptimizerState(), 0.1)

    def test_bit_deterministic(self):
        rng = np.random.default_rng(0)
        g = rng.standard_normal(5)
        runs = []
        for _ in range(2):
            params, state = {"w": np.linspace(-1, 1, 5)}, OptimizerState()
            for _ in range(10):
                adamw_step(params, {"w": g}, state, lr=0.01)
            runs.append(params["w"].tobytes())
        assert runs[0] == runs[1]


class TestSchedule:
    sched = LrSchedule(total_steps=1000)

    def test_endpoints(self):
        assert lr_at(self.sched, 0) == 1e-7
        assert lr_at(self.sched, 100) == 3e-5
        assert lr_at(self.sched, 1000) == 1e-7

    def test_out_of_range(self):
        with pytest.raises(ScheduleRangeError):
            lr_at(self.sched, 1001)
        with pytest.raises(ScheduleRangeError):
            lr_at(self.sched, -1)

    @pytest.mark.parametrize("total", [10, 37, 200, 1003])
    def test_peak_at_warmup_boundary(self, total):
        s = LrSchedule(total_steps=total)
        values = [lr_at(s, i) for i in range(total + 1)]
        assert max(values) == s.peak_lr
        assert values.index(max(values)) == s.warmup_steps

    def test_piecewise_linear(self):
        s = LrSchedule(total_steps=200)
        v = np.array([lr_at(s, i) for i in range(201)])
        d = np.diff(v)
        w = s.warmup_steps
        np.testing.assert_allclose(d[:w], d[0], rtol=1e-9)
        np.testing.assert_allclose(d[w:], d[w], rtol=1e-9)

    def test_invalid_schedule(self):
        with pytest.raises(ValueError):
            LrSchedule(peak_lr=1e-8, floor_lr=1e-7)
        with pytest.raises(ValueError):
            LrSchedule(warmup_fraction=1.0)
