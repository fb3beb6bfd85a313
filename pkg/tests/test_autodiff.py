import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sepsense import autodiff as ad
from sepsense.autodiff import Value

from conftest import assert_grad_close, fd_gradient


class TestDense:
    def test_identity_like(self):
        out = ad.dense(Value([1.0, 0.0]), Value([[2.0, 0.0], [0.0, 3.0]]),
                       Value([0.0, 0.0]))
        assert np.array_equal(out.data, [2.0, 0.0])

    def test_zero_input_returns_bias(self):
        out = ad.dense(Value([0.0, 0.0]), Value([[1.0, 7.0], [-2.0, 0.5]]),
                       Value([5.0, -1.0]))
        assert np.array_equal(out.data, [5.0, -1.0])

    def test_matches_triple_loop_matmul(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(3, 4))
        w = rng.normal(size=(4, 2))
        b = rng.normal(size=2)
        expected = np.zeros((3, 2))
        for i in range(3):
            for j in range(2):
                acc = b[j]
                for l in range(4):
                    acc += x[i, l] * w[l, j]
                expected[i, j] = acc
        out = ad.dense(Value(x), Value(w), Value(b))
        assert np.max(np.abs(out.data - expected)) < 1e-12

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError, match="dense input shape"):
            ad.dense(Value(np.zeros((2, 3))), Value(np.zeros((4, 2))),
                     Value(np.zeros(2)))
        with pytest.raises(ValueError, match="bias"):
            ad.dense(Value(np.zeros((2, 3))), Value(np.zeros((3, 2))),
                     Value(np.zeros(3)))


class TestLstmStep:
    def test_zero_network_gives_zero_state(self):
        H, d = 3, 2
        h, c = ad.lstm_step(Value(np.random.default_rng(0).normal(size=(1, d))),
                            Value(np.zeros((1, H))), Value(np.zeros((1, H))),
                            Value(np.zeros((d, 4 * H))),
                            Value(np.zeros((H, 4 * H))),
                            Value(np.zeros(4 * H)))
        assert np.array_equal(h.data, np.zeros((1, H)))
        assert np.array_equal(c.data, np.zeros((1, H)))

    def test_hand_computed_two_unit_cell(self):
        rng = np.random.default_rng(42)
        H, d = 2, 3
        x = rng.normal(size=(1, d))
        h0 = rng.normal(size=(1, H))
        c0 = rng.normal(size=(1, H))
        w_x = rng.normal(size=(d, 4 * H))
        w_h = rng.normal(size=(H, 4 * H))
        b = rng.normal(size=4 * H)

        gates = x @ w_x + h0 @ w_h + b

        def sig(v):
            return 1.0 / (1.0 + np.exp(-v))

        i, f, g, o = (gates[:, 0:2], gates[:, 2:4], gates[:, 4:6], gates[:, 6:8])
        c_exp = sig(f) * c0 + sig(i) * np.tanh(g)
        h_exp = sig(o) * np.tanh(c_exp)

        h1, c1 = ad.lstm_step(Value(x), Value(h0), Value(c0),
                              Value(w_x), Value(w_h), Value(b))
        assert np.allclose(h1.data, h_exp, atol=1e-14)
        assert np.allclose(c1.data, c_exp, atol=1e-14)

    def test_hidden_state_bounded_over_random_steps(self):
        rng = np.random.default_rng(7)
        H, d = 4, 5
        params = [Value(rng.normal(size=(d, 4 * H))),
                  Value(rng.normal(size=(H, 4 * H))),
                  Value(rng.normal(size=4 * H))]
        h = Value(np.zeros((1, H)))
        c = Value(np.zeros((1, H)))
        for _ in range(50):
            h, c = ad.lstm_step(Value(rng.normal(size=(1, d))), h, c, *params)
            assert np.all(np.abs(h.data) < 1.0)

    def test_dimension_mismatch_rejected(self):
        with pytest.raises(ValueError, match="state dimensions"):
            ad.lstm_step(Value(np.zeros((1, 2))), Value(np.zeros((1, 5))),
                         Value(np.zeros((1, 5))), Value(np.zeros((2, 12))),
                         Value(np.zeros((3, 12))), Value(np.zeros(12)))


class TestBackward:
    def test_square_gradient(self):
        x = Value(3.0, requires_grad=True)
        ad.backward(x * x)
        assert x.grad == pytest.approx(6.0)

    def test_sigmoid_flat_at_zero_weight(self):
        x = Value(np.array([1.0, -2.0, 0.5]), requires_grad=True)
        w = Value(np.zeros(3))
        ad.backward(ad.sigmoid(ad.vsum(x * w)))
        assert np.array_equal(x.grad, np.zeros(3))

    def test_composite_matches_finite_differences(self):
        rng = np.random.default_rng(3)
        x0 = rng.normal(size=(2, 4))
        w1 = rng.normal(size=(4, 3))
        b1 = rng.normal(size=3)
        w2 = rng.normal(size=(3, 1))

        def loss_of(wdata):
            h = ad.tanh(ad.dense(Value(x0), Value(wdata), Value(b1)))
            out = ad.sigmoid(ad.matmul(h, Value(w2)))
            return float(ad.vsum(out * out).data)

        w = Value(w1.copy(), requires_grad=True)
        h = ad.tanh(ad.dense(Value(x0), w, Value(b1)))
        out = ad.sigmoid(ad.matmul(h, Value(w2)))
        ad.backward(ad.vsum(out * out))
        assert_grad_close(w.grad, fd_gradient(loss_of, w1.copy()))

    def test_backward_without_forward_rejected(self):
        with pytest.raises(ValueError, match="recorded forward"):
            ad.backward(Value(1.0))

    def test_backward_on_non_scalar_rejected(self):
        x = Value(np.ones(3), requires_grad=True)
        with pytest.raises(ValueError, match="scalar"):
            ad.backward(x * 2.0)

    def test_fanout_accumulates(self):
        x = Value(2.0, requires_grad=True)
        y = x * 3.0 + x * x
        ad.backward(y)
        assert x.grad == pytest.approx(3.0 + 4.0)

    def test_finite_after_forward_backward(self):
        rng = np.random.default_rng(5)
        x = Value(rng.normal(size=(4, 6)), requires_grad=True)
        w = Value(rng.normal(size=(6, 6)), requires_grad=True)
        out = ad.relu(ad.matmul(ad.sigmoid(ad.matmul(x, w)), w))
        loss = ad.vmean(ad.absolute(out))
        ad.backward(loss)
        for v in (x, w, loss):
            assert np.isfinite(v.data).all()
            if v.grad is not None:
                assert np.isfinite(v.grad).all()


class TestDropout:
    def test_rate_zero_is_identity(self):
        x = Value(np.arange(10.0))
        out = ad.dropout(x, 0.0, np.random.default_rng(0))
        assert np.array_equal(out.data, x.data)

    def test_zero_fraction_concentrates(self):
        rng = np.random.default_rng(1)
        out = ad.dropout(Value(np.ones(100_000)), 0.5, rng)
        frac = np.mean(out.data == 0.0)
        assert abs(frac - 0.5) < 0.01

    def test_mean_preserved_over_masks(self):
        x = np.array([1.0, -2.0, 3.0, 0.5])
        acc = np.zeros_like(x)
        rng = np.random.default_rng(2)
        n = 10_000
        for _ in range(n):
            acc += ad.dropout(Value(x), 0.3, rng).data
        rel = np.abs(acc / n - x) / np.abs(x)
        assert rel.max() < 0.05

    def test_same_seed_same_mask(self):
        x = Value(np.ones(1000))
        a = ad.dropout(x, 0.4, np.random.default_rng(99)).data
        b = ad.dropout(x, 0.4, np.random.default_rng(99)).data
        assert np.array_equal(a, b)

    def test_rate_one_rejected(self):
        with pytest.raises(ValueError, match="rate"):
            ad.dropout(Value(np.ones(3)), 1.0, np.random.default_rng(0))

    @given(st.integers(0, 2**31 - 1))
    @settings(max_examples=20, deadline=None)
    def test_mask_reproducible_property(self, seed):
        x = Value(np.ones(128))
        a = ad.dropout(x, 0.25, np.random.default_rng(seed)).data
        b = ad.dropout(x, 0.25, np.random.default_rng(seed)).data
        assert np.array_equal(a, b)


class TestOptimizers:
    def test_plain_step_arithmetic(self):
        w = Value(np.array([1.0]), requires_grad=True)
        w.grad = np.array([2.0])
        ad.SGD([w], lr=0.1).step()
        assert w.data[0] == pytest.approx(0.8)

    def test_zero_gradient_leaves_params(self):
        w = Value(np.array([1.5]), requires_grad=True)
        w.grad = np.array([0.0])
        ad.SGD([w], lr=0.1).step()
        assert w.data[0] == 1.5

    def test_plain_descent_converges_on_quadratic(self):
        w = Value(np.array([0.0]), requires_grad=True)
        opt = ad.SGD([w], lr=0.1)
        for _ in range(200):
            loss = (w - 3.0) * (w - 3.0)
            opt.zero_grad()
            ad.backward(ad.vsum(loss))
            opt.step()
        assert abs(w.data[0] - 3.0) < 1e-3

    def test_adaptive_strictly_decreases_quadratic(self):
        w = Value(np.array([5.0, -4.0]), requires_grad=True)
        opt = ad.Adam([w], lr=0.05)
        prev = np.inf
        for _ in range(100):
            loss = ad.vsum((w - 1.0) * (w - 1.0))
            opt.zero_grad()
            ad.backward(loss)
            opt.step()
            assert float(loss.data) < prev
            prev = float(loss.data)

    def test_non_finite_gradient_rejected(self):
        w = Value(np.array([1.0]), requires_grad=True)
        w.grad = np.array([np.nan])
        opt = ad.SGD([w], lr=0.1)
        with pytest.raises(FloatingPointError, match="step rejected"):
            opt.step()
        assert w.data[0] == 1.0


class TestSnapshots:
    def test_round_trip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(0)
        arrays = {
            "layer.weight": rng.normal(size=(7, 3)),
            "layer.bias": rng.normal(size=3),
            "scalarish": np.array(np.pi),
        }
        path = tmp_path / "snap.bin"
        ad.save_arrays(path, arrays)
        loaded = ad.load_arrays(path)
        assert set(loaded) == set(arrays)
        for name in arrays:
            assert loaded[name].shape == arrays[name].shape
            assert loaded[name].tobytes() == arrays[name].tobytes()

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "junk.bin"
        path.write_bytes(b"NOPE" + b"\x00" * 16)
        with pytest.raises(ValueError, match="bad magic"):
            ad.load_arrays(path)


def test_no_grad_blocks_recording():
    x = Value(np.ones(3), requires_grad=True)
    with ad.no_grad():
        y = ad.sigmoid(x * 2.0)
    assert y._backward is None and not y.requires_grad


def test_forward_deterministic():
    rng = np.random.default_rng(11)
    x = rng.normal(size=(3, 3))
    a = ad.tanh(ad.matmul(Value(x), Value(x))).data
    b = ad.tanh(ad.matmul(Value(x), Value(x))).data
    assert np.array_equal(a, b)
