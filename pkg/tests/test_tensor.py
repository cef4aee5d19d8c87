"""Autodiff core: primitive gradients against central differences and
hand-derived oracles, frozen activation values, serialization roundtrips."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from misac import tensor as T


def rng():
    return np.random.default_rng(1234)


class TestForwardValues:
    def test_gelu_matches_stdlib_erf_oracle(self):
        xs = np.linspace(-4.0, 4.0, 41)
        got = T.gelu(T.Tensor(xs)).data
        want = np.array([x * 0.5 * (1.0 + math.erf(x / math.sqrt(2.0))) for x in xs])
        np.testing.assert_allclose(got, want, rtol=0, atol=1e-12)

    def test_gelu_frozen_point(self):
        assert abs(T.gelu(T.Tensor(3.0)).item() - 2.99595) < 1e-4

    def test_gelu_rejects_nan(self):
        with pytest.raises(FloatingPointError):
            T.gelu(T.Tensor(np.array([0.0, np.nan])))

    def test_rmsnorm_frozen_pair(self):
        out = T.rmsnorm(T.Tensor([3.0, 4.0]), T.Tensor(np.ones(2)), eps=0.0).data
        np.testing.assert_allclose(out, [0.8485, 1.1314], atol=1e-4)

    def test_rmsnorm_unit_rms(self):
        x = rng().normal(size=(5, 8))
        out = T.rmsnorm(T.Tensor(x), T.Tensor(np.ones(8)), eps=0.0).data
        np.testing.assert_allclose(np.sqrt((out**2).mean(axis=-1)), 1.0, atol=1e-12)

    @given(st.floats(min_value=0.1, max_value=100.0))
    @settings(max_examples=20, deadline=None)
    def test_rmsnorm_scale_invariant(self, alpha):
        x = rng().normal(size=6)
        g = T.Tensor(np.ones(6))
        a = T.rmsnorm(T.Tensor(x), g, eps=0.0).data
        b = T.rmsnorm(T.Tensor(alpha * x), g, eps=0.0).data
        np.testing.assert_allclose(a, b, atol=1e-9)

    def test_softmax_rows_sum_to_one(self):
        x = rng().normal(size=(4, 7)) * 5
        out = T.softmax(T.Tensor(x)).data
        np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-12)
        e = np.exp(x - x.max(axis=-1, keepdims=True))
        np.testing.assert_allclose(out, e / e.sum(axis=-1, keepdims=True), atol=1e-12)

    def test_finite_check_toggles(self):
        big = T.Tensor(np.array([700.0, 800.0]))
        with pytest.raises(FloatingPointError):
            T.exp(big)
        prev = T.set_finite_checks(False)
        try:
            out = T.exp(big)
            assert np.isinf(out.data).any()
        finally:
            T.set_finite_checks(prev)


class TestBackward:
    def test_linear_regression_hand_gradient(self):
        # loss = mean((Xw - y)^2); d/dw = 2 X^T (Xw - y) / n
        r = rng()
        X = r.normal(size=(12, 5))
        y = r.normal(size=(12, 1))
        w = T.Tensor(r.normal(size=(5, 1)), requires_grad=True)
        with T.Tape() as tape:
            resid = T.sub(T.matmul(T.Tensor(X), w), T.Tensor(y))
            loss = T.tmean(T.square(resid))
        T.backward(loss, tape)
        want = 2.0 * X.T @ (X @ w.data - y) / 12.0
        np.testing.assert_allclose(w.grad, want, atol=1e-12)

    def test_grad_accumulates_over_reuse(self):
        w = T.Tensor([2.0], requires_grad=True)
        with T.Tape() as tape:
            loss = T.tsum(T.add(T.mul(w, w), w))  # w^2 + w -> 2w + 1 = 5
        T.backward(loss, tape)
        np.testing.assert_allclose(w.grad, [5.0])

    def test_non_scalar_loss_rejected(self):
        w = T.Tensor([1.0, 2.0], requires_grad=True)
        with T.Tape() as tape:
            out = T.mul(w, w)
        with pytest.raises(ValueError):
            T.backward(out, tape)

    def test_no_tape_records_nothing(self):
        w = T.Tensor([1.0], requires_grad=True)
        out = T.mul(w, w)
        assert out.requires_grad is False

    def test_broadcast_bias_gradient_sums(self):
        b = T.Tensor(np.zeros(3), requires_grad=True)
        x = T.Tensor(rng().normal(size=(5, 3)))
        with T.Tape() as tape:
            loss = T.tsum(T.add(x, b))
        T.backward(loss, tape)
        np.testing.assert_allclose(b.grad, np.full(3, 5.0))


class TestGradCheck:
    def test_sin_sum_below_1e7(self):
        w = T.Tensor(rng().normal(size=7), requires_grad=True)
        err = T.grad_check(lambda: T.tsum(T.sin(w)), [w])
        assert err < 1e-7
        # the analytic path itself must be cos(w)
        np.testing.assert_allclose(w.grad, np.cos(w.data), atol=1e-12)

    def test_each_primitive(self):
        r = rng()
        a = T.Tensor(r.normal(size=(4, 3)) + 3.0, requires_grad=True)  # >0 for log/sqrt
        b = T.Tensor(r.normal(size=(4, 3)) + 3.0, requires_grad=True)
        v = T.Tensor(r.normal(size=(3, 5)), requires_grad=True)
        cases = {
            "add": lambda: T.tsum(T.add(a, b)),
            "sub": lambda: T.tsum(T.square(T.sub(a, b))),
            "mul": lambda: T.tsum(T.mul(a, b)),
            "div": lambda: T.tsum(T.div(a, b)),
            "neg": lambda: T.tsum(T.neg(T.mul(a, a))),
            "matmul": lambda: T.tsum(T.square(T.matmul(a, v))),
            "transpose": lambda: T.tsum(T.mul(T.transpose(a, (1, 0)), T.transpose(b, (1, 0)))),
            "reshape": lambda: T.tsum(T.square(T.reshape(a, (2, 6)))),
            "concat": lambda: T.tsum(T.square(T.concat([a, b], axis=1))),
            "exp": lambda: T.tsum(T.exp(T.mul(a, T.Tensor(0.3)))),
            "log": lambda: T.tsum(T.log(a)),
            "sqrt": lambda: T.tsum(T.sqrt(a)),
            "square": lambda: T.tsum(T.square(a)),
            "sin": lambda: T.tsum(T.sin(a)),
            "cos": lambda: T.tsum(T.cos(a)),
            "erf": lambda: T.tsum(T.erf(a)),
            "gelu": lambda: T.tsum(T.gelu(T.sub(a, b))),
            "softmax": lambda: T.tsum(T.square(T.softmax(a))),
            "mean_axis": lambda: T.tsum(T.square(T.tmean(a, axis=0, keepdims=True))),
            "sum_axis": lambda: T.tsum(T.square(T.tsum(a, axis=1))),
        }
        for name, f in cases.items():
            err = T.grad_check(f, [a, b, v])
            assert err < 1e-7, f"{name}: {err}"

    def test_batched_matmul(self):
        r = rng()
        a = T.Tensor(r.normal(size=(2, 3, 4)), requires_grad=True)
        b = T.Tensor(r.normal(size=(2, 4, 3)), requires_grad=True)
        err = T.grad_check(lambda: T.tsum(T.square(T.matmul(a, b))), [a, b])
        assert err < 1e-7

    def test_gather_scatter_ops(self):
        r = rng()
        x = T.Tensor(r.normal(size=(6, 4)), requires_grad=True)
        vals = T.Tensor(r.normal(size=(3, 4)), requires_grad=True)
        idx = np.array([1, 1, 4])  # duplicates on purpose
        sel = np.array([[0, 2], [3, 1], [2, 2], [1, 0], [0, 3], [2, 1]])

        def f_gather():
            return T.tsum(T.square(T.gather_rows(x, idx)))

        def f_index_add():
            return T.tsum(T.square(T.index_add(x, idx, vals)))

        def f_take():
            return T.tsum(T.square(T.take_along_last(x, sel)))

        pairs = T.Tensor(r.normal(size=(3, 2)), requires_grad=True)

        def f_scatter():
            return T.tsum(T.square(T.scatter_last(pairs, np.array([[0, 2], [1, 3], [2, 0]]), 4)))

        for f in (f_gather, f_index_add, f_take, f_scatter):
            assert T.grad_check(f, [x, vals, pairs]) < 1e-7

    def test_rmsnorm_and_composites(self):
        r = rng()
        x = T.Tensor(r.normal(size=(3, 8)), requires_grad=True)
        g = T.Tensor(np.ones(8), requires_grad=True)
        err = T.grad_check(lambda: T.tsum(T.square(T.rmsnorm(x, g))), [x, g])
        assert err < 1e-7
        w = T.Tensor(r.normal(size=(8, 2)), requires_grad=True)
        b = T.Tensor(np.zeros(2), requires_grad=True)
        err = T.grad_check(lambda: T.tsum(T.gelu(T.linear(x, w, b))), [x, w, b])
        assert err < 1e-7

    def test_rejects_bad_h(self):
        w = T.Tensor([1.0], requires_grad=True)
        with pytest.raises(ValueError):
            T.grad_check(lambda: T.tsum(w), [w], h=1e-2)

    def test_rejects_nondeterministic_f(self):
        w = T.Tensor([1.0], requires_grad=True)
        r = np.random.default_rng(0)

        def f():
            return T.tsum(T.mul(w, T.Tensor(r.normal())))

        with pytest.raises(ValueError):
            T.grad_check(f, [w])


class TestSerialization:
    @pytest.mark.parametrize("dtype", [np.float64, np.float32, np.complex128])
    def test_roundtrip(self, tmp_path, dtype):
        r = rng()
        arr = r.normal(size=(3, 5, 2)).astype(dtype)
        if np.issubdtype(dtype, np.complexfloating):
            arr = arr + 1j * r.normal(size=(3, 5, 2))
        p = tmp_path / "t.mstn"
        T.write_mstn(p, arr)
        back = T.read_mstn(p)
        assert back.dtype == np.dtype(dtype).newbyteorder("=")
        assert back.shape == arr.shape
        np.testing.assert_array_equal(back, arr)

    def test_roundtrip_scalar_rank0(self, tmp_path):
        p = tmp_path / "s.mstn"
        T.write_mstn(p, np.float64(4.25))
        back = T.read_mstn(p)
        assert back.shape == ()
        assert back == 4.25

    def test_truncated_payload_rejected(self, tmp_path):
        p = tmp_path / "t.mstn"
        T.write_mstn(p, np.arange(10, dtype=np.float64))
        blob = p.read_bytes()
        p.write_bytes(blob[:-8])
        with pytest.raises(ValueError):
            T.read_mstn(p)

    def test_bad_magic_rejected(self, tmp_path):
        p = tmp_path / "t.mstn"
        p.write_bytes(b"NOPE" + b"\x00" * 32)
        with pytest.raises(ValueError):
            T.read_mstn(p)

    def test_unsupported_dtype_rejected(self, tmp_path):
        with pytest.raises(ValueError):
            T.write_mstn(tmp_path / "t.mstn", np.arange(4, dtype=np.int32))


class TestComplexTensor:
    def test_to_real_stacks_trailing(self):
        z = T.ComplexTensor(np.array([[1 + 2j, 3 - 1j]]))
        real = z.to_real()
        assert real.shape == (1, 2, 2)
        np.testing.assert_array_equal(real[..., 0], [[1.0, 3.0]])
        np.testing.assert_array_equal(real[..., 1], [[2.0, -1.0]])
