"""Autodiff core: frozen arithmetic cases plus finite-difference oracles."""

import numpy as np
import pytest

from chunkcast import checkpoint
from chunkcast import tensor as T
from chunkcast.nn import Embedding, LayerNorm, Linear, Mlp, Module
from chunkcast.tensor import (
    NonFiniteError,
    Rng,
    ShapeError,
    Tape,
    Tensor,
    backward,
    precision,
)
from helpers import assert_grads_close, assert_rel_close


def t64(data, requires_grad=False):
    return Tensor(data, requires_grad=requires_grad, dtype=np.float64)


class TestMatmul:
    def test_identity(self):
        m = Tensor([[3.0, -1.0], [0.5, 2.0]])
        eye = Tensor(np.eye(2))
        out = T.matmul(eye, m)
        np.testing.assert_array_equal(out.data, m.data)

    def test_hand_case(self):
        # [[1,2],[3,4]] x [[0],[1]] worked out by hand: column picks (2, 4)
        a = Tensor([[1.0, 2.0], [3.0, 4.0]])
        b = Tensor([[0.0], [1.0]])
        out = T.matmul(a, b)
        np.testing.assert_array_equal(out.data, [[2.0], [4.0]])

    def test_shape_error_mentions_both_shapes(self):
        a = Tensor(np.zeros((2, 3)))
        b = Tensor(np.zeros((2, 3)))
        with pytest.raises(ShapeError) as err:
            T.matmul(a, b)
        assert "(2, 3)" in str(err.value)

    def test_grad_of_sum_matches_finite_differences(self):
        rng = Rng(11)
        with precision("float64"):
            a = t64(rng.normal((3, 4), dtype=np.float64), requires_grad=True)
            b = t64(rng.normal((4, 2), dtype=np.float64), requires_grad=True)
            assert_grads_close(lambda: T.matmul(a, b).sum(), [a, b])
        # the analytic gradient of sum(A@B) w.r.t. A is the row sums of B
        a.grad = None
        with Tape() as tape:
            loss = T.matmul(a, b).sum()
            backward(loss, tape)
        expect = np.broadcast_to(b.data.sum(axis=1), (3, 4))
        assert_rel_close(a.grad, expect, 1e-12)

    def test_batched_against_loop(self):
        rng = Rng(3)
        a = Tensor(rng.normal((5, 2, 3)))
        b = Tensor(rng.normal((3, 4)))
        out = T.matmul(a, b)
        for i in range(5):
            np.testing.assert_allclose(out.data[i], a.data[i] @ b.data, rtol=1e-6)


class TestSoftmax:
    def test_uniform_on_zeros(self):
        out = T.softmax(Tensor([0.0, 0.0, 0.0, 0.0]))
        np.testing.assert_allclose(out.data, [0.25] * 4, atol=1e-7)

    def test_stabilized_no_overflow(self):
        out = T.softmax(Tensor([1000.0, 0.0]))
        assert np.all(np.isfinite(out.data))
        assert out.data[0] > 0.999999
        assert out.data[1] < 1e-6

    def test_rows_sum_to_one(self):
        rng = Rng(5)
        out = T.softmax(Tensor(rng.normal((8,))))
        assert abs(float(out.data.sum()) - 1.0) < 1e-6

    def test_log_exp_round_trip(self):
        rng = Rng(9)
        p = rng.uniform((6,), 0.05, 1.0)
        p = p / p.sum()
        q = T.softmax(T.log(T.exp(T.log(Tensor(p, dtype=np.float64)))))
        assert np.max(np.abs(q.data - p)) < 1e-6


class TestLayernorm:
    def test_moments(self):
        rng = Rng(2)
        x = Tensor(rng.normal((4, 16)) * 3.0 + 1.5)
        out = T.layernorm(x, Tensor(np.ones(16)), Tensor(np.zeros(16)))
        mu = out.data.mean(axis=-1)
        var = out.data.var(axis=-1)
        assert np.max(np.abs(mu)) < 1e-5
        assert np.max(np.abs(var - 1.0)) < 1e-3


class TestLookups:
    def test_embedding_one_hot_rows(self):
        table = Tensor(np.eye(5))
        out = T.embedding_lookup(table, [2, 0])
        np.testing.assert_array_equal(out.data, [[0, 0, 1, 0, 0], [1, 0, 0, 0, 0]])

    def test_embedding_id_out_of_range(self):
        table = Tensor(np.eye(5))
        with pytest.raises(IndexError):
            T.embedding_lookup(table, [5])

    def test_gather_2d_indicator(self):
        # channel c is the indicator of (row, col) = (1, 2); expect e_c
        fm = np.zeros((3, 4, 4))
        fm[2, 1, 2] = 1.0
        out = T.gather_2d(Tensor(fm), (1, 2))
        np.testing.assert_array_equal(out.data, [0.0, 0.0, 1.0])

    def test_gather_2d_out_of_bounds(self):
        fm = Tensor(np.zeros((3, 4, 4)))
        with pytest.raises(IndexError):
            T.gather_2d(fm, (4, 0))


class TestBackward:
    def test_sum_gives_ones(self):
        x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
        with Tape() as tape:
            backward(x.sum(), tape)
        np.testing.assert_array_equal(x.grad, np.ones((2, 3)))

    def test_square_gives_two_x(self):
        x = Tensor([1.0, -2.0, 0.5], requires_grad=True, dtype=np.float64)
        with Tape() as tape:
            backward(T.mul(x, x).sum(), tape)
        np.testing.assert_allclose(x.grad, 2.0 * x.data, rtol=1e-12)

    def test_non_scalar_loss_rejected(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with Tape() as tape:
            y = T.mul(x, 2.0)
            with pytest.raises(ShapeError):
                backward(y, tape)

    def test_repeated_backward_accumulates(self):
        x = Tensor([1.0, 2.0], requires_grad=True, dtype=np.float64)
        with Tape() as tape:
            loss = T.mul(x, x).sum()
            backward(loss, tape)
            once = x.grad.copy()
            backward(loss, tape)
        np.testing.assert_allclose(x.grad, 2.0 * once, rtol=1e-12)

    def test_three_layer_mlp_matches_finite_differences(self):
        with precision("float64"):
            rng = Rng(7)
            r1, r2, r3 = rng.split(3)
            l1 = Linear(5, 8, r1)
            l2 = Linear(8, 8, r2)
            l3 = Linear(8, 2, r3)
            x = Tensor(rng.normal((3, 5), dtype=np.float64))

            def net():
                h = T.gelu(l1(x))
                h = T.gelu(l2(h))
                return T.mul(l3(h), l3(h)).sum()

            leaves = [l1.w, l1.b, l2.w, l2.b, l3.w, l3.b]
            assert_grads_close(net, leaves)


def _unary_cases():
    rng = Rng(21)
    pos = np.abs(rng.normal((3, 4), dtype=np.float64)) + 0.5
    x = rng.normal((3, 4), dtype=np.float64)
    return [
        ("exp", T.exp, x),
        ("log", T.log, pos),
        ("gelu", T.gelu, x),
        ("neg", T.neg, x),
        ("softmax", lambda t: T.softmax(t, axis=-1), x),
        ("log_softmax", lambda t: T.log_softmax(t, axis=-1), x),
        ("logsumexp", lambda t: T.logsumexp(t, axis=-1), x),
        ("logsumexp_keep", lambda t: T.logsumexp(t, axis=0, keepdims=True), x),
        ("mean_axis", lambda t: T.tmean(t, axis=1), x),
        ("mean_all", lambda t: T.tmean(t), x),
        ("sum_axis", lambda t: T.tsum(t, axis=0), x),
        ("transpose", lambda t: T.transpose(t, (1, 0)), x),
        ("reshape", lambda t: T.reshape(t, (4, 3)), x),
        ("narrow", lambda t: T.narrow(t, 1, 1, 2), x),
        ("repeat", lambda t: T.repeat_leading(t, 3), x),
        ("masked_fill", lambda t: T.masked_fill(t, x > 0.3, -5.0), x),
    ]


@pytest.mark.parametrize("case", _unary_cases(), ids=lambda c: c[0])
def test_unary_op_gradients(case):
    _, op, data = case
    with precision("float64"):
        x = t64(data.copy(), requires_grad=True)
        weight = t64(Rng(momentum_seed := 40).normal(op(x).data.shape, dtype=np.float64))
        assert_grads_close(lambda: T.mul(op(x), weight).sum(), [x])


def test_binary_op_gradients():
    rng = Rng(33)
    with precision("float64"):
        a = t64(rng.normal((3, 4), dtype=np.float64), requires_grad=True)
        b = t64(rng.normal((3, 4), dtype=np.float64), requires_grad=True)
        bias = t64(rng.normal((4,), dtype=np.float64), requires_grad=True)
        assert_grads_close(lambda: T.mul(a, b).sum(), [a, b])
        assert_grads_close(lambda: T.sub(a, b).sum(), [a, b])
        assert_grads_close(lambda: T.mul(T.add(a, bias), T.add(a, bias)).sum(), [a, bias])
        assert_grads_close(lambda: T.mul(T.add(a, 2.5), 3.0).sum(), [a])
        parts = lambda: T.concat([a, b], axis=1)
        assert_grads_close(lambda: T.mul(parts(), parts()).sum(), [a, b])


def test_layernorm_gradients():
    rng = Rng(17)
    with precision("float64"):
        x = t64(rng.normal((4, 6), dtype=np.float64), requires_grad=True)
        g = t64(rng.normal((6,), dtype=np.float64), requires_grad=True)
        b = t64(rng.normal((6,), dtype=np.float64), requires_grad=True)
        w = t64(rng.normal((4, 6), dtype=np.float64))
        assert_grads_close(lambda: T.mul(T.layernorm(x, g, b), w).sum(), [x, g, b])


def test_lookup_gradients():
    rng = Rng(19)
    with precision("float64"):
        table = t64(rng.normal((6, 4), dtype=np.float64), requires_grad=True)
        ids = np.array([0, 3, 3, 5])
        w = t64(rng.normal((4, 4), dtype=np.float64))
        assert_grads_close(lambda: T.mul(T.embedding_lookup(table, ids), w).sum(), [table])

        x = t64(rng.normal((5, 7), dtype=np.float64), requires_grad=True)
        picks = np.array([1, 0, 6, 3, 3])
        assert_grads_close(lambda: T.mul(T.gather_last(x, picks), T.gather_last(x, picks)).sum(), [x])

        fm = t64(rng.normal((3, 4, 4), dtype=np.float64), requires_grad=True)
        w2 = t64(rng.normal((2, 3), dtype=np.float64))
        coords = np.array([[0, 0], [3, 2]])
        assert_grads_close(lambda: T.mul(T.gather_2d(fm, coords), w2).sum(), [fm])


def test_matmul_gradients_batched():
    rng = Rng(23)
    with precision("float64"):
        a = t64(rng.normal((2, 3, 4), dtype=np.float64), requires_grad=True)
        w = t64(rng.normal((4, 5), dtype=np.float64), requires_grad=True)
        b = t64(rng.normal((2, 4, 5), dtype=np.float64), requires_grad=True)
        assert_grads_close(lambda: T.matmul(a, w).sum(), [a, w])
        assert_grads_close(lambda: T.matmul(a, b).sum(), [a, b])


def test_conv2d_matches_direct_convolution_and_gradients():
    rng = Rng(29)
    with precision("float64"):
        x = t64(rng.normal((2, 3, 5, 5), dtype=np.float64), requires_grad=True)
        w = t64(rng.normal((4, 3, 3, 3), dtype=np.float64), requires_grad=True)
        b = t64(rng.normal((4,), dtype=np.float64), requires_grad=True)
        out = T.conv2d(x, w, b, stride=2, padding=1)
        assert out.shape == (2, 4, 3, 3)
        # direct nested-loop convolution oracle
        xp = np.pad(x.data, ((0, 0), (0, 0), (1, 1), (1, 1)))
        want = np.zeros((2, 4, 3, 3))
        for n in range(2):
            for f in range(4):
                for i in range(3):
                    for j in range(3):
                        patch = xp[n, :, 2 * i : 2 * i + 3, 2 * j : 2 * j + 3]
                        want[n, f, i, j] = np.sum(patch * w.data[f]) + b.data[f]
        assert_rel_close(out.data, want, 1e-10)
        assert_grads_close(lambda: T.mul(T.conv2d(x, w, b, 2, 1), 0.5).sum(), [x, w, b])


class TestDeterminismAndChecks:
    def test_forward_bit_identical_across_runs(self):
        def run():
            rng = Rng(42)
            net = Mlp(6, 12, rng)
            x = Tensor(rng.normal((4, 6)))
            return net(x).data.tobytes()

        assert run() == run()

    def test_debug_finite_raises(self):
        T.debug_finite(True)
        try:
            with np.errstate(invalid="ignore"), pytest.raises(NonFiniteError):
                T.log(Tensor([-1.0]))
        finally:
            T.debug_finite(False)

    def test_rng_split_streams_are_stable(self):
        a1, b1 = Rng(100).split(2)
        a2, b2 = Rng(100).split(2)
        np.testing.assert_array_equal(a1.normal((4,)), a2.normal((4,)))
        np.testing.assert_array_equal(b1.normal((4,)), b2.normal((4,)))
        assert not np.array_equal(a1.normal((4,)), b1.normal((4,)))

    def test_categorical_inversion(self):
        rng = Rng(8)
        counts = np.zeros(3)
        p = np.array([0.2, 0.5, 0.3])
        for _ in range(3000):
            counts[rng.categorical(p)] += 1
        np.testing.assert_allclose(counts / 3000, p, atol=0.05)


class TestCheckpoint:
    def test_round_trip_bit_identical(self, tmp_path):
        rng = Rng(55)
        named = {
            "layer.w": rng.normal((3, 4), dtype=np.float32),
            "layer.b": rng.normal((4,), dtype=np.float64),
            "scalarish": np.zeros((1,), dtype=np.float32),
        }
        path = tmp_path / "model.ntc"
        checkpoint.save_tensors(path, named)
        loaded = checkpoint.load_tensors(path)
        assert set(loaded) == set(named)
        for k in named:
            assert loaded[k].dtype == named[k].dtype
            assert loaded[k].tobytes() == named[k].tobytes()

    def test_save_is_deterministic(self, tmp_path):
        named = {"b": np.ones((2, 2), np.float32), "a": np.zeros(3, np.float32)}
        p1, p2 = tmp_path / "one.ntc", tmp_path / "two.ntc"
        checkpoint.save_tensors(p1, named)
        checkpoint.save_tensors(p2, dict(reversed(named.items())))
        assert p1.read_bytes() == p2.read_bytes()

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "junk.ntc"
        path.write_bytes(b"nope" + b"\x00" * 16)
        with pytest.raises(checkpoint.CheckpointError):
            checkpoint.load_tensors(path)


class TestModule:
    def test_named_parameters_and_state_roundtrip(self):
        rng = Rng(1)

        class Net(Module):
            def __init__(self):
                self.emb = Embedding(4, 6, rng)
                self.blocks = [Mlp(6, 8, rng), Mlp(6, 8, rng)]
                self.norm = LayerNorm(6)

        net = Net()
        names = set(net.named_parameters())
        assert "emb.table" in names
        assert "blocks.1.fc_out.w" in names
        assert "norm.gain" in names
        state = net.state_dict()
        other = Net()
        other.load_state_dict(state)
        for k, v in other.state_dict().items():
            np.testing.assert_array_equal(v, state[k])

    def test_load_rejects_mismatch(self):
        rng = Rng(1)
        net = Mlp(4, 6, rng)
        state = net.state_dict()
        del state["fc_in.w"]
        with pytest.raises(KeyError):
            net.load_state_dict(state)
