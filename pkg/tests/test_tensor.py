import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gtlab import tensor as T
from gtlab.errors import ContractError, DimensionError
from gtlab.tensor import Tape, Tensor

from conftest import central_diff, grad_rel_errors


def naive_matmul(A, B):
    out = np.zeros((A.shape[0], B.shape[1]))
    for i in range(A.shape[0]):
        for j in range(B.shape[1]):
            s = 0.0
            for k in range(A.shape[1]):
                s += A[i, k] * B[k, j]
            out[i, j] = s
    return out


class TestMatmul:
    def test_identity(self, rng):
        B = rng.normal(size=(2, 3))
        assert np.array_equal(T.matmul(np.eye(2), B).data, B)

    def test_hand_sum(self):
        assert T.matmul([[2.0, 1.0]], [[1.0], [1.0]]).item() == 3.0

    def test_against_triple_loop(self, rng):
        A, B = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
        assert np.max(np.abs(T.matmul(A, B).data - naive_matmul(A, B))) < 1e-12

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            T.matmul(np.ones((2, 3)), np.ones((2, 3)))

    @settings(max_examples=40, deadline=None)
    @given(st.integers(1, 16), st.integers(1, 16), st.integers(1, 16), st.integers(1, 16), st.integers(0, 2**31))
    def test_associativity(self, m, k, l, n, seed):
        r = np.random.default_rng(seed)
        A, B, C = r.uniform(-1, 1, (m, k)), r.uniform(-1, 1, (k, l)), r.uniform(-1, 1, (l, n))
        left = T.matmul(T.matmul(A, B), C).data
        right = T.matmul(A, T.matmul(B, C)).data
        assert np.max(np.abs(left - right)) < 1e-9


class TestRelu:
    def test_definition(self):
        assert T.relu([[-1.0, 0.0, 2.0]]).data.tolist() == [[0.0, 0.0, 2.0]]

    def test_all_negative(self, rng):
        assert np.all(T.relu(-np.abs(rng.normal(size=(3, 3))) - 0.1).data == 0)

    def test_all_positive(self, rng):
        X = np.abs(rng.normal(size=(3, 3))) + 0.1
        assert np.array_equal(T.relu(X).data, X)


class TestSoftmax:
    def test_symmetric_row(self):
        assert T.row_softmax([[0.0, 0.0]]).data.tolist() == [[0.5, 0.5]]

    def test_attention_logits(self):
        out = T.row_softmax([[21.0, 30.0]]).data[0]
        e9 = math.exp(9)
        assert out[0] == pytest.approx(1 / (1 + e9), rel=1e-12)
        assert out[1] == pytest.approx(e9 / (1 + e9), rel=1e-12)
        assert out[0] == pytest.approx(1.2339e-4, rel=1e-4)
        assert out[1] == pytest.approx(0.99987661, rel=1e-8)

    def test_large_logits_do_not_overflow(self):
        out = T.row_softmax([[700.0, 699.0, -700.0]]).data
        assert np.all(np.isfinite(out))

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(-50, 50), min_size=1, max_size=8), st.floats(-100, 100))
    def test_shift_invariance_and_rows_sum_to_one(self, row, c):
        a = T.row_softmax([row]).data
        b = T.row_softmax([[x + c for x in row]]).data
        assert np.allclose(a, b, atol=1e-12, rtol=0)
        assert abs(a.sum() - 1.0) < 1e-12
        assert np.all((a > 0) & (a <= 1))


class TestAggregate:
    def test_empty_sum(self):
        assert T.aggregate([], "sum", dim=3).data.tolist() == [[0.0, 0.0, 0.0]]

    @pytest.mark.parametrize("kind", ["mean", "max"])
    def test_empty_other_kinds(self, kind):
        assert T.aggregate([], kind, dim=2).data.tolist() == [[0.0, 0.0]]

    def test_mean(self):
        assert T.aggregate([[1.0, 3.0], [3.0, 1.0]], "mean").data.tolist() == [[2.0, 2.0]]

    def test_max(self):
        assert T.aggregate([[1.0, 3.0], [3.0, 1.0]], "max").data.tolist() == [[3.0, 3.0]]

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=20), st.randoms())
    def test_sum_order_independent(self, vals, rnd):
        rows = [[v] for v in vals]
        shuffled = rows[:]
        rnd.shuffle(shuffled)
        assert T.aggregate(rows, "sum").item() == T.aggregate(shuffled, "sum").item()


class TestBackward:
    def test_relu_subgradient(self):
        tape = Tape()
        x = tape.variable([[-1.0, 2.0]])
        tape.backward(T.total(T.relu(x)))
        assert tape.grad(x).tolist() == [[0.0, 1.0]]

    def test_relu_zero_gets_zero(self):
        tape = Tape()
        x = tape.variable([[0.0]])
        tape.backward(T.total(T.relu(x)))
        assert tape.grad(x).item() == 0.0

    def test_quadratic(self):
        tape = Tape()
        x = tape.variable([[1.0], [2.0]])
        tape.backward(T.matmul(T.transpose(x), x))
        assert tape.grad(x).ravel().tolist() == [2.0, 4.0]

    def test_non_scalar_output_rejected(self):
        tape = Tape()
        x = tape.variable(np.ones((2, 2)))
        with pytest.raises(ContractError):
            tape.backward(T.relu(x))

    def test_every_recorded_tensor_has_gradient(self, rng):
        tape = Tape()
        x = tape.variable(rng.normal(size=(3, 2)))
        w = tape.variable(rng.normal(size=(2, 2)))
        hidden = T.relu(T.matmul(x, w))
        out = T.total(hidden)
        grads = tape.backward(out)
        for t in (x, w, hidden, out):
            assert grads[t.node_id].shape == t.shape

    def test_mixed_tapes_rejected(self):
        a, b = Tape().variable([[1.0]]), Tape().variable([[1.0]])
        with pytest.raises(ContractError):
            T.add(a, b)

    def test_two_layer_mlp_fd(self, rng):
        X = rng.normal(size=(5, 3))
        shapes = [(4, 3), (1, 4), (1, 4), (1, 1)]
        sizes = [int(np.prod(s)) for s in shapes]
        theta = rng.normal(size=sum(sizes))

        def unpack(v):
            out, pos = [], 0
            for s, k in zip(shapes, sizes):
                out.append(v[pos:pos + k].reshape(s))
                pos += k
            return out

        def f(parts):
            W1, b1, W2, b2 = parts
            return T.total(T.linear(T.relu(T.linear(X, W1, b1)), W2, b2))

        tape = Tape()
        vs = [tape.variable(p) for p in unpack(theta)]
        tape.backward(f(vs))
        analytic = np.concatenate([tape.grad(v).ravel() for v in vs])
        numeric = central_diff(lambda v: f(unpack(v)).item(), theta)
        assert grad_rel_errors(analytic, numeric).max() < 1e-4


def _random_graph_program(r: np.random.Generator):
    """Random scalar computation mixing the primitives; returns (inputs, fn)."""
    n, d = int(r.integers(2, 6)), int(r.integers(1, 5))
    x0 = r.normal(size=(n, d))
    w0 = r.normal(size=(d, d))
    g0 = r.uniform(0.5, 1.5, size=(1, d))
    ops = r.integers(0, 6, size=4)
    offsets = np.array([0, n // 2, n]) if n >= 2 else np.array([0, n])

    def fn(x, w, g):
        h = x
        for op in ops:
            if op == 0:
                h = T.relu(T.matmul(h, w))
            elif op == 1:
                h = T.row_softmax(h)
            elif op == 2:
                h = T.mul(h, T.add_rows(h, g))
            elif op == 3 and d > 1:
                h = T.layer_norm(h, g, np.zeros((1, d)))
            elif op == 4:
                h = T.grouped_attention(h, T.matmul(h, w), h, offsets, 0.5)
            else:
                h = T.segment_broadcast(T.segment_reduce(h, offsets, "mean"), offsets)
        return T.total(T.scale(h, 0.7))

    return [x0, w0, g0], fn


def test_random_programs_match_finite_differences():
    for seed in range(100):
        r = np.random.default_rng(seed)
        inputs, fn = _random_graph_program(r)
        tape = Tape()
        vs = [tape.variable(a) for a in inputs]
        tape.backward(fn(*vs))
        analytic = np.concatenate([tape.grad(v).ravel() for v in vs])
        sizes = [a.size for a in inputs]

        def f(flat):
            parts, pos = [], 0
            for a, k in zip(inputs, sizes):
                parts.append(flat[pos:pos + k].reshape(a.shape))
                pos += k
            return fn(*parts).item()

        numeric = central_diff(f, np.concatenate([a.ravel() for a in inputs]), 1e-4, points=5)
        assert grad_rel_errors(analytic, numeric).max() < 1e-4, f"seed {seed}"


class TestSegmentOps:
    def test_segment_sum_and_broadcast(self):
        a = np.arange(6.0).reshape(3, 2)
        off = np.array([0, 2, 3])
        assert T.segment_reduce(a, off, "sum").data.tolist() == [[2.0, 4.0], [4.0, 5.0]]
        assert T.segment_broadcast([[1.0], [2.0]], off).data.ravel().tolist() == [1.0, 1.0, 2.0]

    def test_grouped_attention_matches_per_block(self, rng):
        off = np.array([0, 3, 7])
        Q, K, V = (rng.normal(size=(7, 2)) for _ in range(3))
        out = T.grouped_attention(Q, K, V, off, 1.0).data
        for a, b in zip(off[:-1], off[1:]):
            ref = T.matmul(T.row_softmax(T.matmul(Q[a:b], K[a:b].T)), V[a:b]).data
            assert np.allclose(out[a:b], ref, atol=1e-14)

    def test_inference_dedup_path_is_exact(self, rng):
        off = np.array([0, 40])
        K = np.repeat(rng.normal(size=(2, 3)), 20, axis=0)
        V = np.repeat(rng.normal(size=(2, 3)), 20, axis=0)
        Q = rng.normal(size=(40, 3))
        fast = T.grouped_attention(Q, K, V, off, 0.3).data
        S = Q @ K.T * 0.3
        A = np.exp(S - S.max(1, keepdims=True))
        A /= A.sum(1, keepdims=True)
        assert np.max(np.abs(fast - A @ V)) < 1e-14

    def test_tensor_invariants(self):
        t = Tensor([1.0, 2.0])
        assert t.shape == (1, 2) and t.data.size == t.rows * t.cols
        with pytest.raises(DimensionError):
            Tensor(np.zeros((2, 2, 2)))
