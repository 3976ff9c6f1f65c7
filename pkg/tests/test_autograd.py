import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from convemo import autograd as ag
from convemo.autograd import Tensor

# mpmath, 30 digits
E_OVER_1PE = 0.731058578630004879251159241822
ONE_OVER_1PE = 0.268941421369995120748840758178
LN2 = 0.693147180559945309417232121458
LN5 = 1.60943791243410037460075933323


def t64(x, grad=False):
    return Tensor(np.asarray(x, dtype=np.float64), requires_grad=grad)


class TestMatmul:
    def test_identity(self):
        out = ag.matmul(t64(np.eye(2)), t64([[3, 4], [5, 6]]))
        np.testing.assert_array_equal(out.data, [[3, 4], [5, 6]])

    def test_hand_product(self):
        assert ag.matmul(t64([[1, 2]]), t64([[3], [4]])).data.tolist() == [[11.0]]

    def test_zero_annihilates(self):
        rng = np.random.default_rng(0)
        out = ag.matmul(t64(np.zeros((3, 4))), t64(rng.normal(size=(4, 5))))
        assert out.shape == (3, 5) and not out.data.any()

    def test_shape_error_names_both(self):
        with pytest.raises(ag.ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
            ag.matmul(t64(np.ones((2, 3))), t64(np.ones((2, 3))))

    def test_recorded_only_when_needed(self):
        ag.get_tape().clear()
        ag.matmul(t64(np.ones((2, 2))), t64(np.ones((2, 2))))
        assert len(ag.get_tape()) == 0
        ag.matmul(t64(np.ones((2, 2)), grad=True), t64(np.ones((2, 2))))
        assert len(ag.get_tape()) == 1
        ag.get_tape().clear()


class TestSoftmax:
    def test_symmetric_row(self):
        np.testing.assert_allclose(ag.softmax_rows(t64([[0.0, 0.0]])).data, [[0.5, 0.5]])

    @pytest.mark.parametrize("k", [1, 3, 7])
    def test_equal_values_uniform(self, k):
        np.testing.assert_allclose(ag.softmax_rows(t64(np.full((1, k), 4.2))).data, np.full((1, k), 1 / k))

    def test_log2_row(self):
        out = ag.softmax_rows(t64([[0.0, LN2]])).data
        np.testing.assert_allclose(out, [[1 / 3, 2 / 3]], atol=1e-9, rtol=0)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 6), st.integers(1, 9), st.floats(1.0, 1e4), st.integers(0, 2**31))
    def test_rows_sum_to_one_at_large_magnitude(self, n, m, scale, seed):
        x = np.random.default_rng(seed).uniform(-1, 1, (n, m)) * scale
        for dtype in (np.float32, np.float64):
            y = ag.softmax_rows(Tensor(x.astype(dtype))).data
            assert np.all(np.isfinite(y))
            np.testing.assert_allclose(y.sum(axis=1), 1.0, atol=1e-6)

    def test_rejects_non_matrix(self):
        with pytest.raises(ag.ShapeError):
            ag.softmax_rows(t64([1.0, 2.0]))

    def test_masked_entries_get_zero(self):
        y = ag.softmax(t64([[1.0, 2.0, 3.0]]), mask=np.array([[True, False, True]])).data
        assert y[0, 1] == 0.0
        np.testing.assert_allclose(y.sum(), 1.0)


class TestAttentionUnprojected:
    def test_constant_sequence_is_uniform_average(self):
        v = np.array([0.3, -1.2, 2.0])
        diag = ag.attention_unprojected(t64(np.tile(v, (5, 1))))
        np.testing.assert_allclose(diag.weights.data, np.full((5, 5), 0.2), atol=1e-12)
        np.testing.assert_allclose(diag.output.data, np.tile(v, (5, 1)), atol=1e-12)

    def test_single_element(self):
        diag = ag.attention_unprojected(t64([[1.5, -2.0]]))
        assert diag.weights.data.tolist() == [[1.0]]
        np.testing.assert_allclose(diag.output.data, [[1.5, -2.0]])

    def test_two_scalar_rows(self):
        diag = ag.attention_unprojected(t64([[1.0], [0.0]]))
        np.testing.assert_allclose(diag.weights.data, [[E_OVER_1PE, ONE_OVER_1PE], [0.5, 0.5]], atol=1e-12)
        np.testing.assert_allclose(diag.output.data, [[E_OVER_1PE], [0.5]], atol=1e-12)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(1, 12), st.integers(1, 8), st.integers(0, 2**31))
    def test_weights_are_row_stochastic(self, n, d, seed):
        x = np.random.default_rng(seed).normal(size=(n, d))
        w = ag.attention_unprojected(t64(x)).weights.data
        assert np.all((w >= 0) & (w <= 1))
        np.testing.assert_allclose(w.sum(axis=1), 1.0, atol=1e-6)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(2, 12), st.integers(1, 8), st.integers(0, 2**31))
    def test_permutation_equivariance(self, n, d, seed):
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(n, d))
        perm = rng.permutation(n)
        base = ag.attention_unprojected(t64(x))
        permuted = ag.attention_unprojected(t64(x[perm]))
        np.testing.assert_allclose(permuted.output.data, base.output.data[perm], atol=1e-12)
        np.testing.assert_allclose(permuted.weights.data, base.weights.data[np.ix_(perm, perm)], atol=1e-12)


class TestCrossEntropy:
    def test_uniform_logits(self):
        loss = ag.cross_entropy_masked(t64(np.zeros((1, 5))), [2])
        assert loss.item() == pytest.approx(LN5, abs=1e-12)

    def test_confident_correct(self):
        assert ag.cross_entropy_masked(t64([[10.0, -10.0]]), [0]).item() < 1e-4

    def test_masking(self):
        loss = ag.cross_entropy_masked(t64([[0.0, 0.0], [0.0, math.log(3)]]), [0, -1])
        assert loss.item() == pytest.approx(LN2, abs=1e-12)

    def test_ignored_frames_get_no_gradient(self):
        logits = t64(np.random.default_rng(1).normal(size=(4, 3)), grad=True)
        ag.backward(ag.cross_entropy_masked(logits, [0, -1, 2, -1]))
        assert not logits.grad[[1, 3]].any()
        assert logits.grad[[0, 2]].any()

    def test_all_ignored_raises(self):
        with pytest.raises(ag.EmptyLossError, match="empty loss"):
            ag.cross_entropy_masked(t64(np.zeros((3, 5))), [-1, -1, -1])

    def test_label_out_of_range(self):
        with pytest.raises(ValueError):
            ag.cross_entropy_masked(t64(np.zeros((1, 5))), [5])


class TestBackward:
    def test_sum_gives_ones(self):
        x = t64(np.random.default_rng(0).normal(size=(3, 4, 2)), grad=True)
        ag.backward(x.sum())
        np.testing.assert_array_equal(x.grad, np.ones((3, 4, 2)))

    def test_square(self):
        x = t64([3.0], grad=True)
        ag.backward((x * x).sum())
        assert x.grad.tolist() == [6.0]

    def test_non_scalar_rejected(self):
        x = t64([1.0, 2.0], grad=True)
        with pytest.raises(ag.ContractError):
            ag.backward(x * 2.0)
        ag.get_tape().clear()

    def test_fan_out_sums_paths(self):
        # loss = sum(x*a) + sum(exp(x)) ; d/dx = a + exp(x)
        x = t64([0.5, -1.0], grad=True)
        a = t64([2.0, 3.0])
        ag.backward((x * a).sum() + ag.exp(x).sum())
        np.testing.assert_allclose(x.grad, [2.0 + math.exp(0.5), 3.0 + math.exp(-1.0)])

    def test_shared_subexpression(self):
        # y = x*x used twice: loss = sum(y) + sum(y*y) -> dl/dx = 2x + 4x^3
        x = t64([1.5, -0.5], grad=True)
        y = x * x
        ag.backward(y.sum() + (y * y).sum())
        xv = np.array([1.5, -0.5])
        np.testing.assert_allclose(x.grad, 2 * xv + 4 * xv**3)

    def test_tape_cleared(self):
        x = t64([1.0], grad=True)
        ag.backward((x * 2.0).sum())
        assert len(ag.get_tape()) == 0

    def test_no_grad_records_nothing(self):
        x = t64([1.0], grad=True)
        with ag.no_grad():
            y = x * 2.0
        assert not y.requires_grad and len(ag.get_tape()) == 0


class TestGradCheck:
    def test_quadratic(self):
        x = t64([3.0])
        assert ag.grad_check(lambda: (x * x).sum(), [x], 1e-5) < 1e-8

    def test_attention_sum(self):
        x = t64(np.random.default_rng(3).normal(size=(4, 3)))
        assert ag.grad_check(lambda: ag.attention_unprojected(x).output.sum(), [x]) < 1e-5

    def test_detects_nondeterminism(self):
        x = t64([1.0])
        rng = np.random.default_rng(0)
        with pytest.raises(ag.DeterminismError):
            ag.grad_check(lambda: (x * float(rng.random())).sum(), [x])

    def test_requires_float64(self):
        x = Tensor(np.ones(2, dtype=np.float32))
        with pytest.raises(ag.ContractError):
            ag.grad_check(lambda: x.sum(), [x])

    def test_catches_wrong_gradient(self):
        x = t64([0.7, -0.2])

        def broken(a):
            return ag._result(a.data**2, (a,), lambda g: (g * a.data,))  # should be 2x

        assert ag.grad_check(lambda: broken(x).sum(), [x]) > 0.1


class TestMisc:
    def test_embedding_negative_index_is_zero(self):
        table = t64(np.arange(6.0).reshape(3, 2), grad=True)
        out = ag.embedding(table, np.array([2, -1, 0]))
        np.testing.assert_array_equal(out.data, [[4, 5], [0, 0], [0, 1]])
        ag.backward(out.sum())
        np.testing.assert_array_equal(table.grad, [[1, 1], [0, 0], [1, 1]])

    def test_dropout_eval_is_identity(self):
        x = t64(np.ones((3, 3)))
        assert ag.dropout(x, 0.5, None, training=False) is x

    def test_dropout_inverted_scaling(self):
        x = Tensor(np.ones((200, 200)))
        y = ag.dropout(x, 0.25, np.random.default_rng(0), training=True).data
        scale = (np.ones(1, y.dtype) / y.dtype.type(0.75))[0]
        assert set(np.unique(y)) <= {0.0, scale}
        assert abs(y.mean() - 1.0) < 0.02

    def test_layer_norm_stats(self):
        x = t64(np.random.default_rng(0).normal(3.0, 5.0, size=(4, 16)))
        y = ag.layer_norm(x, t64(np.ones(16)), t64(np.zeros(16))).data
        np.testing.assert_allclose(y.mean(axis=1), 0.0, atol=1e-12)
        np.testing.assert_allclose(y.std(axis=1), 1.0, atol=1e-4)

    def test_conv1d_matches_direct_sum(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(2, 7, 3))
        w = rng.normal(size=(3, 3, 4))
        out = ag.conv1d(t64(x), t64(w)).data
        xp = np.pad(x, ((0, 0), (1, 1), (0, 0)))
        ref = sum(np.einsum("blc,co->blo", xp[:, j : j + 7], w[j]) for j in range(3))
        np.testing.assert_allclose(out, ref, atol=1e-12)
