import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from schemanet import numerics as nm


def rng(seed=0):
    return np.random.default_rng(seed)


class TestMatmul:
    def test_identity(self):
        m = nm.Tensor([[1.0, 2.0], [3.0, 4.0]])
        eye = nm.Tensor(np.eye(2))
        np.testing.assert_allclose(nm.matmul(eye, m).data, m.data)

    def test_hand_product(self):
        a = nm.Tensor([[1.0, 2.0]])
        b = nm.Tensor([[3.0], [4.0]])
        np.testing.assert_allclose(nm.matmul(a, b).data, [[11.0]])

    def test_shape_mismatch(self):
        with pytest.raises(nm.ShapeError):
            nm.matmul(nm.Tensor(np.zeros((2, 3))), nm.Tensor(np.zeros((4, 2))))

    def test_grad_matches_finite_differences(self):
        with nm.using_dtype(np.float64):
            a = nm.Tensor(rng(1).normal(size=(5, 7)), requires_grad=True)
            b = nm.Tensor(rng(2).normal(size=(7, 3)), requires_grad=True)
            report = nm.grad_check(lambda x, y: nm.sum_all(nm.matmul(x, y)), [a, b])
        assert report.passed, report.max_rel_err


class TestSoftmax:
    def test_symmetric_pair(self):
        out = nm.softmax(nm.Tensor([0.0, 0.0]))
        np.testing.assert_allclose(out.data, [0.5, 0.5])

    def test_single_element(self):
        np.testing.assert_allclose(nm.softmax(nm.Tensor([3.7])).data, [1.0])

    def test_ln2_case(self):
        out = nm.softmax(nm.Tensor([np.log(2.0), 0.0], dtype=np.float64))
        np.testing.assert_allclose(out.data, [2 / 3, 1 / 3], atol=1e-7)

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(-50, 50), min_size=1, max_size=12))
    def test_rows_sum_to_one(self, values):
        out = nm.softmax(nm.Tensor(values))
        assert out.data.min() >= 0.0
        assert abs(out.data.sum() - 1.0) < 1e-6

    def test_grad(self):
        with nm.using_dtype(np.float64):
            x = nm.Tensor(rng(3).normal(size=(4, 5)), requires_grad=True)
            w = nm.Tensor(rng(4).normal(size=(5, 5)), requires_grad=True)
            report = nm.grad_check(
                lambda a, b: nm.sum_all(nm.mul(nm.softmax(nm.matmul(a, b)), rng(5).normal(size=(4, 5)))),
                [x, w])
        assert report.passed, report.per_input


class TestMaskedSoftmax:
    def test_masked_rows_are_zero(self):
        scores = nm.Tensor(rng(0).normal(size=(3, 3)))
        mask = np.array([[1, 1, 0], [0, 0, 0], [1, 0, 1]], dtype=float)
        out = nm.masked_softmax(scores, mask)
        assert out.data[1].sum() == 0.0
        assert abs(out.data[0].sum() - 1.0) < 1e-6
        assert out.data[0, 2] == 0.0

    def test_grad(self):
        mask = np.array([[1, 1, 0], [1, 0, 1], [0, 1, 1]], dtype=float)
        with nm.using_dtype(np.float64):
            x = nm.Tensor(rng(7).normal(size=(3, 3)), requires_grad=True)
            coeff = rng(8).normal(size=(3, 3))
            report = nm.grad_check(
                lambda a: nm.sum_all(nm.mul(nm.masked_softmax(a, mask), coeff)), [x])
        assert report.passed


class TestLayerNorm:
    def test_constant_vector_collapses(self):
        x = nm.Tensor([[5.0, 5.0, 5.0]])
        out = nm.layer_norm(x, nm.Tensor(np.ones(3)), nm.Tensor(np.zeros(3)))
        np.testing.assert_allclose(out.data, np.zeros((1, 3)), atol=1e-4)

    def test_pm_one(self):
        x = nm.Tensor([[1.0, -1.0]], dtype=np.float64)
        out = nm.layer_norm(x, nm.Tensor(np.ones(2), dtype=np.float64), nm.Tensor(np.zeros(2), dtype=np.float64))
        np.testing.assert_allclose(out.data, [[1.0, -1.0]], atol=1e-4)

    def test_pre_affine_statistics(self):
        x = nm.Tensor(rng(11).normal(size=(20, 16)) * 3 + 1, dtype=np.float64)
        out = nm.layer_norm(x, nm.Tensor(np.ones(16), dtype=np.float64), nm.Tensor(np.zeros(16), dtype=np.float64))
        mu = out.data.mean(axis=-1)
        var = out.data.var(axis=-1)
        assert np.abs(mu).max() < 1e-5
        assert np.abs(var - 1.0).max() < 1e-3

    def test_grad(self):
        with nm.using_dtype(np.float64):
            x = nm.Tensor(rng(12).normal(size=(3, 6)), requires_grad=True)
            g = nm.Tensor(rng(13).normal(size=6), requires_grad=True)
            b = nm.Tensor(rng(14).normal(size=6), requires_grad=True)
            coeff = rng(15).normal(size=(3, 6))
            report = nm.grad_check(
                lambda a, gg, bb: nm.sum_all(nm.mul(nm.layer_norm(a, gg, bb), coeff)), [x, g, b])
        assert report.passed, report.per_input


class TestLeakyRelu:
    @pytest.mark.parametrize("x,expected", [(3.0, 3.0), (-1.0, -0.2), (0.0, 0.0)])
    def test_values(self, x, expected):
        out = nm.leaky_relu(nm.Tensor([x]), slope=0.2)
        np.testing.assert_allclose(out.data, [expected], rtol=1e-6)

    def test_bad_slope(self):
        with pytest.raises(ValueError):
            nm.leaky_relu(nm.Tensor([1.0]), slope=1.5)


class TestDropout:
    def test_eval_mode_identity(self):
        x = nm.Tensor(rng(0).normal(size=10))
        out = nm.dropout(x, 0.8, training=False)
        assert out is x

    def test_rate_zero_identity(self):
        x = nm.Tensor(rng(0).normal(size=10))
        assert nm.dropout(x, 0.0, training=True, rng=rng(0)) is x

    def test_zero_fraction(self):
        x = nm.Tensor(np.ones(100_000))
        out = nm.dropout(x, 0.8, training=True, rng=rng(5))
        frac = float((out.data == 0).mean())
        assert abs(frac - 0.8) < 0.01

    def test_expectation_preserved(self):
        x = nm.Tensor(np.full(1_000_000, 2.5))
        out = nm.dropout(x, 0.4, training=True, rng=rng(6))
        assert abs(out.data.mean() - 2.5) / 2.5 < 0.01


class TestCrossEntropy:
    def test_one_hot(self):
        assert nm.cross_entropy(nm.Tensor([0.0, 1.0, 0.0]), 1).item() == 0.0

    def test_uniform(self):
        c = 8
        out = nm.cross_entropy(nm.Tensor(np.full(c, 1.0 / c)), 3)
        assert abs(out.item() - np.log(c)) < 1e-6

    def test_clamp(self):
        out = nm.cross_entropy(nm.Tensor([1.0, 0.0]), 1)
        assert abs(out.item() - 27.631021) < 1e-3
        assert np.isfinite(out.item())

    def test_out_of_range(self):
        with pytest.raises(IndexError):
            nm.cross_entropy(nm.Tensor([1.0, 0.0]), 5)

    def test_mean_matches_per_row(self):
        probs = nm.softmax(nm.Tensor(rng(9).normal(size=(4, 6)), dtype=np.float64))
        targets = [0, 2, 5, 1]
        singles = [nm.cross_entropy(nm.Tensor(probs.data[i], dtype=np.float64), t).item()
                   for i, t in enumerate(targets)]
        batched = nm.mean_cross_entropy(probs, targets).item()
        assert abs(batched - np.mean(singles)) < 1e-9


class TestAdam:
    def test_zero_gradient_noop(self):
        p = nm.Tensor([1.0, 2.0])
        state = nm.AdamState([p], lr=0.1)
        nm.adam_step(state, [p], [np.zeros(2, dtype=np.float32)])
        np.testing.assert_allclose(p.data, [1.0, 2.0])

    def test_first_step_magnitude(self):
        p = nm.Tensor([0.0])
        state = nm.AdamState([p], lr=0.1)
        nm.adam_step(state, [p], [np.ones(1, dtype=np.float32)])
        assert abs(p.data[0] + 0.1) < 1e-3

    def test_descent_on_quadratic(self):
        p = nm.Tensor([3.0])
        state = nm.AdamState([p], lr=0.05)
        losses = []
        for _ in range(2):
            losses.append(float(p.data[0] ** 2))
            nm.adam_step(state, [p], [2.0 * p.data])
        assert float(p.data[0] ** 2) < losses[0]
        assert losses[1] < losses[0]

    def test_shape_mismatch(self):
        p = nm.Tensor([1.0, 2.0])
        state = nm.AdamState([p])
        with pytest.raises(nm.ShapeError):
            nm.adam_step(state, [p], [np.zeros(3, dtype=np.float32)])


class TestGlorot:
    def test_within_bound(self):
        t = nm.glorot_init((40, 60), rng(1))
        bound = np.sqrt(6 / 100)
        assert np.abs(t.data).max() <= bound

    def test_variance(self):
        t = nm.glorot_init((250, 400), rng(2))
        expected = 2.0 / (250 + 400)
        assert abs(t.data.var() - expected) / expected < 0.1

    def test_seed_determinism(self):
        a = nm.glorot_init((8, 8), rng(7))
        b = nm.glorot_init((8, 8), rng(7))
        assert np.array_equal(a.data, b.data)

    def test_rejects_non_2d(self):
        with pytest.raises(nm.ShapeError):
            nm.glorot_init((4,), rng(0))


class TestGradCheck:
    def test_linear_exact(self):
        with nm.using_dtype(np.float64):
            x = nm.Tensor(rng(3).normal(size=(3, 3)), requires_grad=True)
            report = nm.grad_check(lambda a: nm.sum_all(nm.scale(a, 2.0)), [x])
        assert report.max_rel_err < 1e-8

    def test_softmax_matmul_chain(self):
        with nm.using_dtype(np.float64):
            x = nm.Tensor(rng(4).normal(size=(2, 4)), requires_grad=True)
            w = nm.Tensor(rng(5).normal(size=(4, 3)), requires_grad=True)
            report = nm.grad_check(
                lambda a, b: nm.cross_entropy(
                    nm.reshape(nm.softmax(nm.matmul(a, b)), (6,)), 2),
                [x, w])
        assert report.passed

    def test_detects_broken_gradient(self):
        # negative control: a deliberately wrong gradient must fail
        def broken(a):
            out = nm.scale(a, 3.0)
            # corrupt by adding a detached nonlinearity the tape cannot see
            out.data = out.data + a.data**2
            return nm.sum_all(out)

        with nm.using_dtype(np.float64):
            x = nm.Tensor(rng(6).normal(size=4).reshape(2, 2) + 1.0, requires_grad=True)
            report = nm.grad_check(broken, [x])
        assert not report.passed


class TestTape:
    def test_backward_accumulates_through_reuse(self):
        x = nm.Tensor([2.0], requires_grad=True, dtype=np.float64)
        with nm.Tape() as tape:
            y = nm.add(nm.mul(x, x), x)  # x^2 + x -> dy/dx = 2x + 1
            tape.backward(nm.sum_all(y))
        np.testing.assert_allclose(x.grad, [5.0])

    def test_double_backward_rejected(self):
        x = nm.Tensor([1.0], requires_grad=True)
        with nm.Tape() as tape:
            y = nm.sum_all(nm.mul(x, x))
            tape.backward(y)
            with pytest.raises(RuntimeError):
                tape.backward(y)

    def test_determinism(self):
        def run():
            r = rng(42)
            t = nm.glorot_init((6, 6), r)
            return nm.matmul(t, nm.dropout(t, 0.3, training=True, rng=r)).data

        assert np.array_equal(run(), run())
