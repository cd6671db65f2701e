import numpy as np
import pytest

from partforge import autodiff as ad
from partforge.autodiff import AdamState, Tape, Tensor


def naive_matmul(a, b):
    n, k = a.shape
    k2, m = b.shape
    out = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            acc = 0.0
            for t in range(k):
                acc += a[i, t] * b[t, j]
            out[i, j] = acc
    return out


def rel_err(a, b, floor=1e-3):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom))


def fd_grad(forward, leaf, h=1e-5):
    """Central finite differences w.r.t. one leaf tensor's entries."""
    flat = leaf.data.ravel()
    g = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = forward()
        flat[i] = orig - h
        fm = forward()
        flat[i] = orig
        g[i] = (fp - fm) / (2.0 * h)
    return g.reshape(leaf.data.shape)


def ad_grad(build, leaves):
    for leaf in leaves:
        leaf.zero_grad()
    with Tape() as tape:
        loss = build()
    ad.backward(tape, loss, leaves=leaves)
    return [leaf.grad for leaf in leaves]


def check_op(build, leaves, h=1e-5, tol=1e-4):
    grads = ad_grad(build, leaves)
    for leaf, g in zip(leaves, grads):
        fd = fd_grad(lambda: float(build().data), leaf, h=h)
        assert rel_err(g, fd) < tol


def rand_leaf(rng, shape, name="w"):
    return Tensor(rng.standard_normal(shape), requires_grad=True, name=name)


class TestForward:
    def test_softmax_uniform(self):
        out = ad.softmax(Tensor([0.0, 0.0, 0.0]))
        assert np.allclose(out.data, [1 / 3] * 3, atol=1e-15)

    def test_max_over_single_row(self):
        x = Tensor([[1.0, -2.0, 3.0]])
        out = ad.max_over_axis(x, 0)
        assert np.array_equal(out.data, x.data[0])

    def test_matmul_matches_naive(self):
        rng = np.random.default_rng(0)
        a = rng.standard_normal((4, 5))
        b = rng.standard_normal((5, 3))
        got = ad.matmul(Tensor(a), Tensor(b)).data
        assert np.max(np.abs(got - naive_matmul(a, b))) < 1e-12

    def test_shape_mismatch_names_op(self):
        with pytest.raises(ad.AutodiffError, match=r"matmul.*\(2, 3\).*\(2, 3\)"):
            ad.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))
        with pytest.raises(ad.AutodiffError, match="add"):
            ad.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 2))))

    def test_ops_forward_dispatch(self):
        out = ad.ops_forward("relu", Tensor([-1.0, 2.0]))
        assert np.array_equal(out.data, [0.0, 2.0])
        with pytest.raises(ad.AutodiffError, match="unknown op"):
            ad.ops_forward("conv2d", Tensor([0.0]))

    def test_determinism(self):
        rng1 = np.random.default_rng(7)
        rng2 = np.random.default_rng(7)

        def run(rng):
            w = rand_leaf(rng, (6, 4))
            x = Tensor(rng.standard_normal((5, 6)))
            with Tape() as tape:
                y = ad.tsum(ad.square(ad.tanh(ad.matmul(x, w))))
            ad.backward(tape, y, leaves=[w])
            return y.data.copy(), w.grad.copy()

        y1, g1 = run(rng1)
        y2, g2 = run(rng2)
        assert np.array_equal(y1, y2) and np.array_equal(g1, g2)


class TestBackward:
    def test_sum_of_squares(self):
        w = Tensor([1.0, 2.0], requires_grad=True, name="w")
        with Tape() as tape:
            loss = ad.tsum(ad.mul(w, w))
        grads = ad.backward(tape, loss, leaves=[w])
        assert np.array_equal(grads["w"], [2.0, 4.0])

    def test_unused_leaf_gets_zero(self):
        w = Tensor([1.0, 2.0], requires_grad=True, name="w")
        u = Tensor([3.0], requires_grad=True, name="u")
        with Tape() as tape:
            loss = ad.tsum(ad.square(w))
        grads = ad.backward(tape, loss, leaves=[w, u])
        assert np.array_equal(grads["u"], [0.0])

    def test_loss_must_be_scalar(self):
        w = Tensor([1.0, 2.0], requires_grad=True, name="w")
        with Tape() as tape:
            y = ad.square(w)
        with pytest.raises(ad.AutodiffError, match="scalar"):
            ad.backward(tape, y, leaves=[w])

    def test_two_layer_mlp_finite_differences(self):
        rng = np.random.default_rng(3)
        x = Tensor(rng.standard_normal((4, 5)))
        w1 = rand_leaf(rng, (5, 7), "w1")
        b1 = rand_leaf(rng, (7,), "b1")
        w2 = rand_leaf(rng, (7, 2), "w2")
        b2 = rand_leaf(rng, (2,), "b2")

        def build():
            h = ad.tanh(ad.add(ad.matmul(x, w1), b1))
            return ad.tsum(ad.square(ad.add(ad.matmul(h, w2), b2)))

        check_op(build, [w1, b1, w2, b2])


class TestGradientChecks:
    """Central finite differences for every op, ties nudged away."""

    @pytest.mark.parametrize("trial", range(3))
    def test_elementwise_ops(self, trial):
        rng = np.random.default_rng(100 + trial)
        shape = (3, 4)
        x = rand_leaf(rng, shape, "x")
        # keep relu/sqrt/log inputs away from their rough spots
        x.data = np.sign(x.data) * (np.abs(x.data) + 0.2)
        pos = Tensor(np.abs(rng.standard_normal(shape)) + 0.5, requires_grad=True, name="pos")
        y = rand_leaf(rng, shape, "y")
        y.data = np.sign(y.data) * (np.abs(y.data) + 0.5)

        check_op(lambda: ad.tsum(ad.relu(x)), [x])
        check_op(lambda: ad.tsum(ad.tanh(x)), [x])
        check_op(lambda: ad.tsum(ad.exp(x)), [x])
        check_op(lambda: ad.tsum(ad.log(pos)), [pos])
        check_op(lambda: ad.tsum(ad.sqrt(pos)), [pos])
        check_op(lambda: ad.tsum(ad.square(x)), [x])
        check_op(lambda: ad.tsum(ad.mul(x, y)), [x, y])
        check_op(lambda: ad.tsum(ad.div(x, y)), [x, y])
        check_op(lambda: ad.tsum(ad.add(x, y)), [x, y])

    def test_matmul_affine_bias(self):
        rng = np.random.default_rng(5)
        a = rand_leaf(rng, (3, 4), "a")
        b = rand_leaf(rng, (4, 2), "b")
        bias = rand_leaf(rng, (2,), "bias")
        check_op(lambda: ad.tsum(ad.square(ad.matmul(a, b))), [a, b])
        check_op(lambda: ad.tsum(ad.square(ad.add(ad.matmul(a, b), bias))), [a, b, bias])
        check_op(lambda: ad.tsum(ad.square(ad.affine(a, b, bias))), [a, b, bias])

    def test_softmax_sum_mean(self):
        rng = np.random.default_rng(6)
        x = rand_leaf(rng, (3, 5), "x")
        w = Tensor(rng.standard_normal((3, 5)))
        check_op(lambda: ad.tsum(ad.mul(ad.softmax(x, axis=-1), w)), [x])
        check_op(lambda: ad.tsum(ad.mul(ad.softmax(x, axis=0), w)), [x])
        check_op(lambda: ad.tmean(ad.square(x)), [x])
        check_op(lambda: ad.tsum(ad.square(ad.tsum(x, axis=1))), [x])
        check_op(lambda: ad.tsum(ad.square(ad.tmean(x, axis=0))), [x])

    def test_max_over_axis_routes_to_argmax(self):
        rng = np.random.default_rng(8)
        x = rand_leaf(rng, (4, 6), "x")
        # separate the max from the runner-up so finite differences are clean
        x.data[np.arange(4), np.argmax(x.data, axis=1)] += 1.0
        check_op(lambda: ad.tsum(ad.square(ad.max_over_axis(x, 1))), [x])

        with Tape() as tape:
            y = ad.tsum(ad.max_over_axis(x, 1))
        x.zero_grad()
        ad.backward(tape, y, leaves=[x])
        hot = x.grad != 0
        assert hot.sum() == 4
        assert np.array_equal(np.nonzero(hot)[1], np.argmax(x.data, axis=1))

    def test_max_tie_goes_to_lowest_index(self):
        x = Tensor([[2.0, 2.0, 1.0]], requires_grad=True, name="x")
        with Tape() as tape:
            y = ad.tsum(ad.max_over_axis(x, 1))
        ad.backward(tape, y, leaves=[x])
        assert np.array_equal(x.grad, [[1.0, 0.0, 0.0]])

    def test_concat_index_select_reshape(self):
        rng = np.random.default_rng(9)
        a = rand_leaf(rng, (2, 3), "a")
        b = rand_leaf(rng, (2, 3), "b")
        w = Tensor(rng.standard_normal((4, 3)))
        check_op(lambda: ad.tsum(ad.mul(ad.concat([a, b], axis=0), w)), [a, b])
        check_op(lambda: ad.tsum(ad.square(ad.index_select(a, 0, [1, 0, 1]))), [a])
        check_op(lambda: ad.tsum(ad.square(ad.reshape(a, (3, 2)))), [a])

    def test_3d_reductions(self):
        rng = np.random.default_rng(10)
        x = rand_leaf(rng, (2, 4, 3), "x")
        x.data += np.arange(4)[None, :, None] * 2.0  # de-tie the max
        check_op(lambda: ad.tsum(ad.square(ad.max_over_axis(x, 1))), [x])
        check_op(lambda: ad.tsum(ad.square(ad.tsum(x, axis=2))), [x])


class TestAdam:
    def test_first_step_magnitude(self):
        p = {"w": Tensor(np.zeros(4), requires_grad=True, name="w")}
        state = AdamState(p)
        ad.adam_step(p, {"w": np.full(4, 3.7)}, state, lr=0.01)
        # bias-corrected first step is lr * g / (|g| + eps') ~= lr
        assert np.allclose(np.abs(p["w"].data), 0.01, rtol=1e-6)

    def test_zero_gradient_keeps_params(self):
        p = {"w": Tensor([1.0, -2.0], requires_grad=True, name="w")}
        state = AdamState(p)
        for _ in range(5):
            ad.adam_step(p, {"w": np.zeros(2)}, state, lr=0.1)
        assert np.array_equal(p["w"].data, [1.0, -2.0])

    def test_matches_scalar_reference_trace(self):
        # hand-rolled scalar Adam on f(w) = w^2, w0 = 1, lr = 0.1
        w_ref, m, v = 1.0, 0.0, 0.0
        b1, b2, eps, lr = 0.9, 0.999, 1e-8, 0.1
        trace = []
        for t in range(1, 11):
            g = 2.0 * w_ref
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            w_ref -= lr * (m / (1 - b1**t)) / (np.sqrt(v / (1 - b2**t)) + eps)
            trace.append(w_ref)

        p = {"w": Tensor([1.0], requires_grad=True, name="w")}
        state = AdamState(p)
        for t in range(10):
            ad.adam_step(p, {"w": 2.0 * p["w"].data}, state, lr=lr)
            assert abs(p["w"].data[0] - trace[t]) < 1e-14

    def test_nonfinite_gradient_raises_with_name(self):
        p = {"layer.w": Tensor([1.0], requires_grad=True, name="layer.w")}
        state = AdamState(p)
        with pytest.raises(ad.GradientOverflowError, match="gradient overflow in layer.w"):
            ad.adam_step(p, {"layer.w": np.array([np.nan])}, state, lr=0.1)


class TestCheckpointIO:
    def test_roundtrip(self, tmp_path):
        rng = np.random.default_rng(11)
        tensors = {"a.w": rng.standard_normal((3, 4)), "a.b": rng.standard_normal(4)}
        path = tmp_path / "ckpt.pf"
        ad.save_named_tensors(path, tensors, meta={"kind": "test", "seed": 11})
        loaded, meta = ad.load_named_tensors(path)
        assert meta == {"kind": "test", "seed": 11}
        for k in tensors:
            assert np.array_equal(loaded[k], tensors[k])

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "junk.pf"
        path.write_bytes(b"not a checkpoint")
        with pytest.raises(ValueError, match="not a partforge checkpoint"):
            ad.load_named_tensors(path)
