import numpy as np
import pytest

import ropes.tensor as T


def rng(seed=0):
    return np.random.default_rng(seed)


class TestPrimitives:
    def test_relu(self):
        out = T.relu(T.Tensor(np.array([-1.0, 0.0, 2.0])))
        assert np.array_equal(out.data, [0.0, 0.0, 2.0])

    def test_conv2d_identity_kernel(self):
        r = rng()
        x = r.normal(size=(2, 5, 5, 3))
        k = np.zeros((1, 1, 3, 3))
        for c in range(3):
            k[0, 0, c, c] = 1.0
        out = T.conv2d(T.Tensor(x), T.Tensor(k), stride=1)
        np.testing.assert_allclose(out.data, x)

    def test_conv2d_matches_bruteforce(self):
        r = rng(1)
        x = r.normal(size=(1, 6, 6, 2))
        k = r.normal(size=(3, 3, 2, 4))
        out = T.conv2d(T.Tensor(x), T.Tensor(k), stride=2, padding="SAME").data
        # reference: explicit loops; SAME puts the odd padding pixel bottom/right
        xp = np.pad(x, ((0, 0), (0, 1), (0, 1), (0, 0)))
        ref = np.zeros((1, 3, 3, 4))
        for i in range(3):
            for j in range(3):
                patch = xp[0, 2 * i : 2 * i + 3, 2 * j : 2 * j + 3, :]
                ref[0, i, j] = np.tensordot(patch, k, axes=([0, 1, 2], [0, 1, 2]))
        np.testing.assert_allclose(out, ref, rtol=1e-12)

    def test_conv_transpose_is_adjoint(self):
        r = rng(2)
        x = r.normal(size=(2, 8, 8, 3))
        y = r.normal(size=(2, 4, 4, 2))
        k = r.normal(size=(4, 4, 3, 2))
        lhs = np.sum(T.conv2d(T.Tensor(x), T.Tensor(k), stride=2).data * y)
        rhs = np.sum(T.conv_transpose2d(T.Tensor(y), T.Tensor(k), stride=2).data * x)
        assert lhs == pytest.approx(rhs, rel=1e-12)

    def test_group_norm_constant_input_is_zero(self):
        x = T.Tensor(np.full((2, 4, 4, 4), 3.0))
        out = T.group_norm(x, T.Tensor(np.ones(4)), T.Tensor(np.zeros(4)), groups=1)
        assert np.abs(out.data).max() < 1e-6

    def test_shape_mismatch_names_kind(self):
        with pytest.raises(T.ShapeError, match="matmul"):
            T.matmul(T.Tensor(np.ones((2, 3))), T.Tensor(np.ones((4, 5))))
        with pytest.raises(T.ShapeError, match="conv2d"):
            T.conv2d(T.Tensor(np.ones((1, 4, 4, 2))), T.Tensor(np.ones((3, 3, 5, 1))))

    def test_bce_with_logits_values(self):
        logit = T.Tensor(np.array([0.0, 100.0, -100.0]))
        label = np.array([0.0, 1.0, 0.0])
        out = T.bce_with_logits(logit, label)
        np.testing.assert_allclose(out.data, [np.log(2.0), 0.0, 0.0], atol=1e-12)

    def test_debug_mode_detects_nan(self):
        T.DEBUG_CHECKS = True
        try:
            with pytest.raises(FloatingPointError):
                T.log(T.Tensor(np.array([-1.0])))
        finally:
            T.DEBUG_CHECKS = False


class TestBackward:
    def test_square_gradient(self):
        x = T.Tensor(np.array([3.0]), requires_grad=True)
        T.backward(T.reduce_sum(x * x))
        assert x.grad == pytest.approx(6.0)

    def test_mse_gradient_is_2x_over_n(self):
        r = rng(3)
        xd = r.normal(size=8)
        x = T.Tensor(xd, requires_grad=True)
        T.backward(T.mse(x, T.Tensor(np.zeros(8))))
        np.testing.assert_allclose(x.grad, 2 * xd / 8, rtol=1e-12)

    def test_non_scalar_loss_rejected(self):
        with pytest.raises(T.ShapeError, match="scalar"):
            T.backward(T.Tensor(np.ones(3), requires_grad=True))

    def test_unreachable_leaf_gets_no_gradient(self):
        x = T.Tensor(np.ones(3), requires_grad=True)
        y = T.Tensor(np.ones(3), requires_grad=True)
        T.backward(T.reduce_sum(x * x))
        assert y.grad is None

    def test_three_layer_net_matches_finite_differences(self):
        r = rng(4)
        ws = [r.normal(size=(6, 8)), r.normal(size=(8, 8)), r.normal(size=(8, 1))]
        bs = [r.normal(size=8), r.normal(size=8), r.normal(size=1)]

        def f(x):
            h = T.reshape(x, (3, 6))
            for w, b, act in zip(ws, bs, (True, True, False)):
                h = T.dense(h, T.Tensor(w), T.Tensor(b))
                if act:
                    h = T.relu(h)
            return T.reduce_mean(h * h)

        err, _, ok = T.grad_check(f, r.normal(size=18))
        assert ok, f"rel err {err}"

    def test_linearity_of_backward(self):
        r = rng(5)
        xd = r.normal(size=6)

        def grad_of(fn):
            x = T.Tensor(xd, requires_grad=True)
            T.backward(fn(x))
            return x.grad

        gf = grad_of(lambda x: T.reduce_sum(x * x))
        gg = grad_of(lambda x: T.reduce_sum(x * x * x))
        gc = grad_of(lambda x: 2.0 * T.reduce_sum(x * x) + 3.0 * T.reduce_sum(x * x * x))
        # equality up to one ulp of float reassociation
        np.testing.assert_allclose(gc, 2.0 * gf + 3.0 * gg, rtol=1e-15)

    def test_determinism(self):
        r = rng(6)
        xd = r.normal(size=(2, 6, 6, 2))
        k = r.normal(size=(3, 3, 2, 3))

        def run():
            x = T.Tensor(xd, requires_grad=True)
            y = T.relu(T.conv2d(x, T.Tensor(k), stride=2))
            T.backward(T.reduce_sum(y * y))
            return x.grad

        assert np.array_equal(run(), run())


PRIMITIVE_CASES = [
    ("add", lambda x, r: T.reduce_sum(x + T.Tensor(r.normal(size=x.data.shape)))),
    ("mul", lambda x, r: T.reduce_sum(x * T.Tensor(r.normal(size=x.data.shape)))),
    ("power", lambda x, r: T.reduce_sum(T.power(x * x + 1.0, 1.7))),
    ("sqrt", lambda x, r: T.reduce_sum(T.sqrt(x * x + 0.5))),
    ("relu", lambda x, r: T.reduce_sum(T.relu(x) * T.relu(x))),
    ("abs", lambda x, r: T.reduce_sum(T.absolute(x) * T.Tensor(r.normal(size=x.data.shape)))),
    ("mean", lambda x, r: T.reduce_mean(x * x)),
    ("reshape", lambda x, r: T.reduce_sum(T.power(T.reshape(x, (2, -1) if False else (x.data.size,)), 2.0))),
    ("bce", lambda x, r: T.reduce_mean(T.bce_with_logits(x, (r.random(x.data.shape) > 0.5).astype(float)))),
]


@pytest.mark.parametrize("name,builder", PRIMITIVE_CASES, ids=[c[0] for c in PRIMITIVE_CASES])
def test_primitive_gradcheck_random_shapes(name, builder):
    r = rng(hash(name) % 2**32)
    for trial in range(10):
        shape = tuple(int(s) for s in r.integers(2, 5, size=int(r.integers(1, 3))))
        data = r.normal(size=shape) + 0.1  # keep away from relu/abs kinks
        err, _, ok = T.grad_check(lambda x: builder(x, np.random.default_rng(trial)), data)
        assert ok, f"{name} trial {trial}: rel err {err}"


@pytest.mark.parametrize("stride,padding", [(1, "SAME"), (2, "SAME"), (1, "VALID")])
def test_conv_gradcheck(stride, padding):
    r = rng(11)
    x = r.normal(size=(2, 5, 5, 2))
    k = r.normal(size=(3, 3, 2, 3)) * 0.4

    def fx(t):
        y = T.conv2d(T.reshape(t, x.shape), T.Tensor(k), stride=stride, padding=padding)
        return T.reduce_sum(y * y)

    def fk(t):
        y = T.conv2d(T.Tensor(x), T.reshape(t, k.shape), stride=stride, padding=padding)
        return T.reduce_sum(y * y)

    for f, p in ((fx, x), (fk, k)):
        err, _, ok = T.grad_check(f, p.reshape(-1))
        assert ok, f"rel err {err}"


def test_conv_transpose_gradcheck():
    r = rng(12)
    x = r.normal(size=(1, 3, 3, 2))
    k = r.normal(size=(4, 4, 3, 2)) * 0.4

    def fx(t):
        y = T.conv_transpose2d(T.reshape(t, x.shape), T.Tensor(k), stride=2)
        return T.reduce_sum(y * y)

    def fk(t):
        y = T.conv_transpose2d(T.Tensor(x), T.reshape(t, k.shape), stride=2)
        return T.reduce_sum(y * y)

    for f, p in ((fx, x), (fk, k)):
        err, _, ok = T.grad_check(f, p.reshape(-1))
        assert ok, f"rel err {err}"


def test_group_norm_gradcheck():
    r = rng(13)
    gamma, beta = r.normal(size=4), r.normal(size=4)

    def f(t):
        y = T.group_norm(T.reshape(t, (1, 3, 3, 4)), T.Tensor(gamma), T.Tensor(beta), groups=2)
        return T.reduce_sum(y * y)

    err, _, ok = T.grad_check(f, r.normal(size=36))
    assert ok, f"rel err {err}"


class TestInputGradient:
    def test_linear_map(self):
        w = np.array([1.0, 2.0, 3.0])
        grad = T.input_gradient(
            lambda x: T.reduce_sum(x * T.Tensor(w)), np.array([5.0, -1.0, 0.5])
        )
        np.testing.assert_array_equal(grad, w)

    def test_constant_net(self):
        grad = T.input_gradient(lambda x: T.reduce_sum(x * 0.0) + 7.0, np.ones(4))
        np.testing.assert_array_equal(grad, np.zeros(4))

    def test_small_conv_net_matches_fd(self):
        r = rng(14)
        k = r.normal(size=(3, 3, 1, 2)) * 0.5
        w = r.normal(size=(8, 1))

        def f(x):
            h = T.relu(T.conv2d(T.reshape(x, (1, 4, 4, 1)), T.Tensor(k), stride=2))
            return T.reduce_sum(T.matmul(T.flatten(h), T.Tensor(w)))

        err, _, ok = T.grad_check(f, r.normal(size=16) + 0.2)
        assert ok, f"rel err {err}"


class TestDecoderVjp:
    def test_linear_decoder_gives_wt_v(self):
        r = rng(15)
        w = r.normal(size=(3, 10))
        z = T.Tensor(r.normal(size=(4, 3)), requires_grad=True)
        v = r.normal(size=(4, 10))
        out = T.decoder_vjp(lambda zz: T.matmul(zz, T.Tensor(w)), z, v)
        np.testing.assert_allclose(out.data, v @ w.T, rtol=1e-12)

    def test_zero_v_gives_zero_and_zero_param_grad(self):
        r = rng(16)
        w = T.Tensor(r.normal(size=(3, 5)), requires_grad=True)
        z = T.Tensor(r.normal(size=(2, 3)))
        out = T.decoder_vjp(lambda zz: T.matmul(zz, w), z, np.zeros((2, 5)))
        assert np.all(out.data == 0)
        T.backward(T.squared_l2(out))
        assert np.all(w.grad == 0)

    def test_matches_explicit_jacobian(self):
        r = rng(17)
        w1, b1 = r.normal(size=(3, 8)) * 0.5, r.normal(size=8) * 0.1
        w2, b2 = r.normal(size=(8, 6)) * 0.5, r.normal(size=6) * 0.1

        def dec(z):
            return T.dense(T.relu(T.dense(z, T.Tensor(w1), T.Tensor(b1))),
                           T.Tensor(w2), T.Tensor(b2))

        z0 = r.normal(size=3)
        v = r.normal(size=(1, 6))
        out = T.decoder_vjp(dec, T.Tensor(z0[None, :]), v).data[0]
        # finite-difference Jacobian, step 1e-6
        jac = np.zeros((6, 3))
        with T.no_grad():
            for k in range(3):
                zp, zm = z0.copy(), z0.copy()
                zp[k] += 1e-6
                zm[k] -= 1e-6
                jac[:, k] = (dec(T.Tensor(zp[None, :])).data[0]
                             - dec(T.Tensor(zm[None, :])).data[0]) / 2e-6
        np.testing.assert_allclose(out, jac.T @ v[0], rtol=1e-6)

    def test_param_gradient_of_vjp_matches_fd(self):
        r = rng(18)
        w1, b1 = r.normal(size=(3, 8)) * 0.5, r.normal(size=8) * 0.1
        w2d, b2 = r.normal(size=(8, 6)) * 0.5, r.normal(size=6) * 0.1
        zfix = r.normal(size=(2, 3))
        vfix = r.normal(size=(2, 6))
        e1 = np.array([1.0, 0.0, 0.0])

        def loss_given_w2(w2flat):
            def dec(z):
                h = T.relu(T.dense(z, T.Tensor(w1), T.Tensor(b1)))
                return T.dense(h, T.reshape(w2flat, (8, 6)), T.Tensor(b2))

            out = T.decoder_vjp(dec, T.Tensor(zfix), vfix)
            d = T.reduce_mean(T.absolute(out), axis=0) - T.Tensor(e1)
            return T.squared_l2(d)

        err, _, ok = T.grad_check(loss_given_w2, w2d.reshape(-1), tolerance=1e-4)
        assert ok, f"rel err {err}"


class TestGradCheckHarness:
    def test_sum_of_squares_passes_tightly(self):
        err, _, ok = T.grad_check(lambda x: T.reduce_sum(x * x), np.arange(1.0, 5.0))
        assert ok and err < 1e-9

    def test_negative_control_detects_wrong_gradient(self):
        # fixture with an intentionally wrong backward rule
        def bad(x):
            out = T._make(x.data**2, (x,), lambda g: (g * 3.0 * x.data,), "bad")
            return T.reduce_sum(out)

        err, _, ok = T.grad_check(bad, np.array([1.0, 2.0]))
        assert not ok and err > 1e-6
