"""Differentiation engine checks: replay, gradients vs finite differences,
and the one-step-lookahead meta-gradient."""

import numpy as np
import pytest
from conftest import assert_grads_close, finite_difference

from metaloss import autodiff as ad


def _nudge(x, margin=1e-3):
    """Keep entries away from the rectifier kink so FD stays valid."""
    x = np.where(np.abs(x) < margin, x + 0.1, x)
    return x


class TestForwardRecords:
    def test_identity_record(self, rng):
        x = ad.parameter(rng.normal(size=(3, 4)))
        rec = ad.make_record([x], x)
        out = ad.run_record(rec, [x.value])
        np.testing.assert_array_equal(out, x.value)

    def test_identity_multiply(self):
        a = ad.parameter([[1.0, 2.0], [3.0, 4.0]])
        b = ad.parameter(np.eye(2))
        rec = ad.make_record([a, b], ad.matmul(a, b))
        out = ad.run_record(rec, [a.value, np.eye(2)])
        np.testing.assert_array_equal(out, [[1.0, 2.0], [3.0, 4.0]])

    def test_rectifier(self):
        x = ad.parameter([[-1.0, 2.0]])
        rec = ad.make_record([x], ad.relu(x))
        np.testing.assert_array_equal(
            ad.run_record(rec, [np.array([[-1.0, 2.0]])]), [[0.0, 2.0]]
        )

    def test_replay_is_bit_exact(self, rng):
        x = ad.parameter(rng.normal(size=(5, 3)))
        w = ad.parameter(rng.normal(size=(3, 2)))
        out = ad.sum_all(ad.logistic(ad.matmul(ad.relu(x), w)))
        rec = ad.make_record([x, w], out)
        v1 = ad.run_record(rec, [x.value, w.value])
        v2 = ad.run_record(rec, [x.value, w.value])
        assert (v1 == v2).all()
        assert (v1 == out.value).all()

    def test_shape_mismatch_rejected(self, rng):
        x = ad.parameter(rng.normal(size=(3, 4)))
        rec = ad.make_record([x], ad.relu(x))
        with pytest.raises(ad.ShapeError):
            ad.run_record(rec, [rng.normal(size=(4, 3))])
        with pytest.raises(ad.ShapeError):
            ad.matmul(x, ad.parameter(rng.normal(size=(3, 2))))

    def test_nonfinite_intermediate_rejected(self):
        x = ad.parameter([[1000.0]])
        with pytest.raises(ad.NonFiniteError):
            ad.exp(x)
        with pytest.raises(ad.NonFiniteError):
            ad.constant([[np.inf]])


class TestGradient:
    def test_square(self):
        w = ad.parameter([[3.0]])
        (g,) = ad.grad(ad.mul(w, w), [w])
        assert g.item() == pytest.approx(6.0, abs=1e-12)

    def test_sum_gives_ones(self, rng):
        w = ad.parameter(rng.normal(size=(4, 5)))
        (g,) = ad.grad(ad.sum_all(w), [w])
        np.testing.assert_array_equal(g.value, np.ones((4, 5)))

    def test_nonscalar_output_rejected(self, rng):
        w = ad.parameter(rng.normal(size=(2, 2)))
        with pytest.raises(ad.ShapeError):
            ad.grad(ad.relu(w), [w])

    def test_param_not_in_record_rejected(self, rng):
        w = ad.parameter(rng.normal(size=(2, 2)))
        other = ad.parameter(rng.normal(size=(2, 2)))
        loss = ad.sum_all(w)
        with pytest.raises(ValueError, match="do not appear"):
            ad.grad(loss, [other])
        (g,) = ad.grad(loss, [other], allow_unused=True)
        np.testing.assert_array_equal(g.value, np.zeros((2, 2)))

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_random_record_matches_finite_differences(self, seed):
        rng = np.random.default_rng(seed)
        x = _nudge(rng.uniform(-2, 2, size=(4, 3)))
        w1 = _nudge(rng.uniform(-2, 2, size=(3, 5)))
        b1 = _nudge(rng.uniform(-2, 2, size=(1, 5)))
        w2 = _nudge(rng.uniform(-2, 2, size=(5, 2)))

        def build():
            xv = ad.constant(x)
            w1v, b1v, w2v = ad.parameter(w1), ad.parameter(b1), ad.parameter(w2)
            h = ad.relu(ad.add(ad.matmul(xv, w1v), b1v))
            z = ad.matmul(ad.logistic(h), w2v)
            out = ad.mean_all(ad.logsumexp_rows(z))
            return out, [w1v, b1v, w2v]

        out, params = build()
        analytic = [g.value for g in ad.grad(out, params)]
        numeric = finite_difference(lambda: build()[0].item(), [w1, b1, w2], h=1e-6)
        assert_grads_close(analytic, numeric, rtol=1e-6)

    PRIMITIVES = ["matmul", "add", "mul", "relu", "logistic", "exp", "log",
                  "logsumexp_rows", "sum_rows", "sum_cols", "transpose", "scale"]

    @pytest.mark.parametrize("name", PRIMITIVES)
    def test_each_primitive_matches_finite_differences(self, name):
        rng = np.random.default_rng(100 + self.PRIMITIVES.index(name))
        a = _nudge(rng.uniform(-2, 2, size=(3, 4)))
        if name == "log":
            a = rng.uniform(0.5, 2.0, size=(3, 4))
        b = _nudge(rng.uniform(-2, 2, size=(4, 2) if name == "matmul" else (3, 4)))

        def build():
            av = ad.parameter(a)
            if name == "matmul":
                node = ad.matmul(av, ad.constant(b))
            elif name in ("add", "mul"):
                node = getattr(ad, name)(av, ad.constant(b))
            elif name == "scale":
                node = ad.scale(av, -1.7)
            else:
                node = getattr(ad, name)(av)
            return ad.sum_all(ad.mul(node, node)), av

        out, param = build()
        (analytic,) = ad.grad(out, [param])
        (numeric,) = finite_difference(lambda: build()[0].item(), [a], h=1e-6)
        assert_grads_close([analytic.value], [numeric], rtol=1e-6)

    def test_gradient_linearity(self, rng):
        w = ad.parameter(rng.normal(size=(3, 3)))
        l1 = ad.sum_all(ad.mul(w, w))
        l2 = ad.sum_all(ad.relu(w))
        (g_sum,) = ad.grad(ad.add(l1, l2), [w])
        (g1,) = ad.grad(l1, [w])
        (g2,) = ad.grad(l2, [w])
        np.testing.assert_allclose(g_sum.value, g1.value + g2.value, atol=1e-12)

    def test_gradient_is_replayable_at_new_inputs(self, rng):
        x = rng.normal(size=(2, 3))
        xv = ad.parameter(x)
        loss = ad.sum_all(ad.mul(ad.relu(xv), ad.relu(xv)))
        (g,) = ad.grad(loss, [xv])
        rec = ad.make_record([xv], g)
        x2 = rng.normal(size=(2, 3))
        replayed = ad.run_record(rec, [x2])
        expected = 2.0 * np.maximum(x2, 0.0) * (x2 > 0)
        np.testing.assert_allclose(replayed, expected, atol=1e-12)

    def test_grad_of_grad(self):
        w = ad.parameter([[2.0]])
        cube = ad.mul(ad.mul(w, w), w)
        (g,) = ad.grad(cube, [w])
        (gg,) = ad.grad(g, [w])
        assert gg.item() == pytest.approx(12.0, abs=1e-12)


class TestMetaGradient:
    def test_closed_form_quadratic(self):
        omega = ad.parameter([[1.0]])
        theta = ad.parameter([[0.0]])
        train = ad.mul(theta, omega)
        meta = ad.mul(omega, omega)
        (g,) = ad.meta_gradient(train, meta, [omega], [theta], alpha=0.1)
        assert g.item() == pytest.approx(-0.2, abs=1e-12)

    def test_absent_theta_gives_zeros(self, rng):
        omega = ad.parameter(rng.normal(size=(2, 2)))
        theta = ad.parameter(rng.normal(size=(3, 1)))
        train = ad.sum_all(ad.mul(omega, omega))
        meta = ad.sum_all(omega)
        (g,) = ad.meta_gradient(train, meta, [omega], [theta], alpha=0.5)
        np.testing.assert_array_equal(g.value, np.zeros((3, 1)))

    def test_invalid_alpha_rejected(self):
        w = ad.parameter([[1.0]])
        loss = ad.mul(w, w)
        with pytest.raises(ValueError, match="alpha"):
            ad.meta_gradient(loss, loss, [w], [w], alpha=0.0)

    @pytest.mark.parametrize("seed", [3, 7])
    def test_two_layer_network_matches_finite_differences(self, seed):
        rng = np.random.default_rng(seed)
        x = _nudge(rng.uniform(-1, 1, size=(6, 3)))
        xm = _nudge(rng.uniform(-1, 1, size=(4, 3)))
        w1 = 0.5 * _nudge(rng.uniform(-1, 1, size=(3, 4)))
        w2 = 0.5 * _nudge(rng.uniform(-1, 1, size=(4, 1)))
        th = 0.5 * _nudge(rng.uniform(-1, 1, size=(1, 4)))
        alpha = 0.05

        def build():
            w1v, w2v, thv = ad.parameter(w1), ad.parameter(w2), ad.parameter(th)
            h = ad.relu(ad.add(ad.matmul(ad.constant(x), w1v),
                               ad.bcast_rows(thv, x.shape[0])))
            train = ad.mean_all(ad.mul(ad.matmul(h, w2v), ad.matmul(h, w2v)))
            hm = ad.relu(ad.matmul(ad.constant(xm), w1v))
            meta = ad.mean_all(ad.logsumexp_rows(ad.matmul(hm, w2v)))
            return train, meta, [w1v, w2v], [thv]

        train, meta, omega, theta = build()
        (analytic,) = ad.meta_gradient(train, meta, omega, theta, alpha)

        def composed():
            train, meta, omega, theta = build()
            om_grads = ad.grad(train, omega)
            virtual = {w: ad.add(w, ad.scale(g, -alpha)) for w, g in zip(omega, om_grads)}
            return ad.substitute(meta, virtual).item()

        (numeric,) = finite_difference(composed, [th], h=1e-5)
        assert_grads_close([analytic.value], [numeric], rtol=1e-5, atol=1e-8)
