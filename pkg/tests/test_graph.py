"""Virtual graph generation and Chebyshev convolution.

The Chebyshev oracle expands T_0..T_3 into explicit matrix powers
(I, L, 2L^2 - I, 4L^3 - 3L) with numpy, independent of the recurrence
implementation under test.
"""

import numpy as np
import numpy.testing as npt
import pytest

from cdvgm import graph as gr
from cdvgm import tensor as tz
from cdvgm.tensor import Tensor


def explicit_cheby_terms(l_hat: np.ndarray, order: int) -> list[np.ndarray]:
    n = l_hat.shape[0]
    eye = np.eye(n)
    p2 = l_hat @ l_hat
    p3 = p2 @ l_hat
    table = [eye, l_hat, 2.0 * p2 - eye, 4.0 * p3 - 3.0 * l_hat]
    assert order <= len(table)
    return table[:order]


class TestLaplacianPieces:
    def test_trend_product_term_is_symmetric_psd(self):
        rng = np.random.default_rng(41)
        for _ in range(20):
            n = int(rng.integers(2, 12))
            params = gr.DvglParams.init(n, rng)
            l_t = gr.trend_matrix(params).data
            prod = l_t - params.p_b.data
            npt.assert_allclose(prod, prod.T, atol=1e-12)
            eig = np.linalg.eigvalsh(prod)
            assert eig.min() >= -1e-12

    def test_connectivity_entries_nonpositive_for_nonnegative_input(self):
        rng = np.random.default_rng(42)
        for _ in range(100):
            n = int(rng.integers(1, 9))
            t = int(rng.integers(1, 15))
            x = Tensor(rng.uniform(0.0, 50.0, size=(n, t)))
            l_c = gr.connectivity_matrix(x).data
            assert np.all(l_c <= 0.0)

    def test_connectivity_hand_cases(self):
        # x = [[1]], single node single step: -1 * log(2)
        l_c = gr.connectivity_matrix(Tensor([[1.0]])).data
        npt.assert_allclose(l_c, [[-np.log(2.0)]], rtol=1e-15)
        # two nodes, one active: only the (active, active) entry is nonzero
        l_c = gr.connectivity_matrix(Tensor([[1.0], [0.0]])).data
        npt.assert_allclose(l_c, [[-np.log(2.0), 0.0], [0.0, 0.0]], rtol=1e-15)
        npt.assert_array_equal(gr.connectivity_matrix(Tensor(np.zeros((3, 4)))).data,
                               np.zeros((3, 3)))

    def test_trend_term_isolation(self):
        eye = Tensor(np.eye(2))
        zero = Tensor(np.zeros((2, 2)))
        npt.assert_array_equal(
            gr.trend_matrix(gr.DvglParams(p_h=eye, p_b=zero)).data, np.eye(2))
        p_b = np.array([[0.0, 1.0], [2.0, 0.0]])
        npt.assert_array_equal(
            gr.trend_matrix(gr.DvglParams(p_h=zero, p_b=Tensor(p_b))).data, p_b)

    def test_virtual_laplacian_hand_case(self):
        l_t = Tensor([[1.0, -2.0], [0.5, -0.25]])
        l_c = Tensor(np.zeros((2, 2)))
        out = gr.virtual_laplacian(l_t, l_c, theta=0.5, slope=0.01).data
        npt.assert_allclose(out, [[0.5, -0.01], [0.25, -0.00125]], rtol=1e-15)

    def test_virtual_laplacian_rejects_nonpositive_theta(self):
        z = Tensor(np.zeros((2, 2)))
        with pytest.raises(ValueError):
            gr.virtual_laplacian(z, z, theta=0.0)
        with pytest.raises(ValueError):
            gr.DvglParams(p_h=z, p_b=z, theta=-1.0)

    def test_virtual_laplacian_homogeneous_in_theta(self):
        rng = np.random.default_rng(40)
        l_t = Tensor(rng.normal(size=(5, 5)))
        l_c = Tensor(-rng.uniform(0.0, 1.0, size=(5, 5)))
        one = gr.virtual_laplacian(l_t, l_c, theta=0.7).data
        two = gr.virtual_laplacian(l_t, l_c, theta=1.4).data
        npt.assert_allclose(two, 2.0 * one, rtol=1e-15)

    def test_virtual_laplacian_positive_passthrough(self):
        l_t = Tensor(np.array([[0.5, 0.25], [1.0, 2.0]]))
        l_c = Tensor(np.zeros((2, 2)))
        npt.assert_array_equal(
            gr.virtual_laplacian(l_t, l_c, theta=1.0).data, l_t.data)

    def test_update_hand_cases(self):
        l_v = Tensor([[1.0, 2.0], [3.0, 4.0]])
        got = gr.laplacian_update(l_v, mode="scalar_mean").data
        npt.assert_allclose(got, [[-2.5, -8.5], [-8.5, -22.5]], rtol=0)
        got_row = gr.laplacian_update(l_v, mode="row_mean").data
        npt.assert_allclose(got_row, [[-3.5, -9.5], [-7.5, -21.5]], rtol=0)
        with pytest.raises(ValueError):
            gr.laplacian_update(l_v, mode="other")

    def test_update_identity_hand_case(self):
        got = gr.laplacian_update(Tensor(np.eye(2))).data
        npt.assert_allclose(got, [[-0.5, 0.5], [0.5, -0.5]], rtol=0)
        npt.assert_array_equal(gr.laplacian_update(Tensor(np.zeros((3, 3)))).data,
                               np.zeros((3, 3)))

    def test_update_product_term_is_psd(self):
        # mean_term - update(L) = L L^T, which must be PSD
        rng = np.random.default_rng(43)
        for _ in range(20):
            l_v = rng.normal(size=(4, 4))
            got = gr.laplacian_update(Tensor(l_v)).data
            prod = np.full((4, 4), l_v.mean()) - got
            assert np.linalg.eigvalsh((prod + prod.T) / 2).min() >= -1e-10

    def test_update_preserves_shape(self):
        rng = np.random.default_rng(43)
        for n in (2, 5, 9):
            l_v = Tensor(rng.normal(size=(n, n)))
            assert gr.laplacian_update(l_v).shape == (n, n)


class TestRescale:
    def test_rowsum_bounds_spectral_radius(self):
        rng = np.random.default_rng(44)
        for _ in range(50):
            n = int(rng.integers(2, 15))
            l_v = Tensor(rng.normal(scale=rng.uniform(0.1, 20.0), size=(n, n)))
            l_hat = gr.rescale_laplacian(l_v, "rowsum").data
            rowsum = np.abs(l_hat).sum(axis=1).max()
            assert rowsum <= 1.0 + 1e-12
            assert np.abs(np.linalg.eigvals(l_hat)).max() <= 1.0 + 1e-9

    def test_none_mode_passthrough(self):
        l_v = Tensor(np.arange(4.0).reshape(2, 2))
        npt.assert_array_equal(gr.rescale_laplacian(l_v, "none").data, l_v.data)
        with pytest.raises(ValueError):
            gr.rescale_laplacian(l_v, "spectral")


class TestChebyshevConv:
    @staticmethod
    def explicit_reference(l_v, x, params, rescale):
        if rescale == "rowsum":
            l_hat = l_v / (np.abs(l_v).sum(axis=1).max() + 1e-6)
        else:
            l_hat = l_v
        acc = np.zeros(x.shape[:1] + params.coeffs[0].data.shape[1:2] + x.shape[2:])
        for t_k, theta in zip(explicit_cheby_terms(l_hat, params.order),
                              params.coeffs):
            mixed = np.einsum("ij,bcjt->bcit", t_k, x)
            acc += np.einsum("io,bint->bont", theta.data, mixed)
        return np.where(acc > 0, acc, 0.01 * acc)

    def test_recurrence_matches_explicit_polynomials(self):
        # K in 1..4 over 20 random 6-node graphs: recurrence vs matrix powers.
        rng = np.random.default_rng(45)
        n = 6
        for trial in range(20):
            l_v = rng.normal(scale=rng.uniform(0.5, 3.0), size=(n, n))
            x = rng.normal(size=(2, 3, n, 5))
            for order in range(1, 5):
                params = gr.ChebyParams.init(order, 3, 4, rng)
                got = gr.chebyshev_conv(Tensor(l_v), Tensor(x), params).data
                want = self.explicit_reference(l_v, x, params, "rowsum")
                assert np.abs(got - want).max() < 1e-10

    def test_recurrence_matches_without_rescale(self):
        rng = np.random.default_rng(45)
        l_v = rng.normal(scale=0.3, size=(8, 8))
        x = rng.normal(size=(1, 2, 8, 4))
        params = gr.ChebyParams.init(4, 2, 2, rng)
        got = gr.chebyshev_conv(Tensor(l_v), Tensor(x), params,
                                rescale="none").data
        want = self.explicit_reference(l_v, x, params, "none")
        assert np.abs(got - want).max() < 1e-10

    def test_order_one_is_channel_mixing_only(self):
        rng = np.random.default_rng(46)
        l_v = Tensor(rng.normal(size=(4, 4)))
        x = Tensor(rng.uniform(0.5, 1.0, size=(1, 2, 4, 3)))
        params = gr.ChebyParams.init(1, 2, 2, rng)
        got = gr.chebyshev_conv(l_v, x, params).data
        want = np.einsum("io,bint->bont", params.coeffs[0].data, x.data)
        want = np.where(want > 0, want, 0.01 * want)
        npt.assert_allclose(got, want, rtol=1e-12)

    def test_order_one_identity_weights_is_activation(self):
        rng = np.random.default_rng(46)
        l_v = Tensor(rng.normal(size=(4, 4)))
        x = rng.normal(size=(2, 3, 4, 5))
        params = gr.ChebyParams([Tensor(np.eye(3))])
        got = gr.chebyshev_conv(l_v, Tensor(x), params).data
        npt.assert_allclose(got, np.where(x > 0, x, 0.01 * x), rtol=1e-14)

    def test_order_two_identity_laplacian_doubles(self):
        # L~ = I, Theta_0 = Theta_1 = I: (T_0 + T_1) x = 2x, then activation
        rng = np.random.default_rng(46)
        x = rng.normal(size=(1, 2, 3, 4))
        params = gr.ChebyParams([Tensor(np.eye(2)), Tensor(np.eye(2))])
        got = gr.chebyshev_conv(Tensor(np.eye(3)), Tensor(x), params,
                                rescale="none").data
        npt.assert_allclose(got, np.where(x > 0, 2.0 * x, 0.02 * x), rtol=1e-14)

    def test_shape_and_mismatch_errors(self):
        rng = np.random.default_rng(47)
        params = gr.ChebyParams.init(4, 3, 8, rng)
        l_v = Tensor(rng.normal(size=(6, 6)))
        x = Tensor(rng.normal(size=(2, 3, 6, 12)))
        assert gr.chebyshev_conv(l_v, x, params).shape == (2, 8, 6, 12)
        with pytest.raises(ValueError):
            gr.chebyshev_conv(l_v, Tensor(rng.normal(size=(2, 3, 5, 12))), params)
        with pytest.raises(ValueError):
            gr.chebyshev_conv(l_v, Tensor(rng.normal(size=(3, 6, 12))), params)
        with pytest.raises(ValueError):
            gr.ChebyParams.init(0, 3, 8, rng)


class TestPermutationEquivariance:
    def permute(self, arr, perm, axes):
        out = arr
        for ax in axes:
            out = np.take(out, perm, axis=ax)
        return out

    def test_virtual_laplacian_conjugates_under_node_permutation(self):
        rng = np.random.default_rng(48)
        for _ in range(10):
            n, t = 7, 6
            perm = rng.permutation(n)
            params = gr.DvglParams.init(n, rng)
            x = Tensor(rng.uniform(0.0, 3.0, size=(n, t)))

            l_v = gr.virtual_laplacian(
                gr.trend_matrix(params),
                gr.connectivity_matrix(x)).data

            params_p = gr.DvglParams(
                p_h=Tensor(self.permute(params.p_h.data, perm, (0, 1))),
                p_b=Tensor(self.permute(params.p_b.data, perm, (0, 1))))
            x_p = Tensor(x.data[perm])
            l_v_p = gr.virtual_laplacian(
                gr.trend_matrix(params_p),
                gr.connectivity_matrix(x_p)).data

            npt.assert_allclose(l_v_p, self.permute(l_v, perm, (0, 1)),
                                rtol=1e-12, atol=1e-14)

    def test_chebyshev_conv_is_node_equivariant(self):
        rng = np.random.default_rng(49)
        n = 6
        perm = rng.permutation(n)
        l_v = Tensor(rng.normal(size=(n, n)))
        x = Tensor(rng.normal(size=(2, 3, n, 4)))
        params = gr.ChebyParams.init(4, 3, 3, rng)

        base = gr.chebyshev_conv(l_v, x, params).data
        got = gr.chebyshev_conv(
            Tensor(self.permute(l_v.data, perm, (0, 1))),
            Tensor(x.data[:, :, perm, :]), params).data
        npt.assert_allclose(got, base[:, :, perm, :], rtol=1e-12, atol=1e-14)


class TestGraphGradients:
    TOL = 1e-6

    def check(self, fn, x):
        err = tz.finite_diff_check(fn, x)
        assert err < self.TOL, f"max rel grad err {err:.3e}"

    def test_grad_through_connectivity_and_activation(self):
        rng = np.random.default_rng(51)
        x = rng.uniform(0.2, 2.0, size=(4, 5))
        l_t = Tensor(rng.normal(size=(4, 4)))

        def fn(t):
            l_v = gr.virtual_laplacian(l_t, gr.connectivity_matrix(t))
            return (l_v * l_v).sum()

        self.check(fn, x)

    def test_grad_through_trend_parameters(self):
        rng = np.random.default_rng(52)
        p_h = rng.normal(size=(4, 4))
        p_b = Tensor(rng.normal(size=(4, 4)))
        l_c = Tensor(-rng.uniform(0.0, 1.0, size=(4, 4)))

        def fn(t):
            params = gr.DvglParams(p_h=t, p_b=p_b)
            l_v = gr.virtual_laplacian(gr.trend_matrix(params), l_c)
            return (l_v * l_v).sum()

        self.check(fn, p_h)

    def test_grad_through_update_both_modes(self):
        rng = np.random.default_rng(53)
        l_v = rng.normal(size=(5, 5))
        for mode in ("scalar_mean", "row_mean"):
            self.check(lambda t, m=mode:
                       (gr.laplacian_update(t, m) ** 2.0).sum(), l_v)

    def test_grad_through_cheby_including_rescale(self):
        rng = np.random.default_rng(54)
        n = 5
        l_v = rng.normal(size=(n, n))
        x = rng.normal(size=(2, 3, n, 4))
        params = gr.ChebyParams.init(4, 3, 2, rng)

        self.check(lambda t: (gr.chebyshev_conv(t, Tensor(x), params)
                              ** 2.0).sum(), l_v)
        self.check(lambda t: (gr.chebyshev_conv(Tensor(l_v), t, params)
                              ** 2.0).sum(), x)
        for k in range(4):
            base = [Tensor(c.data.copy()) for c in params.coeffs]

            def fn(t, k=k, base=base):
                coeffs = list(base)
                coeffs[k] = t
                return (gr.chebyshev_conv(Tensor(l_v), Tensor(x),
                                          gr.ChebyParams(coeffs)) ** 2.0).sum()

            self.check(fn, params.coeffs[k].data.copy())
