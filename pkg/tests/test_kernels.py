"""Cross-checks between the numba and numpy kernel implementations."""

import numpy as np
import pytest

from sdvmatch import kernels as K

CONV_CASES = [
    # (batch, cin, n, cout, k, stride, pad)
    (2, 1, 8, 4, 3, 1, 1),
    (3, 4, 8, 6, 3, 2, 1),
    (2, 3, 5, 2, 4, 1, 0),
    (1, 2, 7, 3, 2, 2, 1),
    (2, 2, 4, 3, 4, 1, 0),
    (4, 5, 6, 7, 1, 1, 0),
    (2, 3, 9, 4, 5, 2, 2),
]

needs_numba = pytest.mark.skipif(not K.NUMBA_ENABLED, reason="numba disabled")


class TestShapes:
    def test_output_size(self):
        assert K.conv_output_size(16, 3, 1, 1) == 16
        assert K.conv_output_size(16, 3, 2, 1) == 8
        assert K.conv_output_size(8, 3, 2, 1) == 4
        assert K.conv_output_size(4, 4, 1, 0) == 1


@needs_numba
class TestPathAgreement:
    @pytest.mark.parametrize("case", CONV_CASES)
    def test_forward(self, rng, case):
        b, cin, n, cout, k, s, p = case
        x = rng.standard_normal((b, cin, n, n, n))
        w = rng.standard_normal((cout, cin, k, k, k))
        bias = rng.standard_normal(cout)
        y_jit = K._conv3d_forward_jit(x, w, bias, s, p)
        y_np = K._conv3d_forward_numpy(x, w, bias, s, p)
        np.testing.assert_allclose(y_jit, y_np, atol=1e-12)

    @pytest.mark.parametrize("case", CONV_CASES)
    def test_backward(self, rng, case):
        b, cin, n, cout, k, s, p = case
        x = rng.standard_normal((b, cin, n, n, n))
        w = rng.standard_normal((cout, cin, k, k, k))
        out = K.conv_output_size(n, k, s, p)
        dy = rng.standard_normal((b, cout, out, out, out))
        np.testing.assert_allclose(
            K._conv3d_backward_w_jit(x, dy, k, s, p),
            K._conv3d_backward_w_numpy(x, dy, k, s, p), atol=1e-12)
        np.testing.assert_allclose(
            K._conv3d_backward_x_jit(w, dy, n, s, p),
            K._conv3d_backward_x_numpy(w, dy, n, s, p), atol=1e-12)

    def test_sdv_accumulate(self, rng):
        pts = rng.uniform(-0.15, 0.15, (300, 3))
        s_jit, c_jit = K._sdv_accumulate_numba(pts, 16, 0.3, 0.0164)
        s_np, c_np = K._sdv_accumulate_numpy(pts, 16, 0.3, 0.0164)
        np.testing.assert_array_equal(c_jit, c_np)
        np.testing.assert_allclose(s_jit, s_np, atol=1e-12)

    def test_sdv_empty(self):
        s, c = K.sdv_accumulate(np.empty((0, 3)), 8, 0.3, 0.02)
        assert s.sum() == 0 and c.sum() == 0


class TestConvAdjoint:
    """dw and dx must be the true adjoints of the forward map."""

    @pytest.mark.parametrize("case", CONV_CASES)
    def test_inner_product_identity(self, rng, case):
        # <conv(x, w), dy> == <x, dx(w, dy)> + 0 and == <w, dw(x, dy)> + <b, db>
        b, cin, n, cout, k, s, p = case
        x = rng.standard_normal((b, cin, n, n, n))
        w = rng.standard_normal((cout, cin, k, k, k))
        bias = np.zeros(cout)
        y = K.conv3d_forward(x, w, bias, s, p)
        dy = rng.standard_normal(y.shape)
        lhs = float(np.sum(y * dy))
        dx = K.conv3d_backward_x(w, dy, n, s, p)
        dw = K.conv3d_backward_w(x, dy, k, s, p)
        np.testing.assert_allclose(lhs, float(np.sum(x * dx)), rtol=1e-10)
        np.testing.assert_allclose(lhs, float(np.sum(w * dw)), rtol=1e-10)
