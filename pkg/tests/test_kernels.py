import os
import subprocess
import sys

import numpy as np
import pytest

from cnsnet import kernels

BACKENDS = kernels.available_backends()


def _im2col_loop(x, kh, kw, stride, pad):
    n, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    rows = []
    for i in range(n):
        for r in range(oh):
            for s in range(ow):
                patch = xp[i, :, r * stride:r * stride + kh, s * stride:s * stride + kw]
                rows.append(patch.reshape(-1))
    return np.array(rows)


@pytest.fixture(params=BACKENDS)
def backend(request):
    return kernels.get_backend(request.param)


class TestBackendSelection:
    def test_backend_name(self):
        assert kernels.BACKEND in ("python", "cython")

    def test_unknown_backend(self):
        with pytest.raises(ValueError):
            kernels.get_backend("fortran")

    def test_env_var_forces_python(self):
        env = dict(os.environ, CNSNET_PURE_PYTHON="1")
        out = subprocess.run([sys.executable, "-c", "import cnsnet.kernels as k; print(k.BACKEND)"],
                             env=env, capture_output=True, text=True, check=True)
        assert out.stdout.strip() == "python"


class TestKernels:
    @pytest.mark.parametrize("dtype", [np.float32, np.float64])
    @pytest.mark.parametrize("stride,pad", [(1, 1), (1, 0), (2, 1)])
    def test_im2col_matches_loop(self, backend, rng, dtype, stride, pad):
        x = rng.normal(size=(2, 3, 7, 6)).astype(dtype)
        cols = backend.im2col(x, 3, 3, stride, pad)
        np.testing.assert_array_equal(cols, _im2col_loop(x, 3, 3, stride, pad))
        assert cols.dtype == dtype

    @pytest.mark.parametrize("stride,pad", [(1, 1), (2, 0)])
    def test_col2im_is_adjoint_of_im2col(self, backend, rng, stride, pad):
        # <im2col(x), c> == <x, col2im(c)>
        x = rng.normal(size=(2, 2, 6, 5))
        cols = backend.im2col(x, 3, 3, stride, pad)
        c = rng.normal(size=cols.shape)
        lhs = np.sum(cols * c)
        rhs = np.sum(x * backend.col2im(c, x.shape, 3, 3, stride, pad))
        assert lhs == pytest.approx(rhs, rel=1e-12)

    def test_maxpool_forward(self, backend):
        x = np.arange(16, dtype=np.float32).reshape(1, 1, 4, 4)
        out, arg = backend.maxpool_forward(x, 2, 2)
        np.testing.assert_array_equal(out[0, 0], [[5, 7], [13, 15]])
        np.testing.assert_array_equal(arg.reshape(-1), [5, 7, 13, 15])

    def test_maxpool_first_max_wins(self, backend):
        x = np.ones((1, 1, 2, 2), dtype=np.float32)
        _, arg = backend.maxpool_forward(x, 2, 2)
        assert int(arg.reshape(-1)[0]) == 0

    def test_maxpool_backward_routes_to_argmax(self, backend, rng):
        x = rng.normal(size=(2, 3, 6, 6))
        out, arg = backend.maxpool_forward(x, 2, 2)
        g = backend.maxpool_backward(np.ones_like(out), arg, x.shape)
        assert g.sum() == pytest.approx(out.size)
        np.testing.assert_array_equal(np.sort(x[g == 1]), np.sort(out.reshape(-1)))

    def test_softmax_rows(self, backend, rng):
        z = rng.normal(size=(5, 4)) * 10
        e = np.exp(z - z.max(axis=1, keepdims=True))
        np.testing.assert_allclose(backend.softmax_rows(z), e / e.sum(axis=1, keepdims=True), rtol=1e-12)


@pytest.mark.skipif(len(BACKENDS) < 2, reason="compiled kernels not built")
class TestBackendsAgree:
    def test_all_kernels(self, rng):
        py, cy = kernels.get_backend("python"), kernels.get_backend("cython")
        x = rng.normal(size=(3, 4, 9, 9)).astype(np.float32)
        np.testing.assert_array_equal(py.im2col(x, 3, 3, 1, 1), cy.im2col(x, 3, 3, 1, 1))
        cols = rng.normal(size=(3 * 81, 36)).astype(np.float32)
        np.testing.assert_allclose(py.col2im(cols, x.shape, 3, 3, 1, 1),
                                   cy.col2im(cols, x.shape, 3, 3, 1, 1), rtol=1e-6, atol=1e-6)
        po, pa = py.maxpool_forward(x, 2, 2)
        co, ca = cy.maxpool_forward(x, 2, 2)
        np.testing.assert_array_equal(po, co)
        np.testing.assert_array_equal(pa, ca)
        np.testing.assert_array_equal(py.maxpool_backward(po, pa, x.shape),
                                      cy.maxpool_backward(co, ca, x.shape))
        z = rng.normal(size=(8, 6)).astype(np.float32)
        np.testing.assert_allclose(py.softmax_rows(z), cy.softmax_rows(z), rtol=1e-6)
