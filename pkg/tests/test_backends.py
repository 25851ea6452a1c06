"""The compiled kernels and the numpy fallback must agree."""
import numpy as np
import pytest

from localdrop._backend import get_kernels

try:
    cy = get_kernels("cython")
except ImportError:  # extension not built
    cy = None
py = get_kernels("python")

pytestmark = pytest.mark.skipif(cy is None, reason="compiled extension not built")


def test_jacobi_agrees():
    a = np.random.default_rng(0).standard_normal((4, 9, 6))
    rp, vp, _, offp = py.jacobi_svd_batch(a, 1e-12, 100, True)
    rc, vc, _, offc = cy.jacobi_svd_batch(a, 1e-12, 100, True)
    assert offp <= 1e-12 and offc <= 1e-12
    sp = np.sort(np.linalg.norm(rp, axis=1), axis=1)
    sc = np.sort(np.linalg.norm(rc, axis=1), axis=1)
    np.testing.assert_allclose(sp, sc, rtol=1e-12)
    for b in range(4):
        np.testing.assert_allclose(rp[b] @ vp[b].T, a[b], atol=1e-12)
        np.testing.assert_allclose(rc[b] @ vc[b].T, a[b], atol=1e-12)


@pytest.mark.parametrize("odd", [False, True])
def test_jacobi_without_v(odd):
    n = 5 if odd else 6
    a = np.random.default_rng(1).standard_normal((2, 8, n))
    rp, vp, _, _ = py.jacobi_svd_batch(a, 1e-12, 100, False)
    rc, vc, _, _ = cy.jacobi_svd_batch(a, 1e-12, 100, False)
    assert vp is None and vc is None
    np.testing.assert_allclose(np.sort(np.linalg.norm(rp, axis=1)), np.sort(np.linalg.norm(rc, axis=1)), rtol=1e-12)


def test_conv_kernels_agree():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((3, 2, 7, 6))
    w = rng.standard_normal((2, 4, 3, 2))
    out_p, out_c = py.conv2d_valid_batch(x, w), cy.conv2d_valid_batch(x, w)
    np.testing.assert_allclose(out_p, out_c, atol=1e-12)
    g = rng.standard_normal(out_p.shape)
    np.testing.assert_allclose(py.conv2d_grad_weight(x, g, 3, 2), cy.conv2d_grad_weight(x, g, 3, 2), atol=1e-12)
    np.testing.assert_allclose(py.conv2d_grad_input(g, w, 7, 6), cy.conv2d_grad_input(g, w, 7, 6), atol=1e-12)


def test_maxpool_agrees():
    x = np.random.default_rng(3).standard_normal((2, 3, 7, 8))
    op, ap = py.maxpool_forward(x, 2)
    oc, ac = cy.maxpool_forward(x, 2)
    np.testing.assert_array_equal(op, oc)
    np.testing.assert_array_equal(ap, ac)
    g = np.random.default_rng(4).standard_normal(op.shape)
    np.testing.assert_array_equal(py.maxpool_backward(g, ap, x.shape, 2), cy.maxpool_backward(g, ac, x.shape, 2))


def test_dropblock_expand_agrees():
    seeds = np.random.default_rng(5).random((6, 8, 8)) < 0.1
    np.testing.assert_array_equal(py.dropblock_expand(seeds, 3, 10, 10), cy.dropblock_expand(seeds, 3, 10, 10))
