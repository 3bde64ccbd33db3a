import numpy as np
import pytest

from robustwrn import _kernels as K
from oracles import jacobi_reference

pytestmark = pytest.mark.skipif(not K.HAVE_NUMBA, reason="numba path disabled")


@pytest.mark.parametrize("k,stride,pad", [(3, 1, 1), (3, 2, 1), (1, 2, 0), (2, 1, 0)])
def test_im2col_numba_matches_numpy(rng, k, stride, pad):
    x = rng.standard_normal((2, 3, 7, 7))
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (7 + 2 * pad - k) // stride + 1
    a = K._im2col_numpy(xp, k, stride, ho, ho)
    b = K._im2col_nb(np.ascontiguousarray(xp), k, stride, ho, ho)
    assert np.array_equal(a, b)


@pytest.mark.parametrize("k,stride", [(3, 1), (3, 2), (2, 2)])
def test_col2im_numba_matches_numpy(rng, k, stride):
    n, c, hp = 2, 3, 9
    ho = (hp - k) // stride + 1
    d = rng.standard_normal((n * ho * ho, c * k * k))
    a = K._col2im_numpy(d, n, c, hp, hp, k, stride, ho, ho)
    b = K._col2im_nb(d, n, c, hp, hp, k, stride, ho, ho)
    np.testing.assert_allclose(a, b, rtol=0, atol=1e-13)


def test_col2im_is_adjoint_of_im2col(rng):
    # <im2col(x), d> == <x, col2im(d)>
    x = rng.standard_normal((1, 2, 6, 6))
    cols = K.im2col(x, 3, 1, 4, 4)
    d = rng.standard_normal(cols.shape)
    back = K.col2im(d, 1, 2, 6, 6, 3, 1, 4, 4)
    assert np.isclose((cols * d).sum(), (x * back).sum(), rtol=1e-12)


def test_jacobi_paths_agree_with_reference(rng):
    a = rng.standard_normal((8, 8))
    a = a + a.T
    ref = jacobi_reference(a)
    np.testing.assert_allclose(K._jacobi_eigvalsh_numpy(a.copy(), 1e-14, 60), ref, atol=1e-10)
    np.testing.assert_allclose(K._jacobi_eigvalsh_nb(a.copy(), 1e-14, 60), ref, atol=1e-10)
    np.testing.assert_allclose(ref, np.linalg.eigvalsh(a), atol=1e-10)
