import numpy as np
import pytest

from polyformer import _kernels_py, kernels


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
@pytest.mark.parametrize("k,stride,pad", [(3, 1, 1), (3, 2, 1), (1, 1, 0), (5, 1, 2), (3, 1, 0)])
def test_compiled_matches_fallback_bitwise(dtype, k, stride, pad):
    if kernels.BACKEND != "cython":
        pytest.skip("compiled kernels not built")
    from polyformer import _kernels

    rng = np.random.default_rng(0)
    x = rng.standard_normal((2, 3, 9, 8)).astype(dtype)
    cols_c = _kernels.im2col(x, k, stride, pad)
    cols_p = _kernels_py.im2col(x, k, stride, pad)
    assert cols_c.tobytes() == cols_p.tobytes()
    g = rng.standard_normal(cols_c.shape).astype(dtype)
    assert _kernels.col2im(g, x.shape, k, stride, pad).tobytes() == \
        _kernels_py.col2im(g, x.shape, k, stride, pad).tobytes()


def test_col2im_is_adjoint_of_im2col():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((1, 2, 6, 6))
    cols = kernels.im2col(x, 3, 2, 1)
    y = rng.standard_normal(cols.shape)
    lhs = (cols * y).sum()
    rhs = (x * kernels.col2im(y, x.shape, 3, 2, 1)).sum()
    assert abs(lhs - rhs) < 1e-10
