import importlib
import os
import subprocess
import sys

import numpy as np
import pytest

from deepfuzzy import _kernels_py, kernels

compiled = pytest.importorskip("deepfuzzy._kernels")


@pytest.mark.parametrize("shape,k,stride", [((2, 3, 7, 6), (3, 2), 1), ((1, 2, 8, 8), (2, 2), 2),
                                            ((3, 1, 9, 5), (3, 3), 3), ((1, 1, 1, 1), (1, 1), 1)])
def test_backends_bitwise_equal(shape, k, stride):
    rng = np.random.default_rng(0)
    x = rng.normal(size=shape)
    a = compiled.im2col(x, *k, stride)
    b = _kernels_py.im2col(x, *k, stride)
    assert np.array_equal(a, b)
    cols = rng.normal(size=a.shape)
    ga = compiled.col2im(cols, shape, *k, stride)
    gb = _kernels_py.col2im(cols, shape, *k, stride)
    assert np.array_equal(ga, gb)


def test_col2im_is_adjoint_of_im2col():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(2, 2, 6, 7))
    cols = kernels.im2col(x, 3, 2, 2)
    y = rng.normal(size=cols.shape)
    lhs = np.sum(cols * y)
    rhs = np.sum(x * kernels.col2im(y, x.shape, 3, 2, 2))
    assert lhs == pytest.approx(rhs, rel=1e-12)


def test_env_var_forces_fallback():
    env = dict(os.environ, DEEPFUZZY_KERNELS="python")
    out = subprocess.run([sys.executable, "-c", "import deepfuzzy; print(deepfuzzy.BACKEND)"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"


def test_compiled_backend_selected_by_default():
    if os.environ.get("DEEPFUZZY_KERNELS") == "python":
        pytest.skip("fallback forced by environment")
    assert importlib.reload(kernels).BACKEND == "cython"
