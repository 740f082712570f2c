import os
import subprocess
import sys

import numpy as np
import pytest

from fedmr import _kernels

IMPLS = _kernels.implementations()
needs_numba = pytest.mark.skipif("numba" not in IMPLS, reason="numba unavailable")


def _net(rng, sizes):
    dims = np.asarray(sizes, dtype=np.int64)
    P = sum(a * b + b for a, b in zip(sizes[:-1], sizes[1:]))
    return rng.standard_normal(P) * 0.5, dims


@needs_numba
def test_stack_sum_bitwise_across_backends(rng):
    st = rng.standard_normal((9, 257)) * 10.0 ** rng.uniform(-5, 5, size=(9, 257))
    a = IMPLS["numpy"]["stack_sum"](st)
    b = IMPLS["numba"]["stack_sum"](st)
    assert a.tobytes() == b.tobytes()


@needs_numba
def test_reductions_agree(rng):
    st = rng.standard_normal((7, 300))
    x = rng.standard_normal(300)
    a = IMPLS["numpy"]["sq_dist_sum"](st, x)
    b = IMPLS["numba"]["sq_dist_sum"](st, x)
    assert abs(a - b) <= 1e-13 * a
    np.testing.assert_allclose(IMPLS["numpy"]["gram"](st), IMPLS["numba"]["gram"](st), rtol=1e-12)


@needs_numba
@pytest.mark.parametrize("sizes", [[3, 2], [5, 7, 4], [6, 8, 8, 8, 10]])
def test_mlp_kernels_agree(rng, sizes):
    params, dims = _net(rng, sizes)
    X = rng.standard_normal((11, sizes[0]))
    y = rng.integers(0, sizes[-1], 11)
    la, ga = IMPLS["numpy"]["mlp_loss_grad"](params, dims, X, y)
    lb, gb = IMPLS["numba"]["mlp_loss_grad"](params, dims, X, y)
    assert la == pytest.approx(lb, rel=1e-13)
    np.testing.assert_allclose(ga, gb, rtol=1e-10, atol=1e-14)
    np.testing.assert_allclose(
        IMPLS["numpy"]["mlp_logits"](params, dims, X), IMPLS["numba"]["mlp_logits"](params, dims, X), rtol=1e-12
    )


@needs_numba
def test_sgd_train_agrees(rng):
    params, dims = _net(rng, [4, 6, 3])
    X = rng.standard_normal((10, 4))
    y = rng.integers(0, 3, 10)
    batches = np.array([[0, 1, 2, 3], [4, 5, 6, 7], [8, 9, -1, -1]] * 3)
    ref = params + 0.1
    for mu in (0.0, 0.5):
        a = IMPLS["numpy"]["sgd_train"](params, dims, X, y, batches, 0.05, 0.9, mu, ref)
        b = IMPLS["numba"]["sgd_train"](params, dims, X, y, batches, 0.05, 0.9, mu, ref)
        np.testing.assert_allclose(a, b, rtol=1e-11, atol=1e-13)


def test_env_flag_selects_numpy():
    env = dict(os.environ, FEDMR_DISABLE_NUMBA="1")
    out = subprocess.run(
        [sys.executable, "-c", "import fedmr; print(fedmr.BACKEND)"],
        env=env, capture_output=True, text=True, check=True,
    )
    assert out.stdout.strip() == "numpy"
