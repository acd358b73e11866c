import os
import subprocess
import sys

import numpy as np
import pytest

from cyclealign import _pykernels, kernels

cy = pytest.importorskip("cyclealign._ckernels")


def _net(rng, sizes):
    weights = [rng.normal(size=(o, i)) for i, o in zip(sizes[:-1], sizes[1:])]
    biases = [rng.normal(size=o) for o in sizes[1:]]
    return weights, biases


@pytest.mark.parametrize("h_code,o_code", [(kernels.RELU, kernels.LINEAR), (kernels.TANH, kernels.SIGMOID),
                                           (kernels.RELU, kernels.TANH)])
def test_backends_agree(h_code, o_code):
    rng = np.random.default_rng(0)
    weights, biases = _net(rng, (5, 16, 8, 3))
    x = rng.normal(size=(9, 5))
    a_py = _pykernels.mlp_forward(x, weights, biases, h_code, o_code)
    a_cy = cy.mlp_forward(x, weights, biases, h_code, o_code)
    for u, v in zip(a_py, a_cy):
        assert np.allclose(u, v, rtol=1e-12, atol=1e-12)
    g = rng.normal(size=(9, 3))
    b_py = _pykernels.mlp_backward(x, weights, a_py, g, h_code, o_code, True, True)
    b_cy = cy.mlp_backward(x, weights, a_cy, g, h_code, o_code, True, True)
    assert np.allclose(b_py[0], b_cy[0], rtol=1e-12, atol=1e-12)
    for u, v in zip(b_py[1] + b_py[2], b_cy[1] + b_cy[2]):
        assert np.allclose(u, v, rtol=1e-12, atol=1e-12)


def test_adam_backends_agree():
    rng = np.random.default_rng(1)
    p = rng.normal(size=20)
    g = rng.normal(size=20)
    states = []
    for mod in (_pykernels, cy):
        q, m, v = p.copy(), np.zeros(20), np.zeros(20)
        for t in range(1, 4):
            mod.adam_update(q, g, m, v, 0.01, 0.9, 0.999, 1e-8, t)
        states.append((q, m, v))
    for u, w in zip(*states):
        assert np.allclose(u, w, rtol=1e-14, atol=1e-15)


def test_compiled_backend_selected_by_default():
    assert kernels.BACKEND == "cython"


def test_environment_forces_python_fallback():
    env = dict(os.environ, CYCLEALIGN_KERNELS="python")
    out = subprocess.run([sys.executable, "-c", "from cyclealign import kernels; print(kernels.BACKEND)"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"


def test_unknown_backend_rejected():
    with pytest.raises(ValueError):
        kernels.load_backend("fortran")


def test_adam_update_requires_contiguous():
    a = np.zeros((4, 4))[:, ::2]
    with pytest.raises(ValueError):
        kernels.adam_update(a, a, a, a, 0.1, 0.9, 0.999, 1e-8, 1)
