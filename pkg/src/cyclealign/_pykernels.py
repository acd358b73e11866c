"""Pure numpy implementation of the dense-network kernels.

Used when the compiled ``_ckernels`` extension is unavailable, and as the
reference the compiled kernels are tested against.
"""

import numpy as np

LINEAR, RELU, TANH, SIGMOID = 0, 1, 2, 3


def _activate(z, code):
    if code == RELU:
        np.maximum(z, 0.0, out=z)
    elif code == TANH:
        np.tanh(z, out=z)
    elif code == SIGMOID:
        # sigmoid(t) = (tanh(t/2) + 1) / 2, overflow-free
        z *= 0.5
        np.tanh(z, out=z)
        z += 1.0
        z *= 0.5
    return z


def _derivative(h, code):
    if code == RELU:
        return (h > 0.0).astype(np.float64)
    if code == TANH:
        return 1.0 - h * h
    if code == SIGMOID:
        return h * (1.0 - h)
    return None


def mlp_forward(x, weights, biases, hidden_code, out_code):
    """Return the post-activation output of every layer for a batch ``x``."""
    acts = []
    h = x
    last = len(weights) - 1
    for i, (W, b) in enumerate(zip(weights, biases)):
        z = h @ W.T
        z += b
        _activate(z, hidden_code if i < last else out_code)
        acts.append(z)
        h = z
    return acts


def mlp_backward(x, weights, acts, gout, hidden_code, out_code, need_dx, need_params):
    """Back-propagate ``gout`` (gradient w.r.t. the last activation).

    Returns ``(dx, dweights, dbiases)``; entries not requested are None.
    """
    n = len(weights)
    dws = [None] * n if need_params else None
    dbs = [None] * n if need_params else None
    g = gout
    for i in range(n - 1, -1, -1):
        d = _derivative(acts[i], hidden_code if i < n - 1 else out_code)
        if d is not None:
            g = g * d
        if need_params:
            inp = acts[i - 1] if i > 0 else x
            dws[i] = g.T @ inp
            dbs[i] = g.sum(axis=0)
        if i > 0 or need_dx:
            g = g @ weights[i]
        elif not need_dx:
            g = None
    return (g if need_dx else None), dws, dbs


def adam_update(param, grad, m, v, lr, beta1, beta2, eps, step):
    """In-place Adam update of one array; ``step`` is the 1-based step count."""
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    v += (1.0 - beta2) * (grad * grad)
    step_size = lr / (1.0 - beta1 ** step)
    inv_sqrt_bc2 = 1.0 / np.sqrt(1.0 - beta2 ** step)
    param -= step_size * m / (np.sqrt(v) * inv_sqrt_bc2 + eps)
