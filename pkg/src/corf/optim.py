"""Adam optimizer over named parameter dicts."""

from __future__ import annotations

import numpy as np

from .autodiff import ShapeError, Tensor


def adam_step(params, grads, state, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update, in place on the parameter data.

    ``params`` maps name -> leaf Tensor, ``grads`` maps name -> gradient
    (Tensor or ndarray).  ``state`` is the mutable moment store; pass the
    dict returned by a previous call (or an empty one) back in.
    """
    if not isinstance(state, dict):
        raise TypeError("adam_step: state must be a dict")
    t = state.get("t", 0) + 1
    state["t"] = t
    for name, p in params.items():
        g = grads[name]
        g = g.data if isinstance(g, Tensor) else np.asarray(g, dtype=np.float64)
        if g.shape != p.data.shape:
            raise ShapeError(f"adam_step: grad shape {g.shape} != param shape {p.data.shape} for '{name}'")
        m, v = state.get(name, (np.zeros_like(p.data), np.zeros_like(p.data)))
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        state[name] = (m, v)
        m_hat = m / (1.0 - beta1 ** t)
        v_hat = v / (1.0 - beta2 ** t)
        p.data -= lr * m_hat / (np.sqrt(v_hat) + eps)
    return params, state


class Adam:
    """Stateful wrapper around :func:`adam_step` for one parameter set."""

    def __init__(self, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.state = {}

    def step(self, params, grads):
        adam_step(params, grads, self.state, self.lr, self.beta1, self.beta2, self.eps)

    # moment blobs in a canonical order, for checkpointing
    def state_arrays(self, param_names):
        out = []
        for name in param_names:
            m, v = self.state.get(name, (None, None))
            out.append((name, m, v))
        return out
