"""Adam optimizer over named parameter tensors."""

from __future__ import annotations

import numpy as np

from .tensor import NonFiniteError, Tensor


class AdamState:
    """Bias-corrected Adam moments for a fixed set of named parameters.

    ``step_count`` increases by exactly one per accepted update; a non-finite
    gradient rejects the whole step without touching parameters or moments.
    """

    def __init__(self, params: dict[str, Tensor], learning_rate=1e-3,
                 beta1=0.9, beta2=0.999, epsilon=1e-8):
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.step_count = 0
        self.first_moment = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.second_moment = {k: np.zeros_like(p.data) for k, p in params.items()}

    def state_dict(self):
        return {
            "step_count": self.step_count,
            "first_moment": dict(self.first_moment),
            "second_moment": dict(self.second_moment),
        }

    def load_state_dict(self, state):
        self.step_count = int(state["step_count"])
        for k in self.first_moment:
            self.first_moment[k] = np.array(state["first_moment"][k], dtype=np.float64)
            self.second_moment[k] = np.array(state["second_moment"][k], dtype=np.float64)


def adam_step(params: dict[str, Tensor], state: AdamState, grads=None):
    """One Adam update in place; reads ``.grad`` unless ``grads`` is given."""
    gmap = {}
    for name, p in params.items():
        g = grads[name] if grads is not None else p.grad
        if g is None:
            raise ValueError(f"adam_step: parameter {name!r} has no gradient")
        if g.shape != p.data.shape:
            raise ValueError(f"adam_step: grad shape {g.shape} != param shape {p.data.shape} for {name!r}")
        if not np.isfinite(g).all():
            raise NonFiniteError(f"adam_step: non-finite gradient for parameter {name!r}")
        gmap[name] = g

    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    bias1 = 1.0 - b1 ** t
    bias2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = gmap[name]
        m = state.first_moment[name]
        v = state.second_moment[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data -= state.learning_rate * (m / bias1) / (np.sqrt(v / bias2) + state.epsilon)


def zero_grads(params: dict[str, Tensor]):
    for p in params.values():
        p.zero_grad()
