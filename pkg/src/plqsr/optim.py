"""Adam with per-key state, used for both weight training and quantizer finetuning."""

import numpy as np


class Adam:
    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self._state = {}

    def hyperparameters(self) -> dict:
        return {"beta1": self.beta1, "beta2": self.beta2, "eps": self.eps}

    def step(self, key, value, grad):
        """Return the updated value for parameter ``key``.

        State (moments and step count) is kept per key, so a parameter that is
        frozen for a while resumes with its own moment estimates.
        """
        value = np.asarray(value, dtype=np.float64)
        grad = np.asarray(grad, dtype=np.float64)
        m, v, t = self._state.get(key, (np.zeros_like(value), np.zeros_like(value), 0))
        t += 1
        m = self.beta1 * m + (1.0 - self.beta1) * grad
        v = self.beta2 * v + (1.0 - self.beta2) * grad * grad
        self._state[key] = (m, v, t)
        m_hat = m / (1.0 - self.beta1**t)
        v_hat = v / (1.0 - self.beta2**t)
        return value - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def steps_taken(self, key) -> int:
        return self._state.get(key, (None, None, 0))[2]
