"""
Adaptive-moment gradient descent over a numpy array of vertex positions.
"""

import numpy as np

from mesh_core import NumericalError


class Adam:
    """
    Adam with bias correction.

    Args:
        shape: shape of the parameter array
        lr: scalar step size or an array broadcastable to `shape` (per-vertex rates)
        beta1: first-moment decay
        beta2: second-moment decay
        eps: denominator floor
    """

    def __init__(self, shape, lr=0.01, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = np.asarray(lr, dtype=np.float64)
        if np.any(self.lr < 0):
            raise ValueError("learning rates must be non-negative")
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.mean = np.zeros(shape)
        self.var = np.zeros(shape)

    def __str__(self):
        return f"Adam(lr={float(np.max(self.lr)) if self.lr.size else 0.0}, beta1={self.beta1}, beta2={self.beta2}, eps={self.eps})"

    def step(self, params: np.ndarray, grad: np.ndarray) -> np.ndarray:
        """Return the updated parameters; `params` is left untouched."""
        if not np.all(np.isfinite(grad)):
            raise NumericalError("non-finite gradient passed to the optimizer")
        self.t += 1
        self.mean = self.beta1 * self.mean + (1 - self.beta1) * grad
        self.var = self.beta2 * self.var + (1 - self.beta2) * grad ** 2
        mean_hat = self.mean / (1 - self.beta1 ** self.t)
        var_hat = self.var / (1 - self.beta2 ** self.t)
        return params - self.lr * mean_hat / (np.sqrt(var_hat) + self.eps)
