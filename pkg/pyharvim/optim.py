from typing import Dict

import numpy as np


class AdamW:
    """
    Adaptive-moment updates with decoupled weight decay over named parameter arrays.

    Adam is the same update without decay.
    """

    def __init__(
        self,
        learning_rate: float = 1e-3,
        betas=(0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.01,
    ):
        if learning_rate <= 0:
            raise ValueError("learning rate must be positive")
        self.learning_rate = learning_rate
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.steps = 0
        self.first_moment: Dict[str, np.ndarray] = {}
        self.second_moment: Dict[str, np.ndarray] = {}

    def step(self, params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray]) -> Dict[str, np.ndarray]:
        """ Return updated copies of params; names without a gradient are passed through """
        self.steps += 1
        bias1 = 1.0 - self.beta1 ** self.steps
        bias2 = 1.0 - self.beta2 ** self.steps
        updated = {}
        for name, value in params.items():
            gradient = grads.get(name)
            if gradient is None:
                updated[name] = value
                continue
            gradient = np.asarray(gradient, dtype=value.dtype)
            m = self.first_moment.get(name, np.zeros_like(value))
            v = self.second_moment.get(name, np.zeros_like(value))
            m = self.beta1 * m + (1.0 - self.beta1) * gradient
            v = self.beta2 * v + (1.0 - self.beta2) * gradient * gradient
            self.first_moment[name] = m
            self.second_moment[name] = v
            decayed = value * (1.0 - self.learning_rate * self.weight_decay)
            step = self.learning_rate * (m / bias1) / (np.sqrt(v / bias2) + self.eps)
            updated[name] = (decayed - step).astype(value.dtype)
        return updated


class Adam(AdamW):
    def __init__(self, learning_rate: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        super().__init__(learning_rate, betas, eps, weight_decay=0.0)
