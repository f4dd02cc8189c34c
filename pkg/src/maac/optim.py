import numpy as np


class Adam:
    """Adam over a dict of named arrays; updates the arrays in place (descent)."""

    def __init__(self, params, lr=3e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        if lr <= 0:
            raise ValueError("learning rate must be > 0")
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for k, g in grads.items():
            m = self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            v = self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g
            params[k] -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_dict(self, prefix=""):
        out = {f"{prefix}t": np.array([float(self.t)])}
        for k in self.m:
            out[f"{prefix}m.{k}"] = self.m[k]
            out[f"{prefix}v.{k}"] = self.v[k]
        return out

    def load_state_dict(self, state, prefix=""):
        self.t = int(state[f"{prefix}t"][0])
        for k in self.m:
            self.m[k] = np.array(state[f"{prefix}m.{k}"])
            self.v[k] = np.array(state[f"{prefix}v.{k}"])
