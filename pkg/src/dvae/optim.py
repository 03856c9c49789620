"""Adam with bias correction, operating on Tensor parameter lists."""

import numpy as np


class Adam:
    """Standard Adam. State arrays are float32 like the parameters."""

    def __init__(self, params, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self):
        for p in self.params:
            if p.grad is None:
                raise ValueError("Adam.step: parameter has no gradient; run backward first")
            if p.grad.shape != p.data.shape:
                raise ValueError(
                    f"Adam.step: grad shape {p.grad.shape} != param shape {p.data.shape}")
        self.step_count += 1
        t = self.step_count
        b1, b2 = np.float32(self.beta1), np.float32(self.beta2)
        bc1 = np.float32(1.0 - self.beta1 ** t)
        bc2 = np.float32(1.0 - self.beta2 ** t)
        lr, eps = np.float32(self.lr), np.float32(self.eps)
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            mhat = m / bc1
            vhat = v / bc2
            p.data -= lr * mhat / (np.sqrt(vhat) + eps)

    def state_arrays(self):
        """Flat dict of optimizer state for checkpointing."""
        out = {}
        for i, (m, v) in enumerate(zip(self.m, self.v)):
            out[f"m.{i}"] = m
            out[f"v.{i}"] = v
        return out

    def load_state_arrays(self, arrays, step_count):
        for i in range(len(self.params)):
            m, v = arrays[f"m.{i}"], arrays[f"v.{i}"]
            if m.shape != self.params[i].data.shape:
                raise ValueError(f"Adam state {i}: shape {m.shape} does not match parameter")
            self.m[i] = m.astype(np.float32).copy()
            self.v[i] = v.astype(np.float32).copy()
        self.step_count = int(step_count)
