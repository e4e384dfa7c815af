import numpy as np


class Adam:
    """Adaptive-moment optimizer with bias correction.

    The learning rate defaults to 4e-4; decay rates 0.9/0.999 and eps 1e-8
    are the usual defaults.
    """

    def __init__(self, params, lr=4e-4, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self):
        for p in self.params:
            if p.grad is None:
                raise ValueError(f"no gradient for parameter {getattr(p, 'name', '') or p!r}")
        self.step_count += 1
        t = self.step_count
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**t
        c2 = 1.0 - b2**t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            update = self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data -= update.astype(p.dtype, copy=False)

    def state_arrays(self, names):
        out = {}
        for name, m, v in zip(names, self.m, self.v):
            out[f"adam.m.{name}"] = m
            out[f"adam.v.{name}"] = v
        return out

    def load_state_arrays(self, names, arrays, step_count):
        for i, name in enumerate(names):
            self.m[i] = np.asarray(arrays[f"adam.m.{name}"], dtype=self.params[i].dtype).copy()
            self.v[i] = np.asarray(arrays[f"adam.v.{name}"], dtype=self.params[i].dtype).copy()
        self.step_count = int(step_count)
