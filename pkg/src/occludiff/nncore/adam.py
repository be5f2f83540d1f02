"""Adam with bias correction, operating on ParamBlock lists."""

import numpy as np


class NonFiniteGradientError(RuntimeError):
    pass


class Adam:
    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        names = [p.name for p in self.params]
        if len(names) != len(set(names)):
            raise ValueError("Adam: parameter names must be unique")
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.step_count = 0
        self._m = {p.name: np.zeros_like(p.value) for p in self.params}
        self._v = {p.name: np.zeros_like(p.value) for p in self.params}

    def step(self):
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1**t
        c2 = 1.0 - self.beta2**t
        for p in self.params:
            g = p.grad
            if g.shape != p.value.shape:
                raise ValueError(f"Adam: gradient shape {g.shape} != parameter shape "
                                 f"{p.value.shape} for '{p.name}'")
            if not np.all(np.isfinite(g)):
                raise NonFiniteGradientError(f"non-finite gradient in parameter '{p.name}'")
            m = self._m[p.name]
            v = self._v[p.name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            m_hat = m / c1
            v_hat = v / c2
            p.value -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
