"""Adam with bias correction."""
from dataclasses import dataclass, field

import numpy as np


class OptimizerError(RuntimeError):
    pass


@dataclass
class OptimizerState:
    lr: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


class Adam:
    """Adam over a ``name -> Tensor`` mapping; parameters are updated in place."""

    def __init__(self, named_params, lr=1e-5, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = dict(named_params)
        self.state = OptimizerState(lr=lr, beta1=beta1, beta2=beta2, eps=eps)
        for name, p in self.params.items():
            self.state.m[name] = np.zeros_like(p.data)
            self.state.v[name] = np.zeros_like(p.data)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self):
        missing = [name for name, p in self.params.items() if p.grad is None]
        if missing:
            raise OptimizerError(f"no gradient for {len(missing)} parameter(s), first: {missing[0]}")
        st = self.state
        st.step += 1
        b1, b2 = st.beta1, st.beta2
        c1 = 1.0 - b1 ** st.step
        c2 = 1.0 - b2 ** st.step
        for name, p in self.params.items():
            g = p.grad.astype(p.data.dtype, copy=False)
            m, v = st.m[name], st.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            update = (st.lr / c1) * m / (np.sqrt(v / c2) + st.eps)
            p.data -= update.astype(p.data.dtype, copy=False)
