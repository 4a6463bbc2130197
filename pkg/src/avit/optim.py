"""Adam with decoupled weight decay."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import UsageError
from .tensor import Tensor


@dataclass
class AdamState:
    lr: float = 1e-4
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


class Adam:
    """Bias-corrected Adam over a named parameter group.

    Weight decay is decoupled (``p -= lr * wd * p``) and applied only to
    parameters with ``requires_grad`` set; frozen parameters are never read
    or written.
    """

    def __init__(self, params, lr: float = 1e-4, weight_decay: float = 0.0,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 state: AdamState | None = None):
        self.params: dict[str, Tensor] = dict(params)
        self.state = state or AdamState(lr=lr, weight_decay=weight_decay,
                                        beta1=betas[0], beta2=betas[1], eps=eps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        st = self.state
        trainable = [(n, p) for n, p in self.params.items() if p.requires_grad]
        missing = [n for n, p in trainable if p.grad is None]
        if missing:
            raise UsageError(f"adam_step: trainable parameters without grad: {missing[:5]}"
                             + (" ..." if len(missing) > 5 else ""))
        st.step += 1
        bc1 = 1.0 - st.beta1 ** st.step
        bc2 = 1.0 - st.beta2 ** st.step
        for name, p in trainable:
            g = p.grad
            m = st.m.get(name)
            if m is None:
                m = st.m[name] = np.zeros_like(p.data)
                st.v[name] = np.zeros_like(p.data)
            v = st.v[name]
            m *= st.beta1
            m += (1.0 - st.beta1) * g
            v *= st.beta2
            v += (1.0 - st.beta2) * (g * g)
            if st.weight_decay:
                p.data -= (st.lr * st.weight_decay) * p.data
            p.data -= st.lr * (m / bc1) / (np.sqrt(v / bc2) + st.eps)
