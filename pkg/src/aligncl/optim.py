"""AdamW with decoupled weight decay and a linear warmup/decay schedule."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import NonFiniteError, Tensor


@dataclass
class LinearSchedule:
    """Linear ramp from 0 to ``peak`` over the warmup steps, then linear decay to 0."""

    peak: float
    total_steps: int
    warmup_frac: float = 0.1

    @property
    def warmup_steps(self) -> int:
        return int(self.warmup_frac * self.total_steps)

    def __call__(self, step: int) -> float:
        w, total = self.warmup_steps, self.total_steps
        if step < w:
            return self.peak * step / w
        if total <= w:
            return self.peak
        return self.peak * max(0.0, (total - step) / (total - w))


@dataclass
class OptimState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    steps: dict[str, int] = field(default_factory=dict)
    step: int = 0


class AdamW:
    """Adam moments per parameter; weight decay multiplies matrices by ``1 - lr * wd``.

    Only parameters present in the gradient dict passed to :meth:`step` are
    touched, so frozen parameters stay bit-identical.
    """

    def __init__(self, params: dict[str, Tensor], schedule: LinearSchedule,
                 weight_decay: float = 0.01, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.schedule = schedule
        self.weight_decay = weight_decay
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.state = OptimState()

    def step(self, grads: dict[str, np.ndarray]) -> float:
        lr = self.schedule(self.state.step)
        for name, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise NonFiniteError(f"non-finite gradient for {name}")
        st = self.state
        for name, g in grads.items():
            p = self.params[name]
            if name not in st.m:
                st.m[name] = np.zeros_like(p.data)
                st.v[name] = np.zeros_like(p.data)
                st.steps[name] = 0
            st.steps[name] += 1
            t = st.steps[name]
            st.m[name] = self.beta1 * st.m[name] + (1.0 - self.beta1) * g
            st.v[name] = self.beta2 * st.v[name] + (1.0 - self.beta2) * (g * g)
            m_hat = st.m[name] / (1.0 - self.beta1**t)
            v_hat = st.v[name] / (1.0 - self.beta2**t)
            data = p.data
            if self.weight_decay and data.ndim >= 2:
                data = data * (1.0 - lr * self.weight_decay)
            p.data = data - lr * m_hat / (np.sqrt(v_hat) + self.eps)
        st.step += 1
        return lr
