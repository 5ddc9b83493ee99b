"""Adam with bias correction and the warmup/linear-decay schedule."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


class NonFiniteGradientError(FloatingPointError):
    def __init__(self, name: str):
        super().__init__(f"non-finite gradient in parameter {name!r}")
        self.param = name


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    first_moment: dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: dict[str, np.ndarray] = field(default_factory=dict)


class Adam:
    """In-place Adam over a name → Tensor mapping. Missing grads count as zero."""

    def __init__(self, params: dict[str, Tensor], lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8, state=None):
        self.params = params
        self.state = state or AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps)
        for name, p in params.items():
            self.state.first_moment.setdefault(name, np.zeros_like(p.data))
            self.state.second_moment.setdefault(name, np.zeros_like(p.data))
            if self.state.first_moment[name].shape != p.shape:
                raise ValueError(f"moment shape mismatch for {name!r}")

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self, lr: float | None = None):
        st = self.state
        lr = st.lr if lr is None else lr
        for name, p in self.params.items():
            if p.grad is not None and not np.all(np.isfinite(p.grad)):
                raise NonFiniteGradientError(name)
        st.step += 1
        t = st.step
        c1 = 1.0 - st.beta1**t
        c2 = 1.0 - st.beta2**t
        for name, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m, v = st.first_moment[name], st.second_moment[name]
            m *= st.beta1
            m += (1.0 - st.beta1) * g
            v *= st.beta2
            v += (1.0 - st.beta2) * (g * g)
            update = (m / c1) / (np.sqrt(v / c2) + st.eps)
            p.data -= (lr * update).astype(p.dtype)


def adam_step(params: dict[str, Tensor], state: AdamState, lr: float | None = None) -> AdamState:
    Adam(params, state=state).step(lr)
    return state


def warmup_linear(step: int, total: int, peak_lr: float, warmup_fraction: float = 0.1) -> float:
    """Linear warmup over the first ``warmup_fraction`` of steps, then linear decay to 0."""
    if total <= 0:
        return peak_lr
    warm = max(1, int(round(total * warmup_fraction)))
    if step < warm:
        return peak_lr * (step + 1) / warm
    return peak_lr * max(0.0, (total - step) / max(1, total - warm))


def clip_grad_norm(params: dict[str, Tensor], max_norm: float) -> float:
    total = float(np.sqrt(sum(float((p.grad.astype(np.float64) ** 2).sum()) for p in params.values() if p.grad is not None)))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for p in params.values():
            if p.grad is not None:
                p.grad *= scale
    return total
