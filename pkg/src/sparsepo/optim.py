"""AdamW with decoupled weight decay and per-group learning rates."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


@dataclass
class ParamGroup:
    name: str
    params: list
    lr: float
    weight_decay: float = 0.0


@dataclass
class OptimizerState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adamw_step(params, grads, state: OptimizerState, lr: float, wd: float = 0.0,
               betas=(0.9, 0.999), eps: float = 1e-8, keys=None, advance: bool = True):
    """One in-place AdamW update of ``params`` (a list of Tensors).

    Moments are stored in ``state`` under ``keys`` (defaults to list index).
    Decay is applied as ``p *= 1 - lr * wd`` before the Adam step.
    """
    b1, b2 = betas
    if advance:
        state.step += 1
    t = state.step
    if t < 1:
        raise ValueError("optimizer step count must be >= 1 before an update")
    keys = list(range(len(params))) if keys is None else list(keys)
    for key, p, g in zip(keys, params, grads):
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise ValueError(f"adamw_step: grad shape {g.shape} != param shape {p.data.shape}")
        m = state.m.get(key)
        v = state.v.get(key)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        state.m[key], state.v[key] = m, v
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        if wd:
            p.data = p.data * (1 - lr * wd)
        p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + eps)
    return params, state


class AdamW:
    def __init__(self, groups: list[ParamGroup], betas=(0.9, 0.999), eps: float = 1e-8):
        self.groups = groups
        self.betas = betas
        self.eps = eps
        self.state = OptimizerState()

    def parameters(self):
        for g in self.groups:
            yield from g.params

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def step(self, lr_scale: float = 1.0) -> None:
        self.state.step += 1
        for g in self.groups:
            keys = [f"{g.name}/{i}" for i in range(len(g.params))]
            adamw_step(g.params, [p.grad for p in g.params], self.state, g.lr * lr_scale,
                       g.weight_decay, self.betas, self.eps, keys=keys, advance=False)

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {"step": np.array(self.state.step)}
        for k, m in self.state.m.items():
            out[f"m/{k}"] = m
            out[f"v/{k}"] = self.state.v[k]
        return out

    def load_state_dict(self, sd: dict[str, np.ndarray]) -> None:
        self.state = OptimizerState(step=int(sd["step"]))
        for k, arr in sd.items():
            if k.startswith("m/"):
                self.state.m[k[2:]] = np.array(arr, dtype=np.float64)
            elif k.startswith("v/"):
                self.state.v[k[2:]] = np.array(arr, dtype=np.float64)


def clip_grad_norm(params, max_norm: float) -> float:
    grads = [p.grad for p in params if p.grad is not None]
    total = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))
    if max_norm and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return total


def lr_multiplier(step: int, total: int, warmup_frac: float, schedule: str) -> float:
    """Linear warmup then ``constant`` or ``linear`` decay to zero."""
    warm = int(round(warmup_frac * total))
    if warm and step < warm:
        return (step + 1) / warm
    if schedule == "constant":
        return 1.0
    if schedule == "linear":
        rest = max(total - warm, 1)
        return max(0.0, 1.0 - (step - warm) / rest)
    raise ValueError(f"unknown lr schedule {schedule!r}")
