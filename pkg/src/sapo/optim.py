"""Adaptive-moment optimizer over named float64 tensors."""
from __future__ import annotations

from dataclasses import dataclass, field

import torch

from .errors import ContractError


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_update(arrays: dict, grads: dict, state: AdamState, lr: float,
                beta1=0.9, beta2=0.999, eps=1e-8) -> tuple[dict, AdamState]:
    """Bias-corrected Adam step. Returns new arrays and a new state; inputs are not mutated."""
    if set(arrays) != set(grads):
        raise ContractError("gradient names do not match parameter names")
    t = state.step + 1
    new_arrays, m_new, v_new = {}, {}, {}
    with torch.no_grad():
        for name, p in arrays.items():
            g = grads[name]
            if g.shape != p.shape:
                raise ContractError(f"shape mismatch for {name}: {tuple(g.shape)} vs {tuple(p.shape)}")
            m = state.m.get(name, torch.zeros_like(p)) * beta1 + (1 - beta1) * g
            v = state.v.get(name, torch.zeros_like(p)) * beta2 + (1 - beta2) * g * g
            m_hat = m / (1 - beta1 ** t)
            v_hat = v / (1 - beta2 ** t)
            new_arrays[name] = p - lr * m_hat / (torch.sqrt(v_hat) + eps)
            m_new[name], v_new[name] = m, v
    return new_arrays, AdamState(t, m_new, v_new)


def clip_by_global_norm(grads: dict, max_norm: float | None) -> tuple[dict, float]:
    total = float(torch.sqrt(sum((g * g).sum() for g in grads.values())))
    if max_norm is None or max_norm <= 0 or total <= max_norm:
        return grads, total
    scale = max_norm / (total + 1e-12)
    return {k: g * scale for k, g in grads.items()}, total
