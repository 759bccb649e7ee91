"""Group-relative advantages and the clipped, KL-regularized policy loss."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import ContractError
from .likelihood import kl_estimate, meanfield_logprobs, prompt_mask
from .model import ModelParams
from .tasks import OutcomeReward, TaskInstance


@dataclass
class Rollout:
    trace: object
    response: np.ndarray
    reward: OutcomeReward
    old_logprobs: np.ndarray | None = None


@dataclass
class RolloutGroup:
    question: TaskInstance
    rollouts: list = field(default_factory=list)

    def __post_init__(self):
        if len(self.rollouts) < 2:
            raise ContractError("a rollout group needs at least 2 rollouts")

    @property
    def G(self) -> int:
        return len(self.rollouts)

    def responses(self) -> np.ndarray:
        return np.stack([r.response for r in self.rollouts])


def group_advantage(rewards) -> np.ndarray:
    """A_i = r_i - mean(r); no division by the standard deviation."""
    r = np.asarray(rewards, dtype=np.float64)
    if r.ndim != 1 or r.size < 2:
        raise ContractError("group advantage needs at least 2 rewards")
    return r - r.mean()


def clipped_term(rho, adv, eps):
    """min(rho * A, clip(rho, 1 - eps, 1 + eps) * A); accepts scalars, arrays or tensors."""
    if isinstance(rho, torch.Tensor):
        return torch.minimum(rho * adv, torch.clamp(rho, 1 - eps, 1 + eps) * adv)
    rho = np.asarray(rho, dtype=np.float64)
    out = np.minimum(rho * adv, np.clip(rho, 1 - eps, 1 + eps) * adv)
    return float(out) if out.ndim == 0 else out


def grpo_objective_terms(new_lp, old_lp, adv, eps, clip=True):
    """Mean over rollouts of the per-token-averaged surrogate, shape-agnostic (G, R)."""
    rho = torch.exp(new_lp - old_lp)
    adv = torch.as_tensor(np.asarray(adv, dtype=np.float64), dtype=new_lp.dtype)[:, None]
    surr = clipped_term(rho, adv, eps) if clip else rho * adv
    return surr.mean(dim=1).mean()


def grpo_loss(group: RolloutGroup, advantages, params: ModelParams, ref_params: ModelParams | None,
              eps: float = 0.2, beta: float = 0.04, prompt_mask_ratio: float = 0.0, rng=None,
              clip: bool = True, stats: dict | None = None) -> torch.Tensor:
    """Negative clipped objective plus beta * KL, as a differentiable scalar.

    Ratios use fresh mean-field log-probs against each rollout's stored
    ``old_logprobs``; the prompt mask is drawn from ``rng`` so callers that
    share the seed with the snapshot pass get matching masks.
    """
    adv = np.asarray(advantages, dtype=np.float64)
    if adv.shape != (group.G,):
        raise ContractError("advantages must have one entry per rollout")
    if beta < 0:
        raise ContractError("beta must be >= 0")
    if any(r.old_logprobs is None for r in group.rollouts):
        raise ContractError("every rollout needs old_logprobs")
    prompt = group.question.prompt
    hide = prompt_mask(len(prompt), prompt_mask_ratio, rng)
    responses = group.responses()
    prompts = np.repeat(prompt[None], group.G, axis=0)
    new_lp = meanfield_logprobs(params, prompts, responses, hide)
    old_lp = torch.as_tensor(np.stack([r.old_logprobs for r in group.rollouts]), dtype=new_lp.dtype)
    objective = grpo_objective_terms(new_lp, old_lp, adv, eps, clip)
    kl = torch.zeros((), dtype=new_lp.dtype)
    if beta > 0 and ref_params is not None:
        with torch.no_grad():
            ref_lp = meanfield_logprobs(ref_params, prompts, responses, hide)
        kl = kl_estimate(new_lp.reshape(-1), ref_lp.reshape(-1))
    if stats is not None:
        stats["kl"] = float(kl.detach())
        stats["objective"] = float(objective.detach())
    return -(objective - beta * kl)
