"""Mean-field response log-likelihoods, likelihood ratios and the KL estimate.

The response region is fully masked and the prompt is randomly masked; one
forward pass then scores every response token independently.
"""
from __future__ import annotations

import numpy as np
import torch

from .errors import ContractError, SequenceTooLongError
from .model import ModelParams, forward, log_softmax
from .vocab import VOCAB, Vocabulary

LOGPROB_FLOOR = -30.0


def prompt_mask(prompt_len: int, ratio: float, rng) -> np.ndarray:
    """Boolean mask over prompt positions, each hidden independently w.p. ``ratio``."""
    if not 0.0 <= ratio < 1.0:
        raise ContractError("prompt_mask_ratio must lie in [0, 1)")
    if ratio == 0.0:
        return np.zeros(prompt_len, dtype=bool)
    return rng.random(prompt_len) < ratio


def meanfield_logprobs(params: ModelParams, prompts, responses, hide: np.ndarray,
                       vocab: Vocabulary = VOCAB) -> torch.Tensor:
    """Differentiable (B, R) log-probs of response tokens, floored at -30.

    ``hide`` is a boolean prompt mask shared by every row (or one row per prompt).
    """
    prompts = np.atleast_2d(np.asarray(prompts, dtype=np.int64))
    responses = np.ascontiguousarray(np.atleast_2d(np.asarray(responses, dtype=np.int64)))
    P, R = prompts.shape[1], responses.shape[1]
    if P + R > params.max_len:
        raise SequenceTooLongError(f"{P} + {R} exceeds max_len {params.max_len}")
    x = np.concatenate([prompts, np.full_like(responses, vocab.mask_id)], axis=1)
    hide = np.broadcast_to(hide, prompts.shape)
    x[:, :P][hide] = vocab.mask_id
    lp = log_softmax(forward(params, x)[:, P:])
    picked = lp.gather(-1, torch.as_tensor(responses)[..., None])[..., 0]
    return torch.clamp(picked, min=LOGPROB_FLOOR)


def seq_logprob_meanfield(params: ModelParams, prompt, response, prompt_mask_ratio: float, rng=None,
                          vocab: Vocabulary = VOCAB) -> np.ndarray:
    """Per-token log-probabilities (length = len(response)) from one forward pass."""
    prompt = np.asarray(prompt, dtype=np.int64)
    hide = prompt_mask(len(prompt), prompt_mask_ratio, rng)
    with torch.no_grad():
        return meanfield_logprobs(params, prompt, response, hide, vocab)[0].numpy()


def _pair(a, b):
    if isinstance(a, torch.Tensor) or isinstance(b, torch.Tensor):
        dt = a.dtype if isinstance(a, torch.Tensor) else b.dtype
        a, b = torch.as_tensor(a, dtype=dt), torch.as_tensor(b, dtype=dt)
    else:
        a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ContractError(f"length mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    return a, b


def ratio(new, old):
    """Elementwise exp(new - old)."""
    new, old = _pair(new, old)
    return torch.exp(new - old) if isinstance(new, torch.Tensor) else np.exp(new - old)


def kl_estimate(policy, ref):
    """Mean of exp(ref - policy) - (ref - policy) - 1 over tokens; non-negative."""
    policy, ref = _pair(policy, ref)
    d = ref - policy
    if isinstance(d, torch.Tensor):
        return (torch.exp(d) - d - 1).mean()
    return float(np.mean(np.exp(d) - d - 1))
