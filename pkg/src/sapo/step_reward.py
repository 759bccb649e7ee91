"""Step-aware process reward from continuation rollouts.

For a denoising interval (t1, t2) the reward is the accuracy of rollouts
continued from x_{t1} minus the accuracy of rollouts continued from x_{t2}.
With t2 = T the second term is the group's own accuracy, so only the t1
continuations have to be generated.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError
from .sampler import DecodePolicy, DenoiseTrace, continue_many
from .tasks import TaskInstance, outcome_indicator


@dataclass(frozen=True)
class IntervalSample:
    t1: int
    t2: int
    mode: str = "efficient"

    def __post_init__(self):
        if not 0 <= self.t1 < self.t2:
            raise ContractError("interval requires 0 <= t1 < t2")


@dataclass(frozen=True)
class ContinuationConfig:
    mode: str = "append"
    k: int = 16
    policy: DecodePolicy = DecodePolicy(steps=16, temperature=0.9)

    def policy_for(self, t: int) -> DecodePolicy:
        # in place, the t remaining steps of the original schedule are replayed
        if self.mode == "in-place":
            return self.policy.with_(steps=max(t, 1), quota=None)
        return self.policy


@dataclass
class ProcessReward:
    value: float
    n1_used: int
    n2_used: int
    indicators1: np.ndarray = field(repr=False, default=None)
    indicators2: np.ndarray = field(repr=False, default=None)


def sample_interval(T: int, rng, mode: str = "efficient") -> IntervalSample:
    if T < 2:
        raise ContractError("interval sampling needs T >= 2")
    if mode == "efficient":
        return IntervalSample(int(rng.integers(1, T)), T, mode)
    if mode == "general":
        n_pairs = T * (T + 1) // 2
        idx = int(rng.integers(n_pairs))
        # enumerate pairs (t1, t2) with t2 in 1..T, t1 in 0..t2-1
        t2 = 1
        while idx >= t2:
            idx -= t2
            t2 += 1
        return IntervalSample(idx, t2, mode)
    raise ContractError(f"unknown interval mode {mode!r}")


def continuation_indicators(params, trace: DenoiseTrace, t: int, n: int, task: TaskInstance,
                            cont: ContinuationConfig, rng) -> np.ndarray:
    x_t = trace.state(t)
    outs = continue_many(params, x_t, n, trace.prompt_len, cont.policy_for(t), rng, cont.mode, cont.k)
    return np.array([outcome_indicator(o[trace.prompt_len:], task) for o in outs], dtype=np.int64)


def process_reward_general(params, trace: DenoiseTrace, interval: IntervalSample, N1: int, N2: int,
                           task: TaskInstance, cont: ContinuationConfig, rng,
                           reuse_t2=None) -> ProcessReward:
    """Two-sided estimate; ``reuse_t2`` supplies finished responses to score instead of sampling at t2.

    Both continuation sets are driven by generators seeded from the same draw,
    so identical states yield identical continuations.
    """
    if N1 < 1 or N2 < 1:
        raise ContractError("N1 and N2 must be >= 1")
    if interval.t2 > trace.T:
        raise ContractError(f"trace has no state at t={interval.t2}")
    seed = int(rng.integers(0, 2**63 - 1))
    ind1 = continuation_indicators(params, trace, interval.t1, N1, task, cont, np.random.default_rng(seed))
    if reuse_t2 is not None:
        ind2 = np.array([outcome_indicator(r, task) for r in reuse_t2], dtype=np.int64)
    else:
        ind2 = continuation_indicators(params, trace, interval.t2, N2, task, cont, np.random.default_rng(seed))
    value = float(np.mean(ind1)) - float(np.mean(ind2))
    return ProcessReward(value, len(ind1), len(ind2), ind1, ind2)


def process_reward_efficient(params, trace: DenoiseTrace, t1: int, N1: int, group_mean_accuracy: float,
                             task: TaskInstance, cont: ContinuationConfig, rng) -> ProcessReward:
    """One-sided estimate with t2 = T; the group's mean accuracy stands in for the t2 term."""
    if N1 < 1:
        raise ContractError("N1 must be >= 1")
    if not 0.0 <= group_mean_accuracy <= 1.0:
        raise ContractError("group_mean_accuracy must lie in [0, 1]")
    seed = int(rng.integers(0, 2**63 - 1))
    ind1 = continuation_indicators(params, trace, t1, N1, task, cont, np.random.default_rng(seed))
    return ProcessReward(float(np.mean(ind1)) - float(group_mean_accuracy), len(ind1), 0, ind1, None)


def upweight_advantage(advantages, process_rewards) -> np.ndarray:
    """A_i + 1[A_i > 0] * R_i; entries with A_i <= 0 pass through unchanged."""
    a = np.asarray(advantages, dtype=np.float64)
    r = np.asarray(process_rewards, dtype=np.float64)
    if a.shape != r.shape:
        raise ContractError("advantages and process rewards differ in length")
    return np.where(a > 0, a + r, a)

