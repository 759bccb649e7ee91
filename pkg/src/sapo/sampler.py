"""Iterative-unmasking generation for the mask denoiser.

A generation starts from ``prompt + [MASK] * gen_len`` at step ``t = T`` and
decodes some masked positions at every step until ``t = 0``.
"""
from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, SequenceTooLongError
from .model import ModelParams, logits as model_logits
from .vocab import VOCAB, Vocabulary


class NoMasksWarning(UserWarning):
    """denoise_step was called on a state without masked positions."""


@dataclass(frozen=True)
class DecodePolicy:
    steps: int = 16
    temperature: float = 0.0
    strategy: str = "quota"
    threshold: float = 0.9
    quota: tuple | None = None

    def __post_init__(self):
        if self.steps < 1:
            raise ContractError("steps must be >= 1")
        if self.temperature < 0:
            raise ContractError("temperature must be >= 0")
        if self.strategy not in ("quota", "threshold"):
            raise ContractError(f"unknown strategy {self.strategy!r}")
        if self.strategy == "threshold" and not 0.0 < self.threshold <= 1.0:
            raise ContractError("threshold must lie in (0, 1]")
        if self.quota is not None and len(self.quota) != self.steps:
            raise ContractError("quota schedule length must equal steps")

    def quota_at(self, t: int, remaining: int) -> int:
        """Tokens to unmask at step t; default spreads the remainder evenly, ceil(remaining / t)."""
        if self.quota is not None:
            return int(self.quota[self.steps - t])
        return math.ceil(remaining / max(t, 1))

    def with_(self, **kw) -> "DecodePolicy":
        return DecodePolicy(**{**self.__dict__, **kw})


@dataclass
class StepRecord:
    t: int
    positions: list
    confidences: list


@dataclass
class DenoiseTrace:
    """States x_T ... x_0 of one generation; ``states[0]`` is all-mask completion."""
    prompt_len: int
    states: list
    records: list = field(default_factory=list)

    @property
    def T(self) -> int:
        return len(self.states) - 1

    def state(self, t: int) -> np.ndarray:
        if not 0 <= t <= self.T:
            raise ContractError(f"trace has no state at t={t}")
        return self.states[self.T - t]

    @property
    def final(self) -> np.ndarray:
        return self.states[-1]

    @property
    def response(self) -> np.ndarray:
        return self.final[self.prompt_len:]

    def to_jsonl(self) -> str:
        lines = [json.dumps({"t": self.T, "tokens": self.states[0].tolist(),
                             "unmasked_positions": [], "confidences": []})]
        for rec, st in zip(self.records, self.states[1:]):
            lines.append(json.dumps({"t": rec.t, "tokens": st.tolist(),
                                     "unmasked_positions": rec.positions, "confidences": rec.confidences}))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_jsonl(cls, text: str, prompt_len: int) -> "DenoiseTrace":
        rows = [json.loads(line) for line in text.splitlines() if line.strip()]
        states = [np.array(r["tokens"], dtype=np.int64) for r in rows]
        recs = [StepRecord(r["t"], r["unmasked_positions"], r["confidences"]) for r in rows[1:]]
        return cls(prompt_len, states, recs)


def mask_count(x, vocab: Vocabulary = VOCAB) -> int:
    return int((np.asarray(x) == vocab.mask_id).sum())


def init_state(prompt, gen_len: int, max_len: int | None = None, vocab: Vocabulary = VOCAB) -> np.ndarray:
    prompt = np.asarray(prompt, dtype=np.int64)
    if gen_len < 0:
        raise ContractError("gen_len must be >= 0")
    if max_len is not None and prompt.shape[-1] + gen_len > max_len:
        raise SequenceTooLongError(f"{prompt.shape[-1]} + {gen_len} exceeds max_len {max_len}")
    masks = np.full(prompt.shape[:-1] + (gen_len,), vocab.mask_id, dtype=np.int64)
    return np.concatenate([prompt, masks], axis=-1)


def _decodable(lg: np.ndarray, vocab: Vocabulary) -> np.ndarray:
    lg = lg.copy()
    lg[..., vocab.mask_id] = -np.inf
    lg[..., vocab.pad_id] = -np.inf
    return lg


def _probs(lg: np.ndarray) -> np.ndarray:
    z = np.exp(lg - lg.max(axis=-1, keepdims=True))
    return z / z.sum(axis=-1, keepdims=True)


def _step_batch(params, X, policy: DecodePolicy, t: int, rng, vocab: Vocabulary):
    """One denoising step on a batch; rows without masks are left untouched."""
    X = np.asarray(X, dtype=np.int64)
    is_mask = X == vocab.mask_id
    out = X.copy()
    recs = [([], []) for _ in range(len(X))]
    if not is_mask.any():
        return out, recs
    lg = _decodable(model_logits(params, X), vocab)
    conf = _probs(lg).max(axis=-1)
    if policy.temperature == 0:
        choice = lg.argmax(axis=-1)
    else:
        choice = (lg / policy.temperature + rng.gumbel(size=lg.shape)).argmax(axis=-1)
    for b in range(len(X)):
        pos = np.flatnonzero(is_mask[b])
        if pos.size == 0:
            continue
        c = conf[b, pos]
        order = pos[np.argsort(-c, kind="stable")]
        if policy.strategy == "quota":
            n = min(max(policy.quota_at(t, pos.size), 1), pos.size)
            sel = order[:n]
        else:
            sel = pos[c >= policy.threshold]
            if sel.size == 0:
                sel = order[:1]
        sel = np.sort(sel)
        out[b, sel] = choice[b, sel]
        recs[b] = (sel.tolist(), [float(v) for v in conf[b, sel]])
    return out, recs


def denoise_step(params: ModelParams, x_t, policy: DecodePolicy, t: int, rng=None,
                 vocab: Vocabulary = VOCAB) -> np.ndarray:
    x_t = np.asarray(x_t, dtype=np.int64)
    if not 1 <= t <= policy.steps:
        raise ContractError(f"step t={t} outside 1..{policy.steps}")
    if mask_count(x_t, vocab) == 0:
        warnings.warn("no masked positions left; step is a no-op", NoMasksWarning, stacklevel=2)
        return x_t.copy()
    out, _ = _step_batch(params, x_t[None], policy, t, rng, vocab)
    return out[0]


def generate_batch(params: ModelParams, prompts, gen_len: int, policy: DecodePolicy, rng=None,
                   vocab: Vocabulary = VOCAB) -> list[DenoiseTrace]:
    """Denoise a batch of equal-length prompts together; one trace per row.

    Quota decoding always takes exactly ``policy.steps`` steps. Threshold
    decoding runs until the row is mask-free, so its trace length varies.
    """
    prompts = np.atleast_2d(np.asarray(prompts, dtype=np.int64))
    P = prompts.shape[1]
    X = init_state(prompts, gen_len, params.max_len, vocab)
    history = [X]
    step_recs = []
    if policy.strategy == "quota":
        for t in range(policy.steps, 0, -1):
            X, recs = _step_batch(params, X, policy, t, rng, vocab)
            history.append(X)
            step_recs.append([StepRecord(t, *r) for r in recs])
        return [DenoiseTrace(P, [h[b] for h in history], [s[b] for s in step_recs])
                for b in range(len(prompts))]
    # threshold: forced progress bounds the loop by gen_len steps
    done_at = [0 if gen_len == 0 else None for _ in range(len(prompts))]
    k = 0
    while any(d is None for d in done_at):
        k += 1
        X, recs = _step_batch(params, X, policy.with_(steps=max(policy.steps, gen_len)), 1, rng, vocab)
        history.append(X)
        step_recs.append(recs)
        for b in range(len(prompts)):
            if done_at[b] is None and mask_count(X[b], vocab) == 0:
                done_at[b] = k
    traces = []
    for b in range(len(prompts)):
        n = done_at[b]
        recs = [StepRecord(n - i, *step_recs[i][b]) for i in range(n)]
        traces.append(DenoiseTrace(P, [history[i][b] for i in range(n + 1)], recs))
    return traces


def generate(params: ModelParams, prompt, gen_len: int, policy: DecodePolicy, rng=None,
             vocab: Vocabulary = VOCAB) -> DenoiseTrace:
    return generate_batch(params, np.asarray(prompt)[None], gen_len, policy, rng, vocab)[0]


def one_shot_complete(params: ModelParams, x_t, vocab: Vocabulary = VOCAB) -> np.ndarray:
    """Replace every MASK by the argmax token of one forward pass (works on (L,) or (B, L))."""
    x = np.asarray(x_t, dtype=np.int64)
    is_mask = x == vocab.mask_id
    if not is_mask.any():
        return x.copy()
    best = _decodable(model_logits(params, x), vocab).argmax(axis=-1)
    return np.where(is_mask, best, x)


def _append_state(x_t, prompt_len: int, k: int, vocab: Vocabulary) -> np.ndarray:
    body = x_t[prompt_len:]
    kept = body[(body != vocab.mask_id) & (body != vocab.eos_id) & (body != vocab.pad_id)]
    return np.concatenate([x_t[:prompt_len], kept, np.full(k, vocab.mask_id, dtype=np.int64)])


def continue_many(params: ModelParams, x_t, n: int, prompt_len: int, policy: DecodePolicy, rng=None,
                  mode: str = "append", k: int = 16, vocab: Vocabulary = VOCAB) -> np.ndarray:
    """``n`` independent continuations of one intermediate state, shape (n, L').

    ``in-place`` denoises the remaining masks where they are. ``append`` keeps
    the decoded text tokens (EOS/PAD dropped), appends ``k`` fresh masks and
    denoises those. A mask-free state is returned unchanged in both modes.
    """
    x_t = np.asarray(x_t, dtype=np.int64)
    if mode not in ("in-place", "append"):
        raise ContractError(f"unknown continuation mode {mode!r}")
    if mask_count(x_t[prompt_len:], vocab) == 0:
        return np.repeat(x_t[None], n, axis=0)
    start = x_t if mode == "in-place" else _append_state(x_t, prompt_len, k, vocab)
    if start.shape[0] > params.max_len:
        raise SequenceTooLongError(f"continuation length {start.shape[0]} exceeds max_len {params.max_len}")
    X = np.repeat(start[None], n, axis=0)
    if policy.strategy == "quota":
        for t in range(policy.steps, 0, -1):
            X, _ = _step_batch(params, X, policy, t, rng, vocab)
    else:
        while mask_count(X, vocab):
            X, _ = _step_batch(params, X, policy, 1, rng, vocab)
    return X


def continue_from(params: ModelParams, x_t, prompt_len: int, policy: DecodePolicy, rng=None,
                  mode: str = "append", k: int = 16, vocab: Vocabulary = VOCAB) -> np.ndarray:
    return continue_many(params, x_t, 1, prompt_len, policy, rng, mode, k, vocab)[0]
