"""Tiny bidirectional mask-denoising transformer.

Parameters live in a flat dict of float64 torch tensors so that autograd can
provide exact gradients for any scalar loss built from :func:`forward`.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch

from .errors import ContractError, InvalidTokenError, NumericError, SequenceTooLongError
from .optim import AdamState, adam_update, clip_by_global_norm
from .vocab import VOCAB, Vocabulary

logger = logging.getLogger(__name__)

torch.set_num_threads(1)
DTYPE = torch.float64
LN_EPS = 1e-5


@dataclass
class ModelParams:
    arrays: dict
    vocab_size: int
    width: int = 64
    depth: int = 2
    n_heads: int = 4
    max_len: int = 80

    def __post_init__(self):
        expected = param_shapes(self.vocab_size, self.width, self.depth, self.max_len)
        if set(expected) != set(self.arrays):
            raise ContractError("parameter names do not match architecture")
        # canonical order: reductions over the dict (e.g. the global grad norm) must not depend on how it was built
        self.arrays = {name: self.arrays[name] for name in expected}
        for name, shape in expected.items():
            if tuple(self.arrays[name].shape) != shape:
                raise ContractError(f"{name} has shape {tuple(self.arrays[name].shape)}, expected {shape}")
        if self.width % self.n_heads:
            raise ContractError("width must be divisible by n_heads")

    @property
    def hyper(self) -> dict:
        return dict(vocab_size=self.vocab_size, width=self.width, depth=self.depth,
                    n_heads=self.n_heads, max_len=self.max_len)

    def replace(self, arrays: dict) -> "ModelParams":
        return ModelParams(arrays, **self.hyper)

    def copy(self) -> "ModelParams":
        return self.replace({k: v.detach().clone() for k, v in self.arrays.items()})

    @property
    def dtype(self):
        return next(iter(self.arrays.values())).dtype

    def astype(self, dtype) -> "ModelParams":
        return self.replace({k: v.detach().to(dtype) for k, v in self.arrays.items()})

    def n_params(self) -> int:
        return sum(int(v.numel()) for v in self.arrays.values())

    def all_finite(self) -> bool:
        return all(bool(torch.isfinite(v).all()) for v in self.arrays.values())


def param_shapes(vocab_size, width, depth, max_len, ff_mult=4) -> dict:
    d, f = width, ff_mult * width
    shapes = {"tok_emb": (vocab_size, d), "pos_emb": (max_len, d)}
    for i in range(depth):
        p = f"l{i}."
        shapes.update({
            p + "ln1_g": (d,), p + "ln1_b": (d,),
            p + "wq": (d, d), p + "bq": (d,), p + "wk": (d, d), p + "bk": (d,),
            p + "wv": (d, d), p + "bv": (d,), p + "wo": (d, d), p + "bo": (d,),
            p + "ln2_g": (d,), p + "ln2_b": (d,),
            p + "w1": (d, f), p + "b1": (f,), p + "w2": (f, d), p + "b2": (d,),
        })
    shapes.update({"lnf_g": (d,), "lnf_b": (d,), "w_out": (d, vocab_size), "b_out": (vocab_size,)})
    return shapes


def init_params(seed=0, vocab: Vocabulary = VOCAB, width=64, depth=2, n_heads=4, max_len=80,
                std=0.02, zero=False, dtype=DTYPE) -> ModelParams:
    rng = np.random.default_rng(seed)
    arrays = {}
    for name, shape in param_shapes(len(vocab), width, depth, max_len).items():
        short = name.split(".")[-1]
        if short.endswith("_g"):
            a = np.ones(shape)
        elif zero or short.startswith("b") or short.endswith("_b"):
            a = np.zeros(shape)
        else:
            a = rng.normal(0.0, std, size=shape)
            if short in ("wo", "w2"):
                a /= math.sqrt(2 * depth)
        arrays[name] = torch.tensor(a, dtype=dtype)
    return ModelParams(arrays, len(vocab), width, depth, n_heads, max_len)


def _check_tokens(params: ModelParams, seq) -> torch.Tensor:
    ids = np.asarray(seq)
    if ids.ndim not in (1, 2):
        raise ContractError("token sequence must be 1-D or a 2-D batch")
    if ids.shape[-1] > params.max_len:
        raise SequenceTooLongError(f"sequence length {ids.shape[-1]} exceeds max_len {params.max_len}")
    if ids.size and (not np.issubdtype(ids.dtype, np.integer) or ids.min() < 0 or ids.max() >= params.vocab_size):
        raise InvalidTokenError("token id outside the vocabulary")
    return torch.as_tensor(ids.astype(np.int64))


def _layer_norm(x, g, b):
    mu = x.mean(-1, keepdim=True)
    var = ((x - mu) ** 2).mean(-1, keepdim=True)
    return (x - mu) / torch.sqrt(var + LN_EPS) * g + b


def forward(params: ModelParams, seq) -> torch.Tensor:
    """Logits of shape (..., L, V) for a sequence (L,) or batch (B, L). No causal mask."""
    ids = _check_tokens(params, seq)
    single = ids.dim() == 1
    if single:
        ids = ids[None]
    a = params.arrays
    B, L = ids.shape
    H = params.n_heads
    hd = params.width // H
    x = a["tok_emb"][ids] + a["pos_emb"][:L]
    for i in range(params.depth):
        p = f"l{i}."
        h = _layer_norm(x, a[p + "ln1_g"], a[p + "ln1_b"])
        q = (h @ a[p + "wq"] + a[p + "bq"]).view(B, L, H, hd).transpose(1, 2)
        k = (h @ a[p + "wk"] + a[p + "bk"]).view(B, L, H, hd).transpose(1, 2)
        v = (h @ a[p + "wv"] + a[p + "bv"]).view(B, L, H, hd).transpose(1, 2)
        att = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(hd), dim=-1)
        o = (att @ v).transpose(1, 2).reshape(B, L, params.width)
        x = x + o @ a[p + "wo"] + a[p + "bo"]
        h = _layer_norm(x, a[p + "ln2_g"], a[p + "ln2_b"])
        x = x + torch.nn.functional.gelu(h @ a[p + "w1"] + a[p + "b1"]) @ a[p + "w2"] + a[p + "b2"]
    x = _layer_norm(x, a["lnf_g"], a["lnf_b"])
    out = x @ a["w_out"] + a["b_out"]
    return out[0] if single else out


def logits(params: ModelParams, seq) -> np.ndarray:
    """Numpy logits without building an autograd graph."""
    with torch.no_grad():
        return forward(params, seq).numpy()


def log_softmax(row, axis=-1):
    """Max-shifted log-softmax for numpy arrays or torch tensors."""
    if isinstance(row, torch.Tensor):
        shifted = row - row.max(dim=axis, keepdim=True).values.detach()
        return shifted - torch.log(torch.exp(shifted).sum(dim=axis, keepdim=True))
    row = np.asarray(row, dtype=np.float64)
    shifted = row - row.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def grad(params: ModelParams, loss_fn: Callable[[ModelParams], torch.Tensor]) -> dict:
    """Gradient of ``loss_fn(params)`` w.r.t. every named array.

    ``loss_fn`` receives a ModelParams view whose tensors require grad and must
    return a scalar tensor. Arrays the loss does not touch get zero gradients.
    """
    leaves = {k: v.detach().clone().requires_grad_(True) for k, v in params.arrays.items()}
    loss = loss_fn(params.replace(leaves))
    if not isinstance(loss, torch.Tensor):
        loss = torch.as_tensor(float(loss), dtype=params.dtype)
    if not torch.isfinite(loss):
        raise NumericError(f"non-finite loss {float(loss.detach())}")
    names = list(leaves)
    if loss.requires_grad:
        gs = torch.autograd.grad(loss, [leaves[n] for n in names], allow_unused=True)
    else:
        gs = [None] * len(names)
    return {n: (torch.zeros_like(leaves[n]) if g is None else g.detach()) for n, g in zip(names, gs)}


def value_and_grad(params, loss_fn):
    box = {}

    def wrapped(p):
        box["loss"] = loss_fn(p)
        return box["loss"]

    g = grad(params, wrapped)
    return float(box["loss"].detach()), g


# --- mask-prediction pretraining -------------------------------------------------

@dataclass
class PretrainConfig:
    steps: int = 3000
    batch_size: int = 32
    lr: float = 3e-3
    mask_lo: float = 0.15
    mask_hi: float = 0.85
    prompt_len: int = 0
    prompt_mask_prob: float = 0.5
    holdout_frac: float = 0.1
    eval_every: int = 250
    grad_clip: float = 1.0
    completion_len_range: tuple | None = None
    seed: int = 0
    schedule: str = "constant"  # or "cosine": decays lr to lr/20 over the run


@dataclass
class PretrainRecord:
    step: int
    train_loss: float
    heldout_ce: float | None = None


def _mask_batch(batch: np.ndarray, prompt_len: int, cfg: PretrainConfig, rng, vocab: Vocabulary):
    """Mask completion tokens with a per-example ratio; optionally hide prompt tokens."""
    B, L = batch.shape
    ratios = rng.uniform(cfg.mask_lo, cfg.mask_hi, size=(B, 1))
    target_mask = rng.random((B, L)) < ratios
    target_mask[:, :prompt_len] = False
    x = batch.copy()
    x[target_mask] = vocab.mask_id
    if prompt_len and cfg.prompt_mask_prob > 0:
        hide_rows = rng.random(B) < cfg.prompt_mask_prob
        hide_ratio = rng.uniform(0.1, 0.9, size=(B, 1))
        hide = (rng.random((B, prompt_len)) < hide_ratio) & hide_rows[:, None]
        hide &= batch[:, :prompt_len] != vocab.pad_id
        x[:, :prompt_len][hide] = vocab.mask_id
    return x, target_mask


def masked_ce(params: ModelParams, x: np.ndarray, targets: np.ndarray, target_mask: np.ndarray):
    """Mean cross-entropy over masked positions (0 when nothing is masked)."""
    n = int(target_mask.sum())
    if n == 0:
        return torch.zeros((), dtype=params.dtype)
    lp = log_softmax(forward(params, x))
    picked = lp.gather(-1, torch.as_tensor(targets)[..., None])[..., 0]
    return -(picked * torch.as_tensor(target_mask, dtype=picked.dtype)).sum() / n


def _rejitter(batch: np.ndarray, prompt_len: int, lo: int, hi: int, rng, vocab: Vocabulary):
    """Resize the completion region by trimming/extending the EOS tail."""
    body = batch[:, prompt_len:]
    content = np.where(body != vocab.eos_id, np.arange(body.shape[1]), -1).max(axis=1) + 1
    lo = max(lo, int(content.max()) + 1)
    if lo > hi:
        return batch
    n = int(rng.integers(lo, hi + 1))
    out = np.full((batch.shape[0], prompt_len + n), vocab.eos_id, dtype=batch.dtype)
    out[:, :prompt_len] = batch[:, :prompt_len]
    keep = min(n, body.shape[1])
    out[:, prompt_len:prompt_len + keep] = body[:, :keep]
    return out


def pretrain_denoise(params: ModelParams, corpus, config: PretrainConfig, vocab: Vocabulary = VOCAB,
                     history: list | None = None) -> ModelParams:
    """Mask-prediction training on a corpus of equal-length token sequences."""
    from .errors import ConfigError

    if len(corpus) == 0:
        raise ConfigError("pretraining corpus is empty", field="corpus")
    data = np.stack([np.asarray(s, dtype=np.int64) for s in corpus])
    if data.shape[1] > params.max_len:
        raise SequenceTooLongError("corpus sequence longer than max_len")
    rng = np.random.default_rng(config.seed)
    order = rng.permutation(len(data))
    n_hold = int(round(len(data) * config.holdout_frac)) if len(data) > 1 else 0
    held, train = data[order[:n_hold]], data[order[n_hold:]]
    if n_hold == 0:
        held = train
    eval_rng_seed = int(rng.integers(2**31))

    def heldout_ce(p):
        erng = np.random.default_rng(eval_rng_seed)
        cfg = PretrainConfig(**{**config.__dict__, "prompt_mask_prob": 0.0})
        x, m = _mask_batch(held, config.prompt_len, cfg, erng, vocab)
        with torch.no_grad():
            return float(masked_ce(p, x, held, m))

    if config.mask_hi <= 0.0:
        if history is not None:
            history.append(PretrainRecord(0, 0.0, 0.0))
        return params.copy()

    state = AdamState()
    arrays = {k: v.detach().clone() for k, v in params.arrays.items()}
    cur = params.replace(arrays)
    if history is not None:
        history.append(PretrainRecord(0, float("nan"), heldout_ce(cur)))
    for step in range(1, config.steps + 1):
        idx = rng.integers(0, len(train), size=min(config.batch_size, len(train)))
        batch = train[idx]
        if config.completion_len_range:
            batch = _rejitter(batch, config.prompt_len, *config.completion_len_range, rng, vocab)
        x, m = _mask_batch(batch, config.prompt_len, config, rng, vocab)
        if not m.any():
            continue
        loss, g = value_and_grad(cur, lambda p: masked_ce(p, x, batch, m))
        g, _ = clip_by_global_norm(g, config.grad_clip)
        lr = config.lr
        if config.schedule == "cosine":
            lr = config.lr * (0.05 + 0.95 * 0.5 * (1 + math.cos(math.pi * (step - 1) / config.steps)))
        arrays, state = adam_update(cur.arrays, g, state, lr)
        cur = cur.replace(arrays)
        if history is not None and (step % config.eval_every == 0 or step == config.steps):
            history.append(PretrainRecord(step, loss, heldout_ce(cur)))
            logger.info("pretrain step %d loss %.4f heldout %.4f", step, loss, history[-1].heldout_ce)
    return cur


# --- checkpoint files --------------------------------------------------------------

def save_params(path, params: ModelParams, master_seed: int, vocab: Vocabulary = VOCAB, extra: dict | None = None):
    """Single .npz file; the ``__header__`` entry is JSON with shapes, vocab hash and seed."""
    header = {
        "format": "sapo-params-v1",
        "hyper": params.hyper,
        "shapes": {k: list(v.shape) for k, v in params.arrays.items()},
        "vocab_hash": vocab.hash(),
        "master_seed": int(master_seed),
        "extra": extra or {},
    }
    payload = {k: v.detach().numpy() for k, v in params.arrays.items()}
    with open(path, "wb") as fh:
        np.savez(fh, __header__=np.array(json.dumps(header, sort_keys=True)), **payload)


def load_params(path, vocab: Vocabulary = VOCAB, dtype=DTYPE) -> tuple[ModelParams, dict]:
    with np.load(path, allow_pickle=False) as data:
        header = json.loads(str(data["__header__"]))
        if header.get("vocab_hash") != vocab.hash():
            raise ContractError("checkpoint vocabulary hash does not match")
        arrays = {k: torch.tensor(data[k], dtype=dtype) for k in header["shapes"]}
    return ModelParams(arrays, **header["hyper"]), header
