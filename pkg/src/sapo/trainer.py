"""Outer RL loop (outcome-only GRPO or step-aware SAPO), pretraining and evaluation drivers."""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import os
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import ConfigError, ContractError, NumericError
from .grpo import Rollout, RolloutGroup, group_advantage, grpo_loss
from .likelihood import meanfield_logprobs, prompt_mask
from .model import (ModelParams, PretrainConfig, init_params, pretrain_denoise, value_and_grad)
from .optim import AdamState, adam_update, clip_by_global_norm
from .rng import RngStreams
from .sampler import DecodePolicy, generate_batch, one_shot_complete
from .step_reward import (ContinuationConfig, process_reward_efficient,
                          process_reward_general, sample_interval, upweight_advantage)
from .tasks import (KINDS, PROMPT_LEN, alignment_check, encode_response, make_dataset, outcome_indicator,
                    outcome_reward, reference_response)
from .vocab import VOCAB

logger = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    task: str = "countdown-mini"
    algo: str = "sapo"
    seed: int = 0
    data_seed: int = 0
    pretrain_seed: int = 0
    n_numbers: int = 3
    value_max: int = 20
    train_size: int = 2000
    test_size: int = 256
    width: int = 64
    depth: int = 2
    n_heads: int = 4
    max_len: int = 80
    pretrain_steps: int = 3000
    pretrain_lr: float = 3e-3
    pretrain_batch: int = 32
    pretrain_schedule: str = "cosine"
    G: int = 6
    T: int = 16
    gen_len: int = 32
    inner_iters: int = 12
    lr: float = 3e-4
    eps: float = 0.2
    beta: float = 0.04
    N1: int = 3
    N2: int = 3
    interval_mode: str = "efficient"
    rollout_temperature: float = 0.9
    cont_mode: str = "append"
    cont_k: int = 0
    accuracy_weight: float = 1.0
    format_weight: float = 0.2
    rproc_shared: bool = False
    outer_steps: int = 300
    batch_size: int = 1
    grad_clip: float = 1.0
    warmup_steps: int = 0
    eval_every: int = 0
    eval_size: int = 64
    checkpoint_every: int = 50
    dtype: str = "float64"

    def __post_init__(self):
        if self.cont_k <= 0:
            self.cont_k = self.gen_len // 2

    def validate(self) -> "TrainConfig":
        checks = [
            ("task", self.task in KINDS), ("algo", self.algo in ("grpo", "sapo")),
            ("G", self.G >= 2), ("T", self.T >= 2), ("gen_len", self.gen_len >= 1),
            ("inner_iters", self.inner_iters >= 1), ("lr", self.lr >= 0),
            ("eps", 0 < self.eps < 1), ("beta", self.beta >= 0), ("N1", self.N1 >= 1), ("N2", self.N2 >= 1),
            ("interval_mode", self.interval_mode in ("efficient", "general")),
            ("rollout_temperature", self.rollout_temperature >= 0),
            ("cont_mode", self.cont_mode in ("append", "in-place")),
            ("accuracy_weight", self.accuracy_weight >= 0), ("format_weight", self.format_weight >= 0),
            ("outer_steps", self.outer_steps >= 0), ("batch_size", self.batch_size >= 1),
            ("train_size", self.train_size >= 1), ("dtype", self.dtype in ("float64", "float32")),
            ("pretrain_schedule", self.pretrain_schedule in ("constant", "cosine")), ("test_size", 0 <= self.test_size),
            ("max_len", self.max_len >= PROMPT_LEN.get(self.task, 0) + self.gen_len + self.cont_k),
        ]
        for name, ok in checks:
            if not ok:
                raise ConfigError(f"invalid value for {name}: {getattr(self, name)!r}", field=name)
        return self

    def task_kwargs(self) -> dict:
        if self.task == "countdown-mini":
            return {"n_numbers": self.n_numbers, "value_max": self.value_max}
        if self.task == "arith-chain":
            return {"value_max": min(self.value_max, 9)}
        return {}

    def rollout_policy(self) -> DecodePolicy:
        return DecodePolicy(steps=self.T, temperature=self.rollout_temperature)

    def continuation(self) -> ContinuationConfig:
        return ContinuationConfig(self.cont_mode, self.cont_k, self.rollout_policy())

    def pretrain_config(self) -> PretrainConfig:
        P = PROMPT_LEN[self.task]
        return PretrainConfig(steps=self.pretrain_steps, batch_size=self.pretrain_batch, lr=self.pretrain_lr,
                              prompt_len=P, completion_len_range=(self.gen_len // 2, self.gen_len + self.cont_k),
                              seed=self.pretrain_seed, schedule=self.pretrain_schedule)

    @property
    def torch_dtype(self):
        return getattr(torch, self.dtype)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class MetricsRecord:
    step: int
    acc_reward: float
    format_reward: float
    total_reward: float
    r_proc_mean: float
    kl: float
    loss: float
    t1: int = -1
    gate_open: int = 0
    r_proc: list = field(default_factory=list)
    eval_acc: float | None = None


METRIC_COLUMNS = ["step[count]", "acc_reward[frac]", "format_reward[frac]", "total_reward[score]",
                  "r_proc_mean[acc_diff]", "kl[nats]", "loss[objective]", "t1[step]", "gate_open[count]",
                  "r_proc[acc_diff;per_rollout]", "eval_acc[frac]"]


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def metrics_row(m: MetricsRecord) -> list:
    return [m.step, _fmt(m.acc_reward), _fmt(m.format_reward), _fmt(m.total_reward), _fmt(m.r_proc_mean),
            _fmt(m.kl), _fmt(m.loss), m.t1, m.gate_open, ";".join(_fmt(float(v)) for v in m.r_proc),
            _fmt(m.eval_acc)]


@dataclass
class TrainState:
    params: ModelParams
    ref_params: ModelParams
    opt: AdamState
    step: int
    rngs: RngStreams
    train_set: list
    test_set: list = field(default_factory=list)
    history: list = field(default_factory=list)


# --- optimizer -------------------------------------------------------------------------

def optimize(params: ModelParams, grads: dict, optimizer_state: AdamState, lr: float):
    """One Adam step (decays 0.9/0.999, eps 1e-8); returns (params, optimizer_state)."""
    arrays, state = adam_update(params.arrays, grads, optimizer_state, lr)
    return params.replace(arrays), state


# --- rollouts and one outer step ----------------------------------------------------------

def collect_group(params, question, config: TrainConfig, rngs: RngStreams):
    """Sample G rollouts, score them and build SAPO-adjusted advantages.

    Returns (group, total_advantages, diagnostics).
    """
    G = config.G
    prompts = np.repeat(question.prompt[None], G, axis=0)
    traces = generate_batch(params, prompts, config.gen_len, config.rollout_policy(), rngs["rollout"])
    rollouts = []
    for tr in traces:
        rew = outcome_reward(tr.response, question, config.accuracy_weight, config.format_weight)
        rollouts.append(Rollout(tr, tr.response.copy(), rew))
    group = RolloutGroup(question, rollouts)
    adv = group_advantage([r.reward.total for r in rollouts])
    acc = np.array([r.reward.accuracy for r in rollouts], dtype=np.float64)
    diag = {"t1": -1, "r_proc": np.zeros(G)}
    if config.algo == "sapo":
        interval = sample_interval(config.T, rngs["interval"], config.interval_mode)
        cont = config.continuation()
        values = []
        for r in rollouts:
            if interval.mode == "efficient":
                pr = process_reward_efficient(params, r.trace, interval.t1, config.N1, float(np.mean(acc)),
                                              question, cont, rngs["continuation"])
            else:
                pr = process_reward_general(params, r.trace, interval, config.N1, config.N2, question, cont,
                                            rngs["continuation"])
            values.append(pr.value)
        rp = np.array(values)
        if config.rproc_shared:
            rp = np.full(G, float(rp.mean()))
        diag = {"t1": interval.t1, "r_proc": rp}
        total = upweight_advantage(adv, rp)
    else:
        total = adv
    diag["gate_open"] = int((adv > 0).sum()) if config.algo == "sapo" else 0
    return group, total, diag


def train_outer_step(state: TrainState, batch, config: TrainConfig):
    if not batch:
        raise ContractError("batch of questions is empty")
    snapshot = state.params
    rngs = state.rngs
    groups, advs, diags = [], [], []
    for q in batch:
        g, a, d = collect_group(snapshot, q, config, rngs)
        groups.append(g)
        advs.append(a)
        diags.append(d)

    mu = config.inner_iters
    ratios = rngs["promptmask"].uniform(0.1, 0.9, size=mu)
    seeds = rngs["promptmask"].integers(0, 2**63 - 1, size=mu)
    # old log-probs come from the snapshot, with the same prompt mask the loss will draw
    old = []
    with torch.no_grad():
        for j in range(mu):
            per_group = []
            for g in groups:
                P = len(g.question.prompt)
                hide = prompt_mask(P, float(ratios[j]), np.random.default_rng(int(seeds[j])))
                prompts = np.repeat(g.question.prompt[None], g.G, axis=0)
                per_group.append(meanfield_logprobs(snapshot, prompts, g.responses(), hide).numpy())
            old.append(per_group)

    params, opt = state.params, state.opt
    losses, kls = [], []
    for j in range(mu):
        for g, lp in zip(groups, old[j]):
            for r, row in zip(g.rollouts, lp):
                r.old_logprobs = row
        stats_all = []

        def loss_fn(p):
            total = torch.zeros((), dtype=p.dtype)
            for g, a in zip(groups, advs):
                st = {}
                total = total + grpo_loss(g, a, p, state.ref_params, config.eps, config.beta, float(ratios[j]),
                                          np.random.default_rng(int(seeds[j])), stats=st)
                stats_all.append(st)
            return total / len(groups)

        try:
            loss, grads = value_and_grad(params, loss_fn)
        except NumericError as exc:
            raise NumericError(f"non-finite loss at outer step {state.step + 1}", step=state.step + 1) from exc
        if not all(bool(torch.isfinite(v).all()) for v in grads.values()):
            raise NumericError(f"non-finite gradient at outer step {state.step + 1}", step=state.step + 1)
        grads, _ = clip_by_global_norm(grads, config.grad_clip)
        lr = config.lr
        if config.warmup_steps > 0:
            lr *= min(1.0, (state.step + 1) / config.warmup_steps)
        params, opt = optimize(params, grads, opt, lr)
        losses.append(loss)
        kls.append(float(np.mean([s["kl"] for s in stats_all])))

    rewards = [r.reward for g in groups for r in g.rollouts]
    rp = np.concatenate([d["r_proc"] for d in diags])
    rec = MetricsRecord(
        step=state.step + 1,
        acc_reward=float(np.mean([r.accuracy for r in rewards])),
        format_reward=float(np.mean([r.format for r in rewards])),
        total_reward=float(np.mean([r.total for r in rewards])),
        r_proc_mean=float(rp.mean()),
        kl=float(np.mean(kls)),
        loss=float(np.mean(losses)),
        t1=int(diags[0]["t1"]),
        gate_open=int(sum(d["gate_open"] for d in diags)),
        r_proc=[float(v) for v in rp],
    )
    state.params, state.opt = params, opt
    state.step += 1
    return state, rec


# --- evaluation ----------------------------------------------------------------------

def _by_prompt_len(tasks):
    groups = {}
    for i, t in enumerate(tasks):
        groups.setdefault((t.kind, len(t.prompt)), []).append(i)
    return groups


def greedy_traces(params, tasks, gen_len: int, T: int, chunk: int = 128):
    """Greedy (temperature 0) traces for every task, in input order."""
    out = [None] * len(tasks)
    policy = DecodePolicy(steps=T, temperature=0.0)
    for idx in _by_prompt_len(tasks).values():
        for s in range(0, len(idx), chunk):
            part = idx[s:s + chunk]
            prompts = np.stack([tasks[i].prompt for i in part])
            for i, tr in zip(part, generate_batch(params, prompts, gen_len, policy)):
                out[i] = tr
    return out


def evaluate(params, testset, gen_lens, T: int) -> list[dict]:
    """Greedy accuracy per (task kind, gen_len)."""
    if not testset:
        raise ContractError("test set is empty")
    rows = []
    for gl in gen_lens:
        traces = greedy_traces(params, testset, gl, T)
        by_kind = {}
        for t, tr in zip(testset, traces):
            by_kind.setdefault(t.kind, []).append(outcome_indicator(tr.response, t))
        for kind, hits in by_kind.items():
            rows.append({"task": kind, "gen_len": int(gl), "accuracy": float(np.mean(hits)), "n": len(hits)})
    return rows


def intermediate_accuracy_sweep(params, testset, probe_steps, T: int, gen_len: int = 32, traces=None) -> dict:
    """Accuracy after decoding ``s`` steps normally and the rest in one pass.

    Returns ``{"probe": {s: acc}, "full": acc}``.
    """
    if any(not 0 <= s <= T for s in probe_steps):
        raise ContractError(f"probe steps must lie in 0..{T}")
    traces = traces or greedy_traces(params, testset, gen_len, T)
    full = float(np.mean([outcome_indicator(tr.response, t) for t, tr in zip(testset, traces)]))
    probe = {}
    for s in probe_steps:
        states = np.stack([tr.state(T - s) for tr in traces])
        done = one_shot_complete(params, states)
        hits = [outcome_indicator(row[tr.prompt_len:], t) for row, tr, t in zip(done, traces, testset)]
        probe[int(s)] = float(np.mean(hits))
    return {"probe": probe, "full": full}


def alignment_ratio(testset, responses) -> dict:
    """Fraction of correct responses whose STEP chain is fully valid and reaches the answer."""
    correct = aligned = 0
    for t, r in zip(testset, responses):
        if outcome_indicator(r, t):
            correct += 1
            aligned += alignment_check(r, t).aligned
    return {"n_correct": correct, "n_aligned": aligned,
            "ratio": (aligned / correct) if correct else None}


# --- data, pretraining, checkpoints ---------------------------------------------------------

def build_datasets(config: TrainConfig):
    header, insts = make_dataset(config.task, config.train_size + config.test_size, config.data_seed,
                                 test_count=config.test_size, **config.task_kwargs())
    return insts[:config.train_size], insts[config.train_size:]


def pretrain_corpus(train_set, gen_len: int) -> list:
    return [np.concatenate([t.prompt, encode_response(reference_response(t), gen_len)]) for t in train_set]


def pretrain_key(config: TrainConfig) -> str:
    fields = ["task", "pretrain_seed", "data_seed", "dtype", "n_numbers", "value_max", "train_size", "width", "depth", "n_heads",
              "max_len", "pretrain_steps", "pretrain_lr", "pretrain_batch", "pretrain_schedule", "gen_len", "cont_k"]
    blob = json.dumps({"vocab": VOCAB.hash(), **{f: getattr(config, f) for f in fields}}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def pretrain(config: TrainConfig, train_set, cache_dir=None, history=None) -> ModelParams:
    """Mask-prediction warm start on reference solutions; cached on disk by config hash."""
    from .model import load_params, save_params

    path = None
    if cache_dir is not None:
        path = Path(cache_dir) / f"pretrain-{pretrain_key(config)}.npz"
        if path.exists():
            return load_params(path, dtype=config.torch_dtype)[0]
    p0 = init_params(seed=config.pretrain_seed, width=config.width, depth=config.depth, n_heads=config.n_heads,
                     max_len=config.max_len, dtype=config.torch_dtype)
    params = pretrain_denoise(p0, pretrain_corpus(train_set, config.gen_len), config.pretrain_config(),
                              history=history)
    if path is not None:
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(".tmp")
        save_params(tmp, params, config.pretrain_seed, extra={"config": config.to_dict()})
        os.replace(tmp, path)
    return params


def save_checkpoint(path, state: TrainState, config: TrainConfig):
    header = {"format": "sapo-train-ckpt-v1", "step": state.step, "opt_step": state.opt.step,
              "rng": state.rngs.state(), "config": config.to_dict(), "hyper": state.params.hyper, "dtype": str(state.params.dtype).replace("torch.", ""),
              "n_metrics": len(state.history)}
    arrays = {}
    for prefix, d in (("params", state.params.arrays), ("ref", state.ref_params.arrays),
                      ("m", state.opt.m), ("v", state.opt.v)):
        for k, v in d.items():
            arrays[f"{prefix}/{k}"] = v.detach().numpy()
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "wb") as fh:
        np.savez(fh, __header__=np.array(json.dumps(header, sort_keys=True)), **arrays)
    os.replace(tmp, path)


def load_checkpoint(path):
    """Returns (params, ref_params, AdamState, header)."""
    with np.load(path, allow_pickle=False) as data:
        header = json.loads(str(data["__header__"]))
        dtype = getattr(torch, header.get("dtype", "float64"))
        groups = {"params": {}, "ref": {}, "m": {}, "v": {}}
        for key in data.files:
            if key == "__header__":
                continue
            prefix, name = key.split("/", 1)
            groups[prefix][name] = torch.tensor(data[key], dtype=dtype)
    hyper = header["hyper"]
    params = ModelParams(groups["params"], **hyper)
    ref = ModelParams(groups["ref"], **hyper)
    return params, ref, AdamState(header["opt_step"], groups["m"], groups["v"]), header


def code_hash() -> str:
    h = hashlib.sha256()
    for p in sorted(Path(__file__).parent.glob("*.py")):
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return h.hexdigest()[:16]


def _write_metrics(path: Path, rows, append: bool):
    mode = "a" if append else "w"
    with open(path, mode, newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if not append:
            w.writerow(METRIC_COLUMNS)
        for m in rows:
            w.writerow(metrics_row(m))


def run_training(config: TrainConfig, out_dir=None, init=None, resume: bool = False, cache_dir=None,
                 checkpoint_steps=(), progress=None, train_set=None, test_set=None) -> TrainState:
    """Full run: data, pretraining (or ``init``), RL loop, metrics CSV and checkpoints.

    ``checkpoint_steps`` forces extra checkpoints (e.g. a mid-training snapshot).
    Datasets are generated from ``config.data_seed`` unless given.
    """
    config.validate()
    if train_set is None:
        train_set, test_set = build_datasets(config)
    test_set = test_set or []
    out = Path(out_dir) if out_dir is not None else None
    ckpt_dir = out / "checkpoints" if out is not None else None
    state = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        ckpt_dir.mkdir(exist_ok=True)
        manifest = out / "manifest.json"
        if not manifest.exists():
            manifest.write_text(json.dumps({
                "config": config.to_dict(), "code_hash": code_hash(), "master_seed": config.seed,
                "paths": {"metrics": "metrics.csv", "checkpoints": "checkpoints/"},
                "created_at": time.strftime("%Y-%m-%dT%H:%M:%S"),
            }, indent=2, sort_keys=True))
        if resume:
            ckpts = sorted(ckpt_dir.glob("step_*.npz"))
            if ckpts:
                params, ref, opt, header = load_checkpoint(ckpts[-1])
                rngs = RngStreams(config.seed)
                rngs.set_state(header["rng"])
                state = TrainState(params, ref, opt, header["step"], rngs, train_set, test_set)
                _truncate_metrics(out / "metrics.csv", header["step"])
                logger.info("resumed from %s", ckpts[-1])
    if state is None:
        params = init if init is not None else pretrain(config, train_set, cache_dir)
        state = TrainState(params.copy(), params.copy(), AdamState(), 0, RngStreams(config.seed), train_set,
                           test_set)
        if out is not None:
            _write_metrics(out / "metrics.csv", [], append=False)
    while state.step < config.outer_steps:
        idx = state.rngs["data"].integers(0, len(train_set), size=config.batch_size)
        state, rec = train_outer_step(state, [train_set[i] for i in idx], config)
        if config.eval_every and state.step % config.eval_every == 0 and test_set:
            sub = test_set[:config.eval_size]
            rec.eval_acc = evaluate(state.params, sub, [config.gen_len], config.T)[0]["accuracy"]
        state.history.append(rec)
        if out is not None:
            _write_metrics(out / "metrics.csv", [rec], append=True)
            if (config.checkpoint_every and state.step % config.checkpoint_every == 0) \
                    or state.step in checkpoint_steps or state.step == config.outer_steps:
                save_checkpoint(ckpt_dir / f"step_{state.step:06d}.npz", state, config)
        if progress is not None:
            progress(rec)
    return state


def _truncate_metrics(path: Path, step: int):
    if not path.exists():
        return
    lines = path.read_text().splitlines(keepends=True)
    keep = [lines[0]] + [ln for ln in lines[1:] if int(ln.split(",", 1)[0]) <= step]
    path.write_text("".join(keep))


def ablate_n(params, tasks, config: TrainConfig, n_values=(1, 3, 6, 9), trials: int = 200, n_states: int = 8,
             seed: int = 0) -> list[dict]:
    """Spread of the efficient process reward as a function of the continuation count.

    A fixed set of (question, rollout, t1) states is drawn once. Only correct
    rollouts have their advantage up-weighted, so states come from correct
    rollouts first; rollouts of unsolved questions fill in when there are too
    few. Each trial re-estimates R_proc with fresh continuation randomness;
    the reported std pools the per-state variances.
    """
    rng = np.random.default_rng(seed)
    cont = config.continuation()
    states, fallback = [], []
    for q in tasks:
        if len(states) >= n_states:
            break
        prompts = np.repeat(q.prompt[None], config.G, axis=0)
        traces = generate_batch(params, prompts, config.gen_len, config.rollout_policy(), rng)
        acc = np.array([outcome_indicator(tr.response, q) for tr in traces], dtype=np.float64)
        t1 = sample_interval(config.T, rng).t1
        if acc.any():
            states.append((q, traces[int(np.flatnonzero(acc)[0])], t1, float(acc.mean())))
        elif len(fallback) < n_states:
            fallback.append((q, traces[0], t1, 0.0))
    states += fallback[:n_states - len(states)]
    rows = []
    for n in n_values:
        per_state_var, values = [], []
        for q, tr, t1, gmean in states:
            vals = np.array([process_reward_efficient(params, tr, t1, n, gmean, q, cont, rng).value
                             for _ in range(trials)])
            values.append(vals)
            if trials > 1:
                per_state_var.append(vals.var(ddof=1))
        std = float(np.sqrt(np.mean(per_state_var))) if trials > 1 else None
        rows.append({"N": int(n), "std": std, "mean": float(np.mean(np.concatenate(values))), "trials": trials,
                     "states": len(states)})
    return rows
