"""scikit-learn style wrapper around pretraining plus RL fine-tuning."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .errors import ContractError
from .sampler import DecodePolicy, generate_batch
from .tasks import TaskInstance, outcome_indicator, parse_answer
from .trainer import TrainConfig, pretrain, run_training


def check_tasks(X, kind=None) -> list[TaskInstance]:
    """Validate a task list: non-empty, all TaskInstance, one kind, one prompt length."""
    if isinstance(X, TaskInstance):
        raise ContractError("expected a sequence of TaskInstance, got a single instance")
    tasks = list(X)
    if not tasks:
        raise ContractError("empty task list")
    for t in tasks:
        if not isinstance(t, TaskInstance):
            raise ContractError(f"expected TaskInstance, got {type(t).__name__}")
    kinds = {t.kind for t in tasks}
    if len(kinds) != 1:
        raise ContractError(f"mixed task kinds: {sorted(kinds)}")
    if kind is not None and kinds != {kind}:
        raise ContractError(f"estimator was configured for {kind!r}, got {kinds.pop()!r}")
    if len({len(t.prompt) for t in tasks}) != 1:
        raise ContractError("prompts differ in length")
    return tasks


class SAPOPolicy(BaseEstimator):
    """Masked-diffusion policy trained with outcome-only GRPO or step-aware SAPO.

    ``fit`` takes a list of task instances as the RL training set. Unless
    ``warm_start`` supplies parameters, a denoiser is first pretrained on the
    reference solutions of the same set. ``config`` holds any remaining
    TrainConfig fields as a dict.
    """

    def __init__(self, task="countdown-mini", algo="sapo", seed=0, outer_steps=300, G=6, T=16, gen_len=32,
                 N1=3, lr=3e-4, beta=0.04, eps=0.2, pretrain_steps=3000, dtype="float32", config=None,
                 warm_start=None, out_dir=None, cache_dir=None):
        self.task = task
        self.algo = algo
        self.seed = seed
        self.outer_steps = outer_steps
        self.G = G
        self.T = T
        self.gen_len = gen_len
        self.N1 = N1
        self.lr = lr
        self.beta = beta
        self.eps = eps
        self.pretrain_steps = pretrain_steps
        self.dtype = dtype
        self.config = config
        self.warm_start = warm_start
        self.out_dir = out_dir
        self.cache_dir = cache_dir

    def _train_config(self, n_train: int) -> TrainConfig:
        fields = dict(task=self.task, algo=self.algo, seed=self.seed, outer_steps=self.outer_steps, G=self.G,
                      T=self.T, gen_len=self.gen_len, N1=self.N1, lr=self.lr, beta=self.beta, eps=self.eps,
                      pretrain_steps=self.pretrain_steps, dtype=self.dtype, train_size=n_train, test_size=0)
        fields.update(self.config or {})
        return TrainConfig(**fields).validate()

    def fit(self, X, y=None):
        tasks = check_tasks(X, self.task)
        config = self._train_config(len(tasks))
        init = self.warm_start
        if init is None:
            init = pretrain(config, tasks, self.cache_dir)
        init = init.astype(config.torch_dtype)
        state = run_training(config, self.out_dir, init=init, train_set=tasks, test_set=[])
        self.params_ = state.params
        self.config_ = config
        self.history_ = state.history
        self.n_steps_ = state.step
        return self

    def decode(self, X):
        """Greedy responses (token arrays) for each task."""
        check_is_fitted(self, "params_")
        tasks = check_tasks(X, self.task)
        prompts = np.stack([t.prompt for t in tasks])
        traces = generate_batch(self.params_, prompts, self.config_.gen_len,
                                DecodePolicy(steps=self.config_.T), np.random.default_rng(0))
        return [tr.response for tr in traces]

    def predict(self, X) -> list:
        """Parsed final answers; None where the response has no parsable answer."""
        tasks = check_tasks(X, self.task)
        return [parse_answer(r, t) for r, t in zip(self.decode(tasks), tasks)]

    def score(self, X, y=None) -> float:
        """Greedy accuracy on ``X``."""
        tasks = check_tasks(X, self.task)
        return float(np.mean([outcome_indicator(r, t) for r, t in zip(self.decode(tasks), tasks)]))
