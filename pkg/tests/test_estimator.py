import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from sapo.errors import ContractError
from sapo.estimator import SAPOPolicy, check_tasks
from sapo.tasks import make_dataset

TINY = dict(task="arith-chain", outer_steps=2, G=3, T=4, gen_len=24, N1=2, pretrain_steps=150,
            config={"width": 16, "depth": 1, "n_heads": 2, "inner_iters": 1, "pretrain_lr": 0.01})


def test_params_roundtrip():
    est = SAPOPolicy(**TINY)
    params = est.get_params()
    assert params["algo"] == "sapo" and params["G"] == 3
    est.set_params(algo="grpo")
    assert clone(est).algo == "grpo"


def test_check_tasks():
    _, cd = make_dataset("countdown-mini", 2, 0)
    _, ar = make_dataset("arith-chain", 2, 0)
    assert len(check_tasks(cd)) == 2
    with pytest.raises(ContractError):
        check_tasks([])
    with pytest.raises(ContractError):
        check_tasks(cd + ar)
    with pytest.raises(ContractError):
        check_tasks(cd[0])
    with pytest.raises(ContractError):
        check_tasks(["not a task"])
    with pytest.raises(ContractError):
        check_tasks(cd, kind="arith-chain")


def test_unfitted():
    _, ar = make_dataset("arith-chain", 2, 0)
    with pytest.raises(NotFittedError):
        SAPOPolicy(**TINY).predict(ar)


def test_fit_predict_score():
    _, tasks = make_dataset("arith-chain", 6, 0)
    est = SAPOPolicy(**TINY).fit(tasks)
    assert est.n_steps_ == 2 and len(est.history_) == 2
    preds = est.predict(tasks)
    assert len(preds) == 6 and all(p is None or isinstance(p, int) for p in preds)
    assert 0.0 <= est.score(tasks) <= 1.0
    again = SAPOPolicy(**TINY).fit(tasks)
    assert [r.loss for r in again.history_] == [r.loss for r in est.history_]
    assert all(np.array_equal(a, b) for a, b in zip(est.decode(tasks), again.decode(tasks)))
