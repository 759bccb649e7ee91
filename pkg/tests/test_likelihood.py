import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from sapo.errors import ContractError, SequenceTooLongError
from sapo.likelihood import (LOGPROB_FLOOR, kl_estimate, meanfield_logprobs, prompt_mask, ratio,
                             seq_logprob_meanfield)
from sapo.model import forward, init_params, log_softmax
from sapo.vocab import VOCAB

PROMPT = np.array([1, 2, 3, 12, 4])
RESP = np.array([5, 6, 7, 8])


def test_repeatable_without_prompt_mask(tiny_params):
    a = seq_logprob_meanfield(tiny_params, PROMPT, RESP, 0.0, np.random.default_rng(0))
    b = seq_logprob_meanfield(tiny_params, PROMPT, RESP, 0.0, np.random.default_rng(1))
    assert np.array_equal(a, b)
    assert (a <= 0).all() and np.isfinite(a).all()


def test_uniform_model_gives_minus_log_v():
    p = init_params(seed=0, width=8, depth=1, n_heads=2, zero=True)
    out = seq_logprob_meanfield(p, PROMPT, RESP, 0.5, np.random.default_rng(0))
    assert np.allclose(out, -math.log(len(VOCAB)), atol=1e-12)


def test_matches_direct_forward(tiny_params):
    out = seq_logprob_meanfield(tiny_params, PROMPT, RESP, 0.0)
    x = np.concatenate([PROMPT, np.full(len(RESP), VOCAB.mask_id)])
    with torch.no_grad():
        direct = log_softmax(forward(tiny_params, x)).numpy()[len(PROMPT):]
    assert np.array_equal(out, direct[np.arange(len(RESP)), RESP])
    # the summed entries are the mean-field sequence log-likelihood
    assert out.sum() == pytest.approx(direct[np.arange(len(RESP)), RESP].sum(), abs=0)


def test_prompt_mask_changes_estimate(tiny_params):
    a = seq_logprob_meanfield(tiny_params, PROMPT, RESP, 0.0)
    b = seq_logprob_meanfield(tiny_params, PROMPT, RESP, 0.9, np.random.default_rng(3))
    assert not np.array_equal(a, b)


def test_prompt_mask_bounds():
    with pytest.raises(ContractError):
        prompt_mask(4, 1.0, np.random.default_rng(0))
    assert not prompt_mask(4, 0.0, None).any()
    frac = prompt_mask(10_000, 0.3, np.random.default_rng(0)).mean()
    assert abs(frac - 0.3) < 0.02


def test_overflow(tiny_params):
    with pytest.raises(SequenceTooLongError):
        seq_logprob_meanfield(tiny_params, np.ones(70, dtype=np.int64), np.ones(20, dtype=np.int64), 0.0)


def test_floor():
    p = init_params(seed=0, width=8, depth=1, n_heads=2, zero=True)
    p.arrays["b_out"][5] = -1e4
    out = seq_logprob_meanfield(p, PROMPT, RESP, 0.0)
    assert out[0] == LOGPROB_FLOOR


def test_batched_matches_single(tiny_params):
    hide = np.array([True, False, False, True, False])
    batch = meanfield_logprobs(tiny_params, np.stack([PROMPT, PROMPT]), np.stack([RESP, RESP[::-1]]), hide)
    single = meanfield_logprobs(tiny_params, PROMPT, RESP[::-1], hide)
    assert torch.allclose(batch[1], single[0], atol=1e-12)


def test_ratio_examples():
    x = np.array([-1.0, -2.0, -0.5])
    assert np.array_equal(ratio(x, x), np.ones(3))
    r = ratio(np.array([-1.0 + math.log(2), -2.0]), np.array([-1.0, -2.0]))
    assert r[0] == pytest.approx(2.0) and r[1] == 1.0
    assert ratio(np.array([-0.9]), x[:1])[0] > ratio(np.array([-1.0]), x[:1])[0]
    with pytest.raises(ContractError):
        ratio(x, x[:2])


def test_kl_examples():
    x = np.array([-1.0, -3.0])
    assert kl_estimate(x, x) == 0.0
    assert kl_estimate(x, x + math.log(2)) == pytest.approx(2 - math.log(2) - 1, abs=1e-12)
    assert kl_estimate(x, x + math.log(2)) == pytest.approx(0.3069, abs=1e-4)
    with pytest.raises(ContractError):
        kl_estimate(x, x[:1])


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, 8, elements=st.floats(-20, 0)), arrays(np.float64, 8, elements=st.floats(-20, 0)))
def test_kl_nonnegative(p, q):
    assert kl_estimate(p, q) >= 0.0
    assert kl_estimate(p, p) == 0.0
    assert np.array_equal(ratio(p, p), np.ones(8))


def test_torch_and_numpy_agree():
    a, b = np.array([-1.0, -2.5]), np.array([-0.5, -3.0])
    assert float(kl_estimate(torch.tensor(a), torch.tensor(b))) == pytest.approx(kl_estimate(a, b))
