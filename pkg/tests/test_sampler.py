
import numpy as np
import pytest
import torch

from conftest import random_prompt
from sapo.errors import ContractError, SequenceTooLongError
from sapo.model import init_params
from sapo.sampler import (DecodePolicy, DenoiseTrace, NoMasksWarning, continue_from, continue_many,
                          denoise_step, generate, generate_batch, init_state, mask_count, one_shot_complete)
from sapo.vocab import VOCAB

M = VOCAB.mask_id


def _bias_params(bias):
    p = init_params(seed=0, width=8, depth=1, n_heads=2, max_len=40, zero=True)
    p.arrays["b_out"][:] = torch.as_tensor(bias, dtype=torch.float64)
    return p


def test_init_state_examples():
    assert init_state([5, 6], 3).tolist() == [5, 6, M, M, M]
    assert init_state([5, 6], 0).tolist() == [5, 6]
    assert len(init_state([5, 6], 78, max_len=80)) == 80
    with pytest.raises(SequenceTooLongError):
        init_state([5, 6], 79, max_len=80)


def test_quota_schedule_counts(tiny_params):
    tr = generate(tiny_params, np.array([1, 2]), 8, DecodePolicy(steps=4), np.random.default_rng(0))
    assert [mask_count(s) for s in tr.states] == [8, 6, 4, 2, 0]
    assert tr.T == 4 and len(tr.states) == 5


def test_argmax_at_temperature_zero():
    bias = np.ones(len(VOCAB))
    bias[0] = 9.0
    x = np.array([3, 4, M])
    out = denoise_step(_bias_params(bias), x, DecodePolicy(steps=1), 1)
    assert out.tolist() == [3, 4, 0]


def test_threshold_forced_progress():
    p = _bias_params(np.zeros(len(VOCAB)))
    x = init_state([1, 2], 5)
    out = denoise_step(p, x, DecodePolicy(steps=5, strategy="threshold", threshold=1.0), 5)
    assert mask_count(x) - mask_count(out) == 1


def test_threshold_unmasks_all_confident():
    bias = np.zeros(len(VOCAB))
    bias[7] = 30.0
    out = denoise_step(_bias_params(bias), init_state([1], 4), DecodePolicy(strategy="threshold", threshold=0.9), 3)
    assert out.tolist() == [1, 7, 7, 7, 7]


def test_threshold_generation_terminates(tiny_params):
    tr = generate(tiny_params, np.array([1, 2]), 6, DecodePolicy(strategy="threshold", threshold=1.0))
    assert tr.T == 6 and mask_count(tr.final) == 0


def test_denoise_step_only_touches_masks(tiny_params):
    x = np.array([1, 2, M, 5, M, M])
    out = denoise_step(tiny_params, x, DecodePolicy(steps=3, temperature=0.9), 3, np.random.default_rng(1))
    unmasked = x != M
    assert np.array_equal(out[unmasked], x[unmasked])
    assert mask_count(out) == 2


def test_denoise_step_no_masks_warns(tiny_params):
    x = np.array([1, 2, 3])
    with pytest.warns(NoMasksWarning):
        out = denoise_step(tiny_params, x, DecodePolicy(steps=2), 1)
    assert np.array_equal(out, x)


def test_denoise_step_rejects_bad_t(tiny_params):
    with pytest.raises(ContractError):
        denoise_step(tiny_params, init_state([1], 2), DecodePolicy(steps=2), 3)


def test_never_decodes_mask_or_pad(tiny_params):
    rng = np.random.default_rng(0)
    traces = generate_batch(tiny_params, np.stack([random_prompt(rng) for _ in range(8)]), 12,
                            DecodePolicy(steps=4, temperature=2.0), rng)
    for tr in traces:
        assert not np.isin(tr.response, [VOCAB.mask_id, VOCAB.pad_id]).any()


def test_generate_deterministic_with_seed(tiny_params):
    pol = DecodePolicy(steps=4, temperature=0.9)
    a = generate(tiny_params, np.array([1, 2]), 8, pol, np.random.default_rng(5))
    b = generate(tiny_params, np.array([1, 2]), 8, pol, np.random.default_rng(5))
    assert all(np.array_equal(x, y) for x, y in zip(a.states, b.states))


def test_one_token_per_step_when_T_equals_gen_len(tiny_params):
    tr = generate(tiny_params, np.array([4]), 6, DecodePolicy(steps=6, quota=(1,) * 6))
    assert [mask_count(s) for s in tr.states] == [6, 5, 4, 3, 2, 1, 0]
    assert all(len(r.positions) == 1 for r in tr.records)


def test_batch_matches_single_at_temperature_zero(tiny_params):
    rng = np.random.default_rng(3)
    prompts = np.stack([random_prompt(rng) for _ in range(4)])
    pol = DecodePolicy(steps=4)
    batch = generate_batch(tiny_params, prompts, 8, pol)
    for p, tr in zip(prompts, batch):
        assert np.array_equal(generate(tiny_params, p, 8, pol).final, tr.final)


def test_one_shot_examples(tiny_params):
    x = np.array([1, 2, 3])
    assert np.array_equal(one_shot_complete(tiny_params, x), x)
    x = init_state([1, 2], 6)
    single = one_shot_complete(tiny_params, x)
    t1 = generate(tiny_params, np.array([1, 2]), 6, DecodePolicy(steps=1)).final
    assert np.array_equal(single, t1)
    assert mask_count(single) == 0


def test_one_shot_keeps_decoded_tokens(tiny_params):
    x = np.array([1, 2, 9, M, 9, M])
    out = one_shot_complete(tiny_params, x)
    assert out[[0, 1, 2, 4]].tolist() == [1, 2, 9, 9]


def test_continuation_identity_on_finished_state(tiny_params):
    x = np.array([1, 2, 3, 4, 5])
    for mode in ("in-place", "append"):
        assert np.array_equal(continue_from(tiny_params, x, 2, DecodePolicy(steps=2), mode=mode, k=4), x)


def test_append_length_arithmetic(tiny_params):
    x = np.array([1, 2, 7, M, 8, M, M])
    out = continue_from(tiny_params, x, 2, DecodePolicy(steps=2), np.random.default_rng(0), mode="append", k=4)
    assert len(out) == 2 + 2 + 4
    assert out[:4].tolist() == [1, 2, 7, 8]
    assert mask_count(out) == 0


def test_append_drops_eos(tiny_params):
    E = VOCAB.eos_id
    x = np.array([1, 2, 7, E, M])
    out = continue_from(tiny_params, x, 2, DecodePolicy(steps=2), mode="append", k=3)
    assert len(out) == 2 + 1 + 3 and out[2] == 7


def test_in_place_fills_remaining(tiny_params):
    x = np.array([1, 2, 7, M, 8, M])
    out = continue_from(tiny_params, x, 2, DecodePolicy(steps=2), mode="in-place")
    assert len(out) == len(x) and mask_count(out) == 0
    assert out[[0, 1, 2, 4]].tolist() == [1, 2, 7, 8]


def test_append_overflow(tiny_params):
    x = init_state(np.ones(70, dtype=np.int64), 5)
    with pytest.raises(SequenceTooLongError):
        continue_from(tiny_params, x, 70, DecodePolicy(steps=2), mode="append", k=20)


def test_continue_many_independent_draws(tiny_params):
    x = init_state([1, 2], 8)
    outs = continue_many(tiny_params, x, 6, 2, DecodePolicy(steps=4, temperature=3.0), np.random.default_rng(0),
                         mode="in-place")
    assert outs.shape == (6, 10)
    assert len({tuple(o) for o in outs}) > 1


def test_trace_jsonl_roundtrip(tiny_params):
    tr = generate(tiny_params, np.array([1, 2]), 8, DecodePolicy(steps=4, temperature=0.9), np.random.default_rng(0))
    text = tr.to_jsonl()
    lines = text.strip().splitlines()
    assert len(lines) == 5
    back = DenoiseTrace.from_jsonl(text, 2)
    assert all(np.array_equal(a, b) for a, b in zip(tr.states, back.states))
    assert [r.t for r in back.records] == [4, 3, 2, 1]


def test_trace_state_indexing(tiny_params):
    tr = generate(tiny_params, np.array([1, 2]), 8, DecodePolicy(steps=4))
    assert mask_count(tr.state(4)) == 8 and mask_count(tr.state(0)) == 0
    with pytest.raises(ContractError):
        tr.state(5)


def test_policy_validation():
    with pytest.raises(ContractError):
        DecodePolicy(steps=0)
    with pytest.raises(ContractError):
        DecodePolicy(strategy="threshold", threshold=0.0)
    with pytest.raises(ContractError):
        DecodePolicy(temperature=-1)
