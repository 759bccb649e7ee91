import numpy as np
import pytest
import torch

from sapo.model import init_params
from sapo.vocab import DIGITS, EOS, MASK, PAD, VOCAB, Vocabulary

SMALL_VOCAB = Vocabulary(DIGITS + ("STEP:", "ANS:", "?", PAD, MASK, EOS))


@pytest.fixture
def small_vocab():
    return SMALL_VOCAB


@pytest.fixture
def tiny_params():
    """Full task vocabulary, narrow model; random weights large enough to make logits vary."""
    return init_params(seed=0, width=16, depth=1, n_heads=2, max_len=80, std=0.3)


@pytest.fixture
def tiny_params32():
    return init_params(seed=0, width=16, depth=1, n_heads=2, max_len=80, std=0.3, dtype=torch.float32)


def random_prompt(rng, length=6, vocab=VOCAB):
    ordinary = [i for i in range(len(vocab)) if i not in (vocab.mask_id, vocab.pad_id, vocab.eos_id)]
    return rng.choice(ordinary, size=length).astype(np.int64)


# acceptance results, filled by tests/test_acceptance.py and printed at the end of the run
ACCEPTANCE: dict = {}


def record_criterion(number: int, ok: bool, detail: str) -> None:
    ACCEPTANCE[number] = (bool(ok), detail)
    print(f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
